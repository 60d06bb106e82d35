"""Online tracking sessions: frames in, per-point position and visibility records out."""
from __future__ import annotations

import copy
import json
import math
import os
from dataclasses import dataclass

import numpy as np
import torch

from anypoint.config import Config, TrackConfig
from anypoint.errors import InvalidInputError, InvalidStateError, TrackFileError
from anypoint.globalmatch import SceneCutEvent, append_event, detect_scene_cut
from anypoint.model import TrackerModel, TrackState
from anypoint.query import MemoryBank, PointQuery, QueryBatch, TemporalMemory, prepare_queries

TRACK_HEADER = "# anypoint-tracks v1"


@dataclass(frozen=True)
class TrackRecord:
    point_id: int
    frame: int
    x: float
    y: float
    visibility: float
    rebased: bool = False

    @classmethod
    def make(cls, point_id, frame, x, y, visibility, rebased=False):
        """Round to the track-file precision so save/load round trips exactly."""
        return cls(int(point_id), int(frame), round(float(x), 4), round(float(y), 4),
                   round(float(visibility), 6), bool(rebased))


def _as_frame(image):
    a = np.asarray(image)
    if a.dtype == np.uint8:
        a = a.astype(np.float32) / 255.0
    a = a.astype(np.float32, copy=False)
    if a.ndim != 3 or a.shape[-1] != 3:
        raise InvalidInputError(f"expected an H x W x 3 frame, got shape {a.shape}")
    return a


class TrackerSession:
    """Single-writer tracking state. Create with :func:`open_session`."""

    def __init__(self, model, cfg):
        self.model = model.eval()
        self.config = copy.deepcopy(cfg)
        self.frame_counter = 0
        self.prev_frame_image = None
        self.frame_shape = None
        self.events = []
        self._state = None
        self._cached = None   # (frame index, features) from add_points

    # -- views -------------------------------------------------------------
    @property
    def num_points(self):
        return 0 if self._state is None else self._state.num_points

    @property
    def queries(self):
        if self._state is None:
            return []
        q = self._state.queries
        return [PointQuery(q.content[0, i], q.position[0, i], q.context[0, i], int(q.start_frame[0, i]))
                for i in range(self.num_points)]

    @property
    def memories(self):
        if self._state is None:
            return []
        m = self._state.memory
        starts = self._state.queries.start_frame[0]
        out = []
        for i in range(self.num_points):
            v = m.valid[0, i]
            out.append(TemporalMemory(m.features[0, i][v], m.alphas[0, i][v], m.frames[0, i][v] + starts[i],
                                      self.model.cfg.memory_cap))
        return out

    # -- internals ---------------------------------------------------------
    def _check_shape(self, frame):
        if self.frame_shape is None:
            self.frame_shape = frame.shape
        elif frame.shape != self.frame_shape:
            raise InvalidStateError(f"frame shape changed from {self.frame_shape} to {frame.shape}")

    def _features(self, frame):
        if self._cached is not None and self._cached[0] == self.frame_counter:
            return self._cached[1]
        with torch.no_grad():
            X = self.model.features(torch.from_numpy(frame)[None])
        self._cached = (self.frame_counter, X)
        return X

    def _extend(self, batch):
        if self._state is None:
            self._state = self.model.initial_state(batch)
            return
        s = self._state
        q = s.queries
        queries = QueryBatch(torch.cat([q.content, batch.content], 1), torch.cat([q.context, batch.context], 1),
                             torch.cat([q.position, batch.position], 1),
                             torch.cat([q.start_frame, batch.start_frame], 1))
        m = s.memory
        P, t = batch.content.shape[1], m.features.shape[2]
        memory = MemoryBank(torch.cat([m.features, m.features.new_zeros(1, P, t, m.features.shape[-1])], 1),
                            torch.cat([m.alphas, m.alphas.new_zeros(1, P, t)], 1),
                            torch.cat([m.frames, m.frames.new_zeros(1, P, t)], 1),
                            torch.cat([m.valid, m.valid.new_zeros(1, P, t)], 1), m.capacity)
        self._state = TrackState(queries, torch.cat([s.positions, batch.position], 1),
                                 torch.cat([s.anchor, batch.position], 1), memory)

    def _dump(self, t, out):
        diag_dir = self.config.diag_dir or "diag"
        os.makedirs(diag_dir, exist_ok=True)
        stride = self.model.stride
        vlta = {"frame": t, "layers": []}
        for i, layer in enumerate(out.diagnostics):
            if "vlta" in layer:
                vlta["layers"].append({"layer": i, "weights": layer["vlta"][0].tolist()})
            if "cca" in layer:
                c = layer["cca"]
                pos = out.per_layer_positions[i, 0] - c["delta"][0]
                samples = pos.unsqueeze(1) + c["offsets"][0]
                with open(os.path.join(diag_dir, f"cca_t{t}_layer{i}.json"), "w", encoding="utf-8") as fh:
                    json.dump({"frame": t, "layer": i,
                               "sampling_positions_image": ((samples + 0.5) * stride - 0.5).tolist(),
                               "offsets": c["offsets"][0].tolist(),
                               "patch_weights": c["weights"][0].tolist(),
                               "content_attention": c["content_attn"][0].tolist(),
                               "position_attention": c["position_attn"][0].tolist(),
                               "position_update": c["delta"][0].tolist()}, fh)
        with open(os.path.join(diag_dir, f"vlta_t{t}.json"), "w", encoding="utf-8") as fh:
            json.dump(vlta, fh)

    # -- public ------------------------------------------------------------
    def add_points(self, frame_image, points):
        """Start tracking ``points`` (image-pixel (x, y)) on the current frame. Returns their ids."""
        frame = _as_frame(frame_image)
        self._check_shape(frame)
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        H, W = frame.shape[:2]
        if not np.isfinite(pts).all():
            raise InvalidInputError("query points must be finite")
        bad = (pts[:, 0] < 0) | (pts[:, 0] > W - 1) | (pts[:, 1] < 0) | (pts[:, 1] > H - 1)
        if bad.any():
            raise InvalidInputError(f"points outside the {W}x{H} frame: {pts[bad].tolist()}")
        if len(pts) == 0:
            return []
        X = self._features(frame)
        l0 = self.model.to_feature(torch.as_tensor(pts, dtype=torch.float32))[None]
        with torch.no_grad():
            f, C = prepare_queries(X, l0, self.model.grid_offsets, self.model.center_index)
        first = self.num_points
        start = torch.full((1, len(pts)), self.frame_counter, dtype=torch.long)
        self._extend(QueryBatch(f, C, l0, start))
        return list(range(first, first + len(pts)))

    def step(self, frame_image):
        """Consume the next frame; returns one record per started point."""
        frame = _as_frame(frame_image)
        self._check_shape(frame)
        t = self.frame_counter
        cut = False
        if self.prev_frame_image is not None:
            cut, score = detect_scene_cut(frame, self.prev_frame_image, self.config.cut_threshold)
            if cut:
                ev = SceneCutEvent(frame=t, score=float(score), threshold_used=float(self.config.cut_threshold))
                self.events.append(ev)
                if self.config.events_path:
                    append_event(self.config.events_path, ev)
        records = []
        if self.num_points:
            X = self._features(frame)
            with torch.no_grad():
                self._state, out = self.model.step(self._state, X, t, torch.tensor([cut]), self.config.rebase,
                                                   self.config.window)
            if self.config.dump_attn:
                self._dump(t, out)
            xy = self.model.to_image(out.positions[0]).numpy()
            vis = out.visibilities[0].numpy()
            rebased = bool(out.rebased[0])
            starts = self._state.queries.start_frame[0].tolist()
            for i in range(self.num_points):
                if starts[i] <= t:
                    records.append(TrackRecord.make(i, t, xy[i, 0], xy[i, 1], vis[i], rebased))
        self.prev_frame_image = frame
        self.frame_counter += 1
        self._cached = None
        return records


def open_session(cfg=None, model=None):
    """New empty session. ``cfg`` is a Config or TrackConfig; ``model`` defaults to a fresh network."""
    if cfg is None:
        cfg = Config()
    if isinstance(cfg, Config):
        cfg.validate()
        track = cfg.track
        if model is None:
            torch.manual_seed(cfg.train.seed)
            model = TrackerModel(cfg.model)
    else:
        track = cfg
        track.validate()
        if model is None:
            model = TrackerModel()
    return TrackerSession(model, track)


def track_video(session, frames, queries):
    """Run a whole video. ``queries`` rows are (x, y, start_frame). Returns all records."""
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    order = np.argsort(queries[:, 2], kind="stable")
    ids = np.empty(len(queries), dtype=np.int64)
    records = []
    for t, frame in enumerate(frames):
        sel = order[queries[order, 2] == t]
        if len(sel):
            ids[sel] = session.add_points(frame, queries[sel, :2])
        records.extend(session.step(frame))
    # report ids in query-file order
    remap = {int(sid): i for i, sid in enumerate(ids)}
    return sorted((TrackRecord(remap[r.point_id], r.frame, r.x, r.y, r.visibility, r.rebased) for r in records),
                  key=lambda r: (r.frame, r.point_id))


def records_to_arrays(records, num_points, num_frames):
    """Dense (P, T, 2) positions and (P, T) visibilities; missing pairs are NaN / 0."""
    pos = np.full((num_points, num_frames, 2), np.nan)
    vis = np.zeros((num_points, num_frames))
    rebased = np.zeros((num_points, num_frames), dtype=bool)
    for r in records:
        if not (0 <= r.point_id < num_points and 0 <= r.frame < num_frames):
            raise InvalidInputError(f"record ({r.point_id}, {r.frame}) outside {num_points} points x {num_frames} frames")
        pos[r.point_id, r.frame] = (r.x, r.y)
        vis[r.point_id, r.frame] = r.visibility
        rebased[r.point_id, r.frame] = r.rebased
    return pos, vis, rebased


# ---------------------------------------------------------------------------
# track files


def save_tracks(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(TRACK_HEADER + "\n")
        for r in sorted(records, key=lambda r: (r.frame, r.point_id)):
            if not (math.isfinite(r.x) and math.isfinite(r.y) and math.isfinite(r.visibility)):
                raise InvalidInputError(f"non-finite record for point {r.point_id} frame {r.frame}")
            fh.write(f"{r.point_id} {r.frame} {r.x:.4f} {r.y:.4f} {r.visibility:.6f} {int(r.rebased)}\n")
    return path


def _parse_line(text, lineno):
    parts = text.split()
    if len(parts) != 6:
        raise TrackFileError(f"expected 6 fields, got {len(parts)}", lineno)
    try:
        pid, frame = int(parts[0]), int(parts[1])
        x, y, vis = float(parts[2]), float(parts[3]), float(parts[4])
        rebased = int(parts[5])
    except ValueError as exc:
        raise TrackFileError(f"malformed field ({exc})", lineno) from None
    if not all(math.isfinite(v) for v in (x, y, vis)):
        raise TrackFileError("non-finite value", lineno)
    if pid < 0 or frame < 0:
        raise TrackFileError("negative point id or frame", lineno)
    if not 0.0 <= vis <= 1.0:
        raise TrackFileError(f"visibility {vis} outside [0, 1]", lineno)
    if rebased not in (0, 1):
        raise TrackFileError(f"rebased flag must be 0 or 1, got {rebased}", lineno)
    return TrackRecord(pid, frame, x, y, vis, bool(rebased))


def load_tracks(path):
    records = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != TRACK_HEADER:
            raise TrackFileError(f"bad header {header!r}", 1)
        seen = set()
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            r = _parse_line(line, lineno)
            if (r.point_id, r.frame) in seen:
                raise TrackFileError(f"duplicate record for point {r.point_id} frame {r.frame}", lineno)
            seen.add((r.point_id, r.frame))
            records.append(r)
    return records
