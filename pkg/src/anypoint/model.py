"""The tracker network and the per-frame stepping logic shared by training and inference."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from anypoint.config import ModelConfig
from anypoint.decoder import Decoder
from anypoint.errors import ConfigError, InvalidInputError
from anypoint.globalmatch import GlobalMatcher, maybe_rebase
from anypoint.query import MemoryBank, QueryBatch, prepare_queries
from anypoint.synthworld import FeatureExtractor, feature_to_image_coords, image_to_feature_coords
from anypoint.tensorcore import make_grid

CHECKPOINT_FORMAT = "anypoint-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class TrackState:
    """Everything carried from one frame to the next for a batch of points."""

    queries: QueryBatch
    positions: torch.Tensor   # (B, P, 2) feature grid, last prediction
    anchor: torch.Tensor      # (B, P, 2) init positions for the current window
    memory: MemoryBank

    @property
    def num_points(self):
        return self.positions.shape[1]


@dataclass
class StepOutput:
    positions: torch.Tensor              # (B, P, 2) after rebase
    visibilities: torch.Tensor           # (B, P)
    per_layer_positions: torch.Tensor    # (L, B, P, 2)
    per_layer_visibilities: torch.Tensor  # (L, B, P)
    rebased: torch.Tensor                # (B,) bool
    diagnostics: list


@dataclass
class Unroll:
    """Outputs over a clip. Positions are image pixels."""

    positions: torch.Tensor       # (L, B, P, T, 2)
    visibilities: torch.Tensor    # (L, B, P, T)
    rebased: torch.Tensor         # (B, T) bool

    @property
    def final_positions(self):
        return self.positions[-1]

    @property
    def final_visibilities(self):
        return self.visibilities[-1]


class TrackerModel(nn.Module):
    def __init__(self, cfg=None):
        super().__init__()
        cfg = (cfg or ModelConfig()).validate()
        self.cfg = cfg
        grid = make_grid(cfg.grid_size, cfg.grid_spacing)
        self.register_buffer("grid_offsets", grid.offsets.float(), persistent=False)
        self.center_index = grid.center_index
        self.extractor = FeatureExtractor(cfg.feature_dim, cfg.stride, cfg.extractor_width)
        self.decoder = Decoder(cfg, grid.offsets)
        self.matcher = GlobalMatcher(cfg.feature_dim, grid.offsets.shape[0], cfg.fusion_mode)

    @property
    def stride(self):
        return self.cfg.stride

    @property
    def dtype(self):
        return self.decoder.visibility.mlp[0].weight.dtype

    def features(self, frames):
        """frames (..., H, W, 3) in [0, 1] -> (..., H/s, W/s, D)."""
        frames = torch.as_tensor(frames, dtype=self.dtype)
        lead = frames.shape[:-3]
        out = self.extractor(frames.reshape(-1, *frames.shape[-3:]))
        return out.reshape(*lead, *out.shape[1:])

    def to_feature(self, xy):
        return image_to_feature_coords(xy, self.stride)

    def to_image(self, xy):
        return feature_to_image_coords(xy, self.stride)

    def prepare(self, X, query_xy, start):
        """Build queries from per-frame features.

        X (B, T, h, w, D) or a callable frame -> (B, h, w, D); query_xy (B, P, 2)
        image pixels; start (B, P) long. Each point samples its own start frame.
        """
        B, P = start.shape
        l0 = self.to_feature(torch.as_tensor(query_xy, dtype=self.dtype))
        D = self.cfg.feature_dim
        n2 = self.grid_offsets.shape[0]
        content = torch.zeros(B, P, D, dtype=self.dtype)
        context = torch.zeros(B, P, n2, D, dtype=self.dtype)
        for s in torch.unique(start).tolist():
            Xs = X[:, s] if isinstance(X, torch.Tensor) else X(s)
            f, C = prepare_queries(Xs, l0, self.grid_offsets, self.center_index)
            sel = (start == s)
            content = torch.where(sel[..., None], f, content)
            context = torch.where(sel[..., None, None], C, context)
        return QueryBatch(content=content, context=context, position=l0, start_frame=start)

    def initial_state(self, queries):
        B, P = queries.start_frame.shape
        mem = MemoryBank.empty(B, P, self.cfg.feature_dim, self.cfg.memory_cap, dtype=queries.content.dtype)
        return TrackState(queries=queries, positions=queries.position.clone(), anchor=queries.position.clone(),
                          memory=mem)

    def step(self, state, X_t, t, cut=None, rebase="off", window=1):
        """Advance every point by one frame ``t`` (absolute index).

        ``cut`` (B,) bool marks frames where a scene cut was detected.
        Returns (new_state, StepOutput).
        """
        q = state.queries
        B, P = q.start_frame.shape
        active = q.start_frame <= t
        fresh = (q.start_frame == t)[..., None]
        if window > 1 and t % window == 0:
            anchor = state.positions
        elif window > 1:
            anchor = state.anchor
        else:
            anchor = state.positions
        anchor = torch.where(fresh, q.position, anchor)
        t_index = (t - q.start_frame).clamp_min(0)
        mem = state.memory
        out = self.decoder(q.content, q.context, anchor, X_t, t_index,
                           (mem.features, mem.alphas, mem.frames, mem.valid), active)

        positions = out.positions
        if rebase == "always":
            fire = torch.ones(B, dtype=torch.bool)
        elif rebase == "on_cut" and cut is not None:
            fire = torch.as_tensor(cut, dtype=torch.bool).reshape(B)
        else:
            fire = torch.zeros(B, dtype=torch.bool)
        if fire.any():
            matched, _ = maybe_rebase(positions, True, self.matcher, X_t, q.context)
            replace = (fire[:, None] & active & ~fresh[..., 0])[..., None]
            positions = torch.where(replace, matched, positions)
            fire = replace.squeeze(-1).any(-1)
        layer_pos = torch.cat([out.per_layer_positions[:-1], positions.unsqueeze(0)])

        keep = positions.detach() if self.cfg.detach_position else positions
        keep = torch.where(active[..., None], keep, q.position)
        f_mem = out.refined.detach() if self.cfg.detach_memory else out.refined
        alpha = out.visibilities.detach() if self.cfg.detach_memory else out.visibilities
        memory = mem.append(f_mem, alpha, t_index, active)
        new_state = TrackState(queries=q, positions=keep, anchor=anchor, memory=memory)
        return new_state, StepOutput(positions=positions, visibilities=out.visibilities,
                                     per_layer_positions=layer_pos,
                                     per_layer_visibilities=out.per_layer_visibilities,
                                     rebased=fire, diagnostics=out.diagnostics)

    def unroll(self, frames, query_xy, start=None, cuts=None, rebase="off", window=1):
        """Track a batch of clips. frames (B, T, H, W, 3); query_xy (B, P, 2) image pixels.

        ``cuts`` (B, T) bool marks cut frames for ``rebase="on_cut"``.
        """
        frames = torch.as_tensor(frames, dtype=self.dtype)
        B, T = frames.shape[:2]
        query_xy = torch.as_tensor(query_xy, dtype=self.dtype)
        if start is None:
            start = torch.zeros(query_xy.shape[:2], dtype=torch.long)
        start = torch.as_tensor(start, dtype=torch.long)
        X = self.features(frames)
        state = self.initial_state(self.prepare(X, query_xy, start))
        pos, vis, rebased = [], [], []
        # unbind has one backward node; indexing X[:, t] would allocate a full-size gradient per frame
        for t, X_t in enumerate(X.unbind(1)):
            cut_t = None if cuts is None else torch.as_tensor(cuts)[:, t]
            state, out = self.step(state, X_t, t, cut_t, rebase, window)
            pos.append(out.per_layer_positions)
            vis.append(out.per_layer_visibilities)
            rebased.append(out.rebased)
        positions = self.to_image(torch.stack(pos, dim=3))
        return Unroll(positions=positions, visibilities=torch.stack(vis, dim=3), rebased=torch.stack(rebased, 1))

    def stage2_parameters(self):
        return list(self.matcher.fuse.parameters())


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model, path, extra=None):
    """Write a versioned npz: a ``__meta__`` JSON blob plus one array per parameter."""
    from dataclasses import asdict
    meta = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "model": asdict(model.cfg),
            "extra": extra or {}}
    blobs = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    blobs["__meta__"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **blobs)
    return path


def load_checkpoint(path):
    """Returns (model, meta)."""
    with np.load(path) as data:
        if "__meta__" not in data:
            raise ConfigError(f"{path}: not a tracker checkpoint")
        meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
        if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint {meta.get('format')} v{meta.get('version')}")
        model = TrackerModel(ModelConfig(**meta["model"]))
        state = {k: torch.from_numpy(np.array(data[k])) for k in data.files if k != "__meta__"}
    missing = set(model.state_dict()) - set(state)
    if missing:
        raise InvalidInputError(f"{path}: missing parameters {sorted(missing)}")
    model.load_state_dict(state)
    return model, meta
