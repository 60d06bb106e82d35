"""Synthetic sprite videos with exact ground truth, and the toy feature extractor.

A sequence is a textured background seen through a (possibly panning) camera,
plus textured sprites that translate and rotate. Points are attached either
to a sprite (local coordinates) or to the background canvas. Occluders are
flat discs that sit on top of a sprite for a random interval. At a scene cut
the layout is re-drawn: the camera jumps and every sprite teleports, while
textures and point attachments persist.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy import ndimage
from torch import nn

from anypoint.errors import ConfigError, InvalidInputError
from anypoint.tensorcore import FeatureMap

TEXTURE_MODES = ("checker", "noise", "flat")


@dataclass
class WorldConfig:
    num_sprites: int = 4
    frame_size: int = 64
    video_length: int = 24
    occlusion_rate: float = 0.3
    cut_probability: float = 0.0
    texture_mode: str = "noise"
    seed: int = 0
    num_points: int = 32
    max_speed: float = 2.0
    camera_speed: float = 0.0
    sprite_point_fraction: float = 0.6
    # occlusion interval length, as a fraction of the segment length
    occlusion_span: tuple = (0.2, 0.5)

    def validate(self):
        if self.video_length < 2:
            raise ConfigError("video_length must be >= 2")
        if self.frame_size < 32:
            raise ConfigError("frame_size must be >= 32")
        for name in ("occlusion_rate", "cut_probability", "sprite_point_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.texture_mode not in TEXTURE_MODES:
            raise ConfigError(f"texture_mode must be one of {TEXTURE_MODES}")
        if self.num_sprites < 0 or self.num_points < 0:
            raise ConfigError("num_sprites and num_points must be non-negative")
        if self.max_speed < 0 or self.camera_speed < 0 or self.camera_speed > max(self.max_speed, 0):
            raise ConfigError("speeds must be non-negative and camera_speed <= max_speed")
        lo, hi = self.occlusion_span
        if not 0 < lo <= hi <= 1:
            raise ConfigError("occlusion_span must satisfy 0 < lo <= hi <= 1")
        return self

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "occlusion_span" in d:
            d["occlusion_span"] = tuple(d["occlusion_span"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown world config keys: {sorted(unknown)}")
        return cls(**d).validate()


@dataclass
class SyntheticSequence:
    frames: np.ndarray          # (T, H, W, 3) float32 in [0, 1]
    trajectories: np.ndarray    # (P, T, 2) image pixels, pixel centers at integers
    visibility: np.ndarray      # (P, T) bool
    scene_cuts: list
    seed: int
    query_frames: np.ndarray = None  # (P,) start frame of every point
    owners: np.ndarray = None        # (P,) sprite index, -1 for background
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.query_frames is None:
            self.query_frames = np.zeros(len(self.trajectories), dtype=np.int64)
        if self.owners is None:
            self.owners = np.full(len(self.trajectories), -1, dtype=np.int64)

    @property
    def num_frames(self):
        return self.frames.shape[0]

    @property
    def frame_shape(self):
        return self.frames.shape[1:3]

    def query_points(self):
        """(P, 3) array of ``x, y, start_frame`` in image pixels."""
        P = len(self.trajectories)
        idx = np.arange(P)
        xy = self.trajectories[idx, self.query_frames]
        return np.concatenate([xy, self.query_frames[:, None].astype(xy.dtype)], axis=1)


# ---------------------------------------------------------------------------
# generation


def _texture(rng, h, w, mode):
    base = rng.uniform(0.15, 0.85, size=3)
    if mode == "flat":
        img = np.broadcast_to(base, (h, w, 3)).copy()
        return img + rng.normal(0, 0.005, size=img.shape)
    if mode == "checker":
        cell = int(rng.integers(3, 7))
        ch, cw = -(-h // cell), -(-w // cell)
        cells = rng.uniform(0.05, 0.95, size=(ch, cw, 3))
        img = np.repeat(np.repeat(cells, cell, axis=0), cell, axis=1)[:h, :w]
        return ndimage.gaussian_filter(img, sigma=(0.6, 0.6, 0))
    noise = rng.normal(0, 1, size=(h, w, 3))
    img = ndimage.gaussian_filter(noise, sigma=(1.6, 1.6, 0))
    img = img / (img.std() + 1e-8) * 0.18
    return np.clip(base + img, 0.0, 1.0)


@dataclass
class _Sprite:
    half: np.ndarray        # (2,) half extents
    ellipse: bool
    texture: np.ndarray     # (th, tw, 3)
    pos: np.ndarray         # (T, 2)
    angle: np.ndarray       # (T,)

    def local(self, t, xy):
        """Sprite-local coordinates of image points ``xy`` (..., 2) at frame t."""
        d = xy - self.pos[t]
        c, s = math.cos(self.angle[t]), math.sin(self.angle[t])
        return np.stack([c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1]], axis=-1)

    def world(self, t, uv):
        c, s = math.cos(self.angle[t]), math.sin(self.angle[t])
        return self.pos[t] + np.stack([c * uv[..., 0] - s * uv[..., 1], s * uv[..., 0] + c * uv[..., 1]], -1)

    def inside(self, uv):
        q = np.abs(uv) / self.half
        if self.ellipse:
            return (q ** 2).sum(-1) <= 1.0
        return (q <= 1.0).all(-1)

    def coverage(self, uv):
        """Anti-aliased coverage in [0, 1] (about one pixel of ramp)."""
        if self.ellipse:
            r = np.sqrt(((uv / self.half) ** 2).sum(-1))
            dist = (1.0 - r) * self.half.min()
            return np.clip(dist + 0.5, 0.0, 1.0)
        m = self.half - np.abs(uv)
        return np.clip(m[..., 0] + 0.5, 0, 1) * np.clip(m[..., 1] + 0.5, 0, 1)


@dataclass
class _Occluder:
    sprite: int
    start: int
    stop: int          # exclusive
    radius: float
    color: np.ndarray

    def active(self, t):
        return self.start <= t < self.stop


def _segments(T, cuts):
    bounds = [0] + list(cuts) + [T]
    return [(bounds[i], bounds[i + 1]) for i in range(len(bounds) - 1)]


def _layout_motion(rng, cfg, sprite, start, stop):
    """Fill position/angle of one sprite over [start, stop) with bounded smooth motion."""
    S = cfg.frame_size
    r_max = float(np.linalg.norm(sprite.half))
    margin = r_max * 0.6 + 2
    pos = rng.uniform(margin, S - margin, size=2)
    if cfg.max_speed > 0:
        speed = rng.uniform(0.3, 0.6) * cfg.max_speed
        heading = rng.uniform(0, 2 * np.pi)
        vel = speed * np.array([np.cos(heading), np.sin(heading)])
        omega = rng.uniform(-1, 1) * 0.3 * cfg.max_speed / r_max
    else:
        vel = np.zeros(2)
        omega = 0.0
    angle = rng.uniform(-0.4, 0.4)
    for t in range(start, stop):
        sprite.pos[t] = pos
        sprite.angle[t] = angle
        nxt = pos + vel
        for k in range(2):
            if not margin <= nxt[k] <= S - margin:
                vel[k] = -vel[k]
        pos = pos + vel
        angle = angle + omega


def generate_sequence(cfg):
    """Render one sequence. Deterministic in ``cfg.seed``."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    S, T = cfg.frame_size, cfg.video_length

    cuts = []
    if T >= 3 and rng.uniform() < cfg.cut_probability:
        cuts = [int(rng.integers(max(1, T // 3), max(2, (2 * T) // 3) + 1))]
        cuts = [min(max(c, 1), T - 1) for c in cuts]
    segments = _segments(T, cuts)

    canvas_size = 6 * S
    canvas = _texture(rng, canvas_size, canvas_size, cfg.texture_mode)
    # slow color drift across the canvas so distant views differ in their histograms
    drift = ndimage.gaussian_filter(rng.normal(0, 1, size=(canvas_size // 8, canvas_size // 8, 3)), (3, 3, 0))
    drift = ndimage.zoom(drift / (drift.std() + 1e-8), (8, 8, 1), order=1)
    canvas = np.clip(canvas + 0.2 * drift, 0.0, 1.0)
    cam = np.zeros((T, 2))
    prev = None
    for a, b in segments:
        c0 = rng.uniform(0.5 * S, 4.5 * S, size=2)
        while prev is not None and np.linalg.norm(c0 - prev) < 1.5 * S:
            c0 = rng.uniform(0.5 * S, 4.5 * S, size=2)
        heading = rng.uniform(0, 2 * np.pi)
        v = cfg.camera_speed * np.array([np.cos(heading), np.sin(heading)])
        cam[a:b] = c0 + v * np.arange(b - a)[:, None]
        prev = cam[b - 1]

    sprites = []
    for _ in range(cfg.num_sprites):
        half = rng.uniform(0.09, 0.16, size=2) * S
        th, tw = int(2 * half[1]) + 4, int(2 * half[0]) + 4
        sp = _Sprite(half=half, ellipse=bool(rng.uniform() < 0.5),
                     texture=_texture(rng, th, tw, cfg.texture_mode),
                     pos=np.zeros((T, 2)), angle=np.zeros(T))
        for a, b in segments:
            _layout_motion(rng, cfg, sp, a, b)
        sprites.append(sp)

    occluders = []
    for i, sp in enumerate(sprites):
        for a, b in segments:
            if rng.uniform() < cfg.occlusion_rate:
                n = b - a
                lo, hi = cfg.occlusion_span
                length = max(1, int(round(rng.uniform(lo, hi) * n)))
                start = a + int(rng.integers(0, max(1, n - length) + 1))
                start = max(start, 1)  # queries are visible on frame 0
                stop = min(b, start + length)
                if stop > start:
                    occluders.append(_Occluder(i, start, stop, float(rng.uniform(0.5, 0.9) * np.linalg.norm(sp.half)),
                                               rng.uniform(0.05, 0.95, size=3)))

    frames = np.empty((T, S, S, 3), dtype=np.float32)
    ys, xs = np.mgrid[0:S, 0:S].astype(np.float64)
    pix = np.stack([xs, ys], axis=-1)
    for t in range(T):
        coords = [ys + cam[t, 1], xs + cam[t, 0]]
        img = np.stack([ndimage.map_coordinates(canvas[..., c], coords, order=1, mode="nearest")
                        for c in range(3)], axis=-1)
        for sp in sprites:
            uv = sp.local(t, pix)
            cov = sp.coverage(uv)[..., None]
            if not cov.any():
                continue
            tex_coords = [uv[..., 1] + sp.texture.shape[0] / 2 - 0.5, uv[..., 0] + sp.texture.shape[1] / 2 - 0.5]
            col = np.stack([ndimage.map_coordinates(sp.texture[..., c], tex_coords, order=1, mode="nearest")
                            for c in range(3)], axis=-1)
            img = img * (1 - cov) + col * cov
        for oc in occluders:
            if oc.active(t):
                d = np.linalg.norm(pix - sprites[oc.sprite].pos[t], axis=-1)
                cov = np.clip(oc.radius - d + 0.5, 0, 1)[..., None]
                img = img * (1 - cov) + oc.color * cov
        frames[t] = np.clip(img, 0, 1)

    trajectories, visibility, owners = _sample_points(rng, cfg, sprites, occluders, cam)
    return SyntheticSequence(frames=frames, trajectories=trajectories, visibility=visibility,
                             scene_cuts=cuts, seed=cfg.seed, owners=owners,
                             config=_config_echo(cfg))


def _config_echo(cfg):
    d = asdict(cfg)
    d["occlusion_span"] = list(d["occlusion_span"])
    return d


def _covered(t, xy, owner, sprites, occluders):
    """True where ``xy`` (P, 2) is hidden at frame t by something above ``owner``."""
    hidden = np.zeros(len(xy), dtype=bool)
    for j in range(owner + 1, len(sprites)):
        hidden |= sprites[j].inside(sprites[j].local(t, xy))
    for oc in occluders:
        if oc.active(t):
            hidden |= np.linalg.norm(xy - sprites[oc.sprite].pos[t], axis=-1) <= oc.radius
    return hidden


def _sample_points(rng, cfg, sprites, occluders, cam):
    S, T, P = cfg.frame_size, cfg.video_length, cfg.num_points
    traj = np.zeros((P, T, 2))
    owners = np.full(P, -1, dtype=np.int64)
    n_sprite = int(round(P * cfg.sprite_point_fraction)) if sprites else 0
    edge = 2.0
    filled = 0
    attempts = 0
    while filled < P:
        attempts += 1
        if attempts > 200 * max(P, 1):
            raise InvalidInputError("could not place query points; reduce num_points")
        on_sprite = filled < n_sprite
        if on_sprite:
            k = int(rng.integers(len(sprites)))
            sp = sprites[k]
            shrink = np.maximum(sp.half - 1.5, 0.5)
            uv = rng.uniform(-shrink, shrink)
            # keep 1.5 px away from the sprite edge
            if not sp.inside(uv * sp.half / shrink):
                continue
            path = np.stack([sp.world(t, uv) for t in range(T)])
            owner = k
        else:
            xy0 = rng.uniform(edge, S - 1 - edge, size=2)
            canvas_xy = xy0 + cam[0]
            path = canvas_xy[None] - cam
            owner = -1
        if _covered(0, path[:1], owner, sprites, occluders)[0]:
            continue
        p0 = path[0]
        if not (edge <= p0[0] <= S - 1 - edge and edge <= p0[1] <= S - 1 - edge):
            continue
        traj[filled] = path
        owners[filled] = owner
        filled += 1

    vis = np.ones((P, T), dtype=bool)
    for t in range(T):
        inside = (traj[:, t, 0] >= 0) & (traj[:, t, 0] <= S - 1) & (traj[:, t, 1] >= 0) & (traj[:, t, 1] <= S - 1)
        vis[:, t] = inside
        for owner in np.unique(owners):
            sel = owners == owner
            vis[sel, t] &= ~_covered(t, traj[sel, t], int(owner), sprites, occluders)
    return traj.astype(np.float32), vis, owners


# ---------------------------------------------------------------------------
# serialization


def save_sequence(seq, directory):
    directory = Path(directory)
    (directory / "frames").mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(seq.frames):
        Image.fromarray(np.round(frame * 255).astype(np.uint8)).save(directory / "frames" / f"{t:05d}.png")
    gt = {
        "version": 1,
        "frame_size": list(seq.frame_shape),
        "num_frames": int(seq.num_frames),
        "trajectories": np.asarray(seq.trajectories, dtype=np.float64).round(6).tolist(),
        "visibility": np.asarray(seq.visibility).astype(bool).tolist(),
        "scene_cuts": [int(c) for c in seq.scene_cuts],
        "query_frames": np.asarray(seq.query_frames).astype(int).tolist(),
        "owners": np.asarray(seq.owners).astype(int).tolist(),
        "seed": int(seq.seed),
        "config": seq.config,
    }
    (directory / "gt.json").write_text(json.dumps(gt))
    return directory


def load_frames(directory):
    directory = Path(directory)
    frame_dir = directory / "frames" if (directory / "frames").is_dir() else directory
    paths = sorted(frame_dir.glob("*.png"))
    if not paths:
        raise InvalidInputError(f"no PNG frames found in {frame_dir}")
    return np.stack([np.asarray(Image.open(p).convert("RGB"), dtype=np.float32) / 255.0 for p in paths])


def load_ground_truth(path):
    gt = json.loads(Path(path).read_text())
    T = int(gt["num_frames"])
    traj = np.asarray(gt["trajectories"], dtype=np.float32).reshape(-1, T, 2)
    vis = np.asarray(gt["visibility"], dtype=bool).reshape(-1, T)
    return gt, traj, vis


def load_sequence(directory):
    directory = Path(directory)
    gt, traj, vis = load_ground_truth(directory / "gt.json")
    frames = load_frames(directory)
    return SyntheticSequence(frames=frames, trajectories=traj, visibility=vis,
                             scene_cuts=list(gt.get("scene_cuts", [])), seed=int(gt.get("seed", 0)),
                             query_frames=np.asarray(gt.get("query_frames", [0] * len(traj)), dtype=np.int64),
                             owners=np.asarray(gt.get("owners", [-1] * len(traj)), dtype=np.int64),
                             config=gt.get("config", {}))


def generate_corpus(cfg, count, seed=None):
    """``count`` sequences with consecutive seeds starting at ``seed`` (default cfg.seed)."""
    base = cfg.seed if seed is None else seed
    out = []
    for i in range(count):
        c = WorldConfig(**{**asdict(cfg), "seed": base + i})
        out.append(generate_sequence(c))
    return out


# ---------------------------------------------------------------------------
# coordinates and features


def image_to_feature_coords(p, stride):
    return (np.asarray(p, dtype=np.float64) + 0.5) / stride - 0.5 if not isinstance(p, torch.Tensor) \
        else (p + 0.5) / stride - 0.5


def feature_to_image_coords(q, stride):
    return (np.asarray(q, dtype=np.float64) + 0.5) * stride - 0.5 if not isinstance(q, torch.Tensor) \
        else (q + 0.5) * stride - 0.5


class FeatureExtractor(nn.Module):
    """Small conv stack: stride-1 convolutions with 2x average pooling between them.

    Pooling (rather than strided convolution) keeps the extractor exactly
    equivariant to horizontal flips when the kernels are symmetric.
    """

    def __init__(self, dim=32, stride=4, width=16):
        super().__init__()
        if stride < 1 or stride & (stride - 1):
            raise ConfigError(f"stride must be a power of two, got {stride}")
        self.dim = dim
        self.stride = stride
        layers = [nn.Conv2d(3, width, 3, padding=1), nn.GELU()]
        c = width
        for _ in range(int(math.log2(stride))):
            layers += [nn.AvgPool2d(2), nn.Conv2d(c, 2 * c, 3, padding=1), nn.GELU()]
            c = 2 * c
        layers += [nn.Conv2d(c, dim, 3, padding=1), nn.GELU(), nn.Conv2d(dim, dim, 1)]
        self.body = nn.Sequential(*layers)
        self.norm = nn.LayerNorm(dim)

    def forward(self, frames):
        """frames (B, H, W, 3) in [0, 1] -> features (B, H/stride, W/stride, D)."""
        H, W = frames.shape[1:3]
        if H % self.stride or W % self.stride:
            raise InvalidInputError(f"frame size {H}x{W} not divisible by stride {self.stride}")
        x = frames.permute(0, 3, 1, 2) - 0.5
        return self.norm(self.body(x).permute(0, 2, 3, 1))

    @torch.no_grad()
    def symmetrize_(self):
        """Make every conv kernel symmetric under horizontal flip."""
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                m.weight.copy_(0.5 * (m.weight + m.weight.flip(-1)))
        return self


def extract_features(extractor, frame):
    """Single (H, W, 3) frame -> FeatureMap, in evaluation mode."""
    frame = torch.as_tensor(np.asarray(frame, dtype=np.float32))
    if frame.ndim != 3 or frame.shape[-1] != 3:
        raise InvalidInputError("frame must be H x W x 3")
    was_training = extractor.training
    extractor.eval()
    try:
        with torch.no_grad():
            out = extractor(frame.unsqueeze(0))[0]
    finally:
        extractor.train(was_training)
    return FeatureMap(out)
