"""Scene-cut detection and whole-frame re-localization of tracked points."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from PIL import Image
from torch import nn

from anypoint.errors import InvalidInputError
from anypoint.tensorcore import soft_argmax

DEFAULT_CUT_THRESHOLD = 0.2


@dataclass(frozen=True)
class SceneCutEvent:
    frame: int
    score: float
    threshold_used: float


def _luminance(frame):
    frame = np.asarray(frame, dtype=np.float32)
    if frame.ndim == 2:
        return frame
    return frame[..., 0] * 0.299 + frame[..., 1] * 0.587 + frame[..., 2] * 0.114


def _downsample(lum, size=32):
    return np.asarray(Image.fromarray(lum, mode="F").resize((size, size), Image.BOX))


def _histograms(frame, bins=16):
    frame = np.asarray(frame, dtype=np.float32)
    if frame.ndim == 2:
        frame = frame[..., None]
    n = frame.shape[0] * frame.shape[1]
    return np.stack([np.histogram(frame[..., c], bins=bins, range=(0.0, 1.0))[0] / n
                     for c in range(frame.shape[-1])])


def scene_cut_score(frame_t, frame_prev):
    """Mean absolute difference of 32x32 luminance plus half the mean per-channel
    histogram L1 distance. Symmetric; ranges over [0, 2]."""
    a = np.asarray(frame_t, dtype=np.float32)
    b = np.asarray(frame_prev, dtype=np.float32)
    if a.shape != b.shape:
        raise InvalidInputError(f"frame shapes differ: {a.shape} vs {b.shape}")
    mad = float(np.abs(_downsample(_luminance(a)) - _downsample(_luminance(b))).mean())
    hist = float(np.abs(_histograms(a) - _histograms(b)).sum(-1).mean())
    return mad + 0.5 * hist


def detect_scene_cut(frame_t, frame_prev, threshold=DEFAULT_CUT_THRESHOLD):
    score = scene_cut_score(frame_t, frame_prev)
    return score > threshold, score


class GlobalMatcher(nn.Module):
    """Similarity maps between the context patch and every cell, fused per cell.

    ``mode="center"`` uses only the center context feature (the point-level
    baseline); ``mode="mlp"`` fuses all N*N maps with a two-layer MLP that is
    initialized to reproduce the center map exactly.
    """

    def __init__(self, dim, n2, mode="mlp"):
        super().__init__()
        self.dim = dim
        self.n2 = n2
        self.mode = mode
        self.center_index = n2 // 2
        self.fuse = nn.Sequential(nn.Linear(n2, 4 * n2), nn.GELU(), nn.Linear(4 * n2, 1))
        self.reset_center_pick()

    @torch.no_grad()
    def reset_center_pick(self, seed=0):
        """gelu(x) - gelu(-x) == x, so two hidden units pass the center map through."""
        g = torch.Generator().manual_seed(seed)
        first, last = self.fuse[0], self.fuse[2]
        first.weight.copy_(torch.randn(first.weight.shape, generator=g) * 0.1)
        first.bias.zero_()
        last.weight.zero_()
        last.bias.zero_()
        first.weight[:2].zero_()
        first.weight[0, self.center_index] = 1.0
        first.weight[1, self.center_index] = -1.0
        last.weight[0, 0] = 1.0
        last.weight[0, 1] = -1.0
        return self

    def similarity_maps(self, X, C):
        """X (B, H, W, D), C (B, P, N2, D) -> (B, P, H, W, N2)."""
        return torch.einsum("bhwd,bpkd->bphwk", X, C)

    def heatmap(self, X, C, temperature=1.0):
        maps = self.similarity_maps(X, C)
        if self.mode == "center":
            logits = maps[..., self.center_index]
        else:
            logits = self.fuse(maps).squeeze(-1)
        B, P, H, W = logits.shape
        prob = torch.softmax(logits.reshape(B, P, H * W) / (math.sqrt(self.dim) * temperature), dim=-1)
        return prob.view(B, P, H, W)

    def forward(self, X, C, temperature=1.0):
        heat = self.heatmap(X, C, temperature)
        return soft_argmax(heat, check=False), heat


def global_match(matcher, X, C, temperature=1.0):
    """Single-point form: X a FeatureMap or (H, W, D), C (N2, D) -> position (2,)."""
    data = X.data if not isinstance(X, torch.Tensor) else X
    C = torch.as_tensor(C, dtype=data.dtype)
    if C.ndim != 2 or C.shape[-1] != data.shape[-1]:
        raise InvalidInputError("context must be N2 x D with D matching the feature map")
    pos, _ = matcher(data.unsqueeze(0), C[None, None], temperature)
    return pos[0, 0]


def maybe_rebase(decoder_positions, cut_fired, matcher=None, X=None, C=None, temperature=1.0):
    """Replace every position by its global-match result when a cut fired.

    decoder_positions (B, P, 2); X (B, H, W, D); C (B, P, N2, D).
    Returns (positions, rebased). Without a cut the input is returned as is.
    """
    if not cut_fired:
        return decoder_positions, False
    matched, _ = matcher(X, C, temperature)
    return matched.to(decoder_positions.dtype), True


def append_event(path, event):
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(asdict(event)) + "\n")
