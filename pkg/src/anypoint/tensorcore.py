"""Numeric primitives shared by every stage of the tracker.

Bilinear sampling is the one hot kernel. It has a compiled implementation in
``anypoint._kernels`` and a vectorized torch fallback. The compiled path is
picked at import time unless ``ANYPOINT_PURE_PYTHON`` is set. Both paths
follow the same corner and border rules, so switching backends only changes speed.

Coordinates are continuous feature-grid positions ``(x, y)``. ``(0, 0)`` is the
center of the top-left cell and ``(W-1, H-1)`` the center of the bottom-right one.
"""
from __future__ import annotations

import contextlib
import os
from dataclasses import dataclass

import numpy as np
import torch

from anypoint.errors import InvalidInputError

try:
    if os.environ.get("ANYPOINT_PURE_PYTHON"):
        raise ImportError("pure-python backend forced")
    from anypoint import _kernels
except ImportError:
    _kernels = None

BACKENDS = ("cython", "python") if _kernels is not None else ("python",)
_backend = BACKENDS[0]


def get_backend():
    return _backend


def set_backend(name):
    global _backend
    if name not in BACKENDS:
        raise InvalidInputError(f"backend {name!r} unavailable; choose from {BACKENDS}")
    _backend = name


@contextlib.contextmanager
def use_backend(name):
    previous = _backend
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)


# ---------------------------------------------------------------------------
# types


@dataclass(frozen=True)
class FeatureMap:
    """Dense H x W x D feature grid (channels last)."""

    data: torch.Tensor

    def __post_init__(self):
        data = torch.as_tensor(self.data)
        if not data.is_floating_point():
            data = data.float()
        if data.ndim != 3 or min(data.shape) < 1:
            raise InvalidInputError(f"feature map must be H x W x D with positive sizes, got {tuple(data.shape)}")
        if not torch.isfinite(data).all():
            raise InvalidInputError("feature map contains non-finite entries")
        object.__setattr__(self, "data", data)

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]


@dataclass(frozen=True)
class Grid:
    """N x N lattice of offsets centered on (0, 0), row-major from the top-left."""

    offsets: torch.Tensor
    size: int
    spacing: float

    @property
    def center_index(self):
        return (self.size * self.size) // 2


def make_grid(n, spacing=1.0):
    if not isinstance(n, (int, np.integer)) or n < 1 or n % 2 == 0:
        raise InvalidInputError(f"grid size must be a positive odd integer, got {n!r}")
    if not spacing > 0:
        raise InvalidInputError(f"grid spacing must be positive, got {spacing!r}")
    r = n // 2
    steps = torch.arange(-r, r + 1, dtype=torch.float64) * spacing
    yy, xx = torch.meshgrid(steps, steps, indexing="ij")
    offsets = torch.stack([xx.reshape(-1), yy.reshape(-1)], dim=-1)
    return Grid(offsets=offsets, size=int(n), spacing=float(spacing))


# ---------------------------------------------------------------------------
# bilinear sampling


def _corners(coord, n):
    inside = (coord >= 0) & (coord <= n - 1)
    c = coord.clamp(0, n - 1)
    if n >= 2:
        lo = c.floor().clamp(max=n - 2)
        hi = lo + 1
    else:
        lo = torch.zeros_like(c)
        hi = lo
    return lo.long(), hi.long(), c - lo, inside


def _gather(flat, idx):
    return torch.gather(flat, 1, idx.unsqueeze(-1).expand(-1, -1, flat.shape[-1]))


def _torch_forward(fmap, pts):
    B, H, W, D = fmap.shape
    x0, x1, fx, _ = _corners(pts[..., 0], W)
    y0, y1, fy, _ = _corners(pts[..., 1], H)
    flat = fmap.reshape(B, H * W, D)
    fx = fx.unsqueeze(-1)
    fy = fy.unsqueeze(-1)
    return ((1 - fx) * (1 - fy) * _gather(flat, y0 * W + x0)
            + fx * (1 - fy) * _gather(flat, y0 * W + x1)
            + (1 - fx) * fy * _gather(flat, y1 * W + x0)
            + fx * fy * _gather(flat, y1 * W + x1))


def _torch_backward(fmap, pts, grad_out):
    B, H, W, D = fmap.shape
    x0, x1, fx, inx = _corners(pts[..., 0], W)
    y0, y1, fy, iny = _corners(pts[..., 1], H)
    flat = fmap.reshape(B, H * W, D)
    idx = [y0 * W + x0, y0 * W + x1, y1 * W + x0, y1 * W + x1]
    v00, v01, v10, v11 = (_gather(flat, i) for i in idx)
    fx_ = fx.unsqueeze(-1)
    fy_ = fy.unsqueeze(-1)
    weights = [(1 - fx_) * (1 - fy_), fx_ * (1 - fy_), (1 - fx_) * fy_, fx_ * fy_]
    grad_flat = torch.zeros_like(flat)
    for i, w in zip(idx, weights):
        grad_flat.scatter_add_(1, i.unsqueeze(-1).expand(-1, -1, D), grad_out * w)
    gx = (grad_out * ((1 - fy_) * (v01 - v00) + fy_ * (v11 - v10))).sum(-1) * inx
    gy = (grad_out * ((1 - fx_) * (v10 - v00) + fx_ * (v11 - v01))).sum(-1) * iny
    return grad_flat.reshape(B, H, W, D), torch.stack([gx, gy], dim=-1)


def _use_kernels(fmap):
    return (_backend == "cython" and fmap.device.type == "cpu"
            and fmap.dtype in (torch.float32, torch.float64))


def bilinear_forward(fmap, pts):
    """Batched forward: ``fmap`` (B, H, W, D), ``pts`` (B, K, 2) -> (B, K, D)."""
    if _use_kernels(fmap):
        f = fmap.detach().contiguous()
        p = pts.detach().to(f.dtype).contiguous()
        out = torch.empty(f.shape[0], p.shape[1], f.shape[3], dtype=f.dtype)
        _kernels.bilinear_forward(f.numpy(), p.numpy(), out.numpy())
        return out
    return _torch_forward(fmap, pts.to(fmap.dtype))


def bilinear_backward(fmap, pts, grad_out):
    """Gradients of ``sum(grad_out * forward(fmap, pts))`` w.r.t. map and points."""
    if _use_kernels(fmap):
        f = fmap.detach().contiguous()
        p = pts.detach().to(f.dtype).contiguous()
        g = grad_out.detach().to(f.dtype).contiguous()
        grad_map = torch.zeros_like(f)
        grad_pts = torch.empty_like(p)
        _kernels.bilinear_backward(f.numpy(), p.numpy(), g.numpy(), grad_map.numpy(), grad_pts.numpy())
        return grad_map, grad_pts
    return _torch_backward(fmap, pts.to(fmap.dtype), grad_out)


class _BilinearSample(torch.autograd.Function):
    @staticmethod
    def forward(ctx, fmap, pts):
        ctx.save_for_backward(fmap, pts)
        return bilinear_forward(fmap, pts)

    @staticmethod
    def backward(ctx, grad_out):
        fmap, pts = ctx.saved_tensors
        # looked up at call time so tests can swap in a corrupted backward
        grad_map, grad_pts = globals()["bilinear_backward"](fmap, pts, grad_out)
        return (grad_map if ctx.needs_input_grad[0] else None,
                grad_pts.to(pts.dtype) if ctx.needs_input_grad[1] else None)


def sample(fmap, pts):
    """Differentiable batched sampling without input validation (hot path)."""
    if not (fmap.requires_grad or pts.requires_grad):
        return bilinear_forward(fmap, pts)
    return _BilinearSample.apply(fmap, pts)


def bilinear_sample(fmap, points):
    """Sample a single feature map at a list of (x, y) points; returns (K, D).

    Points outside the grid are clamped to the border first.
    """
    if not isinstance(fmap, FeatureMap):
        fmap = FeatureMap(torch.as_tensor(fmap))
    data = fmap.data
    pts = torch.as_tensor(points, dtype=data.dtype).reshape(-1, 2)
    if not torch.isfinite(pts).all():
        raise InvalidInputError("sampling coordinates must be finite")
    return sample(data.unsqueeze(0), pts.unsqueeze(0))[0]


# ---------------------------------------------------------------------------
# softmax / soft-argmax


def softmax(logits, scale=1.0, dim=-1):
    if not isinstance(logits, torch.Tensor):
        logits = torch.as_tensor(np.asarray(logits, dtype=np.float64))
    if not logits.is_floating_point():
        logits = logits.double()
    if logits.numel() == 0 or logits.shape[dim] == 0:
        raise InvalidInputError("softmax of an empty vector")
    return torch.softmax(logits * scale, dim=dim)


def soft_argmax(weights, check=True):
    """Probability-weighted mean coordinate of an (..., H, W) weight map -> (..., 2)."""
    weights = torch.as_tensor(weights)
    if not weights.is_floating_point():
        weights = weights.double()
    if weights.ndim < 2:
        raise InvalidInputError("soft_argmax needs at least a 2-d map")
    H, W = weights.shape[-2:]
    if check:
        total = weights.sum(dim=(-2, -1))
        if not torch.allclose(total, torch.ones_like(total), atol=1e-4, rtol=0):
            raise InvalidInputError("soft_argmax weights must sum to 1 (within 1e-4)")
    xs = torch.arange(W, dtype=weights.dtype, device=weights.device)
    ys = torch.arange(H, dtype=weights.dtype, device=weights.device)
    x = (weights.sum(-2) * xs).sum(-1)
    y = (weights.sum(-1) * ys).sum(-1)
    return torch.stack([x, y], dim=-1)


# ---------------------------------------------------------------------------
# positional tables


def _frequencies(half, dtype, device=None, base=10000.0):
    i = torch.arange(half, dtype=torch.float64, device=device)
    return (base ** (-i / half)).to(dtype)


def positional_rows(index, dim, dtype=torch.float32):
    """Sinusoidal rows for integer indices: ``[sin(t w_i) | cos(t w_i)]``.

    Rows depend only on their own index, so a table can be extended without
    changing earlier rows.
    """
    if dim % 2:
        raise InvalidInputError(f"positional dimension must be even, got {dim}")
    index = torch.as_tensor(index)
    freqs = _frequencies(dim // 2, torch.float64, index.device)
    phase = index.to(torch.float64).unsqueeze(-1) * freqs
    return torch.cat([phase.sin(), phase.cos()], dim=-1).to(dtype)


def positional_table(max_len, dim, dtype=torch.float32):
    if max_len < 1:
        raise InvalidInputError("max_len must be >= 1")
    return positional_rows(torch.arange(max_len), dim, dtype)


def rotate(x, index):
    """Rotary embedding: rotate channel pairs (i, i + D/2) by angle ``index * w_i``."""
    dim = x.shape[-1]
    rows = positional_rows(index, dim, x.dtype)
    half = dim // 2
    sin, cos = rows[..., :half], rows[..., half:]
    a, b = x[..., :half], x[..., half:]
    return torch.cat([a * cos - b * sin, a * sin + b * cos], dim=-1)


def position_encoding_2d(xy, dim, base=100.0):
    """Sinusoidal encoding of continuous (x, y) positions -> (..., dim); dim % 4 == 0."""
    if dim % 4:
        raise InvalidInputError(f"2-d position encoding needs dim divisible by 4, got {dim}")
    freqs = _frequencies(dim // 4, xy.dtype, xy.device, base=base)
    px = xy[..., :1] * freqs
    py = xy[..., 1:2] * freqs
    return torch.cat([px.sin(), px.cos(), py.sin(), py.cos()], dim=-1)


def layer_norm(x, eps=1e-5):
    return torch.nn.functional.layer_norm(x, x.shape[-1:], eps=eps)


def to_tensor(x, dtype=torch.float32):
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


__all__ = [
    "BACKENDS", "FeatureMap", "Grid", "bilinear_backward", "bilinear_forward", "bilinear_sample",
    "get_backend", "make_grid", "position_encoding_2d", "positional_rows", "positional_table",
    "rotate", "sample", "set_backend", "soft_argmax", "softmax", "use_backend",
]
