"""Point-query state: frozen content/context features and the temporal memory.

``PointQuery`` and ``TemporalMemory`` describe one tracked point. The decoder
works on whole batches, so ``QueryBatch`` and ``MemoryBank`` hold the same
information padded to (B, P, ...) tensors.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from anypoint.errors import InvalidInputError, InvalidStateError
from anypoint.tensorcore import FeatureMap, Grid, sample


@dataclass(frozen=True)
class PointQuery:
    content: torch.Tensor     # (D,)
    position: torch.Tensor    # (2,) feature-grid coordinates
    context: torch.Tensor     # (N*N, D)
    start_frame: int = 0


def prepare_query(X0, l0, grid, start_frame=0):
    """Sample the content feature at ``l0`` and the N x N context patch around it."""
    if not isinstance(X0, FeatureMap):
        X0 = FeatureMap(X0)
    data = X0.data
    l0 = torch.as_tensor(l0, dtype=data.dtype).reshape(2)
    if not torch.isfinite(l0).all():
        raise InvalidInputError("query position must be finite")
    if not (0 <= l0[0] <= X0.width - 1 and 0 <= l0[1] <= X0.height - 1):
        raise InvalidInputError(f"query position {l0.tolist()} outside the feature grid")
    f, C = prepare_queries(data.unsqueeze(0), l0.view(1, 1, 2), grid.offsets.to(data.dtype), grid.center_index)
    return PointQuery(content=f[0, 0], position=l0, context=C[0, 0], start_frame=int(start_frame))


def prepare_queries(X0, l0, offsets, center_index):
    """Batched preparation: X0 (B, H, W, D), l0 (B, P, 2) -> f (B, P, D), C (B, P, N2, D).

    ``f`` is the center row of ``C``, so the two agree bitwise.
    """
    B, P = l0.shape[:2]
    n2 = offsets.shape[0]
    pts = (l0.unsqueeze(2) + offsets.to(l0.dtype)).reshape(B, P * n2, 2)
    C = sample(X0, pts).reshape(B, P, n2, -1)
    return C[:, :, center_index], C


@dataclass(frozen=True)
class QueryBatch:
    content: torch.Tensor      # (B, P, D)
    context: torch.Tensor      # (B, P, N2, D)
    position: torch.Tensor     # (B, P, 2) start positions, feature grid
    start_frame: torch.Tensor  # (B, P) long

    def select(self, index):
        """Subset of points along the P axis (B must be 1 or index broadcastable)."""
        return QueryBatch(self.content[:, index], self.context[:, index], self.position[:, index],
                          self.start_frame[:, index])

    @classmethod
    def from_queries(cls, queries):
        return cls(
            content=torch.stack([q.content for q in queries]).unsqueeze(0),
            context=torch.stack([q.context for q in queries]).unsqueeze(0),
            position=torch.stack([q.position for q in queries]).unsqueeze(0),
            start_frame=torch.tensor([[q.start_frame for q in queries]], dtype=torch.long),
        )


# ---------------------------------------------------------------------------
# memory


@dataclass(frozen=True)
class TemporalMemory:
    """Append-only log of one point's refined features, visibilities and frame indices."""

    features: torch.Tensor       # (t, D)
    visibilities: torch.Tensor   # (t,)
    frame_indices: torch.Tensor  # (t,) long
    capacity: int | None = None

    @classmethod
    def empty(cls, dim, capacity=None, dtype=torch.float32):
        if capacity is not None and capacity < 1:
            raise InvalidInputError("memory capacity must be >= 1")
        return cls(torch.zeros(0, dim, dtype=dtype), torch.zeros(0, dtype=dtype),
                   torch.zeros(0, dtype=torch.long), capacity)

    def __len__(self):
        return self.features.shape[0]


def append_memory(mem, f_refined, alpha, frame):
    """Return a new memory with one more entry; FIFO-evicts beyond ``capacity``."""
    alpha = float(alpha)
    if not 0.0 <= alpha <= 1.0:
        raise InvalidInputError(f"visibility must lie in [0, 1], got {alpha}")
    f_refined = torch.as_tensor(f_refined, dtype=mem.features.dtype).reshape(1, -1)
    if not torch.isfinite(f_refined).all():
        raise InvalidStateError("refusing to store a non-finite feature in temporal memory")
    if len(mem) and int(frame) <= int(mem.frame_indices[-1]):
        raise InvalidStateError(f"frame {frame} is not after the last stored frame {int(mem.frame_indices[-1])}")
    feats = torch.cat([mem.features, f_refined.detach()])
    vis = torch.cat([mem.visibilities, torch.tensor([alpha], dtype=mem.visibilities.dtype)])
    frames = torch.cat([mem.frame_indices, torch.tensor([int(frame)], dtype=torch.long)])
    if mem.capacity is not None and len(frames) > mem.capacity:
        feats, vis, frames = feats[-mem.capacity:], vis[-mem.capacity:], frames[-mem.capacity:]
    return TemporalMemory(feats, vis, frames, mem.capacity)


@dataclass(frozen=True)
class MemoryBank:
    """Batched memory for (B, P) points: (B, P, t, D) features plus masks.

    Entries are indexed by frames since each point's start. ``valid`` marks
    real entries (points added mid-video have none for earlier frames).
    """

    features: torch.Tensor   # (B, P, t, D)
    alphas: torch.Tensor     # (B, P, t)
    frames: torch.Tensor     # (B, P, t) long, frames since start
    valid: torch.Tensor      # (B, P, t) bool
    capacity: int | None = None

    @classmethod
    def empty(cls, B, P, D, capacity=None, dtype=torch.float32):
        return cls(torch.zeros(B, P, 0, D, dtype=dtype), torch.zeros(B, P, 0, dtype=dtype),
                   torch.zeros(B, P, 0, dtype=torch.long), torch.zeros(B, P, 0, dtype=torch.bool), capacity)

    def __len__(self):
        return self.features.shape[2]

    def append(self, f, alpha, frame, valid=None):
        """f (B, P, D), alpha (B, P), frame (B, P) long -> new bank."""
        if valid is None:
            valid = torch.ones(alpha.shape, dtype=torch.bool)
        feats = torch.cat([self.features, f.unsqueeze(2)], dim=2)
        alphas = torch.cat([self.alphas, alpha.unsqueeze(2)], dim=2)
        frames = torch.cat([self.frames, frame.unsqueeze(2)], dim=2)
        valid = torch.cat([self.valid, valid.unsqueeze(2)], dim=2)
        if self.capacity is not None:
            rank = valid.flip(-1).cumsum(-1).flip(-1)
            valid = valid & (rank <= self.capacity)
            keep = valid.flatten(0, 1).any(0)
            if not keep.all():
                idx = keep.nonzero().squeeze(-1)
                feats, alphas, frames, valid = feats[:, :, idx], alphas[:, :, idx], frames[:, :, idx], valid[:, :, idx]
        return MemoryBank(feats, alphas, frames, valid, self.capacity)

    @classmethod
    def from_memories(cls, memories, dim, starts=None, dtype=torch.float32):
        """Stack per-point memories into a B=1 bank (frames made relative to ``starts``)."""
        P = len(memories)
        t = max((len(m) for m in memories), default=0)
        feats = torch.zeros(1, P, t, dim, dtype=dtype)
        alphas = torch.zeros(1, P, t, dtype=dtype)
        frames = torch.zeros(1, P, t, dtype=torch.long)
        valid = torch.zeros(1, P, t, dtype=torch.bool)
        for i, m in enumerate(memories):
            n = len(m)
            if n:
                feats[0, i, t - n:] = m.features.to(dtype)
                alphas[0, i, t - n:] = m.visibilities.to(dtype)
                frames[0, i, t - n:] = m.frame_indices - (0 if starts is None else int(starts[i]))
                valid[0, i, t - n:] = True
        return cls(feats, alphas, frames, valid, None)
