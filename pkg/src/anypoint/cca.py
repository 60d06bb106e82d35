"""Context-aware cross-attention with attention-based position update.

For each of M sampling points around the current estimate, the N x N patch
sampled there is compared with the query's frozen start-frame patch. The
resulting patch-level scores weight both the content aggregation and, through
a small decoupling MLP, a convex combination of the offsets that moves the point.
"""
from __future__ import annotations

import math

import torch
from torch import nn

from anypoint.errors import InvalidInputError
from anypoint.tensorcore import bilinear_sample, position_encoding_2d, sample

SIMILARITY_MODES = ("every_two_point", "element_wise", "point_level")


def ring_offsets(num, radius):
    """``num`` points evenly spaced on a circle, starting at angle 0."""
    ang = torch.arange(num, dtype=torch.float64) * (2 * math.pi / num)
    return torch.stack([radius * ang.cos(), radius * ang.sin()], dim=-1)


def patch_similarity_matrix(C, K, mode="every_two_point", center_index=None):
    """Raw similarities between a context patch ``C`` (..., N2, D) and ``K``.

    every_two_point -> (..., N2, N2) with S[i, j] = <C_i, K_j>
    element_wise    -> (..., N2)     with S[k] = <C_k, K_k>
    point_level     -> (..., 1)      center rows only
    """
    if C.shape[-2:] != K.shape[-2:]:
        raise InvalidInputError(f"context {tuple(C.shape[-2:])} and key {tuple(K.shape[-2:])} patches differ")
    if mode == "every_two_point":
        return torch.matmul(C, K.transpose(-1, -2))
    if mode == "element_wise":
        return (C * K).sum(-1)
    if mode == "point_level":
        c = C.shape[-2] // 2 if center_index is None else center_index
        return (C[..., c, :] * K[..., c, :]).sum(-1, keepdim=True)
    raise InvalidInputError(f"unknown similarity mode {mode!r}")


class PatchSimilarity(nn.Module):
    """Fuse the raw similarity representation into one score per sampling point."""

    def __init__(self, n2, mode="every_two_point"):
        super().__init__()
        if mode not in SIMILARITY_MODES:
            raise InvalidInputError(f"unknown similarity mode {mode!r}")
        self.mode = mode
        self.n2 = n2
        in_dim = {"every_two_point": n2 * n2, "element_wise": n2, "point_level": 1}[mode]
        self.mlp = nn.Sequential(nn.Linear(in_dim, 4 * n2), nn.GELU(), nn.Linear(4 * n2, 1))

    def forward(self, C, K):
        if C.shape[-2] != self.n2:
            raise InvalidInputError(f"expected {self.n2} context rows, got {C.shape[-2]}")
        S = patch_similarity_matrix(C, K, self.mode)
        if self.mode == "every_two_point":
            S = S.flatten(-2)
        return self.mlp(S).squeeze(-1)

    def batched(self, C, K):
        """C (B, P, N2, D) shared by all M key patches K (B, P, M, N2, D) -> (B, P, M)."""
        if self.mode != "every_two_point":
            return self(C.unsqueeze(2).expand_as(K), K)
        B, P, M, n2, D = K.shape
        S = torch.matmul(C, K.reshape(B, P, M * n2, D).transpose(-1, -2))   # (B, P, N2, M*N2)
        S = S.view(B, P, n2, M, n2).transpose(2, 3).reshape(B, P, M, n2 * n2)
        return self.mlp(S).squeeze(-1)


class ContextCrossAttention(nn.Module):
    def __init__(self, dim, grid_offsets, num_offsets=8, offset_radius=2.0, mode="every_two_point",
                 pos_encoding=False):
        super().__init__()
        self.dim = dim
        self.num_offsets = num_offsets
        self.pos_encoding = pos_encoding
        n2 = grid_offsets.shape[0]
        self.register_buffer("grid", grid_offsets.float().clone(), persistent=False)
        self.center_index = n2 // 2
        self.offset_mlp = nn.Sequential(nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, 2 * num_offsets))
        self.similarity = PatchSimilarity(n2, mode)
        self.value = nn.Linear(dim, dim)
        # shared per-sampling-point map: equal scores stay equal, so symmetric offsets cancel
        self.apu = nn.Sequential(nn.Linear(1, 16), nn.GELU(), nn.Linear(16, 1))
        self.norm = nn.LayerNorm(dim, eps=1e-5)
        self.reset_offsets(offset_radius)

    @torch.no_grad()
    def reset_offsets(self, radius=2.0):
        """Zero the last offset layer; its bias becomes a ring of the given radius."""
        last = self.offset_mlp[-1]
        last.weight.zero_()
        last.bias.copy_(ring_offsets(self.num_offsets, radius).reshape(-1).to(last.bias.dtype))

    def predict_offsets(self, f, l=None):
        q = f
        if self.pos_encoding and l is not None:
            q = f + position_encoding_2d(l, self.dim)
        return self.offset_mlp(q).unflatten(-1, (self.num_offsets, 2))

    def sample_keys(self, X, l, O):
        """Patches at every sampling point: (B, P, M, N2, D)."""
        B, P, M, _ = O.shape
        grid = self.grid.to(X.dtype)
        pts = l[:, :, None, None, :] + O[:, :, :, None, :] + grid
        return sample(X, pts.reshape(B, -1, 2)).reshape(B, P, M, grid.shape[0], -1)

    def forward(self, f, l, X, C):
        """f (B, P, D), l (B, P, 2), X (B, H, W, D), C (B, P, N2, D)."""
        O = self.predict_offsets(f, l)
        K = self.sample_keys(X, l, O)
        w = self.similarity.batched(C, K)                                  # (B, P, M)
        scale = math.sqrt(self.dim)
        attn = torch.softmax(w / scale, dim=-1)
        # values Bili(X, l + o_m) equal the key center rows; sampling them again keeps backward cheap
        B, P, M, _ = O.shape
        V = self.value(sample(X, (l.unsqueeze(2) + O).reshape(B, -1, 2)).reshape(B, P, M, -1))
        f = self.norm(f + torch.einsum("bpm,bpmd->bpd", attn, V))
        pos_attn = torch.softmax(self.apu(w.unsqueeze(-1)).squeeze(-1) / scale, dim=-1)
        delta = torch.einsum("bpm,bpmc->bpc", pos_attn, O)
        diag = {"offsets": O, "weights": w, "content_attn": attn, "position_attn": pos_attn, "delta": delta}
        return f, l + delta, diag


def sample_context_keys(X, l_prime, o_m, grid):
    """Single-point form: patch (N2, D) at ``l' + o_m + grid`` on feature map X (H, W, D)."""
    base = torch.as_tensor(l_prime, dtype=torch.float64) + torch.as_tensor(o_m, dtype=torch.float64)
    return bilinear_sample(X, base + grid.offsets)
