"""Visibility-aware long-temporal attention over a point's past refined features."""
from __future__ import annotations

import math

import torch
from torch import nn

from anypoint.errors import InvalidInputError, InvalidStateError
from anypoint.tensorcore import positional_rows, rotate

EPS = 1e-8


class TemporalProjections(nn.Module):
    """Learned query/key/value maps. ``identity_init`` reproduces the raw-feature form."""

    def __init__(self, dim, identity_init=False):
        super().__init__()
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        if identity_init:
            self.reset_identity()

    @torch.no_grad()
    def reset_identity(self):
        for lin in (self.q, self.k, self.v):
            lin.weight.copy_(torch.eye(lin.weight.shape[0], dtype=lin.weight.dtype))
            lin.bias.zero_()
        return self

    def forward(self, f=None, F=None, F_key=None):
        """Project a query ``f`` and/or memory ``F``; returns (q, k, v) with None where absent.

        ``F_key`` (default ``F``) feeds the key map only, so positional terms
        can enter the logits without leaking into the values.
        """
        F_key = F if F_key is None else F_key
        q = self.q(f) if f is not None else None
        k = self.k(F_key) if F_key is not None else None
        v = self.v(F) if F is not None else None
        return q, k, v


def reweight(d_prime, alphas, mode="renorm", eps=EPS):
    """Scale an attention distribution by visibilities.

    ``renorm`` divides by ``sum(d' * a)`` and falls back to ``d'`` when every
    past frame looks occluded; ``paper_literal`` divides by ``sum(a)``.
    """
    num = d_prime * alphas
    if mode == "renorm":
        total = num.sum(-1, keepdim=True)
        return torch.where(total > eps, num / total.clamp_min(eps), d_prime)
    if mode == "paper_literal":
        return num / alphas.sum(-1, keepdim=True).clamp_min(eps)
    raise InvalidInputError(f"unknown normalization {mode!r}")


class VLTA(nn.Module):
    def __init__(self, dim, visibility_aware=True, norm="renorm", rope_mode="additive", num_heads=1,
                 identity_init=False):
        super().__init__()
        if dim % num_heads:
            raise InvalidInputError("num_heads must divide dim")
        self.dim = dim
        self.num_heads = num_heads
        self.visibility_aware = visibility_aware
        self.norm_mode = norm
        self.rope_mode = rope_mode
        self.proj = TemporalProjections(dim, identity_init=identity_init)
        self.norm = nn.LayerNorm(dim, eps=1e-5)

    def forward(self, f, t_index, F, alphas, frames, valid):
        """f (B, P, D); t_index (B, P) frames since start; memory tensors (B, P, t, ...).

        Returns the updated feature and the reweighted distribution (B, P, t)
        averaged over heads. Points without memory pass through unchanged.
        """
        B, P, D = f.shape
        t = F.shape[2]
        if t == 0:
            return f, f.new_zeros(B, P, 0)
        h, dh = self.num_heads, D // self.num_heads
        if self.rope_mode == "additive":
            q, k, v = self.proj(f + positional_rows(t_index, D, f.dtype), F, F + positional_rows(frames, D, f.dtype))
            q = q.view(B, P, h, dh)
            k = k.view(B, P, t, h, dh)
        else:
            q, k, v = self.proj(f, F)
            q = rotate(q.view(B, P, h, dh), t_index.unsqueeze(-1))
            k = rotate(k.view(B, P, t, h, dh), frames.unsqueeze(-1))
        v = v.view(B, P, t, h, dh)
        logits = (q.unsqueeze(2) * k).sum(-1).transpose(2, 3) / math.sqrt(dh)
        has = valid.any(-1)
        mask = valid.unsqueeze(2) | ~has[:, :, None, None]
        logits = logits.masked_fill(~mask, float("-inf"))
        d_prime = torch.softmax(logits, dim=-1)
        if self.visibility_aware:
            a = (alphas * valid).unsqueeze(2)
            d = reweight(d_prime, a, self.norm_mode)
        else:
            d = d_prime
        delta = (d.transpose(2, 3).unsqueeze(-1) * v).sum(2).reshape(B, P, D)
        out = self.norm(f + delta)
        out = torch.where(has.unsqueeze(-1), out, f)
        return out, d.mean(2)

    def attend(self, f_prime, mem, t, start_frame=0):
        """Single-point form: ``f_prime`` (D,), ``mem`` a TemporalMemory, ``t`` the absolute frame.

        An empty memory is a no-op (the start frame has nothing to attend to).
        """
        f_prime = torch.as_tensor(f_prime, dtype=self.norm.weight.dtype)
        if len(mem) == 0:
            return f_prime, f_prime.new_zeros(0)
        if not torch.isfinite(mem.features).all() or not torch.isfinite(mem.visibilities).all():
            raise InvalidStateError("temporal memory contains non-finite values")
        if ((mem.visibilities < 0) | (mem.visibilities > 1)).any():
            raise InvalidInputError("memory visibilities must lie in [0, 1]")
        F = mem.features.to(f_prime.dtype)[None, None]
        a = mem.visibilities.to(f_prime.dtype)[None, None]
        frames = (mem.frame_indices - start_frame)[None, None]
        valid = torch.ones_like(frames, dtype=torch.bool)
        out, d = self.forward(f_prime[None, None], torch.tensor([[t - start_frame]]), F, a, frames, valid)
        return out[0, 0], d[0, 0]
