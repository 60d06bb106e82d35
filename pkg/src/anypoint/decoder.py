"""Decoder layers: temporal attention -> context cross-attention -> self-attention -> FFN."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn

from anypoint.cca import ContextCrossAttention
from anypoint.tensorcore import position_encoding_2d
from anypoint.vlta import VLTA


@dataclass
class DecoderConfig:
    num_layers: int = 2
    dim: int = 32
    ffn_hidden: int = 64
    num_heads: int = 1
    use_vlta: bool = True
    use_cca: bool = True
    use_self_attn: bool = True

    @classmethod
    def from_model_config(cls, cfg):
        return cls(num_layers=cfg.num_layers, dim=cfg.feature_dim, ffn_hidden=cfg.ffn_hidden,
                   num_heads=cfg.num_heads, use_vlta=cfg.use_vlta, use_cca=cfg.use_cca,
                   use_self_attn=cfg.use_self_attn)


@dataclass
class FrameOutput:
    positions: torch.Tensor              # (B, P, 2) feature grid
    visibilities: torch.Tensor           # (B, P)
    refined: torch.Tensor                # (B, P, D)
    per_layer_positions: torch.Tensor    # (L, B, P, 2)
    per_layer_visibilities: torch.Tensor  # (L, B, P)
    diagnostics: list = field(default_factory=list)


class VisibilityHead(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, 1))

    def logit(self, f):
        return self.mlp(f).squeeze(-1)

    def forward(self, f):
        return torch.sigmoid(self.logit(f))


class SelfAttention(nn.Module):
    """Attention across the point queries of one video."""

    def __init__(self, dim, num_heads=1):
        super().__init__()
        self.num_heads = num_heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.norm = nn.LayerNorm(dim, eps=1e-5)

    def forward(self, f, pos=None, active=None):
        B, P, D = f.shape
        h, dh = self.num_heads, D // self.num_heads
        x = f if pos is None else f + pos
        q = self.q(x).view(B, P, h, dh).transpose(1, 2)
        k = self.k(x).view(B, P, h, dh).transpose(1, 2)
        v = self.v(f).view(B, P, h, dh).transpose(1, 2)
        logits = q @ k.transpose(-1, -2) / math.sqrt(dh)
        if active is not None:
            logits = logits.masked_fill(~active[:, None, None, :], float("-inf"))
        out = (torch.softmax(logits, dim=-1) @ v).transpose(1, 2).reshape(B, P, D)
        return self.norm(f + out)


class FeedForward(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))
        self.norm = nn.LayerNorm(dim, eps=1e-5)

    def forward(self, f):
        return self.norm(f + self.mlp(f))


class ContextUpdate(nn.Module):
    """Ablation-only updates of the context patch (the default keeps it frozen)."""

    def __init__(self, dim, mode, vlta_kwargs=None):
        super().__init__()
        self.mode = mode
        if mode == "vlta":
            self.vlta = VLTA(dim, **(vlta_kwargs or {}))
        elif mode == "mlp":
            self.mlp = nn.Sequential(nn.Linear(2 * dim, dim), nn.GELU(), nn.Linear(dim, dim))
            self.norm = nn.LayerNorm(dim, eps=1e-5)

    def forward(self, C, f, t_index, memory):
        B, P, n2, D = C.shape
        if self.mode == "vlta":
            F, a, frames, valid = (m.repeat_interleave(n2, dim=1) for m in memory)
            out, _ = self.vlta(C.reshape(B, P * n2, D), t_index.repeat_interleave(n2, dim=1), F, a, frames, valid)
            return out.view(B, P, n2, D)
        if self.mode == "mlp":
            joint = torch.cat([C, f.unsqueeze(2).expand_as(C)], dim=-1)
            return self.norm(C + self.mlp(joint))
        return C


class DecoderLayer(nn.Module):
    def __init__(self, cfg, grid_offsets):
        super().__init__()
        dim = cfg.feature_dim
        self.use_vlta = cfg.use_vlta
        self.use_cca = cfg.use_cca
        self.use_self_attn = cfg.use_self_attn
        self.dim = dim
        vlta_kwargs = dict(visibility_aware=cfg.vlta_visibility, norm=cfg.vlta_norm, rope_mode=cfg.rope_mode,
                           num_heads=cfg.num_heads)
        self.vlta = VLTA(dim, **vlta_kwargs)
        self.context_update = ContextUpdate(dim, cfg.context_update, vlta_kwargs)
        self.cca = ContextCrossAttention(dim, grid_offsets, cfg.num_offsets, cfg.offset_radius, cfg.cca_mode,
                                         pos_encoding=getattr(cfg, "offset_pos_encoding", False))
        self.self_attn = SelfAttention(dim, cfg.num_heads)
        self.ffn = FeedForward(dim, cfg.ffn_hidden)

    def forward(self, f, l, X, C, t_index, memory, active=None):
        """One refinement step. ``memory`` is (F, alphas, frames, valid) in bank layout."""
        diag = {}
        if self.use_vlta and memory[0].shape[2] > 0:
            f, d = self.vlta(f, t_index, *memory)
            diag["vlta"] = d
        if self.context_update.mode != "frozen":
            C = self.context_update(C, f, t_index, memory)
        if self.use_cca:
            f, l, diag["cca"] = self.cca(f, l, X, C)
        if self.use_self_attn:
            f = self.self_attn(f, position_encoding_2d(l, self.dim), active)
        f = self.ffn(f)
        return f, l, diag


class Decoder(nn.Module):
    def __init__(self, cfg, grid_offsets):
        super().__init__()
        self.layers = nn.ModuleList(DecoderLayer(cfg, grid_offsets) for _ in range(cfg.num_layers))
        self.visibility = VisibilityHead(cfg.feature_dim)
        self.detach_position = cfg.detach_position

    def forward(self, content, context, l_init, X, t_index, memory, active=None):
        """Refine every point for one frame.

        content (B, P, D) is the frozen start feature, used as the working
        feature at the start of every frame. The position enters as ``l_init``
        and is changed only by the position-update path of the cross-attention.
        """
        f, l = content, l_init
        positions, vis, diags = [], [], []
        for layer in self.layers:
            f, l, diag = layer(f, l, X, context, t_index, memory, active)
            positions.append(l)
            vis.append(self.visibility(f))
            diags.append(diag)
            if self.detach_position:
                l = l.detach()
        return FrameOutput(positions=positions[-1], visibilities=vis[-1], refined=f,
                           per_layer_positions=torch.stack(positions), per_layer_visibilities=torch.stack(vis),
                           diagnostics=diags)
