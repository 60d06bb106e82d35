"""Finite-difference verification of every differentiable path of the tracker.

A float64 toy model runs one short clip with a scene cut (so the global
matcher participates). For a sample of scalar parameters from every
sub-network, the analytic gradient of the training loss is compared with a
central difference.
"""
from __future__ import annotations

import fnmatch
from dataclasses import dataclass, field

import numpy as np
import torch

from anypoint.config import ModelConfig, TrainConfig
from anypoint.errors import GradCheckError
from anypoint.model import TrackerModel
from anypoint.synthworld import WorldConfig, generate_sequence
from anypoint.training import compute_loss, stack_corpus

# parameter-name pattern -> paths whose gradient reaches that parameter
PATH_TAGS = (
    ("extractor.*", ("tensorcore.bilinear", "synthworld.extractor")),
    ("decoder.layers.*.cca.offset_mlp.*", ("tensorcore.bilinear", "cca.offsets")),
    ("decoder.layers.*.cca.similarity.*", ("cca.patch_similarity", "tensorcore.softmax")),
    ("decoder.layers.*.cca.apu.*", ("cca.apu", "tensorcore.softmax")),
    ("decoder.layers.*.cca.value.*", ("cca.values",)),
    ("decoder.layers.*.cca.norm.*", ("cca.values",)),
    ("decoder.layers.*.vlta.*", ("vlta.reweighting", "tensorcore.softmax")),
    ("decoder.layers.*.self_attn.*", ("decoder.self_attention",)),
    ("decoder.layers.*.ffn.*", ("decoder.ffn",)),
    ("decoder.layers.*.context_update.*", ("decoder.context_update",)),
    ("decoder.visibility.*", ("decoder.visibility_head",)),
    ("matcher.*", ("globalmatch.fusion", "tensorcore.soft_argmax", "tensorcore.softmax")),
)

REQUIRED_PATHS = ("tensorcore.bilinear", "tensorcore.softmax", "tensorcore.soft_argmax", "vlta.reweighting",
                  "cca.patch_similarity", "cca.apu", "decoder.visibility_head", "globalmatch.fusion")


def tags_for(name):
    for pattern, tags in PATH_TAGS:
        if fnmatch.fnmatch(name, pattern):
            return tags
    return ("other",)


@dataclass
class GradEntry:
    name: str
    index: int
    analytic: float
    numeric: float
    rel_error: float
    passed: bool
    tags: tuple


@dataclass
class GradCheckReport:
    entries: list = field(default_factory=list)
    eps: float = 1e-4
    tol: float = 1e-3
    min_pass_fraction: float = 0.99

    @property
    def pass_fraction(self):
        return float(np.mean([e.passed for e in self.entries])) if self.entries else 1.0

    @property
    def covered_paths(self):
        return sorted({t for e in self.entries for t in e.tags})

    @property
    def missing_paths(self):
        return [p for p in REQUIRED_PATHS if p not in self.covered_paths]

    @property
    def failing_modules(self):
        """Top-level modules (``tensorcore``, ``cca``, ...) with a failing coordinate."""
        return sorted({t.split(".")[0] for e in self.entries if not e.passed for t in e.tags})

    @property
    def passed(self):
        return self.pass_fraction >= self.min_pass_fraction and not self.missing_paths

    def summary(self):
        lines = [f"{len(self.entries)} coordinates, {100 * self.pass_fraction:.1f}% within tol {self.tol:g}"]
        by_path = {}
        for e in self.entries:
            for t in e.tags:
                by_path.setdefault(t, []).append(e.passed)
        for t in sorted(by_path):
            ok = by_path[t]
            lines.append(f"  {t:28s} {sum(ok)}/{len(ok)}")
        if self.missing_paths:
            lines.append(f"  not covered: {', '.join(self.missing_paths)}")
        return "\n".join(lines)

    def raise_for_failure(self):
        if not self.passed:
            modules = self.failing_modules or ["coverage"]
            raise GradCheckError(f"gradient check failed in {', '.join(modules)}\n{self.summary()}", modules)
        return self


def relative_error(a, n, floor=1e-7):
    """|a - n| / max(|a|, |n|, floor).

    The floor sits well above the round-off of a float64 central difference
    (about 1e-11 here), so gradients at noise level are compared in absolute
    terms. Two exact zeros agree.
    """
    if a == n:
        return 0.0
    return abs(a - n) / max(abs(a), abs(n), floor)


def toy_model_config():
    # stop-gradients are training choices; a finite difference sees straight through them
    return ModelConfig(feature_dim=16, stride=4, extractor_width=4, num_layers=2, grid_size=3, num_offsets=4,
                       ffn_hidden=16, detach_memory=False, detach_position=False)


def toy_batch(seed=0, frames=3, size=32, points=3):
    """One clip with a scene cut so global matching runs."""
    seq = generate_sequence(WorldConfig(num_sprites=2, frame_size=size, video_length=frames, num_points=points,
                                        cut_probability=1.0, occlusion_rate=0.5, seed=seed))
    return stack_corpus([seq])


def toy_model(seed=0, jitter=0.05):
    """Float64 toy model with every parameter nudged off its initialization.

    Several layers start at exact zeros or identities; the jitter makes every
    gradient path carry signal.
    """
    torch.manual_seed(seed)
    model = TrackerModel(toy_model_config()).double()
    g = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn(p.shape, generator=g, dtype=p.dtype) * jitter)
    return model


def _loss_fn(model, batch, cfg):
    frames = batch.frames.to(torch.float64)

    def loss():
        out = model.unroll(frames, batch.query_xy.double(), batch.start, cuts=batch.cuts, rebase="on_cut")
        total, _ = compute_loss(out, batch, cfg)
        return total
    return loss


def _sample(model, per_group, rng):
    groups = {}
    for name, p in model.named_parameters():
        groups.setdefault(tags_for(name), []).append((name, p))
    picks = []
    for tags, members in groups.items():
        sizes = np.array([p.numel() for _, p in members])
        flat = rng.choice(sizes.sum(), size=min(per_group, sizes.sum()), replace=False)
        bounds = np.cumsum(sizes)
        for f in flat:
            k = int(np.searchsorted(bounds, f, side="right"))
            offset = int(f - (bounds[k - 1] if k else 0))
            picks.append((members[k][0], offset))
    return picks


def grad_check(model=None, batch=None, params=None, eps=1e-4, tol=1e-3, per_group=8, seed=0,
               train_cfg=None):
    """Compare analytic and central-difference gradients; returns a GradCheckReport.

    ``params`` is an optional list of (parameter name, flat index) pairs;
    by default ``per_group`` coordinates are drawn from each sub-network.
    """
    model = model if model is not None else toy_model(seed)
    batch = batch if batch is not None else toy_batch(seed)
    cfg = train_cfg or TrainConfig()
    loss = _loss_fn(model, batch, cfg)
    named = dict(model.named_parameters())
    if params is None:
        params = _sample(model, per_group, np.random.default_rng(seed))

    model.zero_grad(set_to_none=True)
    loss().backward()
    report = GradCheckReport(eps=eps, tol=tol)
    with torch.no_grad():
        for name, idx in params:
            p = named[name]
            flat = p.view(-1)
            g = p.grad.view(-1)[idx].item() if p.grad is not None else 0.0
            orig = flat[idx].item()
            flat[idx] = orig + eps
            up = loss().item()
            flat[idx] = orig - eps
            down = loss().item()
            flat[idx] = orig
            num = (up - down) / (2 * eps)
            rel = relative_error(g, num)
            report.entries.append(GradEntry(name, int(idx), g, num, rel, rel < tol, tags_for(name)))
    model.zero_grad(set_to_none=True)
    return report
