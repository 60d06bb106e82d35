"""Losses and the two training stages."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from anypoint.config import TrainConfig
from anypoint.errors import InvalidInputError, InvalidStateError

log = logging.getLogger(__name__)

CLAMP = 1e-7


class TrainingDiverged(InvalidStateError):
    pass


def location_loss(pred, gt, vis_gt, valid=None, mask_invisible=True):
    """Mean L1 (|dx| + |dy|) over supervised pairs; 0 when nothing is supervised.

    pred, gt (..., 2); vis_gt and valid (...) booleans. With ``mask_invisible``
    only ground-truth-visible pairs count.
    """
    pred = torch.as_tensor(pred)
    gt = torch.as_tensor(gt, dtype=pred.dtype)
    vis_gt = torch.as_tensor(vis_gt, dtype=torch.bool)
    if pred.shape != gt.shape or pred.shape[:-1] != vis_gt.shape:
        raise InvalidInputError(f"shape mismatch: pred {tuple(pred.shape)}, gt {tuple(gt.shape)}, "
                                f"visibility {tuple(vis_gt.shape)}")
    sel = vis_gt if mask_invisible else torch.ones_like(vis_gt)
    if valid is not None:
        sel = sel & torch.as_tensor(valid, dtype=torch.bool)
    err = (pred - gt).abs().sum(-1)
    n = sel.sum()
    if n == 0:
        return err.sum() * 0.0
    return torch.where(sel, err, torch.zeros_like(err)).sum() / n


def visibility_loss(alpha, vis_gt, valid=None):
    """Mean binary cross-entropy, alpha clamped to [1e-7, 1 - 1e-7]."""
    alpha = torch.as_tensor(alpha)
    target = torch.as_tensor(vis_gt, dtype=alpha.dtype)
    if alpha.shape != target.shape:
        raise InvalidInputError(f"shape mismatch: {tuple(alpha.shape)} vs {tuple(target.shape)}")
    a = alpha.clamp(CLAMP, 1 - CLAMP)
    bce = -(target * a.log() + (1 - target) * (1 - a).log())
    if valid is None:
        return bce.mean()
    valid = torch.as_tensor(valid, dtype=torch.bool)
    n = valid.sum()
    if n == 0:
        return bce.sum() * 0.0
    return torch.where(valid, bce, torch.zeros_like(bce)).sum() / n


@dataclass
class LossReport:
    location_loss: float
    visibility_loss: float
    total: float
    num_supervised_points: int
    per_layer: list = field(default_factory=list)   # [(loc, vis), ...]


@dataclass
class TrainBatch:
    frames: torch.Tensor   # (B, T, H, W, 3)
    traj: torch.Tensor     # (B, P, T, 2) image pixels
    vis: torch.Tensor      # (B, P, T) bool
    start: torch.Tensor    # (B, P) long
    cuts: torch.Tensor     # (B, T) bool

    @property
    def query_xy(self):
        idx = self.start[..., None, None].expand(-1, -1, 1, 2)
        return self.traj.gather(2, idx).squeeze(2)

    @property
    def valid(self):
        T = self.traj.shape[2]
        return torch.arange(T)[None, None, :] >= self.start[..., None]

    def index(self, idx):
        return TrainBatch(self.frames[idx], self.traj[idx], self.vis[idx], self.start[idx], self.cuts[idx])


def stack_corpus(corpus):
    """List of SyntheticSequence -> TrainBatch (all sequences must share shapes)."""
    T = corpus[0].num_frames
    cuts = torch.zeros(len(corpus), T, dtype=torch.bool)
    for i, s in enumerate(corpus):
        for c in s.scene_cuts:
            cuts[i, c] = True
    return TrainBatch(
        frames=torch.from_numpy(np.stack([s.frames for s in corpus])).float(),
        traj=torch.from_numpy(np.stack([s.trajectories for s in corpus])).float(),
        vis=torch.from_numpy(np.stack([s.visibility for s in corpus])).bool(),
        start=torch.from_numpy(np.stack([np.asarray(s.query_frames) for s in corpus])).long(),
        cuts=cuts,
    )


def compute_loss(unroll, batch, cfg):
    """Deep-supervised loss of an unroll; returns (total tensor, LossReport)."""
    layers = range(unroll.positions.shape[0]) if cfg.aux_loss else [unroll.positions.shape[0] - 1]
    valid = batch.valid
    locs, viss = [], []
    for i in layers:
        locs.append(location_loss(unroll.positions[i], batch.traj, batch.vis, valid, cfg.invisible_mask))
        viss.append(visibility_loss(unroll.visibilities[i], batch.vis, valid))
    loc = torch.stack(locs).mean()
    vis = torch.stack(viss).mean()
    total = loc + cfg.vis_weight * vis
    sup = valid & batch.vis if cfg.invisible_mask else valid
    report = LossReport(loc.item(), vis.item(), total.item(), int(sup.sum()),
                        [(a.item(), b.item()) for a, b in zip(locs, viss)])
    return total, report


def lr_at(it, cfg, iterations=None, base=None):
    iterations = iterations or cfg.iterations
    base = cfg.lr if base is None else base
    if cfg.warmup and it < cfg.warmup:
        return base * (it + 1) / cfg.warmup
    span = max(1, iterations - cfg.warmup)
    prog = min(1.0, (it - cfg.warmup) / span)
    lo = base * cfg.lr_min_ratio
    return lo + 0.5 * (base - lo) * (1 + math.cos(math.pi * prog))


def _check_finite(report, it):
    if not all(math.isfinite(v) for v in (report.location_loss, report.visibility_loss, report.total)):
        raise TrainingDiverged(f"loss became non-finite at iteration {it}: loc={report.location_loss} "
                               f"vis={report.visibility_loss} per-layer={report.per_layer}")


def _write_curve(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "loc", "vis", "total"])
        for it, r in rows:
            w.writerow([it, f"{r.location_loss:.6f}", f"{r.visibility_loss:.6f}", f"{r.total:.6f}"])


def train_stage1(model, corpus, cfg=None, curve_path=None, window=1, callback=None):
    """Train extractor, decoder and heads end to end. Returns the list of LossReports.

    One iteration is one optimizer step over ``batch_size * accum_steps``
    sequences. The micro-batches run in a single forward pass; averaging their
    per-micro-batch losses gives the same gradient as sequential accumulation.
    """
    cfg = cfg or TrainConfig()
    torch.manual_seed(cfg.seed)
    data = corpus if isinstance(corpus, TrainBatch) else stack_corpus(corpus)
    n = data.frames.shape[0]
    gen = torch.Generator().manual_seed(cfg.seed)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=cfg.lr, betas=tuple(cfg.betas), weight_decay=cfg.weight_decay)
    per_step = cfg.batch_size * cfg.accum_steps
    order = torch.randperm(n, generator=gen)
    cursor = 0
    rows = []
    model.train()
    for it in range(cfg.iterations):
        idx = []
        while len(idx) < per_step:
            if cursor == n:
                order, cursor = torch.randperm(n, generator=gen), 0
            take = min(per_step - len(idx), n - cursor)
            idx.extend(order[cursor:cursor + take].tolist())
            cursor += take
        batch = data.index(torch.tensor(idx))
        for g in opt.param_groups:
            g["lr"] = lr_at(it, cfg)
        out = model.unroll(batch.frames, batch.query_xy, batch.start, window=window)
        totals, reports = [], []
        for k in range(cfg.accum_steps):
            sl = slice(k * cfg.batch_size, (k + 1) * cfg.batch_size)
            sub = type(out)(out.positions[:, sl], out.visibilities[:, sl], out.rebased[sl])
            t_k, r_k = compute_loss(sub, batch.index(sl), cfg)
            totals.append(t_k)
            reports.append(r_k)
        total = torch.stack(totals).mean()
        report = LossReport(
            float(np.mean([r.location_loss for r in reports])),
            float(np.mean([r.visibility_loss for r in reports])),
            total.item(), sum(r.num_supervised_points for r in reports),
            [tuple(np.mean([r.per_layer[i] for r in reports], axis=0).tolist()) for i in range(len(reports[0].per_layer))],
        )
        _check_finite(report, it)
        opt.zero_grad(set_to_none=True)
        total.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        opt.step()
        rows.append((it, report))
        if cfg.log_every and it % cfg.log_every == 0:
            log.info("iter %d loc %.4f vis %.4f total %.4f", it, report.location_loss, report.visibility_loss,
                     report.total)
        if callback is not None:
            callback(it, report)
    model.eval()
    if curve_path is not None:
        _write_curve(curve_path, rows)
    return [r for _, r in rows]


def _stage2_examples(model, data):
    """Features and targets at every annotated cut frame."""
    Xs, Cs, gts, viss = [], [], [], []
    with torch.no_grad():
        for b in range(data.frames.shape[0]):
            for c in data.cuts[b].nonzero().flatten().tolist():
                one = data.index(slice(b, b + 1))
                X = model.features(one.frames)
                q = model.prepare(X, one.query_xy, one.start)
                Xs.append(X[:, c])
                Cs.append(q.context)
                gts.append(one.traj[:, :, c])
                viss.append(one.vis[:, :, c] & (one.start <= c))
    if not Xs:
        return None
    return torch.cat(Xs), torch.cat(Cs), torch.cat(gts), torch.cat(viss)


def train_stage2(model, corpus, cfg=None, curve_path=None):
    """Train only the global-match fusion MLP on cut frames; everything else is frozen.

    Raises InvalidStateError if any other parameter changed.
    """
    cfg = cfg or TrainConfig()
    torch.manual_seed(cfg.seed)
    data = corpus if isinstance(corpus, TrainBatch) else stack_corpus(corpus)
    trainable = {id(p) for p in model.stage2_parameters()}
    frozen = {k: v.detach().clone() for k, v in model.named_parameters() if id(v) not in trainable}
    flags = {k: p.requires_grad for k, p in model.named_parameters()}
    for p in model.parameters():
        p.requires_grad_(id(p) in trainable)
    rows = []
    try:
        examples = _stage2_examples(model, data)
        if examples is None:
            log.warning("stage 2: corpus has no scene cuts, nothing to train")
            return rows
        X, C, gt, vis = examples
        params = model.stage2_parameters()
        opt = torch.optim.AdamW(params, lr=cfg.stage2_lr, betas=tuple(cfg.betas), weight_decay=cfg.weight_decay)
        model.train()
        for it in range(cfg.stage2_iterations):
            for g in opt.param_groups:
                g["lr"] = lr_at(it, cfg, cfg.stage2_iterations, cfg.stage2_lr)
            matched, _ = model.matcher(X, C)
            loss = location_loss(model.to_image(matched), gt, vis)
            report = LossReport(loss.item(), 0.0, loss.item(), int(vis.sum()))
            _check_finite(report, it)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            rows.append((it, report))
        model.eval()
    finally:
        for k, p in model.named_parameters():
            p.requires_grad_(flags[k])
        if curve_path is not None:
            _write_curve(curve_path, rows)
    for k, v in model.named_parameters():
        if k in frozen and not torch.equal(frozen[k], v.detach()):
            raise InvalidStateError(f"stage 2 modified frozen parameter {k}")
    return [r for _, r in rows]


def stage2_loss(model, corpus):
    """Post-cut location loss of the global matcher on ``corpus`` (no training)."""
    data = corpus if isinstance(corpus, TrainBatch) else stack_corpus(corpus)
    ex = _stage2_examples(model, data)
    if ex is None:
        return 0.0
    X, C, gt, vis = ex
    with torch.no_grad():
        matched, _ = model.matcher(X, C)
        return float(location_loss(model.to_image(matched), gt, vis))
