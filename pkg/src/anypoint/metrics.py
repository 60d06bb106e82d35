"""Point-tracking metrics: occlusion accuracy, position precision and average Jaccard.

All functions take arrays over (point, frame) pairs: positions (..., 2),
visibilities (...). ``valid`` masks pairs before a point's start frame.
Positions are rescaled to a 256 x 256 frame before thresholding.
"""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from anypoint.errors import InvalidInputError

THRESHOLDS = (1, 2, 4, 8, 16)
REFERENCE_SIZE = 256


class EmptyMetricWarning(UserWarning):
    pass


@dataclass
class MetricReport:
    AJ: float
    delta_avg: float
    OA: float
    per_threshold: dict = field(default_factory=dict)
    jaccard_per_threshold: dict = field(default_factory=dict)
    num_points: int = 0
    num_frames: int = 0
    warnings: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def _arrays(pred_pos=None, gt_pos=None, pred_vis=None, gt_vis=None, valid=None):
    out = {}
    shape = None
    if gt_vis is not None:
        out["gt_vis"] = np.asarray(gt_vis, dtype=bool)
        shape = out["gt_vis"].shape
    for name, arr in (("pred_pos", pred_pos), ("gt_pos", gt_pos)):
        if arr is not None:
            a = np.asarray(arr, dtype=np.float64)
            if a.shape[-1] != 2 or (shape is not None and a.shape[:-1] != shape):
                raise InvalidInputError(f"{name} has shape {a.shape}, expected {shape} + (2,)")
            out[name] = a
    if pred_vis is not None:
        a = np.asarray(pred_vis, dtype=np.float64)
        if shape is not None and a.shape != shape:
            raise InvalidInputError(f"pred_vis has shape {a.shape}, expected {shape}")
        out["pred_vis"] = a
    out["valid"] = np.ones(shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if out["valid"].shape != shape:
        raise InvalidInputError(f"valid has shape {out['valid'].shape}, expected {shape}")
    return out


def rescale(pos, frame_size):
    """Map image pixels of a (W, H) or square frame to the 256-pixel reference frame."""
    w, h = (frame_size, frame_size) if np.isscalar(frame_size) else frame_size
    scale = np.array([REFERENCE_SIZE / w, REFERENCE_SIZE / h])
    return np.asarray(pos, dtype=np.float64) * scale


def _errors(pred_pos, gt_pos, frame_size):
    if frame_size is not None:
        pred_pos, gt_pos = rescale(pred_pos, frame_size), rescale(gt_pos, frame_size)
    err = np.linalg.norm(pred_pos - gt_pos, axis=-1)
    return np.where(np.isfinite(err), err, np.inf)


def occlusion_accuracy(pred_vis, gt_vis, valid=None, thresh=0.5):
    a = _arrays(pred_vis=pred_vis, gt_vis=gt_vis, valid=valid)
    n = a["valid"].sum()
    if n == 0:
        warnings.warn("no evaluated pairs; occlusion accuracy defined as 0", EmptyMetricWarning, stacklevel=2)
        return 0.0
    correct = ((a["pred_vis"] > thresh) == a["gt_vis"]) & a["valid"]
    return 100.0 * correct.sum() / n


def delta_avg(pred_pos, gt_pos, gt_vis, valid=None, frame_size=None, thresholds=THRESHOLDS):
    """Returns (average percent, {threshold: percent}) over ground-truth-visible pairs."""
    a = _arrays(pred_pos=pred_pos, gt_pos=gt_pos, gt_vis=gt_vis, valid=valid)
    sel = a["gt_vis"] & a["valid"]
    n = sel.sum()
    if n == 0:
        warnings.warn("no visible pairs; position precision defined as 0", EmptyMetricWarning, stacklevel=2)
        return 0.0, {t: 0.0 for t in thresholds}
    err = _errors(a["pred_pos"], a["gt_pos"], frame_size)
    per = {t: 100.0 * ((err < t) & sel).sum() / n for t in thresholds}
    return float(np.mean(list(per.values()))), per


def average_jaccard(pred_pos, pred_vis, gt_pos, gt_vis, valid=None, frame_size=None, thresholds=THRESHOLDS,
                    vis_thresh=0.5):
    """Returns (AJ percent, {threshold: jaccard percent})."""
    a = _arrays(pred_pos=pred_pos, gt_pos=gt_pos, pred_vis=pred_vis, gt_vis=gt_vis, valid=valid)
    v = a["valid"]
    pv = (a["pred_vis"] > vis_thresh) & v
    gv = a["gt_vis"] & v
    err = _errors(a["pred_pos"], a["gt_pos"], frame_size)
    per = {}
    empty = False
    for t in thresholds:
        close = err < t
        tp = (pv & gv & close).sum()
        fp = (pv & ~(gv & close)).sum()
        fn = (gv & ~(pv & close)).sum()
        denom = tp + fp + fn
        if denom == 0:
            empty = True
            per[t] = 0.0
        else:
            per[t] = 100.0 * tp / denom
    if empty:
        warnings.warn("empty Jaccard denominator; defined as 0", EmptyMetricWarning, stacklevel=2)
    return float(np.mean(list(per.values()))), per


def compute_metrics(pred_pos, pred_vis, gt_pos, gt_vis, valid=None, frame_size=None):
    """All three metrics in one report. Arrays are (P, T, ...)."""
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", EmptyMetricWarning)
        oa = occlusion_accuracy(pred_vis, gt_vis, valid)
        d, per = delta_avg(pred_pos, gt_pos, gt_vis, valid, frame_size)
        aj, jac = average_jaccard(pred_pos, pred_vis, gt_pos, gt_vis, valid, frame_size)
    msgs = sorted({str(w.message) for w in caught})
    for m in msgs:
        warnings.warn(m, EmptyMetricWarning, stacklevel=2)
    shape = np.asarray(gt_vis).shape
    return MetricReport(AJ=float(aj), delta_avg=float(d), OA=float(oa),
                        per_threshold={str(k): float(v) for k, v in per.items()},
                        jaccard_per_threshold={str(k): float(v) for k, v in jac.items()},
                        num_points=int(np.prod(shape[:-1])) if len(shape) > 1 else int(shape[0]),
                        num_frames=int(shape[-1]) if len(shape) > 1 else 1, warnings=msgs)
