"""MAE, mean F-measure, E-measure and S-measure for binary segmentation maps.

All functions take ``pred`` in [0, 1] and a binary ``gt`` as arrays (or
MaskTensors) of equal shape and return a Python float.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import DataError, MaskKind, MaskTensor, read_mask

EPS = np.finfo(np.float64).eps
F_THRESHOLDS = np.arange(1, 256) / 255.0
S_ALPHA = 0.5
COLUMNS = ("s_alpha", "f_beta", "e_xi", "mae")
HEADERS = {"s_alpha": "S_alpha", "f_beta": "F_beta", "e_xi": "E_xi", "mae": "M"}


def _pair(pred, gt):
    p = pred.data if isinstance(pred, MaskTensor) else np.asarray(pred, dtype=np.float64)
    g = gt.data if isinstance(gt, MaskTensor) else np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    return p.astype(np.float64), g.astype(np.float64)


def mae(pred, gt) -> float:
    p, g = _pair(pred, gt)
    return float(np.abs(g - p).mean())


def f_score(tp, fp, fn) -> float:
    """``TP / (TP + (FP + FN) / 2)``; 1 when there is nothing to find and nothing found."""
    denom = tp + 0.5 * (fp + fn)
    return 1.0 if denom == 0 else float(tp / denom)


def f_measure(pred, gt, thresholds=F_THRESHOLDS) -> float:
    """Mean of the thresholded F score over ``pred >= t`` for t = k/255, k = 1..255."""
    p, g = _pair(pred, gt)
    g = g >= 0.5
    # histogram counts: number of fg / bg pixels at or above each threshold
    p_fg, p_bg = np.sort(p[g]), np.sort(p[~g])
    tp = p_fg.size - np.searchsorted(p_fg, thresholds, side="left")
    fp = p_bg.size - np.searchsorted(p_bg, thresholds, side="left")
    fn = p_fg.size - tp
    denom = tp + 0.5 * (fp + fn)
    scores = np.where(denom == 0, 1.0, tp / np.where(denom == 0, 1.0, denom))
    return float(scores.mean())


def e_measure(pred, gt) -> float:
    """Enhanced-alignment measure with the adaptive ``2 * mean(pred)`` binarisation."""
    p, g = _pair(pred, gt)
    g = (g >= 0.5).astype(np.float64)
    thr = min(2.0 * p.mean(), 1.0)
    # thr is 0 only for an all-zero map, which must binarise to background
    fm = (p >= thr).astype(np.float64) if thr > 0 else np.zeros_like(p)
    if g.sum() == 0:
        enhanced = 1.0 - fm
    elif g.sum() == g.size:
        enhanced = fm
    else:
        af, ag = fm - fm.mean(), g - g.mean()
        align = 2.0 * af * ag / (af * af + ag * ag + EPS)
        enhanced = (align + 1.0) ** 2 / 4.0
    return float(enhanced.mean())


def _s_object(x) -> float:
    mu = x.mean()
    sigma = x.std(ddof=1) if x.size > 1 else 0.0
    return 2.0 * mu / (mu * mu + 1.0 + sigma + EPS)


def _object_score(p, g) -> float:
    fg = g >= 0.5
    u = fg.mean()
    o_fg = _s_object(p[fg]) if fg.any() else 0.0
    o_bg = _s_object(1.0 - p[~fg]) if (~fg).any() else 0.0
    return u * o_fg + (1.0 - u) * o_bg


def _centroid(g):
    h, w = g.shape
    if g.sum() == 0:
        return int(round(w / 2)), int(round(h / 2))
    ys, xs = np.nonzero(g)
    return int(np.round(xs.mean())) + 1, int(np.round(ys.mean())) + 1


def _ssim(p, g) -> float:
    n = p.size
    x, y = p.mean(), g.mean()
    if n > 1:
        sx = ((p - x) ** 2).sum() / (n - 1)
        sy = ((g - y) ** 2).sum() / (n - 1)
        sxy = ((p - x) * (g - y)).sum() / (n - 1)
    else:
        sx = sy = sxy = 0.0
    a = 4.0 * x * y * sxy
    b = (x * x + y * y) * (sx + sy)
    if a != 0:
        return a / (b + EPS)
    return 1.0 if b == 0 else 0.0


def _region_score(p, g) -> float:
    h, w = g.shape
    cx, cy = _centroid(g)
    cx, cy = min(cx, w), min(cy, h)
    parts = [
        (slice(0, cy), slice(0, cx)),
        (slice(0, cy), slice(cx, w)),
        (slice(cy, h), slice(0, cx)),
        (slice(cy, h), slice(cx, w)),
    ]
    score = 0.0
    for rows, cols in parts:
        gp, pp = g[rows, cols], p[rows, cols]
        if gp.size:
            score += gp.size / g.size * _ssim(pp, gp)
    return score


def s_measure_parts(pred, gt):
    """``(S_o, S_r)`` for non-degenerate ground truth."""
    p, g = _pair(pred, gt)
    g = (g >= 0.5).astype(np.float64)
    return _object_score(p, g), _region_score(p, g)


def combine_s(s_object, s_region, alpha=S_ALPHA) -> float:
    return float(max(0.0, alpha * s_object + (1.0 - alpha) * s_region))


def s_measure(pred, gt, alpha=S_ALPHA) -> float:
    p, g = _pair(pred, gt)
    g = (g >= 0.5).astype(np.float64)
    frac = g.mean()
    if frac == 0:
        return float(1.0 - p.mean())
    if frac == 1:
        return float(p.mean())
    return min(1.0, combine_s(_object_score(p, g), _region_score(p, g), alpha))


@dataclass
class MetricReport:
    per_image: list = field(default_factory=list)

    def add(self, rid, pred, gt):
        row = {
            "id": rid,
            "mae": mae(pred, gt),
            "f_beta": f_measure(pred, gt),
            "e_xi": e_measure(pred, gt),
            "s_alpha": s_measure(pred, gt),
        }
        self.per_image.append(row)
        return row

    @property
    def aggregate(self):
        if not self.per_image:
            return {k: float("nan") for k in COLUMNS}
        return {k: float(np.mean([r[k] for r in self.per_image])) for k in COLUMNS}

    def to_jsonl(self) -> str:
        lines = [json.dumps(r) for r in self.per_image]
        lines.append(json.dumps({"aggregate": self.aggregate, "n": len(self.per_image)}))
        return "\n".join(lines) + "\n"

    def write(self, path):
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def read(cls, path):
        rows = [json.loads(l) for l in Path(path).read_text().splitlines() if l.strip()]
        return cls([r for r in rows if "aggregate" not in r])

    def table(self, per_image=True) -> str:
        """Plain-text table, one row per image and a closing ``mean`` row."""
        head = f"{'id':<16}" + "".join(f"{HEADERS[k]:>10}" for k in COLUMNS)

        def row(name, vals):
            return f"{str(name)[:16]:<16}" + "".join(f"{vals[k]:>10.4f}" for k in COLUMNS)

        lines = [head]
        if per_image:
            lines += [row(r["id"], r) for r in self.per_image]
        lines.append(row("mean", self.aggregate))
        return "\n".join(lines)


def evaluate_dirs(pred_dir, gt_dir) -> MetricReport:
    """Score every ``<pred_dir>/<id>.png`` against ``<gt_dir>/<id>.png``."""
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    preds = {p.stem: p for p in pred_dir.glob("*.png")}
    gts = {p.stem: p for p in gt_dir.glob("*.png")}
    missing_pred = sorted(set(gts) - set(preds))
    missing_gt = sorted(set(preds) - set(gts))
    if missing_pred or missing_gt:
        msg = []
        if missing_pred:
            msg.append(f"no prediction for ids {missing_pred}")
        if missing_gt:
            msg.append(f"no ground truth for ids {missing_gt}")
        raise DataError("; ".join(msg))
    report = MetricReport()
    for rid in sorted(gts):
        pred = read_mask(preds[rid], MaskKind.PREDICTION)
        gt = read_mask(gts[rid], MaskKind.GROUND_TRUTH)
        report.add(rid, pred, gt)
    return report
