"""COCO-style mask average precision.

Detections are matched greedily in descending confidence; each takes the
unmatched ground-truth instance of its class with the highest IoU at or above
the threshold.  AP is the mean of the monotone precision envelope sampled at
101 recall points ``0, 0.01, ..., 1``.  Over a dataset, detections from all
images are ranked together.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError, ParameterError
from .raster import InstanceMap

__all__ = [
    "Detection",
    "EvalConfig",
    "EvalResult",
    "mask_iou",
    "average_precision",
    "mmap",
    "evaluate",
    "detections_from_result",
]

# exact k/100 values, so a recall of k/n equal to a grid point compares equal
RECALL_POINTS = np.arange(101) / 100.0


@dataclass
class Detection:
    mask: np.ndarray
    cls: int
    confidence: float

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if not self.mask.any():
            raise ContractError("detection mask is empty")


@dataclass
class EvalConfig:
    iou_thresholds: tuple[float, ...] = tuple(np.round(np.arange(0.50, 0.951, 0.05), 2))
    class_aware: bool = True

    def __post_init__(self):
        t = [float(x) for x in self.iou_thresholds]
        if not t or any(not 0 < x < 1 for x in t) or any(b <= a for a, b in zip(t, t[1:])):
            raise ParameterError("IoU thresholds must be strictly increasing values in (0, 1)")
        self.iou_thresholds = tuple(t)


@dataclass
class EvalResult:
    thresholds: tuple[float, ...]
    ap_per_threshold: list[float]
    per_class: dict[int, list[float]] = field(default_factory=dict)

    @property
    def mmap(self) -> float:
        return float(np.mean(self.ap_per_threshold)) if self.ap_per_threshold else float("nan")

    def to_text(self) -> str:
        lines = [f"AP@{t:.2f}={ap:.6f}" for t, ap in zip(self.thresholds, self.ap_per_threshold)]
        lines.append(f"mmAP={self.mmap:.6f}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iou_threshold", "ap"])
        for t, ap in zip(self.thresholds, self.ap_per_threshold):
            w.writerow([f"{t:.2f}", f"{ap:.6f}"])
        w.writerow(["mmAP", f"{self.mmap:.6f}"])
        return buf.getvalue()


def mask_iou(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ContractError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def _iou_matrix(det_masks: list[np.ndarray], labels: np.ndarray, gt_ids: list[int]) -> np.ndarray:
    """IoU of each detection against each listed GT id, via label histograms."""
    out = np.zeros((len(det_masks), len(gt_ids)))
    if not det_masks or not gt_ids:
        return out
    n_lab = int(labels.max()) + 1
    gt_area = np.bincount(labels.ravel(), minlength=n_lab)
    for i, m in enumerate(det_masks):
        if m.shape != labels.shape:
            raise ContractError(f"detection shape {m.shape} does not match GT {labels.shape}")
        inter = np.bincount(labels[m], minlength=n_lab)
        area = np.count_nonzero(m)
        for j, g in enumerate(gt_ids):
            union = area + gt_area[g] - inter[g]
            out[i, j] = inter[g] / union if union else 0.0
    return out


def _match_image(dets: Sequence[Detection], gt: InstanceMap, cls: Optional[int],
                 thresholds: Sequence[float]):
    """Per-image matching for one class (``cls=None`` pools all classes).

    Returns ``(scores, tp, n_gt)`` with ``tp`` shaped ``(T, D)``.
    """
    sel = [d for d in dets if cls is None or d.cls == cls]
    # stable sort keeps the caller's order for equal confidences
    order = sorted(range(len(sel)), key=lambda k: -sel[k].confidence)
    sel = [sel[k] for k in order]
    gt_ids = [i for i in gt.instance_ids() if cls is None or gt.classes[i] == cls]
    iou = _iou_matrix([d.mask for d in sel], gt.labels, gt_ids)
    tp = np.zeros((len(thresholds), len(sel)), dtype=bool)
    for ti, t in enumerate(thresholds):
        taken = np.zeros(len(gt_ids), dtype=bool)
        for di in range(len(sel)):
            best, best_j = -1.0, -1
            for j in range(len(gt_ids)):
                if taken[j] or iou[di, j] < t:
                    continue
                if iou[di, j] > best:
                    best, best_j = iou[di, j], j
            if best_j >= 0:
                assert not taken[best_j]
                taken[best_j] = True
                tp[ti, di] = True
    scores = np.array([d.confidence for d in sel], dtype=np.float64)
    return scores, tp, len(gt_ids)


def _ap_from_ranked(tp: np.ndarray, n_gt: int) -> float:
    if n_gt == 0:
        return float("nan")
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    rank = np.arange(1, tp.size + 1)
    recall = ctp / n_gt
    precision = ctp / rank
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < tp.size, envelope[np.minimum(idx, tp.size - 1)], 0.0)
    return float(q.mean())


def _normalize(dets, gts):
    if isinstance(gts, InstanceMap):
        return [list(dets)], [gts]
    gts = list(gts)
    dets = list(dets)
    if len(dets) != len(gts):
        raise ContractError("need one detection list per ground-truth map")
    return [list(d) for d in dets], gts


def _accumulate(dets_per_image, gts, cls, thresholds):
    all_scores, all_tp, n_gt = [], [], 0
    for dets, gt in zip(dets_per_image, gts):
        s, tp, n = _match_image(dets, gt, cls, thresholds)
        all_scores.append(s)
        all_tp.append(tp)
        n_gt += n
    scores = np.concatenate(all_scores) if all_scores else np.zeros(0)
    tp = np.concatenate(all_tp, axis=1) if all_tp else np.zeros((len(thresholds), 0), bool)
    order = np.argsort(-scores, kind="stable")
    return [_ap_from_ranked(tp[t][order], n_gt) for t in range(len(thresholds))]


def average_precision(dets, gts, iou_t: float, cls: Optional[int] = None) -> Optional[float]:
    """AP at one IoU threshold; ``None`` when there is no ground truth for ``cls``.

    ``dets``/``gts`` are either one image (a detection list and an InstanceMap)
    or parallel lists over images.
    """
    d, g = _normalize(dets, gts)
    ap = _accumulate(d, g, cls, [iou_t])[0]
    return None if np.isnan(ap) else ap


def evaluate(dets, gts, config: EvalConfig | None = None) -> EvalResult:
    config = config or EvalConfig()
    d, g = _normalize(dets, gts)
    thresholds = config.iou_thresholds
    if config.class_aware:
        classes = sorted({c for gt in g for i, c in gt.classes.items()
                          if i in set(gt.instance_ids())})
    else:
        classes = [None]
    per_class = {}
    for c in classes:
        aps = _accumulate(d, g, c, thresholds)
        if not all(np.isnan(aps)):
            per_class[-1 if c is None else c] = aps
    if not per_class:
        return EvalResult(thresholds, [], {})
    table = np.array(list(per_class.values()))
    return EvalResult(thresholds, [float(x) for x in table.mean(axis=0)], per_class)


def mmap(dets, gts, config: EvalConfig | None = None) -> float:
    """Mean AP over IoU thresholds, averaged over classes present in the GT (nan if none)."""
    return evaluate(dets, gts, config).mmap


def detections_from_result(result) -> list[Detection]:
    imap = result.instance_map
    return [Detection(mask, imap.classes[i], result.confidences[i]) for i, mask in imap.masks()]
