"""Segmentation metrics: overlap ratios from confusion counts and boundary
distances (HD95, ASD) in millimetres."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .errors import ShapeError

# column order used by reports: overlap/distance block, then the
# accuracy/precision/sensitivity/specificity block
METRIC_COLUMNS = ("dice", "hd95", "asd", "iou", "acc", "pre", "sen", "spe")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class OverlapMetrics:
    dice: float
    iou: float
    acc: float
    pre: float
    sen: float
    spe: float


@dataclass(frozen=True)
class SurfaceDistances:
    hd95: float
    asd: float


def confusion(pred: np.ndarray, gt: np.ndarray, k: int) -> ConfusionCounts:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    p = pred == k
    g = gt == k
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def overlap_metrics(pred: np.ndarray, gt: np.ndarray, k: int) -> OverlapMetrics:
    """Per-class overlap metrics.

    A ratio with a zero denominator is 1 when class ``k`` is absent from both
    prediction and ground truth, and 0 otherwise.
    """
    c = confusion(pred, gt, k)
    both_empty = c.tp + c.fp == 0 and c.tp + c.fn == 0

    def ratio(num: int, den: int) -> float:
        if den == 0:
            return 1.0 if both_empty else 0.0
        return num / den

    return OverlapMetrics(
        dice=ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
        iou=ratio(c.tp, c.tp + c.fp + c.fn),
        acc=ratio(c.tp + c.tn, c.total),
        pre=ratio(c.tp, c.tp + c.fp),
        sen=ratio(c.tp, c.tp + c.fn),
        spe=ratio(c.tn, c.tn + c.fp),
    )


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a 4-neighbour in the background (outside counts as background)."""
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return m & ~interior


def _directed(src: np.ndarray, dst: np.ndarray, spacing: tuple[float, float]) -> np.ndarray:
    # Euclidean distance from every pixel to the nearest dst-boundary pixel
    dist = ndimage.distance_transform_edt(~dst, sampling=spacing)
    return dist[src]


def surface_distances(pred: np.ndarray, gt: np.ndarray,
                      spacing: tuple[float, float] = (1.0, 1.0)) -> SurfaceDistances | None:
    """HD95 and ASD over the pooled symmetric boundary distances.

    Returns None when either mask is empty: the distances are undefined.
    """
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    if not pred.any() or not gt.any():
        return None
    bp, bg = boundary(pred), boundary(gt)
    pooled = np.concatenate([_directed(bp, bg, spacing), _directed(bg, bp, spacing)])
    return SurfaceDistances(hd95=float(np.percentile(pooled, 95)), asd=float(pooled.mean()))


def evaluate_sample(pred: np.ndarray, gt: np.ndarray, num_classes: int, sample_id: str = "",
                    spacing: tuple[float, float] = (1.0, 1.0), classes=None) -> list[dict]:
    """One JSON-ready record per class; undefined distances are None."""
    records = []
    for k in (range(num_classes) if classes is None else classes):
        ov = overlap_metrics(pred, gt, k)
        sd = surface_distances(pred == k, gt == k, spacing)
        rec = {"sample_id": sample_id, "class": int(k), **asdict(ov),
               "hd95": None if sd is None else sd.hd95, "asd": None if sd is None else sd.asd}
        records.append(rec)
    return records


def aggregate(records: list[dict]) -> list[dict]:
    """Per-class means; distance means skip undefined entries and report how many were skipped."""
    by_class: dict[int, list[dict]] = {}
    for r in records:
        by_class.setdefault(r["class"], []).append(r)
    rows = []
    for k in sorted(by_class):
        rs = by_class[k]
        row = {"class": k, "n": len(rs)}
        for col in METRIC_COLUMNS:
            vals = [r[col] for r in rs if r[col] is not None]
            row[col] = float(np.mean(vals)) if vals else None
        row["n_undefined_distance"] = sum(r["hd95"] is None for r in rs)
        rows.append(row)
    return rows


def to_csv(rows: list[dict], prefix: dict | None = None) -> str:
    """CSV text with metric columns in report order. ``prefix`` adds leading columns."""
    prefix = prefix or {}
    head = list(prefix) + ["class", "n", *METRIC_COLUMNS, "n_undefined_distance"]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(head)
    for row in rows:
        out = list(prefix.values()) + [row["class"], row["n"]]
        out += ["" if row[c] is None else repr(row[c]) for c in METRIC_COLUMNS]
        out.append(row["n_undefined_distance"])
        writer.writerow(out)
    return buf.getvalue()
