"""Pixel confusion counts and the precision / recall / F1 arithmetic.

Aggregation is micro: counts are summed over images before the ratios are
taken.  A ratio whose denominator is zero is reported as ``None`` (the
undefined flag) rather than raising.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ShapeError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


def _binary(mask, name: str) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.dtype == bool:
        return arr
    if not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} mask is not binary")
    return arr.astype(bool)


def confusion(pred, gt) -> ConfusionCounts:
    """Exact pixel counts of ``pred`` against ``gt`` (both binary, same shape)."""
    p = _binary(pred, "predicted")
    g = _binary(gt, "ground-truth")
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} and ground truth {g.shape} differ in shape")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


def precision_recall_f1(counts: ConfusionCounts) -> tuple[float | None, float | None, float | None]:
    P = _ratio(counts.tp, counts.tp + counts.fp)
    R = _ratio(counts.tp, counts.tp + counts.fn)
    return P, R, f1_from(P, R)


def f1_from(P: float | None, R: float | None) -> float | None:
    """Harmonic mean of precision and recall; undefined if either is or both are 0."""
    if P is None or R is None or P + R == 0:
        return None
    return 2.0 * P * R / (P + R)


@dataclass
class MetricsReport:
    counts: ConfusionCounts
    per_image: dict[str, ConfusionCounts] = field(default_factory=dict)
    model: str = ""
    params: int = 0

    @property
    def precision(self) -> float | None:
        return precision_recall_f1(self.counts)[0]

    @property
    def recall(self) -> float | None:
        return precision_recall_f1(self.counts)[1]

    @property
    def f1(self) -> float | None:
        return precision_recall_f1(self.counts)[2]

    def defined_images(self) -> list[str]:
        """Images whose own P, R and F1 are all defined (the macro view)."""
        return [k for k, c in self.per_image.items() if None not in precision_recall_f1(c)]


def aggregate(per_image: dict[str, ConfusionCounts], model: str = "", params: int = 0) -> MetricsReport:
    if not per_image:
        raise ValueError("no images to aggregate")
    total = ConfusionCounts()
    for c in per_image.values():
        total = total + c
    return MetricsReport(total, dict(per_image), model, params)


def thresholded_mask(logits, tau: float = 0.5) -> np.ndarray:
    """Foreground where the two-class softmax foreground probability is >= ``tau``.

    ``logits`` has the class axis first after an optional batch axis:
    ``2 x H x W`` or ``B x 2 x H x W``.
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.shape[-3] != 2:
        raise ShapeError(f"expected two-class logits, got {z.shape}")
    p_fg = expit(z[..., 1, :, :] - z[..., 0, :, :])
    return p_fg >= tau


REPORT_COLUMNS = ("model", "params", "precision", "recall", "f1")


def _fmt(v: float | None) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.6f}"


def report_csv(reports: list[MetricsReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in reports:
        w.writerow([r.model, r.params, _fmt(r.precision), _fmt(r.recall), _fmt(r.f1)])
    return buf.getvalue()
