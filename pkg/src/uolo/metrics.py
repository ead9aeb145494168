"""Segmentation overlap and detection distance metrics, plus the CSV report.

Distances are in pixels of the preprocessed image grid (the network input),
not the original acquisition resolution.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigurationError, UsageError

__all__ = [
    "binarize",
    "overlap_metrics",
    "detection_metrics",
    "od_radius_from_mask",
    "ClassDetection",
    "SampleRecord",
    "EvalReport",
    "REPORT_COLUMNS",
]


def binarize(soft_mask, threshold: float = 0.5) -> np.ndarray:
    """1 where ``soft_mask >= threshold``, else 0 (uint8)."""
    return (np.asarray(soft_mask) >= threshold).astype(np.uint8)


def _as_binary(mask, name: str) -> np.ndarray:
    arr = np.asarray(mask)
    if not np.isin(arr, (0, 1)).all():
        raise UsageError(f"{name} must be binary (0/1)")
    return arr.astype(bool)


def overlap_metrics(pred_binary, gt_binary) -> tuple[float, float]:
    """(IoU, Dice) of two binary masks; both empty counts as perfect agreement."""
    p = _as_binary(pred_binary, "pred_binary")
    g = _as_binary(gt_binary, "gt_binary")
    if p.shape != g.shape:
        raise UsageError(f"mask shapes differ: {p.shape} vs {g.shape}")
    inter = int(np.count_nonzero(p & g))
    union = int(np.count_nonzero(p | g))
    total = int(np.count_nonzero(p)) + int(np.count_nonzero(g))
    if union == 0:
        return 1.0, 1.0
    return inter / union, 2.0 * inter / total


def od_radius_from_mask(mask) -> float:
    """Radius of the circle with the same area as the mask."""
    area = int(np.count_nonzero(np.asarray(mask)))
    if area == 0:
        raise ConfigurationError("od_radius_from_mask: empty mask")
    return math.sqrt(area / math.pi)


@dataclass
class ClassDetection:
    ed: float | None
    d_bar: float | None
    hit: bool


def detection_metrics(pred_centers, gt_centers, od_radius_px: float) -> dict:
    """Per-class Euclidean distance, distance in OD radii, and hit flag.

    ``pred_centers`` / ``gt_centers`` map class id to an ``(x, y)`` pixel
    centre (or ``None``).  A hit means ``ED <= od_radius_px``.  A class with
    ground truth but no prediction is a miss with undefined distance.
    """
    if not od_radius_px > 0:
        raise ConfigurationError("od_radius_px must be positive")
    out = {}
    for c, gt in gt_centers.items():
        if gt is None:
            continue
        pred = pred_centers.get(c)
        if pred is None:
            out[c] = ClassDetection(None, None, False)
            continue
        ed = math.hypot(pred[0] - gt[0], pred[1] - gt[1])
        out[c] = ClassDetection(ed, ed / od_radius_px, ed <= od_radius_px)
    return out


@dataclass
class SampleRecord:
    id: str
    iou: float | None = None
    dice: float | None = None
    both_empty: bool = False
    detections: dict = field(default_factory=dict)


REPORT_COLUMNS = ["id", "iou", "dice", "both_empty"]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class EvalReport:
    class_names: tuple[str, ...]
    records: list[SampleRecord] = field(default_factory=list)

    def _class_columns(self) -> list[str]:
        cols = []
        for name in self.class_names:
            cols += [f"{name}_ed", f"{name}_dbar", f"{name}_hit"]
        return cols

    @property
    def columns(self) -> list[str]:
        return REPORT_COLUMNS + self._class_columns()

    def mean_iou(self) -> float | None:
        vals = [r.iou for r in self.records if r.iou is not None]
        return float(np.mean(vals)) if vals else None

    def mean_dice(self) -> float | None:
        vals = [r.dice for r in self.records if r.dice is not None]
        return float(np.mean(vals)) if vals else None

    def mean_ed(self, c: int) -> float | None:
        vals = [r.detections[c].ed for r in self.records
                if c in r.detections and r.detections[c].ed is not None]
        return float(np.mean(vals)) if vals else None

    def mean_dbar(self, c: int) -> float | None:
        vals = [r.detections[c].d_bar for r in self.records
                if c in r.detections and r.detections[c].d_bar is not None]
        return float(np.mean(vals)) if vals else None

    def s1r(self, c: int) -> float | None:
        """Percentage of evaluated samples whose class-``c`` detection is a hit."""
        flags = [r.detections[c].hit for r in self.records if c in r.detections]
        return 100.0 * sum(flags) / len(flags) if flags else None

    def summary(self) -> dict[str, float | None]:
        out = {"iou": self.mean_iou(), "dice": self.mean_dice()}
        for c, name in enumerate(self.class_names):
            out[f"{name}_ed"] = self.mean_ed(c)
            out[f"{name}_dbar"] = self.mean_dbar(c)
            out[f"{name}_s1r"] = self.s1r(c)
        return out

    def to_csv(self) -> str:
        """Per-sample rows followed by one ``__mean__`` aggregate row.

        In the aggregate row the ``*_hit`` columns hold S_1R percentages.
        """
        buf = io.StringIO()
        buf.write("# distances in preprocessed-grid pixels\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns)
        for r in self.records:
            row = [r.id, _fmt(r.iou), _fmt(r.dice), _fmt(r.both_empty)]
            for c in range(len(self.class_names)):
                d = r.detections.get(c)
                row += ["", "", ""] if d is None else [_fmt(d.ed), _fmt(d.d_bar), _fmt(d.hit)]
            writer.writerow(row)
        agg = ["__mean__", _fmt(self.mean_iou()), _fmt(self.mean_dice()), ""]
        for c in range(len(self.class_names)):
            agg += [_fmt(self.mean_ed(c)), _fmt(self.mean_dbar(c)), _fmt(self.s1r(c))]
        writer.writerow(agg)
        return buf.getvalue()
