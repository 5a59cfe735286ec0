"""Segmentation and case-level metrics with an empty-segmentation fallback.

dice, auc and kappa are evaluated in exact rational arithmetic from
integer counts and rounded to float once, so they agree bit-for-bit with
any exact reference.  hausdorff measures voxel-center point sets in mm.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .volume import Mask, ShapeMismatchError


class UndefinedMetricError(ValueError):
    """The metric has no defined value on these inputs."""


@dataclass(frozen=True)
class CaseOutcome:
    """One case's predicted responder score, true label and fallback flag."""

    case_id: str
    score: float
    label: int
    empty_segmentation: bool = False

    def __post_init__(self):
        if not (math.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise ValueError(f"score must lie in [0, 1], got {self.score}")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if self.empty_segmentation and self.score != 0.0:
            raise ValueError("empty-segmentation outcomes must carry score 0")


@dataclass(frozen=True)
class MetricReport:
    dice: float | None = None
    hausdorff_mm: float | None = None
    auc: float | None = None
    kappa: float | None = None

    def __post_init__(self):
        for name, lo, hi in (("dice", 0.0, 1.0), ("auc", 0.0, 1.0),
                             ("kappa", -1.0, 1.0)):
            v = getattr(self, name)
            if v is not None and not (math.isfinite(v) and lo <= v <= hi):
                raise ValueError(f"{name} out of range: {v}")
        h = self.hausdorff_mm
        if h is not None and not (math.isfinite(h) and h >= 0.0):
            raise ValueError(f"hausdorff_mm out of range: {h}")

    def to_text(self) -> str:
        lines = []
        for name in ("dice", "hausdorff_mm", "auc", "kappa"):
            v = getattr(self, name)
            if v is not None:
                lines.append(f"{name}={v:.6g}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        d = {
            name: getattr(self, name)
            for name in ("dice", "hausdorff_mm", "auc", "kappa")
            if getattr(self, name) is not None
        }
        return json.dumps(d, sort_keys=True)


def dice(a: Mask, b: Mask) -> float:
    """2|A.B| / (|A| + |B|); defined as 1.0 when both masks are empty."""
    if a.shape != b.shape:
        raise ShapeMismatchError(f"grid shapes differ: {a.shape} vs {b.shape}")
    na = a.foreground_count
    nb = b.foreground_count
    if na == 0 and nb == 0:
        return 1.0
    inter = int(np.count_nonzero(a.data & b.data))
    return float(Fraction(2 * inter, na + nb))


def hausdorff(a: Mask, b: Mask, spacing=None, percentile: float = 100.0) -> float:
    """Symmetric Hausdorff distance between foreground voxel centers, in mm.

    percentile < 100 gives the robust variant (e.g. 95 for HD95): the
    max over both directions of that percentile of directed distances.
    """
    if a.shape != b.shape:
        raise ShapeMismatchError(f"grid shapes differ: {a.shape} vs {b.shape}")
    if not 0.0 < percentile <= 100.0:
        raise ValueError("percentile must lie in (0, 100]")
    if a.foreground_count == 0 or b.foreground_count == 0:
        raise UndefinedMetricError("hausdorff is undefined for an empty mask")
    sp = np.asarray(a.shape.spacing if spacing is None else spacing, np.float64)
    pa = np.argwhere(a.data) * sp
    pb = np.argwhere(b.data) * sp
    d_ab = cKDTree(pb).query(pa)[0]
    d_ba = cKDTree(pa).query(pb)[0]
    if percentile == 100.0:
        return float(max(d_ab.max(), d_ba.max()))
    return float(max(np.percentile(d_ab, percentile),
                     np.percentile(d_ba, percentile)))


def auc(outcomes) -> float:
    """Probability a random positive outscores a random negative; ties 0.5."""
    outcomes = list(outcomes)
    pos = np.array([o.score for o in outcomes if o.label == 1], np.float64)
    neg = np.array([o.score for o in outcomes if o.label == 0], np.float64)
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError("auc needs at least one case of each class")
    wins = int((pos[:, None] > neg[None, :]).sum())
    ties = int((pos[:, None] == neg[None, :]).sum())
    return float(Fraction(2 * wins + ties, 2 * pos.size * neg.size))


def kappa(outcomes, threshold: float = 0.5) -> float:
    """Chance-corrected agreement of thresholded scores (>= rule) vs labels."""
    outcomes = list(outcomes)
    if not outcomes:
        raise UndefinedMetricError("kappa needs at least one case")
    tp = tn = fp = fn = 0
    for o in outcomes:
        predicted = o.score >= threshold
        if predicted and o.label == 1:
            tp += 1
        elif predicted:
            fp += 1
        elif o.label == 1:
            fn += 1
        else:
            tn += 1
    n = tp + tn + fp + fn
    po = Fraction(tp + tn, n)
    pe = Fraction((tp + fp) * (tp + fn) + (fn + tn) * (fp + tn), n * n)
    if pe == 1:
        return 0.0
    return float((po - pe) / (1 - pe))


def apply_empty_fallback(seg: Mask, outcome: CaseOutcome) -> CaseOutcome:
    """Force score 0 (non-responder) when the segmentation found nothing."""
    if seg.foreground_count > 0:
        return outcome
    return replace(outcome, score=0.0, empty_segmentation=True)


# ---------------------------------------------------------------------------
# Outcome CSV: case_id,score,label,empty_seg with a header row
# ---------------------------------------------------------------------------

def write_outcomes(outcomes, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case_id", "score", "label", "empty_seg"])
        for o in outcomes:
            writer.writerow(
                [o.case_id, repr(o.score), o.label, int(o.empty_segmentation)]
            )


def read_outcomes(path) -> list[CaseOutcome]:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["case_id", "score", "label", "empty_seg"]:
        raise ValueError(f"{path}: expected header case_id,score,label,empty_seg")
    out = []
    for row in rows[1:]:
        if len(row) != 4:
            raise ValueError(f"{path}: malformed row {row!r}")
        out.append(
            CaseOutcome(row[0], float(row[1]), int(row[2]), bool(int(row[3])))
        )
    return out
