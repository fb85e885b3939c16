"""Evaluation metrics (DSC, HD95) and the aggregated metric report."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import ShapeMismatch


def _check_pair(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs ground truth {gt.shape}")


def dsc(pred, gt) -> float:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    _check_pair(pred, gt)
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / total


_FOUR_NEIGHBOURS = ndimage.generate_binary_structure(2, 1)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a background 4-neighbour; outside the image counts as background."""
    mask = np.asarray(mask, dtype=bool)
    eroded = ndimage.binary_erosion(mask, structure=_FOUR_NEIGHBOURS, border_value=0)
    return mask & ~eroded


def directed_distances(src: np.ndarray, dst: np.ndarray, spacing=(1.0, 1.0)) -> np.ndarray:
    """Distance from every ``src`` pixel to the nearest ``dst`` pixel, in physical units."""
    field_ = ndimage.distance_transform_edt(~dst, sampling=spacing)
    return field_[src]


def hd95(pred, gt, spacing=(1.0, 1.0)) -> Optional[float]:
    """95th percentile of the pooled boundary-to-boundary distances in both directions.

    Returns ``None`` when either mask is empty.
    """
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    _check_pair(pred, gt)
    if not pred.any() or not gt.any():
        return None
    bp, bg = boundary(pred), boundary(gt)
    spacing = tuple(float(s) for s in spacing)
    d = np.concatenate([directed_distances(bp, bg, spacing), directed_distances(bg, bp, spacing)])
    return float(np.percentile(d, 95))


SYNAPSE_REFERENCE = "Synapse reference (full scale): Model-1 80.09, Model-2 82.47, full 85.97 DSC%"


@dataclass
class MetricReport:
    """Per-case, per-class DSC/HD95 for the foreground classes.

    ``per_case[case_id][class_name] = {"dsc": float, "hd95": float | None}``.
    Undefined HD95 entries are excluded from the means and counted.
    """

    class_names: List[str]
    per_case: Dict[str, Dict[str, Dict[str, Optional[float]]]] = field(default_factory=dict)

    def add_case(self, case_id: str, pred: np.ndarray, gt: np.ndarray, spacing=(1.0, 1.0)) -> None:
        entry = {}
        for k, name in enumerate(self.class_names, start=1):
            p, g = pred == k, gt == k
            entry[name] = {"dsc": dsc(p, g), "hd95": hd95(p, g, spacing)}
        self.per_case[case_id] = entry

    def _values(self, key: str, name: Optional[str] = None) -> List[float]:
        names = [name] if name else self.class_names
        vals = []
        for cid in sorted(self.per_case):
            for n in names:
                v = self.per_case[cid][n][key]
                if v is not None:
                    vals.append(v)
        return vals

    @property
    def mean_dsc(self) -> float:
        vals = self._values("dsc")
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def mean_hd95(self) -> Optional[float]:
        vals = self._values("hd95")
        return float(np.mean(vals)) if vals else None

    @property
    def skipped_hd95(self) -> int:
        return sum(1 for cid in self.per_case for n in self.class_names
                   if self.per_case[cid][n]["hd95"] is None)

    def class_dsc(self, name: str) -> float:
        vals = self._values("dsc", name)
        return float(np.mean(vals)) if vals else float("nan")

    def summary(self) -> dict:
        return {
            "mean_dsc_percent": 100.0 * self.mean_dsc,
            "mean_hd95": self.mean_hd95,
            "hd95_skipped": self.skipped_hd95,
            "num_cases": len(self.per_case),
            "class_dsc_percent": {n: 100.0 * self.class_dsc(n) for n in self.class_names},
        }

    def to_dict(self) -> dict:
        return {
            "class_names": list(self.class_names),
            "aggregates": self.summary(),
            "per_case": {cid: self.per_case[cid] for cid in sorted(self.per_case)},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(list(d["class_names"]), {k: v for k, v in d["per_case"].items()})

    def table(self, row_name: str = "model") -> str:
        return format_table([(row_name, self)], self.class_names)


def _fmt(v: Optional[float]) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "-"
    return f"{v:.2f}"


def format_table(rows: Sequence[tuple], class_names: Sequence[str], extra: Sequence[str] = (),
                 header: Optional[str] = None) -> str:
    """Fixed-width table: name, extra columns, DSC(%), HD, then per-class DSC(%).

    Each row is ``(name, report)`` or ``(name, report, [extra values...])``.
    """
    cols = ["Model", *extra, "DSC(%)", "HD", *class_names]
    body = []
    for row in rows:
        name, rep = row[0], row[1]
        ext = [str(v) for v in (row[2] if len(row) > 2 else [])]
        body.append([name, *ext, _fmt(100 * rep.mean_dsc), _fmt(rep.mean_hd95),
                     *(_fmt(100 * rep.class_dsc(n)) for n in class_names)])
    widths = [max(12, *(len(r[i]) + 2 for r in [cols, *body])) for i in range(len(cols))]
    lines = []
    if header:
        lines.append(header)
    lines.append("".join(c.ljust(w) for c, w in zip(cols, widths)).rstrip())
    lines.append("-" * sum(widths))
    for cells in body:
        lines.append("".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip())
    return "\n".join(lines) + "\n"
