"""Overlap and tree-structure evaluation of airway masks.

Overlap metrics (DSC, sensitivity, precision, FPR) come from voxel counts.
Structure metrics compare centreline skeletons: branches detected (BD),
tree length detected (TD), and the prediction's branch count and length
relative to the reference (BR, TR). BR and TR can exceed one when the
prediction contains branches the reference lacks.

Undefined metrics (zero denominators) are reported as ``None``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import AlignmentError, ContractError
from .skeleton import TreeSkeleton, skeletonize, step_lengths

METRIC_COLUMNS = ("dsc", "sensitivity", "precision", "bd", "td", "br", "tr", "fpr")
DETECTION_FRACTION = 0.5


def _grid(m) -> np.ndarray:
    return np.asarray(getattr(m, "data", m), dtype=bool)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int  # counted inside the reference bounding box only

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ContractError("confusion counts must be >= 0")


def bounding_box(mask) -> tuple[slice, ...] | None:
    """Tight axis-aligned box around the true voxels, ``None`` if empty."""
    idx = np.argwhere(_grid(mask))
    if len(idx) == 0:
        return None
    lo, hi = idx.min(axis=0), idx.max(axis=0) + 1
    return tuple(slice(int(a), int(b)) for a, b in zip(lo, hi))


def confusion(pred, ref) -> ConfusionCounts:
    p, r = _grid(pred), _grid(ref)
    if p.shape != r.shape:
        raise AlignmentError(f"prediction {p.shape} and reference {r.shape} differ in shape")
    tp = int(np.count_nonzero(p & r))
    fp = int(np.count_nonzero(p & ~r))
    fn = int(np.count_nonzero(~p & r))
    box = bounding_box(r)
    tn = 0 if box is None else int(np.count_nonzero(~p[box] & ~r[box]))
    return ConfusionCounts(tp, fp, fn, tn)


def _ratio(num, den):
    return None if den == 0 else num / den


def overall_metrics(c: ConfusionCounts) -> dict:
    return {
        "dsc": _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
        "sensitivity": _ratio(c.tp, c.tp + c.fn),
        "precision": _ratio(c.tp, c.tp + c.fp),
        "fpr": _ratio(c.fp, c.fp + c.tn),
    }


def branch_detected(branch, pred: np.ndarray, fraction: float = DETECTION_FRACTION) -> bool:
    inside = pred[tuple(np.asarray(branch.voxels).T)]
    return inside.mean() > fraction


def length_inside(skel: TreeSkeleton, pred: np.ndarray) -> float:
    """Skeleton length made of steps whose two voxels both lie in ``pred``."""
    total = 0.0
    for b in skel.branches:
        v = np.asarray(b.voxels)
        if len(v) < 2:
            continue
        inside = pred[tuple(v.T)]
        both = inside[:-1] & inside[1:]
        total += float(step_lengths(v, skel.spacing)[both].sum())
    return total


def structural_metrics(pred, ref, ref_skel: TreeSkeleton, pred_skel: TreeSkeleton,
                       fraction: float = DETECTION_FRACTION) -> dict:
    p = _grid(pred)
    if p.shape != _grid(ref).shape:
        raise AlignmentError("prediction and reference differ in shape")
    n_ref = ref_skel.n_branches
    l_ref = ref_skel.total_length
    n_p = pred_skel.n_branches
    l_p = pred_skel.total_length
    out = {"branch_count": n_p, "tree_length_cm": l_p / 10.0}
    if n_ref == 0:
        out.update(bd=None, td=None, br=None, tr=None)
        return out
    n_tp = int(sum(bool(branch_detected(b, p, fraction)) for b in ref_skel.branches))
    l_tp = length_inside(ref_skel, p)
    out.update(
        bd=n_tp / n_ref,
        td=_ratio(l_tp, l_ref),
        br=n_p / n_ref,
        tr=_ratio(l_p, l_ref),
    )
    return out


def generation_stats(skel: TreeSkeleton) -> tuple[float, float, int]:
    """Mean, median and max of the per-branch generation indices."""
    if skel.n_branches == 0:
        raise ContractError("generation statistics need a non-empty skeleton")
    g = np.asarray(skel.generations, dtype=float)
    return float(g.mean()), float(np.median(g)), int(g.max())


@dataclass
class MetricReport:
    dsc: float | None
    sensitivity: float | None
    precision: float | None
    bd: float | None
    td: float | None
    br: float | None
    tr: float | None
    fpr: float | None  # reference only: depends on the bounding-box convention
    branch_count: int
    tree_length_cm: float
    generation_avg: float | None
    generation_median: float | None
    generation_max: int | None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self, name: str = "prediction") -> str:
        return format_table({name: self})


def evaluate(pred, ref, ref_skel: TreeSkeleton | None = None, pred_skel: TreeSkeleton | None = None,
             fraction: float = DETECTION_FRACTION) -> MetricReport:
    """Full report for one prediction/reference pair. Skeletons are computed when not supplied."""
    p, r = _grid(pred), _grid(ref)
    if p.shape != r.shape:
        raise AlignmentError(f"prediction {p.shape} and reference {r.shape} differ in shape")
    spacing = getattr(ref, "spacing", (1.0, 1.0, 1.0))
    if hasattr(pred, "spacing") and not np.allclose(pred.spacing, spacing):
        raise AlignmentError(f"prediction spacing {pred.spacing} != reference spacing {spacing}")
    ref_skel = skeletonize(ref) if ref_skel is None else ref_skel
    pred_skel = skeletonize(pred) if pred_skel is None else pred_skel
    overall = overall_metrics(confusion(p, r))
    struct = structural_metrics(p, r, ref_skel, pred_skel, fraction)
    gens = generation_stats(pred_skel) if pred_skel.n_branches else (None, None, None)
    return MetricReport(
        dsc=overall["dsc"],
        sensitivity=overall["sensitivity"],
        precision=overall["precision"],
        bd=struct["bd"],
        td=struct["td"],
        br=struct["br"],
        tr=struct["tr"],
        fpr=overall["fpr"],
        branch_count=struct["branch_count"],
        tree_length_cm=struct["tree_length_cm"],
        generation_avg=gens[0],
        generation_median=gens[1],
        generation_max=gens[2],
    )


def summarize(reports: Sequence[MetricReport]) -> dict:
    """Mean and standard deviation of each column, ignoring undefined values."""
    out = {}
    for col in METRIC_COLUMNS:
        vals = [getattr(r, col) for r in reports if getattr(r, col) is not None]
        out[col] = (float(np.mean(vals)), float(np.std(vals))) if vals else (None, None)
    return out


def _cell(value) -> str:
    if value is None:
        return "n/a"
    if isinstance(value, tuple):
        mean, std = value
        if mean is None:
            return "n/a"
        return f"{100 * mean:.1f}±{100 * std:.1f}"
    return f"{100 * value:.1f}"


def format_table(rows: Mapping[str, object]) -> str:
    """Fixed-width text table in percent.

    ``rows`` maps a row name to a :class:`MetricReport` or to a
    :func:`summarize` result (cells then read ``mean±std``).
    """
    names = list(rows)
    cells = []
    for row in rows.values():
        get = row.get if isinstance(row, Mapping) else (lambda c, row=row: getattr(row, c))
        cells.append([_cell(get(c)) for c in METRIC_COLUMNS])
    name_w = max([len("method")] + [len(k) for k in names])
    widths = [max([len(c)] + [len(r[i]) for r in cells]) + 2 for i, c in enumerate(METRIC_COLUMNS)]
    header = "method".ljust(name_w) + "".join(c.upper().rjust(w) for c, w in zip(METRIC_COLUMNS, widths))
    lines = [header, "-" * len(header)]
    for name, row in zip(names, cells):
        lines.append(name.ljust(name_w) + "".join(v.rjust(w) for v, w in zip(row, widths)))
    lines.append("FPR counts true negatives inside the reference bounding box; for reference only.")
    return "\n".join(lines)
