"""Inter-rater agreement statistics over rater x item ordinal matrices:
per-criterion averages, pairwise weighted kappa, ICC(3,1), and mean absolute
difference, plus a CSV evaluator that renders one report per criterion.

Conventions (stated in the report header): kappa generalizes to more than
two raters as the unweighted mean over all rater pairs, with per-rater
(not pooled) marginals; MAD is the mean absolute pairwise difference.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Optional

import numpy as np

KAPPA_SCHEMES = ("linear", "quadratic")

_DEGENERATE_EPS = 1e-12


class IrrError(Exception):
    pass


class UndefinedResultError(IrrError):
    """The statistic has no defined value on this input (zero variance)."""


class CsvFormatError(IrrError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


@dataclass(frozen=True)
class RatingMatrix:
    """Complete raters x items matrix of integer scores in [1, scale_max]."""

    raters: tuple
    items: tuple
    values: np.ndarray
    scale_max: int = 5

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.int64)
        object.__setattr__(self, "values", values)
        r, n = len(self.raters), len(self.items)
        if r < 2:
            raise ValueError("need at least 2 raters")
        if n < 1:
            raise ValueError("need at least 1 item")
        if self.scale_max < 2:
            raise ValueError("scale_max must be at least 2")
        if values.shape != (r, n):
            raise ValueError(f"values shape {values.shape} != ({r}, {n})")
        if values.min() < 1 or values.max() > self.scale_max:
            raise ValueError(f"scores must be integers in [1, {self.scale_max}]")

    @classmethod
    def from_rows(cls, rows, scale_max: int = 5) -> "RatingMatrix":
        rows = [list(row) for row in rows]
        return cls(
            raters=tuple(f"r{i + 1}" for i in range(len(rows))),
            items=tuple(f"i{j + 1}" for j in range(len(rows[0]) if rows else 0)),
            values=np.asarray(rows, dtype=np.int64),
            scale_max=scale_max,
        )


@dataclass(frozen=True)
class IrrReport:
    criterion: str
    average: float
    weighted_kappa: Optional[float]
    icc_3_1: Optional[float]
    mad: float
    notes: tuple = ()

    def to_dict(self) -> dict:
        return {
            "criterion": self.criterion,
            "average": self.average,
            "weighted_kappa": self.weighted_kappa,
            "icc_3_1": self.icc_3_1,
            "mad": self.mad,
            "notes": list(self.notes),
        }


def criterion_average(matrix: RatingMatrix) -> float:
    """Arithmetic mean over all cells."""
    return float(matrix.values.mean())


def _weight_matrix(scale_max: int, scheme: str) -> np.ndarray:
    if scheme not in KAPPA_SCHEMES:
        raise ValueError(f"scheme must be one of {KAPPA_SCHEMES}")
    grid = np.arange(1, scale_max + 1, dtype=np.float64)
    gap = np.abs(grid[:, None] - grid[None, :])
    if scheme == "linear":
        return gap / (scale_max - 1)
    return (gap / (scale_max - 1)) ** 2


def weighted_kappa_pair(a, b, scheme: str = "quadratic", scale_max: int = 5) -> float:
    """Cohen's weighted kappa for one rater pair.

    kappa = 1 - sum(w * observed) / sum(w * expected), with disagreement
    weights |i-j|/(k-1) (linear) or its square (quadratic), and expected
    agreement from the outer product of the two raters' own marginals.

    Both raters constant and equal leaves expected disagreement at zero;
    that is total agreement, defined as 1.0. Constant but unequal inputs
    have no chance-corrected value and raise UndefinedResultError.
    """
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 1:
        raise ValueError("vectors must share a length of at least 1")
    for v in (a, b):
        if v.min() < 1 or v.max() > scale_max:
            raise ValueError(f"scores must be in [1, {scale_max}]")
    n = a.size
    k = scale_max
    observed = np.zeros((k, k), dtype=np.float64)
    np.add.at(observed, (a - 1, b - 1), 1.0)
    observed /= n
    marginal_a = np.bincount(a - 1, minlength=k) / n
    marginal_b = np.bincount(b - 1, minlength=k) / n
    expected = np.outer(marginal_a, marginal_b)
    weights = _weight_matrix(k, scheme)
    expected_disagreement = float((weights * expected).sum())
    if expected_disagreement == 0.0:
        if np.array_equal(a, b):
            return 1.0
        raise UndefinedResultError("both raters constant but unequal")
    return 1.0 - float((weights * observed).sum()) / expected_disagreement


def weighted_kappa(matrix: RatingMatrix, scheme: str = "quadratic") -> float:
    value, _ = weighted_kappa_detail(matrix, scheme)
    if value is None:
        raise UndefinedResultError("all rater pairs degenerate")
    return value


def weighted_kappa_detail(matrix: RatingMatrix, scheme: str = "quadratic"):
    """(mean pairwise kappa or None, notes about excluded pairs)."""
    kappas = []
    notes = []
    for i, j in combinations(range(len(matrix.raters)), 2):
        try:
            kappas.append(weighted_kappa_pair(
                matrix.values[i], matrix.values[j], scheme, matrix.scale_max))
        except UndefinedResultError:
            notes.append(f"kappa undefined for pair ({matrix.raters[i]}, {matrix.raters[j]})")
    if not kappas:
        return None, tuple(notes)
    return float(np.mean(kappas)), tuple(notes)


def icc_3_1(matrix: RatingMatrix) -> float:
    """Two-way mixed, consistency, single measure:
    (BMS - EMS) / (BMS + (r - 1) * EMS) from the items x raters two-way
    decomposition without replication.
    """
    r, n = matrix.values.shape
    if n < 2:
        raise ValueError("need at least 2 items")
    x = matrix.values.astype(np.float64)
    grand = x.mean()
    item_means = x.mean(axis=0)
    rater_means = x.mean(axis=1)
    ss_items = r * float(((item_means - grand) ** 2).sum())
    ss_raters = n * float(((rater_means - grand) ** 2).sum())
    ss_total = float(((x - grand) ** 2).sum())
    ss_error = ss_total - ss_items - ss_raters
    bms = ss_items / (n - 1)
    ems = ss_error / ((n - 1) * (r - 1))
    denominator = bms + (r - 1) * ems
    if abs(denominator) < _DEGENERATE_EPS:
        raise UndefinedResultError("no variance to apportion")
    return (bms - ems) / denominator


def mean_absolute_difference(matrix: RatingMatrix) -> float:
    """Mean |a - b| over all items and unordered rater pairs."""
    x = matrix.values.astype(np.float64)
    r, n = x.shape
    diffs = np.abs(x[:, None, :] - x[None, :, :])
    upper = np.triu_indices(r, k=1)
    return float(diffs[upper].sum() / (n * r * (r - 1) / 2))


def compute_report(criterion: str, matrix: RatingMatrix,
                   scheme: str = "quadratic") -> IrrReport:
    kappa, notes = weighted_kappa_detail(matrix, scheme)
    all_notes = list(notes)
    if kappa is None:
        all_notes.append("weighted kappa undefined (all pairs degenerate)")
    try:
        icc = icc_3_1(matrix)
    except UndefinedResultError:
        icc = None
        all_notes.append("ICC(3,1) undefined (no variance)")
    except ValueError:
        icc = None
        all_notes.append("ICC(3,1) needs at least 2 items")
    return IrrReport(
        criterion=criterion,
        average=criterion_average(matrix),
        weighted_kappa=kappa,
        icc_3_1=icc,
        mad=mean_absolute_difference(matrix),
        notes=tuple(all_notes),
    )


def load_rating_csv(path, scale_max: int = 5):
    """Read criterion,rater,item,score rows into one complete RatingMatrix
    per criterion (criteria ordered by first appearance)."""
    p = Path(path)
    order = []
    cells = {}
    rater_order = {}
    item_order = {}
    with p.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError("empty file") from None
        expected = ["criterion", "rater", "item", "score"]
        if [h.strip().lower() for h in header] != expected:
            raise CsvFormatError(f"header must be {','.join(expected)}", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not col.strip() for col in row):
                continue
            if len(row) != 4:
                raise CsvFormatError(f"expected 4 columns, got {len(row)}", line=lineno)
            criterion, rater, item, score_text = (col.strip() for col in row)
            if not criterion or not rater or not item:
                raise CsvFormatError("criterion, rater, and item must be non-empty",
                                     line=lineno)
            try:
                score = int(score_text)
            except ValueError:
                raise CsvFormatError(f"score {score_text!r} is not an integer",
                                     line=lineno) from None
            if not 1 <= score <= scale_max:
                raise CsvFormatError(
                    f"score {score} out of scale [1, {scale_max}] "
                    f"(criterion {criterion}, rater {rater}, item {item})", line=lineno)
            if criterion not in cells:
                order.append(criterion)
                cells[criterion] = {}
                rater_order[criterion] = []
                item_order[criterion] = []
            if rater not in rater_order[criterion]:
                rater_order[criterion].append(rater)
            if item not in item_order[criterion]:
                item_order[criterion].append(item)
            if (rater, item) in cells[criterion]:
                raise CsvFormatError(
                    f"duplicate cell (criterion {criterion}, rater {rater}, item {item})",
                    line=lineno)
            cells[criterion][(rater, item)] = score

    matrices = []
    for criterion in order:
        raters = rater_order[criterion]
        items = item_order[criterion]
        if len(raters) < 2:
            raise CsvFormatError(f"criterion {criterion}: need at least 2 raters")
        values = np.zeros((len(raters), len(items)), dtype=np.int64)
        for i, rater in enumerate(raters):
            for j, item in enumerate(items):
                score = cells[criterion].get((rater, item))
                if score is None:
                    raise CsvFormatError(
                        f"missing cell: criterion {criterion}, rater {rater}, item {item}")
                values[i, j] = score
        matrices.append((criterion, RatingMatrix(
            raters=tuple(raters), items=tuple(items), values=values,
            scale_max=scale_max)))
    return matrices


def evaluate_csv(path, scale_max: int = 5, scheme: str = "quadratic"):
    """One IrrReport per criterion, in file order."""
    return [compute_report(criterion, matrix, scheme)
            for criterion, matrix in load_rating_csv(path, scale_max)]


def render_report_table(reports, scheme: str = "quadratic") -> str:
    """Aligned text table; the header states the statistic conventions."""
    headers = ["Criterion", "Avg", "Weighted Kappa", "ICC(3,1)", "MAD"]
    rows = [[
        report.criterion,
        f"{report.average:.2f}",
        "n/a" if report.weighted_kappa is None else f"{report.weighted_kappa:.3f}",
        "n/a" if report.icc_3_1 is None else f"{report.icc_3_1:.3f}",
        f"{report.mad:.3f}",
    ] for report in reports]
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
              for i, h in enumerate(headers)]
    lines = [
        f"Inter-rater reliability ({scheme} kappa weights, mean over rater pairs; "
        "MAD = mean absolute pairwise difference)",
        "  ".join(h.ljust(w) for h, w in zip(headers, widths)).rstrip(),
        "  ".join("-" * w for w in widths),
    ]
    for row in rows:
        lines.append("  ".join(col.ljust(w) for col, w in zip(row, widths)).rstrip())
    for report in reports:
        for note in report.notes:
            lines.append(f"note[{report.criterion}]: {note}")
    return "\n".join(lines) + "\n"


def reports_to_json(reports, scheme: str = "quadratic") -> str:
    return json.dumps({"scheme": scheme, "reports": [r.to_dict() for r in reports]},
                      indent=2) + "\n"
