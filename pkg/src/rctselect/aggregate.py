"""Cross-RCT aggregation of held-out errors.

Two estimators' per-RCT errors are turned into bounded scores
``(err_B - err_A) / (err_B + err_A)``, summarized by a two-sided one-sample
t-test, and the pairwise results ranked by counting significant wins.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from itertools import combinations
from typing import IO, Mapping, Sequence

import numpy as np

from .crossval import MseEstimate
from .errors import DataError
from .tdist import t_sf_two_sided

DEFAULT_ALPHA = 0.05


@dataclass(frozen=True, eq=False)
class ScoreVector:
    scores: np.ndarray
    pair: tuple[str, str]
    rct_ids: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.scores)


@dataclass(frozen=True)
class TTestResult:
    """One-sample t-test of mean score == 0.

    A degenerate result (zero score variance) has ``p_value`` None; ``t_stat`` is 0
    when every score is 0 and NaN otherwise, with the direction kept in ``mean_score``.
    """

    t_stat: float
    p_value: float | None
    n: int
    mean_score: float

    @property
    def degenerate(self) -> bool:
        return self.p_value is None


def _score(a: float, b: float) -> float:
    total = a + b
    return 0.0 if total == 0 else (b - a) / total


def normalized_scores(errors_a: Sequence[MseEstimate], errors_b: Sequence[MseEstimate]) -> ScoreVector:
    """Per-RCT score of A against B; positive entries favour A. Both-zero errors score 0."""
    if len(errors_a) != len(errors_b):
        raise DataError("error lists cover different numbers of rcts")
    ids = []
    scores = np.empty(len(errors_a))
    for j, (ea, eb) in enumerate(zip(errors_a, errors_b)):
        if ea.rct_id != eb.rct_id:
            raise DataError(f"error lists are misaligned at position {j} ({ea.rct_id!r} vs {eb.rct_id!r})")
        if ea.failed or eb.failed:
            raise DataError(f"rct {ea.rct_id!r} has a failed error estimate")
        if ea.value < 0 or eb.value < 0:
            raise DataError(f"rct {ea.rct_id!r} has a negative error")
        scores[j] = _score(ea.value, eb.value)
        ids.append(ea.rct_id)
    spec_a = errors_a[0].spec if errors_a else ""
    spec_b = errors_b[0].spec if errors_b else ""
    return ScoreVector(scores, (spec_a, spec_b), tuple(ids))


def t_test_one_sample(scores: ScoreVector | Sequence[float] | np.ndarray) -> TTestResult:
    values = np.asarray(scores.scores if isinstance(scores, ScoreVector) else scores, dtype=np.float64)
    n = len(values)
    if n < 2:
        raise DataError("t-test needs at least 2 scores")
    mean = float(np.mean(values))
    sd = float(np.std(values, ddof=1))
    if sd == 0.0:
        return TTestResult(0.0 if mean == 0 else math.nan, None, n, mean)
    t = mean * math.sqrt(n) / sd
    return TTestResult(t, t_sf_two_sided(t, n - 1), n, mean)


def _flip(res: TTestResult) -> TTestResult:
    return TTestResult(-res.t_stat if res.t_stat != 0 else 0.0, res.p_value, res.n, -res.mean_score + 0.0)


@dataclass(frozen=True, eq=False)
class ComparisonMatrix:
    """Pairwise t-tests; a positive t at ``cells[(A, B)]`` means A has lower errors."""

    specs: tuple[str, ...]
    cells: dict[tuple[str, str], TTestResult]
    scores: dict[tuple[str, str], ScoreVector]
    rct_ids: tuple[str, ...]
    excluded: dict[str, str]

    def cell(self, a: str, b: str) -> TTestResult:
        if a == b:
            raise KeyError("diagonal cells are undefined")
        return self.cells[(a, b)]


def compare_all(errors: Mapping[str, Sequence[MseEstimate]]) -> ComparisonMatrix:
    """All pairwise comparisons on the RCTs where every spec produced an error."""
    specs = tuple(errors)
    if len(specs) < 2:
        raise DataError("need at least 2 estimator specs to compare")
    ids = [e.rct_id for e in errors[specs[0]]]
    for s in specs[1:]:
        if [e.rct_id for e in errors[s]] != ids:
            raise DataError(f"spec {s!r} covers a different rct list than {specs[0]!r}")
    excluded: dict[str, str] = {}
    for s in specs:
        for e in errors[s]:
            if e.failed and e.rct_id not in excluded:
                excluded[e.rct_id] = f"{s}: {e.failure}"
    kept = {s: [e for e in errors[s] if e.rct_id not in excluded] for s in specs}
    if len(kept[specs[0]]) < 2:
        raise DataError("fewer than 2 rcts are shared by all specs")

    cells: dict[tuple[str, str], TTestResult] = {}
    scores: dict[tuple[str, str], ScoreVector] = {}
    for a, b in combinations(specs, 2):
        sv = normalized_scores(kept[a], kept[b])
        res = t_test_one_sample(sv)
        scores[(a, b)] = sv
        scores[(b, a)] = ScoreVector(-sv.scores + 0.0, (b, a), sv.rct_ids)
        cells[(a, b)] = res
        cells[(b, a)] = _flip(res)
    return ComparisonMatrix(specs, cells, scores, tuple(e.rct_id for e in kept[specs[0]]), excluded)


@dataclass(frozen=True)
class RankRow:
    spec: str
    wins: int
    losses: int
    ties: int


def rank_copeland(matrix: ComparisonMatrix, alpha: float = DEFAULT_ALPHA) -> list[RankRow]:
    """Order specs by significant wins (desc), then losses (asc), then name."""
    if not 0.0 < alpha < 1.0:
        raise DataError("alpha must lie in (0, 1)")
    rows = []
    for a in matrix.specs:
        wins = losses = ties = 0
        for b in matrix.specs:
            if a == b:
                continue
            res = matrix.cells[(a, b)]
            significant = res.p_value is not None and res.p_value < alpha
            if significant and res.t_stat > 0:
                wins += 1
            elif significant and res.t_stat < 0:
                losses += 1
            else:
                ties += 1
        rows.append(RankRow(a, wins, losses, ties))
    return sorted(rows, key=lambda r: (-r.wins, r.losses, r.spec))


def histogram(scores: ScoreVector | Sequence[float] | np.ndarray, n_bins: int = 20) -> list[tuple[float, float, int]]:
    """Counts over ``n_bins`` uniform bins on [-1, 1]; bins are [low, high) except the last, which is closed."""
    if n_bins < 1:
        raise DataError("n_bins must be at least 1")
    values = np.asarray(scores.scores if isinstance(scores, ScoreVector) else scores, dtype=np.float64)
    counts, edges = np.histogram(values, bins=n_bins, range=(-1.0, 1.0))
    return [(float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(n_bins)]


# ---------------------------------------------------------------- serialization


def _fmt(value: float | None) -> str:
    if value is None:
        return ""
    return repr(float(value))


def write_matrix(matrix: ComparisonMatrix, sink: IO[str]) -> None:
    """Long-format matrix: one row per ordered pair, with a degenerate flag."""
    writer = csv.writer(sink, lineterminator="\n")
    writer.writerow(["row", "col", "t_stat", "p_value", "n", "mean_score", "degenerate"])
    for a in matrix.specs:
        for b in matrix.specs:
            if a == b:
                continue
            res = matrix.cells[(a, b)]
            writer.writerow([a, b, _fmt(res.t_stat), _fmt(res.p_value), res.n, _fmt(res.mean_score), int(res.degenerate)])


def write_matrix_table(matrix: ComparisonMatrix, sink: IO[str], digits: int = 3) -> None:
    """Square table of ``(t, p)`` cells with ``x`` on the diagonal."""
    writer = csv.writer(sink, lineterminator="\n")
    writer.writerow(["method", *matrix.specs])
    for a in matrix.specs:
        row = [a]
        for b in matrix.specs:
            if a == b:
                row.append("x")
                continue
            res = matrix.cells[(a, b)]
            p = "nan" if res.p_value is None else f"{res.p_value:.{digits}g}"
            row.append(f"({res.t_stat:.{digits + 1}g}, {p})")
        writer.writerow(row)


def write_ranking(ranking: Sequence[RankRow], sink: IO[str]) -> None:
    writer = csv.writer(sink, lineterminator="\n")
    writer.writerow(["rank", "spec", "wins", "losses", "ties"])
    for i, r in enumerate(ranking, start=1):
        writer.writerow([i, r.spec, r.wins, r.losses, r.ties])


def write_histogram(hist: Sequence[tuple[float, float, int]], sink: IO[str]) -> None:
    writer = csv.writer(sink, lineterminator="\n")
    writer.writerow(["bin_low", "bin_high", "count"])
    for low, high, count in hist:
        writer.writerow([repr(low), repr(high), count])


def write_scores(sv: ScoreVector, sink: IO[str]) -> None:
    writer = csv.writer(sink, lineterminator="\n")
    writer.writerow(["rct_id", "score"])
    for rid, s in zip(sv.rct_ids, sv.scores.tolist()):
        writer.writerow([rid, repr(s)])
