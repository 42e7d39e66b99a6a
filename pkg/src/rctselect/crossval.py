"""Repeated train/evaluation fold splitting and the held-out squared-error proxy.

Each arm of each RCT is split into fold 1 (training, size ``round(p * arm)``) and
fold 2 (evaluation). An estimator fitted on fold 1 is scored against the plain
difference of means on fold 2, which is an unbiased label for the true effect.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import IO, Iterable, Sequence

import numpy as np

from .corpus import Corpus, Rct, Units
from .errors import DataError, EstimatorFailure
from .estimators import (
    Estimate,
    EstimatorSpec,
    estimate_dm,
    run_estimator,
    run_family,
    winsorize_apply,
    winsorize_fit,
)
from .parallel import parallel_map
from .seeding import MOM_STREAM, SPLIT_STREAM, derived_rng

DEFAULT_P = 0.5
DEFAULT_REPLICATES = 100


def fold_size(p: float, arm_size: int) -> int:
    """Fold-1 size of an arm; Python's ``round`` is round-half-to-even."""
    return round(p * arm_size)


@dataclass(frozen=True)
class SplitPlan:
    """Seeded fold assignments for every (rct, replicate).

    Index sets are derived on demand from ``(seed, rct position, replicate)``, so the
    plan stays small and any single fold can be regenerated independently.
    """

    p: float
    n_replicates: int
    seed: int
    rct_ids: tuple[str, ...]
    arm_sizes: tuple[tuple[int, int], ...]
    _index: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "_index", {rid: i for i, rid in enumerate(self.rct_ids)})

    def index_of(self, rct_id: str) -> int:
        try:
            return self._index[rct_id]
        except KeyError:
            raise DataError(f"rct {rct_id!r} is not covered by this split plan") from None

    def assignments(self, i: int, b: int) -> tuple[np.ndarray, np.ndarray]:
        """(S, R): sorted fold-1 positions within the treated and within the control arm."""
        if not 0 <= b < self.n_replicates:
            raise IndexError(f"replicate {b} outside [0, {self.n_replicates})")
        n_treat, n_control = self.arm_sizes[i]
        rng = derived_rng(self.seed, SPLIT_STREAM, i, b)
        s = np.sort(rng.permutation(n_treat)[: fold_size(self.p, n_treat)])
        r = np.sort(rng.permutation(n_control)[: fold_size(self.p, n_control)])
        return s, r

    def fold_indices(self, rct: Rct, b: int) -> tuple[np.ndarray, np.ndarray]:
        """Unit indices of fold 1 and fold 2 of ``rct`` in replicate ``b`` (each in unit order)."""
        i = self.index_of(rct.id)
        treated, control = rct.units.treated, rct.units.control
        if (len(treated), len(control)) != self.arm_sizes[i]:
            raise DataError(f"rct {rct.id!r} does not match the arm sizes this plan was built for")
        s, r = self.assignments(i, b)
        in1_t = np.zeros(len(treated), dtype=bool)
        in1_t[s] = True
        in1_c = np.zeros(len(control), dtype=bool)
        in1_c[r] = True
        fold1 = np.sort(np.concatenate([treated[in1_t], control[in1_c]]))
        fold2 = np.sort(np.concatenate([treated[~in1_t], control[~in1_c]]))
        return fold1, fold2

    def folds(self, rct: Rct, b: int) -> tuple[Units, Units]:
        fold1, fold2 = self.fold_indices(rct, b)
        return rct.units.take(fold1), rct.units.take(fold2)

    def estimator_rng(self, rct: Rct, b: int) -> np.random.Generator:
        return derived_rng(self.seed, MOM_STREAM, self.index_of(rct.id), b)


def make_splits(corpus: Corpus, p: float = DEFAULT_P, n_replicates: int = DEFAULT_REPLICATES, seed: int = 0) -> SplitPlan:
    if not 0.0 < p < 1.0:
        raise DataError("split proportion p must lie in (0, 1)")
    if n_replicates < 1:
        raise DataError("n_replicates must be positive")
    sizes = []
    for rct in corpus:
        arms = (rct.n_treated, rct.n_control)
        for arm, label in zip(arms, ("treated", "control")):
            k = fold_size(p, arm)
            if k < 1 or k > arm - 1:
                raise DataError(
                    f"rct {rct.id!r}: p={p} leaves an empty fold in the {label} arm ({arm} units)"
                )
        sizes.append(arms)
    return SplitPlan(p, n_replicates, seed, tuple(corpus.ids), tuple(sizes))


def heldout_dm(fold2: Units) -> float:
    return estimate_dm(fold2.y[fold2.t == 1], fold2.y[fold2.t == 0]).delta_hat


def heldout_error(rct: Rct, spec: EstimatorSpec, plan: SplitPlan, b: int) -> float:
    """(estimate on fold 1 - difference of means on fold 2) ** 2 for replicate ``b``."""
    fold1, fold2 = plan.folds(rct, b)
    try:
        est = run_estimator(spec, fold1, plan.estimator_rng(rct, b))
    except (DataError, ArithmeticError) as exc:
        raise EstimatorFailure(rct.id, b, exc) from exc
    return (est.delta_hat - heldout_dm(fold2)) ** 2


# ---------------------------------------------------------------- per-RCT evaluation engine


@dataclass(frozen=True, eq=False)
class FoldStats:
    """Fold-1 estimates of several specs and the fold-2 DM label, for every replicate of one RCT.

    Arrays have one entry per replicate; ``std_err`` is NaN where an estimator has none,
    and a failed spec is NaN throughout with the first failure recorded in ``failures``.
    """

    rct_id: str
    m: int
    heldout_dm: np.ndarray
    delta_hat: dict[str, np.ndarray]
    std_err: dict[str, np.ndarray]
    failures: dict[str, str]

    def estimate(self, spec: str, b: int) -> Estimate:
        se = self.std_err[spec][b]
        return Estimate(float(self.delta_hat[spec][b]), None if math.isnan(se) else float(se), 0, 0)

    def t_stat(self, spec: str) -> np.ndarray:
        return self.delta_hat[spec] / self.std_err[spec]


def evaluate_folds(rct: Rct, specs: Sequence[EstimatorSpec], plan: SplitPlan) -> FoldStats:
    n_rep = plan.n_replicates
    label = np.empty(n_rep)
    delta = {s.name: np.full(n_rep, np.nan) for s in specs}
    se = {s.name: np.full(n_rep, np.nan) for s in specs}
    failures: dict[str, str] = {}
    levels = {s.winsorize_level for s in specs} - {None}
    for b in range(n_rep):
        fold1, fold2 = plan.folds(rct, b)
        label[b] = heldout_dm(fold2)
        # Same as run_estimator, with one Winsorized copy of fold 1 per level.
        train = {None: fold1}
        train.update({lv: winsorize_apply(fold1, winsorize_fit(fold1, lv)) for lv in levels})
        for spec in specs:
            if spec.name in failures:
                continue
            try:
                est = run_family(spec, train[spec.winsorize_level], plan.estimator_rng(rct, b))
            except (DataError, ArithmeticError) as exc:
                failures[spec.name] = str(EstimatorFailure(rct.id, b, exc))
                delta[spec.name][:] = np.nan
                se[spec.name][:] = np.nan
                continue
            delta[spec.name][b] = est.delta_hat
            if est.std_err is not None:
                se[spec.name][b] = est.std_err
    return FoldStats(rct.id, rct.m, label, delta, se, failures)


def _evaluate_job(job: tuple[Rct, tuple[EstimatorSpec, ...], SplitPlan]) -> FoldStats:
    return evaluate_folds(*job)


def corpus_fold_stats(
    corpus: Corpus, specs: Iterable[EstimatorSpec], plan: SplitPlan, threads: int = 1
) -> list[FoldStats]:
    specs = tuple(dict.fromkeys(specs))
    return parallel_map(_evaluate_job, [(rct, specs, plan) for rct in corpus], threads)


# ---------------------------------------------------------------- errors


@dataclass(frozen=True, eq=False)
class MseEstimate:
    """Replicate-averaged held-out squared error of one spec on one RCT."""

    value: float
    per_replicate: np.ndarray
    rct_id: str
    spec: str
    failure: str | None = None

    @property
    def failed(self) -> bool:
        return self.failure is not None


def errors_from_stats(stats: Sequence[FoldStats], spec: str) -> list[MseEstimate]:
    out = []
    for fs in stats:
        if spec in fs.failures:
            out.append(MseEstimate(math.nan, np.empty(0), fs.rct_id, spec, fs.failures[spec]))
            continue
        per = (fs.delta_hat[spec] - fs.heldout_dm) ** 2
        out.append(MseEstimate(float(np.mean(per)), per, fs.rct_id, spec))
    return out


def corpus_errors(corpus: Corpus, spec: EstimatorSpec, plan: SplitPlan, threads: int = 1) -> list[MseEstimate]:
    """Per-RCT mean held-out error in corpus order; failing RCTs are flagged, not fatal."""
    return errors_from_stats(corpus_fold_stats(corpus, [spec], plan, threads), spec.name)


def corpus_errors_many(
    corpus: Corpus, specs: Sequence[EstimatorSpec], plan: SplitPlan, threads: int = 1
) -> dict[str, list[MseEstimate]]:
    stats = corpus_fold_stats(corpus, specs, plan, threads)
    return {s.name: errors_from_stats(stats, s.name) for s in dict.fromkeys(specs)}


def write_errors(errors: dict[str, list[MseEstimate]], sink: IO[str], long: bool = False) -> None:
    """CSV ``rct_id,spec,value`` (or ``rct_id,spec,replicate,value`` when ``long``); failed rows have an empty value."""
    writer = csv.writer(sink, lineterminator="\n")
    writer.writerow(["rct_id", "spec", "replicate", "value"] if long else ["rct_id", "spec", "value"])
    for spec, rows in errors.items():
        for e in rows:
            if long:
                for b, v in enumerate(e.per_replicate.tolist()):
                    writer.writerow([e.rct_id, spec, b, repr(v)])
            else:
                writer.writerow([e.rct_id, spec, "" if e.failed else repr(e.value)])


def read_errors(source: IO[str]) -> dict[str, list[MseEstimate]]:
    """Inverse of ``write_errors`` (wide format); spec and rct order follow first appearance."""
    reader = csv.DictReader(source)
    if reader.fieldnames is None or not {"rct_id", "spec", "value"} <= set(reader.fieldnames):
        raise DataError("error csv needs columns rct_id,spec,value")
    out: dict[str, list[MseEstimate]] = {}
    for line, row in enumerate(reader, start=2):
        raw = row["value"]
        if raw in ("", None):
            est = MseEstimate(math.nan, np.empty(0), row["rct_id"], row["spec"], "failed")
        else:
            try:
                value = float(raw)
            except ValueError:
                raise DataError(f"row {line}: value is not numeric ({raw!r})") from None
            if not (math.isfinite(value) and value >= 0):
                raise DataError(f"row {line}: error value must be finite and >= 0")
            est = MseEstimate(value, np.array([value]), row["rct_id"], row["spec"])
        out.setdefault(row["spec"], []).append(est)
    if not out:
        raise DataError("error csv has no rows")
    return out
