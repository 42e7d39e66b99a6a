"""Roll-out policies and their held-out cumulative impact.

For replicate ``b`` a policy decides from fold-1 statistics and is credited with
``sum_i m_i * DM_i(fold 2) * decision_i``; averaging over replicates gives an
unbiased estimate of the policy's true cumulative impact ``sum_i m_i * delta_i * decision_i``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import IO, Iterable, Sequence

import numpy as np

from .corpus import Corpus
from .crossval import FoldStats, SplitPlan, corpus_fold_stats
from .errors import DataError, NumericalError, SingularDesignError
from .estimators import Estimate, EstimatorSpec

Z_95 = 1.959963984540054
DEFAULT_CRITICAL_T = 1.96
DEFAULT_WARMUP = 50
DEFAULT_FEATURE_SPECS = ("gen_dd",)


def _parse_threshold(raw: str) -> float:
    text = raw.strip().lower()
    if text in ("inf", "+inf", "infinity", "+infinity"):
        return math.inf
    if text in ("-inf", "-infinity"):
        return -math.inf
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"bad critical t value {raw!r}") from None
    if math.isnan(value):
        raise DataError("critical t must not be NaN")
    return value


def _fmt_threshold(value: float) -> str:
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return repr(float(value))


@dataclass(frozen=True)
class PolicySpec:
    """``tstat:<estimator>:<critical t>``, ``regression:<specs|default>[:norefit]`` or ``oracle``."""

    kind: str
    estimator: EstimatorSpec | None = None
    critical_t: float = DEFAULT_CRITICAL_T
    feature_specs: tuple[EstimatorSpec, ...] = ()
    refit: bool = True

    def __post_init__(self) -> None:
        if self.kind not in ("tstat", "regression", "oracle"):
            raise DataError(f"unknown policy kind {self.kind!r}")
        if self.kind == "tstat" and self.estimator is None:
            raise DataError("a t-threshold policy needs an estimator")
        if self.kind == "regression" and not self.feature_specs:
            raise DataError("a regression policy needs at least one feature estimator")

    @classmethod
    def t_threshold(cls, estimator: str | EstimatorSpec, critical_t: float) -> PolicySpec:
        if isinstance(estimator, str):
            estimator = EstimatorSpec.parse(estimator)
        return cls("tstat", estimator, float(critical_t))

    @classmethod
    def regression(cls, feature_specs: Iterable[str | EstimatorSpec] = DEFAULT_FEATURE_SPECS, refit: bool = True) -> PolicySpec:
        specs = tuple(s if isinstance(s, EstimatorSpec) else EstimatorSpec.parse(s) for s in feature_specs)
        return cls("regression", feature_specs=specs, refit=refit)

    @classmethod
    def parse(cls, text: str) -> PolicySpec:
        parts = text.strip().split(":")
        head = parts[0]
        if head == "oracle" and len(parts) == 1:
            return cls("oracle")
        if head == "tstat" and len(parts) == 3:
            return cls.t_threshold(parts[1], _parse_threshold(parts[2]))
        if head == "regression" and len(parts) in (2, 3):
            refit = True
            if len(parts) == 3:
                if parts[2] not in ("refit", "norefit"):
                    raise DataError(f"bad regression option {parts[2]!r}")
                refit = parts[2] == "refit"
            names = DEFAULT_FEATURE_SPECS if parts[1] == "default" else [p for p in parts[1].split(",") if p]
            return cls.regression(names, refit)
        raise DataError(f"cannot parse policy spec {text!r}")

    @property
    def name(self) -> str:
        if self.kind == "oracle":
            return "oracle"
        if self.kind == "tstat":
            return f"tstat:{self.estimator.name}:{_fmt_threshold(self.critical_t)}"
        names = ",".join(s.name for s in self.feature_specs)
        return f"regression:{names}" + ("" if self.refit else ":norefit")

    @property
    def estimator_specs(self) -> tuple[EstimatorSpec, ...]:
        if self.kind == "tstat":
            return (self.estimator,)
        return self.feature_specs

    def __str__(self) -> str:
        return self.name


BASELINE_POLICY = PolicySpec.t_threshold("gen_dd", DEFAULT_CRITICAL_T)


def decide_t_threshold(est: Estimate | None, critical_t: float) -> int:
    """1 iff the t-statistic is at least ``critical_t``; +inf never and -inf always rolls out."""
    if critical_t == math.inf:
        return 0
    if critical_t == -math.inf:
        return 1
    t = None if est is None else est.t_stat
    if t is None:
        raise DataError("estimate has no t-statistic to compare against a finite critical t")
    return int(t >= critical_t)


@dataclass(frozen=True, eq=False)
class ImpactEstimate:
    f_hat: float
    per_replicate: np.ndarray
    ci_low: float
    ci_high: float
    excluded: tuple[str, ...] = ()

    @property
    def n_replicates(self) -> int:
        return len(self.per_replicate)

    @classmethod
    def from_replicates(cls, values: np.ndarray, ci: str = "normal", excluded: Sequence[str] = ()) -> ImpactEstimate:
        values = np.asarray(values, dtype=np.float64)
        mean = float(np.mean(values))
        if ci == "normal":
            half = Z_95 * float(np.std(values, ddof=1)) / math.sqrt(len(values)) if len(values) > 1 else 0.0
            low, high = mean - half, mean + half
        elif ci == "percentile":
            low, high = (float(v) for v in np.percentile(values, [2.5, 97.5]))
            low, high = min(low, mean), max(high, mean)
        else:
            raise DataError(f"unknown interval method {ci!r}")
        return cls(mean, values, low, high, tuple(excluded))


# ---------------------------------------------------------------- shared fold statistics


@dataclass(frozen=True, eq=False)
class PolicyData:
    """Fold statistics of a corpus restricted to RCTs usable by every requested estimator.

    ``targets[i, b]`` is ``m_i * DM_i(fold 2 of replicate b)``.
    """

    stats: tuple[FoldStats, ...]
    targets: np.ndarray
    excluded: dict[str, str]
    profit: tuple[float | None, ...]

    @property
    def rct_ids(self) -> list[str]:
        return [fs.rct_id for fs in self.stats]

    def t_stats(self, spec: str) -> np.ndarray:
        return np.array([fs.t_stat(spec) for fs in self.stats])


def collect_policy_data(
    corpus: Corpus,
    plan: SplitPlan,
    specs: Iterable[EstimatorSpec],
    threads: int = 1,
    stats: Sequence[FoldStats] | None = None,
    need_t: Iterable[str] = (),
) -> PolicyData:
    """Evaluate (or reuse) fold statistics and drop RCTs any requested estimator fails on.

    RCTs lacking a t-statistic for a spec in ``need_t`` are dropped too, so that every
    compared policy sees the same support.
    """
    specs = tuple(dict.fromkeys(specs))
    if stats is None:
        stats = corpus_fold_stats(corpus, specs, plan, threads)
    profit = {r.id: r.profit_per_unit for r in corpus}
    need_t = set(need_t)
    kept, excluded = [], {}
    for fs in stats:
        bad = [s.name for s in specs if s.name in fs.failures]
        if bad:
            excluded[fs.rct_id] = fs.failures[bad[0]]
            continue
        missing_t = [s for s in need_t if np.any(np.isnan(fs.std_err[s]))]
        if missing_t:
            excluded[fs.rct_id] = f"no t-statistic for {missing_t[0]}"
            continue
        kept.append(fs)
    if not kept:
        raise DataError("no rct could be evaluated by every requested estimator")
    targets = np.array([fs.m * fs.heldout_dm for fs in kept])
    return PolicyData(tuple(kept), targets, excluded, tuple(profit[fs.rct_id] for fs in kept))


def _threshold_decisions(data: PolicyData, spec: str, critical_t: float) -> np.ndarray:
    shape = data.targets.shape
    if critical_t == math.inf:
        return np.zeros(shape, dtype=bool)
    if critical_t == -math.inf:
        return np.ones(shape, dtype=bool)
    return data.t_stats(spec) >= critical_t


def _needs_t(policy: PolicySpec) -> list[str]:
    if policy.kind == "tstat" and math.isfinite(policy.critical_t):
        return [policy.estimator.name]
    return []


def policy_values(data: PolicyData, policy: PolicySpec) -> np.ndarray:
    """Per-replicate realized impact of ``policy`` (regression policies are fit in-sample per replicate)."""
    if policy.kind == "oracle":
        return np.maximum(data.targets, 0.0).sum(axis=0)
    if policy.kind == "tstat":
        decisions = _threshold_decisions(data, policy.estimator.name, policy.critical_t)
        return np.where(decisions, data.targets, 0.0).sum(axis=0)
    out = np.empty(data.targets.shape[1])
    for b in range(len(out)):
        features = policy_features(data, policy.feature_specs, b)
        model = fit_linear_policy(features, data.targets[:, b])
        out[b] = float(np.dot(model.decide(features), data.targets[:, b]))
    return out


def f_hat(
    corpus: Corpus,
    policy: PolicySpec,
    plan: SplitPlan,
    threads: int = 1,
    ci: str = "normal",
    stats: Sequence[FoldStats] | None = None,
) -> ImpactEstimate:
    data = collect_policy_data(corpus, plan, policy.estimator_specs, threads, stats, _needs_t(policy))
    return ImpactEstimate.from_replicates(policy_values(data, policy), ci, tuple(data.excluded))


def oracle_policy(corpus: Corpus, plan: SplitPlan, ci: str = "normal", stats: Sequence[FoldStats] | None = None) -> ImpactEstimate:
    """Hindsight policy rolling out exactly the RCTs whose fold-2 DM estimate is positive."""
    return f_hat(corpus, PolicySpec("oracle"), plan, ci=ci, stats=stats)


@dataclass(frozen=True, eq=False)
class SweepPoint:
    critical_t: float
    impact: ImpactEstimate
    normalized: float | None
    n_rollouts: np.ndarray = field(repr=False)


def sweep_critical_t(
    corpus: Corpus,
    spec: EstimatorSpec | str,
    grid: Sequence[float],
    plan: SplitPlan,
    baseline: PolicySpec | None = BASELINE_POLICY,
    threads: int = 1,
    ci: str = "normal",
    stats: Sequence[FoldStats] | None = None,
) -> list[SweepPoint]:
    """Impact of ``tstat:spec:c`` for every ``c`` in ``grid`` on one shared plan.

    ``normalized`` is the ratio to the baseline policy's f_hat (None without a baseline
    or when the baseline's f_hat is 0).
    """
    if isinstance(spec, str):
        spec = EstimatorSpec.parse(spec)
    if not grid:
        raise DataError("critical t grid is empty")
    specs = [spec] + (list(baseline.estimator_specs) if baseline is not None else [])
    need = [spec.name] + (_needs_t(baseline) if baseline is not None else [])
    data = collect_policy_data(corpus, plan, specs, threads, stats, need)
    excluded = tuple(data.excluded)
    base = None
    if baseline is not None:
        base = float(np.mean(policy_values(data, baseline)))
    points = []
    for c in grid:
        decisions = _threshold_decisions(data, spec.name, float(c))
        values = np.where(decisions, data.targets, 0.0).sum(axis=0)
        impact = ImpactEstimate.from_replicates(values, ci, excluded)
        norm = impact.f_hat / base if base not in (None, 0.0) else None
        points.append(SweepPoint(float(c), impact, norm, decisions.sum(axis=0)))
    return points


# ---------------------------------------------------------------- regression policies


@dataclass(frozen=True)
class PolicyFeatures:
    """Fold-1 statistics of one RCT used as regression-policy covariates."""

    rct_id: str
    estimates: dict[str, Estimate]
    m: int
    profit_per_unit: float | None = None


def policy_features(data: PolicyData, specs: Sequence[EstimatorSpec], b: int) -> list[PolicyFeatures]:
    return [
        PolicyFeatures(fs.rct_id, {s.name: fs.estimate(s.name, b) for s in specs}, fs.m, profit)
        for fs, profit in zip(data.stats, data.profit)
    ]


def feature_matrix(features: Sequence[PolicyFeatures]) -> tuple[list[str], np.ndarray]:
    """Columns ``<spec>.delta_hat|std_err|t_stat`` per estimator, then ``m`` and ``profit_per_unit``.

    A column is included only when every row has a value for it.
    """
    if not features:
        raise DataError("no feature rows")
    specs = list(features[0].estimates)
    columns: list[tuple[str, list]] = []
    for s in specs:
        columns.append((f"{s}.delta_hat", [f.estimates[s].delta_hat for f in features]))
        columns.append((f"{s}.std_err", [f.estimates[s].std_err for f in features]))
        columns.append((f"{s}.t_stat", [f.estimates[s].t_stat for f in features]))
    columns.append(("m", [float(f.m) for f in features]))
    columns.append(("profit_per_unit", [f.profit_per_unit for f in features]))
    kept = [(name, vals) for name, vals in columns if all(v is not None for v in vals)]
    names = [name for name, _ in kept]
    matrix = np.array([vals for _, vals in kept], dtype=np.float64).T.reshape(len(features), len(kept))
    if not np.all(np.isfinite(matrix)):
        raise DataError("policy features must be finite")
    return names, matrix


@dataclass(frozen=True, eq=False)
class LinearPolicy:
    """Linear value model on z-scored features; rolls out when the predicted impact is positive."""

    names: tuple[str, ...]
    means: np.ndarray
    scales: np.ndarray
    intercept: float
    coef: np.ndarray

    def predict(self, features: Sequence[PolicyFeatures] | np.ndarray) -> np.ndarray:
        if isinstance(features, np.ndarray):
            matrix = features
        else:
            names, full = feature_matrix(features)
            lookup = {n: j for j, n in enumerate(names)}
            missing = [n for n in self.names if n not in lookup]
            if missing:
                raise DataError(f"feature rows lack column(s): {', '.join(missing)}")
            matrix = full[:, [lookup[n] for n in self.names]]
        return self.intercept + ((matrix - self.means) / self.scales) @ self.coef

    def decide(self, features: Sequence[PolicyFeatures] | np.ndarray) -> np.ndarray:
        return (self.predict(features) > 0).astype(np.int64)


def fit_linear_policy(
    features: Sequence[PolicyFeatures], targets: Sequence[float] | np.ndarray, columns: Sequence[str] | None = None
) -> LinearPolicy:
    """Least squares of realized impact on standardized features plus intercept; constant columns are dropped.

    ``columns`` restricts the fit to the named feature columns (default: all available).
    """
    names, matrix = feature_matrix(features)
    if columns is not None:
        missing = [c for c in columns if c not in names]
        if missing:
            raise DataError(f"feature rows lack column(s): {', '.join(missing)}")
        idx = [names.index(c) for c in columns]
        names, matrix = list(columns), matrix[:, idx]
    y = np.asarray(targets, dtype=np.float64)
    if len(y) != len(matrix):
        raise DataError("targets and feature rows differ in length")
    means = matrix.mean(axis=0)
    scales = matrix.std(axis=0)
    keep = scales > 0
    names = [n for n, k in zip(names, keep) if k]
    means, scales = means[keep], scales[keep]
    z = (matrix[:, keep] - means) / scales
    if len(y) < z.shape[1] + 1:
        raise DataError(f"need at least {z.shape[1] + 1} training rows for {z.shape[1]} features (got {len(y)})")
    design = np.column_stack([np.ones(len(y)), z])
    coef, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
    if rank < design.shape[1]:
        raise SingularDesignError("policy feature design is rank deficient")
    return LinearPolicy(tuple(names), means, scales, float(coef[0]), coef[1:])


@dataclass(frozen=True)
class OnlineStep:
    step: int
    rct_id: str
    source: str  # warmup | model | fallback
    decision: int
    predicted: float | None
    value: float
    cumulative: float
    baseline_decision: int
    baseline_cumulative: float
    oracle_cumulative: float


@dataclass(frozen=True, eq=False)
class OnlineRunResult:
    policy: str
    baseline: str
    replicate: int
    steps: tuple[OnlineStep, ...]
    excluded: dict[str, str]

    @property
    def total(self) -> float:
        return self.steps[-1].cumulative

    @property
    def baseline_total(self) -> float:
        return self.steps[-1].baseline_cumulative

    @property
    def oracle_total(self) -> float:
        return self.steps[-1].oracle_cumulative


def online_policy_run(
    corpus: Corpus,
    plan: SplitPlan,
    policy: PolicySpec | None = None,
    warmup: int = DEFAULT_WARMUP,
    replicate: int = 0,
    baseline: PolicySpec = BASELINE_POLICY,
    threads: int = 1,
    stats: Sequence[FoldStats] | None = None,
) -> OnlineRunResult:
    """Decide RCTs in time order, fitting the regression policy on all earlier RCTs only.

    The first ``warmup`` RCTs are decided by ``baseline``. A fit that fails (e.g. rank
    deficiency) falls back to the baseline decision for that step.
    """
    policy = policy or PolicySpec.regression()
    if policy.kind != "regression":
        raise DataError("online runs need a regression policy")
    if baseline.kind != "tstat":
        raise DataError("the online baseline must be a t-threshold policy")
    if warmup < 1:
        raise DataError("warmup must be at least 1")
    ordered = corpus.ordered_by_time()
    specs = list(policy.feature_specs) + [baseline.estimator]
    if stats is not None:
        by_id = {fs.rct_id: fs for fs in stats}
        stats = [by_id[r.id] for r in ordered]
    data = collect_policy_data(ordered, plan, specs, threads, stats, _needs_t(baseline))
    targets = data.targets[:, replicate]
    features = policy_features(data, policy.feature_specs, replicate)
    base_dec = _threshold_decisions(data, baseline.estimator.name, baseline.critical_t)[:, replicate]

    steps = []
    cum = base_cum = oracle_cum = 0.0
    model: LinearPolicy | None = None
    for n, fs in enumerate(data.stats):
        predicted = None
        if n < warmup:
            source, decision = "warmup", int(base_dec[n])
        else:
            if policy.refit or model is None:
                try:
                    model = fit_linear_policy(features[:n], targets[:n])
                except (DataError, NumericalError):
                    model = None
            if model is None:
                source, decision = "fallback", int(base_dec[n])
            else:
                predicted = float(model.predict(features[n : n + 1])[0])
                source, decision = "model", int(predicted > 0)
        value = decision * float(targets[n])
        cum += value
        base_cum += int(base_dec[n]) * float(targets[n])
        oracle_cum += max(float(targets[n]), 0.0)
        steps.append(
            OnlineStep(n, fs.rct_id, source, decision, predicted, value, cum, int(base_dec[n]), base_cum, oracle_cum)
        )
    return OnlineRunResult(policy.name, baseline.name, replicate, tuple(steps), data.excluded)


# ---------------------------------------------------------------- serialization


def _r(value: float | None) -> str:
    if value is None:
        return ""
    if math.isinf(value):
        return _fmt_threshold(value)
    return repr(float(value))


def write_sweep(rows: Sequence[tuple[str, SweepPoint]], sink: IO[str]) -> None:
    writer = csv.writer(sink, lineterminator="\n")
    writer.writerow(["spec", "critical_t", "f_hat", "ci_low", "ci_high", "normalized"])
    for spec, pt in rows:
        imp = pt.impact
        writer.writerow([spec, _r(pt.critical_t), _r(imp.f_hat), _r(imp.ci_low), _r(imp.ci_high), _r(pt.normalized)])


def write_impacts(rows: Sequence[tuple[str, ImpactEstimate]], sink: IO[str]) -> None:
    writer = csv.writer(sink, lineterminator="\n")
    writer.writerow(["policy", "f_hat", "ci_low", "ci_high", "n_replicates"])
    for name, imp in rows:
        writer.writerow([name, _r(imp.f_hat), _r(imp.ci_low), _r(imp.ci_high), imp.n_replicates])


def write_replicates(rows: Sequence[tuple[str, np.ndarray]], sink: IO[str]) -> None:
    """Long format ``policy,replicate,value`` for paired per-replicate comparisons."""
    writer = csv.writer(sink, lineterminator="\n")
    writer.writerow(["policy", "replicate", "value"])
    for name, values in rows:
        for b, v in enumerate(np.asarray(values).tolist()):
            writer.writerow([name, b, _r(v)])


def write_online(result: OnlineRunResult, sink: IO[str]) -> None:
    writer = csv.writer(sink, lineterminator="\n")
    writer.writerow(
        ["step", "rct_id", "source", "decision", "predicted", "value", "cumulative",
         "baseline_decision", "baseline_cumulative", "oracle_cumulative"]
    )
    for s in result.steps:
        writer.writerow(
            [s.step, s.rct_id, s.source, s.decision, _r(s.predicted), _r(s.value), _r(s.cumulative),
             s.baseline_decision, _r(s.baseline_cumulative), _r(s.oracle_cumulative)]
        )
