"""RCT data model, CSV ingestion, synthetic heavy-tailed corpora and tail diagnostics."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import IO, Iterable, Iterator, Sequence

import numpy as np

from .errors import DataError, DegenerateTailError
from .seeding import GENERATOR_STREAM, derived_rng

REQUIRED_COLUMNS = ("rct_id", "x", "d", "y", "t")
OPTIONAL_COLUMNS = ("m", "profit_per_unit", "time_index")


@dataclass(frozen=True)
class UnitRecord:
    """One experimental unit."""

    x: float
    d: float
    y: float
    t: int


@dataclass(frozen=True, eq=False)
class Units:
    """Column-oriented unit records of one RCT (or a fold of one).

    Columns are float64 arrays except ``t`` which holds 0/1 as int8.
    """

    x: np.ndarray
    d: np.ndarray
    y: np.ndarray
    t: np.ndarray

    @classmethod
    def from_arrays(cls, x, d, y, t) -> Units:
        x = np.ascontiguousarray(x, dtype=np.float64)
        d = np.ascontiguousarray(d, dtype=np.float64)
        y = np.ascontiguousarray(y, dtype=np.float64)
        t = np.ascontiguousarray(t, dtype=np.int8)
        if not (len(x) == len(d) == len(y) == len(t)):
            raise DataError("unit columns have different lengths")
        return cls(x, d, y, t)

    @classmethod
    def from_records(cls, records: Iterable[UnitRecord]) -> Units:
        records = list(records)
        return cls.from_arrays(
            [r.x for r in records], [r.d for r in records], [r.y for r in records], [r.t for r in records]
        )

    def records(self) -> list[UnitRecord]:
        return [
            UnitRecord(float(x), float(d), float(y), int(t))
            for x, d, y, t in zip(self.x, self.d, self.y, self.t)
        ]

    def take(self, idx) -> Units:
        return Units(self.x[idx], self.d[idx], self.y[idx], self.t[idx])

    def __len__(self) -> int:
        return len(self.y)

    @property
    def treated(self) -> np.ndarray:
        return np.flatnonzero(self.t == 1)

    @property
    def control(self) -> np.ndarray:
        return np.flatnonzero(self.t == 0)

    def equals(self, other: Units) -> bool:
        return all(
            np.array_equal(getattr(self, c), getattr(other, c)) for c in ("x", "d", "y", "t")
        )


@dataclass(frozen=True, eq=False)
class Rct:
    """An identified trial with its units and target-population size ``m``."""

    id: str
    units: Units
    m: int
    profit_per_unit: float | None = None
    true_delta: float | None = None
    time_index: int | None = None

    def __post_init__(self) -> None:
        k = int(np.count_nonzero(self.units.t == 1))
        c = len(self.units) - k
        if k < 2 or c < 2:
            raise DataError(
                f"rct {self.id!r} needs at least 2 treated and 2 control units (has {k} treated, {c} control)"
            )
        if self.m < len(self.units):
            raise DataError(f"rct {self.id!r}: m={self.m} is smaller than its {len(self.units)} units")

    @property
    def n_treated(self) -> int:
        """K, the number of treated units."""
        return int(np.count_nonzero(self.units.t == 1))

    @property
    def n_control(self) -> int:
        return len(self.units) - self.n_treated


@dataclass(frozen=True)
class GeneratorConfig:
    """Parameters of the synthetic heavy-tailed RCT generator.

    ``noise_scale`` multiplies all unit-level heterogeneity (the Pareto baseline and
    the x, d views of it); the treatment effect is added on top, unscaled.
    """

    n_rcts: int = 300
    units_per_rct: tuple[int, int] = (400, 4000)
    tail_exponent_eta: float = 2.3
    delta_prior_mean: float = 0.4
    delta_prior_sd: float = 0.2
    xy_correlation: float = 0.9
    dy_correlation: float = 0.7
    treated_fraction: float = 0.5
    noise_scale: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "units_per_rct", tuple(int(v) for v in self.units_per_rct))
        self.validate()

    def validate(self) -> None:
        def bad(name: str, why: str) -> DataError:
            return DataError(f"invalid generator config: {name} {why}")

        if self.n_rcts < 1:
            raise bad("n_rcts", "must be a positive integer")
        lo, hi = self.units_per_rct
        if lo < 4 or hi < lo:
            raise bad("units_per_rct", "must be a range (lo, hi) with 4 <= lo <= hi")
        if not self.tail_exponent_eta > 1 or not math.isfinite(self.tail_exponent_eta):
            raise bad("tail_exponent_eta", "must be a finite real > 1")
        if not math.isfinite(self.delta_prior_mean):
            raise bad("delta_prior_mean", "must be finite")
        if not (self.delta_prior_sd >= 0 and math.isfinite(self.delta_prior_sd)):
            raise bad("delta_prior_sd", "must be finite and >= 0")
        for name in ("xy_correlation", "dy_correlation"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise bad(name, "must lie in [0, 1)")
        if not 0.0 < self.treated_fraction < 1.0:
            raise bad("treated_fraction", "must lie in (0, 1)")
        if not (self.noise_scale > 0 and math.isfinite(self.noise_scale)):
            raise bad("noise_scale", "must be finite and > 0")

    @classmethod
    def from_dict(cls, data: dict) -> GeneratorConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise DataError(f"unknown generator config field(s): {', '.join(sorted(unknown))}")
        return cls(**data)

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.__dataclass_fields__} | {
            "units_per_rct": list(self.units_per_rct)
        }


@dataclass(frozen=True)
class Synthetic:
    config: GeneratorConfig
    seed: int


@dataclass(frozen=True, eq=False)
class Corpus:
    rcts: tuple[Rct, ...]
    provenance: Synthetic | str = "ingested"

    def __post_init__(self) -> None:
        object.__setattr__(self, "rcts", tuple(self.rcts))
        if not self.rcts:
            raise DataError("corpus is empty")
        ids = [r.id for r in self.rcts]
        if len(set(ids)) != len(ids):
            raise DataError("rct ids are not unique")

    def __len__(self) -> int:
        return len(self.rcts)

    def __iter__(self) -> Iterator[Rct]:
        return iter(self.rcts)

    def __getitem__(self, i: int) -> Rct:
        return self.rcts[i]

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.rcts]

    @property
    def is_synthetic(self) -> bool:
        return isinstance(self.provenance, Synthetic)

    def truth(self) -> dict[str, float]:
        return {r.id: r.true_delta for r in self.rcts if r.true_delta is not None}

    def ordered_by_time(self) -> Corpus:
        if any(r.time_index is None for r in self.rcts):
            raise DataError("every rct needs a time_index to be ordered in time")
        order = sorted(self.rcts, key=lambda r: r.time_index)
        stamps = [r.time_index for r in order]
        if len(set(stamps)) != len(stamps):
            raise DataError("time_index values must be distinct (total order)")
        return Corpus(order, self.provenance)


# ---------------------------------------------------------------- ingestion


def _parse_float(raw: str, column: str, line: int) -> float:
    try:
        value = float(raw)
    except (TypeError, ValueError):
        raise DataError(f"row {line}: column {column!r} is not numeric ({raw!r})") from None
    if not math.isfinite(value):
        raise DataError(f"row {line}: column {column!r} is not finite ({raw!r})")
    return value


def _parse_int(raw: str, column: str, line: int) -> int:
    value = _parse_float(raw, column, line)
    if value != int(value):
        raise DataError(f"row {line}: column {column!r} must be an integer ({raw!r})")
    return int(value)


def ingest_csv(source: IO[bytes] | IO[str] | str | bytes) -> Corpus:
    """Read a corpus from CSV with header ``rct_id,x,d,y,t`` (+ optional ``m,profit_per_unit,time_index``).

    Row numbers in error messages are file line numbers (the header is line 1).
    """
    if isinstance(source, bytes):
        text: IO[str] = io.StringIO(source.decode("utf-8"))
    elif isinstance(source, str):
        text = io.StringIO(source)
    elif isinstance(source, io.TextIOBase):
        text = source
    else:
        text = io.TextIOWrapper(source, encoding="utf-8", newline="")

    reader = csv.DictReader(text)
    header = reader.fieldnames or []
    missing = [c for c in REQUIRED_COLUMNS if c not in header]
    if missing:
        raise DataError(f"csv header lacks required column(s): {', '.join(missing)}")
    optional = [c for c in OPTIONAL_COLUMNS if c in header]

    columns: dict[str, dict[str, list]] = {}
    meta: dict[str, dict[str, object]] = {}
    for line, row in enumerate(reader, start=2):
        rid = row["rct_id"]
        if rid is None or rid == "":
            raise DataError(f"row {line}: empty rct_id")
        x = _parse_float(row["x"], "x", line)
        d = _parse_float(row["d"], "d", line)
        y = _parse_float(row["y"], "y", line)
        t = _parse_float(row["t"], "t", line)
        if t not in (0.0, 1.0):
            raise DataError(f"row {line}: t must be 0 or 1 (got {row['t']!r})")
        if d < 0:
            raise DataError(f"row {line}: d must be >= 0 (got {row['d']!r})")
        cols = columns.setdefault(rid, {"x": [], "d": [], "y": [], "t": []})
        cols["x"].append(x)
        cols["d"].append(d)
        cols["y"].append(y)
        cols["t"].append(int(t))
        info = meta.setdefault(rid, {})
        for name in optional:
            raw = row[name]
            if raw is None or raw == "":
                continue
            value = (
                _parse_float(raw, name, line) if name == "profit_per_unit" else _parse_int(raw, name, line)
            )
            if name in info and info[name] != value:
                raise DataError(f"row {line}: column {name!r} changes within rct {rid!r}")
            info[name] = value

    if not columns:
        raise DataError("csv contains no data rows")

    rcts = []
    for rid, cols in columns.items():
        units = Units.from_arrays(cols["x"], cols["d"], cols["y"], cols["t"])
        info = meta[rid]
        m = int(info.get("m", len(units)))
        if m < 1:
            raise DataError(f"rct {rid!r}: m must be positive")
        rcts.append(
            Rct(
                id=rid,
                units=units,
                m=m,
                profit_per_unit=info.get("profit_per_unit"),
                time_index=info.get("time_index"),
            )
        )
    return Corpus(rcts, "ingested")


def write_csv(corpus: Corpus, sink: IO[str]) -> None:
    """Write ``corpus`` in the ingestion schema; floats use ``repr`` so values round-trip exactly."""
    extra = ["m"]
    if any(r.profit_per_unit is not None for r in corpus):
        extra.append("profit_per_unit")
    if any(r.time_index is not None for r in corpus):
        extra.append("time_index")
    writer = csv.writer(sink, lineterminator="\n")
    writer.writerow([*REQUIRED_COLUMNS, *extra])
    for rct in corpus:
        tail = [rct.m]
        if "profit_per_unit" in extra:
            tail.append("" if rct.profit_per_unit is None else repr(float(rct.profit_per_unit)))
        if "time_index" in extra:
            tail.append("" if rct.time_index is None else rct.time_index)
        u = rct.units
        for x, d, y, t in zip(u.x.tolist(), u.d.tolist(), u.y.tolist(), u.t.tolist()):
            writer.writerow([rct.id, repr(x), repr(d), repr(y), t, *tail])


def write_truth(corpus: Corpus, sink: IO[str]) -> None:
    """JSON sidecar ``{rct_id: true_delta}``."""
    json.dump(corpus.truth(), sink, indent=1)
    sink.write("\n")


def attach_truth(corpus: Corpus, truth: dict[str, float]) -> Corpus:
    """Return ``corpus`` with ground-truth effects from a JSON sidecar mapping."""
    missing = set(corpus.ids) - set(truth)
    if missing:
        raise DataError(f"truth sidecar lacks rct(s): {', '.join(sorted(missing))}")
    rcts = [
        Rct(r.id, r.units, r.m, r.profit_per_unit, float(truth[r.id]), r.time_index) for r in corpus
    ]
    return Corpus(rcts, corpus.provenance)


# ---------------------------------------------------------------- simulation


def _lognormal_log_sd(correlation: float, alpha: float) -> float:
    """Log-sd of a mean-one lognormal view v = L * u with corr(log v, log L) == correlation.

    log L ~ Exponential(alpha) has variance 1 / alpha**2.
    """
    return math.sqrt(1.0 / correlation**2 - 1.0) / alpha


def _noisy_view(rng: np.random.Generator, latent: np.ndarray, correlation: float, alpha: float) -> np.ndarray:
    n = len(latent)
    if correlation == 0.0:
        return (1.0 - rng.random(n)) ** (-1.0 / alpha)
    sigma = _lognormal_log_sd(correlation, alpha)
    return latent * np.exp(sigma * rng.standard_normal(n) - 0.5 * sigma * sigma)


def simulate_rct(cfg: GeneratorConfig, seed: int, index: int) -> Rct:
    """Draw RCT number ``index`` of the corpus defined by ``(cfg, seed)``.

    Baseline outcome is ``noise_scale * L`` with ``L ~ Pareto(scale=1, shape=eta - 1)``;
    pretreatment ``x`` and auxiliary ``d`` are lognormal views of ``L`` with the
    configured log-scale correlations. Treated units get ``+ true_delta``.
    """
    rng = derived_rng(seed, GENERATOR_STREAM, index)
    alpha = cfg.tail_exponent_eta - 1.0
    lo, hi = cfg.units_per_rct
    n = int(rng.integers(lo, hi, endpoint=True))
    true_delta = float(rng.normal(cfg.delta_prior_mean, cfg.delta_prior_sd)) if cfg.delta_prior_sd > 0 else float(
        cfg.delta_prior_mean
    )

    n_treat = min(max(round(cfg.treated_fraction * n), 2), n - 2)
    t = np.zeros(n, dtype=np.int8)
    t[rng.permutation(n)[:n_treat]] = 1

    latent = (1.0 - rng.random(n)) ** (-1.0 / alpha)
    x = cfg.noise_scale * _noisy_view(rng, latent, cfg.xy_correlation, alpha)
    d = cfg.noise_scale * _noisy_view(rng, latent, cfg.dy_correlation, alpha)
    y = cfg.noise_scale * latent + true_delta * t

    return Rct(
        id=f"rct{index:05d}",
        units=Units.from_arrays(x, d, y, t),
        m=n,
        true_delta=true_delta,
        time_index=index,
    )


def simulate_corpus(cfg: GeneratorConfig, seed: int, threads: int = 1) -> Corpus:
    """Synthetic corpus; each RCT has its own stream keyed on ``(seed, index)``."""
    from .parallel import parallel_map

    cfg.validate()
    rcts = parallel_map(_simulate_one, [(cfg, seed, i) for i in range(cfg.n_rcts)], threads)
    return Corpus(rcts, Synthetic(cfg, seed))


def _simulate_one(args: tuple[GeneratorConfig, int, int]) -> Rct:
    return simulate_rct(*args)


# ---------------------------------------------------------------- tail diagnostics


@dataclass(frozen=True)
class TailReport:
    cutoff_fraction: float | None
    eta_hat: float
    n_tail: int
    alpha_hat: float = field(repr=False)


def hill_from_k(samples: Sequence[float] | np.ndarray, k: int) -> TailReport:
    """Hill estimate from the top ``k`` order statistics, relative to the (k+1)-th."""
    y = np.sort(np.asarray(samples, dtype=np.float64))[::-1]
    if k < 2:
        raise DataError(f"hill estimator needs k >= 2 (got k={k})")
    if len(y) < k + 1:
        raise DataError(f"hill estimator needs at least k+1={k + 1} samples (got {len(y)})")
    top = y[: k + 1]
    if top[-1] <= 0:
        raise DataError("hill estimator needs the top k+1 samples to be positive")
    mean_log_ratio = float(np.mean(np.log(top[:k] / top[k])))
    if mean_log_ratio == 0.0:
        raise DegenerateTailError("top order statistics are all equal; tail index is infinite")
    alpha_hat = 1.0 / mean_log_ratio
    return TailReport(None, alpha_hat + 1.0, k, alpha_hat)


def hill_estimate(samples: Sequence[float] | np.ndarray, cutoff_fraction: float = 0.05) -> TailReport:
    """Density tail exponent eta of p(y) ~ y**-eta from the top ``cutoff_fraction`` of positive samples."""
    if not 0.0 < cutoff_fraction <= 0.5:
        raise DataError("cutoff_fraction must lie in (0, 0.5]")
    y = np.asarray(samples, dtype=np.float64)
    y = y[y > 0]
    if len(y) < 10:
        raise DataError(f"hill estimator needs at least 10 positive samples (got {len(y)})")
    k = math.floor(cutoff_fraction * len(y))
    report = hill_from_k(y, k)
    return TailReport(cutoff_fraction, report.eta_hat, report.n_tail, report.alpha_hat)


def gini_curve(samples: Sequence[float] | np.ndarray, n_points: int = 101) -> list[tuple[float, float]]:
    """Cumulative value share of the top ``q`` population share, on a uniform grid of ``n_points``."""
    y = np.asarray(samples, dtype=np.float64)
    if n_points < 2:
        raise DataError("n_points must be at least 2")
    if np.any(y < 0) or not np.all(np.isfinite(y)):
        raise DataError("gini curve needs finite nonnegative samples")
    n = len(y)
    csum = np.concatenate([[0.0], np.cumsum(np.sort(y)[::-1])])
    total = float(csum[-1])
    if not total > 0:
        raise DataError("gini curve needs at least one positive sample")
    curve = []
    for j in range(n_points):
        count = -(-(j * n) // (n_points - 1))  # ceil(q * n) in exact integer arithmetic
        curve.append((j / (n_points - 1), float(csum[count] / total)))
    return curve
