"""ATE estimators: difference of means, difference of median-of-means, and (weighted)
generalized difference-in-differences, each optionally Winsorized on the training fold."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import Units
from .errors import DataError, SingularDesignError

FAMILIES = ("dm", "mom", "gen_dd", "gen_dd_w")

_SPEC_RE = re.compile(
    r"^(?P<base>dm|gen_dd_w(?P<gamma>[0-9.eE+-]+)|gen_dd|mom(?P<blocks>[0-9]+))"
    r"(?:_wins(?P<level>[0-9.eE+-]+))?$"
)


def _short_float(value: float) -> str:
    text = repr(float(value))
    return text[:-2] if text.endswith(".0") else text


@dataclass(frozen=True)
class EstimatorSpec:
    """A named estimator configuration, e.g. ``gen_dd_w1_wins.001``."""

    family: str
    gamma: float | None = None
    total_blocks: int | None = None
    winsorize_level: float | None = None

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise DataError(f"unknown estimator family {self.family!r}")
        if self.family == "gen_dd_w":
            if self.gamma is None or not math.isfinite(self.gamma) or self.gamma < 0:
                raise DataError("gen_dd_w needs a finite gamma >= 0")
        elif self.gamma is not None:
            raise DataError(f"{self.family} takes no gamma")
        if self.family == "mom":
            if self.total_blocks is None or self.total_blocks < 2:
                raise DataError("mom needs total_blocks >= 2")
        elif self.total_blocks is not None:
            raise DataError(f"{self.family} takes no block count")
        if self.winsorize_level is not None and not 0.0 < self.winsorize_level < 0.5:
            raise DataError("winsorize_level must lie in (0, 0.5)")

    @classmethod
    def parse(cls, name: str) -> EstimatorSpec:
        match = _SPEC_RE.match(name.strip())
        if not match:
            raise DataError(f"cannot parse estimator spec {name!r}")
        level = match["level"]
        try:
            level = float(level) if level is not None else None
            if match["gamma"] is not None:
                return cls("gen_dd_w", gamma=float(match["gamma"]), winsorize_level=level)
        except ValueError:
            raise DataError(f"cannot parse estimator spec {name!r}") from None
        if match["blocks"] is not None:
            return cls("mom", total_blocks=int(match["blocks"]), winsorize_level=level)
        return cls(match["base"], winsorize_level=level)

    @property
    def name(self) -> str:
        if self.family == "gen_dd_w":
            base = f"gen_dd_w{_short_float(self.gamma)}"
        elif self.family == "mom":
            base = f"mom{self.total_blocks}"
        else:
            base = self.family
        if self.winsorize_level is None:
            return base
        level = _short_float(self.winsorize_level)
        if level.startswith("0."):
            level = level[1:]
        return f"{base}_wins{level}"

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class RegressionFit:
    """Coefficients of y ~ alpha + delta * t + beta * x (beta is 0 when x was constant)."""

    alpha: float
    delta: float
    beta: float
    residuals: np.ndarray
    rank: int


@dataclass(frozen=True)
class Estimate:
    delta_hat: float
    std_err: float | None
    n_treat: int
    n_control: int
    fit: RegressionFit | None = None

    @property
    def t_stat(self) -> float | None:
        if self.std_err is None:
            return None
        return self.delta_hat / self.std_err


def _arm(values: Sequence[float] | np.ndarray, label: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or len(arr) == 0:
        raise DataError(f"{label} arm is empty")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{label} arm has non-finite values")
    return arr


# ---------------------------------------------------------------- difference of means


def estimate_dm(treat_y, control_y) -> Estimate:
    """Difference of arm means with a Welch (unpooled) standard error."""
    ty = _arm(treat_y, "treated")
    cy = _arm(control_y, "control")
    delta = float(np.mean(ty) - np.mean(cy))
    std_err = None
    if len(ty) >= 2 and len(cy) >= 2:
        var = np.var(ty, ddof=1) / len(ty) + np.var(cy, ddof=1) / len(cy)
        if var > 0:
            std_err = math.sqrt(var)
    return Estimate(delta, std_err, len(ty), len(cy))


# ---------------------------------------------------------------- median of means


def median_of_means(values, n_blocks: int, rng: np.random.Generator | None = None) -> float:
    """Median of block means over ``min(n_blocks, len(values))`` contiguous near-equal blocks.

    Units are shuffled with ``rng`` first; ``rng=None`` keeps the given order.
    """
    arr = _arm(values, "median-of-means")
    n = len(arr)
    n_blocks = min(int(n_blocks), n)
    if n_blocks < 1:
        raise DataError("n_blocks must be positive")
    if n_blocks == 1:
        return float(np.mean(arr))
    if rng is not None:
        arr = arr[rng.permutation(n)]
    # np.array_split layout: the first n % n_blocks blocks carry one extra unit
    q, r = divmod(n, n_blocks)
    sizes = np.full(n_blocks, q)
    sizes[:r] += 1
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    means = np.add.reduceat(arr, starts) / sizes
    return float(np.median(means))


def mom_blocks_per_arm(total_blocks: int) -> tuple[int, int]:
    """(treated, control) share of ``total_blocks``: ceil and floor of half."""
    return (total_blocks + 1) // 2, total_blocks // 2


def estimate_mom(treat_y, control_y, total_blocks: int, seed: int | np.random.Generator = 0) -> Estimate:
    ty = _arm(treat_y, "treated")
    cy = _arm(control_y, "control")
    if total_blocks < 2:
        raise DataError("total_blocks must be at least 2")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    bt, bc = mom_blocks_per_arm(total_blocks)
    delta = median_of_means(ty, bt, rng) - median_of_means(cy, bc, rng)
    return Estimate(float(delta), None, len(ty), len(cy))


# ---------------------------------------------------------------- least squares


def solve_small(a: list[list[float]], b: list[list[float]], scale: float) -> list[list[float]]:
    """Solve ``a @ z = b`` for a small dense system by Gaussian elimination with partial pivoting.

    Raises SingularDesignError when a pivot falls below ``1e-12 * scale`` in magnitude.
    """
    n = len(a)
    m = [list(a[i]) + list(b[i]) for i in range(n)]
    width = len(m[0])
    tol = 1e-12 * scale
    for col in range(n):
        piv = max(range(col, n), key=lambda r: abs(m[r][col]))
        if abs(m[piv][col]) <= tol:
            raise SingularDesignError("design matrix is rank deficient")
        if piv != col:
            m[col], m[piv] = m[piv], m[col]
        pivot_row = m[col]
        for r in range(col + 1, n):
            f = m[r][col] / pivot_row[col]
            if f != 0.0:
                row = m[r]
                for c in range(col, width):
                    row[c] -= f * pivot_row[c]
    z = [[0.0] * (width - n) for _ in range(n)]
    for r in range(n - 1, -1, -1):
        for k in range(width - n):
            acc = m[r][n + k]
            for c in range(r + 1, n):
                acc -= m[r][c] * z[c][k]
            z[r][k] = acc / m[r][r]
    return z


def _fit_weighted(y: np.ndarray, t: np.ndarray, x: np.ndarray, w: np.ndarray) -> Estimate:
    n = len(y)
    if n < 4:
        raise DataError(f"regression needs at least 4 units (got {n})")
    n_treat = int(np.count_nonzero(t == 1))
    if n_treat == 0 or n_treat == n:
        raise DataError("regression needs both treated and control units")
    tf = t.astype(np.float64)
    sw = float(w.sum())
    use_x = bool(np.ptp(x) > 0)
    # Centering x (weighted) keeps the normal equations well conditioned; delta is unaffected.
    x_mean = float(np.dot(w, x) / sw) if use_x else 0.0
    cols = [np.ones(n), tf]
    if use_x:
        cols.append(x - x_mean)
    wcols = [w * c for c in cols]
    p = len(cols)
    gram = [[float(np.dot(wcols[i], cols[j])) for j in range(p)] for i in range(p)]
    rhs = [float(np.dot(wc, y)) for wc in wcols]
    scale = max(gram[i][i] for i in range(p))
    e_delta = [1.0 if i == 1 else 0.0 for i in range(p)]
    sol = solve_small(gram, [[rhs[i], e_delta[i]] for i in range(p)], scale)
    coef = [row[0] for row in sol]
    inv_dd = sol[1][1]

    fitted = coef[0] + coef[1] * tf
    beta = 0.0
    if use_x:
        beta = coef[2]
        fitted = fitted + beta * cols[2]
    resid = y - fitted
    dof = n - p
    sigma2 = float(np.dot(w, resid * resid)) / dof
    var = sigma2 * inv_dd
    std_err = math.sqrt(var) if var > 0 else None
    fit = RegressionFit(
        alpha=coef[0] - beta * x_mean, delta=coef[1], beta=beta, residuals=resid, rank=p
    )
    return Estimate(float(coef[1]), std_err, n_treat, n - n_treat, fit)


def _columns(units: Units) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    for name in ("x", "d", "y"):
        if not np.all(np.isfinite(getattr(units, name))):
            raise DataError(f"column {name} has non-finite values")
    return units.y, units.t, units.x, units.d


def estimate_gen_dd(units: Units) -> Estimate:
    """OLS of y on (1, t, x); the coefficient on t is the effect estimate.

    A constant x column is dropped (it is collinear with the intercept), which
    reduces the fit to the difference of means.
    """
    y, t, x, _ = _columns(units)
    return _fit_weighted(y, t, x, np.ones(len(y)))


def estimate_gen_dd_w(units: Units, gamma: float) -> Estimate:
    """Weighted least squares with weights (1 + d) ** -gamma."""
    y, t, x, d = _columns(units)
    if np.any(d < 0):
        raise DataError("auxiliary covariate d must be nonnegative")
    if not (math.isfinite(gamma) and gamma >= 0):
        raise DataError("gamma must be finite and >= 0")
    return _fit_weighted(y, t, x, (1.0 + d) ** -gamma)


# ---------------------------------------------------------------- Winsorization


@dataclass(frozen=True)
class WinsorBounds:
    x_low: float
    x_high: float
    y_low: float
    y_high: float
    d_high: float


def percentile(values, fraction: float) -> float:
    """Linear interpolation between closest ranks at 0-indexed rank ``fraction * (n - 1)``."""
    return float(np.quantile(np.asarray(values, dtype=np.float64), fraction, method="linear"))


def winsorize_fit(train: Units, level: float) -> WinsorBounds:
    if len(train) == 0:
        raise DataError("cannot fit Winsorization bounds on an empty fold")
    if not 0.0 < level < 0.5:
        raise DataError("winsorize level must lie in (0, 0.5)")
    fractions = [level, 1.0 - level]
    x_low, x_high = np.quantile(train.x, fractions, method="linear").tolist()
    y_low, y_high = np.quantile(train.y, fractions, method="linear").tolist()
    return WinsorBounds(x_low, x_high, y_low, y_high, percentile(train.d, 1.0 - level))


def winsorize_apply(units: Units, bounds: WinsorBounds) -> Units:
    return Units(
        np.clip(units.x, bounds.x_low, bounds.x_high),
        np.clip(units.d, 0.0, bounds.d_high),
        np.clip(units.y, bounds.y_low, bounds.y_high),
        units.t,
    )


# ---------------------------------------------------------------- dispatch


def run_estimator(spec: EstimatorSpec, train: Units, seed: int | np.random.Generator = 0) -> Estimate:
    """Evaluate ``spec`` on a training fold; Winsorization (if any) touches only ``train``."""
    if spec.winsorize_level is not None:
        train = winsorize_apply(train, winsorize_fit(train, spec.winsorize_level))
    return run_family(spec, train, seed)


def run_family(spec: EstimatorSpec, train: Units, seed: int | np.random.Generator = 0) -> Estimate:
    """Dispatch on ``spec.family`` alone; the caller has already applied any Winsorization."""
    if spec.family == "dm":
        return estimate_dm(train.y[train.t == 1], train.y[train.t == 0])
    if spec.family == "mom":
        return estimate_mom(train.y[train.t == 1], train.y[train.t == 0], spec.total_blocks, seed)
    if spec.family == "gen_dd":
        return estimate_gen_dd(train)
    return estimate_gen_dd_w(train, spec.gamma)
