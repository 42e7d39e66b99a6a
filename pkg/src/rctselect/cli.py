"""Command-line entry point: ``rctselect {simulate,tail,compare,policy,policy-online}``.

Every subcommand accepts ``--config run.json``; keys are the long option names with
dashes replaced by underscores, and flags given on the command line win. Outputs are
CSV/JSON files written under ``--out``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import aggregate, corpus as corpus_mod, crossval, policy as policy_mod
from .corpus import GeneratorConfig
from .errors import DataError, EstimatorFailure, NumericalError
from .estimators import EstimatorSpec

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

DEFAULT_COMPARE_SPECS = (
    "dm",
    "dm_wins.001",
    "mom1000",
    "gen_dd",
    "gen_dd_wins.001",
    "gen_dd_w1",
    "gen_dd_w1_wins.001",
)
DEFAULT_CUTOFFS = (0.005, 0.01, 0.02, 0.03, 0.05, 0.075, 0.1, 0.15, 0.2)
DEFAULT_GRID = "-inf,-4:4:0.25,1.96,inf"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse would exit with status 2
        raise UsageError(message)


# ---------------------------------------------------------------- option parsing helpers


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of numbers, got {text!r}") from None


def parse_grid(text: str) -> list[float]:
    """Comma-separated critical t values; ``lo:hi:step`` expands to an inclusive range; ``inf``/``-inf`` allowed."""
    values: list[float] = []
    for part in (p.strip() for p in text.split(",")):
        if not part:
            continue
        if part.count(":") == 2:
            try:
                lo, hi, step = (float(v) for v in part.split(":"))
            except ValueError:
                raise UsageError(f"bad grid range {part!r}") from None
            if not step > 0 or hi < lo:
                raise UsageError(f"bad grid range {part!r}")
            n = int(math.floor((hi - lo) / step + 1e-9)) + 1
            values.extend(round(lo + j * step, 10) for j in range(n))
        else:
            try:
                values.append(policy_mod._parse_threshold(part))
            except DataError as exc:
                raise UsageError(str(exc)) from None
    if not values:
        raise UsageError("critical t grid is empty")
    return values


def _specs(text: str) -> list[EstimatorSpec]:
    return [EstimatorSpec.parse(s.strip()) for s in text.split(",") if s.strip()]


def _load_config(path: str | None) -> dict[str, Any]:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"config {path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(data, dict):
        raise DataError(f"config {path}: top level must be a JSON object")
    return data


def _resolve(args: argparse.Namespace, defaults: dict[str, Any]) -> argparse.Namespace:
    """Merge built-in defaults < config file < explicit flags."""
    config = _load_config(args.config)
    unknown = sorted(set(config) - set(defaults))
    if unknown:
        raise UsageError(f"unknown config key(s) for {args.command}: {', '.join(unknown)}")
    merged = dict(defaults)
    merged.update(config)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    out = argparse.Namespace(**vars(args))
    for key, value in merged.items():
        setattr(out, key, value)
    return out


def _require(ns: argparse.Namespace, *names: str) -> None:
    missing = [n for n in names if getattr(ns, n) is None]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + n.replace("_", "-") for n in missing))


def _out_dir(ns: argparse.Namespace) -> Path:
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, writer, *args) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer(*args, fh)
    print(path)


def _read_corpus(path: str) -> corpus_mod.Corpus:
    with open(path, "rb") as fh:
        return corpus_mod.ingest_csv(fh)


def _plan(ns: argparse.Namespace, corp: corpus_mod.Corpus) -> crossval.SplitPlan:
    return crossval.make_splits(corp, float(ns.p), int(ns.replicates), int(ns.seed))


# ---------------------------------------------------------------- subcommands

SIMULATE_DEFAULTS = {
    "seed": None,
    "out": ".",
    "threads": 1,
    **GeneratorConfig().to_dict(),
}


def cmd_simulate(ns: argparse.Namespace) -> None:
    ns = _resolve(ns, SIMULATE_DEFAULTS)
    _require(ns, "seed")
    fields = {k: getattr(ns, k) for k in GeneratorConfig().to_dict()}
    cfg = GeneratorConfig.from_dict(fields)
    corp = corpus_mod.simulate_corpus(cfg, int(ns.seed), int(ns.threads))
    out = _out_dir(ns)
    _write(out / "corpus.csv", corpus_mod.write_csv, corp)
    _write(out / "truth.json", corpus_mod.write_truth, corp)


TAIL_DEFAULTS = {"corpus": None, "out": ".", "variable": "y", "cutoffs": list(DEFAULT_CUTOFFS), "gini_points": 101}


def cmd_tail(ns: argparse.Namespace) -> None:
    ns = _resolve(ns, TAIL_DEFAULTS)
    _require(ns, "corpus")
    if ns.variable not in ("x", "d", "y"):
        raise UsageError("--variable must be one of x, d, y")
    cutoffs = _float_list(ns.cutoffs) if isinstance(ns.cutoffs, str) else [float(c) for c in ns.cutoffs]
    corp = _read_corpus(ns.corpus)
    pooled = np.concatenate([getattr(r.units, ns.variable) for r in corp])
    reports = [corpus_mod.hill_estimate(pooled, c) for c in cutoffs]
    curve = corpus_mod.gini_curve(pooled, int(ns.gini_points))
    out = _out_dir(ns)

    def hill_csv(rows, fh):
        fh.write("cutoff_fraction,n_tail,eta_hat\n")
        for r in rows:
            fh.write(f"{r.cutoff_fraction!r},{r.n_tail},{r.eta_hat!r}\n")

    def gini_csv(rows, fh):
        fh.write("population_share,value_share\n")
        for q, v in rows:
            fh.write(f"{q!r},{v!r}\n")

    _write(out / "hill.csv", hill_csv, reports)
    _write(out / "gini.csv", gini_csv, curve)


COMPARE_DEFAULTS = {
    "corpus": None,
    "errors": None,
    "out": ".",
    "specs": ",".join(DEFAULT_COMPARE_SPECS),
    "p": crossval.DEFAULT_P,
    "replicates": crossval.DEFAULT_REPLICATES,
    "seed": None,
    "alpha": aggregate.DEFAULT_ALPHA,
    "bins": 20,
    "threads": 1,
}


def cmd_compare(ns: argparse.Namespace) -> None:
    ns = _resolve(ns, COMPARE_DEFAULTS)
    if (ns.corpus is None) == (ns.errors is None):
        raise UsageError("give exactly one of --corpus or --errors")
    out = _out_dir(ns)
    if ns.corpus is not None:
        _require(ns, "seed")
        specs = _specs(ns.specs)
        corp = _read_corpus(ns.corpus)
        errors = crossval.corpus_errors_many(corp, specs, _plan(ns, corp), int(ns.threads))
        _write(out / "errors.csv", crossval.write_errors, errors)
    else:
        with open(ns.errors, encoding="utf-8", newline="") as fh:
            errors = crossval.read_errors(fh)
    matrix = aggregate.compare_all(errors)
    ranking = aggregate.rank_copeland(matrix, float(ns.alpha))
    _write(out / "matrix.csv", aggregate.write_matrix, matrix)
    _write(out / "matrix_table.csv", aggregate.write_matrix_table, matrix)
    _write(out / "ranking.csv", aggregate.write_ranking, ranking)
    hist_dir = out / "histograms"
    hist_dir.mkdir(exist_ok=True)
    for i, a in enumerate(matrix.specs):
        for b in matrix.specs[i + 1 :]:
            sv = matrix.scores[(a, b)]
            _write(hist_dir / f"{a}__{b}.csv", aggregate.write_histogram, aggregate.histogram(sv, int(ns.bins)))
            _write(hist_dir / f"{a}__{b}.scores.csv", aggregate.write_scores, sv)
    for row in ranking:
        print(f"{row.spec}\twins={row.wins}\tlosses={row.losses}\tties={row.ties}")


POLICY_DEFAULTS = {
    "corpus": None,
    "out": ".",
    "sweep_specs": "gen_dd",
    "grid": DEFAULT_GRID,
    "policies": [],
    "baseline": policy_mod.BASELINE_POLICY.name,
    "p": crossval.DEFAULT_P,
    "replicates": crossval.DEFAULT_REPLICATES,
    "seed": None,
    "ci": "normal",
    "threads": 1,
}


def cmd_policy(ns: argparse.Namespace) -> None:
    ns = _resolve(ns, POLICY_DEFAULTS)
    _require(ns, "corpus", "seed")
    if ns.ci not in ("normal", "percentile"):
        raise UsageError("--ci must be normal or percentile")
    grid = parse_grid(ns.grid) if isinstance(ns.grid, str) else [float(v) for v in ns.grid]
    sweep_specs = _specs(ns.sweep_specs)
    baseline = policy_mod.PolicySpec.parse(ns.baseline)
    extra = [policy_mod.PolicySpec.parse(p) for p in ns.policies]
    corp = _read_corpus(ns.corpus)
    plan = _plan(ns, corp)

    needed = list(sweep_specs) + list(baseline.estimator_specs)
    for pol in extra:
        needed.extend(pol.estimator_specs)
    stats = crossval.corpus_fold_stats(corp, needed, plan, int(ns.threads))

    sweep_rows, replicate_rows = [], []
    for spec in sweep_specs:
        points = policy_mod.sweep_critical_t(corp, spec, grid, plan, baseline, ci=ns.ci, stats=stats)
        for pt in points:
            sweep_rows.append((spec.name, pt))
            name = policy_mod.PolicySpec.t_threshold(spec, pt.critical_t).name
            replicate_rows.append((name, pt.impact.per_replicate))
    impacts = []
    for pol in [baseline, policy_mod.PolicySpec("oracle"), *extra]:
        imp = policy_mod.f_hat(corp, pol, plan, ci=ns.ci, stats=stats)
        impacts.append((pol.name, imp))
        if pol.name not in {name for name, _ in replicate_rows}:
            replicate_rows.append((pol.name, imp.per_replicate))

    out = _out_dir(ns)
    _write(out / "sweep.csv", policy_mod.write_sweep, sweep_rows)
    _write(out / "impacts.csv", policy_mod.write_impacts, impacts)
    _write(out / "replicates.csv", policy_mod.write_replicates, replicate_rows)
    for spec in sweep_specs:
        best = max((pt for s, pt in sweep_rows if s == spec.name), key=lambda pt: pt.impact.f_hat)
        print(f"{spec.name}\targmax_critical_t={policy_mod._fmt_threshold(best.critical_t)}\tf_hat={best.impact.f_hat!r}")


ONLINE_DEFAULTS = {
    "corpus": None,
    "out": ".",
    "policy": "regression:default",
    "baseline": policy_mod.BASELINE_POLICY.name,
    "warmup": policy_mod.DEFAULT_WARMUP,
    "replicate": 0,
    "p": crossval.DEFAULT_P,
    "replicates": crossval.DEFAULT_REPLICATES,
    "seed": None,
    "threads": 1,
}


def cmd_policy_online(ns: argparse.Namespace) -> None:
    ns = _resolve(ns, ONLINE_DEFAULTS)
    _require(ns, "corpus", "seed")
    if not 0 <= int(ns.replicate) < int(ns.replicates):
        raise UsageError("--replicate must lie in [0, --replicates)")
    pol = policy_mod.PolicySpec.parse(ns.policy)
    baseline = policy_mod.PolicySpec.parse(ns.baseline)
    corp = _read_corpus(ns.corpus)
    # Only the chosen replicate is needed; the split plan derives it independently.
    plan = _plan(ns, corp)
    result = policy_mod.online_policy_run(
        corp, plan, pol, int(ns.warmup), int(ns.replicate), baseline, int(ns.threads)
    )
    out = _out_dir(ns)
    _write(out / "online.csv", policy_mod.write_online, result)
    print(f"online={result.total!r}\tbaseline={result.baseline_total!r}\toracle={result.oracle_total!r}")


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rctselect", description="Estimator selection and roll-out policies over a corpus of RCTs.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p: argparse.ArgumentParser, seed: bool = True, threads: bool = True) -> None:
        p.add_argument("--config", help="JSON file of option values; flags override it")
        p.add_argument("--out", help="output directory (default: current directory)")
        if seed:
            p.add_argument("--seed", type=int, help="master seed (required)")
        if threads:
            p.add_argument("--threads", type=int, help="worker processes; results do not depend on it")

    def splits(p: argparse.ArgumentParser) -> None:
        p.add_argument("--p", type=float, help="fold-1 share of each arm (default 0.5)")
        p.add_argument("--replicates", type=int, help="number of fold splits B (default 100)")

    sim = sub.add_parser("simulate", help="write a synthetic corpus CSV and its truth JSON")
    common(sim)
    sim.add_argument("--n-rcts", dest="n_rcts", type=int)
    sim.add_argument("--units-per-rct", dest="units_per_rct", type=int, nargs=2, metavar=("MIN", "MAX"))
    sim.add_argument("--tail-exponent-eta", dest="tail_exponent_eta", type=float)
    sim.add_argument("--delta-prior-mean", dest="delta_prior_mean", type=float)
    sim.add_argument("--delta-prior-sd", dest="delta_prior_sd", type=float)
    sim.add_argument("--xy-correlation", dest="xy_correlation", type=float)
    sim.add_argument("--dy-correlation", dest="dy_correlation", type=float)
    sim.add_argument("--treated-fraction", dest="treated_fraction", type=float)
    sim.add_argument("--noise-scale", dest="noise_scale", type=float)
    sim.set_defaults(func=cmd_simulate)

    tail = sub.add_parser("tail", help="Hill estimates over a cutoff grid and the Gini share curve")
    common(tail, seed=False, threads=False)
    tail.add_argument("--corpus", help="corpus CSV")
    tail.add_argument("--variable", choices=("x", "d", "y"))
    tail.add_argument("--cutoffs", help="comma-separated cutoff fractions")
    tail.add_argument("--gini-points", dest="gini_points", type=int)
    tail.set_defaults(func=cmd_tail)

    cmp_ = sub.add_parser("compare", help="pairwise estimator comparison and ranking")
    common(cmp_)
    splits(cmp_)
    cmp_.add_argument("--corpus", help="corpus CSV (held-out errors are computed)")
    cmp_.add_argument("--errors", help="per-RCT error CSV (rct_id,spec,value) instead of a corpus")
    cmp_.add_argument("--specs", help="comma-separated estimator specs")
    cmp_.add_argument("--alpha", type=float, help="significance level for the ranking (default 0.05)")
    cmp_.add_argument("--bins", type=int, help="score histogram bins (default 20)")
    cmp_.set_defaults(func=cmd_compare)

    pol = sub.add_parser("policy", help="critical-t sweep, oracle and extra policies")
    common(pol)
    splits(pol)
    pol.add_argument("--corpus", help="corpus CSV")
    pol.add_argument("--sweep-specs", dest="sweep_specs", help="comma-separated estimators to sweep")
    pol.add_argument("--grid", help=f"critical t grid (default {DEFAULT_GRID!r})")
    pol.add_argument("--policy", dest="policies", action="append", help="extra policy spec; repeatable")
    pol.add_argument("--baseline", help="baseline policy for normalization (default tstat:gen_dd:1.96)")
    pol.add_argument("--ci", choices=("normal", "percentile"))
    pol.set_defaults(func=cmd_policy)

    onl = sub.add_parser("policy-online", help="time-ordered online regression policy run")
    common(onl)
    splits(onl)
    onl.add_argument("--corpus", help="corpus CSV with a time_index column")
    onl.add_argument("--policy", help="regression policy spec (default regression:default)")
    onl.add_argument("--baseline", help="warm-up and comparison policy (default tstat:gen_dd:1.96)")
    onl.add_argument("--warmup", type=int, help="RCTs decided by the baseline before fitting (default 50)")
    onl.add_argument("--replicate", type=int, help="which fold split to evaluate on (default 0)")
    onl.set_defaults(func=cmd_policy_online)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    try:
        ns = build_parser().parse_args(argv)
        ns.func(ns)
    except UsageError as exc:
        print(f"rctselect: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, ArithmeticError) as exc:
        print(f"rctselect: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except EstimatorFailure as exc:
        code = EXIT_NUMERICAL if isinstance(exc.cause, ArithmeticError) else EXIT_DATA
        print(f"rctselect: estimator failure: {exc}", file=sys.stderr)
        return code
    except (DataError, OSError) as exc:
        print(f"rctselect: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
