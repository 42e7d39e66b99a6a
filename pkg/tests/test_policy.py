import io
import math

import numpy as np
import pytest

from rctselect.corpus import Corpus
from rctselect.crossval import corpus_fold_stats, make_splits
from rctselect.errors import DataError, SingularDesignError
from rctselect.estimators import Estimate, EstimatorSpec, run_estimator
from rctselect.policy import (
    BASELINE_POLICY,
    ImpactEstimate,
    PolicyFeatures,
    PolicySpec,
    decide_t_threshold,
    f_hat,
    feature_matrix,
    fit_linear_policy,
    online_policy_run,
    oracle_policy,
    sweep_critical_t,
    write_online,
    write_sweep,
)

from conftest import make_rct


def est(t):
    return Estimate(t, 1.0, 2, 2)


def test_decide_examples():
    assert decide_t_threshold(est(2.5), 1.96) == 1
    assert decide_t_threshold(est(1.96), 1.96) == 1
    assert decide_t_threshold(est(1.0), 1.96) == 0
    assert decide_t_threshold(None, -math.inf) == 1
    assert decide_t_threshold(est(100.0), math.inf) == 0
    with pytest.raises(DataError):
        decide_t_threshold(Estimate(1.0, None, 2, 2), 0.0)


@pytest.mark.parametrize(
    "text", ["tstat:gen_dd_w0.6:-1.96", "tstat:dm:inf", "tstat:gen_dd:-inf", "oracle", "regression:dm,gen_dd", "regression:gen_dd:norefit"]
)
def test_policy_spec_round_trip(text):
    assert PolicySpec.parse(text).name == text


def test_policy_spec_parse_details():
    p = PolicySpec.parse("tstat:gen_dd_w0.6:-1.96")
    assert p.estimator.gamma == 0.6 and p.critical_t == -1.96
    assert PolicySpec.parse("regression:default").feature_specs == PolicySpec.regression().feature_specs
    for bad in ("tstat:dm", "tstat:dm:abc", "regression:dm:sometimes", "ridge", "tstat:dm:nan"):
        with pytest.raises(DataError):
            PolicySpec.parse(bad)


def test_impact_intervals():
    vals = np.array([1.0, 2.0, 3.0, 4.0])
    imp = ImpactEstimate.from_replicates(vals)
    half = 1.959963984540054 * np.std(vals, ddof=1) / 2
    assert (imp.f_hat, imp.ci_low, imp.ci_high) == pytest.approx((2.5, 2.5 - half, 2.5 + half))
    pct = ImpactEstimate.from_replicates(vals, ci="percentile")
    assert pct.ci_low <= pct.f_hat <= pct.ci_high
    with pytest.raises(DataError):
        ImpactEstimate.from_replicates(vals, ci="bootstrap")


def hand_corpus():
    # Constant arms make every fold-2 DM exact: 0.5 and -0.2.
    return Corpus([make_rct("a", [0.5] * 4, [0.0] * 4, m=10), make_rct("b", [0.0] * 4, [0.2] * 4, m=100)])


def test_oracle_hand_corpus():
    corp = hand_corpus()
    plan = make_splits(corp, 0.5, 3)
    imp = oracle_policy(corp, plan)
    assert imp.f_hat == pytest.approx(5.0, abs=1e-12)
    assert imp.per_replicate.tolist() == pytest.approx([5.0] * 3, abs=1e-12)
    everything = f_hat(corp, PolicySpec.t_threshold("dm", -math.inf), plan)
    assert everything.f_hat == pytest.approx(5.0 - 20.0, abs=1e-12)


def test_endpoints_and_direct_oracle(small_corpus):
    plan = make_splits(small_corpus, 0.5, 5, seed=2)
    spec = EstimatorSpec.parse("gen_dd")
    labels = np.zeros((len(small_corpus), 5))
    tstats = np.zeros((len(small_corpus), 5))
    for i, rct in enumerate(small_corpus):
        for b in range(5):
            f1, f2 = plan.folds(rct, b)
            labels[i, b] = rct.m * (f2.y[f2.t == 1].mean() - f2.y[f2.t == 0].mean())
            tstats[i, b] = run_estimator(spec, f1).t_stat
    assert f_hat(small_corpus, PolicySpec.t_threshold(spec, math.inf), plan).f_hat == 0.0
    assert f_hat(small_corpus, PolicySpec.t_threshold(spec, -math.inf), plan).f_hat == pytest.approx(labels.sum(0).mean())
    for c in (-1.0, 0.5, 2.0):
        expected = np.where(tstats >= c, labels, 0).sum(0)
        got = f_hat(small_corpus, PolicySpec.t_threshold(spec, c), plan)
        assert got.per_replicate.tolist() == pytest.approx(expected.tolist(), rel=1e-12)


def test_sweep_dominance_and_monotone_counts(small_corpus):
    plan = make_splits(small_corpus, 0.5, 6, seed=4)
    grid = [-math.inf, -2, -1, 0, 1, 2, 3, math.inf]
    points = sweep_critical_t(small_corpus, "gen_dd", grid, plan)
    oracle = oracle_policy(small_corpus, plan).per_replicate
    for pt in points:
        assert np.all(oracle >= pt.impact.per_replicate - 1e-9)
    counts = np.array([pt.n_rollouts for pt in points])
    assert np.all(np.diff(counts, axis=0) <= 0)
    assert points[-1].impact.f_hat == 0.0
    single = sweep_critical_t(small_corpus, "gen_dd", [1.0], plan)[0]
    assert single.impact.f_hat == f_hat(small_corpus, PolicySpec.t_threshold("gen_dd", 1.0), plan).f_hat
    base = f_hat(small_corpus, BASELINE_POLICY, plan).f_hat
    if base != 0:
        assert points[3].normalized == pytest.approx(points[3].impact.f_hat / base)
    buf = io.StringIO()
    write_sweep([("gen_dd", p) for p in points], buf)
    assert buf.getvalue().splitlines()[1].startswith("gen_dd,-inf,")
    with pytest.raises(DataError):
        sweep_critical_t(small_corpus, "gen_dd", [], plan)


def test_shared_stats_give_same_answer(small_corpus):
    plan = make_splits(small_corpus, 0.5, 4, seed=4)
    specs = [EstimatorSpec.parse("gen_dd")]
    stats = corpus_fold_stats(small_corpus, specs, plan)
    a = sweep_critical_t(small_corpus, "gen_dd", [0.0], plan, stats=stats)[0]
    b = sweep_critical_t(small_corpus, "gen_dd", [0.0], plan)[0]
    assert a.impact.per_replicate.tolist() == b.impact.per_replicate.tolist()


# ---------------------------------------------------------------- linear policies


def feats(rows, m=None):
    m = m or [100] * len(rows)
    return [PolicyFeatures(f"r{i}", {"s": Estimate(d, se, 2, 2)}, mi) for i, ((d, se), mi) in enumerate(zip(rows, m))]


def test_linear_policy_single_feature_boundary():
    t = np.linspace(-3, 3, 13)
    rows = feats([(v, 1.0) for v in t])
    names, x = feature_matrix(rows)
    assert x[:, names.index("s.t_stat")].tolist() == pytest.approx(t.tolist())
    model = fit_linear_policy(rows, 5.0 * t, columns=["s.t_stat"])
    assert model.names == ("s.t_stat",)
    assert model.intercept == pytest.approx(0.0, abs=1e-12)
    decisions = model.decide(feats([(v, 1.0) for v in (-0.5, -0.01, 0.01, 0.5)]))
    assert decisions.tolist() == [0, 0, 1, 1]


def test_linear_policy_intercept_only():
    rows = feats([(1.0, 1.0)] * 5)
    model = fit_linear_policy(rows, [3.0, 1.0, 2.0, 5.0, 0.5])
    assert model.names == () and model.intercept == pytest.approx(2.3)
    assert model.decide(rows).tolist() == [1] * 5


def test_linear_policy_matches_normal_equations(rng):
    n = 200
    rows = feats([(d, se) for d, se in zip(rng.normal(size=n), rng.uniform(0.5, 2, n))], m=rng.integers(10, 1000, n).tolist())
    names, x = feature_matrix(rows)
    y = rng.normal(size=n) + x @ rng.normal(size=x.shape[1])
    model = fit_linear_policy(rows, y)
    z = (x - x.mean(0)) / x.std(0)
    design = np.column_stack([np.ones(n), z])
    beta = np.linalg.solve(design.T @ design, design.T @ y)
    assert model.intercept == pytest.approx(beta[0], rel=1e-8)
    assert model.coef.tolist() == pytest.approx(beta[1:].tolist(), rel=1e-8)
    assert model.predict(rows).tolist() == pytest.approx((design @ beta).tolist(), rel=1e-8, abs=1e-8)


def test_linear_policy_errors():
    # delta_hat, t_stat and m are perfectly collinear here
    collinear = feats([(v, 1.0) for v in range(1, 8)], m=list(range(1, 8)))
    with pytest.raises(SingularDesignError):
        fit_linear_policy(collinear, np.arange(7.0))
    rows = feats([(1.0, 1.0), (2.0, 2.0), (3.0, 1.0)], m=[1, 2, 3])
    with pytest.raises(DataError):
        fit_linear_policy(rows, [1.0, 2.0])
    with pytest.raises(DataError):
        fit_linear_policy(rows, [1.0, 2.0, 3.0], columns=["nope"])


def test_regression_policy_f_hat(small_corpus):
    plan = make_splits(small_corpus, 0.5, 3)
    imp = f_hat(small_corpus, PolicySpec.parse("regression:gen_dd"), plan)
    oracle = oracle_policy(small_corpus, plan)
    assert np.all(imp.per_replicate <= oracle.per_replicate + 1e-9)


# ---------------------------------------------------------------- online runs


def test_online_full_warmup_equals_baseline(small_corpus):
    plan = make_splits(small_corpus, 0.5, 2)
    run = online_policy_run(small_corpus, plan, warmup=len(small_corpus))
    assert all(s.source == "warmup" for s in run.steps)
    assert run.total == run.baseline_total
    assert run.total <= run.oracle_total


def test_online_single_step_is_one_fit(small_corpus):
    plan = make_splits(small_corpus, 0.5, 2)
    policy = PolicySpec.parse("regression:gen_dd")
    warm = len(small_corpus) - 1
    run = online_policy_run(small_corpus, plan, policy, warmup=warm, replicate=1)
    stats = corpus_fold_stats(small_corpus, policy.feature_specs, plan)
    rows = [PolicyFeatures(fs.rct_id, {"gen_dd": fs.estimate("gen_dd", 1)}, fs.m) for fs in stats]
    targets = [fs.m * fs.heldout_dm[1] for fs in stats]
    last = run.steps[-1]
    try:
        model = fit_linear_policy(rows[:warm], targets[:warm])
    except (DataError, SingularDesignError):
        assert last.source == "fallback"
        return
    assert last.source == "model"
    assert last.decision == int(model.predict(rows[warm:])[0] > 0)
    assert last.value == pytest.approx(last.decision * targets[-1])
    buf = io.StringIO()
    write_online(run, buf)
    assert len(buf.getvalue().splitlines()) == len(small_corpus) + 1


def test_online_follows_time_order(small_corpus):
    plan = make_splits(small_corpus, 0.5, 1)
    rev = Corpus(list(reversed(small_corpus.rcts)))
    plan_rev = make_splits(rev, 0.5, 1)
    run = online_policy_run(rev, plan_rev, warmup=2)
    assert [s.rct_id for s in run.steps] == small_corpus.ids


def test_online_needs_time_index():
    corp = Corpus([make_rct(f"r{i}", [1, 2, 3], [1, 2, 2]) for i in range(3)])
    with pytest.raises(DataError, match="time_index"):
        online_policy_run(corp, make_splits(corp, 0.5, 1), warmup=1)


def test_online_rejects_non_regression(small_corpus):
    with pytest.raises(DataError):
        online_policy_run(small_corpus, make_splits(small_corpus, 0.5, 1), PolicySpec.parse("oracle"))
