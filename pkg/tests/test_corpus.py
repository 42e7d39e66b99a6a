import csv
import io
import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rctselect.corpus import (
    Corpus,
    GeneratorConfig,
    attach_truth,
    gini_curve,
    hill_estimate,
    hill_from_k,
    ingest_csv,
    simulate_corpus,
    simulate_rct,
    write_csv,
    write_truth,
)
from rctselect.errors import DataError, DegenerateTailError


# ---------------------------------------------------------------- ingestion


def test_ingest_four_rows():
    corp = ingest_csv(b"rct_id,x,d,y,t\na,1,0,1,0\na,2,0,2,0\na,3,1,3,1\na,4,1,5,1\n")
    assert len(corp) == 1
    rct = corp[0]
    assert rct.n_treated == 2 and rct.m == 4
    assert rct.units.y.tolist() == [1, 2, 3, 5]


def test_ingest_rejects_negative_d_with_row_number():
    with pytest.raises(DataError, match="row 3"):
        ingest_csv("rct_id,x,d,y,t\na,1,0,1,0\na,1,-1,1,1\n")


@pytest.mark.parametrize(
    "row,pattern",
    [("a,1,0,1,2", "t must be 0 or 1"), ("a,foo,0,1,1", "not numeric"), ("a,1,0,nan,1", "not finite")],
)
def test_ingest_rejects_bad_rows(row, pattern):
    with pytest.raises(DataError, match=pattern):
        ingest_csv(f"rct_id,x,d,y,t\n{row}\n")


def test_ingest_rejects_undersized_rct_by_name():
    with pytest.raises(DataError, match="'tiny'"):
        ingest_csv("rct_id,x,d,y,t\ntiny,0,0,1,1\ntiny,0,0,1,0\ntiny,0,0,2,0\n")


def test_ingest_missing_column():
    with pytest.raises(DataError, match="y"):
        ingest_csv("rct_id,x,d,t\na,1,0,1\n")


def test_ingest_interleaved_matches_groupby_oracle(rng):
    lines = ["rct_id,x,d,y,t"]
    for j in range(60):
        rid = "ab"[rng.integers(2)] if j >= 8 else "ab"[j % 2]
        t = j % 4 < 2
        lines.append(f"{rid},{rng.normal()!r},{rng.random()!r},{rng.normal()!r},{int(t)}")
    text = "\n".join(lines) + "\n"
    expected = {}
    for row in csv.DictReader(io.StringIO(text)):
        expected.setdefault(row["rct_id"], []).append(float(row["y"]))
    corp = ingest_csv(io.BytesIO(text.encode()))
    assert corp.ids == list(expected)
    for rct in corp:
        assert rct.units.y.tolist() == expected[rct.id]


def test_ingest_optional_columns_and_defaults():
    corp = ingest_csv(
        "rct_id,x,d,y,t,m,profit_per_unit,time_index\n"
        "a,0,0,1,1,50,2.5,3\na,0,0,1,1,50,2.5,3\na,0,0,1,0,50,2.5,3\na,0,0,1,0,50,2.5,3\n"
    )
    rct = corp[0]
    assert (rct.m, rct.profit_per_unit, rct.time_index) == (50, 2.5, 3)


def test_csv_round_trip_is_exact():
    corp = simulate_corpus(GeneratorConfig(n_rcts=3, units_per_rct=(20, 30)), seed=5)
    buf = io.StringIO()
    write_csv(corp, buf)
    back = ingest_csv(buf.getvalue())
    assert back.ids == corp.ids
    for a, b in zip(corp, back):
        assert a.units.equals(b.units) and a.m == b.m and a.time_index == b.time_index
    truth = io.StringIO()
    write_truth(corp, truth)
    restored = attach_truth(back, json.loads(truth.getvalue()))
    assert restored.truth() == corp.truth()


def test_corpus_rejects_duplicates_and_empty(small_corpus):
    with pytest.raises(DataError):
        Corpus([])
    with pytest.raises(DataError, match="unique"):
        Corpus([small_corpus[0], small_corpus[0]])


# ---------------------------------------------------------------- generator


def test_generator_determinism_across_threads():
    cfg = GeneratorConfig(n_rcts=8, units_per_rct=(50, 80))
    a = simulate_corpus(cfg, 11)
    b = simulate_corpus(cfg, 11, threads=3)
    assert all(x.units.equals(y.units) and x.true_delta == y.true_delta for x, y in zip(a, b))
    c = simulate_corpus(cfg, 12)
    assert not a[0].units.equals(c[0].units)


def test_generator_rct_is_independent_of_corpus_size():
    small = simulate_corpus(GeneratorConfig(n_rcts=2, units_per_rct=(50, 80)), 4)
    big = simulate_corpus(GeneratorConfig(n_rcts=5, units_per_rct=(50, 80)), 4)
    assert small[1].units.equals(big[1].units)


def test_noiseless_limit_adds_exact_effect():
    cfg = GeneratorConfig(n_rcts=3, units_per_rct=(30, 40), delta_prior_mean=0.7, delta_prior_sd=0.0, noise_scale=1e-12)
    for rct in simulate_corpus(cfg, 1):
        y, t = rct.units.y, rct.units.t
        assert rct.true_delta == 0.7
        assert y[t == 1].mean() - y[t == 0].mean() == pytest.approx(0.7, abs=1e-9)


def test_generator_dm_is_unbiased():
    cfg = GeneratorConfig(n_rcts=300, units_per_rct=(100, 200))
    corp = simulate_corpus(cfg, 99)
    gaps = np.array([r.units.y[r.units.t == 1].mean() - r.units.y[r.units.t == 0].mean() - r.true_delta for r in corp])
    se = gaps.std(ddof=1) / math.sqrt(len(gaps))
    assert abs(gaps.mean()) < 3 * se


def test_generator_covariates_correlate_with_outcome():
    rct = simulate_rct(GeneratorConfig(units_per_rct=(4000, 4000)), 3, 0)
    u = rct.units
    cxy = np.corrcoef(np.log(u.x), np.log(u.y - rct.true_delta * u.t))[0, 1]
    cdy = np.corrcoef(np.log(u.d), np.log(u.y - rct.true_delta * u.t))[0, 1]
    assert cxy == pytest.approx(0.9, abs=0.03)
    assert cdy == pytest.approx(0.7, abs=0.04)
    assert np.all(u.d >= 0)


@pytest.mark.parametrize(
    "field,value",
    [("tail_exponent_eta", 1.0), ("n_rcts", 0), ("xy_correlation", 1.0), ("treated_fraction", 0.0), ("noise_scale", 0.0)],
)
def test_invalid_config_names_field(field, value):
    with pytest.raises(DataError, match=field):
        GeneratorConfig(**{field: value})


def test_config_dict_round_trip():
    cfg = GeneratorConfig(n_rcts=7)
    assert GeneratorConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(DataError, match="unknown"):
        GeneratorConfig.from_dict({"bogus": 1})


def test_time_order(small_corpus):
    rev = Corpus(list(reversed(small_corpus.rcts)))
    assert rev.ordered_by_time().ids == small_corpus.ids


# ---------------------------------------------------------------- Hill and Gini


def test_hill_small_example():
    report = hill_from_k([1, 2, 4, 8], 3)
    mean_log = (math.log(2) + math.log(4) + math.log(8)) / 3
    assert mean_log == pytest.approx(1.38629, abs=1e-5)
    assert report.alpha_hat == pytest.approx(0.72135, abs=1e-5)
    assert report.eta_hat == pytest.approx(1.72135, abs=1e-5)


def test_hill_degenerate_tail():
    with pytest.raises(DegenerateTailError):
        hill_estimate([1.0] * 5 + [7.0] * 20, 0.2)


def test_hill_preconditions():
    with pytest.raises(DataError, match="at least 10"):
        hill_estimate([1, 2, 3], 0.1)
    with pytest.raises(DataError, match="k >= 2"):
        hill_estimate(np.arange(1, 20.0), 0.05)
    with pytest.raises(DataError):
        hill_estimate(np.arange(1, 20.0), 0.6)


@pytest.mark.parametrize("alpha", [1.0, 1.5, 2.5])
def test_hill_exact_pareto_grid(alpha):
    n = 10_000
    u = (np.arange(1, n + 1) - 0.5) / n
    samples = u ** (-1 / alpha)
    assert hill_estimate(samples, 0.05).eta_hat == pytest.approx(alpha + 1, abs=0.05)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.01, 1e6), min_size=10, max_size=200, unique=True), st.floats(1e-3, 1e3))
def test_hill_scale_invariant(samples, c):
    a = hill_estimate(samples, 0.3)
    b = hill_estimate([c * s for s in samples], 0.3)
    assert b.eta_hat == pytest.approx(a.eta_hat, rel=1e-9)


def test_gini_examples():
    assert gini_curve([1, 1, 1, 1], 5) == [(0.0, 0.0), (0.25, 0.25), (0.5, 0.5), (0.75, 0.75), (1.0, 1.0)]
    curve = gini_curve([0, 0, 0, 5], 5)
    assert [v for _, v in curve] == [0.0, 1.0, 1.0, 1.0, 1.0]
    with pytest.raises(DataError):
        gini_curve([0, 0], 5)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.integers(0, 1000), min_size=1, max_size=60).filter(lambda v: sum(v) > 0), st.integers(2, 30))
def test_gini_matches_exact_oracle(values, n_points):
    ordered = sorted(values, reverse=True)
    total = sum(values)
    curve = gini_curve(values, n_points)
    shares = [v for _, v in curve]
    assert shares[0] == 0.0 and shares[-1] == 1.0
    assert all(b >= a for a, b in zip(shares, shares[1:]))
    for j, (q, v) in enumerate(curve):
        count = math.ceil(Fraction(j, n_points - 1) * len(values))
        assert v == pytest.approx(sum(ordered[:count]) / total, rel=1e-12, abs=1e-15)
