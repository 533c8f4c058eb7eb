from __future__ import annotations

import json

import mpmath
import numpy as np
import pytest
from scipy import stats

from prism_audit.errors import AlignmentError, TooManyDegenerateResamples, ValidationError, ZeroVarianceDifferences
from prism_audit.inference import (TestConfig, Verdict, betainc_regularized, bootstrap_test, delta_statistic,
                                   draw_counts, p_value_from_deltas, paired_t_test, percentile_ci,
                                   resample_stream, student_t_cdf)
from prism_audit.ranks import CountRanker, kendall_tau, spearman_rho
from prism_audit.scores import ScoreSpec, ScoreVector


def vec(model, ids, vals):
    return ScoreVector(model, "suspect", ScoreSpec(), list(ids), np.asarray(vals, dtype=float))


def triple(rng, n=60, noise_d=0.1, noise_r=1.0):
    t = rng.normal(size=n)
    r = t + noise_r * rng.normal(size=n)
    d = t + noise_d * rng.normal(size=n)
    ids = [f"d{i:03d}" for i in range(n)]
    return vec("R", ids, r), vec("T", ids, t), vec("D", ids, d)


def test_p_value_floor_exact():
    assert p_value_from_deltas(np.full(10_000, 0.3)) == 1 / 10_001
    assert p_value_from_deltas(np.zeros(10_000)) == 1.0
    assert p_value_from_deltas([0.1, -0.1, 0.0, 0.2]) == 3 / 5


def test_p_bounds_over_runs(rng):
    for _ in range(20):
        r, t, d = triple(rng, n=int(rng.integers(10, 40)), noise_d=float(rng.uniform(0.05, 2)))
        rep = bootstrap_test(r, t, d, TestConfig(B=200, seed=int(rng.integers(1000))))
        assert 1 / 201 <= rep.p_value <= 1
        assert rep.p_value == (1 + rep.n_nonpositive) / 201


def test_percentile_ci():
    assert percentile_ci(np.arange(101.0)) == (2.5, 97.5)
    lo, hi = percentile_ci(np.arange(101.0), 0.9)
    assert (lo, hi) == (5.0, 95.0)
    with pytest.raises(ValueError):
        percentile_ci([])


def test_delta_statistic_direct():
    r, t, d = [1, 2, 3, 4, 5], [1, 3, 2, 5, 4], [1, 2, 3, 5, 4]
    rt, dt, delta = delta_statistic(r, t, d)
    assert rt == pytest.approx(spearman_rho(r, t)) and dt == pytest.approx(spearman_rho(d, t))
    assert delta == rt - dt
    _, _, dk = delta_statistic(r, t, d, "kendall")
    assert dk == pytest.approx(kendall_tau(r, t) - kendall_tau(d, t))


def test_identical_distilled_gives_zero_delta(rng):
    r, t, _ = triple(rng)
    rep = bootstrap_test(r, t, r, TestConfig(B=500))
    assert rep.delta_hat == 0.0
    assert np.all(rep.deltas == 0.0)
    assert rep.p_value == 1.0 and rep.verdict is Verdict.INCONCLUSIVE


@pytest.mark.parametrize("metric", ["spearman", "kendall"])
def test_matches_materialized_resamples(rng, metric):
    n = 7
    r, t, d = (np.round(rng.normal(size=n), 1) for _ in range(3))
    cfg = TestConfig(B=300, seed=11, metric=metric)
    rep = bootstrap_test(vec("R", "abcdefg", r), vec("T", "abcdefg", t), vec("D", "abcdefg", d), cfg)
    corr = spearman_rho if metric == "spearman" else kendall_tau
    # replay each stream directly, redrawing ties on any side
    for b in range(cfg.B):
        g = resample_stream(cfg.seed, b)
        while True:
            idx = g.integers(0, n, size=n)
            if all(len(set(v[idx])) >= 2 for v in (r, t, d)):
                break
        expect = corr(r[idx], t[idx]) - corr(d[idx], t[idx])
        assert abs(rep.deltas[b] - expect) < 1e-12


def test_determinism_and_seed_sensitivity(rng):
    r, t, d = triple(rng)
    a = bootstrap_test(r, t, d, TestConfig(B=1000, seed=3))
    b = bootstrap_test(r, t, d, TestConfig(B=1000, seed=3))
    c = bootstrap_test(r, t, d, TestConfig(B=1000, seed=4))
    assert a.to_json(True) == b.to_json(True)
    assert not np.array_equal(a.deltas, c.deltas)


def test_chunking_does_not_change_stream(rng):
    from prism_audit.inference import bootstrap_deltas
    r, t, d = (rng.normal(size=30) for _ in range(3))
    cfg = TestConfig(B=250, seed=9)
    x, _ = bootstrap_deltas(r, t, d, cfg, chunk=1000)
    y, _ = bootstrap_deltas(r, t, d, cfg, chunk=37)
    assert np.array_equal(x, y)


def test_monotone_invariance(rng):
    r, t, d = triple(rng)
    base = bootstrap_test(r, t, d, TestConfig(B=400))
    tr = [vec(v.model_id, v.doc_ids, np.exp(v.scores) * 3 + 1) for v in (r, t, d)]
    other = bootstrap_test(*tr, TestConfig(B=400))
    assert np.array_equal(base.deltas, other.deltas)
    assert (base.rho_RT, base.rho_DT, base.delta_hat, base.p_value, base.ci) == \
        (other.rho_RT, other.rho_DT, other.delta_hat, other.p_value, other.ci)


def test_order_of_documents_irrelevant(rng):
    r, t, d = triple(rng, n=25)
    perm = rng.permutation(25)
    d2 = vec("D", [d.doc_ids[i] for i in perm], d.scores[perm])
    assert delta_statistic(r, t, d) == delta_statistic(r, t, d2)


def test_misaligned_ids_rejected(rng):
    r, t, d = triple(rng, n=10)
    bad = vec("D", [f"x{i}" for i in range(10)], d.scores)
    with pytest.raises(AlignmentError):
        bootstrap_test(r, t, bad, TestConfig(B=10))


def test_clear_signal_detected(rng):
    r, t, d = triple(rng, n=200, noise_d=1.0, noise_r=0.05)
    rep = bootstrap_test(r, t, d, TestConfig(B=2000))
    assert rep.delta_hat > 0.3
    assert rep.p_value == 1 / 2001 and rep.verdict is Verdict.NON_MEMBER_EVIDENCE
    assert rep.ci[0] > 0


def test_verdict_boundary_is_strict():
    # p == alpha exactly must stay inconclusive
    ids = list("abcde")
    r = vec("R", ids, [1, 2, 3, 4, 5])
    cfg = TestConfig(B=19, alpha=0.05)
    rep = bootstrap_test(r, r, r, cfg)
    assert rep.p_value == 1.0
    assert TestConfig(B=19, alpha=1 / 20).alpha == 0.05
    # 1/(B+1) with B=19 equals alpha
    assert p_value_from_deltas(np.ones(19)) == 0.05
    assert not (p_value_from_deltas(np.ones(19)) < 0.05)


def test_redraws_counted_and_bounded():
    v = np.array([0.0, 0.0, 0.0, 1.0])
    rk = CountRanker(v)
    counts, redraws = draw_counts(4, 200, 5, (rk,))
    assert np.all(rk.n_distinct(counts) >= 2) and redraws > 0
    assert np.all(counts.sum(axis=1) == 4)
    with pytest.raises(TooManyDegenerateResamples):
        draw_counts(4, 200, 5, (rk,), max_redraws=0)


def test_report_serialisation(tmp_path, rng):
    rep = bootstrap_test(*triple(rng, n=20), TestConfig(B=50))
    paths = rep.write(tmp_path / "rep")
    data = json.loads(paths[1].read_text())
    assert data["p_value"] == rep.p_value and data["config"]["B"] == 50
    assert "PCG64" in data["rng"]
    assert paths[2].read_text().count("\n") == 51
    assert "verdict" in paths[0].read_text()


def test_config_validation():
    for kw in ({"B": 0}, {"alpha": 0.0}, {"alpha": 1.0}, {"metric": "pearson"}, {"ci_level": 1.0}):
        with pytest.raises(ValidationError):
            TestConfig(**kw)


# --- t distribution and paired t-test ---------------------------------------------

@pytest.mark.parametrize("a,b,x", [(0.5, 0.5, 0.3), (2, 3, 0.9), (9.5, 0.5, 0.85), (50, 50, 0.47), (1, 1, 0.25)])
def test_betainc_vs_mpmath(a, b, x):
    expect = float(mpmath.betainc(a, b, 0, x, regularized=True))
    assert abs(betainc_regularized(a, b, x) - expect) < 1e-13


@pytest.mark.parametrize("df", [1, 2, 5, 19, 30, 299, 1000])
@pytest.mark.parametrize("t", [-40.0, -3.2, -2.1009, -0.5, 0.0, 0.7, 2.5, 12.0])
def test_t_cdf_vs_scipy(t, df):
    assert abs(student_t_cdf(t, df) - stats.t.cdf(t, df)) < 1e-9


def test_paired_t_fixed_vectors():
    x = np.linspace(-1.0, 1.0, 20) ** 3 + 0.1 * np.sin(np.arange(20))
    y = x + 0.3 + 0.2 * np.cos(3 * np.arange(20))
    res = paired_t_test(x, y, "less")
    ref = stats.ttest_rel(x, y, alternative="less")
    assert res.df == 19
    assert abs(res.t_stat - ref.statistic) < 1e-9
    assert abs(res.p_value - ref.pvalue) < 1e-9
    for alt in ("greater", "two-sided"):
        assert abs(paired_t_test(x, y, alt).p_value - stats.ttest_rel(x, y, alternative=alt).pvalue) < 1e-9


def test_paired_t_hand_value():
    # tabulated one-sided 2.5% critical value at df = 19
    assert abs(student_t_cdf(-2.093024, 19) - 0.025) < 1e-7
    assert abs(student_t_cdf(-2.1009, 19) - stats.t.cdf(-2.1009, 19)) < 1e-9


def test_paired_t_zero_variance():
    with pytest.raises(ZeroVarianceDifferences):
        paired_t_test([1.0, 2.0, 3.0], [0.5, 1.5, 2.5])
    with pytest.raises(ValueError):
        paired_t_test([1.0], [2.0])


def test_paired_t_aligns_score_vectors():
    a = vec("T", ["a", "b", "c", "d"], [1.0, 2.0, 3.0, 5.0])
    b = vec("D", ["d", "c", "b", "a"], [5.5, 3.2, 2.9, 1.1])
    assert paired_t_test(a, b).t_stat == pytest.approx(
        stats.ttest_rel([1, 2, 3, 5], [1.1, 2.9, 3.2, 5.5]).statistic, abs=1e-12)
