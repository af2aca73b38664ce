import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import linprog

from residiff.multimodality import (
    arc_fraction,
    combine_pvalues,
    dip_pvalue,
    dip_statistic,
    histogram2d_csv,
    segment_and_test,
    uniform_null,
    write_report,
)


def dip_by_lp(samples):
    """Dip as a linear program: the closest piecewise-linear unimodal CDF, one LP per mode position.

    Variables are the CDF values just before (L) and at (R) each distinct
    sample; only the mode may jump. Left of the mode the slopes increase,
    right of it they decrease.
    """
    x = np.sort(np.asarray(samples, float))
    n = len(x)
    u, cnt = np.unique(x, return_counts=True)
    m = len(u)
    hi = np.cumsum(cnt) / n
    lo = hi - cnt / n
    dx = np.diff(u)
    nv, E = 2 * m + 1, 2 * m
    best = np.inf
    for j in range(m):
        A, b, Aeq = [], [], []
        for i in range(m):
            for var, tgt in ((i, lo[i]), (m + i, hi[i])):
                r = np.zeros(nv)
                r[var], r[E] = 1, -1
                A.append(r), b.append(tgt)
                r = np.zeros(nv)
                r[var], r[E] = -1, -1
                A.append(r), b.append(-tgt)
            r = np.zeros(nv)
            r[i], r[m + i] = 1, -1
            (A.append(r), b.append(0)) if i == j else Aeq.append(r)
        for i in range(m - 1):
            r = np.zeros(nv)
            r[m + i], r[i + 1] = 1, -1
            A.append(r), b.append(0)
        for i in range(m - 2):
            r = np.zeros(nv)
            r[i + 1] += 1 / dx[i]
            r[m + i] -= 1 / dx[i]
            r[i + 2] -= 1 / dx[i + 1]
            r[m + i + 1] += 1 / dx[i + 1]
            if i + 1 < j:
                A.append(r), b.append(0)
            elif i + 1 > j:
                A.append(-r), b.append(0)
        res = linprog(np.eye(nv)[E], A_ub=np.array(A), b_ub=b, A_eq=np.array(Aeq) if Aeq else None,
                      b_eq=np.zeros(len(Aeq)) if Aeq else None, bounds=[(0, 1)] * (2 * m) + [(0, None)],
                      method="highs")
        best = min(best, res.fun)
    return best


def chi2_sf_even(x, df):
    """Upper tail of chi-square with even df, as a finite Poisson sum."""
    k = df // 2
    return math.exp(-x / 2) * sum((x / 2) ** i / math.factorial(i) for i in range(k))


def norm_sf(z):
    return 0.5 * math.erfc(z / math.sqrt(2))


# -- dip statistic ---------------------------------------------------------------------

def test_dip_uniform_grid_is_floor():
    assert dip_statistic(np.arange(1, 101)) == pytest.approx(1 / 200, abs=1e-15)


def test_dip_two_point_mass_is_maximal():
    assert dip_statistic([0.0] * 50 + [1.0] * 50) == pytest.approx(0.25, abs=1e-15)


def test_dip_large_gaussian_small():
    assert dip_statistic(np.random.default_rng(0).standard_normal(10_000)) < 0.02


@pytest.mark.parametrize("seed", range(8))
def test_dip_matches_linear_program(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 40))
    if seed % 2:
        x = rng.standard_normal(n)
    else:
        x = np.concatenate([rng.normal(-2, 0.5, n // 2), rng.normal(2, 0.5, n - n // 2)])
    assert dip_statistic(x) == pytest.approx(dip_by_lp(x), abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(-10_000, 10_000), min_size=4, max_size=60))
def test_property_dip_bounds_and_affine_invariance(xs):
    # samples on a 0.1 grid so the affine map cannot round distinct values into ties
    x = np.array(xs) / 10.0
    d = dip_statistic(x)
    assert 1 / (2 * len(x)) - 1e-12 <= d <= 0.25 + 1e-12
    assert dip_statistic(2.5 * x - 7.0) == pytest.approx(d, abs=1e-12)
    assert dip_statistic(-x) == pytest.approx(d, abs=1e-12)


def test_dip_depends_on_spacings_not_only_ranks():
    # the unimodal fit is piecewise linear in x, so a nonlinear increasing map can move the dip
    x = np.array([0.0, 1.0, -2.0, -3.0])
    assert dip_statistic(x) == pytest.approx(1 / 6, abs=1e-12)
    assert dip_statistic(np.exp(x)) == pytest.approx(dip_by_lp(np.exp(x)), abs=1e-12)
    assert dip_statistic(np.exp(x)) == pytest.approx(1 / 8, abs=1e-12)


def test_dip_input_checks():
    with pytest.raises(ValueError):
        dip_statistic([1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        dip_statistic([1.0, 2.0, np.nan, 4.0])


# -- p-values --------------------------------------------------------------------------

def test_dip_pvalue_degenerate_and_reproducible():
    r = dip_pvalue([2.0, 2.0, 2.0, 2.0], bootstrap_count=500)
    assert r.dip == pytest.approx(1 / 8) and r.p_value == pytest.approx(1.0)
    x = np.random.default_rng(3).standard_normal(60)
    assert dip_pvalue(x, 500, seed=5) == dip_pvalue(x, 500, seed=5)
    null = uniform_null(60, 500, 5)
    assert np.all(np.diff(null) >= 0) and null.size == 500


def test_dip_pvalue_separates_gaussian_and_mixture():
    rng = np.random.default_rng(11)
    assert dip_pvalue(rng.standard_normal(500)).p_value > 0.05
    mix = np.concatenate([rng.normal(-3, 0.5, 250), rng.normal(3, 0.5, 250)])
    assert dip_pvalue(mix).p_value < 0.01


def test_fisher_matches_closed_form_oracle():
    ps = [0.01, 0.04, 0.5]
    stat = -2 * sum(math.log(p) for p in ps)
    assert stat == pytest.approx(17.034, abs=1e-3)
    oracle = chi2_sf_even(stat, 6)
    assert oracle == pytest.approx(0.00914, abs=1e-4)
    assert combine_pvalues(ps, "fisher").value == pytest.approx(oracle, rel=1e-10)


def test_stouffer_and_tippett_oracles():
    ps = [0.2, 0.5, 0.03, 0.7]
    from statistics import NormalDist

    z = sum(NormalDist().inv_cdf(1 - p) for p in ps) / 2.0
    assert combine_pvalues(ps, "stouffer").value == pytest.approx(norm_sf(z), rel=1e-9)
    assert combine_pvalues(ps, "tippett").value == pytest.approx(1 - 0.97 ** 4, rel=1e-12)
    assert combine_pvalues([0.123], "tippett").value == pytest.approx(0.123, rel=1e-12)


def test_combination_edge_cases():
    assert combine_pvalues([1.0, 1.0, 1.0], "fisher").value == pytest.approx(1.0)
    res = combine_pvalues([0.0, 0.5], "fisher")
    assert res.floored and 0.0 <= res.value < 1e-290
    for bad in ([], [1.2], [-0.1], [np.nan]):
        with pytest.raises(ValueError):
            combine_pvalues(bad)
    with pytest.raises(ValueError):
        combine_pvalues([0.5], "pearson")


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(1e-6, 1.0), min_size=1, max_size=8), st.integers(0, 7), st.floats(0.1, 0.99),
       st.sampled_from(["fisher", "stouffer", "tippett"]))
def test_property_combination_monotone(ps, i, shrink, method):
    i %= len(ps)
    lower = list(ps)
    lower[i] *= shrink
    a, b = combine_pvalues(ps, method).value, combine_pvalues(lower, method).value
    assert 0.0 <= b <= a + 1e-12 <= 1.0 + 1e-12


# -- segmentation ----------------------------------------------------------------------

def _runs(n_runs, bimodal_dims, seed):
    rng = np.random.default_rng(seed)
    t = np.linspace(0, 1, 400)
    p_d = np.stack([t, np.zeros_like(t), np.ones_like(t)], axis=1)
    runs = []
    for r in range(n_runs):
        h = rng.normal(0, 0.3, (len(t), 3))
        for d in bimodal_dims:
            h[:, d] += np.where(rng.random(len(t)) < 0.5, -2.0, 2.0)
        runs.append((p_d, h))
    return runs


def test_injected_bimodality_detected():
    report = segment_and_test(_runs(10, [1], 0), n_segments=20, bootstrap_count=500)
    fisher = report["combined"]["fisher"]
    assert fisher[1] < 0.01
    assert fisher[0] > 0.01 and fisher[2] > 0.01
    assert not report["low_n"] and len(report["segments"]) == 20


def test_unimodal_segments_are_calibrated():
    # the uniform reference is conservative, so null p-values sit at or above uniform
    report = segment_and_test(_runs(10, [], 1), n_segments=40, bootstrap_count=500)
    p = np.sort([row["p_0"] for row in report["segments"]])
    frac_small = np.mean(p < 0.05)
    assert frac_small <= 0.1


def test_single_run_flags_low_n(tmp_path):
    report = segment_and_test(_runs(1, [], 2), n_segments=100, bootstrap_count=200)
    assert report["low_n"]
    write_report(report, tmp_path / "r.json", tmp_path / "r.csv")
    rows = (tmp_path / "r.csv").read_text().splitlines()
    assert rows[0] == "method,dim_0,dim_1,dim_2" and len(rows) == 4
    with pytest.raises(ValueError):
        segment_and_test([])


def test_sparse_segments_skipped():
    t = np.linspace(0, 1, 30)
    p_d = np.stack([t, 0 * t, 0 * t], axis=1)
    report = segment_and_test([(p_d, np.random.default_rng(0).normal(size=(30, 3)))], n_segments=5,
                              bootstrap_count=100)
    assert len(report["skipped"]) == 0 and len(report["segments"]) == 5
    report = segment_and_test([(p_d, np.zeros((30, 3)) + np.arange(30)[:, None])], n_segments=15,
                              bootstrap_count=100)
    assert len(report["skipped"]) == 15


def test_arc_fraction_and_histogram(tmp_path):
    p = np.array([[0, 0, 0], [1, 0, 0], [1, 3, 0]], float)
    assert np.allclose(arc_fraction(p), [0, 0.25, 1.0])
    assert np.allclose(arc_fraction(np.zeros((3, 3))), [0, 0.5, 1])
    rng = np.random.default_rng(0)
    hist = histogram2d_csv(tmp_path / "h.csv", rng.normal(size=1000), rng.normal(size=1000), bins=10)
    assert hist.shape == (10, 10)
    assert len((tmp_path / "h.csv").read_text().splitlines()) == 11
