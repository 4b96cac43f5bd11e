from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

import clockrd as cr
from clockrd import diagnostics


def _uniform_forced(seed=0, n=4000, half_width=3.0):
    rng = np.random.default_rng(seed)
    s = rng.uniform(-half_width, half_width, n)
    return pd.DataFrame({"s": s, "a": (s >= 0).astype(int),
                         "day_key": rng.integers(0, 50, n)})


def test_histogram_empty_table():
    empty = pd.DataFrame({"s": pd.Series(dtype=float)})
    series = cr.arrival_histogram(empty, widths=(1.0,))[1.0]
    assert (series.values == 0).all()
    assert series.side_totals == (0, 0)


def test_histogram_default_widths_counts_and_alignment():
    forced = _uniform_forced()
    out = cr.arrival_histogram(forced)
    assert set(out) == {0.25, 1.0, 2.0, 3.0}
    for width, series in out.items():
        assert series.values.sum() == len(forced)
        assert 0.0 in series.edges
        assert np.allclose(np.diff(series.edges), width)


def test_histogram_uniform_within_poisson_band():
    forced = _uniform_forced(seed=1, n=6000)
    series = cr.arrival_histogram(forced, widths=(0.5,))[0.5]
    mean = series.values.mean()
    assert np.abs(series.values - mean).max() < 4.0 * np.sqrt(mean)


def test_density_test_argument_and_small_sample():
    forced = _uniform_forced(seed=2)
    with pytest.raises(ValueError):
        cr.density_jump_test(forced, delta=0.0)
    tiny = forced.iloc[:10]
    result = cr.density_jump_test(tiny)
    assert not result.conclusive
    assert np.isnan(result.pvalue)


def test_density_test_null_rejection_rate():
    rejections = 0
    reps = 200
    for seed in range(reps):
        forced = _uniform_forced(seed=1000 + seed, n=3000)
        if cr.density_jump_test(forced).pvalue < 0.05:
            rejections += 1
    assert rejections <= 0.10 * reps


def test_density_test_detects_reflected_mass():
    rng = np.random.default_rng(4)
    s = rng.uniform(-3, 3, 8000)
    flip = (s < 0) & (s > -0.5) & (rng.random(8000) < 0.15)
    s = np.where(flip, -s, s)
    forced = pd.DataFrame({"s": s, "a": (s >= 0).astype(int)})
    result = cr.density_jump_test(forced)
    assert result.conclusive
    assert result.pvalue < 0.05


def test_bonferroni_matches_hand_arithmetic():
    assert diagnostics.bonferroni(0.017, 4) == 0.068
    assert diagnostics.bonferroni(0.4, 4) == 1.0


def test_covariate_balance_columns_and_independence(small_study):
    forced = small_study["forced"]
    table = cr.covariate_balance(forced, cr.RdSpec())
    assert list(table["covariate"]) == ["age", "sex", "race", "complaint"]
    assert (table["p_bonferroni"] >= table["p_raw"] - 1e-15).all()
    assert (table["p_bonferroni"] <= 1.0).all()


def test_balance_null_rejection_rate():
    rejections = total = 0
    for seed in range(40):
        scenario = cr.preset("null", seed=2000 + seed, n_days=60)
        visits, _ = cr.simulate(scenario)
        forced = cr.compute_forcing(visits, scenario.schedule)
        table = cr.covariate_balance(forced, cr.RdSpec())
        rejections += int((table["p_bonferroni"] < 0.05).sum())
        total += len(table)
    assert rejections / total <= 0.05


def test_balance_smooth_function_of_s_shrinks_with_n():
    # a deterministic no-jump function of s inside the model span: the fitted
    # discontinuity is pure noise and must shrink as the sample grows
    gammas = {}
    rng = np.random.default_rng(3)
    for n_days in (40, 640):
        scenario = cr.preset("null", seed=7, n_days=n_days)
        visits, _ = cr.simulate(scenario)
        forced = cr.compute_forcing(visits, scenario.schedule)
        smooth = 0.7 * forced["s"] + rng.normal(0, 0.5, len(forced))
        forced = forced.assign(smooth=smooth)
        spec = cr.RdSpec(covariates=())
        table = cr.covariate_balance(forced, spec, covariates=("smooth",))
        gammas[n_days] = abs(float(table["estimate"].iloc[0]))
    assert gammas[640] < gammas[40]


def test_bin_means_constant_outcome_and_alignment():
    forced = _uniform_forced(seed=5, n=2000, half_width=1.0)
    forced["y"] = 7.5
    series, overlay = cr.bin_means(forced, "y", spec=cr.RdSpec(covariates=(), outcome="y"))
    present = series.ns > 0
    np.testing.assert_allclose(series.values[present], 7.5)
    assert 0.0 in series.edges
    assert set(overlay) == {"left", "right"}
    frame = series.to_frame()
    assert list(frame.columns) == ["bin_lo", "bin_hi", "value", "n", "se"]


def test_bin_means_show_the_jump():
    rng = np.random.default_rng(6)
    n = 6000
    s = rng.uniform(-1, 1, n)
    a = (s >= 0).astype(int)
    y = 10.0 + 2.0 * s - 14.4 * a + rng.normal(0, 5.0, n)
    forced = pd.DataFrame({"s": s, "a": a, "y": y, "day_key": rng.integers(0, 40, n)})
    series, overlay = cr.bin_means(forced, "y", spec=cr.RdSpec(covariates=(), outcome="y"))
    left_fit = overlay["left"]["fitted"][-1]     # fitted value approaching 0 from the left
    first_right_bin = series.values[np.searchsorted(series.edges, 0.0)]
    assert first_right_bin - left_fit == pytest.approx(-14.4, abs=1.5)
