import warnings

import numpy as np
import pandas as pd
import pytest

import clockrd as cr
from clockrd import lmm, rd
from clockrd.errors import DataError
from conftest import make_forced_frame


def _spec(**kw):
    defaults = dict(bandwidth=1.0, covariates=(), outcome="y")
    defaults.update(kw)
    return cr.RdSpec(**defaults)


def test_design_row_at_cutoff_linear_separate():
    frame = make_forced_frame(1, 1, [2.0], [3.0],
                              s_left=np.array([-0.4]), s_right=np.array([0.0]))
    frame["age"] = [40.0, 55.0]
    design = cr.build_design(frame, _spec(form="linear_separate", covariates=("age",)))
    assert design.columns == ["(intercept)", "s_ctrl", "s_trt", "treated", "age"]
    np.testing.assert_allclose(design.x[1], [1.0, 0.0, 0.0, 1.0, 55.0])


def test_linear_shared_nests_separate():
    frame = make_forced_frame(30, 30, np.zeros(30), np.zeros(30))
    shared = cr.build_design(frame, _spec(form="linear_shared"))
    separate = cr.build_design(frame, _spec(form="linear_separate"))
    s_col = shared.x[:, shared.columns.index("s")]
    summed = (separate.x[:, separate.columns.index("s_ctrl")]
              + separate.x[:, separate.columns.index("s_trt")])
    np.testing.assert_array_equal(s_col, summed)


def test_design_requires_both_sides():
    frame = make_forced_frame(0, 5, [], np.ones(5))
    with pytest.raises(DataError):
        cr.build_design(frame, _spec())


def test_separate_slopes_recover_shared_truth():
    # truth has one shared slope; the separate-slope fit should find equal
    # slopes (difference inside its own 95% interval) in >= 90% of runs
    hits = 0
    for seed in range(200):
        rng = np.random.default_rng(seed)
        n = 400
        s = np.concatenate([-rng.uniform(0, 1, n // 2), rng.uniform(0, 1, n // 2)])
        a = (s >= 0).astype(int)
        y = 1.0 + 2.0 * s + 0.5 * a + rng.normal(0, 1.0, n)
        frame = pd.DataFrame({"s": s, "a": a, "y": y,
                              "day_key": np.arange(n) % 25})
        est = cr.estimate_effect(frame, _spec(form="linear_separate"))
        diff, se = lmm.linear_combination(est.fit, [("s_trt", 1.0), ("s_ctrl", -1.0)])
        if abs(diff) <= 1.96 * se:
            hits += 1
    assert hits >= 180


def test_constant_outcome_gives_zero_gamma():
    frame = make_forced_frame(40, 40, np.full(40, 7.0), np.full(40, 7.0))
    est = cr.estimate_effect(frame, _spec())
    assert est.gamma == pytest.approx(0.0, abs=1e-10)
    assert est.n_left == 40 and est.n_right == 40


def test_intercept_shift_leaves_gamma():
    rng = np.random.default_rng(4)
    frame = make_forced_frame(100, 100, rng.normal(5, 1, 100), rng.normal(6, 1, 100))
    e1 = cr.estimate_effect(frame, _spec())
    shifted = frame.assign(y=frame["y"] + 1000.0)
    e2 = cr.estimate_effect(shifted, _spec())
    assert e2.gamma == pytest.approx(e1.gamma, abs=1e-9)


def test_relabel_negates_gamma():
    rng = np.random.default_rng(5)
    frame = make_forced_frame(80, 80, rng.normal(5, 1, 80), rng.normal(6.5, 1, 80))
    e1 = cr.estimate_effect(frame, _spec())
    flipped = frame.assign(s=-frame["s"], a=1 - frame["a"])
    e2 = cr.estimate_effect(flipped, _spec())
    assert e2.gamma == pytest.approx(-e1.gamma, abs=1e-10)


def test_percent_change_values():
    assert cr.percent_change(0.0) == 0.0
    assert cr.percent_change(np.log(2.0)) == pytest.approx(100.0)
    assert rd._round_half_up(cr.percent_change(-0.129), 1) == "-12.1"


def test_log_transform_excludes_nonpositive_and_reports_percent():
    rng = np.random.default_rng(6)
    y_left = np.exp(rng.normal(3, 0.3, 200))
    y_right = np.exp(rng.normal(3.2, 0.3, 200))
    frame = make_forced_frame(200, 200, y_left, y_right)
    frame.loc[frame.index[:3], "y"] = 0.0
    est = cr.estimate_effect(frame, _spec(transform="log"))
    assert est.n_dropped == 3
    assert est.percent is not None
    assert est.percent[0] == pytest.approx(cr.percent_change(est.gamma))
    assert any("non-positive" in note for note in est.notes)


def test_linear_probability_scaling_and_warning():
    rng = np.random.default_rng(7)
    y_left = (rng.random(300) < 0.3).astype(float)
    y_right = (rng.random(300) < 0.24).astype(float)
    frame = make_forced_frame(300, 300, y_left, y_right)
    est = cr.estimate_effect(frame, _spec(transform="linear_probability"))
    # estimates are reported in percentage points
    raw = est.fit.coef("treated")
    assert est.gamma == pytest.approx(100.0 * raw)
    assert est.lp_out_of_range is not None

    # a strong continuous covariate pushes fitted probabilities outside (0, 1)
    wild = np.linspace(-40, 40, 600)
    y_wild = (rng.random(600) < np.clip(0.5 + wild / 60.0, 0, 1)).astype(float)
    frame2 = frame.assign(wild=wild, y=y_wild)
    with pytest.warns(UserWarning, match="outside"):
        est2 = cr.estimate_effect(frame2, _spec(transform="linear_probability",
                                                covariates=("wild",)))
    assert est2.lp_out_of_range > 0


def test_linear_probability_requires_binary():
    frame = make_forced_frame(10, 10, np.full(10, 0.5), np.full(10, 0.7))
    with pytest.raises(DataError):
        cr.estimate_effect(frame, _spec(transform="linear_probability"))


def test_covariate_independent_of_treatment_barely_moves_gamma():
    diffs, ses = [], []
    for seed in range(60):
        rng = np.random.default_rng(100 + seed)
        frame = make_forced_frame(150, 150, rng.normal(5, 1, 150), rng.normal(5, 1, 150))
        frame["noise_cov"] = rng.normal(size=300)
        e0 = cr.estimate_effect(frame, _spec())
        e1 = cr.estimate_effect(frame, _spec(covariates=("noise_cov",)))
        diffs.append(e1.gamma - e0.gamma)
        ses.append(e1.se)
    diffs = np.array(diffs)
    # centered at zero and small relative to the estimate's own SE
    assert abs(diffs.mean()) <= 3 * diffs.std(ddof=1) / np.sqrt(len(diffs))
    assert np.mean(np.abs(diffs)) < np.mean(ses)


def test_placebo_scan_matches_primary_at_true_anchor(small_study):
    # all days in the fixture sit in the first regime, whose window starts at
    # a fixed 13:00, so the 13.0 placebo anchor is the same computation
    visits = small_study["visits"]
    schedule = small_study["scenario"].schedule
    assert max(visits["day_key"]) < schedule.regimes[1].effective_from
    forced = cr.compute_forcing(visits, schedule)
    spec = cr.RdSpec(outcome="time_to_dispo")
    primary = cr.estimate_effect(forced, spec)
    scan = cr.placebo_scan(visits, [13.0], spec)
    assert scan[0]["error"] is None
    assert scan[0]["estimate"].gamma == pytest.approx(primary.gamma, abs=1e-10)


def test_placebo_scan_isolates_failures(small_study):
    visits = small_study["visits"]
    daytime = visits[pd.to_datetime(visits["arrival"]).dt.hour.between(9, 17)]
    spec = cr.RdSpec(outcome="time_to_dispo", bandwidth=1.0)
    scan = cr.placebo_scan(daytime, [3.0, 12.0], spec)
    by_anchor = {entry["anchor_hour"]: entry for entry in scan}
    assert by_anchor[3.0]["error"] is not None
    assert by_anchor[12.0]["error"] is None


def test_end_window_anchor_validation(small_study):
    spec = cr.RdSpec(outcome="time_to_dispo")
    with pytest.raises(DataError, match="window_end"):
        cr.end_window_effect(small_study["forced"], spec)


def test_end_window_zero_effect_covers_zero():
    scenario = cr.preset("null", seed=5, n_days=120)
    visits, _ = cr.simulate(scenario)
    forced_end = cr.compute_forcing(visits, scenario.schedule, anchor="window_end")
    est = cr.end_window_effect(forced_end, cr.RdSpec(outcome="time_to_dispo"))
    assert est.ci95[0] <= 0.0 <= est.ci95[1]
    assert est.anchor == "window_end"
    assert any("treated minus control" in note for note in est.notes)


def test_estimate_table_layout(small_study):
    forced = small_study["forced"]
    rows = [cr.estimate_effect(forced, cr.RdSpec(outcome="time_to_roomed")),
            cr.estimate_effect(forced, cr.RdSpec(outcome="admitted",
                                                 transform="linear_probability"))]
    table = cr.estimate_table(rows)
    assert list(table["outcome"]) == ["time_to_roomed", "admitted"]
    for col in ("estimate", "lo", "hi", "p", "n_left", "n_right", "formatted"):
        assert col in table.columns
    assert "(" in table.loc[0, "formatted"]
