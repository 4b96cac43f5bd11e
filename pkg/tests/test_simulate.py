import json
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest
from scipy import stats

import clockrd as cr
from clockrd.errors import DataError
from clockrd.simulate import ALL_OUTCOMES, BINARY_OUTCOMES


def _flat_scenario(seed=0, n_days=20, **kw):
    base = cr.preset("null", seed=seed, n_days=n_days)
    return replace(base, **kw)


def _zero_everything(seed=0, n_days=10):
    scenario = cr.preset("null", seed=seed, n_days=n_days)
    outcomes = {
        name: replace(spec, gamma=0.0, psi=0.0, noise_sd=0.0, day_sd=0.0,
                      age_coef=0.0, female_coef=0.0, white_coef=0.0, abdo_coef=0.0,
                      congestion_effects=(0.0, 0.0, 0.0))
        for name, spec in scenario.outcomes.items()
    }
    return replace(scenario, outcomes=outcomes,
                   first_order=replace(scenario.first_order, gamma_prime=0.0,
                                       psi=0.0, noise_sd=0.0, mu=0.0),
                   roomed_mu=0.0, workload_noise_sd=0.0)


def test_zero_effect_zero_noise_scenario():
    visits, truth = cr.simulate(_zero_everything())
    for name in ("time_to_roomed", "time_to_dispo"):
        np.testing.assert_array_equal(truth[f"{name}__y0"], truth[f"{name}__y1"])
    for name in BINARY_OUTCOMES:
        np.testing.assert_array_equal(truth[f"{name}__p0"], truth[f"{name}__p1"])
    ate = cr.oracle_ate(truth, window=12.0)
    assert all(v == 0.0 for v in ate.values())


def test_paper_like_preset_injects_headline_effects():
    scenario = cr.preset("paper_like")
    assert scenario.outcomes["time_to_roomed"].gamma == 4.6
    assert scenario.outcomes["time_to_dispo"].gamma == -14.4
    assert scenario.outcomes["admitted"].gamma == -0.058
    assert scenario.first_order.gamma_prime == -6.0
    assert scenario.first_order.mu == pytest.approx(1 / 3)
    assert sum(scenario.hourly_rate) == pytest.approx(163.0, abs=3.0)


def test_preset_toggles():
    null = cr.preset("null")
    assert all(spec.gamma == 0.0 for spec in null.outcomes.values())
    conf = cr.preset("confounded_mediator")
    assert conf.first_order.confound_loading * conf.confound_y != 0.0
    manip = cr.preset("manipulated")
    assert manip.manipulation_frac == 0.10
    het = cr.preset("heterogeneous")
    assert het.outcomes["time_to_roomed"].interactions["congestion"]["medium"] == -8.3
    with pytest.raises(ValueError):
        cr.preset("nope")


def test_same_seed_bit_identical_different_seed_not():
    scenario = cr.preset("paper_like", seed=9, n_days=12)
    v1, t1 = cr.simulate(scenario)
    v2, t2 = cr.simulate(scenario)
    pd.testing.assert_frame_equal(v1, v2)
    pd.testing.assert_frame_equal(t1, t2)
    v3, _ = cr.simulate(cr.preset("paper_like", seed=10, n_days=12))
    assert not v1["age"].equals(v3["age"])


def test_consistency_observed_equals_potential(small_study):
    visits, truth = small_study["visits"], small_study["truth"]
    a = truth["a"].to_numpy()
    for name in ("time_to_roomed", "time_to_dispo"):
        expected = np.where(a == 1, truth[f"{name}__y1"], truth[f"{name}__y0"])
        np.testing.assert_array_equal(visits[name].to_numpy(), expected)
    admitted = np.where(a == 1, truth["admitted__y1"], truth["admitted__y0"])
    np.testing.assert_array_equal(visits["admitted"].to_numpy(), admitted)
    rev = np.where(a == 1, truth["revisit_30d__y1"], truth["revisit_30d__y0"])
    observed = visits["revisit_30d"].to_numpy()
    mask = ~np.isnan(observed)
    np.testing.assert_array_equal(observed[mask], rev[mask])
    fo = np.where(a == 1, truth["time_to_first_order__m1"], truth["time_to_first_order__m0"])
    observed_fo = visits["first_order_time"].to_numpy()
    mask = ~np.isnan(observed_fo)
    np.testing.assert_array_equal(observed_fo[mask], fo[mask])


def test_oracle_ate_exact_for_constant_effects(small_study):
    truth = small_study["truth"]
    scenario = small_study["scenario"]
    ate = cr.oracle_ate(truth, window=0.25)
    assert ate["time_to_roomed"] == pytest.approx(scenario.outcomes["time_to_roomed"].gamma,
                                                  abs=1e-9)
    assert ate["time_to_dispo"] == pytest.approx(scenario.outcomes["time_to_dispo"].gamma,
                                                 abs=1e-9)
    assert ate["admitted"] == pytest.approx(scenario.outcomes["admitted"].gamma, abs=1e-9)
    with pytest.raises(DataError):
        cr.oracle_ate(truth[truth["s"] > 50.0], window=0.25)


def test_oracle_ate_heterogeneous_matches_analytic_mixture():
    scenario = cr.preset("heterogeneous", seed=21, n_days=300)
    _, truth = cr.simulate(scenario)
    ate = cr.oracle_ate(truth, window=0.1)

    # analytic mixture: congestion is Poisson with the interpolated noon mean,
    # level shares come from its CDF at the scenario boundaries
    near = truth[np.abs(truth["s"]) <= 0.1]
    spec = scenario.outcomes["time_to_roomed"]
    q1, q2 = scenario.congestion_boundaries
    # noon sits between regimes 12:00 and 13:00 starts; use both clock means
    weights = np.zeros(3)
    for day, part in near.groupby("day_key"):
        start = scenario.schedule.regime_for(day).start_hour
        mean = np.interp(start, np.arange(25.0),
                         np.asarray(scenario.congestion_hourly_mean + [scenario.congestion_hourly_mean[0]]))
        p_low = stats.poisson.cdf(q1, mean)
        p_med = stats.poisson.cdf(q2, mean) - p_low
        weights += len(part) * np.array([p_low, p_med, 1 - p_low - p_med])
    weights /= weights.sum()
    offsets = np.array([0.0, spec.interactions["congestion"]["medium"],
                        spec.interactions["congestion"]["high"]])
    expected = spec.gamma + weights @ offsets

    n = len(near)
    spread = np.std([spec.gamma + o for o in offsets])
    assert ate["time_to_roomed"] == pytest.approx(expected, abs=4 * spread / np.sqrt(n) + 0.2)


def test_day_variance_recovered():
    scenario = _flat_scenario(seed=2, n_days=400)
    scenario = replace(scenario, outcomes={
        **scenario.outcomes,
        "time_to_dispo": replace(scenario.outcomes["time_to_dispo"],
                                 noise_sd=5.0, day_sd=10.0)})
    visits, _ = cr.simulate(scenario)
    forced = cr.compute_forcing(visits, scenario.schedule)
    est = cr.estimate_effect(forced, cr.RdSpec(bandwidth=3.0, outcome="time_to_dispo"))
    tau2 = est.fit.var_components["day"]
    assert tau2 == pytest.approx(100.0, rel=0.10)


def test_manipulation_shifts_mass_and_keeps_potentials():
    base = cr.preset("manipulated", seed=13, n_days=150)
    visits, truth = cr.simulate(base)
    clean_visits, clean_truth = cr.simulate(replace(base, manipulation_frac=0.0))
    s, s0 = truth["s"].to_numpy(), clean_truth["s"].to_numpy()
    window = base.manipulation_window
    assert ((s0 >= -window) & (s0 < 0)).sum() > ((s >= -window) & (s < 0)).sum()
    # reflected rows land just right of the cutoff; everyone else is unmoved
    moved = s != s0
    np.testing.assert_allclose(s[moved], -s0[moved], atol=1e-9)
    np.testing.assert_array_equal(truth["time_to_dispo__y1"], clean_truth["time_to_dispo__y1"])


def test_covariate_jump_injected():
    scenario = replace(_flat_scenario(seed=7, n_days=250), covariate_jumps={"age": -1.9})
    visits, truth = cr.simulate(scenario)
    forced = cr.compute_forcing(visits, scenario.schedule)
    near, _ = cr.bandwidth_filter(forced, 1.0)
    gap = (near.loc[near["a"] == 1, "age"].mean()
           - near.loc[near["a"] == 0, "age"].mean())
    assert gap == pytest.approx(-1.9, abs=1.5)


def test_zero_rate_warns():
    scenario = replace(_flat_scenario(n_days=2), hourly_rate=[0.0] * 24)
    with pytest.warns(UserWarning, match="zero"):
        visits, truth = cr.simulate(scenario)
    assert len(visits) == 0


def test_scenario_json_roundtrip():
    scenario = cr.preset("heterogeneous", seed=17, n_days=25)
    payload = json.loads(json.dumps(scenario.to_dict()))
    again = cr.Scenario.from_dict(payload)
    assert again.schedule == scenario.schedule
    assert again.outcomes["time_to_dispo"].gamma == scenario.outcomes["time_to_dispo"].gamma
    assert again.outcomes["time_to_roomed"].interactions == \
        scenario.outcomes["time_to_roomed"].interactions
    v1, _ = cr.simulate(scenario)
    v2, _ = cr.simulate(again)
    pd.testing.assert_frame_equal(v1, v2)


def test_visits_roundtrip_through_loader(tmp_path, small_study):
    path = tmp_path / "visits.csv"
    cr.write_visits(small_study["visits"], path)
    table, rejects = cr.load_visits(path)
    assert len(rejects) == 0
    assert len(table) == len(small_study["visits"])
    np.testing.assert_allclose(table["age"].to_numpy(),
                               small_study["visits"]["age"].to_numpy(), rtol=1e-9)
    assert (table["arrival"] == small_study["visits"]["arrival"]).all()


def test_visit_schema_matches_loader_contract(small_study):
    from clockrd.frame import VISIT_COLUMNS
    assert list(small_study["visits"].columns) == VISIT_COLUMNS
    assert set(small_study["visits"]["sex"].unique()) <= {"female", "male"}
    assert (small_study["visits"]["congestion"] >= 0).all()
