"""Synthetic visit generator with known causal ground truth.

The generator runs the estimators' structural model forwards: arrivals come
from a nonhomogeneous Poisson clock profile, day intercepts and covariates
feed linear outcome equations, mediators sit on an explicit A -> M -> Y chain,
and binary outcomes use clamped linear-probability thresholding.  Potential
outcomes under both treatment arms are realized with shared noise, so the
per-visit effect is exact for continuous outcomes.  Toggles inject the
violations the diagnostics are meant to catch: a latent confounder on the
mediator chain, arrival-time manipulation across the cutoff, and covariate
jumps.

Randomness is organized as one substream per day (spawned from the scenario
seed), so generation order is reproducible day by day.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, asdict, replace
from datetime import date, timedelta

import numpy as np
import pandas as pd

from .errors import DataError
from .frame import (COMPLAINT_LEVELS, INSURANCE_LEVELS, RACE_LEVELS,
                    InterventionSchedule, default_schedule)

CONTINUOUS_OUTCOMES = ("time_to_roomed", "time_to_dispo")
BINARY_OUTCOMES = ("admitted", "revisit_30d")
ALL_OUTCOMES = CONTINUOUS_OUTCOMES + BINARY_OUTCOMES

PRESET_NAMES = ("paper_like", "null", "confounded_mediator", "manipulated", "heterogeneous")


@dataclass
class OutcomeSpec:
    """Structural equation for one outcome.

    ``gamma`` is the total effect at the cutoff (minutes, or probability for
    binary outcomes); ``psi`` the slope per hour of the clock profile at the
    cutoff.  Covariate coefficients apply to centered age (age - 50) and 0/1
    indicators for female, White race, and abdominal-pain complaint.
    ``congestion_effects`` are additive level effects (low, medium, high);
    ``interactions`` maps moderator name -> level -> additive gamma offset.
    """

    base: float
    gamma: float = 0.0
    psi: float = 0.0
    noise_sd: float = 1.0
    day_sd: float = 0.0
    binary: bool = False
    log_scale: bool = False
    age_coef: float = 0.0
    female_coef: float = 0.0
    white_coef: float = 0.0
    abdo_coef: float = 0.0
    congestion_effects: tuple = (0.0, 0.0, 0.0)
    interactions: dict = field(default_factory=dict)


@dataclass
class MediatorPath:
    """A -> M link for the order-time mediator and its M -> Y loading."""

    base: float = 35.0
    gamma_prime: float = 0.0
    psi: float = 0.0
    noise_sd: float = 20.0
    mu: float = 0.0                # loading of M on time_to_dispo
    confound_loading: float = 0.0  # lambda_M: latent U -> M


@dataclass
class Scenario:
    """Full ground-truth description of one synthetic study."""

    n_days: int
    start_date: str
    seed: int
    hourly_rate: list
    schedule: InterventionSchedule
    outcomes: dict               # name -> OutcomeSpec
    first_order: MediatorPath
    roomed_mu: float = 0.0       # loading of time_to_roomed on time_to_dispo
    confound_y: float = 0.0      # lambda_Y: latent U -> time_to_dispo
    slope_profile: str = "sine"  # "sine" (smooth on the clock circle) or "linear"
    congestion_hourly_mean: list = field(default_factory=lambda: [30.0] * 24)
    congestion_boundaries: tuple = (30.0, 41.0)
    providers_hourly: list = field(default_factory=lambda: [8.0] * 24)
    workload_noise_sd: float = 0.3
    p_no_order: float = 0.0
    p_missing_revisit: float = 0.0
    age_mean: float = 49.2
    age_sd: float = 19.2
    p_female: float = 0.547
    race_probs: dict = field(default_factory=dict)
    insurance_probs: dict = field(default_factory=dict)
    complaint_probs: dict = field(default_factory=dict)
    n_physicians: int = 40
    physician_sd: float = 0.0
    manipulation_frac: float = 0.0
    manipulation_window: float = 0.5
    covariate_jumps: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.hourly_rate) != 24 or any(r < 0 for r in self.hourly_rate):
            raise ValueError("hourly_rate must hold 24 non-negative values")
        if self.slope_profile not in ("sine", "linear"):
            raise ValueError("slope_profile must be 'sine' or 'linear'")
        if not 0.0 <= self.manipulation_frac <= 1.0:
            raise ValueError("manipulation_frac must lie in [0, 1]")

    def to_dict(self) -> dict:
        payload = asdict(self)
        payload["schedule"] = self.schedule.to_dict()
        return payload

    @classmethod
    def from_dict(cls, payload: dict) -> "Scenario":
        payload = dict(payload)
        payload["schedule"] = InterventionSchedule.from_dict(payload["schedule"])
        payload["outcomes"] = {k: OutcomeSpec(**v) for k, v in payload["outcomes"].items()}
        payload["first_order"] = MediatorPath(**payload["first_order"])
        payload["congestion_boundaries"] = tuple(payload["congestion_boundaries"])
        for spec in payload["outcomes"].values():
            spec.congestion_effects = tuple(spec.congestion_effects)
        return cls(**payload)


def _slope_value(s: np.ndarray, profile: str) -> np.ndarray:
    """Unit-slope time profile: equals s near 0; the sine variant is smooth
    around the whole clock circle."""
    if profile == "linear":
        return s
    return (12.0 / math.pi) * np.sin(math.pi * s / 12.0)


def _hourly_interp(values: list, clock: np.ndarray) -> np.ndarray:
    """Piecewise-linear interpolation of hourly knots around the 24h circle."""
    knots = np.asarray(list(values) + [values[0]], dtype=float)
    return np.interp(clock, np.arange(25.0), knots)


# ---------------------------------------------------------------------------
# Presets


def _paper_like_rate() -> list:
    # roughly 163 arrivals/day; flat across the cutoff hours (11:00-14:00) so
    # the arrival density is smooth at both regimes' start times, and thinner
    # around the window end than the window start
    return [4.0, 3.5, 3.0, 3.0, 3.0, 3.5,
            4.5, 5.5, 6.5, 7.5, 8.0, 8.0,
            8.0, 8.0, 9.0, 10.5, 11.5, 11.5,
            11.0, 10.0, 6.5, 6.0, 5.5, 4.5]


def _paper_like_outcomes() -> dict:
    return {
        "time_to_roomed": OutcomeSpec(
            base=30.0, gamma=4.6, psi=0.5, noise_sd=14.0, day_sd=3.0,
            age_coef=0.02, female_coef=0.3, white_coef=-0.5, abdo_coef=0.8,
            congestion_effects=(0.0, 2.0, 5.0)),
        "time_to_dispo": OutcomeSpec(
            base=234.0, gamma=-14.4, psi=-3.0, noise_sd=105.0, day_sd=12.0,
            age_coef=0.9, female_coef=4.0, white_coef=-5.0, abdo_coef=25.0,
            congestion_effects=(0.0, 15.0, 35.0)),
        "admitted": OutcomeSpec(
            base=0.245, gamma=-0.058, psi=0.004, day_sd=0.02, binary=True,
            age_coef=0.002, abdo_coef=0.03,
            congestion_effects=(0.0, 0.01, 0.03)),
        "revisit_30d": OutcomeSpec(
            base=0.119, gamma=-0.008, psi=0.0, day_sd=0.015, binary=True,
            age_coef=0.0005),
    }


def preset(name: str, seed: int = 0, n_days: int = 200) -> Scenario:
    """Documented ground-truth scenarios used across the test suite."""
    if name not in PRESET_NAMES:
        raise ValueError(f"unknown preset {name!r}; choose from {PRESET_NAMES}")

    base = Scenario(
        n_days=n_days,
        start_date="2017-04-01",
        seed=seed,
        hourly_rate=_paper_like_rate(),
        schedule=default_schedule(),
        outcomes=_paper_like_outcomes(),
        first_order=MediatorPath(base=35.0, gamma_prime=-6.0, psi=1.0,
                                 noise_sd=20.0, mu=1.0 / 3.0),
        roomed_mu=-0.5 / 4.6,
        confound_y=0.0,
        slope_profile="sine",
        congestion_hourly_mean=[22, 20, 18, 16, 15, 15, 16, 19, 23, 28, 32, 35,
                                37, 38, 40, 41, 42, 42, 41, 39, 35, 31, 27, 24],
        congestion_boundaries=(30.0, 41.0),
        providers_hourly=[6, 6, 6, 6, 6, 7, 9, 11, 13, 13, 13, 13,
                          13, 13, 13, 13, 13, 13, 13, 12, 11, 9, 8, 7],
        workload_noise_sd=0.3,
        p_no_order=0.036,
        p_missing_revisit=0.04,
        race_probs={"White": 0.793, "Black": 0.107, "Hispanic/Latino": 0.052,
                    "Asian": 0.028, "Other": 0.008,
                    "American Indian/Alaska Native": 0.005, "Unknown": 0.007},
        insurance_probs={"Commercial": 0.441, "Medicare": 0.301, "Medicaid": 0.142,
                         "Self paid": 0.039, "Unknown": 0.077},
        complaint_probs={"abdominal pain": 0.119, "chest pain": 0.077, "dyspnea": 0.054,
                         "fall": 0.028, "fever": 0.017, "other": 0.705},
    )
    if name == "paper_like":
        return base
    if name == "null":
        outcomes = {k: replace(v, gamma=0.0, interactions={}) for k, v in base.outcomes.items()}
        # tighter outcome noise keeps the mediator loading strongly identified,
        # so the product-of-coefficients test is calibrated rather than the
        # conservative weak-component regime
        outcomes["time_to_dispo"] = replace(outcomes["time_to_dispo"], noise_sd=20.0)
        return replace(base, outcomes=outcomes,
                       hourly_rate=[163.0 / 24.0] * 24,
                       first_order=replace(base.first_order, gamma_prime=0.0),
                       roomed_mu=0.0)
    if name == "confounded_mediator":
        # gamma_prime is set positive so the induced indirect-effect bias has
        # the same sign as lambda_M * lambda_Y
        return replace(base,
                       first_order=replace(base.first_order, gamma_prime=6.0,
                                           confound_loading=12.0),
                       confound_y=15.0)
    if name == "manipulated":
        return replace(base, manipulation_frac=0.10, manipulation_window=0.5)
    # heterogeneous: congestion moderates both waiting-time outcomes
    outcomes = dict(base.outcomes)
    outcomes["time_to_roomed"] = replace(
        outcomes["time_to_roomed"],
        interactions={"congestion": {"medium": -8.3, "high": -23.9}})
    outcomes["time_to_dispo"] = replace(
        outcomes["time_to_dispo"],
        interactions={"congestion": {"medium": 1.7, "high": 27.1}})
    return replace(base, outcomes=outcomes)


# ---------------------------------------------------------------------------
# Generation


def _day_draws(rng: np.random.Generator, scenario: Scenario, day_index: int) -> dict:
    """All raw randomness for one day, drawn in a fixed order."""
    counts = rng.poisson(np.asarray(scenario.hourly_rate, dtype=float))
    n = int(counts.sum())
    hours = np.repeat(np.arange(24.0), counts)
    clock = hours + np.floor(rng.random(n) * 60.0) / 60.0

    draws = {"clock": np.sort(clock)}
    draws["day_effects"] = {name: rng.normal(0.0, spec.day_sd) if spec.day_sd > 0 else 0.0
                            for name, spec in scenario.outcomes.items()}
    draws["age"] = np.clip(rng.normal(scenario.age_mean, scenario.age_sd, n), 18.0, 95.0)
    draws["female"] = rng.random(n) < scenario.p_female
    draws["race"] = _draw_levels(rng, scenario.race_probs or {"White": 1.0}, RACE_LEVELS, n)
    draws["insurance"] = _draw_levels(rng, scenario.insurance_probs or {"Unknown": 1.0},
                                      INSURANCE_LEVELS, n)
    draws["complaint"] = _draw_levels(rng, scenario.complaint_probs or {"other": 1.0},
                                      COMPLAINT_LEVELS, n)
    c_mean = _hourly_interp(scenario.congestion_hourly_mean, draws["clock"])
    draws["congestion"] = rng.poisson(c_mean).astype(float)
    providers = _hourly_interp(scenario.providers_hourly, draws["clock"])
    draws["workload"] = np.maximum(
        draws["congestion"] / providers + rng.normal(0.0, scenario.workload_noise_sd, n), 0.0)
    draws["physician"] = rng.integers(0, scenario.n_physicians, n)
    draws["u"] = rng.normal(0.0, 1.0, n)
    draws["eps_fo"] = rng.normal(0.0, scenario.first_order.noise_sd, n)
    draws["eps"] = {name: rng.normal(0.0, spec.noise_sd, n)
                    for name, spec in scenario.outcomes.items() if not spec.binary}
    draws["uniform"] = {name: rng.random(n)
                        for name, spec in scenario.outcomes.items() if spec.binary}
    draws["no_order"] = rng.random(n) < scenario.p_no_order
    draws["missing_revisit"] = rng.random(n) < scenario.p_missing_revisit
    draws["manip"] = rng.random(n)
    return draws


def _draw_levels(rng, probs: dict, order: list, n: int) -> np.ndarray:
    labels = [lv for lv in order if lv in probs] or list(probs)
    p = np.asarray([probs[lv] for lv in labels], dtype=float)
    p = p / p.sum()
    idx = rng.choice(len(labels), size=n, p=p)
    return np.asarray(labels, dtype=object)[idx]


def _congestion_level(values: np.ndarray, boundaries: tuple) -> np.ndarray:
    q1, q2 = boundaries
    return np.where(values <= q1, 0, np.where(values <= q2, 1, 2))


def _interaction_offset(spec: OutcomeSpec, cong_level: np.ndarray) -> np.ndarray:
    """Per-visit additive gamma offset from the interaction map."""
    offset = np.zeros(len(cong_level))
    for moderator, levels in spec.interactions.items():
        if moderator != "congestion":
            raise ValueError(f"unsupported interaction moderator {moderator!r}")
        table = np.array([levels.get("low", 0.0), levels.get("medium", 0.0),
                          levels.get("high", 0.0)])
        offset += table[cong_level]
    return offset


def simulate(scenario: Scenario) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Generate one synthetic study: (visit table, ground-truth table).

    The visit table uses the same schema the loader ingests; the truth table
    carries both potential outcomes (and potential mediators, probabilities,
    and the latent confounder) row-aligned with the visits.
    """
    if sum(scenario.hourly_rate) == 0 and scenario.n_days > 0:
        warnings.warn("arrival rate integrates to zero; no visits will be generated")

    start = date.fromisoformat(scenario.start_date)
    streams = np.random.SeedSequence(scenario.seed).spawn(scenario.n_days + 1)
    chunks = []
    for d in range(scenario.n_days):
        rng = np.random.default_rng(streams[d])
        draws = _day_draws(rng, scenario, d)
        draws["date"] = start + timedelta(days=d)
        draws["day_index"] = d
        chunks.append(draws)

    global_rng = np.random.default_rng(streams[-1])
    phys_effects = {
        name: (global_rng.normal(0.0, scenario.physician_sd, scenario.n_physicians)
               if scenario.physician_sd > 0 and not spec.binary
               else np.zeros(scenario.n_physicians))
        for name, spec in scenario.outcomes.items()
    }

    return _assemble(scenario, chunks, phys_effects)


def _assemble(scenario, chunks, phys_effects) -> tuple[pd.DataFrame, pd.DataFrame]:
    def cat(key):
        return np.concatenate([c[key] for c in chunks]) if chunks else np.array([])

    n_per_day = [len(c["clock"]) for c in chunks]
    n = int(sum(n_per_day))
    if n == 0:
        from .frame import _empty_visit_table
        return _empty_visit_table(), pd.DataFrame()

    clock = cat("clock")
    dates = np.concatenate([np.repeat(c["date"], k) for c, k in zip(chunks, n_per_day)])
    day_index = np.concatenate([np.repeat(c["day_index"], k) for c, k in zip(chunks, n_per_day)])
    day_effect = {
        name: np.concatenate([np.repeat(c["day_effects"][name], k)
                              for c, k in zip(chunks, n_per_day)])
        for name in scenario.outcomes
    }

    age = cat("age")
    female = cat("female").astype(bool)
    race = cat("race")
    insurance = cat("insurance")
    complaint = cat("complaint")
    congestion = cat("congestion")
    workload = cat("workload")
    physician = cat("physician").astype(int)
    u = cat("u")
    eps_fo = cat("eps_fo")
    eps = {name: cat_nested(chunks, "eps", name) for name in scenario.outcomes
           if not scenario.outcomes[name].binary}
    uniform = {name: cat_nested(chunks, "uniform", name) for name in scenario.outcomes
               if scenario.outcomes[name].binary}
    no_order = cat("no_order").astype(bool)
    missing_revisit = cat("missing_revisit").astype(bool)
    manip_u = cat("manip")

    # forcing relative to each day's window start (the simulator's own truth)
    starts = np.array([scenario.schedule.regime_for(d).start_hour for d in dates])
    lengths = np.array([scenario.schedule.regime_for(d).window_length for d in dates])
    delta = np.mod(clock - starts, 24.0)
    s = np.where(delta > 12.0, delta - 24.0, delta)
    a = (delta < lengths).astype(int)

    if "age" in scenario.covariate_jumps:
        age = age + scenario.covariate_jumps["age"] * a

    s_prof = _slope_value(s, scenario.slope_profile)
    cong_level = _congestion_level(congestion, scenario.congestion_boundaries)

    def covariate_part(spec: OutcomeSpec) -> np.ndarray:
        ce = np.asarray(spec.congestion_effects, dtype=float)
        return (spec.age_coef * (age - 50.0)
                + spec.female_coef * female
                + spec.white_coef * (race == "White")
                + spec.abdo_coef * (complaint == "abdominal pain")
                + ce[cong_level])

    truth = {
        "visit_id": np.array([f"v{d:04d}_{i:04d}" for d, i in
                              zip(day_index, _within_day_counter(n_per_day))]),
        "day_key": dates, "s": s, "a": a, "u": u,
    }

    # mediator: time to first order.  Synthetic times stay linear in their
    # predictors (no floor at 0) so the ground-truth identities are exact;
    # the noise tails can dip slightly negative.
    fo = scenario.first_order
    fo_m0 = fo.base + fo.psi * s_prof + fo.confound_loading * u + eps_fo
    fo_m1 = fo_m0 + fo.gamma_prime

    # time to be roomed (outcome and mediator)
    rm_spec = scenario.outcomes["time_to_roomed"]
    rm_gamma = rm_spec.gamma + _interaction_offset(rm_spec, cong_level)
    rm_y0 = (rm_spec.base + covariate_part(rm_spec) + rm_spec.psi * s_prof
             + day_effect["time_to_roomed"] + phys_effects["time_to_roomed"][physician]
             + eps["time_to_roomed"])
    rm_y1 = rm_y0 + rm_gamma

    # time to disposition: direct part is backed out so the per-visit total
    # effect equals gamma plus this outcome's own interaction offsets exactly
    dp_spec = scenario.outcomes["time_to_dispo"]
    dp_total = dp_spec.gamma + _interaction_offset(dp_spec, cong_level)
    dp_direct = dp_total - fo.mu * (fo_m1 - fo_m0) - scenario.roomed_mu * (rm_y1 - rm_y0)
    dp_core = (dp_spec.base + covariate_part(dp_spec) + dp_spec.psi * s_prof
               + scenario.confound_y * u
               + day_effect["time_to_dispo"] + phys_effects["time_to_dispo"][physician]
               + eps["time_to_dispo"])
    dp_y0 = dp_core + fo.mu * fo_m0 + scenario.roomed_mu * rm_y0
    dp_y1 = dp_core + dp_direct + fo.mu * fo_m1 + scenario.roomed_mu * rm_y1

    if dp_spec.log_scale or rm_spec.log_scale:
        # multiplicative variant: the linear predictor lives on the log scale;
        # mediator loadings are not supported there
        if fo.mu != 0.0 or scenario.roomed_mu != 0.0:
            raise ValueError("log-scale outcomes require zero mediator loadings")
        if rm_spec.log_scale:
            rm_y0, rm_y1 = np.exp(rm_y0), np.exp(rm_y0 + rm_gamma)
        if dp_spec.log_scale:
            dp_y0 = np.exp(dp_core)
            dp_y1 = np.exp(dp_core + dp_total)

    truth.update({
        "time_to_first_order__m0": fo_m0, "time_to_first_order__m1": fo_m1,
        "time_to_roomed__y0": rm_y0, "time_to_roomed__y1": rm_y1,
        "time_to_dispo__y0": dp_y0, "time_to_dispo__y1": dp_y1,
    })

    binary_truth = {}
    for name in BINARY_OUTCOMES:
        spec = scenario.outcomes[name]
        lin = (spec.base + covariate_part(spec) + spec.psi * s_prof + day_effect[name])
        p0 = np.clip(lin, 0.0, 1.0)
        p1 = np.clip(lin + spec.gamma + _interaction_offset(spec, cong_level), 0.0, 1.0)
        y0 = (uniform[name] < p0).astype(float)
        y1 = (uniform[name] < p1).astype(float)
        truth[f"{name}__p0"], truth[f"{name}__p1"] = p0, p1
        truth[f"{name}__y0"], truth[f"{name}__y1"] = y0, y1
        binary_truth[name] = (y0, y1)

    # arrival-time manipulation, applied last: a fraction of just-before-
    # cutoff arrivals is reflected across s = 0 with their already-realized
    # potential outcomes, so the relocation itself is the only change
    if scenario.manipulation_frac > 0:
        flip = (s < 0) & (s > -scenario.manipulation_window) \
            & (manip_u < scenario.manipulation_frac)
        clock = np.where(flip, clock - 2.0 * s, clock)
        delta = np.mod(clock - starts, 24.0)
        s = np.where(delta > 12.0, delta - 24.0, delta)
        a = (delta < lengths).astype(int)
    truth["s"], truth["a"] = s, a

    binary_obs = {name: np.where(a == 1, y1, y0)
                  for name, (y0, y1) in binary_truth.items()}
    observed_fo = np.where(a == 1, fo_m1, fo_m0)
    observed_fo = np.where(no_order, np.nan, observed_fo)
    observed_rev = np.where(missing_revisit, np.nan, binary_obs["revisit_30d"])

    arrival = pd.to_datetime(dates) + pd.to_timedelta(np.round(clock * 60.0), unit="m")
    visits = pd.DataFrame({
        "visit_id": truth["visit_id"],
        "arrival": arrival,
        "day_key": dates,
        "physician_id": np.array([f"md{k:03d}" for k in physician]),
        "age": age,
        "sex": np.where(female, "female", "male"),
        "race": race,
        "insurance": insurance,
        "complaint": complaint,
        "congestion": congestion,
        "workload": workload,
        "time_to_roomed": np.where(a == 1, rm_y1, rm_y0),
        "time_to_dispo": np.where(a == 1, dp_y1, dp_y0),
        "admitted": binary_obs["admitted"],
        "revisit_30d": observed_rev,
        "arrival_mode": "walk_in",
        "transfer_flag": 0.0,
        "first_order_time": observed_fo,
    })
    return visits, pd.DataFrame(truth)


def cat_nested(chunks, outer, name):
    return np.concatenate([c[outer][name] for c in chunks])


def _within_day_counter(n_per_day):
    return np.concatenate([np.arange(k) for k in n_per_day]) if n_per_day else np.array([])


def oracle_ate(truth: pd.DataFrame, window: float = 0.25,
               outcomes: tuple = ALL_OUTCOMES) -> dict:
    """Ground-truth average effect at the cutoff: mean potential-outcome
    contrast over |s| <= window.

    Continuous outcomes contrast realized potential outcomes (their shared
    noise cancels); binary outcomes contrast potential probabilities, which is
    exact when the probability clamp is inactive.
    """
    near = truth.loc[np.abs(truth["s"]) <= window]
    if not len(near):
        raise DataError(f"no visits within |s| <= {window}")
    out = {}
    for name in outcomes:
        if f"{name}__p1" in near.columns:
            out[name] = float((near[f"{name}__p1"] - near[f"{name}__p0"]).mean())
        else:
            out[name] = float((near[f"{name}__y1"] - near[f"{name}__y0"]).mean())
    return out
