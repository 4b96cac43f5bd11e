"""Natural direct / indirect effect estimation through a two-equation
linear system.

The mediator and the outcome are each regressed on the cutoff design (equal
slopes on both sides) over the identical row subset; the indirect effect is
the product of the treatment-to-mediator coefficient and the
mediator-to-outcome loading, with a delta-method interval by default and an
optional seeded Monte-Carlo interval.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from scipy import stats

from . import lmm, rd
from .errors import DataError, EstimationError
from .frame import InterventionSchedule
from .moderation import ModeratorSpec, _lincomb, _moderator_columns, build_moderator

MEDIATORS = ("time_to_first_order", "time_to_roomed")
# mediator name -> visit-table column holding it
MEDIATOR_COLUMNS = {"time_to_first_order": "first_order_time",
                    "time_to_roomed": "time_to_roomed"}
_Z95 = stats.norm.ppf(0.975)


@dataclass(frozen=True)
class MediationSpec:
    """One mediation analysis: mediator, outcome, and the base cutoff spec
    (whose polynomial form is forced to shared slopes)."""

    mediator: str = "time_to_first_order"
    outcome: str = "time_to_dispo"
    spec: rd.RdSpec = None
    by_level: ModeratorSpec | None = None
    mc_ci: bool = False
    mc_draws: int = 10_000
    mc_seed: int = 0

    def __post_init__(self):
        base = self.spec or rd.RdSpec()
        object.__setattr__(self, "spec",
                           replace(base, form="linear_shared", outcome=self.outcome))


@dataclass
class MediationResult:
    mediator: str
    outcome: str
    group: str                      # "all" or a moderator level
    nde: float
    nde_ci: tuple
    nie: float
    nie_ci: tuple
    gamma_prime: float
    gamma_prime_se: float
    mu: float
    mu_se: float
    n_used: int
    n_excluded: int
    nie_mc_ci: tuple | None = None

    def to_row(self) -> dict:
        return {
            "mediator": self.mediator, "outcome": self.outcome, "group": self.group,
            "direct": self.nde, "direct_lo": self.nde_ci[0], "direct_hi": self.nde_ci[1],
            "indirect": self.nie, "indirect_lo": self.nie_ci[0], "indirect_hi": self.nie_ci[1],
            "direct_formatted": rd.format_estimate(self.nde, *self.nde_ci),
            "indirect_formatted": rd.format_estimate(self.nie, *self.nie_ci),
            "n_used": self.n_used, "n_excluded": self.n_excluded,
        }


def _nie_interval(gamma_prime, v_gamma_prime, mu, v_mu) -> tuple[float, tuple]:
    """Delta-method interval for the product of two (independently fitted)
    coefficients: se^2 = mu^2 Var(g') + g'^2 Var(mu)."""
    nie = gamma_prime * mu
    se = float(np.sqrt(max(mu * mu * v_gamma_prime + gamma_prime * gamma_prime * v_mu, 0.0)))
    return nie, (nie - _Z95 * se, nie + _Z95 * se)


def _nie_mc_interval(gamma_prime, se_g, mu, se_m, draws: int, seed: int) -> tuple:
    rng = np.random.Generator(np.random.Philox(key=seed))
    product = rng.normal(gamma_prime, se_g, draws) * rng.normal(mu, se_m, draws)
    lo, hi = np.quantile(product, [0.025, 0.975])
    return (float(lo), float(hi))


def _prepare(forced: pd.DataFrame, mspec: MediationSpec) -> tuple[pd.DataFrame, int, int]:
    """Bandwidth-filter and drop rows unusable for either equation; both
    models must see the identical subset or the decomposition breaks."""
    from .frame import bandwidth_filter
    subset, _ = bandwidth_filter(forced, mspec.spec.bandwidth)
    n_input = len(subset)
    med_col = MEDIATOR_COLUMNS.get(mspec.mediator, mspec.mediator)
    usable = subset[mspec.outcome].notna() & subset[med_col].notna()
    for token in mspec.spec.covariates:
        col = {"age": "age", "sex": "sex", "race": "race", "complaint": "complaint"}.get(token, token)
        if col in subset.columns:
            usable &= subset[col].notna()
    rows = subset.loc[usable].reset_index(drop=True)
    return rows, len(rows), n_input - len(rows)


def _fit_pair(rows: pd.DataFrame, mspec: MediationSpec,
              schedule: InterventionSchedule | None = None, level_spec=None):
    """Fit the mediator and outcome equations on the same rows; optionally
    augmented with moderator mains, moderator x treatment, and (outcome side
    only) moderator x mediator interactions."""
    spec = mspec.spec
    base = rd.build_design(rows, spec)
    med_col = MEDIATOR_COLUMNS.get(mspec.mediator, mspec.mediator)
    mediator_vals = rows[med_col].to_numpy(dtype=float)
    if np.ptp(mediator_vals) == 0.0:
        raise EstimationError(f"mediator {mspec.mediator!r} is constant; "
                              "its outcome loading is unidentifiable")
    treated = rows["a"].to_numpy(dtype=float)

    med_extra, out_extra = [], []
    levels = None
    if level_spec is not None:
        labels, levels, _ = build_moderator(rows, level_spec, schedule=schedule)
        med_extra = _moderator_columns(labels, levels, treated, level_spec.name)
        out_extra = _moderator_columns(
            labels, levels, treated, level_spec.name,
            include_interactions=[("treated", treated), ("mediator", mediator_vals)])

    def assemble(extra, y, with_mediator):
        cols = [("mediator", mediator_vals)] if with_mediator else []
        x = np.column_stack([base.x] + [v for _, v in cols] + [v for _, v in extra])
        names = list(base.columns) + [k for k, _ in cols] + [k for k, _ in extra]
        return lmm.DesignMatrix(x=x, columns=names, y=y,
                                groups=base.groups, levels=base.levels)

    med_design = assemble(med_extra, mediator_vals, with_mediator=False)
    out_design = assemble(out_extra, rows[mspec.outcome].to_numpy(dtype=float),
                          with_mediator=True)
    med_fit = lmm.fit_lmm(med_design, protected=("treated",))
    out_fit = lmm.fit_lmm(out_design, protected=("treated", "mediator"))
    if "mediator" not in out_fit.columns:
        raise EstimationError("mediator column dropped as collinear in the outcome model")
    return med_fit, out_fit, levels


def mediate(forced: pd.DataFrame, mspec: MediationSpec) -> MediationResult:
    """Overall natural direct and indirect effects.

    Rows with an undefined mediator are excluded and counted; both equations
    are fit on the identical remaining subset.
    """
    rows, n_used, n_excluded = _prepare(forced, mspec)
    if n_used == 0:
        raise DataError("no rows with a defined mediator within the bandwidth")
    med_fit, out_fit, _ = _fit_pair(rows, mspec)

    gamma_prime, gp_se = _lincomb(med_fit, [("treated", 1.0)])
    mu, mu_se = _lincomb(out_fit, [("mediator", 1.0)])
    gamma, g_se = _lincomb(out_fit, [("treated", 1.0)])

    nie, nie_ci = _nie_interval(gamma_prime, gp_se ** 2, mu, mu_se ** 2)
    result = MediationResult(
        mediator=mspec.mediator, outcome=mspec.outcome, group="all",
        nde=gamma, nde_ci=(gamma - _Z95 * g_se, gamma + _Z95 * g_se),
        nie=nie, nie_ci=nie_ci,
        gamma_prime=gamma_prime, gamma_prime_se=gp_se, mu=mu, mu_se=mu_se,
        n_used=n_used, n_excluded=n_excluded)
    if mspec.mc_ci:
        result.nie_mc_ci = _nie_mc_interval(gamma_prime, gp_se, mu, mu_se,
                                            mspec.mc_draws, mspec.mc_seed)
    return result


def mediate_by_level(forced: pd.DataFrame, mspec: MediationSpec,
                     schedule: InterventionSchedule | None = None) -> list[MediationResult]:
    """Mediation within each level of a moderator.

    Both equations gain moderator mains and moderator x treatment terms; the
    outcome equation additionally gains moderator x mediator terms, so each
    level has its own treatment-to-mediator jump and mediator loading.
    """
    if mspec.by_level is None:
        return [mediate(forced, mspec)]
    rows, n_used, n_excluded = _prepare(forced, mspec)
    if n_used == 0:
        raise DataError("no rows with a defined mediator within the bandwidth")
    med_fit, out_fit, levels = _fit_pair(rows, mspec, schedule=schedule,
                                         level_spec=mspec.by_level)

    name = mspec.by_level.name
    results = []
    for level in levels:
        gp_terms = [("treated", 1.0)]
        mu_terms = [("mediator", 1.0)]
        g_terms = [("treated", 1.0)]
        if level != levels[0]:
            ta = f"treated:{name}_{level}"
            tm = f"mediator:{name}_{level}"
            if ta not in med_fit.columns or tm not in out_fit.columns:
                continue  # empty cell: level skipped (pruned with warning upstream)
            gp_terms.append((ta, 1.0))
            g_terms.append((ta, 1.0))
            mu_terms.append((tm, 1.0))
        gamma_prime, gp_se = _lincomb(med_fit, gp_terms)
        mu, mu_se = _lincomb(out_fit, mu_terms)
        gamma, g_se = _lincomb(out_fit, g_terms)
        nie, nie_ci = _nie_interval(gamma_prime, gp_se ** 2, mu, mu_se ** 2)
        results.append(MediationResult(
            mediator=mspec.mediator, outcome=mspec.outcome, group=level,
            nde=gamma, nde_ci=(gamma - _Z95 * g_se, gamma + _Z95 * g_se),
            nie=nie, nie_ci=nie_ci,
            gamma_prime=gamma_prime, gamma_prime_se=gp_se, mu=mu, mu_se=mu_se,
            n_used=n_used, n_excluded=n_excluded))
    return results


def mediation_table(results: list[MediationResult]) -> pd.DataFrame:
    return pd.DataFrame([r.to_row() for r in results])
