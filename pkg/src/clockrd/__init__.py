"""Causal effect estimation for daily clock-triggered interventions.

Sharp regression discontinuity around the daily start (or end) of an
intervention window, fit inside linear mixed models with day and physician
random intercepts, plus bandwidth cross-validation, moderation, mediation,
manipulation diagnostics, and a synthetic ground-truth simulator.
"""

from .errors import (ClockRdError, DataError, EstimabilityError,
                     EstimationError, SchemaError)
from .frame import (InterventionSchedule, Regime, apply_exclusions,
                    bandwidth_filter, compute_clock_forcing, compute_forcing,
                    default_schedule, default_schema, load_visits,
                    standard_exclusions, summarize, tertile_encode,
                    write_visits)
from .lmm import DesignMatrix, MixedFit, confint, fit_lmm, predict, wald_test
from .rd import (RdEstimate, RdSpec, build_design, end_window_effect,
                 estimate_effect, estimate_table, format_estimate,
                 percent_change, placebo_scan)
from .crossval import CvGrid, CvResult, loocv
from .moderation import (ModeratorSpec, ModerationResult, congestion_moderator,
                         day_of_week_moderator, moderate_full, moderate_one,
                         moderation_table, regime_moderator, workload_moderator)
from .mediation import (MediationResult, MediationSpec, mediate,
                        mediate_by_level, mediation_table)
from .diagnostics import (BinnedSeries, DensityTest, arrival_histogram,
                          bin_means, bonferroni, covariate_balance,
                          density_jump_test)
from .simulate import (MediatorPath, OutcomeSpec, Scenario, oracle_ate,
                       preset, simulate)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
