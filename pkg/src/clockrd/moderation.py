"""Effect-modification analysis: per-level effects and joint interaction tests.

Moderators are pre-declared categorical codings (congestion or workload
tertiles, day of week, schedule regime).  Each analysis augments the cutoff
design with level indicators and level x treatment interactions; per-level
effects come from linear combinations with delta-method standard errors, and
a joint Wald test asks whether all of a moderator's interactions are zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import stats

from . import lmm, rd
from .errors import DataError
from .frame import InterventionSchedule, tertile_encode

DOW_LEVELS = ("Sunday", "Monday", "Tuesday", "Wednesday", "Thursday", "Friday", "Saturday")


@dataclass(frozen=True)
class ModeratorSpec:
    """How to derive one moderator's levels from the visit table.

    ``source`` is one of ``congestion_tertile``, ``workload_tertile``,
    ``day_of_week``, ``regime``, or ``column:<name>`` for a ready-made
    categorical column.  The first level is the reference.
    """

    name: str
    source: str
    boundaries: tuple | None = None
    levels: tuple | None = None


def congestion_moderator(boundaries: tuple | None = None) -> ModeratorSpec:
    return ModeratorSpec("congestion", "congestion_tertile", boundaries=boundaries)


def workload_moderator(boundaries: tuple | None = None) -> ModeratorSpec:
    return ModeratorSpec("workload", "workload_tertile", boundaries=boundaries)


def day_of_week_moderator() -> ModeratorSpec:
    return ModeratorSpec("day_of_week", "day_of_week")


def regime_moderator() -> ModeratorSpec:
    return ModeratorSpec("regime", "regime")


def build_moderator(rows: pd.DataFrame, mspec: ModeratorSpec,
                    schedule: InterventionSchedule | None = None
                    ) -> tuple[np.ndarray, tuple, tuple | None]:
    """Per-row level labels, the ordered level set, and (for tertile sources)
    the boundaries actually used.

    Tertile boundaries default to the (bandwidth-restricted) sample passed in,
    matching how the analysis sample is formed; pass explicit boundaries to
    override.
    """
    if mspec.source == "congestion_tertile":
        codes, bounds = tertile_encode(rows["congestion"], mspec.boundaries)
        return np.asarray(codes, dtype=object), ("low", "medium", "high"), bounds
    if mspec.source == "workload_tertile":
        codes, bounds = tertile_encode(rows["workload"], mspec.boundaries)
        return np.asarray(codes, dtype=object), ("low", "medium", "high"), bounds
    if mspec.source == "day_of_week":
        labels = pd.to_datetime(rows["arrival"]).dt.day_name().to_numpy(dtype=object)
        return labels, DOW_LEVELS, None
    if mspec.source == "regime":
        if schedule is None:
            raise DataError("regime moderator requires the intervention schedule")
        dates = pd.to_datetime(rows["arrival"]).dt.date
        starts = [r.effective_from for r in schedule.regimes]
        labels = np.array([f"from_{max(d for d in starts if d <= day).isoformat()}"
                           for day in dates], dtype=object)
        levels = tuple(f"from_{d.isoformat()}" for d in starts)
        return labels, levels, None
    if mspec.source.startswith("column:"):
        col = mspec.source.split(":", 1)[1]
        labels = rows[col].to_numpy(dtype=object)
        levels = mspec.levels or tuple(sorted(pd.unique(labels)))
        return labels, tuple(levels), None
    raise ValueError(f"unknown moderator source {mspec.source!r}")


@dataclass
class ModerationResult:
    moderator: str
    reference: str
    levels: tuple
    per_level: dict          # level -> {estimate, lo, hi, se}
    interactions: dict       # non-reference level -> {estimate, lo, hi, se}
    joint_statistic: float
    joint_df: int
    joint_p: float
    boundaries: tuple | None = None
    dropped: list = field(default_factory=list)
    fit: lmm.MixedFit | None = None

    def to_rows(self) -> list[dict]:
        rows = []
        for level in self.levels:
            entry = {"moderator": self.moderator, "level": level,
                     "reference": level == self.reference,
                     "joint_p": self.joint_p}
            eff = self.per_level.get(level)
            if eff:
                entry.update({"effect": eff["estimate"], "effect_lo": eff["lo"],
                              "effect_hi": eff["hi"]})
            inter = self.interactions.get(level)
            if inter:
                entry.update({
                    "interaction": inter["estimate"],
                    "interaction_lo": inter["lo"], "interaction_hi": inter["hi"],
                    "formatted": rd.format_estimate(inter["estimate"], inter["lo"], inter["hi"]),
                })
            rows.append(entry)
        return rows


def _moderator_columns(labels: np.ndarray, levels: tuple, treated: np.ndarray,
                       name: str, include_interactions: list | None = None
                       ) -> list[tuple[str, np.ndarray]]:
    cols = []
    for level in levels[1:]:
        ind = (labels == level).astype(float)
        cols.append((f"{name}_{level}", ind))
    targets = include_interactions if include_interactions is not None else [("treated", treated)]
    for tag, vec in targets:
        for level in levels[1:]:
            ind = (labels == level).astype(float)
            cols.append((f"{tag}:{name}_{level}", ind * vec))
    return cols


_lincomb = lmm.linear_combination

_Z95 = stats.norm.ppf(0.975)


def _interval(est: float, se: float, scale: float = 1.0) -> dict:
    return {"estimate": est * scale, "se": se * scale,
            "lo": (est - _Z95 * se) * scale, "hi": (est + _Z95 * se) * scale}


def moderate_one(forced: pd.DataFrame, spec: rd.RdSpec, moderator: ModeratorSpec,
                 schedule: InterventionSchedule | None = None) -> ModerationResult:
    """One-at-a-time moderation: level mains + level x treatment interactions
    added to the cutoff model."""
    results = moderate_full(forced, spec, [moderator], schedule=schedule)
    return results[moderator.name]


def moderate_full(forced: pd.DataFrame, spec: rd.RdSpec, moderators: list[ModeratorSpec],
                  schedule: InterventionSchedule | None = None) -> dict:
    """All moderators in a single fit; per-moderator joint Wald tests come
    from the shared coefficient covariance.

    Interactions whose level x treatment cell is empty (or collinear with the
    rest of the design) are pruned with a warning and reported per moderator.
    """
    if not moderators:
        raise ValueError("need at least one moderator")
    rows, _, _ = rd._prepare_rows(forced, spec)
    base = rd.build_design(rows, spec)
    treated = rows["a"].to_numpy(dtype=float)

    extra_cols, meta = [], {}
    for mspec in moderators:
        labels, levels, bounds = build_moderator(rows, mspec, schedule=schedule)
        missing = pd.isna(labels)
        if missing.any():
            raise DataError(f"moderator {mspec.name!r} undefined for {int(missing.sum())} rows")
        extra_cols.extend(_moderator_columns(labels, levels, treated, mspec.name))
        meta[mspec.name] = (labels, levels, bounds)

    x = np.column_stack([base.x] + [v for _, v in extra_cols])
    columns = list(base.columns) + [k for k, _ in extra_cols]
    design = lmm.DesignMatrix(x=x, columns=columns, y=base.y,
                              groups=base.groups, levels=base.levels)
    fit = lmm.fit_lmm(design, protected=("treated",))
    scale = 100.0 if spec.transform == "linear_probability" else 1.0

    out = {}
    for mspec in moderators:
        labels, levels, bounds = meta[mspec.name]
        inter_names = [f"treated:{mspec.name}_{lv}" for lv in levels[1:]]
        kept = [nm for nm in inter_names if nm in fit.columns]
        dropped = [nm for nm in inter_names if nm not in fit.columns]
        if kept:
            wald = lmm.wald_test(fit, kept)
            joint = (wald.statistic, wald.df, wald.pvalue)
        else:
            joint = (np.nan, 0, np.nan)

        interactions, per_level = {}, {}
        gamma, gamma_se = _lincomb(fit, [("treated", 1.0)])
        per_level[levels[0]] = _interval(gamma, gamma_se, scale)
        for level in levels[1:]:
            nm = f"treated:{mspec.name}_{level}"
            if nm not in fit.columns:
                continue
            est, se = _lincomb(fit, [(nm, 1.0)])
            interactions[level] = _interval(est, se, scale)
            eff, eff_se = _lincomb(fit, [("treated", 1.0), (nm, 1.0)])
            per_level[level] = _interval(eff, eff_se, scale)

        out[mspec.name] = ModerationResult(
            moderator=mspec.name, reference=levels[0], levels=levels,
            per_level=per_level, interactions=interactions,
            joint_statistic=joint[0], joint_df=joint[1], joint_p=joint[2],
            boundaries=bounds, dropped=dropped + list(fit.dropped), fit=fit)
    return out


def moderation_table(results: dict) -> pd.DataFrame:
    rows = []
    for result in results.values():
        rows.extend(result.to_rows())
    return pd.DataFrame(rows)
