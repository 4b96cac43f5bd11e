"""Visit-table ingestion, cohort exclusions, and forcing-variable construction.

Visits live in pandas DataFrames with a fixed set of canonical columns.  The
daily intervention window is described by a dated schedule; the signed
hours-to-window-anchor column ``s`` and the treatment indicator ``a`` are
derived from it.  All transformations here are pure: inputs are never mutated.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from datetime import date, datetime

import numpy as np
import pandas as pd

from .errors import DataError, SchemaError

# Canonical column order for a visit table.  Optional outcomes are NaN when
# missing; they are never encoded with sentinel numbers.
VISIT_COLUMNS = [
    "visit_id",
    "arrival",
    "day_key",
    "physician_id",
    "age",
    "sex",
    "race",
    "insurance",
    "complaint",
    "congestion",
    "workload",
    "time_to_roomed",
    "time_to_dispo",
    "admitted",
    "revisit_30d",
    "arrival_mode",
    "transfer_flag",
    "first_order_time",
]

RACE_LEVELS = [
    "White",
    "Black",
    "Hispanic/Latino",
    "Asian",
    "Other",
    "American Indian/Alaska Native",
    "Unknown",
]
COMPLAINT_LEVELS = ["abdominal pain", "chest pain", "dyspnea", "fall", "fever", "other"]
INSURANCE_LEVELS = ["Commercial", "Medicare", "Medicaid", "Self paid", "Unknown"]

_NUMERIC_FIELDS = {
    "age",
    "congestion",
    "workload",
    "time_to_roomed",
    "time_to_dispo",
    "admitted",
    "revisit_30d",
    "transfer_flag",
    "first_order_time",
}
_REQUIRED_FIELDS = ["visit_id", "arrival"]

_SEX_ALIASES = {
    "f": "female",
    "female": "female",
    "w": "female",
    "m": "male",
    "male": "male",
}


def default_schema() -> dict:
    """Column map plus categorical alias maps used by :func:`load_visits`.

    ``columns`` maps logical field names to CSV header names; ``aliases`` maps
    raw cell text (stripped, lowercased) to canonical category labels.
    """
    return {
        "columns": {name: name for name in VISIT_COLUMNS if name != "day_key"},
        "aliases": {
            "sex": dict(_SEX_ALIASES),
            "race": {lv.lower(): lv for lv in RACE_LEVELS},
            "insurance": {lv.lower(): lv for lv in INSURANCE_LEVELS},
            "complaint": {lv.lower(): lv for lv in COMPLAINT_LEVELS},
        },
    }


# ---------------------------------------------------------------------------
# Intervention schedule


@dataclass(frozen=True)
class Regime:
    """One dated daily window: [start_hour, end_hour) on every day from
    ``effective_from`` until the next regime takes over."""

    effective_from: date
    start_hour: float
    end_hour: float

    def __post_init__(self):
        if not 0.0 <= self.start_hour < self.end_hour <= 24.0:
            raise ValueError(
                f"regime window must satisfy 0 <= start < end <= 24, "
                f"got [{self.start_hour}, {self.end_hour})"
            )

    @property
    def window_length(self) -> float:
        return self.end_hour - self.start_hour


@dataclass(frozen=True)
class InterventionSchedule:
    """Ordered, non-overlapping regimes; any date on or after the first
    effective date resolves to exactly one regime."""

    regimes: tuple[Regime, ...]

    def __post_init__(self):
        if not self.regimes:
            raise ValueError("schedule needs at least one regime")
        dates = [r.effective_from for r in self.regimes]
        if sorted(dates) != dates or len(set(dates)) != len(dates):
            raise ValueError("regimes must be sorted by effective_from with no duplicates")

    def regime_for(self, day: date) -> Regime:
        if day < self.regimes[0].effective_from:
            raise DataError(f"date {day.isoformat()} precedes the first schedule regime")
        chosen = self.regimes[0]
        for regime in self.regimes:
            if regime.effective_from <= day:
                chosen = regime
        return chosen

    def to_dict(self) -> dict:
        return {
            "regimes": [
                {
                    "effective_from": r.effective_from.isoformat(),
                    "start": _hours_to_clock(r.start_hour),
                    "end": _hours_to_clock(r.end_hour),
                }
                for r in self.regimes
            ]
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "InterventionSchedule":
        regimes = tuple(
            Regime(
                effective_from=date.fromisoformat(r["effective_from"]),
                start_hour=_clock_to_hours(r["start"]),
                end_hour=_clock_to_hours(r["end"]),
            )
            for r in payload["regimes"]
        )
        return cls(regimes=regimes)

    @classmethod
    def from_json(cls, text: str) -> "InterventionSchedule":
        return cls.from_dict(json.loads(text))


def _clock_to_hours(clock: str | float) -> float:
    if isinstance(clock, (int, float)):
        return float(clock)
    hh, mm = clock.split(":")
    return int(hh) + int(mm) / 60.0


def _hours_to_clock(hours: float) -> str:
    minutes = int(round(hours * 60))
    return f"{minutes // 60:02d}:{minutes % 60:02d}"


def default_schedule() -> InterventionSchedule:
    """Study-site schedule: 13:00-22:00 daily from 2016-11-01, moving to
    12:00-21:00 from 2017-07-01."""
    return InterventionSchedule(
        regimes=(
            Regime(date(2016, 11, 1), 13.0, 22.0),
            Regime(date(2017, 7, 1), 12.0, 21.0),
        )
    )


# ---------------------------------------------------------------------------
# Loading and writing


def load_visits(source, schema: dict | None = None) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Parse delimiter-separated visit data into a canonical visit table.

    ``source`` may be a path, a text stream, or raw CSV text.  Malformed rows
    are collected into the returned rejects frame (row number + reason), never
    silently dropped.  Raises :class:`SchemaError` when a required column is
    absent from the header.
    """
    schema = schema or default_schema()
    columns = schema["columns"]
    aliases = schema.get("aliases", {})

    rows, rejects = [], []
    with _open_text(source) as handle:
        reader = csv.DictReader(handle)
        header = reader.fieldnames or []
        for required in _REQUIRED_FIELDS:
            if columns.get(required, required) not in header:
                raise SchemaError(f"required column {columns.get(required, required)!r} missing from header")
        present = {f: c for f, c in columns.items() if c in header}

        for line_no, raw in enumerate(reader, start=2):
            try:
                rows.append(_parse_row(raw, present, aliases))
            except ValueError as exc:
                rejects.append({"row": line_no, "reason": str(exc)})

    table = pd.DataFrame(rows, columns=VISIT_COLUMNS)
    if len(table):
        table["arrival"] = pd.to_datetime(table["arrival"])
        table["day_key"] = table["arrival"].dt.date
    else:
        table = _empty_visit_table()
    reject_frame = pd.DataFrame(rejects, columns=["row", "reason"])
    return table, reject_frame


def _open_text(source):
    if hasattr(source, "read"):
        return io.StringIO(source.read()) if not isinstance(source, io.StringIO) else source
    text = str(source)
    if "\n" in text:  # raw CSV content passed directly
        return io.StringIO(text)
    return open(text, "r", encoding="utf-8", newline="")


def _empty_visit_table() -> pd.DataFrame:
    table = pd.DataFrame({c: pd.Series(dtype=object) for c in VISIT_COLUMNS})
    table["arrival"] = pd.Series(dtype="datetime64[ns]")
    for col in _NUMERIC_FIELDS:
        table[col] = pd.Series(dtype=float)
    return table[VISIT_COLUMNS]


def _parse_row(raw: dict, columns: dict, aliases: dict) -> dict:
    out = dict.fromkeys(VISIT_COLUMNS, np.nan)
    for f in ("visit_id", "physician_id", "arrival_mode"):
        out[f] = _cell(raw, columns, f)

    arrival_text = _cell(raw, columns, "arrival")
    if arrival_text is None:
        raise ValueError("missing arrival timestamp")
    try:
        arrival = datetime.fromisoformat(arrival_text)
    except ValueError:
        raise ValueError(f"unparseable timestamp {arrival_text!r}")
    out["arrival"] = arrival
    out["day_key"] = arrival.date()

    for f in _NUMERIC_FIELDS:
        text = _cell(raw, columns, f)
        if text is None:
            out[f] = np.nan
            continue
        try:
            out[f] = float(text)
        except ValueError:
            raise ValueError(f"invalid numeric value {text!r} for {f}")

    for f in ("sex", "race", "insurance", "complaint"):
        text = _cell(raw, columns, f)
        if text is None:
            out[f] = np.nan
        else:
            key = text.strip().lower()
            mapped = aliases.get(f, {}).get(key)
            if mapped is None:
                if f == "sex":
                    raise ValueError(f"unrecognized sex value {text!r}")
                mapped = "other" if f == "complaint" else "Unknown"
            out[f] = mapped
    if out["transfer_flag"] != out["transfer_flag"]:  # NaN
        out["transfer_flag"] = 0.0
    return out


def _cell(raw: dict, columns: dict, f: str):
    col = columns.get(f)
    if col is None:
        return None
    value = raw.get(col)
    if value is None:
        return None
    value = value.strip()
    return value or None


def write_visits(table: pd.DataFrame, path) -> None:
    """Write a visit table back to CSV in the canonical dialect (UTF-8,
    header row, ISO timestamps, empty cell = missing)."""
    out = table.copy()
    out["arrival"] = pd.to_datetime(out["arrival"]).dt.strftime("%Y-%m-%d %H:%M")
    out = out.drop(columns=["day_key"])
    for col in ("admitted", "revisit_30d", "transfer_flag"):
        if col in out:
            out[col] = out[col].map(lambda v: "" if pd.isna(v) else f"{v:g}")
    out.to_csv(path, index=False, float_format="%.10g", na_rep="")


# ---------------------------------------------------------------------------
# Exclusion pipeline


@dataclass(frozen=True)
class ExclusionRule:
    name: str
    description: str
    predicate: callable  # DataFrame -> boolean mask of rows to remove


def standard_exclusions() -> list[ExclusionRule]:
    """The sequential cohort rules, in their fixed order."""
    return [
        ExclusionRule("transfer", "transferred from another facility",
                      lambda t: t["transfer_flag"].fillna(0) > 0),
        ExclusionRule("procedure_complaint", "chief complaint recorded as a procedure",
                      lambda t: t["complaint"].astype(str).str.lower() == "procedure"),
        ExclusionRule("under_18", "younger than 18 years",
                      lambda t: t["age"] < 18),
        ExclusionRule("non_walkin", "arrived by means other than walking in",
                      lambda t: t["arrival_mode"].notna() & (t["arrival_mode"] != "walk_in")),
        ExclusionRule("missing_dispo_time", "missing time to disposition",
                      lambda t: t["time_to_dispo"].isna()),
        ExclusionRule("missing_disposition", "missing disposition decision",
                      lambda t: t["admitted"].isna()),
    ]


@dataclass
class ExclusionLedger:
    steps: list = field(default_factory=list)  # (rule name, removed count)
    n_input: int = 0
    n_output: int = 0

    def to_dict(self) -> dict:
        return {
            "steps": [{"rule": name, "removed": removed} for name, removed in self.steps],
            "n_input": self.n_input,
            "n_output": self.n_output,
        }


def apply_exclusions(table: pd.DataFrame, rules: list[ExclusionRule] | None = None
                     ) -> tuple[pd.DataFrame, ExclusionLedger]:
    """Apply ordered exclusion predicates; each row is counted only under the
    first rule that removes it."""
    rules = standard_exclusions() if rules is None else rules
    ledger = ExclusionLedger(n_input=len(table))
    kept = table
    for rule in rules:
        drop = np.asarray(rule.predicate(kept), dtype=bool)
        ledger.steps.append((rule.name, int(drop.sum())))
        kept = kept.loc[~drop]
    ledger.n_output = len(kept)
    return kept.reset_index(drop=True), ledger


# ---------------------------------------------------------------------------
# Forcing variable


def _clock_hours(arrival: pd.Series) -> np.ndarray:
    ts = pd.to_datetime(arrival)
    return (ts.dt.hour + ts.dt.minute / 60.0 + ts.dt.second / 3600.0).to_numpy()


def _signed_offset(clock: np.ndarray, anchor: np.ndarray) -> np.ndarray:
    """Signed hours from anchor on the 24h circle, in (-12, 12]."""
    delta = np.mod(clock - anchor, 24.0)
    return np.where(delta > 12.0, delta - 24.0, delta)


def compute_forcing(table: pd.DataFrame, schedule: InterventionSchedule,
                    anchor: str = "window_start") -> pd.DataFrame:
    """Attach forcing value ``s`` (hours), treatment ``a``, and the anchor tag.

    ``s`` is the signed distance from the arrival clock time to the chosen
    anchor of that date's window, wrapped to (-12, 12].  ``a`` is 1 exactly
    when the arrival falls inside [window start, window end).
    """
    if anchor not in ("window_start", "window_end"):
        raise ValueError(f"unknown anchor {anchor!r}")
    if not len(table):
        out = table.copy()
        out["s"], out["a"], out["anchor"] = [], [], []
        return out

    days = pd.to_datetime(table["arrival"]).dt.date
    unique_days = pd.unique(days)
    regimes = {d: schedule.regime_for(d) for d in unique_days}
    start = days.map(lambda d: regimes[d].start_hour).to_numpy(dtype=float)
    length = days.map(lambda d: regimes[d].window_length).to_numpy(dtype=float)

    clock = _clock_hours(table["arrival"])
    rel_start = np.mod(clock - start, 24.0)
    inside = rel_start < length

    anchor_hours = start if anchor == "window_start" else start + length
    s = _signed_offset(clock, anchor_hours)

    out = table.copy()
    out["s"] = s
    out["a"] = inside.astype(int)
    out["anchor"] = anchor
    return out


def compute_clock_forcing(table: pd.DataFrame, clock_hour: float) -> pd.DataFrame:
    """Forcing against a fixed clock time (placebo anchors).  Pseudo-treatment
    is coded 1 on the s >= 0 side."""
    out = table.copy()
    s = _signed_offset(_clock_hours(table["arrival"]), np.full(len(table), clock_hour))
    out["s"] = s
    out["a"] = (s >= 0).astype(int)
    out["anchor"] = f"clock:{_hours_to_clock(clock_hour)}"
    return out


def bandwidth_filter(table: pd.DataFrame, h: float) -> tuple[pd.DataFrame, dict]:
    """Rows with |s| <= h, plus per-side counts (left: s < 0)."""
    if h <= 0:
        raise ValueError(f"bandwidth must be positive, got {h}")
    subset = table.loc[np.abs(table["s"].to_numpy()) <= h].reset_index(drop=True)
    s = subset["s"].to_numpy()
    counts = {"n_left": int((s < 0).sum()), "n_right": int((s >= 0).sum())}
    return subset, counts


# ---------------------------------------------------------------------------
# Moderator coding and descriptive summaries


def tertile_encode(values, boundaries: tuple[float, float] | None = None
                   ) -> tuple[pd.Categorical, tuple[float, float]]:
    """Three-level split at the empirical 1/3 and 2/3 quantiles.

    ``low`` covers [min, q1], ``medium`` (q1, q2], ``high`` (q2, max].  The
    fitted boundaries are echoed so the encoding can be reproduced exactly.
    """
    arr = np.asarray(pd.Series(values).to_numpy(), dtype=float)
    if boundaries is None:
        finite = arr[np.isfinite(arr)]
        if len(np.unique(finite)) < 3:
            raise DataError("need at least 3 distinct values to fit tertile boundaries")
        q1, q2 = np.quantile(finite, [1 / 3, 2 / 3])
        boundaries = (float(q1), float(q2))
    q1, q2 = boundaries
    codes = np.where(arr <= q1, "low", np.where(arr <= q2, "medium", "high"))
    codes = pd.Categorical(codes, categories=["low", "medium", "high"], ordered=True)
    return codes, (float(q1), float(q2))


def summarize(table: pd.DataFrame) -> pd.DataFrame:
    """Descriptive table by cutoff side: counts/means/SDs for numeric columns,
    level counts for categoricals, missing counts per column.

    When a ``s`` column is present the table is split at s = 0; otherwise the
    whole sample is summarized as one group.
    """
    if "s" in table.columns:
        sides = {"before": table.loc[table["s"] < 0], "after": table.loc[table["s"] >= 0]}
    else:
        sides = {"all": table}

    numeric = ["age", "congestion", "workload", "time_to_roomed", "time_to_dispo",
               "admitted", "revisit_30d", "first_order_time"]
    categorical = ["sex", "race", "insurance", "complaint"]
    rows = []
    for side, part in sides.items():
        rows.append({"side": side, "variable": "n", "level": "", "value": float(len(part)),
                     "stat": "count", "missing": 0})
        for col in numeric:
            if col not in part.columns:
                continue
            vals = part[col].astype(float)
            n_missing = int(vals.isna().sum())
            present = vals.dropna()
            mean = float(present.mean()) if len(present) else np.nan
            sd = float(present.std(ddof=1)) if len(present) > 1 else np.nan
            rows.append({"side": side, "variable": col, "level": "", "value": mean,
                         "stat": "mean", "missing": n_missing})
            rows.append({"side": side, "variable": col, "level": "", "value": sd,
                         "stat": "sd", "missing": n_missing})
        for col in categorical:
            if col not in part.columns:
                continue
            n_missing = int(part[col].isna().sum())
            counts = part[col].value_counts(dropna=True)
            for level, count in counts.items():
                pct = 100.0 * count / len(part) if len(part) else np.nan
                rows.append({"side": side, "variable": col, "level": str(level),
                             "value": float(count), "stat": "count", "missing": n_missing})
                rows.append({"side": side, "variable": col, "level": str(level),
                             "value": pct, "stat": "pct", "missing": n_missing})
    return pd.DataFrame(rows, columns=["side", "variable", "level", "stat", "value", "missing"])
