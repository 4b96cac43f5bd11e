"""Batch command-line interface.

Subcommands run the pipeline end to end and emit CSV artifacts, each with a
JSON sidecar carrying the resolved configuration, its hash, and the seed, so
any artifact can be reproduced exactly.  Exit codes: 0 success, 1 usage,
2 data error, 3 estimation failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import crossval, diagnostics, mediation, moderation, rd
from .errors import (ClockRdError, DataError, EstimabilityError,
                     EstimationError, SchemaError)
from .frame import (InterventionSchedule, apply_exclusions, compute_forcing,
                    default_schedule, load_visits, write_visits)
from .simulate import PRESET_NAMES, preset, simulate

DEFAULT_OUTCOME_TRANSFORMS = {
    "time_to_roomed": "identity",
    "time_to_dispo": "identity",
    "admitted": "linear_probability",
    "revisit_30d": "linear_probability",
}
DEFAULT_PLACEBO_ANCHORS = (7.0, 16.0, 15.0, 12.0, 23.0, 8.0)


class UsageError(ClockRdError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _config_hash(config: dict) -> str:
    hashed = {k: v for k, v in config.items() if k != "out"}
    canonical = json.dumps(hashed, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode()).hexdigest()


def _write_artifact(frame: pd.DataFrame, out_dir: Path, name: str, config: dict) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    frame.to_csv(path, index=False, float_format="%.6g")
    sidecar = {
        "artifact": name,
        "command": config.get("command"),
        "seed": config.get("seed"),
        "config": {k: v for k, v in config.items() if k != "out"},
        "config_hash": _config_hash(config),
    }
    with open(path.with_suffix(path.suffix + ".meta.json"), "w") as handle:
        json.dump(sidecar, handle, sort_keys=True, indent=2)
    return path


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    with open(path) as handle:
        return json.load(handle)


def _resolve(args, file_config: dict, keys: list[str]) -> dict:
    """Flag values override config-file values; only known keys survive."""
    config = {k: file_config[k] for k in keys if k in file_config}
    for key in keys:
        value = getattr(args, key, None)
        if value is not None:
            config[key] = value
    config["command"] = args.command
    return config


def _schedule_from(config: dict) -> InterventionSchedule:
    ref = config.get("schedule")
    if ref is None:
        return default_schedule()
    if isinstance(ref, dict):
        return InterventionSchedule.from_dict(ref)
    with open(ref) as handle:
        return InterventionSchedule.from_dict(json.load(handle))


def _load_forced(config: dict, anchor: str = "window_start"):
    schema = config.get("schema")
    if isinstance(schema, str):
        with open(schema) as handle:
            schema = json.load(handle)
    table, rejects = load_visits(config["input"], schema=schema)
    if len(rejects):
        print(f"rejected {len(rejects)} malformed rows", file=sys.stderr)
    if config.get("exclusions", True):
        table, ledger = apply_exclusions(table)
        if config.get("out"):
            out_dir = Path(config["out"])
            out_dir.mkdir(parents=True, exist_ok=True)
            with open(out_dir / "exclusions.json", "w") as handle:
                json.dump(ledger.to_dict(), handle, indent=2)
    schedule = _schedule_from(config)
    return compute_forcing(table, schedule, anchor=anchor), schedule


def _spec_from(config: dict, outcome: str, transform: str | None = None) -> rd.RdSpec:
    return rd.RdSpec(
        bandwidth=float(config.get("bandwidth", 1.0)),
        form=config.get("form", "linear_shared"),
        covariates=tuple(config.get("covariates", rd.DEFAULT_COVARIATES)),
        groupings=tuple(config.get("groupings", ("day",))),
        transform=transform or config.get("transform", "identity"),
        anchor=config.get("anchor", "window_start"),
        outcome=outcome,
    )


def _outcome_plan(config: dict) -> list[tuple[str, str]]:
    outcome = config.get("outcome", "all")
    if outcome == "all":
        return list(DEFAULT_OUTCOME_TRANSFORMS.items())
    transform = config.get("transform") or DEFAULT_OUTCOME_TRANSFORMS.get(outcome, "identity")
    return [(outcome, transform)]


def _require_outcomes(forced: pd.DataFrame, plan: list[tuple[str, str]]):
    for outcome, _ in plan:
        if outcome not in forced.columns:
            raise DataError(f"outcome column {outcome!r} missing from input")


# ---------------------------------------------------------------------------
# Commands


def _cmd_simulate(args, file_config):
    config = _resolve(args, file_config, ["preset", "seed", "days", "out"])
    scenario = preset(config.get("preset", "paper_like"),
                      seed=int(config.get("seed", 0)),
                      n_days=int(config.get("days", 200)))
    visits, truth = simulate(scenario)
    out_dir = Path(config.get("out", "."))
    out_dir.mkdir(parents=True, exist_ok=True)
    write_visits(visits, out_dir / "visits.csv")
    truth.to_csv(out_dir / "truth.csv", index=False, float_format="%.10g")
    sidecar = {"command": "simulate",
               "config": {k: v for k, v in config.items() if k != "out"},
               "config_hash": _config_hash(config),
               "seed": config.get("seed", 0),
               "scenario": scenario.to_dict()}
    for name in ("visits.csv", "truth.csv"):
        with open(out_dir / f"{name}.meta.json", "w") as handle:
            json.dump({**sidecar, "artifact": name}, handle,
                      sort_keys=True, indent=2, default=str)
    return 0


def _cmd_estimate(args, file_config, anchor="window_start", artifact="estimates.csv"):
    keys = ["input", "schedule", "schema", "bandwidth", "form", "outcome", "transform",
            "anchor", "covariates", "groupings", "out", "seed", "exclusions"]
    config = _resolve(args, file_config, keys)
    if anchor == "window_end":
        config["anchor"] = "window_end"
    forced, _ = _load_forced(config, anchor=config.get("anchor", anchor))
    plan = _outcome_plan(config)
    _require_outcomes(forced, plan)
    estimates = []
    for outcome, transform in plan:
        spec = _spec_from(config, outcome, transform)
        if config.get("anchor") == "window_end":
            estimates.append(rd.end_window_effect(forced, spec))
        else:
            estimates.append(rd.estimate_effect(forced, spec))
    table = rd.estimate_table(estimates)
    _write_artifact(table, Path(config.get("out", ".")), artifact, config)
    return 0


def _cmd_endhour(args, file_config):
    return _cmd_estimate(args, file_config, anchor="window_end", artifact="endhour.csv")


def _cmd_loocv(args, file_config):
    keys = ["input", "schedule", "bandwidths", "forms", "holdout", "outcome",
            "transform", "covariates", "groupings", "out", "seed", "exclusions",
            "predict_mode"]
    config = _resolve(args, file_config, keys)
    forced, _ = _load_forced(config)
    outcome = config.get("outcome", "time_to_dispo")
    if outcome == "all" or outcome not in forced.columns:
        raise DataError(f"loocv needs one outcome column, got {outcome!r}")
    bandwidths = _parse_floats(config.get("bandwidths")) or crossval.CvGrid().bandwidths
    forms = tuple(config.get("forms", rd.FORMS))
    grid = crossval.CvGrid(bandwidths=tuple(bandwidths), forms=forms,
                           holdout_radius=float(config.get("holdout", 0.5)),
                           outcome=outcome)
    spec = _spec_from(config, outcome,
                      config.get("transform") or DEFAULT_OUTCOME_TRANSFORMS.get(outcome, "identity"))
    result = crossval.loocv(forced, grid, spec,
                            predict_mode=config.get("predict_mode", "with_blup"))
    formatted = result.formatted()
    formatted.insert(0, "form", formatted.index)
    _write_artifact(formatted, Path(config.get("out", ".")), "loocv_grid.csv", config)
    raw = result.mse.copy()
    raw.insert(0, "form", raw.index)
    _write_artifact(raw, Path(config.get("out", ".")), "loocv_mse.csv", config)
    return 0


def _cmd_moderate(args, file_config):
    keys = ["input", "schedule", "bandwidth", "form", "outcome", "transform",
            "moderator", "covariates", "groupings", "out", "seed", "exclusions"]
    config = _resolve(args, file_config, keys)
    forced, schedule = _load_forced(config)
    plan = _outcome_plan(config)
    _require_outcomes(forced, plan)
    which = config.get("moderator", "all")
    specs = {
        "congestion": moderation.congestion_moderator(),
        "workload": moderation.workload_moderator(),
        "day_of_week": moderation.day_of_week_moderator(),
        "regime": moderation.regime_moderator(),
    }
    chosen = list(specs.values()) if which == "all" else [specs[which]]
    frames = []
    for outcome, transform in plan:
        spec = _spec_from(config, outcome, transform)
        results = moderation.moderate_full(forced, spec, chosen, schedule=schedule)
        table = moderation.moderation_table(results)
        table.insert(0, "outcome", outcome)
        frames.append(table)
    _write_artifact(pd.concat(frames, ignore_index=True),
                    Path(config.get("out", ".")), "moderation.csv", config)
    return 0


def _cmd_mediate(args, file_config):
    keys = ["input", "schedule", "bandwidth", "outcome", "mediator", "by",
            "covariates", "groupings", "out", "seed", "exclusions", "mc_ci"]
    config = _resolve(args, file_config, keys)
    forced, schedule = _load_forced(config)
    outcome = config.get("outcome", "time_to_dispo")
    mediator = config.get("mediator", "time_to_first_order")
    by = config.get("by")
    by_spec = None
    if by == "congestion":
        by_spec = moderation.congestion_moderator()
    elif by == "workload":
        by_spec = moderation.workload_moderator()
    elif by:
        by_spec = moderation.ModeratorSpec(by, f"column:{by}")
    mspec = mediation.MediationSpec(
        mediator=mediator, outcome=outcome,
        spec=_spec_from(config, outcome),
        by_level=by_spec,
        mc_ci=bool(config.get("mc_ci", False)),
        mc_seed=int(config.get("seed", 0) or 0))
    results = [mediation.mediate(forced, mspec)]
    if by_spec is not None:
        results.extend(mediation.mediate_by_level(forced, mspec, schedule=schedule))
    _write_artifact(mediation.mediation_table(results),
                    Path(config.get("out", ".")), "mediation.csv", config)
    return 0


def _cmd_placebo(args, file_config):
    keys = ["input", "schedule", "bandwidth", "form", "outcome", "transform",
            "anchors", "covariates", "groupings", "out", "seed", "exclusions"]
    config = _resolve(args, file_config, keys)
    forced, _ = _load_forced(config)
    anchors = _parse_floats(config.get("anchors")) or list(DEFAULT_PLACEBO_ANCHORS)
    plan = _outcome_plan(config)
    _require_outcomes(forced, plan)
    rows = []
    for outcome, transform in plan:
        spec = _spec_from(config, outcome, transform)
        for entry in rd.placebo_scan(forced, anchors, spec):
            row = {"outcome": outcome, "anchor_hour": entry["anchor_hour"],
                   "error": entry["error"] or ""}
            if entry["estimate"] is not None:
                row.update(entry["estimate"].to_row())
            rows.append(row)
    _write_artifact(pd.DataFrame(rows), Path(config.get("out", ".")), "placebo.csv", config)
    return 0


def _cmd_diagnose(args, file_config):
    keys = ["input", "schedule", "bandwidth", "outcome", "covariates",
            "groupings", "out", "seed", "exclusions", "delta"]
    config = _resolve(args, file_config, keys)
    forced, _ = _load_forced(config)
    out_dir = Path(config.get("out", "."))

    for width, series in diagnostics.arrival_histogram(forced).items():
        _write_artifact(series.to_frame(), out_dir,
                        f"arrivals_hist_{width:g}h.csv", config)

    test = diagnostics.density_jump_test(forced, delta=float(config.get("delta", 0.5)))
    density = pd.DataFrame([{"z": test.z, "p": test.pvalue,
                             "conclusive": test.conclusive,
                             "c1": test.counts[0], "c2": test.counts[1],
                             "c3": test.counts[2], "c4": test.counts[3]}])
    _write_artifact(density, out_dir, "density_test.csv", config)

    spec = _spec_from(config, "time_to_dispo")
    balance = diagnostics.covariate_balance(forced, spec)
    _write_artifact(balance, out_dir, "balance.csv", config)

    for outcome, transform in _outcome_plan(config):
        if outcome not in forced.columns:
            continue
        series, _ = diagnostics.bin_means(forced, outcome, spec=_spec_from(config, outcome, transform))
        _write_artifact(series.to_frame(), out_dir, f"binmeans_{outcome}.csv", config)
    return 0


def _parse_floats(text) -> list[float] | None:
    if text is None:
        return None
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).split(",") if v.strip()]


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> _Parser:
    parser = _Parser(prog="clockrd", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--input")
        p.add_argument("--config")
        p.add_argument("--schedule")
        p.add_argument("--bandwidth", type=float)
        p.add_argument("--form", choices=rd.FORMS)
        p.add_argument("--outcome")
        p.add_argument("--transform", choices=rd.TRANSFORMS)
        p.add_argument("--anchor", choices=("window_start", "window_end"))
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--no-exclusions", dest="exclusions", action="store_false",
                       default=None)

    p_sim = sub.add_parser("simulate", help="generate a synthetic study with known truth")
    p_sim.add_argument("--preset", choices=PRESET_NAMES, default="paper_like")
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--days", type=int)
    p_sim.add_argument("--out")
    p_sim.add_argument("--config")

    for name in ("estimate", "endhour"):
        common(sub.add_parser(name))
    p_cv = sub.add_parser("loocv")
    common(p_cv)
    p_cv.add_argument("--bandwidths")
    p_cv.add_argument("--holdout", type=float)
    p_cv.add_argument("--predict-mode", dest="predict_mode",
                      choices=("fixed_only", "with_blup"))
    p_mod = sub.add_parser("moderate")
    common(p_mod)
    p_mod.add_argument("--moderator",
                       choices=("congestion", "workload", "day_of_week", "regime", "all"))
    p_med = sub.add_parser("mediate")
    common(p_med)
    p_med.add_argument("--mediator", choices=mediation.MEDIATORS)
    p_med.add_argument("--by")
    p_med.add_argument("--mc-ci", dest="mc_ci", action="store_true", default=None)
    p_pl = sub.add_parser("placebo")
    common(p_pl)
    p_pl.add_argument("--anchors")
    p_diag = sub.add_parser("diagnose")
    common(p_diag)
    p_diag.add_argument("--delta", type=float)
    return parser


_COMMANDS = {
    "simulate": _cmd_simulate,
    "estimate": _cmd_estimate,
    "endhour": _cmd_endhour,
    "loocv": _cmd_loocv,
    "moderate": _cmd_moderate,
    "mediate": _cmd_mediate,
    "placebo": _cmd_placebo,
    "diagnose": _cmd_diagnose,
}


def _emit_error(kind: str, message: str):
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        file_config = _load_config_file(getattr(args, "config", None))
        return _COMMANDS[args.command](args, file_config)
    except UsageError as exc:
        _emit_error("usage", str(exc))
        return 1
    except (SchemaError, DataError, FileNotFoundError, KeyError) as exc:
        _emit_error("data", str(exc))
        return 2
    except (EstimationError, EstimabilityError, np.linalg.LinAlgError) as exc:
        _emit_error("estimation", str(exc))
        return 3


if __name__ == "__main__":
    sys.exit(main())
