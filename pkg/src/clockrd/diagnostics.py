"""Manipulation and balance diagnostics around the cutoff.

Arrival histograms with a mandatory bin edge at s = 0, a trend-corrected
near-cutoff density jump test, covariate-as-outcome balance fits with a
Bonferroni correction, and binned outcome means with fitted-line overlays for
plotting.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import pandas as pd
from scipy import stats

from . import lmm, rd

BALANCE_TRANSFORMS = {"age": "identity", "sex": "linear_probability",
                      "race": "linear_probability", "complaint": "linear_probability"}


@dataclass
class BinnedSeries:
    """Non-overlapping bins aligned so that s = 0 is a bin edge."""

    edges: np.ndarray
    values: np.ndarray
    ses: np.ndarray | None
    ns: np.ndarray
    kind: str                       # "count" or "mean"
    side_totals: tuple
    aligned: bool = True

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({
            "bin_lo": self.edges[:-1], "bin_hi": self.edges[1:],
            "value": self.values, "n": self.ns,
        })
        frame["se"] = self.ses if self.ses is not None else np.nan
        return frame


def _aligned_edges(s: np.ndarray, width: float) -> np.ndarray:
    lo = math_floor_div(np.min(s), width)
    hi = math_ceil_div(np.max(s), width)
    if hi <= lo:
        hi = lo + 1
    return np.arange(lo, hi + 1) * width


def math_floor_div(v: float, w: float) -> int:
    return int(np.floor(v / w))


def math_ceil_div(v: float, w: float) -> int:
    return int(np.ceil(v / w)) if v % w != 0 else int(v / w) + 1


def arrival_histogram(forced: pd.DataFrame, widths: tuple = (0.25, 1.0, 2.0, 3.0)
                      ) -> dict[float, BinnedSeries]:
    """Arrival counts per bin for each bin width, plus per-side totals."""
    s = forced["s"].to_numpy(dtype=float)
    out = {}
    for width in widths:
        if len(s) == 0:
            edges = np.array([-width, 0.0, width])
            counts = np.zeros(2)
        else:
            edges = _aligned_edges(s, width)
            counts, _ = np.histogram(s, bins=edges)
        out[width] = BinnedSeries(
            edges=edges, values=counts.astype(float), ses=None, ns=counts.astype(int),
            kind="count", side_totals=(int((s < 0).sum()), int((s >= 0).sum())))
    return out


@dataclass
class DensityTest:
    z: float
    pvalue: float
    counts: tuple
    conclusive: bool


def density_jump_test(forced: pd.DataFrame, delta: float = 0.5) -> DensityTest:
    """Two-proportion-style z test for bunching across the cutoff.

    Compares the counts just left and right of s = 0 after removing the local
    linear trend implied by the two flanking bins: with bin counts c1..c4 on
    (-2d,-d), (-d,0), [0,d), [d,2d), the statistic is
    (c2 - c3) - (c1 - c4)/3 over its Poisson plug-in standard deviation.
    Fewer than 20 arrivals near the cutoff yields an inconclusive flag.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    s = forced["s"].to_numpy(dtype=float)
    c1 = float(((s >= -2 * delta) & (s < -delta)).sum())
    c2 = float(((s >= -delta) & (s < 0)).sum())
    c3 = float(((s >= 0) & (s < delta)).sum())
    c4 = float(((s >= delta) & (s < 2 * delta)).sum())
    total = c1 + c2 + c3 + c4
    if total < 20:
        return DensityTest(z=np.nan, pvalue=np.nan, counts=(c1, c2, c3, c4), conclusive=False)
    d = (c2 - c3) - (c1 - c4) / 3.0
    var = c2 + c3 + (c1 + c4) / 9.0
    z = d / np.sqrt(max(var, 1.0))
    return DensityTest(z=float(z), pvalue=float(2.0 * stats.norm.sf(abs(z))),
                       counts=(c1, c2, c3, c4), conclusive=True)


def covariate_balance(forced: pd.DataFrame, spec: rd.RdSpec,
                      covariates: tuple = rd.DEFAULT_COVARIATES) -> pd.DataFrame:
    """Cutoff jumps in each covariate, treated as the outcome of the base
    model (without itself as a regressor), with Bonferroni-corrected p values
    over the covariates tested in this call."""
    rows = []
    k = len(covariates)
    for token in covariates:
        remaining = tuple(c for c in covariates if c != token)
        if token in rd.COVARIATE_BUILDERS:
            col, builder = rd.COVARIATE_BUILDERS[token]
            table = forced.assign(**{f"balance_{col}": builder(forced)})
            outcome = f"balance_{col}"
            transform = BALANCE_TRANSFORMS.get(token, "identity")
        else:
            table, outcome, transform = forced, token, "identity"
        bspec = replace(spec, outcome=outcome, covariates=remaining, transform=transform)
        est = rd.estimate_effect(table, bspec)
        rows.append({
            "covariate": token, "estimate": est.gamma,
            "lo": est.ci95[0], "hi": est.ci95[1],
            "p_raw": est.pvalue, "p_bonferroni": bonferroni(est.pvalue, k),
        })
    return pd.DataFrame(rows)


def bonferroni(p: float, k: int) -> float:
    return min(1.0, p * k)


def bin_means(forced: pd.DataFrame, outcome: str, spec: rd.RdSpec | None = None,
              width: float = 0.25) -> tuple[BinnedSeries, dict]:
    """Binned outcome means with SEs, plus fitted-line samples from the
    cutoff fit (covariates at sample means, group offsets at zero) for
    plot overlays.  No bin straddles s = 0."""
    spec = replace(spec or rd.RdSpec(), outcome=outcome)
    rows, _, _ = rd._prepare_rows(forced, spec)
    s = rows["s"].to_numpy(dtype=float)
    y = rows[outcome].to_numpy(dtype=float)
    edges = _aligned_edges(s, width)
    idx = np.digitize(s, edges) - 1
    n_bins = len(edges) - 1
    means = np.full(n_bins, np.nan)
    ses = np.full(n_bins, np.nan)
    ns = np.zeros(n_bins, dtype=int)
    for b in range(n_bins):
        sel = idx == b
        ns[b] = int(sel.sum())
        if ns[b]:
            means[b] = float(np.mean(y[sel]))
            if ns[b] > 1:
                ses[b] = float(np.std(y[sel], ddof=1) / np.sqrt(ns[b]))
    series = BinnedSeries(edges=edges, values=means, ses=ses, ns=ns, kind="mean",
                          side_totals=(int((s < 0).sum()), int((s >= 0).sum())))

    est = rd.estimate_effect(forced, spec)
    design = rd.build_design(rows, spec)
    xbar = design.x.mean(axis=0)
    grid_overlay = {}
    for side, grid in (("left", np.linspace(edges[0], 0.0, 25)),
                       ("right", np.linspace(0.0, edges[-1], 25))):
        a_val = rows.loc[rows["s"].to_numpy() < 0 if side == "left" else rows["s"].to_numpy() >= 0,
                         "a"].mode()
        a_side = float(a_val.iloc[0]) if len(a_val) else (0.0 if side == "left" else 1.0)
        xg = np.tile(xbar, (len(grid), 1))
        for j, name in enumerate(design.columns):
            if name == "s":
                xg[:, j] = grid
            elif name == "s_ctrl":
                xg[:, j] = grid * (1.0 - a_side)
            elif name == "s_trt":
                xg[:, j] = grid * a_side
            elif name == "s2_ctrl":
                xg[:, j] = grid * grid * (1.0 - a_side)
            elif name == "s2_trt":
                xg[:, j] = grid * grid * a_side
            elif name == "treated":
                xg[:, j] = a_side
        fitted = lmm.predict(est.fit, xg, design.columns, mode="fixed_only")
        grid_overlay[side] = {"s": grid, "fitted": fitted}
    return series, grid_overlay
