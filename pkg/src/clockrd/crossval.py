"""Leave-one-out cross-validation over a bandwidth x polynomial-form grid.

Every holdout visit near the cutoff is refit without itself (a full REML
refit, realized through rank-one downdates of the profiled-criterion
sufficient statistics) and scored by held-out squared error on the transform
scale.  Folds are independent; with a single grouping factor all folds are
optimized simultaneously as vectorized golden-section lanes, which matches
the scalar path because each lane depends only on its own data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import lmm, rd
from .errors import ClockRdError, DataError

_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0
_LOG_LO, _LOG_HI = math.log(1e-10), math.log(1e6)
_GRID = np.linspace(_LOG_LO, _LOG_HI, 41)


@dataclass(frozen=True)
class CvGrid:
    """Selection grid: which bandwidths and polynomial forms to score."""

    bandwidths: tuple = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0)
    forms: tuple = rd.FORMS
    holdout_radius: float = 0.5
    outcome: str = "time_to_dispo"

    def __post_init__(self):
        if not self.bandwidths or not self.forms:
            raise ValueError("grid must have at least one bandwidth and one form")
        if self.holdout_radius > min(self.bandwidths):
            raise ValueError("holdout_radius must not exceed the smallest bandwidth")


@dataclass
class CvResult:
    """Grids of mean squared error and its standard error (forms x bandwidths)."""

    mse: pd.DataFrame
    se: pd.DataFrame
    n_holdout: int
    failures: dict = field(default_factory=dict)

    def formatted(self, mse_digits: int = 2, se_digits: int = 3) -> pd.DataFrame:
        def cell(m, s):
            if not np.isfinite(m):
                return ""
            return f"{m:.{mse_digits}f} ({s:.{se_digits}f})"

        out = self.mse.copy().astype(object)
        for form in self.mse.index:
            for h in self.mse.columns:
                out.loc[form, h] = cell(self.mse.loc[form, h], self.se.loc[form, h])
        return out


def loocv(forced: pd.DataFrame, grid: CvGrid, spec: rd.RdSpec,
          predict_mode: str = "with_blup") -> CvResult:
    """Score every (form, bandwidth) cell by leave-one-out squared error.

    Held-out predictions default to fixed effects plus the day intercept
    prediction (the day stays in training through its other visits); pass
    ``predict_mode='fixed_only'`` to drop the group offsets.  A cell where any
    fold fails to fit is marked missing with the reason and the run continues.
    """
    if predict_mode not in ("fixed_only", "with_blup"):
        raise ValueError(f"unknown predict_mode {predict_mode!r}")

    mse = pd.DataFrame(np.nan, index=list(grid.forms), columns=list(grid.bandwidths))
    se = pd.DataFrame(np.nan, index=list(grid.forms), columns=list(grid.bandwidths))
    failures: dict = {}
    n_holdout = 0

    for form in grid.forms:
        for h in grid.bandwidths:
            cell_spec = rd.RdSpec(bandwidth=h, form=form, covariates=spec.covariates,
                                  groupings=spec.groupings, transform=spec.transform,
                                  anchor=spec.anchor, outcome=grid.outcome)
            try:
                errors = _cell_errors(forced, cell_spec, grid.holdout_radius, predict_mode)
                n_holdout = len(errors)
                if n_holdout == 0:
                    raise DataError("holdout set is empty")
                mse.loc[form, h] = float(np.mean(errors))
                se.loc[form, h] = float(np.std(errors, ddof=1) / math.sqrt(len(errors))) \
                    if len(errors) > 1 else np.nan
            except (ClockRdError, np.linalg.LinAlgError) as exc:
                failures[(form, h)] = str(exc)
    return CvResult(mse=mse, se=se, n_holdout=n_holdout, failures=failures)


def _cell_errors(forced, cell_spec, holdout_radius, predict_mode) -> np.ndarray:
    rows, _, _ = rd._prepare_rows(forced, cell_spec)
    design = rd.build_design(rows, cell_spec)
    holdout = np.flatnonzero(np.abs(rows["s"].to_numpy(dtype=float)) <= holdout_radius)
    if len(holdout) == 0:
        raise DataError("holdout set is empty")
    if len(design.groups) == 1:
        return _batched_errors(design, holdout, predict_mode)
    return _scalar_errors(design, holdout, predict_mode)


def _scalar_errors(design: lmm.DesignMatrix, holdout: np.ndarray, predict_mode: str) -> np.ndarray:
    """One honest refit per fold; used for crossed-grouping designs."""
    errors = np.empty(len(holdout))
    mask = np.ones(design.n, dtype=bool)
    for k, i in enumerate(holdout):
        mask[i] = False
        sub = lmm.DesignMatrix(
            x=design.x[mask], columns=list(design.columns), y=design.y[mask],
            groups={g: c[mask] for g, c in design.groups.items()},
            levels=dict(design.levels))
        fit = lmm.fit_lmm(sub, protected=("treated",))
        keys = None
        if predict_mode == "with_blup":
            keys = {g: design.levels[g][design.groups[g][i:i + 1]]
                    for g in design.groups}
        pred = lmm.predict(fit, design.x[i:i + 1], list(design.columns),
                           groups=keys, mode=predict_mode)
        errors[k] = (design.y[i] - pred[0]) ** 2
        mask[i] = True
    return errors


def _batched_errors(design: lmm.DesignMatrix, holdout: np.ndarray, predict_mode: str) -> np.ndarray:
    """All folds at once for a single grouping factor.

    Each fold's profiled REML criterion uses downdated B'B, Z'B, and group
    counts; the lanes share one grid scan + golden-section schedule with
    per-lane brackets, so every fold gets the same search the scalar fitter
    runs.
    """
    x, y = design.x, design.y
    x, columns, _ = lmm._drop_collinear(x, list(design.columns), ("treated",))
    n, p = x.shape
    if n - 1 <= p:
        raise DataError(f"need more rows than columns for leave-one-out (n={n}, p={p})")
    codes = next(iter(design.groups.values()))
    q = int(codes.max()) + 1
    b = np.column_stack([x, y])
    bb = b.T @ b
    u = np.vstack([np.bincount(codes, weights=b[:, j], minlength=q)
                   for j in range(p + 1)]).T
    counts = np.bincount(codes, minlength=q).astype(float)

    f = len(holdout)
    bi = b[holdout]                                   # (F, p+1)
    gi = codes[holdout]                               # (F,)
    bb_f = bb[None, :, :] - bi[:, :, None] * bi[:, None, :]
    u_f = np.repeat(u[None, :, :], f, axis=0)
    u_f[np.arange(f), gi, :] -= bi
    counts_f = np.repeat(counts[None, :], f, axis=0)
    counts_f[np.arange(f), gi] -= 1.0
    n_f = n - 1

    def m2l(theta):                                   # theta: (F,)
        t = theta[:, None]
        w = np.sqrt(t / (1.0 + t * counts_f))         # (F, q)
        v = u_f * w[:, :, None]
        c = bb_f - np.matmul(v.transpose(0, 2, 1), v)
        cxx, cxy, cyy = c[:, :p, :p], c[:, :p, p], c[:, p, p]
        beta = np.linalg.solve(cxx, cxy[:, :, None])[:, :, 0]
        rwr = np.maximum(cyy - np.einsum("fi,fi->f", cxy, beta), 1e-300)
        sign, logdet_cxx = np.linalg.slogdet(cxx)
        logdet_w = np.log1p(t * counts_f).sum(axis=1)
        sigma2 = rwr / (n_f - p)
        return ((n_f - p) * np.log(sigma2) + logdet_w + logdet_cxx, beta)

    # shared grid scan, then per-lane golden section
    grid_vals = np.empty((len(_GRID), f))
    for j, ug in enumerate(_GRID):
        grid_vals[j], _ = m2l(np.full(f, math.exp(ug)))
    best = np.argmin(grid_vals, axis=0)
    a_lane = _GRID[np.maximum(best - 1, 0)]
    b_lane = _GRID[np.minimum(best + 1, len(_GRID) - 1)]

    c_lane = b_lane - _INVPHI * (b_lane - a_lane)
    d_lane = a_lane + _INVPHI * (b_lane - a_lane)
    fc, _ = m2l(np.exp(c_lane))
    fd, _ = m2l(np.exp(d_lane))
    width = float(np.max(b_lane - a_lane))
    iters = max(int(math.ceil(math.log(max(width, 1e-12) / 1e-9) / math.log(1.0 / _INVPHI))), 1)
    for _ in range(min(iters, 200)):
        take_left = fc < fd
        b_lane = np.where(take_left, d_lane, b_lane)
        a_lane = np.where(take_left, a_lane, c_lane)
        c_lane = b_lane - _INVPHI * (b_lane - a_lane)
        d_lane = a_lane + _INVPHI * (b_lane - a_lane)
        fc, _ = m2l(np.exp(c_lane))
        fd, _ = m2l(np.exp(d_lane))

    theta = np.exp(0.5 * (a_lane + b_lane))
    crit_theta, beta_theta = m2l(theta)
    crit_zero, beta_zero = m2l(np.zeros(f))
    use_zero = crit_zero <= crit_theta + 1e-12
    theta = np.where(use_zero, 0.0, theta)
    beta = np.where(use_zero[:, None], beta_zero, beta_theta)

    xi = x[holdout]
    pred = np.einsum("fi,fi->f", xi, beta)
    if predict_mode == "with_blup":
        u_row = u_f[np.arange(f), gi, :]              # (F, p+1)
        zr = u_row[:, p] - np.einsum("fi,fi->f", u_row[:, :p], beta)
        m_g = counts_f[np.arange(f), gi]
        pred = pred + theta * zr / (1.0 + theta * m_g)
    return (y[holdout] - pred) ** 2
