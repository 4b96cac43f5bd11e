"""Gaussian linear mixed models with random intercepts, fit by profiled REML.

The model is y = X*beta + sum_g Z_g b_g + eps with b_g ~ N(0, tau_g^2 I) for
one or two crossed grouping factors and eps ~ N(0, sigma^2 I).  Writing
theta_g = tau_g^2 / sigma^2 and W = I + sum_g theta_g Z_g Z_g', the REML (or
ML) criterion is profiled down to the variance ratios theta, which are found
by a deterministic grid + golden-section search on the log scale.  Given
theta, beta and sigma^2 have closed generalized-least-squares forms.

All the data enters the criterion only through B'B and Z'B with B = [X y],
which are computed once per fit; each criterion evaluation then costs
O(q^3 + q^2 p) with q the total number of group levels (diagonal-only, so
O(q p^2), when there is a single grouping).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.linalg import cho_factor, cho_solve

from .errors import EstimabilityError, EstimationError

_LOG_THETA_LO = math.log(1e-10)
_LOG_THETA_HI = math.log(1e6)
_GRID_POINTS = 41
_GOLDEN_TOL = 1e-9          # relative tolerance in theta (log-scale interval width)
_MAX_GOLDEN_ITER = 200
_MAX_OUTER_PASSES = 200
_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass
class DesignMatrix:
    """Fixed-effect design plus response and up to two grouping factors.

    ``groups`` maps a grouping name to integer level codes (length n); the
    corresponding level labels are kept in ``levels`` for BLUP lookup.
    """

    x: np.ndarray
    columns: list[str]
    y: np.ndarray | None
    groups: dict[str, np.ndarray] = field(default_factory=dict)
    levels: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        if self.x.ndim != 2:
            raise EstimabilityError("design matrix must be 2-dimensional")
        if len(self.columns) != self.x.shape[1]:
            raise EstimabilityError("column names do not match design width")
        if len(set(self.columns)) != len(self.columns):
            raise EstimabilityError("duplicate column names in design")
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=float)
            if self.y.shape != (self.x.shape[0],):
                raise EstimabilityError("response length does not match design")
        if len(self.groups) > 2:
            raise EstimabilityError("at most two grouping factors are supported")
        for name, codes in self.groups.items():
            self.groups[name] = np.asarray(codes, dtype=np.int64)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @classmethod
    def from_frame(cls, frame, response: str, fixed: list[str],
                   groupings: list[str] | tuple = ()) -> "DesignMatrix":
        """Build a design from data-frame columns, adding an intercept first
        and coding each grouping by sorted unique level."""
        x = np.column_stack([np.ones(len(frame))] +
                            [frame[c].to_numpy(dtype=float) for c in fixed])
        groups, levels = {}, {}
        for g in groupings:
            lv, codes = np.unique(frame[g].to_numpy(), return_inverse=True)
            groups[g] = codes
            levels[g] = lv
        return cls(x=x, columns=["(intercept)"] + list(fixed),
                   y=frame[response].to_numpy(dtype=float), groups=groups, levels=levels)


@dataclass
class MixedFit:
    """Result of one mixed-model fit."""

    columns: list[str]
    beta: np.ndarray
    cov_beta: np.ndarray
    var_components: dict
    blups: dict
    loglik: float
    converged: bool
    criterion: str
    n: int
    p: int
    dropped: list[str] = field(default_factory=list)
    n_evals: int = 0
    group_levels: dict = field(default_factory=dict)

    def coef(self, name: str) -> float:
        return float(self.beta[self._index(name)])

    def se(self, name: str) -> float:
        return float(np.sqrt(self.cov_beta[self._index(name), self._index(name)]))

    def _index(self, name: str) -> int:
        try:
            return self.columns.index(name)
        except ValueError:
            raise KeyError(f"coefficient {name!r} not in fit "
                           f"(dropped: {self.dropped})") from None

    def coef_table(self) -> list[dict]:
        out = []
        for j, name in enumerate(self.columns):
            se = float(np.sqrt(self.cov_beta[j, j]))
            z = self.beta[j] / se if se > 0 else np.nan
            p = 2.0 * stats.norm.sf(abs(z)) if np.isfinite(z) else np.nan
            out.append({"name": name, "estimate": float(self.beta[j]),
                        "se": se, "z": float(z), "p": float(p)})
        return out

    def to_dict(self) -> dict:
        return {
            "criterion": self.criterion,
            "coefficients": self.coef_table(),
            "var_components": {k: float(v) for k, v in self.var_components.items()},
            "loglik": float(self.loglik),
            "converged": bool(self.converged),
            "n": self.n,
            "p": self.p,
            "dropped": list(self.dropped),
        }


# ---------------------------------------------------------------------------
# Collinearity pruning


def _drop_collinear(x: np.ndarray, columns: list[str], protected: tuple = ()
                    ) -> tuple[np.ndarray, list[str], list[str]]:
    """Drop columns that are (near-)linear combinations of earlier columns,
    scanning left to right so later columns lose.

    Protected columns (the treatment indicator, a mediator) are scanned first
    so that when they are collinear with ordinary columns, the ordinary column
    is the one dropped.
    """
    order = [j for j, name in enumerate(columns) if name in protected]
    order += [j for j, name in enumerate(columns) if name not in protected]
    keep = list(order)
    dropped: list[str] = []
    while True:
        sub = x[:, keep]
        r = np.linalg.qr(sub, mode="r")
        diag = np.abs(np.diag(r))
        scale = max(diag.max(), 1e-300)
        bad = [i for i, d in enumerate(diag) if d <= scale * 1e-10]
        if not bad:
            break
        # drop the right-most offending column first, then re-factor
        j = keep[bad[-1]]
        dropped.append(columns[j])
        keep.remove(j)
        if not keep:
            break
    keep = sorted(keep)
    kept_names = [columns[j] for j in keep]
    return x[:, keep], kept_names, dropped


# ---------------------------------------------------------------------------
# Profiled criterion machinery

class _Profile:
    """Precomputed sufficient statistics for the profiled criterion."""

    def __init__(self, x: np.ndarray, y: np.ndarray, groups: dict, criterion: str):
        self.n, self.p = x.shape
        self.criterion = criterion
        b = np.column_stack([x, y])
        self.bb = b.T @ b
        self.names = list(groups)
        self.codes = [groups[g] for g in self.names]
        self.q = [int(c.max()) + 1 if len(c) else 0 for c in self.codes]
        self.counts = [np.bincount(c, minlength=k).astype(float)
                       for c, k in zip(self.codes, self.q)]
        self.u = [np.vstack([np.bincount(c, weights=b[:, j], minlength=k)
                             for j in range(self.p + 1)]).T
                  for c, k in zip(self.codes, self.q)]
        if len(self.names) == 2:
            c1, c2 = self.codes
            q1, q2 = self.q
            cross = np.bincount(c1 * q2 + c2, minlength=q1 * q2).astype(float)
            self.cross = cross.reshape(q1, q2)
        else:
            self.cross = None

    # -- criterion pieces -------------------------------------------------

    def _reduced_normal(self, theta: tuple) -> tuple[np.ndarray, float]:
        """Return C = B'W^-1B and log|W| for the given variance ratios."""
        if len(self.names) == 0 or all(t == 0.0 for t in theta):
            return self.bb.copy(), 0.0
        if len(self.names) == 1:
            t = theta[0]
            m = self.counts[0]
            w = t / (1.0 + t * m)
            logdet = float(np.sum(np.log1p(t * m)))
            u = self.u[0]
            c = self.bb - (u.T * w) @ u
            return c, logdet
        t1, t2 = theta
        q1, q2 = self.q
        ztz = np.zeros((q1 + q2, q1 + q2))
        ztz[:q1, :q1] = np.diag(self.counts[0])
        ztz[q1:, q1:] = np.diag(self.counts[1])
        ztz[:q1, q1:] = self.cross
        ztz[q1:, :q1] = self.cross.T
        d_half = np.concatenate([np.full(q1, math.sqrt(t1)), np.full(q2, math.sqrt(t2))])
        k = np.eye(q1 + q2) + (d_half[:, None] * ztz) * d_half[None, :]
        try:
            chol = np.linalg.cholesky(k)
        except np.linalg.LinAlgError as exc:
            raise EstimationError(f"variance-ratio system not positive definite: {exc}")
        logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
        u = np.vstack(self.u) * d_half[:, None]
        lu = np.linalg.solve(chol, u)
        c = self.bb - lu.T @ lu
        return c, logdet

    def solve(self, theta: tuple) -> dict:
        """GLS solve at fixed theta; returns beta, sigma2, criterion value."""
        c, logdet_w = self._reduced_normal(theta)
        cxx = c[:-1, :-1]
        cxy = c[:-1, -1]
        cyy = c[-1, -1]
        try:
            factor = cho_factor(cxx)
        except np.linalg.LinAlgError as exc:
            raise EstimabilityError(f"fixed-effect system singular at theta={theta}: {exc}")
        beta = cho_solve(factor, cxy)
        rwr = max(float(cyy - cxy @ beta), 1e-300)
        n, p = self.n, self.p
        if self.criterion == "REML":
            sigma2 = rwr / (n - p)
            logdet_cxx = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
            m2l = (n - p) * math.log(sigma2) + logdet_w + logdet_cxx \
                + (n - p) * (1.0 + math.log(2.0 * math.pi))
        else:
            sigma2 = rwr / n
            m2l = n * math.log(sigma2) + logdet_w + n * (1.0 + math.log(2.0 * math.pi))
        return {"beta": beta, "sigma2": sigma2, "m2l": m2l,
                "factor": factor, "c": c, "logdet_w": logdet_w}

    def objective(self, theta: tuple) -> float:
        return self.solve(theta)["m2l"]


def _golden_section(f, lo: float, hi: float, evals: list) -> float:
    """Deterministic golden-section minimization of f over [lo, hi] (log scale)."""
    a, b = lo, hi
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = f(c), f(d)
    it = 0
    while (b - a) > _GOLDEN_TOL and it < _MAX_GOLDEN_ITER:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = f(d)
        it += 1
    evals.append(it)
    return 0.5 * (a + b)


def _optimize_single(profile: _Profile) -> tuple[float, bool, int]:
    calls = [0]

    def obj(u: float) -> float:
        calls[0] += 1
        return profile.objective((math.exp(u),))

    grid = np.linspace(_LOG_THETA_LO, _LOG_THETA_HI, _GRID_POINTS)
    vals = [obj(u) for u in grid]
    j = int(np.argmin(vals))
    lo = grid[max(j - 1, 0)]
    hi = grid[min(j + 1, _GRID_POINTS - 1)]
    iters = []
    u_hat = _golden_section(obj, lo, hi, iters)
    theta = math.exp(u_hat)
    # snap to the OLS boundary when it is at least as good
    if profile.objective((0.0,)) <= profile.objective((theta,)) + 1e-12:
        theta = 0.0
    converged = iters[0] < _MAX_GOLDEN_ITER
    return theta, converged, calls[0]


def _optimize_crossed(profile: _Profile) -> tuple[tuple[float, float], bool, int]:
    """Coordinate descent over the two log variance ratios.

    The first sweep scans the full grid per axis; later sweeps refine inside a
    local bracket around the current point (coordinate zigzag on correlated
    groupings converges linearly, so the pass cap is generous)."""
    calls = [0]

    def obj(theta: tuple) -> float:
        calls[0] += 1
        return profile.objective(theta)

    theta = [0.0, 0.0]
    converged = False
    last_crit = np.inf
    for sweep in range(_MAX_OUTER_PASSES):
        previous = tuple(theta)
        for axis in (0, 1):
            def along(u, axis=axis):
                t = list(theta)
                t[axis] = math.exp(u)
                return obj(tuple(t))

            if sweep == 0 or theta[axis] == 0.0:
                grid = np.linspace(_LOG_THETA_LO, _LOG_THETA_HI, _GRID_POINTS)
                vals = [along(u) for u in grid]
                j = int(np.argmin(vals))
                lo, hi = grid[max(j - 1, 0)], grid[min(j + 1, _GRID_POINTS - 1)]
            else:
                center = math.log(theta[axis])
                lo = max(center - 1.5, _LOG_THETA_LO)
                hi = min(center + 1.5, _LOG_THETA_HI)
            iters = []
            u_hat = _golden_section(along, lo, hi, iters)
            candidate = math.exp(u_hat)
            t_zero = list(theta)
            t_zero[axis] = 0.0
            t_cand = list(theta)
            t_cand[axis] = candidate
            theta[axis] = 0.0 if obj(tuple(t_zero)) <= obj(tuple(t_cand)) + 1e-12 else candidate
        crit = obj(tuple(theta))
        theta_settled = all(abs(t - s) <= 1e-8 * max(1.0, t)
                            for t, s in zip(theta, previous))
        # alternating sub-resolution optima are numerically converged too
        crit_settled = abs(last_crit - crit) <= 1e-11 * (1.0 + abs(crit))
        last_crit = crit
        if theta_settled or (sweep > 0 and crit_settled):
            converged = True
            break
    return tuple(theta), converged, calls[0]


# ---------------------------------------------------------------------------
# Public API


def fit_lmm(design: DesignMatrix, criterion: str = "REML",
            protected: tuple = ()) -> MixedFit:
    """Fit the mixed model by profiled REML (or ML).

    Collinear fixed-effect columns are dropped right-to-left with a warning;
    ``protected`` names win every collinearity tie.  Raises
    :class:`EstimabilityError` when nothing estimable remains or when n <= p.
    """
    if criterion not in ("REML", "ML"):
        raise ValueError(f"criterion must be REML or ML, got {criterion!r}")
    if design.y is None:
        raise EstimabilityError("design has no response column")
    if design.n <= design.p:
        raise EstimabilityError(f"need n > p for estimation, got n={design.n}, p={design.p}")

    x, columns, dropped = _drop_collinear(design.x, design.columns, protected)
    if dropped:
        warnings.warn(f"dropped collinear design columns: {dropped}", stacklevel=2)
    if x.shape[1] == 0:
        raise EstimabilityError(f"no estimable fixed-effect columns remain (dropped {dropped})")
    n, p = x.shape
    if n <= p:
        raise EstimabilityError(f"need n > p for estimation, got n={n}, p={p}")

    # groupings with a single level are unidentifiable: pin their ratio at 0
    active, pinned = {}, []
    for name, codes in design.groups.items():
        if len(np.unique(codes)) <= 1:
            pinned.append(name)
        else:
            active[name] = codes

    profile = _Profile(x, design.y, active, criterion)
    if len(active) == 0:
        theta, converged, n_evals = (), True, 1
    elif len(active) == 1:
        t, converged, n_evals = _optimize_single(profile)
        theta = (t,)
    else:
        theta, converged, n_evals = _optimize_crossed(profile)

    sol = profile.solve(theta)
    beta, sigma2 = sol["beta"], sol["sigma2"]
    cov_beta = sigma2 * cho_solve(sol["factor"], np.eye(p))
    cov_beta = 0.5 * (cov_beta + cov_beta.T)

    var_components = {"residual": float(sigma2)}
    for name, t in zip(profile.names, theta):
        var_components[name] = float(t * sigma2)
    for name in pinned:
        var_components[name] = 0.0

    blups = _compute_blups(profile, theta, beta, design, active)
    for name in pinned:
        lv = design.levels.get(name, np.unique(design.groups[name]))
        blups[name] = {level: 0.0 for level in lv}

    return MixedFit(
        columns=columns,
        beta=np.asarray(beta, dtype=float),
        cov_beta=cov_beta,
        var_components=var_components,
        blups=blups,
        loglik=-0.5 * sol["m2l"],
        converged=converged,
        criterion=criterion,
        n=n, p=p,
        dropped=dropped,
        n_evals=n_evals,
        group_levels={g: design.levels.get(g, np.arange(int(design.groups[g].max()) + 1))
                      for g in design.groups},
    )


def _compute_blups(profile: _Profile, theta: tuple, beta: np.ndarray,
                   design: DesignMatrix, active: dict) -> dict:
    """b_hat = D Z' W^-1 r, assembled from the precomputed group sums."""
    blups: dict = {}
    if not active:
        return blups
    # Z'r per grouping, r = y - X beta
    zr = [u[:, -1] - u[:, :-1] @ beta for u in profile.u]
    if len(profile.names) == 1:
        t = theta[0]
        m = profile.counts[0]
        b_hat = t * zr[0] / (1.0 + t * m)
        name = profile.names[0]
        lv = design.levels.get(name, np.arange(profile.q[0]))
        blups[name] = {level: float(v) for level, v in zip(lv, b_hat)}
        return blups
    t1, t2 = theta
    q1, q2 = profile.q
    ztz = np.zeros((q1 + q2, q1 + q2))
    ztz[:q1, :q1] = np.diag(profile.counts[0])
    ztz[q1:, q1:] = np.diag(profile.counts[1])
    ztz[:q1, q1:] = profile.cross
    ztz[q1:, :q1] = profile.cross.T
    d = np.concatenate([np.full(q1, t1), np.full(q2, t2)])
    d_half = np.sqrt(d)
    k = np.eye(q1 + q2) + (d_half[:, None] * ztz) * d_half[None, :]
    zr_all = np.concatenate(zr)
    inner = np.linalg.solve(k, d_half * zr_all)
    zwr = zr_all - ztz @ (d_half * inner)
    b_hat = d * zwr
    for name, sl, q in zip(profile.names, (slice(0, q1), slice(q1, q1 + q2)), (q1, q2)):
        lv = design.levels.get(name, np.arange(q))
        blups[name] = {level: float(v) for level, v in zip(lv, b_hat[sl])}
    return blups


@dataclass
class WaldResult:
    statistic: float
    df: int
    pvalue: float


def wald_test(fit: MixedFit, names: list[str]) -> WaldResult:
    """Joint chi-square test that the named coefficients are all zero."""
    idx = [fit._index(name) for name in names]
    b = fit.beta[idx]
    v = fit.cov_beta[np.ix_(idx, idx)]
    try:
        stat = float(b @ np.linalg.solve(v, b))
    except np.linalg.LinAlgError:
        raise EstimationError(
            "covariance block for the tested coefficients is singular; "
            "the columns are likely collinear")
    df = len(idx)
    return WaldResult(statistic=stat, df=df, pvalue=float(stats.chi2.sf(stat, df)))


def confint(fit: MixedFit, name: str, level: float = 0.95) -> tuple[float, float]:
    """Wald normal confidence interval for one coefficient."""
    b = fit.coef(name)
    se = fit.se(name)
    z = stats.norm.ppf(0.5 + level / 2.0)
    return (b - z * se, b + z * se)


def linear_combination(fit: MixedFit, terms: list[tuple[str, float]]) -> tuple[float, float]:
    """Estimate and standard error of a weighted sum of coefficients."""
    idx = np.array([fit._index(name) for name, _ in terms])
    w = np.array([weight for _, weight in terms])
    est = float(w @ fit.beta[idx])
    var = float(w @ fit.cov_beta[np.ix_(idx, idx)] @ w)
    return est, float(np.sqrt(max(var, 0.0)))


def predict(fit: MixedFit, x: np.ndarray, columns: list[str],
            groups: dict | None = None, mode: str = "fixed_only") -> np.ndarray:
    """Predict new rows; ``with_blup`` adds each grouping's predicted
    intercept, falling back to 0 for unseen group keys."""
    if mode not in ("fixed_only", "with_blup"):
        raise ValueError(f"unknown prediction mode {mode!r}")
    x = np.asarray(x, dtype=float)
    try:
        sel = [columns.index(name) for name in fit.columns]
    except ValueError as exc:
        raise EstimabilityError(f"prediction frame is missing a fitted column: {exc}")
    out = x[:, sel] @ fit.beta
    if mode == "with_blup" and groups:
        for name, keys in groups.items():
            table = fit.blups.get(name, {})
            out = out + np.array([table.get(k, 0.0) for k in np.asarray(keys)])
    return out
