"""Grouped time-varying coefficient estimation by penalized least squares.

For each estimated group the model

    S_it = delta_g(tau_it) * CS_it + mu_i + omega_g(tau_it) + eps_it

is fitted with both curves expanded in a common B-spline basis. The omega
columns use the grid-centered basis, so omega integrates to zero and the
country shifts mu_i carry the level. Country effects are removed by the
within transformation before the penalized solve and recovered afterwards.

Coefficient layout is ``[omega block (J) | delta block (J)]``. Because the
centered omega columns sum to zero (and the within transformation would
remove a constant anyway), the omega coefficients are only identified up to
a common shift; the last omega coefficient is pinned to zero. Neither the
fitted curves nor the difference penalty depend on that shift.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import splines
from .clustering import MIN_GROUP_SIZE, GroupAssignment, relabel, single_group
from .errors import DataError, NumericError, SingularSystemError
from .panel_data import PanelDataset, normalize_time, share_column, within_demean

GRID_POINTS = 101
BAND_Z = 1.959963984540054
PSI_LO, PSI_HI, PSI_STEPS = 1e-4, 1e6, 13
SINGULAR_RCOND = 1e-13


class EstimationWarning(RuntimeWarning):
    pass


# -- design -------------------------------------------------------------------

@dataclass(frozen=True)
class GroupDesign:
    """Stacked regression data for one group.

    Rows are country-major with years ascending. ``X`` holds the raw
    regressors, ``Xt``/``yt`` their within-country demeaned versions and
    ``Xbar``/``ybar`` the per-country means.
    """

    X: np.ndarray
    y: np.ndarray
    codes: np.ndarray
    num_basis: int
    fixed: tuple = ()
    group: int = 1
    countries: tuple = ()
    years: np.ndarray | None = None
    tau: np.ndarray | None = None
    x: np.ndarray | None = None
    rows: np.ndarray | None = None
    Xt: np.ndarray = field(init=False, repr=False)
    yt: np.ndarray = field(init=False, repr=False)
    Xbar: np.ndarray = field(init=False, repr=False)
    ybar: np.ndarray = field(init=False, repr=False)
    counts: np.ndarray = field(init=False, repr=False)
    gram: np.ndarray = field(init=False, repr=False)
    xty: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        y = np.asarray(self.y, dtype=float)
        codes = np.asarray(self.codes, dtype=np.intp)
        dx = within_demean(X, codes)
        dy = within_demean(y, codes)
        # factorize keeps first-appearance order; codes are already 0..k-1 in order
        if not np.array_equal(dx.labels, np.arange(len(dx.labels))):
            raise ValueError("codes must be 0..k-1 in order of first appearance")
        set_ = object.__setattr__
        set_(self, "X", X)
        set_(self, "y", y)
        set_(self, "codes", codes)
        set_(self, "Xt", dx.values)
        set_(self, "yt", dy.values)
        set_(self, "Xbar", dx.means)
        set_(self, "ybar", dy.means)
        set_(self, "counts", np.bincount(codes))
        set_(self, "gram", dx.values.T @ dx.values)
        set_(self, "xty", dx.values.T @ dy.values)

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def n_units(self) -> int:
        return len(self.counts)

    @property
    def n_effective(self) -> int:
        """Observations left after the within transformation."""
        return self.n - self.n_units

    @property
    def free(self) -> np.ndarray:
        return np.setdiff1d(np.arange(self.X.shape[1]), np.asarray(self.fixed, dtype=np.intp))


def assemble_design(ds: PanelDataset, basis: splines.SplineBasis,
                    assignment: GroupAssignment | None, quantile,
                    centered: splines.CenteredBasis | None = None, regressor=None,
                    min_group_size: int = MIN_GROUP_SIZE, skip_small: bool = False,
                    window=None) -> dict:
    """Per-group regression tables.

    The row for (i, t) is ``[Bc(tau_it), x_it * B(tau_it)]`` where ``Bc`` is
    the centered basis and ``x_it`` the capital share (or ``regressor`` when
    given, e.g. first-stage fitted values).

    Returns a dict ``group -> GroupDesign``. Groups smaller than
    ``min_group_size`` raise :class:`DataError`, or are left out with an
    :class:`EstimationWarning` when ``skip_small`` is set.
    """
    if assignment is None:
        assignment = single_group(ds)
    if centered is None:
        centered = splines.center_basis(basis)
    try:
        mapping = assignment.mapping()
    except ValueError:
        mapping = dict(zip(ds.country_ids, assignment.labels))
    missing = [c for c in ds.country_ids if c not in mapping]
    if missing:
        raise DataError(f"countries missing from assignment: {', '.join(missing)}")

    frame = ds.frame
    J = basis.num_basis
    tau = ds.tau(window)
    raw = splines.evaluate_basis(basis, tau)
    x = frame["capital_share"].to_numpy(dtype=float) if regressor is None else np.asarray(regressor, dtype=float)
    if x.shape != (len(frame),):
        raise ValueError("regressor must have one value per dataset row")
    y = ds.share(quantile)
    X = np.hstack([raw - centered.offsets, x[:, None] * raw])
    labels = frame["country"].map(mapping).to_numpy()

    designs, skipped = {}, []
    for g in sorted(set(int(v) for v in labels)):
        members = [c for c in ds.country_ids if mapping[c] == g]
        if len(members) < min_group_size:
            msg = f"group {g} has {len(members)} countries (< {min_group_size})"
            if not skip_small:
                raise DataError(msg)
            skipped.append(msg)
            continue
        rows = np.flatnonzero(labels == g)
        local = {c: k for k, c in enumerate(members)}
        codes = frame["country"].iloc[rows].map(local).to_numpy(dtype=np.intp)
        designs[g] = GroupDesign(
            X=X[rows], y=y[rows], codes=codes, num_basis=J, fixed=(J - 1,), group=g,
            countries=tuple(members), years=frame["year"].to_numpy()[rows], tau=tau[rows],
            x=x[rows], rows=rows)
    for msg in skipped:
        warnings.warn(msg + "; excluded from estimation", EstimationWarning, stacklevel=2)
    return designs


# -- penalized least squares ----------------------------------------------------

def block_penalty(penalties, psi, num_basis: int) -> np.ndarray:
    """psi1 * A1 on the omega block plus psi2 * A2 on the delta block."""
    A1, A2 = (getattr(p, "coefficients", p) for p in penalties)
    P = np.zeros((2 * num_basis, 2 * num_basis))
    P[:num_basis, :num_basis] = psi[0] * np.asarray(A1)
    P[num_basis:, num_basis:] = psi[1] * np.asarray(A2)
    return P


@dataclass(frozen=True)
class PlsSolution:
    psi: tuple
    beta: np.ndarray
    mu: np.ndarray
    fitted: np.ndarray
    residuals: np.ndarray
    rss: float
    edf: float
    inverse: np.ndarray  # (X~'X~ + P)^-1 on the free coefficients, zero-embedded
    min_eigenvalue: float

    def gcv(self, n_effective: int) -> float:
        return gcv_score(self.rss, self.edf, n_effective)


def gcv_score(rss: float, edf: float, n_effective: int) -> float:
    denom = n_effective - edf
    if denom <= 0:
        return math.inf
    return n_effective * rss / denom ** 2


def _check_psi(psi):
    psi = tuple(float(p) for p in psi)
    if len(psi) != 2:
        raise ValueError("psi must have two components")
    if any(p < 0 or not np.isfinite(p) for p in psi):
        raise ValueError(f"smoothing weights must be finite and nonnegative, got {psi}")
    return psi


def fit_pls(design: GroupDesign, penalties, psi, min_norm: bool = False) -> PlsSolution:
    """Solve (X~'X~ + P(psi)) beta = X~'S~ and recover the country shifts.

    Parameters
    ----------
    design : GroupDesign
    penalties : pair of PenaltyMatrix or (J, J) arrays
        Acting on the omega and delta blocks respectively.
    psi : pair of float
    min_norm : bool
        Use the minimum-norm least-squares solution when the system is
        singular instead of raising (for saturated, unpenalized fits).

    Raises
    ------
    SingularSystemError
        If the penalized normal matrix is numerically singular.
    """
    psi = _check_psi(psi)
    k = design.X.shape[1]
    if design.n_effective <= len(design.free):
        raise DataError(f"group {design.group}: {design.n_effective} within observations "
                        f"for {len(design.free)} coefficients")
    P = block_penalty(penalties, psi, design.num_basis)
    F = design.free
    M = design.gram[np.ix_(F, F)] + P[np.ix_(F, F)]
    w, V = np.linalg.eigh(M)
    tol = SINGULAR_RCOND * max(abs(w[-1]), 1e-300)
    if w[0] <= tol:
        if not min_norm:
            raise SingularSystemError(f"group {design.group}: penalized normal matrix is singular", float(w[0]))
        keep = w > tol
        Minv = (V[:, keep] / w[keep]) @ V[:, keep].T
    else:
        Minv = (V / w) @ V.T
    beta_f = Minv @ design.xty[F]
    beta = np.zeros(k)
    beta[F] = beta_f
    inverse = np.zeros((k, k))
    inverse[np.ix_(F, F)] = Minv
    resid_t = design.yt - design.Xt[:, F] @ beta_f
    edf = float(np.sum(Minv * design.gram[np.ix_(F, F)]))
    mu = design.ybar - design.Xbar @ beta
    fitted = design.X @ beta + mu[design.codes]
    return PlsSolution(psi=psi, beta=beta, mu=mu, fitted=fitted, residuals=design.y - fitted,
                       rss=float(resid_t @ resid_t), edf=edf, inverse=inverse,
                       min_eigenvalue=float(w[0]))


def psi_grid(lo: float = PSI_LO, hi: float = PSI_HI, steps: int = PSI_STEPS) -> list:
    axis = np.logspace(math.log10(lo), math.log10(hi), steps)
    return [(float(a), float(b)) for a in axis for b in axis]


def _tie_key(item):
    (p1, p2), score = item
    return (score, -(math.log10(p1 + 1e-300) + math.log10(p2 + 1e-300)), -p2)


def gcv_select(design: GroupDesign, penalties, grid=None):
    """Grid argmin of n_e * RSS / (n_e - edf)^2.

    ``grid`` is a sequence of (psi1, psi2) pairs, or a 1-D array of values
    that is expanded to its Cartesian square. Singular candidates score
    ``inf``. Ties go to the larger (smoother) candidate.

    Returns
    -------
    psi_hat : tuple
    trace : pandas.DataFrame
        One row per candidate with ``psi1, psi2, gcv, edf, rss``.
    """
    if grid is None:
        grid = psi_grid()
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ValueError("empty smoothing grid")
    if grid.ndim == 1:
        grid = np.array([(a, b) for a in grid for b in grid])
    records = []
    for p1, p2 in grid:
        try:
            sol = fit_pls(design, penalties, (p1, p2))
            records.append((p1, p2, sol.gcv(design.n_effective), sol.edf, sol.rss))
        except SingularSystemError:
            records.append((p1, p2, math.inf, math.nan, math.nan))
    trace = pd.DataFrame.from_records(records, columns=["psi1", "psi2", "gcv", "edf", "rss"])
    finite = [((r[0], r[1]), r[2]) for r in records if np.isfinite(r[2])]
    if not finite:
        raise SingularSystemError(f"group {design.group}: every smoothing candidate is singular", math.nan)
    best = min(finite, key=_tie_key)
    return best[0], trace


def select_smoothing(design: GroupDesign, penalties, lo: float = PSI_LO, hi: float = PSI_HI,
                     steps: int = PSI_STEPS, refine: bool = True):
    """Coarse log grid search followed by one local refinement pass."""
    psi, trace = gcv_select(design, penalties, psi_grid(lo, hi, steps))
    if not refine or steps < 2:
        return psi, trace
    step = (math.log10(hi) - math.log10(lo)) / (steps - 1)
    axes = []
    for p in psi:
        c = math.log10(p)
        pts = np.linspace(c - step, c + step, 9)
        pts = pts[(pts >= math.log10(lo) - 1e-12) & (pts <= math.log10(hi) + 1e-12)]
        axes.append(10.0 ** pts)
    local = [(a, b) for a in axes[0] for b in axes[1]]
    # the coarse winner is always re-scored, so refinement never gets worse
    psi2, trace2 = gcv_select(design, penalties, local + [psi])
    return psi2, pd.concat([trace, trace2], ignore_index=True)


# -- variance -------------------------------------------------------------------

@dataclass(frozen=True)
class Posterior:
    cov: np.ndarray
    v2: float
    mu_var: np.ndarray
    edf: float


def posterior_covariance(design: GroupDesign, solution: PlsSolution) -> Posterior:
    """Bayesian posterior covariance of the spline coefficients and shifts.

    cov = (X~'X~ + P)^-1 v2 with v2 = RSS / (n_e - edf). The shift of
    country i has variance v2 / T_i + Xbar_i' cov Xbar_i.
    """
    dof = design.n_effective - solution.edf
    v2 = solution.rss / dof if dof > 0 else math.nan
    if not (v2 > 0) or not np.isfinite(v2):
        raise NumericError(f"group {design.group}: nonpositive error variance estimate ({v2})")
    cov = solution.inverse * v2
    mu_var = v2 / design.counts + np.einsum("ij,jk,ik->i", design.Xbar, cov, design.Xbar)
    return Posterior(cov=cov, v2=v2, mu_var=mu_var, edf=solution.edf)


def robust_covariance(design: GroupDesign, solution: PlsSolution, flavor: str = "white",
                      bandwidth: int | None = None) -> np.ndarray:
    """Sandwich covariance bread^-1 meat bread^-1 with bread = X~'X~ + P.

    ``white`` uses sum x~ x~' e^2. ``hac`` adds Bartlett-weighted cross
    products within each country for observations up to ``bandwidth`` years
    apart; bandwidth 0 gives the white estimator.
    """
    if flavor not in ("white", "hac"):
        raise ValueError(f"unknown flavor {flavor!r}")
    if flavor == "hac":
        if bandwidth is None:
            T = int(np.max(design.counts))
            bandwidth = int(math.floor(4 * (T / 100) ** (2 / 9)))
        if bandwidth < 0:
            raise ValueError("bandwidth must be nonnegative")
    F = design.free
    resid = design.yt - design.Xt[:, F] @ solution.beta[F]
    U = design.Xt[:, F] * resid[:, None]
    if flavor == "white" or bandwidth == 0:
        meat = U.T @ U
    else:
        if design.years is None:
            raise ValueError("hac needs observation years")
        meat = np.zeros((len(F), len(F)))
        for c in range(design.n_units):
            idx = np.flatnonzero(design.codes == c)
            yrs = design.years[idx].astype(float)
            lag = np.abs(yrs[:, None] - yrs[None, :])
            W = np.clip(1.0 - lag / (bandwidth + 1), 0.0, None)
            Ui = U[idx]
            meat += Ui.T @ W @ Ui
    bread_inv = solution.inverse[np.ix_(F, F)]
    k = design.X.shape[1]
    out = np.zeros((k, k))
    out[np.ix_(F, F)] = bread_inv @ meat @ bread_inv
    return out


# -- fitted objects --------------------------------------------------------------

@dataclass(frozen=True)
class AverageEffect:
    estimate: float
    se: float
    weights: np.ndarray = field(repr=False)

    @property
    def t_stat(self) -> float:
        return self.estimate / self.se if self.se > 0 else math.nan


@dataclass(frozen=True)
class GroupFit:
    """Estimates for one group; curves live on ``grid``."""

    group: int
    design: GroupDesign
    solution: PlsSolution
    posterior: Posterior
    basis: splines.SplineBasis
    centered: splines.CenteredBasis
    gcv_trace: pd.DataFrame | None
    grid: np.ndarray

    @property
    def countries(self) -> tuple:
        return self.design.countries

    @property
    def psi(self) -> tuple:
        return self.solution.psi

    @property
    def coef(self) -> np.ndarray:
        """J x 2 array, columns (omega, delta)."""
        J = self.basis.num_basis
        return np.column_stack([self.solution.beta[:J], self.solution.beta[J:]])

    @property
    def cov(self) -> np.ndarray:
        return self.posterior.cov

    @property
    def v2(self) -> float:
        return self.posterior.v2

    @property
    def edf(self) -> float:
        return self.solution.edf

    @property
    def mu(self) -> pd.Series:
        return pd.Series(self.solution.mu, index=list(self.countries), name="mu_hat")

    @property
    def mu_se(self) -> pd.Series:
        return pd.Series(np.sqrt(self.posterior.mu_var), index=list(self.countries), name="se")

    @property
    def residuals(self) -> np.ndarray:
        return self.solution.residuals

    def delta(self, tau) -> np.ndarray:
        return splines.evaluate_basis(self.basis, tau) @ self.coef[:, 1]

    def omega(self, tau) -> np.ndarray:
        return self.centered.evaluate(tau) @ self.coef[:, 0]

    def curve_se(self, tau, cov=None):
        """Pointwise standard errors of (delta, omega) at ``tau``."""
        cov = self.cov if cov is None else cov
        J = self.basis.num_basis
        B = np.atleast_2d(splines.evaluate_basis(self.basis, tau))
        Bc = B - self.centered.offsets
        sd_d = np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", B, cov[J:, J:], B), 0.0))
        sd_w = np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", Bc, cov[:J, :J], Bc), 0.0))
        return sd_d, sd_w

    def curves(self, cov=None, z: float = BAND_Z) -> pd.DataFrame:
        tau = self.grid
        d, w = self.delta(tau), self.omega(tau)
        sd_d, sd_w = self.curve_se(tau, cov)
        return pd.DataFrame({
            "tau": tau, "delta": d, "delta_lo": d - z * sd_d, "delta_hi": d + z * sd_d,
            "omega": w, "omega_lo": w - z * sd_w, "omega_hi": w + z * sd_w,
        })

    def grid_weights(self) -> np.ndarray:
        """Observation counts at the grid point nearest each observation."""
        idx = np.rint(self.design.tau * (len(self.grid) - 1)).astype(int)
        return np.bincount(idx, minlength=len(self.grid)).astype(float)

    def average_effect(self, cov=None) -> AverageEffect:
        w = self.grid_weights()
        a = (w / w.sum()) @ splines.evaluate_basis(self.basis, self.grid)
        J = self.basis.num_basis
        cov = self.cov if cov is None else cov
        est = float(a @ self.coef[:, 1])
        var = float(a @ cov[J:, J:] @ a)
        return AverageEffect(estimate=est, se=math.sqrt(max(var, 0.0)), weights=w)

    def robust_covariance(self, flavor: str = "white", bandwidth: int | None = None) -> np.ndarray:
        return robust_covariance(self.design, self.solution, flavor, bandwidth)


@dataclass(frozen=True)
class FirstStageFit:
    """Country-specific slopes of capital share on the profit tax rate.

    ``fitted`` is aligned with the rows of ``sample``.
    """

    sample: PanelDataset
    slope: pd.Series
    intercept: pd.Series
    year_effects: pd.Series
    fitted: np.ndarray
    residuals: np.ndarray
    r2: pd.Series
    f_stat: float
    iterations: int
    excluded: tuple = ()


@dataclass(frozen=True)
class TvcFit:
    groups: dict
    basis: splines.SplineBasis
    centered: splines.CenteredBasis
    quantile: str
    window: tuple
    assignment: GroupAssignment
    dataset: PanelDataset
    skipped: tuple = ()
    first_stage: FirstStageFit | None = None

    @property
    def iv(self) -> bool:
        return self.first_stage is not None

    def group_of(self, country) -> int | None:
        for g, gf in self.groups.items():
            if country in gf.countries:
                return g
        return None

    def average_effect(self, group: int | None = None) -> AverageEffect:
        """Observation-weighted time average of delta-hat, per group or pooled."""
        if group is not None:
            return self.groups[group].average_effect()
        effects = [(gf.design.n, gf.average_effect()) for gf in self.groups.values()]
        n = sum(k for k, _ in effects)
        est = sum(k * e.estimate for k, e in effects) / n
        var = sum((k / n) ** 2 * e.se ** 2 for k, e in effects)
        w = sum(e.weights for _, e in effects)
        return AverageEffect(estimate=est, se=math.sqrt(var), weights=w)

    def predictions(self) -> pd.DataFrame:
        """Per observation: components of the fitted top share.

        ``kappa`` (top earners' share of capital income) is delta + lambda
        with lambda = mu + omega.
        """
        parts = []
        for g, gf in self.groups.items():
            d = gf.design
            delta = gf.delta(d.tau)
            omega = gf.omega(d.tau)
            mu = gf.solution.mu[d.codes]
            parts.append(pd.DataFrame({
                "country": np.asarray(gf.countries, dtype=object)[d.codes], "year": d.years,
                "group": g, "tau": d.tau, "capital_share": d.x, "share": d.y,
                "delta": delta, "omega": omega, "mu": mu, "fitted": gf.solution.fitted,
                "residual": gf.solution.residuals, "kappa": delta + mu + omega, "_row": d.rows,
            }))
        out = pd.concat(parts).sort_values("_row").drop(columns="_row")
        return out.reset_index(drop=True)

    def kappa(self, country, year) -> float:
        g = self.group_of(country)
        if g is None:
            raise KeyError(country)
        gf = self.groups[g]
        tau = normalize_time(year, self.window)
        lam = gf.mu[country] + float(gf.omega(tau))
        return float(gf.delta(tau)) + lam


def fit_tvc(ds: PanelDataset, assignment: GroupAssignment | None = None, quantile=5,
            basis: splines.SplineBasis | None = None, psi=None, psi_lo: float = PSI_LO,
            psi_hi: float = PSI_HI, psi_steps: int = PSI_STEPS, refine: bool = True,
            min_group_size: int = MIN_GROUP_SIZE, regressor=None, grid_points: int = GRID_POINTS,
            first_stage: FirstStageFit | None = None) -> TvcFit:
    """Estimate delta_g and omega_g for every group of ``assignment``.

    ``assignment=None`` fits the full panel as one group. ``psi=None`` picks
    the smoothing weights per group by GCV; otherwise the given pair is used
    for all groups.
    """
    basis = basis or splines.make_basis()
    centered = splines.center_basis(basis)
    if assignment is None:
        assignment = single_group(ds)
        min_group_size = min(min_group_size, 1)
    elif assignment.countries is not None and tuple(assignment.countries) != ds.country_ids:
        assignment = relabel(assignment, ds.country_ids)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", EstimationWarning)
        designs = assemble_design(ds, basis, assignment, quantile, centered=centered,
                                  regressor=regressor, min_group_size=min_group_size, skip_small=True)
    skipped = tuple(str(w.message) for w in caught if issubclass(w.category, EstimationWarning))
    for msg in skipped:
        warnings.warn(msg, EstimationWarning, stacklevel=2)
    if not designs:
        raise DataError("no group large enough to estimate")
    A = splines.penalty_matrix(basis)
    penalties = (A, A)
    grid = np.linspace(0.0, 1.0, grid_points)
    groups = {}
    for g, design in designs.items():
        trace = None
        if psi is None:
            psi_g, trace = select_smoothing(design, penalties, psi_lo, psi_hi, psi_steps, refine)
        else:
            psi_g = psi
        sol = fit_pls(design, penalties, psi_g)
        post = posterior_covariance(design, sol)
        groups[g] = GroupFit(group=g, design=design, solution=sol, posterior=post, basis=basis,
                             centered=centered, gcv_trace=trace, grid=grid)
    return TvcFit(groups=groups, basis=basis, centered=centered, quantile=share_column(quantile),
                  window=ds.window, assignment=assignment, dataset=ds, skipped=skipped,
                  first_stage=first_stage)


# -- instrumental variables ------------------------------------------------------

def _country_ols(y, x, codes, k):
    """Per-unit intercept and slope of y on x."""
    n = np.bincount(codes, minlength=k).astype(float)
    mx = np.bincount(codes, x, minlength=k) / n
    my = np.bincount(codes, y, minlength=k) / n
    dx = x - mx[codes]
    dy = y - my[codes]
    sxx = np.bincount(codes, dx * dx, minlength=k)
    sxy = np.bincount(codes, dx * dy, minlength=k)
    slope = sxy / sxx
    return my - slope * mx, slope


def _two_way(y, x, codes, tcodes, k, n_t, with_slope, tol, max_iter):
    effects = np.zeros(n_t)
    t_count = np.bincount(tcodes, minlength=n_t).astype(float)
    prev = None
    for it in range(1, max_iter + 1):
        target = y - effects[tcodes]
        if with_slope:
            a, b = _country_ols(target, x, codes, k)
        else:
            a = np.bincount(codes, target, minlength=k) / np.bincount(codes, minlength=k)
            b = np.zeros(k)
        part = a[codes] + b[codes] * x
        effects = np.bincount(tcodes, y - part, minlength=n_t) / t_count
        fitted = part + effects[tcodes]
        if prev is not None and np.max(np.abs(fitted - prev)) < tol:
            break
        prev = fitted
    # finish on a country step so within-country normal equations hold exactly
    target = y - effects[tcodes]
    if with_slope:
        a, b = _country_ols(target, x, codes, k)
    else:
        a = np.bincount(codes, target, minlength=k) / np.bincount(codes, minlength=k)
        b = np.zeros(k)
    shift = effects.mean()
    return a + shift, b, effects - shift, it


def first_stage(ds: PanelDataset, min_obs: int = 3, tol: float = 1e-10,
                max_iter: int = 100_000) -> FirstStageFit:
    """Project capital share on the profit tax rate with country-specific slopes.

    Fitted values are ``slope_i * PTR_it + intercept_i + year_t``. The
    coefficients come from alternating between per-country regressions and
    year means until the fitted values move by less than ``tol``. Year
    effects are normalized to mean zero over the instrument years.

    Countries with fewer than ``min_obs`` instrument years or a constant
    instrument are left out with a warning.
    """
    frame = ds.frame
    has = frame["profit_tax_rate"].notna().to_numpy()
    if not has.any():
        raise DataError("no profit_tax_rate observations")
    sub = frame[has]
    excluded = []
    keep = []
    for c in ds.country_ids:
        vals = sub.loc[sub["country"] == c, "profit_tax_rate"].to_numpy()
        if len(vals) == 0:
            continue
        if len(vals) < min_obs:
            excluded.append((c, f"{len(vals)} instrument years (< {min_obs})"))
        elif np.ptp(vals) <= 1e-12:
            excluded.append((c, "constant profit_tax_rate"))
        else:
            keep.append(c)
    for c, why in excluded:
        warnings.warn(f"first stage drops {c}: {why}", EstimationWarning, stacklevel=2)
    if not keep:
        raise DataError("insufficient profit_tax_rate coverage for the first stage")
    sample = ds.subset(countries=keep, mask=has)
    f = sample.frame
    codes = sample.country_codes()
    years = f["year"].to_numpy()
    uyears, tcodes = np.unique(years, return_inverse=True)
    y = f["capital_share"].to_numpy(dtype=float)
    x = f["profit_tax_rate"].to_numpy(dtype=float)
    k = sample.n_countries

    a, b, e, iters = _two_way(y, x, codes, tcodes, k, len(uyears), True, tol, max_iter)
    fitted = b[codes] * x + a[codes] + e[tcodes]
    resid = y - fitted

    ya = y - e[tcodes]
    dev = ya - (np.bincount(codes, ya, minlength=k) / np.bincount(codes, minlength=k))[codes]
    sst = np.bincount(codes, dev ** 2, minlength=k)
    sse = np.bincount(codes, resid ** 2, minlength=k)
    with np.errstate(divide="ignore", invalid="ignore"):
        r2 = np.where(sst > 0, 1.0 - sse / sst, np.nan)

    a0, _, e0, _ = _two_way(y, x, codes, tcodes, k, len(uyears), False, tol, max_iter)
    rss_r = float(np.sum((y - a0[codes] - e0[tcodes]) ** 2))
    rss_u = float(resid @ resid)
    df_u = len(y) - 2 * k - (len(uyears) - 1)
    f_stat = ((rss_r - rss_u) / k) / (rss_u / df_u) if df_u > 0 and rss_u > 0 else math.inf

    idx = list(sample.country_ids)
    return FirstStageFit(
        sample=sample, slope=pd.Series(b, index=idx, name="slope"),
        intercept=pd.Series(a, index=idx, name="intercept"),
        year_effects=pd.Series(e, index=uyears, name="year_effect"), fitted=fitted,
        residuals=resid, r2=pd.Series(r2, index=idx, name="r2"), f_stat=f_stat,
        iterations=iters, excluded=tuple(excluded))


def fit_tvc_iv(ds: PanelDataset, assignment: GroupAssignment | None = None, quantile=5,
               stage: FirstStageFit | None = None, **kwargs) -> TvcFit:
    """Same estimator with first-stage fitted capital shares as the regressor.

    Runs on the instrument sample; its time window is the window of that
    sample.
    """
    stage = stage or first_stage(ds)
    sample = stage.sample
    if assignment is not None:
        assignment = relabel(assignment, sample.country_ids)
    return fit_tvc(sample, assignment, quantile, regressor=stage.fitted, first_stage=stage, **kwargs)
