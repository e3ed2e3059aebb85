"""Reference estimators: mean-group OLS, CCE mean group, and helpers."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import DataError, NumericError
from .panel_data import PanelDataset, share_column


class BaselineWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class MgResult:
    slopes: pd.Series
    estimate: float
    variance: float
    bic: float
    rss: float
    n_obs: int
    n_params: int
    dropped: tuple = field(default=())

    @property
    def se(self) -> float:
        return math.sqrt(self.variance)

    @property
    def t_stat(self) -> float:
        return self.estimate / self.se


def mean_group(slopes) -> float:
    return float(np.mean(np.asarray(slopes, dtype=float)))


def mean_group_variance(slopes) -> float:
    """Nonparametric variance sum (b_i - b_bar)^2 / (N (N - 1))."""
    b = np.asarray(slopes, dtype=float)
    N = b.size
    if N < 2:
        raise DataError("need N >= 2 for variance")
    return float(np.sum((b - b.mean()) ** 2) / (N * (N - 1)))


def model_bic(residuals, n_params: float, n_obs: int | None = None) -> float:
    """log(RSS / n) + k log(n) / n.

    Only rankings between models fitted to the same data are meaningful.
    """
    r = np.asarray(residuals, dtype=float)
    n = r.size if n_obs is None else int(n_obs)
    rss = float(r @ r)
    if rss <= 0:
        raise NumericError("zero residuals; BIC undefined")
    return math.log(rss / n) + n_params * math.log(n) / n


def elasticity_to_marginal(elasticity: float, x_over_y: float) -> float:
    """Marginal effect dx/dy = elasticity * x / y."""
    if not x_over_y > 0:
        raise ValueError("level ratio must be positive")
    return elasticity * x_over_y


def _per_country(ds: PanelDataset, quantile, min_obs: int):
    col = share_column(quantile)
    out, dropped = [], []
    for country, sub in ds.frame.groupby("country", sort=False):
        y = sub[col].to_numpy(dtype=float)
        x = sub["capital_share"].to_numpy(dtype=float)
        if len(y) < min_obs:
            dropped.append((country, f"{len(y)} observations (< {min_obs})"))
            continue
        if np.ptp(x) <= 1e-12 * max(1.0, abs(x.mean())):
            dropped.append((country, "no within-country capital share variation"))
            continue
        out.append((country, sub["year"].to_numpy(), y, x))
    for c, why in dropped:
        warnings.warn(f"dropping {c}: {why}", BaselineWarning, stacklevel=3)
    return out, dropped


def _result(slopes: dict, resid: list, k_per: list, dropped) -> MgResult:
    if not slopes:
        raise DataError("no country left for the mean-group estimator")
    s = pd.Series(slopes, name="slope")
    r = np.concatenate(resid)
    return MgResult(slopes=s, estimate=mean_group(s), variance=mean_group_variance(s),
                    bic=model_bic(r, sum(k_per)), rss=float(r @ r), n_obs=r.size,
                    n_params=int(sum(k_per)), dropped=tuple(dropped))


def mg_ols(ds: PanelDataset, quantile=5) -> MgResult:
    """Mean group of per-country OLS slopes of the top share on the capital share."""
    units, dropped = _per_country(ds, quantile, min_obs=3)
    if len(units) < 2:
        raise DataError("need N >= 2 for variance")
    slopes, resid, ks = {}, [], []
    for country, _, y, x in units:
        dx = x - x.mean()
        b = float(dx @ (y - y.mean()) / (dx @ dx))
        a = y.mean() - b * x.mean()
        slopes[country] = b
        resid.append(y - a - b * x)
        ks.append(2)
    return _result(slopes, resid, ks, dropped)


def cross_section_means(ds: PanelDataset, quantile=5) -> pd.DataFrame:
    """Per-year averages of the top share and capital share over countries observed that year."""
    col = share_column(quantile)
    means = ds.frame.groupby("year")[[col, "capital_share"]].mean()
    means.columns = ["share_bar", "cs_bar"]
    return means


def cce_mg(ds: PanelDataset, quantile=5) -> MgResult:
    """Mean group of per-country slopes from regressions augmented with
    cross-sectional averages of both variables.

    Augmentation columns that are constant (or collinear) over a country's
    years are dropped with a warning; with both dropped the country's slope
    is its plain OLS slope.
    """
    units, dropped = _per_country(ds, quantile, min_obs=4)
    if len(units) < 2:
        raise DataError("need N >= 2 for variance")
    bars = cross_section_means(ds, quantile)
    slopes, resid, ks = {}, [], []
    reduced = []
    for country, years, y, x in units:
        aug = bars.loc[years].to_numpy()
        cols = [x, np.ones_like(x)]
        for j in range(aug.shape[1]):
            a = aug[:, j]
            if np.ptp(a) <= 1e-12 * max(1.0, float(np.abs(a).max())):
                continue
            trial = np.column_stack(cols + [a])
            s = np.linalg.svd(trial, compute_uv=False)
            if s[-1] <= 1e-10 * s[0]:
                continue
            cols.append(a)
        if len(cols) < 2 + aug.shape[1]:
            reduced.append(country)
        Z = np.column_stack(cols)
        if len(cols) == 2:
            dx = x - x.mean()
            b = float(dx @ (y - y.mean()) / (dx @ dx))
            coef = np.array([b, y.mean() - b * x.mean()])
        else:
            coef, *_ = np.linalg.lstsq(Z, y, rcond=None)
        slopes[country] = float(coef[0])
        resid.append(y - Z @ coef)
        ks.append(Z.shape[1])
    if reduced:
        warnings.warn(f"cross-sectional averages collinear for {len(reduced)} countries; "
                      "augmentation dropped there", BaselineWarning, stacklevel=2)
    return _result(slopes, resid, ks, dropped)


def tvc_bic(fit) -> float:
    """Model BIC of a TVC fit, counting effective degrees of freedom plus one
    shift per country."""
    resid = np.concatenate([gf.residuals for gf in fit.groups.values()])
    k = sum(gf.edf + gf.design.n_units for gf in fit.groups.values())
    return model_bic(resid, k)


def summary_table(rows) -> pd.DataFrame:
    """Rows of (estimator, quantile, estimate, t_stat, bic) as a frame."""
    return pd.DataFrame(list(rows), columns=["estimator", "quantile", "estimate", "t_stat", "bic"])
