"""Shapley attribution of fitted top shares to three time-varying components.

For country i in group g the prediction is rewritten as

    S_hat = mu_i + (delta_t - delta_bar) * CS + delta_bar * CS + omega_t

and the three non-constant terms (deviation, level, labor) are the players.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
import pandas as pd

from .errors import DataError

COMPONENTS = ("dev", "level", "labor")
MODES = ("exact", "paper_literal")


def coalition_weight(size: int, n_players: int, mode: str = "exact") -> float:
    if mode == "exact":
        return math.factorial(size) * math.factorial(n_players - size - 1) / math.factorial(n_players)
    if mode == "paper_literal":
        return 1.0 / n_players
    raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")


def shapley_values(values, base=0.0, mode: str = "exact") -> np.ndarray:
    """Attributions for the additive value function f(S) = base + sum_{j in S} values_j.

    ``values`` has one row per observation and one column per player. Every
    coalition is enumerated; ``paper_literal`` weights each marginal
    contribution by 1/n instead of the Shapley coalition weight.
    """
    v = np.atleast_2d(np.asarray(values, dtype=float))
    n_players = v.shape[1]
    base = np.broadcast_to(np.asarray(base, dtype=float), (v.shape[0],))

    def f(coalition):
        idx = list(coalition)
        return base + (v[:, idx].sum(axis=1) if idx else 0.0)

    phi = np.zeros_like(v)
    for j in range(n_players):
        others = [k for k in range(n_players) if k != j]
        for size in range(n_players):
            w = coalition_weight(size, n_players, mode)
            for S in itertools.combinations(others, size):
                phi[:, j] += w * (f(S + (j,)) - f(S))
    return phi


def decompose(fit, ds=None, mode: str = "exact") -> pd.DataFrame:
    """Per-observation attributions for every estimated group.

    Columns: ``country, group, year, mu, dev, level, labor`` (component
    values), ``phi_dev, phi_level, phi_labor`` and ``fitted``. ``delta_bar``
    is each group's observation-weighted average of delta-hat.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    pred = fit.predictions()
    if ds is not None:
        keys = set(zip(pred["country"], pred["year"]))
        covered = [c for c in ds.country_ids if fit.group_of(c) is not None]
        sub = ds.frame[ds.frame["country"].isin(covered)]
        missing = [k for k in zip(sub["country"], sub["year"]) if k not in keys]
        if missing:
            raise DataError(f"fit does not cover {len(missing)} observations, e.g. {missing[0]}")
    dbar = {g: gf.average_effect().estimate for g, gf in fit.groups.items()}
    pred["delta_bar"] = pred["group"].map(dbar)
    cs = pred["capital_share"].to_numpy()
    comps = np.column_stack([
        (pred["delta"].to_numpy() - pred["delta_bar"].to_numpy()) * cs,
        pred["delta_bar"].to_numpy() * cs,
        pred["omega"].to_numpy(),
    ])
    phi = shapley_values(comps, base=pred["mu"].to_numpy(), mode=mode)
    out = pred[["country", "group", "year", "mu", "delta_bar"]].copy()
    for k, name in enumerate(COMPONENTS):
        out[name] = comps[:, k]
    for k, name in enumerate(COMPONENTS):
        out[f"phi_{name}"] = phi[:, k]
    out["fitted"] = pred["fitted"].to_numpy()
    return out


def summarize_proportions(attributions: pd.DataFrame, how: str = "change", tol: float = 1e-12):
    """Share of each component in a country's predicted inequality.

    ``how="change"`` measures each component by the change in its
    attribution from the first to the last observed year; ``how="average"``
    uses its period average. Proportions are signed and sum to one. When the
    three contributions cancel (|sum| <= tol) the country is flagged and its
    proportions are NaN.

    Returns
    -------
    per_country : DataFrame
        ``country, group, prop_delta, prop_cs, prop_omega, flagged``
    group_means : DataFrame
        Mean proportions by group over unflagged countries.
    """
    if how not in ("change", "average"):
        raise ValueError("how must be 'change' or 'average'")
    cols = ["phi_dev", "phi_level", "phi_labor"]
    rows = []
    for country, sub in attributions.groupby("country", sort=False):
        sub = sub.sort_values("year")
        if len(sub) < 2:
            raise DataError(f"{country}: need at least two years for proportions")
        phi = sub[cols].to_numpy()
        contrib = phi[-1] - phi[0] if how == "change" else phi.mean(axis=0)
        total = contrib.sum()
        flagged = abs(total) <= tol
        prop = np.full(3, np.nan) if flagged else contrib / total
        rows.append((country, int(sub["group"].iloc[0]), *prop, flagged))
    per_country = pd.DataFrame(rows, columns=["country", "group", "prop_delta", "prop_cs",
                                              "prop_omega", "flagged"])
    group_means = (per_country[~per_country["flagged"]]
                   .groupby("group")[["prop_delta", "prop_cs", "prop_omega"]].mean().reset_index())
    return per_country, group_means
