"""Country classification by KMeans on time-averaged moments, with BIC choice of G."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError
from .panel_data import PanelDataset, time_averages

DEFAULT_N_INIT = 100
DEFAULT_G_MAX = 5
DEFAULT_ZETA = 3.0
DEFAULT_CLASSIFY_QUANTILE = 10
MIN_GROUP_SIZE = 4


@dataclass(frozen=True)
class FeatureScaling:
    mean: np.ndarray
    sd: np.ndarray
    ddof: int = 1

    def apply(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=float) - self.mean) / self.sd


@dataclass(frozen=True)
class GroupAssignment:
    """Result of one KMeans fit.

    ``labels`` take values 1..G in canonical order: group 1 holds point 0,
    group 2 the first point not in group 1, and so on.
    """

    G: int
    labels: np.ndarray
    centers: np.ndarray
    objective: float
    feature_scaling: FeatureScaling | None = None
    countries: tuple | None = None
    trace: tuple = field(default=())

    def mapping(self) -> dict:
        if self.countries is None:
            raise ValueError("assignment carries no country identifiers")
        return {c: int(g) for c, g in zip(self.countries, self.labels)}

    def sizes(self) -> dict:
        return {g: int(np.sum(self.labels == g)) for g in range(1, self.G + 1)}

    def members(self, g: int) -> list:
        idx = np.flatnonzero(self.labels == g)
        if self.countries is None:
            return idx.tolist()
        return [self.countries[i] for i in idx]

    def outlier_groups(self, min_size: int = MIN_GROUP_SIZE) -> list:
        return [g for g, n in self.sizes().items() if n < min_size]


@dataclass(frozen=True)
class BicTable:
    rows: tuple  # (G, fit, penalty, bic)
    selected_G: int
    sigma2_hat: float
    zeta: float
    G_max: int

    def as_records(self) -> list:
        return [dict(G=g, fit=f, penalty=p, bic=b) for g, f, p, b in self.rows]


def standardize_features(moments, ddof: int = 1):
    """Center and scale each column to unit standard deviation.

    ``ddof=1`` (default) uses the sample standard deviation, ``ddof=0`` the
    population one.
    """
    pts = np.asarray(moments, dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 2:
        raise ValueError("need at least two points to standardize")
    mean = pts.mean(axis=0)
    sd = pts.std(axis=0, ddof=ddof)
    if np.any(sd <= 1e-14 * np.maximum(1.0, np.abs(mean))):
        raise DataError("zero-variance feature; cannot standardize")
    scaling = FeatureScaling(mean=mean, sd=sd, ddof=ddof)
    return scaling.apply(pts), scaling


def kmeans_objective(points, labels, centers) -> float:
    pts = np.asarray(points, dtype=float)
    lab = np.asarray(labels) - 1
    return float(np.mean(np.sum((pts - centers[lab]) ** 2, axis=1)))


def _canonical(labels0: np.ndarray, G: int):
    """Relabel 0-based labels by order of first appearance; return (perm map)."""
    order = []
    for g in labels0:
        if g not in order:
            order.append(int(g))
            if len(order) == G:
                break
    remap = np.empty(G, dtype=np.intp)
    for new, old in enumerate(order):
        remap[old] = new
    return remap


def _lloyd_run(pts: np.ndarray, G: int, start: np.ndarray, max_iter: int):
    centers = pts[start].copy()
    labels = None
    prev_obj = math.inf
    trace = []
    for _ in range(max_iter):
        d2 = np.sum((pts[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new = np.argmin(d2, axis=1)
        counts = np.bincount(new, minlength=G)
        while np.any(counts == 0):
            # reseed an empty center with the point farthest from its center
            g = int(np.flatnonzero(counts == 0)[0])
            own = d2[np.arange(len(pts)), new]
            own[counts[new] <= 1] = -1.0
            far = int(np.argmax(own))
            counts[new[far]] -= 1
            new[far] = g
            counts[g] += 1
        new_centers = np.zeros_like(centers)
        np.add.at(new_centers, new, pts)
        new_centers /= counts[:, None]
        obj = float(np.mean(np.sum((pts - new_centers[new]) ** 2, axis=1)))
        if labels is not None and (np.array_equal(new, labels) or obj >= prev_obj):
            break
        labels, centers, prev_obj = new, new_centers, obj
        trace.append(obj)
    return labels, centers, prev_obj, trace


def lloyd_kmeans(points, G: int, n_init: int = DEFAULT_N_INIT, seed: int = 0,
                 max_iter: int = 300, countries=None,
                 feature_scaling: FeatureScaling | None = None) -> GroupAssignment:
    """Best of ``n_init`` Lloyd runs from random distinct starting points.

    Ties on the objective go to the earliest restart. Deterministic for a
    given seed.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ValueError("empty input")
    N = pts.shape[0]
    if G < 1 or G > N:
        raise ValueError(f"G={G} must satisfy 1 <= G <= N={N}")
    if n_init < 1:
        raise ValueError("n_init must be at least 1")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        start = rng.choice(N, size=G, replace=False)
        labels, centers, obj, trace = _lloyd_run(pts, G, start, max_iter)
        if best is None or obj < best[2]:
            best = (labels, centers, obj, trace)
    labels, centers, obj, trace = best
    remap = _canonical(labels, G)
    labels = remap[labels] + 1
    ordered = np.empty_like(centers)
    ordered[remap] = centers
    if countries is not None:
        countries = tuple(countries)
    return GroupAssignment(G=G, labels=labels, centers=ordered, objective=obj,
                           feature_scaling=feature_scaling, countries=countries, trace=tuple(trace))


def bic_select(points, G_max: int = DEFAULT_G_MAX, zeta: float = DEFAULT_ZETA,
               n_init: int = DEFAULT_N_INIT, seed: int = 0, countries=None,
               feature_scaling: FeatureScaling | None = None):
    """Choose G in 2..G_max by the penalized KMeans objective.

    BIC(G) = objective(G) + sigma2 * 2G * zeta * log(N) / N, with sigma2
    estimated from the G_max fit as RSS / (2 (N - G_max)). Ties go to the
    smaller G.

    Returns
    -------
    (BicTable, GroupAssignment)
    """
    pts = np.asarray(points, dtype=float)
    N = pts.shape[0]
    if N <= G_max:
        raise ValueError(f"need N > G_max, got N={N}, G_max={G_max}")
    if G_max < 2:
        raise ValueError("G_max must be at least 2")
    fits = {}
    for G in range(2, G_max + 1):
        fits[G] = lloyd_kmeans(pts, G, n_init=n_init, seed=_derive_seed(seed, G),
                               countries=countries, feature_scaling=feature_scaling)
    rss_max = N * fits[G_max].objective
    sigma2 = rss_max / (2.0 * (N - G_max))
    rows = []
    for G in range(2, G_max + 1):
        pen = sigma2 * 2 * G * zeta * math.log(N) / N
        rows.append((G, fits[G].objective, pen, fits[G].objective + pen))
    best = min(rows, key=lambda r: (r[3], r[0]))
    table = BicTable(rows=tuple(rows), selected_G=best[0], sigma2_hat=sigma2, zeta=zeta, G_max=G_max)
    return table, fits[best[0]]


def _derive_seed(seed: int, G: int) -> int:
    return int(np.random.SeedSequence([seed, G]).generate_state(1)[0])


def classify(ds: PanelDataset, quantile=DEFAULT_CLASSIFY_QUANTILE, G: int | None = None,
             G_max: int = DEFAULT_G_MAX, zeta: float = DEFAULT_ZETA, n_init: int = DEFAULT_N_INIT,
             seed: int = 0, ddof: int = 1):
    """Standardize country averages and cluster them.

    With ``G=None`` the number of groups is chosen by :func:`bic_select` and
    the table is returned alongside; otherwise the table is ``None``.
    """
    moments = time_averages(ds, quantile)
    pts, scaling = standardize_features(moments.to_numpy(), ddof=ddof)
    if G is None:
        return bic_select(pts, G_max=G_max, zeta=zeta, n_init=n_init, seed=seed,
                          countries=ds.country_ids, feature_scaling=scaling)[::-1]
    fit = lloyd_kmeans(pts, G, n_init=n_init, seed=seed, countries=ds.country_ids,
                       feature_scaling=scaling)
    return fit, None


def single_group(ds: PanelDataset) -> GroupAssignment:
    """Everyone in group 1 (the full-panel model)."""
    n = ds.n_countries
    return GroupAssignment(G=1, labels=np.ones(n, dtype=np.intp), centers=np.zeros((1, 2)),
                           objective=math.nan, countries=ds.country_ids)


def write_assignment(assignment: GroupAssignment, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["country", "group"])
        for c, g in assignment.mapping().items():
            w.writerow([c, g])


def read_assignment(path, ds: PanelDataset | None = None) -> GroupAssignment:
    """Read a ``country,group`` CSV back into an assignment.

    With ``ds`` given, the countries are put in dataset order and every
    dataset country must be present.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"country", "group"} <= set(reader.fieldnames):
            raise DataError(f"{path}: expected header country,group")
        pairs = [(row["country"], int(row["group"])) for row in reader]
    lookup = dict(pairs)
    if ds is not None:
        missing = [c for c in ds.country_ids if c not in lookup]
        if missing:
            raise DataError(f"countries missing from assignment: {', '.join(missing)}")
        countries = ds.country_ids
    else:
        countries = tuple(c for c, _ in pairs)
    labels = np.array([lookup[c] for c in countries], dtype=np.intp)
    G = int(labels.max())
    return GroupAssignment(G=G, labels=labels, centers=np.full((G, 2), np.nan), objective=math.nan,
                           countries=tuple(countries))


def relabel(assignment: GroupAssignment, countries) -> GroupAssignment:
    """Restrict an assignment to ``countries`` (order preserved from the argument)."""
    lookup = assignment.mapping()
    labels = np.array([lookup[c] for c in countries], dtype=np.intp)
    return replace(assignment, labels=labels, countries=tuple(countries))
