"""Synthetic panels with known group structure, and a Monte Carlo harness.

Data are generated from

    S_it  = delta_g(tau_it) * CS0_it + mu_i + omega_g(tau_it) + e_y
    CS_it = CS0_it + e_x

where the true capital share CS0 mixes a persistent logit-scale AR(1)
component with a country-specific linear response to the profit tax rate.
Only ``top5`` follows the model; ``top10`` and ``top1`` are fixed multiples
so the panel passes validation.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable

import numpy as np
import pandas as pd
from scipy.special import expit, logit

from .errors import ConfigError, DataError
from .panel_data import PanelDataset

TOP10_FACTOR = 1.4
TOP1_FACTOR = 0.45
MAX_OUT_OF_RANGE = 0.001

DELTA_SHAPES = {
    "rising": lambda t: 0.1 + 0.2 * t,
    "dip": lambda t: 0.3 - 0.15 * np.sin(np.pi * t),
    "stable": lambda t: 0.2 + 0.0 * t,
}

# every shape integrates to zero on [0, 1]
OMEGA_SHAPES = {
    "sin": lambda t: np.sin(2 * np.pi * t),
    "cos": lambda t: np.cos(np.pi * t),
    "hump": lambda t: np.sin(np.pi * t) - 2 / np.pi,
    "zero": lambda t: 0.0 * t,
}


def delta_curve(shape):
    if isinstance(shape, str) and shape.startswith("const:"):
        c = float(shape.split(":", 1)[1])
        return lambda t: c + 0.0 * np.asarray(t, dtype=float)
    try:
        return DELTA_SHAPES[shape]
    except KeyError:
        raise ConfigError(f"unknown delta shape {shape!r}") from None


def omega_curve(shape, amplitude):
    try:
        base = OMEGA_SHAPES[shape]
    except KeyError:
        raise ConfigError(f"unknown omega shape {shape!r}") from None
    return lambda t: amplitude * base(np.asarray(t, dtype=float))


@dataclass(frozen=True)
class DgpSpec:
    """Parameters of the synthetic panel.

    Per-group tuples (``proportions``, ``delta_shapes``, ``omega_shapes``,
    ``cs_levels``, ``mu_levels``) must all have length ``n_groups``.
    Country-level spreads are standard deviations; ``cs_*`` parameters of
    the AR(1) part act on the logit scale.
    """

    n_countries: int = 60
    n_years: int = 40
    start_year: int = 1980
    n_groups: int = 1
    proportions: tuple = (1.0,)
    delta_shapes: tuple = ("stable",)
    omega_shapes: tuple = ("hump",)
    omega_amplitude: float = 0.02
    cs_levels: tuple = (0.40,)
    cs_country_sd: float = 0.10
    cs_persistence: float = 0.8
    cs_innovation: float = 0.10
    mu_levels: tuple = (0.17,)
    mu_sd: float = 0.02
    ptr_mean: float = 0.30
    ptr_country_sd: float = 0.05
    ptr_persistence: float = 0.8
    ptr_innovation: float = 0.03
    ptr_slope: float = -0.5
    ptr_slope_sd: float = 0.1
    noise_sd: float = 0.01
    measurement_sd: float = 0.0
    missing_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        G = self.n_groups
        for name in ("proportions", "delta_shapes", "omega_shapes", "cs_levels", "mu_levels"):
            if len(getattr(self, name)) != G:
                raise ConfigError(f"{name} needs {G} entries")
        if abs(sum(self.proportions) - 1.0) > 1e-9:
            raise ConfigError("group proportions must sum to 1")
        scales = ("omega_amplitude", "cs_country_sd", "cs_innovation", "mu_sd", "ptr_country_sd",
                  "ptr_innovation", "ptr_slope_sd", "noise_sd", "measurement_sd")
        if any(getattr(self, s) < 0 for s in scales):
            raise ConfigError("scales must be nonnegative")
        if not 0 <= self.missing_rate < 1:
            raise ConfigError("missing_rate must be in [0, 1)")
        if self.n_years < 2 or self.n_countries < 1:
            raise ConfigError("need at least one country and two years")

    @property
    def window(self) -> tuple:
        return (self.start_year, self.start_year + self.n_years - 1)

    def delta(self, g: int):
        return delta_curve(self.delta_shapes[g - 1])

    def omega(self, g: int):
        return omega_curve(self.omega_shapes[g - 1], self.omega_amplitude)

    def group_sizes(self) -> np.ndarray:
        raw = np.asarray(self.proportions) * self.n_countries
        sizes = np.floor(raw).astype(int)
        # largest remainders get the leftover countries, earlier groups first on ties
        left = self.n_countries - sizes.sum()
        order = sorted(range(self.n_groups), key=lambda g: (-(raw[g] - sizes[g]), g))
        for g in order[:left]:
            sizes[g] += 1
        return sizes

    # -- text config -----------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, values: dict, base: "DgpSpec | None" = None) -> "DgpSpec":
        """Apply ``key -> text`` overrides to ``base`` (defaults when None)."""
        base = base or cls()
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"unknown simulation key {key!r}")
            current = getattr(base, key)
            try:
                if isinstance(current, tuple):
                    items = [s.strip() for s in str(raw).split(",") if s.strip()]
                    kwargs[key] = tuple(float(s) if isinstance(current[0], float) else s for s in items)
                elif isinstance(current, int):
                    kwargs[key] = int(raw)
                else:
                    kwargs[key] = float(raw)
            except ValueError:
                raise ConfigError(f"bad value for {key}: {raw!r}") from None
        return replace(base, **kwargs)


def grouped_spec(separation: float = 3.0, n_countries: int = 60, n_years: int = 40,
                 seed: int = 0, **overrides) -> DgpSpec:
    """Three groups (rising / dip / stable delta) on a diagonal in moment space.

    Adjacent groups differ by ``separation`` within-group standard
    deviations in both time-averaged capital share and time-averaged top
    share, as in panels where high capital share goes with high inequality.
    """
    base = DgpSpec(n_countries=n_countries, n_years=n_years, n_groups=3,
                   proportions=(0.4, 0.3, 0.3), delta_shapes=("stable", "rising", "dip"),
                   omega_shapes=("hump", "sin", "cos"), cs_levels=(0.4, 0.4, 0.4),
                   mu_levels=(0.17, 0.17, 0.17), seed=seed)
    base = replace(base, **{k: v for k, v in overrides.items() if k not in ("cs_levels", "mu_levels")})
    T = base.n_years
    rho = base.cs_persistence
    # sd of a T-period mean of a stationary AR(1), logit scale
    lr_var = base.cs_innovation ** 2 / (1 - rho) ** 2 if rho < 1 else math.inf
    logit_sd = math.sqrt(base.cs_country_sd ** 2 + lr_var / T)
    centre_cs = 0.40
    slope = centre_cs * (1 - centre_cs)
    cs_sd = logit_sd * slope
    offsets = np.arange(3) - 1.0
    cs_levels = centre_cs + separation * cs_sd * offsets
    deltas = [float(np.mean(base.delta(g)(np.linspace(0, 1, 201)))) for g in (1, 2, 3)]
    s_sd = math.sqrt(base.mu_sd ** 2 + (0.2 * cs_sd) ** 2 + base.noise_sd ** 2 / T)
    mu_levels = [0.17 + separation * s_sd * o - deltas[g] * cs_levels[g] + deltas[1] * centre_cs
                 for g, o in enumerate(offsets)]
    spec = replace(base, cs_levels=tuple(float(c) for c in cs_levels),
                   mu_levels=tuple(float(m) for m in mu_levels))
    if "cs_levels" in overrides or "mu_levels" in overrides:
        spec = replace(spec, **{k: overrides[k] for k in ("cs_levels", "mu_levels") if k in overrides})
    return spec


@dataclass(frozen=True)
class GroundTruth:
    spec: DgpSpec
    labels: pd.Series           # country -> true group (1..G)
    mu: pd.Series
    ptr_slope: pd.Series
    true_cs: np.ndarray         # aligned with dataset rows

    def delta(self, g, tau):
        return self.spec.delta(g)(np.asarray(tau, dtype=float))

    def omega(self, g, tau):
        return self.spec.omega(g)(np.asarray(tau, dtype=float))


def _ar1(rng, shape, rho, scale):
    out = np.empty(shape)
    sd0 = scale / math.sqrt(1 - rho ** 2) if abs(rho) < 1 else scale
    out[:, 0] = rng.normal(0.0, sd0, shape[0])
    shocks = rng.normal(0.0, scale, shape)
    for t in range(1, shape[1]):
        out[:, t] = rho * out[:, t - 1] + shocks[:, t]
    return out


def generate(spec: DgpSpec):
    """Draw one panel and its ground truth. Deterministic given ``spec.seed``.

    Draws outside the admissible ranges are dropped as rejected rows; more
    than 0.1% of them raises instead.
    """
    rng = np.random.default_rng(spec.seed)
    N, T, G = spec.n_countries, spec.n_years, spec.n_groups
    sizes = spec.group_sizes()
    labels = rng.permutation(np.repeat(np.arange(1, G + 1), sizes))
    countries = [f"C{i + 1:03d}" for i in range(N)]
    years = spec.start_year + np.arange(T)
    tau = (years - years[0]) / (years[-1] - years[0])

    level = logit(np.asarray(spec.cs_levels))[labels - 1]
    c_i = rng.normal(0.0, spec.cs_country_sd, N)
    u = _ar1(rng, (N, T), spec.cs_persistence, spec.cs_innovation)
    base_cs = expit(level[:, None] + c_i[:, None] + u)

    p_i = spec.ptr_mean + rng.normal(0.0, spec.ptr_country_sd, N)
    v = _ar1(rng, (N, T), spec.ptr_persistence, spec.ptr_innovation)
    ptr = p_i[:, None] + v
    a_i = spec.ptr_slope + rng.normal(0.0, spec.ptr_slope_sd, N)
    cs0 = base_cs + a_i[:, None] * (ptr - p_i[:, None])

    mu = np.asarray(spec.mu_levels)[labels - 1] + rng.normal(0.0, spec.mu_sd, N)
    delta = np.vstack([spec.delta(g)(tau) for g in range(1, G + 1)])[labels - 1]
    omega = np.vstack([spec.omega(g)(tau) for g in range(1, G + 1)])[labels - 1]
    e_x = rng.normal(0.0, spec.measurement_sd, (N, T))
    e_y = rng.normal(0.0, spec.noise_sd, (N, T))
    share = delta * cs0 + mu[:, None] + omega + e_y
    cs_obs = cs0 + e_x
    present = rng.random((N, T)) >= spec.missing_rate

    frame = pd.DataFrame({
        "country": np.repeat(countries, T),
        "year": np.tile(years, N),
        "top10": (TOP10_FACTOR * share).ravel(),
        "top5": share.ravel(),
        "top1": (TOP1_FACTOR * share).ravel(),
        "capital_share": cs_obs.ravel(),
        "profit_tax_rate": ptr.ravel(),
        "_cs0": cs0.ravel(),
    })[present.ravel()]
    bad = ~(((frame["top10"] < 1) & (frame["top1"] > 0)
             & (frame["capital_share"] > 0) & (frame["capital_share"] < 1)
             & (frame["profit_tax_rate"] >= 0) & (frame["profit_tax_rate"] <= 1)).to_numpy())
    if bad.mean() > MAX_OUT_OF_RANGE:
        raise DataError(f"{bad.mean():.2%} of generated rows fall outside the admissible range; "
                        "adjust the specification")
    frame = frame[~bad]
    ds = PanelDataset.from_frame(frame.drop(columns="_cs0"), min_obs=min(3, T))
    cs0_by_row = frame.set_index(["country", "year"])["_cs0"]
    true_cs = cs0_by_row.reindex(pd.MultiIndex.from_frame(ds.frame[["country", "year"]])).to_numpy()
    truth = GroundTruth(
        spec=spec,
        labels=pd.Series(labels, index=countries).reindex(list(ds.country_ids)),
        mu=pd.Series(mu, index=countries).reindex(list(ds.country_ids)),
        ptr_slope=pd.Series(a_i, index=countries).reindex(list(ds.country_ids)),
        true_cs=true_cs,
    )
    return ds, truth


# -- Monte Carlo harness --------------------------------------------------------

@dataclass
class ReplicationOutcome:
    """What a pipeline reports for one synthetic panel.

    ``curves`` maps a true group label to a frame with columns
    ``tau, delta, delta_lo, delta_hi``; ``weights`` maps it to the grid
    observation counts used for the average effect.
    """

    average_effect: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)
    selected_G: int | None = None
    extra: dict = field(default_factory=dict)


def replication_seeds(master_seed: int, R: int) -> list:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(master_seed).spawn(R)]


def _run_one(args):
    spec, pipeline, seed = args
    try:
        ds, truth = generate(replace(spec, seed=seed))
        return seed, pipeline(ds, truth), None
    except Exception as exc:  # recorded, not fatal
        return seed, None, f"{type(exc).__name__}: {exc}"


@dataclass
class StudyResult:
    replications: pd.DataFrame
    summary: pd.DataFrame
    selection: pd.Series
    failures: list

    @property
    def failure_rate(self) -> float:
        n = len(self.replications["seed"].unique()) if len(self.replications) else 0
        total = n + len(self.failures)
        return len(self.failures) / total if total else 0.0


def replicate_study(spec: DgpSpec, pipeline: Callable, R: int, seed: int | None = None,
                    workers: int = 1) -> StudyResult:
    """Run ``pipeline`` on ``R`` independent draws of ``spec``.

    Replication seeds are spawned from ``seed`` (default ``spec.seed``), so
    results do not depend on ``workers``. Per group the summary reports the
    bias and RMSE of the average effect, the RMISE of delta-hat on the
    pipeline's grid and the pointwise band coverage.
    """
    if R < 1:
        raise ValueError("R must be at least 1")
    seeds = replication_seeds(spec.seed if seed is None else seed, R)
    jobs = [(spec, pipeline, s) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]

    rows, failures, selected = [], [], []
    for rep, (s, out, err) in enumerate(results):
        if err is not None:
            failures.append((rep, s, err))
            continue
        if out.selected_G is not None:
            selected.append(out.selected_G)
        for g, curve in out.curves.items():
            tau = curve["tau"].to_numpy()
            true = spec.delta(g)(tau)
            w = np.asarray(out.weights.get(g, np.ones_like(tau)), dtype=float)
            true_avg = float(w @ true / w.sum())
            est = out.average_effect.get(g, math.nan)
            inside = (curve["delta_lo"].to_numpy() <= true) & (true <= curve["delta_hi"].to_numpy())
            rows.append(dict(rep=rep, seed=s, group=g, average_effect=est, true_average=true_avg,
                             error=est - true_avg, ise=float(np.mean((curve["delta"].to_numpy() - true) ** 2)),
                             coverage=float(inside.mean()), **out.extra))
    reps = pd.DataFrame(rows, columns=["rep", "seed", "group", "average_effect", "true_average",
                                       "error", "ise", "coverage"] + sorted({k for _, o, e in results
                                                                            if o is not None for k in o.extra}))
    if len(reps):
        summary = reps.groupby("group").agg(
            n=("rep", "size"), bias=("error", "mean"),
            rmse=("error", lambda e: float(np.sqrt(np.mean(np.square(e))))),
            rmise=("ise", lambda v: float(np.sqrt(np.mean(v)))),
            coverage=("coverage", "mean")).reset_index()
    else:
        summary = pd.DataFrame(columns=["group", "n", "bias", "rmse", "rmise", "coverage"])
    selection = pd.Series(selected, dtype=int).value_counts().sort_index() / max(R, 1)
    return StudyResult(replications=reps, summary=summary, selection=selection, failures=failures)


def tvc_pipeline(ds: PanelDataset, truth: GroundTruth, **fit_kwargs) -> ReplicationOutcome:
    """Fit with the true grouping and report curves keyed by true group."""
    from .clustering import GroupAssignment
    from .tvc import fit_tvc

    labels = truth.labels.reindex(list(ds.country_ids)).to_numpy()
    G = int(labels.max())
    assignment = GroupAssignment(G=G, labels=labels, centers=np.full((G, 2), np.nan),
                                 objective=math.nan, countries=ds.country_ids)
    fit = fit_tvc(ds, assignment, quantile=5, min_group_size=1, **fit_kwargs)
    return outcome_from_fit(fit)


def outcome_from_fit(fit, group_map: dict | None = None) -> ReplicationOutcome:
    out = ReplicationOutcome()
    for g, gf in fit.groups.items():
        tg = g if group_map is None else group_map[g]
        out.curves[tg] = gf.curves()[["tau", "delta", "delta_lo", "delta_hi"]]
        ae = gf.average_effect()
        out.average_effect[tg] = ae.estimate
        out.weights[tg] = ae.weights
    return out
