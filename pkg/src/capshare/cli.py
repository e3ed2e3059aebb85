"""Command-line driver: ingest -> cluster -> fit -> decompose -> report.

Every subcommand writes a ``manifest.txt`` into the output directory holding
the full configuration, so a run can be repeated from the manifest alone.
Failures print one ``error[<category>]: <message>`` line on stderr and exit
with a category-specific status.
"""

from __future__ import annotations

import argparse
import math
import sys
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import pandas as pd

from . import baselines, clustering, panel_data, plot, report, shapley, simulate, splines, tvc
from .errors import CapshareError, ConfigError, DataError

EXIT_CODES = {"data-error": 2, "config-error": 3, "numeric-error": 4, "io-error": 5}
SUBCOMMANDS = ("validate", "cluster", "fit", "iv-fit", "shapley", "simulate", "replicate", "plot")


@dataclass
class RunConfig:
    input: str | None = None
    output: str = "capshare_out"
    quantile: str = "top5"
    classify_quantile: str = "top10"
    J: int = splines.DEFAULT_NUM_BASIS
    degree: int = splines.DEFAULT_DEGREE
    penalty_order: int = splines.DEFAULT_PENALTY_ORDER
    psi_lo: float = tvc.PSI_LO
    psi_hi: float = tvc.PSI_HI
    psi_steps: int = tvc.PSI_STEPS
    refine: bool = True
    G: int | None = None
    G_max: int = clustering.DEFAULT_G_MAX
    zeta: float = clustering.DEFAULT_ZETA
    n_init: int = clustering.DEFAULT_N_INIT
    sd_ddof: int = 1
    seed: int = 0
    min_obs: int = panel_data.DEFAULT_MIN_OBS
    min_group_size: int = clustering.MIN_GROUP_SIZE
    iv: bool = False
    shapley_mode: str = "exact"
    proportion_mode: str = "change"
    assignment: str | None = None
    truth: str | None = None
    columns: dict = field(default_factory=dict)
    sim: dict = field(default_factory=dict)

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        cfg = cls()
        kinds = {f.name: f for f in fields(cls)}
        for key, raw in values.items():
            if key.startswith("column."):
                cfg.columns[key.split(".", 1)[1]] = raw
                continue
            if key.startswith("sim."):
                cfg.sim[key.split(".", 1)[1]] = raw
                continue
            if key not in kinds:
                raise ConfigError(f"unknown configuration key {key!r}")
            setattr(cfg, key, _coerce(key, raw, getattr(cls(), key)))
        cfg.check()
        return cfg

    def check(self):
        try:
            panel_data.share_column(self.quantile)
            panel_data.share_column(self.classify_quantile)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.shapley_mode not in shapley.MODES:
            raise ConfigError(f"shapley_mode must be one of {shapley.MODES}")
        if self.proportion_mode not in ("change", "average"):
            raise ConfigError("proportion_mode must be 'change' or 'average'")
        if self.J < self.degree + 1:
            raise ConfigError(f"J must be at least degree + 1 = {self.degree + 1}")
        if not 0 < self.psi_lo <= self.psi_hi or self.psi_steps < 1:
            raise ConfigError("need 0 < psi_lo <= psi_hi and psi_steps >= 1")

    def as_manifest(self) -> dict:
        out = {}
        for k, v in asdict(self).items():
            if isinstance(v, dict):
                prefix = "column" if k == "columns" else k
                out.update({f"{prefix}.{kk}": vv for kk, vv in sorted(v.items())})
            else:
                out[k] = "" if v is None else (str(v).lower() if isinstance(v, bool) else v)
        return out

    def basis(self) -> splines.SplineBasis:
        return splines.make_basis(self.J, self.degree, self.penalty_order)

    def fit_kwargs(self) -> dict:
        return dict(basis=self.basis(), psi_lo=self.psi_lo, psi_hi=self.psi_hi,
                    psi_steps=self.psi_steps, refine=self.refine, min_group_size=self.min_group_size)


def _coerce(key, raw, default):
    text = str(raw).strip()
    if key in ("G", "input", "assignment", "truth") and text in ("", "none", "None"):
        return None
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return text.lower() in ("true", "1", "yes")
        if key == "G" or isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return text


# -- commands --------------------------------------------------------------------

def _out(cfg: RunConfig) -> Path:
    path = Path(cfg.output)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load(cfg: RunConfig, out: Path | None = None) -> panel_data.PanelDataset:
    if not cfg.input:
        raise ConfigError("no input file (set 'input' or pass --input)")
    try:
        ds = panel_data.load_csv(cfg.input, cfg.columns, min_obs=cfg.min_obs)
    except DataError as exc:
        if out is not None:
            panel_data.write_rejections(exc.rejections, out / "rejections.csv")
        raise
    if out is not None:
        panel_data.write_rejections(ds.rejections, out / "rejections.csv")
    return ds


def _assignment(cfg: RunConfig, ds):
    if cfg.assignment:
        return clustering.read_assignment(cfg.assignment, ds)
    return None


def _truth_rmise(fit, path) -> dict:
    truth = pd.read_csv(path)
    out = {}
    for g, gf in fit.groups.items():
        sub = truth[truth["group"] == g]
        if sub.empty:
            continue
        tau = sub["tau"].to_numpy()
        err = gf.delta(tau) - sub["delta"].to_numpy()
        out[f"group{g}.rmise"] = f"{math.sqrt(np.mean(err ** 2)):.6g}"
    return out


def cmd_validate(cfg, args):
    out = _out(cfg)
    ds = _load(cfg, out)
    print(f"{ds.n_countries} countries, {ds.n_obs} rows, window {ds.window[0]}-{ds.window[1]}, "
          f"{len(ds.rejections)} rejected rows")
    report.write_manifest(out / "manifest.txt", cfg.as_manifest(),
                          {"countries": ds.n_countries, "rows": ds.n_obs,
                           "window": f"{ds.window[0]}-{ds.window[1]}", "rejected": len(ds.rejections)},
                          command="validate")


def cmd_cluster(cfg, args):
    out = _out(cfg)
    ds = _load(cfg, out)
    assignment, table = clustering.classify(
        ds, cfg.classify_quantile, G=cfg.G, G_max=cfg.G_max, zeta=cfg.zeta, n_init=cfg.n_init,
        seed=cfg.seed, ddof=cfg.sd_ddof)
    clustering.write_assignment(assignment, out / "assignment.csv")
    results = {"G": assignment.G, "objective": f"{assignment.objective:.10g}",
               "sizes": ",".join(f"{g}:{n}" for g, n in assignment.sizes().items()),
               "outlier_groups": ",".join(str(g) for g in assignment.outlier_groups(cfg.min_group_size))}
    if table is not None:
        pd.DataFrame(table.as_records()).to_csv(out / "bic.csv", index=False, float_format="%.10g")
        results["sigma2_hat"] = f"{table.sigma2_hat:.10g}"
        results["selected_G"] = table.selected_G
    report.write_manifest(out / "manifest.txt", cfg.as_manifest(), results, command="cluster")
    print(f"G = {assignment.G}; sizes {results['sizes']}")


def _fit(cfg, ds, iv: bool):
    assignment = _assignment(cfg, ds)
    if iv:
        return tvc.fit_tvc_iv(ds, assignment, cfg.quantile, **cfg.fit_kwargs())
    return tvc.fit_tvc(ds, assignment, cfg.quantile, **cfg.fit_kwargs())


def cmd_fit(cfg, args, iv: bool = False):
    out = _out(cfg)
    ds = _load(cfg, out)
    fit = _fit(cfg, ds, iv or cfg.iv)
    prefix = "curves_iv" if fit.iv else "curves"
    report.write_fit(fit, out, prefix=prefix)
    results = report.fit_summary(fit)
    if cfg.truth:
        results.update(_truth_rmise(fit, cfg.truth))
    report.write_manifest(out / "manifest.txt", cfg.as_manifest(), results,
                          command="iv-fit" if fit.iv else "fit")
    for g in fit.groups:
        print(f"group {g}: average effect {results[f'group{g}.average_effect']} "
              f"(t = {results[f'group{g}.t_stat']})")


def cmd_shapley(cfg, args):
    out = _out(cfg)
    ds = _load(cfg, out)
    fit = _fit(cfg, ds, cfg.iv)
    attr = shapley.decompose(fit, fit.dataset, mode=cfg.shapley_mode)
    per_country, means = shapley.summarize_proportions(attr, how=cfg.proportion_mode)
    per_country[["country", "group", "prop_delta", "prop_cs", "prop_omega"]].to_csv(
        out / "shapley.csv", index=False, float_format="%.10g")
    means.to_csv(out / "shapley_group_means.csv", index=False, float_format="%.10g")
    if getattr(args, "per_observation", False):
        attr.to_csv(out / "attributions.csv", index=False, float_format="%.10g")
    report.write_manifest(out / "manifest.txt", cfg.as_manifest(), report.fit_summary(fit),
                          command="shapley")
    print(means.to_string(index=False))


def sim_spec(cfg: RunConfig) -> simulate.DgpSpec:
    values = dict(cfg.sim)
    preset = values.pop("preset", "grouped")
    if preset == "grouped":
        try:
            sep = float(values.pop("separation", 3.0))
        except ValueError:
            raise ConfigError("sim.separation must be a number") from None
        base = simulate.grouped_spec(sep, seed=cfg.seed)
    elif preset == "single":
        base = simulate.DgpSpec(seed=cfg.seed)
    else:
        raise ConfigError(f"unknown simulation preset {preset!r}")
    return simulate.DgpSpec.from_mapping(values, base=base)


def cmd_simulate(cfg, args):
    out = _out(cfg)
    spec = sim_spec(cfg)
    ds, truth = simulate.generate(spec)
    frame = ds.frame.copy()
    frame.to_csv(out / "panel.csv", index=False, float_format="%.12g", na_rep="")
    pd.DataFrame({"country": truth.labels.index, "group": truth.labels.to_numpy()}).to_csv(
        out / "truth_groups.csv", index=False)
    grid = np.linspace(0.0, 1.0, tvc.GRID_POINTS)
    curves = [pd.DataFrame({"group": g, "tau": grid, "delta": truth.delta(g, grid),
                            "omega": truth.omega(g, grid)}) for g in range(1, spec.n_groups + 1)]
    pd.concat(curves).to_csv(out / "truth_curves.csv", index=False, float_format="%.12g")
    manifest = cfg.as_manifest()
    for line in spec.to_text().splitlines():
        k, v = line.split(" = ", 1)
        manifest[f"spec.{k}"] = v
    report.write_manifest(out / "manifest.txt", manifest,
                          {"rows": ds.n_obs, "countries": ds.n_countries}, command="simulate")
    print(f"wrote {ds.n_obs} rows for {ds.n_countries} countries to {out / 'panel.csv'}")


def _avg_row(name, quantile, ae, bic):
    return (name, quantile, ae.estimate, ae.t_stat, bic)


def cmd_replicate(cfg, args):
    out = _out(cfg)
    ds = _load(cfg, out)
    kw = cfg.fit_kwargs()
    rows = []
    stage = None
    try:
        stage = tvc.first_stage(ds)
    except DataError as exc:
        print(f"note: IV rows skipped ({exc})", file=sys.stderr)
    for q in panel_data.SHARE_COLUMNS:
        ols = baselines.mg_ols(ds, q)
        cce = baselines.cce_mg(ds, q)
        rows.append(("OLS", q, ols.estimate, ols.t_stat, ols.bic))
        rows.append(("CCE", q, cce.estimate, cce.t_stat, cce.bic))
        fit = tvc.fit_tvc(ds, None, q, **kw)
        rows.append(_avg_row("TVC", q, fit.average_effect(), baselines.tvc_bic(fit)))
        if stage is not None:
            fit_iv = tvc.fit_tvc_iv(ds, None, q, stage=stage, **kw)
            rows.append(_avg_row("TVC-IV", q, fit_iv.average_effect(), baselines.tvc_bic(fit_iv)))
    baselines.summary_table(rows).to_csv(out / "table2.csv", index=False, float_format="%.6g")

    assignment, table = clustering.classify(
        ds, cfg.classify_quantile, G=cfg.G, G_max=cfg.G_max, zeta=cfg.zeta, n_init=cfg.n_init,
        seed=cfg.seed, ddof=cfg.sd_ddof)
    clustering.write_assignment(assignment, out / "assignment.csv")
    if table is not None:
        pd.DataFrame(table.as_records()).to_csv(out / "bic.csv", index=False, float_format="%.10g")

    q = panel_data.share_column(cfg.quantile)
    grouped = tvc.fit_tvc(ds, assignment, q, **kw)
    grouped_iv = None
    if stage is not None:
        try:
            grouped_iv = tvc.fit_tvc_iv(ds, assignment, q, stage=stage, **kw)
        except (DataError, CapshareError) as exc:
            print(f"note: grouped IV skipped ({exc})", file=sys.stderr)
    rows3 = []
    mapping = assignment.mapping()
    for g in range(1, assignment.G + 1):
        members = [c for c in ds.country_ids if mapping[c] == g]
        sub = ds.subset(countries=members)
        for name, fn in (("OLS", baselines.mg_ols), ("CCE", baselines.cce_mg)):
            try:
                r = fn(sub, q)
                rows3.append((name, g, r.estimate, r.t_stat, r.bic))
            except CapshareError:
                rows3.append((name, g, math.nan, math.nan, math.nan))
        for name, f in (("TVC", grouped), ("TVC-IV", grouped_iv)):
            if f is not None and g in f.groups:
                sub_fit = _single_group_view(f, g)
                rows3.append(_avg_row(name, g, f.groups[g].average_effect(), baselines.tvc_bic(sub_fit)))
            else:
                rows3.append((name, g, math.nan, math.nan, math.nan))
    pd.DataFrame(rows3, columns=["estimator", "group", "estimate", "t_stat", "bic"]).to_csv(
        out / "table3.csv", index=False, float_format="%.6g")

    attr = shapley.decompose(grouped, ds, mode=cfg.shapley_mode)
    per_country, means = shapley.summarize_proportions(attr, how=cfg.proportion_mode)
    per_country[["country", "group", "prop_delta", "prop_cs", "prop_omega"]].to_csv(
        out / "table4.csv", index=False, float_format="%.6g")
    means.to_csv(out / "table4_means.csv", index=False, float_format="%.6g")

    files = report.write_fit(grouped, out, prefix="curves")
    if grouped_iv is not None:
        files += report.write_fit(grouped_iv, out, prefix="curves_iv")
    curve_files = [p for p in files if "shifts" not in p.name]
    plot.plot_emit(curve_files, out, x_range=ds.window)

    results = report.fit_summary(grouped)
    if table is not None:
        results["selected_G"] = table.selected_G
    report.write_manifest(out / "manifest.txt", cfg.as_manifest(), results, command="replicate")
    print(baselines.summary_table(rows).to_string(index=False))


def _single_group_view(fit, g):
    from dataclasses import replace
    return replace(fit, groups={g: fit.groups[g]})


def cmd_plot(cfg, args):
    out = _out(cfg)
    files = list(args.curves or [])
    if not files:
        files = sorted(p for p in out.glob("curves*_group*.csv"))
    if not files:
        raise FileNotFoundError(f"no curve files given or found in {out}")
    written = plot.plot_emit(files, out)
    for p in written:
        print(p)


COMMANDS = {
    "validate": cmd_validate, "cluster": cmd_cluster, "fit": cmd_fit,
    "iv-fit": lambda c, a: cmd_fit(c, a, iv=True), "shapley": cmd_shapley,
    "simulate": cmd_simulate, "replicate": cmd_replicate, "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--input", help="panel CSV (overrides config)")
    common.add_argument("--out", help="output directory (overrides config)")
    common.add_argument("--seed", type=int, help="random seed (overrides config)")
    common.add_argument("--quantile", choices=["top10", "top5", "top1"], help="dependent top share")
    common.add_argument("--assignment", help="country,group CSV from the cluster command")
    common.add_argument("--truth", help="truth_curves.csv from simulate, for RMISE in the manifest")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any configuration key")

    parser = argparse.ArgumentParser(prog="capshare", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "shapley":
            p.add_argument("--per-observation", action="store_true", help="also write attributions.csv")
        if name == "plot":
            p.add_argument("curves", nargs="*", help="curve CSV files (default: curves*_group*.csv in --out)")
    return parser


def config_from_args(args) -> RunConfig:
    values = report.read_key_values(args.config) if args.config else {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    for key, attr in (("input", "input"), ("output", "out"), ("seed", "seed"), ("quantile", "quantile"),
                      ("assignment", "assignment"), ("truth", "truth")):
        val = getattr(args, attr, None)
        if val is not None:
            values[key] = str(val)
    return RunConfig.from_mapping(values)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = config_from_args(args)
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            COMMANDS[args.command](cfg, args)
    except CapshareError as exc:
        return _fail(exc.category, exc)
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        return _fail("io-error", exc)
    except OSError as exc:
        return _fail("io-error", exc)
    except ValueError as exc:
        return _fail("config-error", exc)
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        return _fail("numeric-error", exc)
    return 0


def _fail(category: str, exc: Exception) -> int:
    message = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
    print(f"error[{category}]: {message}", file=sys.stderr)
    rejections = getattr(exc, "rejections", None)
    if rejections:
        print(f"  {len(rejections)} rejected rows; see rejections.csv", file=sys.stderr)
    return EXIT_CODES[category]


if __name__ == "__main__":
    sys.exit(main())
