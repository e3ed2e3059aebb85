"""CSV exports and run manifests."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .errors import ConfigError

CURVE_COLUMNS = ["tau", "delta", "delta_lo", "delta_hi", "omega", "omega_lo", "omega_hi"]


def _csv(frame: pd.DataFrame, path) -> Path:
    path = Path(path)
    frame.to_csv(path, index=False, float_format="%.10g", lineterminator="\n")
    return path


def write_fit(fit, out_dir, prefix: str = "curves") -> list:
    """Per-group curve CSVs plus one ``country,mu_hat,se`` file."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    shifts = []
    for g, gf in fit.groups.items():
        written.append(_csv(gf.curves()[CURVE_COLUMNS], out_dir / f"{prefix}_group{g}.csv"))
        shifts.append(pd.DataFrame({"country": list(gf.countries), "mu_hat": gf.solution.mu,
                                    "se": np.sqrt(gf.posterior.mu_var)}))
    written.append(_csv(pd.concat(shifts, ignore_index=True), out_dir / f"{prefix}_shifts.csv"))
    return written


def fit_summary(fit) -> dict:
    """Manifest entries describing a TVC fit."""
    out = {"fit.iv": str(fit.iv).lower(), "fit.quantile": fit.quantile,
           "fit.window": f"{fit.window[0]}-{fit.window[1]}", "fit.J": fit.basis.num_basis}
    for g, gf in fit.groups.items():
        ae = gf.average_effect()
        out[f"group{g}.countries"] = len(gf.countries)
        out[f"group{g}.psi_hat"] = f"{gf.psi[0]:.6g},{gf.psi[1]:.6g}"
        out[f"group{g}.edf"] = f"{gf.edf:.6g}"
        out[f"group{g}.v2"] = f"{gf.v2:.6g}"
        out[f"group{g}.average_effect"] = f"{ae.estimate:.6g}"
        out[f"group{g}.t_stat"] = f"{ae.t_stat:.6g}"
    for msg in fit.skipped:
        out.setdefault("fit.skipped", "")
        out["fit.skipped"] = (out["fit.skipped"] + "; " if out["fit.skipped"] else "") + msg
    pooled = fit.average_effect()
    out["pooled.average_effect"] = f"{pooled.estimate:.6g}"
    out["pooled.t_stat"] = f"{pooled.t_stat:.6g}"
    return out


def write_manifest(path, config: dict, results: dict | None = None, command: str = "") -> Path:
    """Plain ``key = value`` text: the configuration verbatim, then results."""
    lines = [f"# capshare {__version__} run manifest", f"command = {command}"]
    lines += [f"{k} = {v}" for k, v in config.items()]
    if results:
        lines.append("# results")
        lines += [f"{k} = {v}" for k, v in results.items()]
    path = Path(path)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_key_values(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out
