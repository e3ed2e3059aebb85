"""Loading, validating and indexing the unbalanced country-year panel.

The dataset keeps one canonical long table sorted country-major, year
ascending, with countries in order of first appearance in the source. All
estimators read from that table, so row order is part of the contract.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple

import numpy as np
import pandas as pd

from .errors import DataError

SHARE_COLUMNS = ("top10", "top5", "top1")
CANONICAL_COLUMNS = ("country", "year", "top10", "top5", "top1", "capital_share", "profit_tax_rate")
DEFAULT_SCHEMA = {name: name for name in CANONICAL_COLUMNS}
DEFAULT_MIN_OBS = 10

_QUANTILE_ALIASES = {
    10: "top10", 5: "top5", 1: "top1",
    "10": "top10", "5": "top5", "1": "top1",
    "top10": "top10", "top5": "top5", "top1": "top1",
}


def share_column(quantile) -> str:
    """Map a quantile tag (10, 5, 1, "top5", ...) onto its column name."""
    try:
        return _QUANTILE_ALIASES[quantile]
    except (KeyError, TypeError):
        raise ValueError(f"unknown quantile tag {quantile!r}; expected one of 10, 5, 1") from None


@dataclass(frozen=True)
class PanelDataset:
    """Validated unbalanced panel.

    Attributes
    ----------
    frame : pandas.DataFrame
        Canonical columns, sorted by ``country_ids`` order then year.
        Treat as read-only.
    country_ids : tuple of str
        Retained countries in order of first appearance.
    window : (int, int)
        Smallest and largest calendar year in the retained rows.
    rejections : tuple of (int, str)
        ``(row, reason)`` for every source row that was not retained.
    """

    frame: pd.DataFrame
    country_ids: tuple
    window: tuple
    rejections: tuple = field(default=())

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, min_obs: int = DEFAULT_MIN_OBS,
                   strict: bool = False, row_numbers=None) -> "PanelDataset":
        """Validate an in-memory table with canonical column names.

        With ``strict=True`` any invariant violation raises instead of being
        recorded as a rejection.
        """
        missing = [c for c in CANONICAL_COLUMNS if c not in frame.columns and c != "profit_tax_rate"]
        if missing:
            raise DataError(f"missing columns: {', '.join(missing)}")
        frame = frame.copy()
        if "profit_tax_rate" not in frame.columns:
            frame["profit_tax_rate"] = np.nan
        if row_numbers is None:
            row_numbers = np.arange(2, len(frame) + 2)
        frame["_row"] = np.asarray(row_numbers)
        return _finalize(frame, min_obs=min_obs, strict=strict, rejections=[])

    # -- convenience -----------------------------------------------------

    @property
    def n_obs(self) -> int:
        return len(self.frame)

    @property
    def n_countries(self) -> int:
        return len(self.country_ids)

    def share(self, quantile) -> np.ndarray:
        return self.frame[share_column(quantile)].to_numpy(dtype=float)

    def country_codes(self) -> np.ndarray:
        """Integer position of each row's country within ``country_ids``."""
        lookup = {c: k for k, c in enumerate(self.country_ids)}
        return self.frame["country"].map(lookup).to_numpy(dtype=np.intp)

    def tau(self, window=None) -> np.ndarray:
        return normalize_time(self.frame["year"].to_numpy(), window or self.window)

    def subset(self, countries: Iterable[str] | None = None, mask=None) -> "PanelDataset":
        """Restrict to some countries and/or a boolean row mask.

        The window is recomputed on the retained rows; no min_obs filter is
        reapplied.
        """
        frame = self.frame
        if mask is not None:
            frame = frame[np.asarray(mask, dtype=bool)]
        if countries is not None:
            keep = list(countries)
            frame = frame[frame["country"].isin(keep)]
        if frame.empty:
            raise DataError("empty dataset after filtering")
        order = [c for c in self.country_ids if c in set(frame["country"])]
        frame = frame.reset_index(drop=True)
        years = frame["year"]
        return PanelDataset(frame, tuple(order), (int(years.min()), int(years.max())), self.rejections)

    def with_frame(self, frame: pd.DataFrame) -> "PanelDataset":
        """Same countries and window, new values (row order must match)."""
        if len(frame) != len(self.frame):
            raise ValueError("replacement frame has a different number of rows")
        return PanelDataset(frame.reset_index(drop=True), self.country_ids, self.window, self.rejections)


class NormalizedTime(float):
    """A year mapped affinely onto [0, 1] over the sample window."""


def normalize_time(year, window):
    """Map calendar years onto [0, 1] over ``window = (year_min, year_max)``.

    Scalars give a :class:`NormalizedTime`; array-likes give a float array.
    """
    lo, hi = int(window[0]), int(window[1])
    if not lo < hi:
        raise ValueError(f"degenerate window {window!r}")
    arr = np.asarray(year, dtype=float)
    if np.any(arr < lo) or np.any(arr > hi):
        raise ValueError(f"year outside window {lo}-{hi}")
    tau = (arr - lo) / (hi - lo)
    if tau.ndim == 0:
        return NormalizedTime(float(tau))
    return tau


class Demeaned(NamedTuple):
    values: np.ndarray
    means: np.ndarray
    codes: np.ndarray
    labels: np.ndarray

    def restore(self) -> np.ndarray:
        return self.values + self.means[self.codes]


def within_demean(values, groups) -> Demeaned:
    """Subtract per-unit means from ``values`` (1-D or rows of a 2-D array).

    ``means`` is ordered by first appearance of each unit in ``groups``;
    ``restore()`` adds them back.
    """
    values = np.asarray(values, dtype=float)
    codes, labels = pd.factorize(np.asarray(groups), sort=False)
    counts = np.bincount(codes)
    flat = values.reshape(len(values), -1)
    sums = np.zeros((len(labels), flat.shape[1]))
    np.add.at(sums, codes, flat)
    means = sums / counts[:, None]
    demeaned = flat - means[codes]
    # second pass removes the rounding left by the first
    resid = np.zeros_like(sums)
    np.add.at(resid, codes, demeaned)
    correction = resid / counts[:, None]
    demeaned -= correction[codes]
    means += correction
    shape = values.shape[1:]
    return Demeaned(demeaned.reshape(values.shape), means.reshape((len(labels),) + shape), codes, labels)


def time_averages(ds: PanelDataset, quantile) -> pd.DataFrame:
    """Per-country mean top share and capital share over available years."""
    col = share_column(quantile)
    means = ds.frame.groupby("country", sort=False)[[col, "capital_share"]].mean()
    means = means.reindex(list(ds.country_ids))
    means.columns = ["share", "capital_share"]
    return means


# -- CSV ingestion -------------------------------------------------------------

def load_csv(path, schema: Mapping[str, str] | None = None, min_obs: int = DEFAULT_MIN_OBS) -> PanelDataset:
    """Read and validate a panel CSV.

    Parameters
    ----------
    path : path-like
        UTF-8 file with a header row.
    schema : mapping, optional
        Canonical column name -> column name in the file. Unmapped names
        default to themselves. ``profit_tax_rate`` may be absent.
    min_obs : int
        Countries with fewer retained rows are dropped and reported.

    Raises
    ------
    FileNotFoundError
        Missing file.
    DataError
        Malformed numeric field, duplicate (country, year), missing columns,
        or nothing left after filtering.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    mapping = dict(DEFAULT_SCHEMA)
    mapping.update(schema or {})

    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or not any(h.strip() for h in header):
            raise DataError("no parsable rows")
        header = [h.strip() for h in header]
        position = {}
        for canon, name in mapping.items():
            if name in header:
                position[canon] = header.index(name)
            elif canon != "profit_tax_rate":
                raise DataError(f"header lacks column {name!r} (for {canon})")
        records, rejections = [], []
        for line_no, raw in enumerate(reader, start=2):
            if not raw or all(not cell.strip() for cell in raw):
                continue
            rec = _parse_row(raw, position, line_no, rejections)
            if rec is not None:
                records.append(rec)

    if not records and not rejections:
        raise DataError("no parsable rows")
    frame = pd.DataFrame.from_records(records, columns=list(CANONICAL_COLUMNS) + ["_row"])
    return _finalize(frame, min_obs=min_obs, strict=False, rejections=rejections)


def _parse_row(raw, position, line_no, rejections):
    def cell(name):
        idx = position.get(name)
        if idx is None or idx >= len(raw):
            return ""
        return raw[idx].strip()

    country = cell("country")
    if not country:
        rejections.append((line_no, "empty country"))
        return None
    year_text = cell("year")
    try:
        year_val = float(year_text)
    except ValueError:
        raise DataError(f"row {line_no}, column year: cannot parse {year_text!r}", rejections) from None
    if not year_val.is_integer():
        raise DataError(f"row {line_no}, column year: {year_text!r} is not an integer year", rejections)
    values = {}
    for name in ("top10", "top5", "top1", "capital_share", "profit_tax_rate"):
        text = cell(name)
        if text == "":
            if name == "profit_tax_rate":
                values[name] = math.nan
                continue
            rejections.append((line_no, f"missing {name}"))
            return None
        try:
            values[name] = float(text)
        except ValueError:
            raise DataError(f"row {line_no}, column {name}: cannot parse {text!r}", rejections) from None
    return (country, int(year_val), values["top10"], values["top5"], values["top1"],
            values["capital_share"], values["profit_tax_rate"], line_no)


def _row_problem(top10, top5, top1, cs, ptr) -> str | None:
    shares = (top10, top5, top1, cs)
    if not all(np.isfinite(v) for v in shares):
        return "non-finite value"
    if not (0 < top1 <= top5 <= top10 < 1):
        return "top shares violate 0 < top1 <= top5 <= top10 < 1"
    if not (0 < cs < 1):
        return "capital_share outside (0, 1)"
    if np.isfinite(ptr) and not (0 <= ptr <= 1):
        return "profit_tax_rate outside [0, 1]"
    if not np.isfinite(ptr) and not np.isnan(ptr):
        return "non-finite profit_tax_rate"
    return None


def _finalize(frame: pd.DataFrame, min_obs: int, strict: bool, rejections: list) -> PanelDataset:
    frame = frame.copy()
    frame["country"] = frame["country"].astype(str)
    frame["year"] = frame["year"].astype(int)

    dup = frame.duplicated(["country", "year"], keep="first")
    if dup.any():
        first = frame[dup].iloc[0]
        orig = frame[(frame["country"] == first["country"]) & (frame["year"] == first["year"])].iloc[0]
        rej = rejections + [(int(r), "duplicate (country, year)") for r in frame.loc[dup, "_row"]]
        raise DataError(
            f"duplicate (country, year) = ({first['country']}, {first['year']}) "
            f"at row {int(first['_row'])} (first seen at row {int(orig['_row'])})", rej)

    keep = np.ones(len(frame), dtype=bool)
    cols = frame[["top10", "top5", "top1", "capital_share", "profit_tax_rate"]].to_numpy(dtype=float)
    for k, (t10, t5, t1, cs, ptr) in enumerate(cols):
        problem = _row_problem(t10, t5, t1, cs, ptr)
        if problem is not None:
            if strict:
                raise DataError(f"row {int(frame['_row'].iloc[k])}: {problem}", rejections)
            rejections.append((int(frame["_row"].iloc[k]), problem))
            keep[k] = False
    frame = frame[keep]

    counts = frame.groupby("country", sort=False)["year"].transform("size")
    short = counts < min_obs
    if short.any():
        if strict:
            raise DataError(f"countries below min_obs={min_obs}: "
                            f"{sorted(set(frame.loc[short, 'country']))}", rejections)
        for r, c in zip(frame.loc[short, "_row"], frame.loc[short, "country"]):
            rejections.append((int(r), f"country {c} has fewer than {min_obs} valid rows"))
        frame = frame[~short]

    if frame.empty:
        raise DataError("empty dataset after filtering", rejections)

    order = list(pd.unique(frame["country"]))
    frame["_order"] = frame["country"].map({c: k for k, c in enumerate(order)})
    frame = frame.sort_values(["_order", "year"], kind="stable").drop(columns=["_order", "_row"])
    frame = frame.reset_index(drop=True)
    window = (int(frame["year"].min()), int(frame["year"].max()))
    rejections = sorted(rejections)
    return PanelDataset(frame, tuple(order), window, tuple(rejections))


def write_rejections(rejections, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "reason"])
        writer.writerows(rejections)
