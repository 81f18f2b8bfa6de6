"""CSV / JSON readers and writers for every artifact that crosses a stage boundary."""
import hashlib
import json
import os
from pathlib import Path

import numpy as np
import pandas as pd

from .series import SurveillanceSeries

SERIES_COLUMNS = ["series_id", "kind", "variant_id", "week", "value"]
AUGMENTED_COLUMNS = ["series_id", "kind", "variant_id", "realization_id", "noised", "outliered", "week", "value"]
FORECAST_COLUMNS = ["location", "forecast_date", "target", "quantile_level", "value"]
TRUTH_COLUMNS = ["location", "week", "value"]


class SchemaError(ValueError):
    """A CSV does not carry the columns its consumer needs."""


def _write(df: pd.DataFrame, path, na_rep=""):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, lineterminator="\n", encoding="utf-8", na_rep=na_rep)


def _read(path, columns):
    df = pd.read_csv(path, encoding="utf-8")
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise SchemaError(f"{path}: missing columns {missing}")
    return df


def series_frame(series, augmented=False) -> pd.DataFrame:
    frames = []
    for s in series:
        n = len(s)
        cols = {
            "series_id": [s.series_id] * n,
            "kind": [s.kind] * n,
            "variant_id": np.full(n, s.variant_id, dtype=np.int64),
        }
        if augmented:
            cols["realization_id"] = np.full(n, -1 if s.realization_id is None else s.realization_id, dtype=np.int64)
            cols["noised"] = np.full(n, int(s.noised), dtype=np.int64)
            cols["outliered"] = np.full(n, int(s.outliered), dtype=np.int64)
        cols["week"] = np.arange(n, dtype=np.int64)
        cols["value"] = s.values
        frames.append(pd.DataFrame(cols))
    columns = AUGMENTED_COLUMNS if augmented else SERIES_COLUMNS
    if not frames:
        return pd.DataFrame(columns=columns)
    return pd.concat(frames, ignore_index=True)[columns]


def write_series(series, path, augmented=False):
    _write(series_frame(series, augmented), path)


def read_series(path, augmented=False):
    """Series in file order of first appearance."""
    df = _read(path, AUGMENTED_COLUMNS if augmented else SERIES_COLUMNS)
    keys = ["series_id", "kind", "variant_id"] + (["realization_id"] if augmented else [])
    out = []
    for key, grp in df.groupby(keys, sort=False):
        grp = grp.sort_values("week")
        weeks = grp["week"].to_numpy()
        if not np.array_equal(weeks, np.arange(len(weeks))):
            raise SchemaError(f"{path}: series {key} does not have contiguous weeks from 0")
        kw = dict(series_id=str(key[0]), kind=str(key[1]), variant_id=int(key[2]))
        if augmented:
            rid = int(key[3])
            kw.update(realization_id=None if rid < 0 else rid, noised=bool(grp["noised"].iloc[0]),
                      outliered=bool(grp["outliered"].iloc[0]))
        out.append(SurveillanceSeries(grp["value"].to_numpy(dtype=np.float64), **kw))
    return out


def write_design(design, path):
    df = pd.DataFrame(design.points, columns=list(design.names))
    df.insert(0, "sample", np.arange(design.n_samples))
    _write(df, path)


def read_design(path, names):
    df = _read(path, ["sample"] + list(names))
    return df[list(names)].to_numpy(dtype=np.float64)


def target_name(h):
    return f"{h} wk ahead cases"


def forecast_frame(location, forecast_date, levels, values) -> pd.DataFrame:
    """Hub-style rows for one forecast; the median is repeated as a ``NA``-level point row."""
    rows = []
    for h in range(values.shape[0]):
        for lv, v in zip(levels, values[h]):
            rows.append((location, int(forecast_date), target_name(h + 1), float(lv), float(v)))
        median = float(values[h][int(np.argmin(np.abs(np.asarray(levels) - 0.5)))])
        rows.append((location, int(forecast_date), target_name(h + 1), np.nan, median))
    return pd.DataFrame(rows, columns=FORECAST_COLUMNS)


def write_forecasts(df, path):
    _write(df[FORECAST_COLUMNS], path, na_rep="NA")


def read_forecasts(path, model=None):
    df = _read(path, FORECAST_COLUMNS)
    df["location"] = df["location"].astype(str)
    df["horizon"] = df["target"].str.extract(r"^(\d+) wk ahead", expand=False).astype(int)
    if model is not None:
        df["model"] = model
    return df


def read_forecast_dir(path):
    files = sorted(Path(path).glob("*.csv"))
    if not files:
        raise FileNotFoundError(f"no forecast CSVs in {path}")
    return pd.concat([read_forecasts(f, model=f.stem) for f in files], ignore_index=True)


def write_truth(df, path):
    _write(df[TRUTH_COLUMNS], path)


def read_truth(path):
    df = _read(path, TRUTH_COLUMNS)
    df["location"] = df["location"].astype(str)
    return df


def write_frame(df, path):
    _write(df, path)


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_json(obj, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, os.PathLike):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")
