"""Grouped block bootstrap (and an iid comparator) for forecast scores."""
import logging
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
import pandas as pd

from . import kernels
from .dataset import EVAL_LEVELS
from .scoring import DEFAULT_SCORE, ScoreConfig, _level_index, quantile_columns, relative, wis

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BootstrapConfig:
    n_reps: int = 5000
    mode: str = "block"
    n_blocks: int = 9
    block_len: int = 15
    n_locations: int = None  # default: number of distinct locations
    chunk: int = 250

    def __post_init__(self):
        if self.n_reps < 1:
            raise ValueError("n_reps must be >= 1")
        if self.mode not in ("block", "iid"):
            raise ValueError("mode must be 'block' or 'iid'")
        if self.n_blocks < 1 or self.block_len < 1 or self.chunk < 1:
            raise ValueError("n_blocks, block_len and chunk must be >= 1")


@dataclass
class BootstrapResult:
    models: list
    baseline: str
    mode: str
    samples: dict            # metric -> (reps, models)
    ci: dict                 # metric -> (models, 2) at 2.5 / 97.5 percent
    paired: dict = field(default_factory=dict)  # (metric, A, B) -> (reps,) of A - B
    block_len: int = 0
    resample_size: int = 0   # records per model per replicate

    def ci_width(self, metric, model):
        lo, hi = self.ci[metric][self.models.index(model)]
        return hi - lo

    def to_frame(self):
        rows = []
        for metric, arr in self.samples.items():
            for j, m in enumerate(self.models):
                for r in range(arr.shape[0]):
                    rows.append((self.mode, r, m, metric, arr[r, j]))
        return pd.DataFrame(rows, columns=["mode", "replicate", "model", "metric", "value"])

    def ci_frame(self):
        rows = []
        for metric, ci in self.ci.items():
            for j, m in enumerate(self.models):
                rows.append((self.mode, m, metric, ci[j, 0], ci[j, 1]))
        for (metric, a, b), d in self.paired.items():
            lo, hi = np.percentile(d, [2.5, 97.5])
            rows.append((self.mode, f"{a} - {b}", metric, lo, hi))
        return pd.DataFrame(rows, columns=["mode", "model", "metric", "ci_low", "ci_high"])


def score_cube(records: pd.DataFrame, cfg: ScoreConfig = DEFAULT_SCORE, levels=EVAL_LEVELS):
    """Absolute errors and WIS on the full (model, location, date, horizon) grid.

    Raises when some model lacks a record present for another, since paired
    resampling needs a complete grid.
    """
    models = sorted(records["model"].unique())
    locs = sorted(records["location"].unique())
    dates = np.sort(records["forecast_date"].unique())
    hors = np.sort(records["horizon"].unique())
    shape = (len(models), len(locs), len(dates), len(hors))
    if len(records) != int(np.prod(shape)):
        raise ValueError(f"records do not form a complete grid {shape} (have {len(records)} rows)")
    r = records.sort_values(["model", "location", "forecast_date", "horizon"])
    qcols = quantile_columns(levels)
    y = r["y"].to_numpy(dtype=np.float64)
    q = r[qcols].to_numpy(dtype=np.float64)
    ae = np.abs(q[:, _level_index(levels, 0.5)] - y).reshape(shape)
    ws = wis(y, q, levels, cfg).reshape(shape)
    dd = np.diff(dates)
    if dd.size and np.any(dd != dd[0]):
        log.warning("forecast dates are not evenly spaced; blocks follow date order")
    return models, locs, dates, ae, ws


def _summaries(totals_ae, totals_wis, count, models, baseline):
    mae_s = totals_ae / count
    wis_s = totals_wis / count
    out = {"mae": mae_s, "wis": wis_s}
    if baseline in models:
        b = models.index(baseline)
        rel = np.vectorize(relative, otypes=[float])
        out["rmae"] = rel(mae_s, mae_s[:, b:b + 1])
        out["rwis"] = rel(wis_s, wis_s[:, b:b + 1])
    return out


def bootstrap(records: pd.DataFrame, baseline: str, cfg: BootstrapConfig = BootstrapConfig(), seed=0,
              score_cfg: ScoreConfig = DEFAULT_SCORE, levels=EVAL_LEVELS) -> BootstrapResult:
    """Resample records and recompute each model's MAE / WIS per replicate.

    ``block`` mode draws locations with replacement and, for each drawn
    location, ``n_blocks`` runs of ``block_len`` consecutive forecast dates
    (all horizons, all models kept together).  ``iid`` mode draws the same
    number of (location, date, horizon) cells independently.  Relative
    metrics use the baseline's score on the same resample.
    """
    models, locs, dates, ae, ws = score_cube(records, score_cfg, levels)
    n_m, n_l, n_d, n_h = ae.shape
    block_len = cfg.block_len
    if n_d < block_len:
        log.warning("only %d consecutive forecast dates; block length shrinks from %d to %d",
                    n_d, block_len, n_d)
        block_len = n_d
    n_loc = cfg.n_locations or n_l
    count = n_loc * cfg.n_blocks * block_len * n_h
    rng = np.random.default_rng(seed)

    tot_ae = np.empty((cfg.n_reps, n_m))
    tot_ws = np.empty((cfg.n_reps, n_m))
    if cfg.mode == "block":
        # block_sums[m, l, s] = sum over dates s..s+len-1 and all horizons
        n_starts = n_d - block_len + 1
        sums = []
        for cube in (ae, ws):
            per_date = cube.sum(axis=3)
            csum = np.concatenate([np.zeros((n_m, n_l, 1)), np.cumsum(per_date, axis=2)], axis=2)
            sums.append(csum[:, :, block_len:] - csum[:, :, :n_starts])
        for lo in range(0, cfg.n_reps, cfg.chunk):
            hi = min(cfg.n_reps, lo + cfg.chunk)
            loc_idx = rng.integers(0, n_l, size=(hi - lo, n_loc))
            start_idx = rng.integers(0, n_starts, size=(hi - lo, n_loc, cfg.n_blocks))
            tot_ae[lo:hi] = kernels.gather_block_sums(sums[0], loc_idx, start_idx)
            tot_ws[lo:hi] = kernels.gather_block_sums(sums[1], loc_idx, start_idx)
    else:
        flat_ae = ae.reshape(n_m, -1)
        flat_ws = ws.reshape(n_m, -1)
        for lo in range(0, cfg.n_reps, cfg.chunk):
            hi = min(cfg.n_reps, lo + cfg.chunk)
            cells = rng.integers(0, flat_ae.shape[1], size=(hi - lo, count))
            tot_ae[lo:hi] = kernels.gather_cells(flat_ae, cells)
            tot_ws[lo:hi] = kernels.gather_cells(flat_ws, cells)

    samples = _summaries(tot_ae, tot_ws, count, models, baseline)
    ci = {k: np.percentile(v, [2.5, 97.5], axis=0).T for k, v in samples.items()}
    paired = {}
    if n_m >= 2:
        for a, b in combinations(range(n_m), 2):
            for metric in ("mae", "wis"):
                # positive means model b scored better
                paired[(metric, models[a], models[b])] = samples[metric][:, a] - samples[metric][:, b]
    return BootstrapResult(models, baseline, cfg.mode, samples, ci, paired, block_len, count)
