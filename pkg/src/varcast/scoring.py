"""Forecast evaluation: MAE, interval score, WIS, coverage and the persistence baseline."""
import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .dataset import EVAL_LEVELS

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScoreConfig:
    alphas: tuple = (0.5, 0.2, 0.05)
    median_weight: float = 0.5

    def __post_init__(self):
        a = np.asarray(self.alphas, dtype=np.float64)
        if a.size < 1 or np.any((a <= 0) | (a >= 1)):
            raise ValueError("alphas must lie in (0, 1)")
        if np.any(np.diff(a) >= 0):
            raise ValueError("alphas must be strictly decreasing")

    @property
    def weights(self):
        return tuple(a / 2.0 for a in self.alphas)

    @property
    def levels(self):
        """Quantile levels needed: lower bounds, median, upper bounds (ascending)."""
        lows = [a / 2.0 for a in self.alphas]
        return np.array(sorted(lows + [0.5] + [1.0 - a for a in lows]))


DEFAULT_SCORE = ScoreConfig()


def quantile_columns(levels=EVAL_LEVELS):
    return [f"q{lv:g}" for lv in levels]


def mae(y, point):
    y = np.asarray(y, dtype=np.float64)
    if y.size == 0:
        raise ValueError("cannot score an empty set of records")
    return float(np.mean(np.abs(np.asarray(point, dtype=np.float64) - y)))


def relative(metric, baseline_metric):
    """metric / baseline; ``inf`` for a zero baseline under a nonzero metric, 1 for 0/0."""
    if baseline_metric == 0:
        return 1.0 if metric == 0 else float("inf")
    return float(metric) / float(baseline_metric)


def interval_score(y, lower, upper, alpha):
    """Interval width plus ``2/alpha`` times the distance of ``y`` outside [lower, upper]."""
    y, lower, upper = (np.asarray(v, dtype=np.float64) for v in (y, lower, upper))
    if np.any(lower > upper):
        raise ValueError("interval lower bound exceeds upper bound")
    below = (lower - y) * (y < lower)
    above = (y - upper) * (y > upper)
    return (upper - lower) + (2.0 / alpha) * (below + above)


def _level_index(levels, level):
    hits = np.flatnonzero(np.isclose(levels, level, rtol=0, atol=1e-12))
    if hits.size == 0:
        raise ValueError(f"quantile level {level} missing from forecast")
    return int(hits[0])


def wis(y, quantiles, levels=EVAL_LEVELS, cfg: ScoreConfig = DEFAULT_SCORE):
    """Weighted interval score.

    ``quantiles`` has the quantile levels on its last axis; ``y`` broadcasts
    against the remaining axes.
    """
    q = np.asarray(quantiles, dtype=np.float64)
    levels = np.asarray(levels, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    total = cfg.median_weight * np.abs(y - q[..., _level_index(levels, 0.5)])
    for alpha, w in zip(cfg.alphas, cfg.weights):
        lo = q[..., _level_index(levels, alpha / 2.0)]
        hi = q[..., _level_index(levels, 1.0 - alpha / 2.0)]
        total = total + w * interval_score(y, lo, hi, alpha)
    return total / (len(cfg.alphas) + 0.5)


def coverage(y, lower, upper):
    y = np.asarray(y, dtype=np.float64)
    if y.size == 0:
        raise ValueError("cannot compute coverage of no records")
    return float(np.mean((np.asarray(lower) <= y) & (y <= np.asarray(upper))))


def interval_coverage(y, quantiles, alphas, levels=EVAL_LEVELS):
    """Coverage per alpha for quantile arrays (records x levels)."""
    if len(alphas) == 0:
        raise ValueError("need at least one interval")
    q = np.asarray(quantiles, dtype=np.float64)
    return {a: coverage(y, q[:, _level_index(levels, a / 2.0)], q[:, _level_index(levels, 1.0 - a / 2.0)])
            for a in alphas}


def persistence_forecast(history, h, levels=EVAL_LEVELS, min_lookback=12):
    """Last value plus empirical quantiles of past ``h``-step changes, clamped at 0.

    ``history`` holds the location's observations up to and including the
    forecast date.  Quantiles use linear interpolation of order statistics.
    Returns ``(values, flagged)``; ``flagged`` marks forecasts built from
    fewer than ``min_lookback`` changes (all available changes are used, or
    none, in which case every quantile equals the last value).
    """
    y = np.asarray(history, dtype=np.float64)
    if y.size == 0:
        raise ValueError("empty history")
    last = y[-1]
    changes = y[h:] - y[:-h] if y.size > h else np.zeros(0)
    flagged = changes.size < min_lookback
    if changes.size == 0:
        return np.full(len(levels), max(last, 0.0)), True
    q = last + np.quantile(changes, levels)
    return np.maximum(q, 0.0), flagged


def persistence_table(truth: pd.DataFrame, dates, horizons=4, levels=EVAL_LEVELS, min_lookback=12):
    """Persistence forecasts for every location and forecast date.

    ``truth`` has columns ``location, week, value``.  Returns a long frame in
    the forecast CSV layout with an extra ``horizon`` column.
    """
    rows = []
    for loc, grp in truth.groupby("location", sort=True):
        series = grp.sort_values("week")["value"].to_numpy(dtype=np.float64)
        weeks = grp.sort_values("week")["week"].to_numpy()
        for d in dates:
            upto = series[weeks <= d]
            if upto.size == 0:
                continue
            for h in range(1, horizons + 1):
                vals, flagged = persistence_forecast(upto, h, levels, min_lookback)
                if flagged:
                    log.debug("persistence for %s at %s h=%d uses a short history", loc, d, h)
                for lv, v in zip(levels, vals):
                    rows.append((loc, int(d), h, float(lv), float(v)))
    return pd.DataFrame(rows, columns=["location", "forecast_date", "horizon", "quantile_level", "value"])


def build_records(forecasts: pd.DataFrame, truth: pd.DataFrame, levels=EVAL_LEVELS):
    """Join long-form forecasts (with ``model``) to truth; one row per record.

    Output columns: model, location, forecast_date, horizon, y, and one
    ``q<level>`` column per level.  Records without truth are dropped.
    """
    f = forecasts.dropna(subset=["quantile_level"]).copy()
    f["quantile_level"] = f["quantile_level"].astype(float).round(6)
    wide = f.pivot_table(index=["model", "location", "forecast_date", "horizon"], columns="quantile_level",
                         values="value", aggfunc="first")
    want = [round(float(lv), 6) for lv in levels]
    missing = [lv for lv in want if lv not in wide.columns]
    if missing:
        raise ValueError(f"forecasts lack quantile levels {missing}")
    wide = wide[want]
    wide.columns = quantile_columns(levels)
    wide = wide.reset_index()
    wide["target_week"] = wide["forecast_date"] + wide["horizon"]
    t = truth.rename(columns={"week": "target_week", "value": "y"})
    out = wide.merge(t[["location", "target_week", "y"]], on=["location", "target_week"], how="inner")
    q = out[quantile_columns(levels)].to_numpy()
    if np.any(np.diff(q, axis=1) < -1e-9):
        raise ValueError("forecast quantiles are not monotone")
    cols = ["model", "location", "forecast_date", "horizon", "y"] + quantile_columns(levels)
    return out[cols].sort_values(["model", "location", "forecast_date", "horizon"]).reset_index(drop=True)


def score_records(records: pd.DataFrame, baseline: str, cfg: ScoreConfig = DEFAULT_SCORE, levels=EVAL_LEVELS):
    """Long score table: model, horizon ('all' or h), metric, value.

    Metrics: mae, wis, coverage_<nominal %>, and rmae / rwis relative to
    ``baseline`` on the same subset.
    """
    qcols = quantile_columns(levels)
    median_col = qcols[_level_index(levels, 0.5)]
    rows = []

    def _subset_scores(df):
        y = df["y"].to_numpy()
        q = df[qcols].to_numpy()
        out = {"mae": mae(y, df[median_col].to_numpy()), "wis": float(np.mean(wis(y, q, levels, cfg)))}
        for a, c in interval_coverage(y, q, cfg.alphas, levels).items():
            out[f"coverage_{round(100 * (1 - a))}"] = c
        return out

    groups = [("all", records)] + [(int(h), g) for h, g in records.groupby("horizon", sort=True)]
    for hname, sub in groups:
        per_model = {m: _subset_scores(g) for m, g in sub.groupby("model", sort=True)}
        base = per_model.get(baseline)
        for m, sc in per_model.items():
            for metric, value in sc.items():
                rows.append((m, hname, metric, value))
            if base is not None:
                rows.append((m, hname, "rmae", relative(sc["mae"], base["mae"])))
                rows.append((m, hname, "rwis", relative(sc["wis"], base["wis"])))
    return pd.DataFrame(rows, columns=["model", "horizon", "metric", "value"])
