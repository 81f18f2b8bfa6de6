"""Quantile forecasts from a checkpoint: total-cases input and summed variant inputs."""
from dataclasses import dataclass

import numpy as np

from . import kernels
from . import model as qt
from .dataset import EVAL_INDEX, EVAL_LEVELS, QUANTILE_LEVELS, normalize
from .rng import substream


@dataclass
class QuantileForecast:
    """Forecast for one (location, forecast date): ``values[h, j]`` at ``levels[j]``."""

    location: str
    forecast_date: int
    levels: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.levels = np.asarray(self.levels, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != self.levels.shape[0]:
            raise ValueError("values must be (horizons, levels)")
        if np.any(np.diff(self.values, axis=1) < 0):
            raise ValueError("quantile values must be non-decreasing in level")

    @property
    def horizons(self):
        return self.values.shape[0]

    def at(self, level):
        j = int(np.flatnonzero(np.isclose(self.levels, level))[0])
        return self.values[:, j]

    @property
    def median(self):
        return self.at(0.5)


def dense_quantiles(ckpt, contexts):
    """Full-grid quantiles on the original scale, (batch, H, Q), clamped at 0.

    Each context is normalized by its maximum (zero-max contexts are used as
    is), run through the network and rescaled.
    """
    contexts = np.atleast_2d(np.asarray(contexts, dtype=np.float64))
    if not np.all(np.isfinite(contexts)):
        raise ValueError("forecast inputs must be finite")
    if np.any(contexts < 0):
        raise ValueError("forecast inputs must be nonnegative")
    if contexts.shape[1] != ckpt.model_cfg.context:
        raise ValueError(f"context length {contexts.shape[1]} != {ckpt.model_cfg.context}")
    z_in, _, scale = normalize(contexts)
    q = qt.predict_quantiles(ckpt.params, z_in, ckpt.model_cfg) * scale[:, None, None]
    # clamping is monotone, so ordering survives
    return np.maximum(q, 0.0)


def forecast_tc(ckpt, y_in, location="", forecast_date=0) -> QuantileForecast:
    """Direct forecast from a total-cases context, reported at the evaluation levels."""
    q = dense_quantiles(ckpt, y_in)[0]
    return QuantileForecast(location, forecast_date, EVAL_LEVELS, q[:, EVAL_INDEX])


def invert_cdf(levels, values, u):
    """Sample(s) from a quantile set by linear interpolation; tails clamp to the extremes."""
    levels = np.asarray(levels, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if levels.shape != values.shape or levels.ndim != 1:
        raise ValueError("levels and values must be matching 1-D arrays")
    if np.any(np.diff(levels) <= 0):
        raise ValueError("levels must be strictly increasing")
    if np.any(np.diff(values) < 0):
        raise ValueError("quantile values must be non-decreasing")
    return np.interp(u, levels, values)


def sample_sum(levels, variant_values, n_draws, seed, chunk=20_000, stream=()):
    """``n_draws`` samples of the sum of independent per-variant draws.

    ``variant_values`` is (n_variants, n_levels).  Draws are generated in
    chunks, each with its own substream keyed by chunk index, so the result
    depends only on ``(seed, stream, n_draws, chunk)``.
    """
    variant_values = np.atleast_2d(np.asarray(variant_values, dtype=np.float64))
    if np.any(np.diff(variant_values, axis=1) < 0):
        raise ValueError("variant quantiles are not monotone")
    levels = np.asarray(levels, dtype=np.float64)
    out = np.empty(n_draws)
    for c, lo in enumerate(range(0, n_draws, chunk)):
        hi = min(n_draws, lo + chunk)
        u = substream(seed, "mc", *stream, c).random((hi - lo, variant_values.shape[0]))
        out[lo:hi] = kernels.sum_inverse_cdf(levels, variant_values, u)
    return out


def forecast_vac(ckpt, vac_contexts, n_draws=100_000, seed=0, location="", forecast_date=0,
                 levels=EVAL_LEVELS) -> QuantileForecast:
    """Total-cases forecast assembled from variant-attributable inputs.

    Every variant context is forecast on the full quantile grid; for each
    horizon, independent inverse-CDF draws are summed across variants and the
    requested sample quantiles (linear interpolation of order statistics) of
    the ``n_draws`` totals are reported.
    """
    vac_contexts = np.atleast_2d(np.asarray(vac_contexts, dtype=np.float64))
    if vac_contexts.shape[0] < 1:
        raise ValueError("need at least one variant context")
    dense = dense_quantiles(ckpt, vac_contexts)  # (V, H, Q)
    out = np.empty((dense.shape[1], len(levels)))
    for h in range(dense.shape[1]):
        draws = sample_sum(QUANTILE_LEVELS, dense[:, h, :], n_draws, seed, stream=(h,))
        out[h] = np.quantile(draws, levels)
    # np.quantile can emit ulp-level inversions on ties
    out = np.maximum.accumulate(out, axis=1)
    return QuantileForecast(location, forecast_date, levels, out)
