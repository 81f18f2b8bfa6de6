"""Observation model: time scaling, multiplicative noise and outliers.

Turns a clean simulated series ``y`` into degraded realizations ``z`` and
applies the TC / VAC augmentation rules used to build training corpora.
"""
import logging
import math
from dataclasses import dataclass

import numpy as np

from .series import SurveillanceSeries

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ObsConfig:
    t_prime_min: int = 52
    kappa_range: tuple = (1.5, 3.5)
    outlier_count_range: tuple = (5, 10)
    high_mult_range: tuple = (2.0, 10.0)
    low_mult_range: tuple = (0.0, 0.05)
    outlier_probability: float = 0.25
    tc_realizations: int = 20
    tc_noised: int = 10
    vac_max_variants: int = 10

    def __post_init__(self):
        for name in ("kappa_range", "outlier_count_range", "high_mult_range", "low_mult_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: lower bound {lo} exceeds upper bound {hi}")
        if self.kappa_range[0] < 1:
            raise ValueError("kappa must be >= 1")
        if not 0 <= self.outlier_probability <= 1:
            raise ValueError("outlier_probability must lie in [0, 1]")
        if not 0 <= self.tc_noised <= self.tc_realizations:
            raise ValueError("tc_noised must lie in [0, tc_realizations]")
        if self.t_prime_min < 1 or self.vac_max_variants < 0:
            raise ValueError("t_prime_min must be >= 1 and vac_max_variants >= 0")


DEFAULT_OBS = ObsConfig()


def interpolate_to_length(y, t_prime):
    """Linear interpolation of ``y`` onto ``t_prime`` equally spaced points spanning [1, T]."""
    y = np.asarray(y, dtype=np.float64)
    t = y.shape[0]
    grid = np.linspace(1.0, float(t), int(t_prime))
    return np.interp(grid, np.arange(1.0, t + 1.0), y)


def scale(y: SurveillanceSeries, rng, cfg: ObsConfig = DEFAULT_OBS, t_prime=None) -> SurveillanceSeries:
    """Compress the time axis to a random length ``T' ~ Uniform{t_prime_min..T}``.

    Raises ``ValueError`` for series shorter than ``cfg.t_prime_min``.
    """
    t = len(y)
    if t < cfg.t_prime_min:
        raise ValueError(f"series {y.key} has length {t} < {cfg.t_prime_min}; cannot rescale")
    if t_prime is None:
        t_prime = int(rng.integers(cfg.t_prime_min, t + 1))
    x = interpolate_to_length(y.values, t_prime)
    out = y.with_values(x)
    out.meta["t_prime"] = int(t_prime)
    return out


def add_noise(x: SurveillanceSeries, rng, cfg: ObsConfig = DEFAULT_OBS, kappa=None) -> SurveillanceSeries:
    """Multiply every point by an independent ``Uniform(1/kappa, kappa)`` factor."""
    if kappa is None:
        kappa = rng.uniform(*cfg.kappa_range)
    eps = rng.uniform(1.0 / kappa, kappa, size=len(x))
    out = x.with_values(x.values * eps, noised=True)
    out.meta["kappa"] = float(kappa)
    out.meta["noise"] = eps
    return out


def add_outliers(v: SurveillanceSeries, rng, cfg: ObsConfig = DEFAULT_OBS) -> SurveillanceSeries:
    """Inject high (x2..x10) and low (x0..x0.05) outliers at 5-10 distinct weeks.

    Series shorter than the maximum outlier count pass through unchanged.
    """
    n = len(v)
    lo, hi = cfg.outlier_count_range
    if n < hi:
        log.info("series %s shorter than %d; outlier stage skipped", v.key, hi)
        return v
    n_out = int(rng.integers(lo, hi + 1))
    where = rng.choice(n, size=n_out, replace=False)
    n_high = math.ceil(n_out / 2)
    lam = np.ones(n)
    lam[where[:n_high]] = rng.uniform(*cfg.high_mult_range, size=n_high)
    lam[where[n_high:]] = rng.uniform(*cfg.low_mult_range, size=n_out - n_high)
    out = v.with_values(v.values * lam, outliered=True)
    out.meta["outlier_mult"] = lam
    out.meta["high_outliers"] = np.sort(where[:n_high])
    out.meta["low_outliers"] = np.sort(where[n_high:])
    return out


def realize_tc(y: SurveillanceSeries, rng, cfg: ObsConfig = DEFAULT_OBS):
    """All realizations are rescaled, exactly ``tc_noised`` of them get noise,
    and each independently gets outliers with ``outlier_probability``."""
    n = cfg.tc_realizations
    noised = np.zeros(n, dtype=bool)
    noised[rng.permutation(n)[: cfg.tc_noised]] = True
    out = []
    for r in range(n):
        z = scale(y, rng, cfg)
        if noised[r]:
            z = add_noise(z, rng, cfg)
        if rng.random() < cfg.outlier_probability:
            z = add_outliers(z, rng, cfg)
        z.realization_id = r
        out.append(z)
    return out


def select_variants(vacs, rng, cfg: ObsConfig = DEFAULT_OBS):
    """Variants to augment: up to ``vac_max_variants``, sampled without
    replacement with probability proportional to total attributable cases."""
    eligible = [v for v in vacs if len(v) >= cfg.t_prime_min]
    skipped = len(vacs) - len(eligible)
    if skipped:
        log.info("%d variant series shorter than %d weeks skipped", skipped, cfg.t_prime_min)
    if len(eligible) <= cfg.vac_max_variants:
        return eligible
    weights = np.array([v.values.sum() for v in eligible])
    if weights.sum() <= 0:
        weights = np.ones(len(eligible))
    # positive weights first so rng.choice never needs a zero-probability item
    n_pos = int(np.count_nonzero(weights))
    k = cfg.vac_max_variants
    if n_pos >= k:
        idx = rng.choice(len(eligible), size=k, replace=False, p=weights / weights.sum())
    else:
        pos = np.flatnonzero(weights)
        rest = rng.choice(np.flatnonzero(weights == 0), size=k - n_pos, replace=False)
        idx = np.concatenate([pos, rest])
    return [eligible[i] for i in sorted(idx)]


def realize_vac(vacs, rng, cfg: ObsConfig = DEFAULT_OBS):
    """Two realizations per selected variant: scale+outliers and scale+noise+outliers."""
    out = []
    for v in select_variants(list(vacs), rng, cfg):
        plain = add_outliers(scale(v, rng, cfg), rng, cfg)
        plain.realization_id = 0
        noisy = add_outliers(add_noise(scale(v, rng, cfg), rng, cfg), rng, cfg)
        noisy.realization_id = 1
        out.extend([plain, noisy])
    return out
