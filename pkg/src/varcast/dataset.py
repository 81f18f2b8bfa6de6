"""Rolling-window corpora, per-window normalization and batch sampling."""
from dataclasses import dataclass

import numpy as np

QUANTILE_LEVELS = np.array([
    0.0005, 0.005, 0.01, 0.025, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5,
    0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95, 0.975, 0.99, 0.995, 0.9995,
])
EVAL_LEVELS = np.array([0.025, 0.1, 0.25, 0.5, 0.75, 0.9, 0.975])
EVAL_INDEX = np.searchsorted(QUANTILE_LEVELS, EVAL_LEVELS)

CONTEXT = 20
HORIZON = 4


def enumerate_windows(series_length, context=CONTEXT, horizon=HORIZON):
    """Number of contiguous (context + horizon) blocks in a series of this length."""
    if context < 1 or horizon < 1:
        raise ValueError("context and horizon must be >= 1")
    return max(0, int(series_length) - context - horizon + 1)


def normalize(y_in, y_out=None):
    """Divide by the per-window maximum of the input context.

    Windows whose maximum is zero or non-finite are left unscaled and get a
    scale of 1.  Works row-wise on 2-D batches.
    """
    y_in = np.asarray(y_in, dtype=np.float64)
    m = y_in.max(axis=-1)
    ok = np.isfinite(m) & (m > 0)
    scale = np.where(ok, m, 1.0)
    z_in = y_in / scale[..., None] if y_in.ndim > 1 else y_in / scale
    if y_out is None:
        return z_in, m, scale
    y_out = np.asarray(y_out, dtype=np.float64)
    z_out = y_out / scale[..., None] if y_out.ndim > 1 else y_out / scale
    return z_in, z_out, m, scale


@dataclass
class WindowExample:
    y_in: np.ndarray
    y_out: np.ndarray
    m: float
    z_in: np.ndarray
    z_out: np.ndarray
    source: int
    start: int


@dataclass
class Batch:
    """Stacked windows; ``scale`` is what the normalized values were divided by."""

    y_in: np.ndarray
    y_out: np.ndarray
    z_in: np.ndarray
    z_out: np.ndarray
    m: np.ndarray
    scale: np.ndarray
    source: np.ndarray
    start: np.ndarray

    def __len__(self):
        return self.y_in.shape[0]

    def example(self, i) -> WindowExample:
        return WindowExample(self.y_in[i], self.y_out[i], float(self.m[i]), self.z_in[i], self.z_out[i],
                             int(self.source[i]), int(self.start[i]))


def make_batch(y_in, y_out, source, start) -> Batch:
    z_in, z_out, m, scale = normalize(y_in, y_out)
    return Batch(np.asarray(y_in, dtype=np.float64), np.asarray(y_out, dtype=np.float64), z_in, z_out, m, scale,
                 np.asarray(source, dtype=np.int64), np.asarray(start, dtype=np.int64))


class WindowCorpus:
    """Immutable index of all valid rolling windows over a set of series.

    Windows that contain a non-finite value are dropped at construction.
    """

    def __init__(self, series, context=CONTEXT, horizon=HORIZON, ids=None):
        self.context = context
        self.horizon = horizon
        self.series = [np.asarray(getattr(s, "values", s), dtype=np.float64) for s in series]
        self.ids = list(ids) if ids is not None else [getattr(s, "key", str(i)) for i, s in enumerate(series)]
        span = context + horizon
        self.starts = []
        for y in self.series:
            n = enumerate_windows(y.shape[0], context, horizon)
            if n == 0:
                self.starts.append(np.zeros(0, dtype=np.int64))
                continue
            bad = ~np.isfinite(y)
            if bad.any():
                # a window starting at s is bad iff any bad point lies in [s, s + span)
                cum = np.concatenate([[0], np.cumsum(bad)])
                s = np.arange(n)
                self.starts.append(s[(cum[s + span] - cum[s]) == 0].astype(np.int64))
            else:
                self.starts.append(np.arange(n, dtype=np.int64))
        self.counts = np.array([s.shape[0] for s in self.starts], dtype=np.int64)
        self.total = int(self.counts.sum())

    def __len__(self):
        return len(self.series)

    def windows(self, source, start):
        source = np.atleast_1d(source)
        start = np.atleast_1d(start)
        c, h = self.context, self.horizon
        y_in = np.stack([self.series[i][s:s + c] for i, s in zip(source, start)]) if len(source) else np.zeros((0, c))
        y_out = np.stack([self.series[i][s + c:s + c + h] for i, s in zip(source, start)]) if len(source) else np.zeros((0, h))
        return make_batch(y_in, y_out, source, start)

    def sample_batch(self, batch_size, rng) -> Batch:
        """Two-stage sampling: series proportional to window count, then a uniform window."""
        if self.total == 0:
            raise ValueError("corpus has no windows")
        if batch_size == 0:
            return self.windows(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))
        src = rng.choice(len(self.series), size=batch_size, p=self.counts / self.total)
        pick = (rng.random(batch_size) * self.counts[src]).astype(np.int64)
        start = np.array([self.starts[i][j] for i, j in zip(src, pick)], dtype=np.int64)
        return self.windows(src, start)

    def manifest(self):
        return [{"series": sid, "windows": int(n)} for sid, n in zip(self.ids, self.counts)]


def perturb_duplicate(batch: Batch, rng, low=0.85, high=1.15) -> Batch:
    """Append a copy of every window with its input multiplied by iid Uniform(low, high).

    Raw targets are shared; the copy is renormalized by its own perturbed maximum.
    """
    if len(batch) == 0:
        raise ValueError("cannot perturb an empty batch")
    u = rng.uniform(low, high, size=batch.y_in.shape)
    y_in = np.concatenate([batch.y_in, batch.y_in * u])
    y_out = np.concatenate([batch.y_out, batch.y_out])
    return make_batch(y_in, y_out, np.concatenate([batch.source, batch.source]),
                      np.concatenate([batch.start, batch.start]))


def split_by_source(n_series, val_fraction, rng):
    """Indices (train, validation) with disjoint sources when there are at least two series."""
    order = rng.permutation(n_series)
    if n_series < 2:
        return order, order
    n_val = min(n_series - 1, max(1, int(round(val_fraction * n_series))))
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def validation_windows(corpus: WindowCorpus, n_windows, seed) -> Batch:
    """Frozen validation set: ``n_windows`` windows drawn with a reserved seed.

    Without replacement when the corpus is large enough; deterministic for a
    given corpus and seed.
    """
    rng = np.random.default_rng(seed)
    if corpus.total == 0:
        raise ValueError("validation corpus has no windows")
    flat = rng.choice(corpus.total, size=min(n_windows, corpus.total), replace=False) \
        if n_windows <= corpus.total else rng.choice(corpus.total, size=n_windows, replace=True)
    flat = np.sort(flat)
    edges = np.cumsum(corpus.counts)
    src = np.searchsorted(edges, flat, side="right")
    offset = flat - np.concatenate([[0], edges[:-1]])[src]
    start = np.array([corpus.starts[i][j] for i, j in zip(src, offset)], dtype=np.int64)
    return corpus.windows(src, start)
