"""Training loop (Adam, cosine schedule, EMA selection), checkpoints and gradient checks."""
import csv
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import model as qt
from .dataset import QUANTILE_LEVELS, Batch, WindowCorpus, perturb_duplicate
from .rng import substream

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"VCKPT\x00"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    updates: int = 2000
    lr_start: float = 5e-4
    lr_end: float = 5e-5
    ema: float = 0.98
    batch_size: int = 64
    seed: int = 0
    val_every: int = 200
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    perturb_low: float = 0.85
    perturb_high: float = 1.15
    dtype: str = "float64"

    def __post_init__(self):
        if self.updates < 1:
            raise ValueError("updates must be >= 1")
        if not 0 < self.lr_end <= self.lr_start:
            raise ValueError("need 0 < lr_end <= lr_start")
        if not 0 <= self.ema < 1:
            raise ValueError("ema must lie in [0, 1)")
        if self.batch_size < 1 or self.val_every < 1:
            raise ValueError("batch_size and val_every must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")


def cosine_lr(u, total, lr_start, lr_end):
    """Learning rate at update ``u`` of ``total``: ``lr_start`` at 0, ``lr_end`` at ``total``."""
    return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + math.cos(math.pi * u / total))


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def ema_update(ema, params, alpha):
    """In place: ema <- alpha * ema + (1 - alpha) * params."""
    for k, v in params.items():
        ema[k] *= alpha
        ema[k] += (1.0 - alpha) * v


@dataclass
class Checkpoint:
    model_cfg: qt.ModelConfig
    params: dict
    update: int
    val_loss: float
    version: int = CHECKPOINT_VERSION
    meta: dict = field(default_factory=dict)

    def save(self, path):
        names = list(self.params)
        header = {
            "version": self.version,
            "model": self.model_cfg.to_dict(),
            "update": int(self.update),
            "val_loss": float(self.val_loss),
            "meta": self.meta,
            "tensors": [{"name": n, "shape": list(self.params[n].shape), "dtype": str(self.params[n].dtype)}
                        for n in names],
        }
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<II", self.version, len(blob)))
            fh.write(blob)
            for n in names:
                arr = self.params[n]
                fh.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, "rb") as fh:
            data = fh.read()
        if not data.startswith(CHECKPOINT_MAGIC):
            raise ValueError(f"{path}: not a checkpoint file")
        off = len(CHECKPOINT_MAGIC)
        version, n_header = struct.unpack_from("<II", data, off)
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        off += 8
        header = json.loads(data[off:off + n_header].decode("utf-8"))
        off += n_header
        params = {}
        for t in header["tensors"]:
            dt = np.dtype(t["dtype"]).newbyteorder("<")
            count = int(np.prod(t["shape"], dtype=np.int64))
            arr = np.frombuffer(data, dtype=dt, count=count, offset=off).reshape(t["shape"])
            params[t["name"]] = arr.astype(np.dtype(t["dtype"]))
            off += count * dt.itemsize
        if off != len(data):
            raise ValueError(f"{path}: trailing or missing payload bytes")
        return cls(qt.ModelConfig(**header["model"]), params, header["update"], header["val_loss"],
                   version, header["meta"])


def evaluate(params, batch: Batch, cfg: qt.ModelConfig, levels=QUANTILE_LEVELS, chunk=2048):
    """Mean pinball loss on the normalized scale."""
    total = 0.0
    for i in range(0, len(batch), chunk):
        q = qt.to_quantiles(qt.forward(params, batch.z_in[i:i + chunk], cfg))
        r = batch.z_out[i:i + chunk][..., None] - q
        total += float(np.maximum(levels * r, (levels - 1.0) * r).sum())
    return total / (len(batch) * cfg.horizon * len(levels))


def constant_mean_loss(batch: Batch, levels=QUANTILE_LEVELS):
    """Pinball loss of a model that predicts the context mean at every quantile."""
    q = np.broadcast_to(batch.z_in.mean(axis=1)[:, None, None], batch.z_out.shape + (len(levels),))
    return qt.pinball_loss(q, batch.z_out, levels)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list
    initial_val_loss: float
    diverged: bool = False
    message: str = ""
    seconds: float = 0.0


def _copy(params):
    return {k: v.copy() for k, v in params.items()}


def _finite(params):
    return all(np.all(np.isfinite(v)) for v in params.values())


def train(corpus: WindowCorpus, val_batch: Batch, model_cfg: qt.ModelConfig, train_cfg: TrainConfig,
          levels=QUANTILE_LEVELS) -> TrainResult:
    """Fit the quantile transformer and return the best EMA snapshot.

    Each update samples ``batch_size`` windows, appends their perturbed
    duplicates, and takes one Adam step on the pinball loss.  EMA parameters
    are scored on ``val_batch`` every ``val_every`` updates (and at the start
    and end); the lowest-loss snapshot is returned.  A non-finite loss stops
    training and returns the last good snapshot with ``diverged=True``.
    """
    if corpus.total == 0:
        raise ValueError("training corpus has no windows")
    t0 = time.perf_counter()
    dtype = np.dtype(train_cfg.dtype)
    params = qt.init_params(model_cfg, substream(train_cfg.seed, "init"), dtype=dtype)
    batches = substream(train_cfg.seed, "batches")
    perturb = substream(train_cfg.seed, "perturb")
    opt = Adam(params, train_cfg.adam_beta1, train_cfg.adam_beta2, train_cfg.adam_eps)
    ema = _copy(params)
    val_cast = Batch(val_batch.y_in, val_batch.y_out, val_batch.z_in.astype(dtype), val_batch.z_out.astype(dtype),
                     val_batch.m, val_batch.scale, val_batch.source, val_batch.start)
    levels = np.asarray(levels, dtype=dtype)

    initial = evaluate(ema, val_cast, model_cfg, levels)
    best = Checkpoint(model_cfg, _copy(ema), 0, initial)
    history = [{"update": 0, "lr": train_cfg.lr_start, "train_loss": float("nan"),
                "val_loss": initial, "ema_val_loss": initial}]
    running, n_running = 0.0, 0
    diverged, message = False, ""
    for u in range(train_cfg.updates):
        lr = cosine_lr(u, train_cfg.updates, train_cfg.lr_start, train_cfg.lr_end)
        batch = perturb_duplicate(corpus.sample_batch(train_cfg.batch_size, batches), perturb,
                                  train_cfg.perturb_low, train_cfg.perturb_high)
        loss, grads = qt.loss_and_grad(params, batch.z_in.astype(dtype), batch.z_out.astype(dtype),
                                       model_cfg, levels)
        if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            diverged, message = True, f"non-finite loss or gradient at update {u + 1}"
            break
        opt.step(params, grads, lr)
        if not _finite(params):
            diverged, message = True, f"non-finite parameters after update {u + 1}"
            break
        ema_update(ema, params, train_cfg.ema)
        running += loss
        n_running += 1
        done = u + 1
        if done % train_cfg.val_every == 0 or done == train_cfg.updates:
            ema_loss = evaluate(ema, val_cast, model_cfg, levels)
            raw_loss = evaluate(params, val_cast, model_cfg, levels)
            history.append({"update": done, "lr": lr, "train_loss": running / n_running,
                            "val_loss": raw_loss, "ema_val_loss": ema_loss})
            log.info("update %d lr %.3g train %.5f val %.5f ema-val %.5f", done, lr,
                     running / n_running, raw_loss, ema_loss)
            running, n_running = 0.0, 0
            if math.isfinite(ema_loss) and ema_loss < best.val_loss:
                best = Checkpoint(model_cfg, _copy(ema), done, ema_loss)
    if diverged:
        log.error("training diverged: %s", message)
    best.meta = {"train": asdict(train_cfg), "initial_val_loss": initial}
    return TrainResult(best, history, initial, diverged, message, time.perf_counter() - t0)


def write_history(history, path):
    cols = ["update", "lr", "train_loss", "val_loss", "ema_val_loss"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({c: (repr(float(row[c])) if c != "update" else int(row[c])) for c in cols})


def _loss(params, z_in, z_out, cfg, levels):
    return qt.pinball_loss(qt.to_quantiles(qt.forward(params, z_in, cfg)), z_out, levels)


def grad_check(model_cfg: qt.ModelConfig, seed=0, batch_size=4, step=1e-4, atol=1e-6, margin=1e-3,
               levels=QUANTILE_LEVELS):
    """Compare backprop gradients with central finite differences.

    Runs in float64 on a random batch.  Targets are redrawn until every
    residual is at least ``margin`` away from the pinball kink, so no
    finite-difference stencil straddles it.  Returns ``(max_error, per_group)``
    where each group's error is ``||analytic - numeric|| / max(||analytic||,
    ||numeric||, atol)``.
    """
    rng = np.random.default_rng(seed)
    params = qt.init_params(model_cfg, rng)
    for k in params:
        params[k] = params[k] + rng.normal(0.0, 0.05, size=params[k].shape)
    z_in = rng.uniform(0.0, 1.0, size=(batch_size, model_cfg.context))
    q = qt.to_quantiles(qt.forward(params, z_in, model_cfg))
    lo, hi = float(q.min()) - 0.5, float(q.max()) + 0.5
    for _ in range(1000):
        z_out = rng.uniform(lo, hi, size=(batch_size, model_cfg.horizon))
        if np.min(np.abs(z_out[..., None] - q)) > margin:
            break
    else:  # pragma: no cover
        raise RuntimeError("could not draw targets away from the pinball kinks")
    _, grads = qt.loss_and_grad(params, z_in, z_out, model_cfg, levels)
    errors = {}
    for name, arr in params.items():
        num = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + step
            up = _loss(params, z_in, z_out, model_cfg, levels)
            arr[idx] = old - step
            down = _loss(params, z_in, z_out, model_cfg, levels)
            arr[idx] = old
            num[idx] = (up - down) / (2.0 * step)
        denom = max(np.linalg.norm(grads[name]), np.linalg.norm(num), atol)
        errors[name] = float(np.linalg.norm(grads[name] - num) / denom)
    return max(errors.values()), errors
