"""Compact transformer encoder for quantile forecasting, with hand-written backprop.

Parameters live in a flat ``dict`` of numpy arrays.  :func:`forward` returns the
raw readout ``a`` of shape (batch, horizon, n_quantiles) and, on request, a
cache that :func:`backward` turns into gradients for every parameter.

Encoder blocks are pre-norm (LayerNorm -> sublayer -> residual), the
feedforward uses the tanh form of GELU, and attention is unmasked.  Only the
hidden state at the last context position feeds the readout.
"""
from dataclasses import asdict, dataclass

import numpy as np

from .dataset import QUANTILE_LEVELS

LN_EPS = 1e-5
_GELU_C = np.sqrt(2.0 / np.pi)


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 256
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 512
    context: int = 20
    horizon: int = 4
    n_quantiles: int = 27

    def __post_init__(self):
        for name, value in asdict(self).items():
            if int(value) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        values = dict(d_model=32, d_ff=64)
        values.update(overrides)
        return cls(**values)

    def to_dict(self):
        return asdict(self)


def param_shapes(cfg: ModelConfig) -> dict:
    d, f, c = cfg.d_model, cfg.d_ff, cfg.context
    shapes = {"emb_w": (d,), "emb_b": (d,), "pos": (c, d)}
    for l in range(cfg.n_layers):
        p = f"l{l}."
        shapes.update({
            p + "ln1_g": (d,), p + "ln1_b": (d,),
            p + "wq": (d, d), p + "bq": (d,), p + "wk": (d, d), p + "bk": (d,),
            p + "wv": (d, d), p + "bv": (d,), p + "wo": (d, d), p + "bo": (d,),
            p + "ln2_g": (d,), p + "ln2_b": (d,),
            p + "w1": (d, f), p + "b1": (f,), p + "w2": (f, d), p + "b2": (d,),
        })
    shapes.update({"lnf_g": (d,), "lnf_b": (d,),
                   "out_w": (d, cfg.horizon * cfg.n_quantiles), "out_b": (cfg.horizon * cfg.n_quantiles,)})
    return shapes


def init_params(cfg: ModelConfig, rng, dtype=np.float64) -> dict:
    """Fan-in scaled uniform weights, unit LayerNorm gains, zero biases.

    The readout bias starts the quantile increments small (softplus ~ 1/n_q)
    so the initial predictive spread is on the scale of normalized targets.
    """
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.split(".")[-1]
        if leaf.endswith("_g"):
            arr = np.ones(shape)
        elif leaf in ("emb_w",):
            arr = rng.uniform(-1.0, 1.0, size=shape)
        elif leaf == "pos":
            arr = rng.uniform(-1.0, 1.0, size=shape) / np.sqrt(cfg.d_model)
        elif len(shape) == 2:
            bound = 1.0 / np.sqrt(shape[0])
            arr = rng.uniform(-bound, bound, size=shape)
        else:
            arr = np.zeros(shape)
        params[name] = arr
    inc = 1.0 / cfg.n_quantiles
    bias = np.full((cfg.horizon, cfg.n_quantiles), np.log(np.expm1(inc)))
    bias[:, 0] = 0.0
    params["out_b"] = bias.reshape(-1)
    return {k: v.astype(dtype) for k, v in params.items()}


def _layernorm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _layernorm_back(dy, g, cache):
    xhat, rstd = cache
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, xhat.shape[-1]).sum(axis=0)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def _gelu(u):
    t = np.tanh(_GELU_C * (u + 0.044715 * u * u * u))
    return 0.5 * u * (1.0 + t), t


def _gelu_back(du_out, u, t):
    dt = _GELU_C * (1.0 + 3 * 0.044715 * u * u)
    return du_out * (0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * dt)


def _lin(x, w, b=None):
    """``x @ w (+ b)`` over the last axis as one 2-D GEMM."""
    y = x.reshape(-1, x.shape[-1]) @ w
    if b is not None:
        y += b
    return y.reshape(x.shape[:-1] + (w.shape[-1],))


def _split_heads(x, n_heads):
    b, c, d = x.shape
    return x.reshape(b, c, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, c, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, c, h * dh)


def encode(params, z_in, cfg: ModelConfig, keep_cache=False):
    """Embedding plus encoder stack; returns hidden states (batch, context, d)."""
    z_in = np.asarray(z_in)
    if z_in.ndim == 1:
        z_in = z_in[None, :]
    if z_in.ndim != 2 or z_in.shape[1] != cfg.context:
        raise ValueError(f"expected input of shape (batch, {cfg.context}), got {z_in.shape}")
    dtype = params["emb_w"].dtype
    x = z_in.astype(dtype, copy=False)
    h = x[:, :, None] * params["emb_w"] + params["emb_b"] + params["pos"]
    caches = []
    scale = 1.0 / np.sqrt(cfg.d_model // cfg.n_heads)
    for l in range(cfg.n_layers):
        p = f"l{l}."
        a, ln1 = _layernorm(h, params[p + "ln1_g"], params[p + "ln1_b"])
        q = _split_heads(_lin(a, params[p + "wq"], params[p + "bq"]), cfg.n_heads)
        k = _split_heads(_lin(a, params[p + "wk"], params[p + "bk"]), cfg.n_heads)
        v = _split_heads(_lin(a, params[p + "wv"], params[p + "bv"]), cfg.n_heads)
        s = (q @ k.transpose(0, 1, 3, 2)) * scale
        s = s - s.max(axis=-1, keepdims=True)
        e = np.exp(s)
        att = e / e.sum(axis=-1, keepdims=True)
        o = _merge_heads(att @ v)
        h = h + _lin(o, params[p + "wo"], params[p + "bo"])
        bn, ln2 = _layernorm(h, params[p + "ln2_g"], params[p + "ln2_b"])
        u = _lin(bn, params[p + "w1"], params[p + "b1"])
        gu, t = _gelu(u)
        h = h + _lin(gu, params[p + "w2"], params[p + "b2"])
        if keep_cache:
            caches.append((a, ln1, q, k, v, att, o, bn, ln2, u, t, gu))
    return h, (x, caches, scale)


def readout(params, hidden_last, cfg: ModelConfig, keep_cache=False):
    """Map last-position hidden states (batch, d) to raw outputs (batch, H, Q)."""
    n, lnf = _layernorm(hidden_last, params["lnf_g"], params["lnf_b"])
    a = (n @ params["out_w"] + params["out_b"]).reshape(-1, cfg.horizon, cfg.n_quantiles)
    return a, (n, lnf)


def forward(params, z_in, cfg: ModelConfig, keep_cache=False):
    """Raw outputs ``a`` of shape (batch, horizon, n_quantiles).

    With ``keep_cache=True`` returns ``(a, cache)`` for :func:`backward`.
    """
    h, enc_cache = encode(params, z_in, cfg, keep_cache)
    a, ro_cache = readout(params, h[:, -1, :], cfg)
    if keep_cache:
        return a, (h.shape, enc_cache, ro_cache)
    return a


def backward(params, cache, d_a, cfg: ModelConfig) -> dict:
    """Gradients of a scalar loss w.r.t. every parameter, given dL/da."""
    h_shape, (x, caches, scale), (n, lnf) = cache
    grads = {}
    d_a = d_a.reshape(d_a.shape[0], -1)
    grads["out_w"] = n.T @ d_a
    grads["out_b"] = d_a.sum(axis=0)
    dn = d_a @ params["out_w"].T
    d_last, grads["lnf_g"], grads["lnf_b"] = _layernorm_back(dn, params["lnf_g"], lnf)
    dh = np.zeros(h_shape, dtype=d_a.dtype)
    dh[:, -1, :] = d_last
    for l in reversed(range(cfg.n_layers)):
        p = f"l{l}."
        a, ln1, q, k, v, att, o, bn, ln2, u, t, gu = caches[l]
        d = dh.shape[-1]
        # feedforward sublayer
        grads[p + "w2"] = gu.reshape(-1, gu.shape[-1]).T @ dh.reshape(-1, d)
        grads[p + "b2"] = dh.reshape(-1, d).sum(axis=0)
        dgu = _lin(dh, params[p + "w2"].T)
        du = _gelu_back(dgu, u, t)
        grads[p + "w1"] = bn.reshape(-1, d).T @ du.reshape(-1, du.shape[-1])
        grads[p + "b1"] = du.reshape(-1, du.shape[-1]).sum(axis=0)
        dbn = _lin(du, params[p + "w1"].T)
        dx, grads[p + "ln2_g"], grads[p + "ln2_b"] = _layernorm_back(dbn, params[p + "ln2_g"], ln2)
        dh = dh + dx
        # attention sublayer
        grads[p + "wo"] = o.reshape(-1, d).T @ dh.reshape(-1, d)
        grads[p + "bo"] = dh.reshape(-1, d).sum(axis=0)
        do = _split_heads(_lin(dh, params[p + "wo"].T), cfg.n_heads)
        datt = do @ v.transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ do
        ds = att * (datt - (datt * att).sum(axis=-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        a2 = a.reshape(-1, d)
        da = np.zeros_like(a)
        for name, dproj in (("q", dq), ("k", dk), ("v", dv)):
            dproj = _merge_heads(dproj)
            grads[p + "w" + name] = a2.T @ dproj.reshape(-1, d)
            grads[p + "b" + name] = dproj.reshape(-1, d).sum(axis=0)
            da += _lin(dproj, params[p + "w" + name].T)
        dx, grads[p + "ln1_g"], grads[p + "ln1_b"] = _layernorm_back(da, params[p + "ln1_g"], ln1)
        dh = dh + dx
    grads["pos"] = dh.sum(axis=0)
    grads["emb_b"] = dh.reshape(-1, dh.shape[-1]).sum(axis=0)
    grads["emb_w"] = (dh * x[:, :, None]).reshape(-1, dh.shape[-1]).sum(axis=0)
    return grads


def softplus(a):
    return np.logaddexp(0.0, a)


def to_quantiles(a):
    """Monotone quantiles from raw outputs: first level free, then softplus increments."""
    a = np.asarray(a)
    q = np.empty_like(a)
    q[..., 0] = a[..., 0]
    q[..., 1:] = a[..., :1] + np.cumsum(softplus(a[..., 1:]), axis=-1)
    return q


def to_quantiles_backward(a, d_q):
    d_a = np.empty_like(d_q)
    d_a[..., 0] = d_q.sum(axis=-1)
    tail = np.cumsum(d_q[..., :0:-1], axis=-1)[..., ::-1]  # sum over k >= j
    sig = 0.5 * (1.0 + np.tanh(0.5 * a[..., 1:]))
    d_a[..., 1:] = tail * sig
    return d_a


def pinball_loss(q_hat, y, levels=QUANTILE_LEVELS):
    """Mean pinball loss; ``q_hat`` is (..., H, Q), ``y`` is (..., H)."""
    r = np.asarray(y)[..., None] - np.asarray(q_hat)
    tau = np.asarray(levels)
    return float(np.mean(np.maximum(tau * r, (tau - 1.0) * r)))


def pinball_grad(q_hat, y, levels=QUANTILE_LEVELS):
    """Gradient of :func:`pinball_loss` w.r.t. ``q_hat`` (subgradient 1 - tau at r = 0)."""
    r = np.asarray(y)[..., None] - q_hat
    tau = np.asarray(levels)
    g = np.where(r > 0, -tau, 1.0 - tau)
    return (g / r.size).astype(q_hat.dtype, copy=False)


def loss_and_grad(params, z_in, z_out, cfg: ModelConfig, levels=QUANTILE_LEVELS):
    a, cache = forward(params, z_in, cfg, keep_cache=True)
    q = to_quantiles(a)
    loss = pinball_loss(q, z_out, levels)
    d_a = to_quantiles_backward(a, pinball_grad(q, z_out, levels))
    return loss, backward(params, cache, d_a, cfg)


def predict_quantiles(params, z_in, cfg: ModelConfig, chunk=4096):
    """Normalized-scale quantiles, (batch, H, Q), evaluated in chunks."""
    z_in = np.atleast_2d(np.asarray(z_in, dtype=np.float64))
    out = [to_quantiles(forward(params, z_in[i:i + chunk], cfg)) for i in range(0, z_in.shape[0], chunk)]
    return np.concatenate(out, axis=0) if out else np.zeros((0, cfg.horizon, cfg.n_quantiles))
