"""
Layers with explicit forward and backward passes.

Every layer keeps its trainable arrays in ``params`` (and non-trainable state
in ``buffers``). ``forward`` returns ``(output, cache)`` and ``backward(cache,
upstream)`` returns ``(input_grad, param_grads)``; neither touches the
parameters, so a layer can be differentiated repeatedly for gradient checks.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from ..errors import DegenerateBatch, LabelError, ShapeError, StateError

DEFAULT_DTYPE = np.float32


def glorot_init(shape, rng, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Uniform in +-sqrt(6 / (fan_in + fan_out)); 1-D shapes (biases) are zero.

    Shapes are ``(out, in)`` or ``(out, in, kernel)``.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) == 1:
        return np.zeros(shape, dtype=dtype)
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan_out, fan_in = shape[0] * receptive, shape[1] * receptive
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _check_cache(layer, cache):
    if not isinstance(cache, dict) or cache.get("layer") is not layer:
        raise StateError(f"cache was not produced by this {type(layer).__name__}")


class Layer:
    params: dict
    buffers: dict

    def zero_grads(self):
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def astype(self, dtype):
        for store in (self.params, self.buffers):
            for k in store:
                store[k] = store[k].astype(dtype)
        return self


class Conv1d(Layer):
    """Stride-1 cross-correlation with zero 'same' padding.

    Padding is ``floor((k-1)/2)`` on the left and ``ceil((k-1)/2)`` on the
    right, so the output length equals the input length.
    """

    def __init__(self, in_channels, out_channels, kernel, rng=None, dtype=DEFAULT_DTYPE):
        if kernel < 1:
            raise ShapeError("kernel must be >= 1")
        rng = np.random.default_rng(rng)
        self.in_channels, self.out_channels, self.kernel = in_channels, out_channels, kernel
        self.pad = ((kernel - 1) // 2, kernel - 1 - (kernel - 1) // 2)
        self.params = {
            "weight": glorot_init((out_channels, in_channels, kernel), rng, dtype),
            "bias": np.zeros(out_channels, dtype=dtype),
        }
        self.buffers = {}

    def _columns(self, x):
        """(batch, in*kernel, length) patch matrix; row ``c*k + j`` is channel c shifted by j."""
        b, c, n = x.shape
        k = self.kernel
        xp = np.pad(x, ((0, 0), (0, 0), self.pad))
        cols = np.empty((b, c, k, n), dtype=x.dtype)
        for j in range(k):
            cols[:, :, j] = xp[:, :, j:j + n]
        return cols.reshape(b, c * k, n)

    def forward(self, x, training=False):
        if x.ndim != 3 or x.shape[1] != self.in_channels:
            raise ShapeError(f"conv expects (batch, {self.in_channels}, length), got {x.shape}")
        cols = self._columns(x)
        w = self.params["weight"].reshape(self.out_channels, -1)
        y = np.matmul(w, cols) + self.params["bias"][:, None]
        return y, {"layer": self, "shape": x.shape, "cols": cols}

    def backward(self, cache, dy):
        _check_cache(self, cache)
        b, c, n = cache["shape"]
        if dy.shape != (b, self.out_channels, n):
            raise ShapeError(f"upstream gradient shape {dy.shape} does not match forward")
        k = self.kernel
        w = self.params["weight"].reshape(self.out_channels, -1)
        cols = cache["cols"]
        grads = {
            "weight": np.matmul(dy, cols.transpose(0, 2, 1)).sum(axis=0)
                        .reshape(self.params["weight"].shape),
            "bias": dy.sum(axis=(0, 2)),
        }
        dcols = np.matmul(w.T, dy).reshape(b, c, k, n)
        dxp = np.zeros((b, c, n + k - 1), dtype=dy.dtype)
        for j in range(k):
            dxp[:, :, j:j + n] += dcols[:, :, j]
        return dxp[:, :, self.pad[0]:self.pad[0] + n], grads


class BatchNorm1d(Layer):
    """Per-channel normalisation over (batch, length)."""

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=DEFAULT_DTYPE):
        self.momentum, self.eps = momentum, eps
        self.params = {"gamma": np.ones(channels, dtype=dtype),
                       "beta": np.zeros(channels, dtype=dtype)}
        self.buffers = {"running_mean": np.zeros(channels, dtype=dtype),
                        "running_var": np.ones(channels, dtype=dtype)}

    def forward(self, x, training=False):
        if x.ndim != 3 or x.shape[1] != self.params["gamma"].size:
            raise ShapeError(f"batchnorm expects (batch, {self.params['gamma'].size}, length)")
        gamma = self.params["gamma"][None, :, None]
        beta = self.params["beta"][None, :, None]
        if training:
            count = x.shape[0] * x.shape[2]
            if count < 2:
                raise DegenerateBatch("train-mode batchnorm needs >= 2 values per channel")
            mean = x.mean(axis=(0, 2))
            var = x.var(axis=(0, 2))
            m = self.momentum
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            rm[...] = (1 - m) * rm + m * mean
            rv[...] = (1 - m) * rv + m * var * count / (count - 1)
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv_std = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        xhat = (x - mean[None, :, None].astype(x.dtype)) * inv_std[None, :, None]
        return gamma * xhat + beta, {"layer": self, "xhat": xhat, "inv_std": inv_std,
                                     "training": training}

    def backward(self, cache, dy):
        _check_cache(self, cache)
        xhat, inv_std = cache["xhat"], cache["inv_std"]
        grads = {"gamma": (dy * xhat).sum(axis=(0, 2)), "beta": dy.sum(axis=(0, 2))}
        dxhat = dy * self.params["gamma"][None, :, None]
        if not cache["training"]:
            return dxhat * inv_std[None, :, None], grads
        count = dy.shape[0] * dy.shape[2]
        dx = (count * dxhat - dxhat.sum(axis=(0, 2), keepdims=True)
              - xhat * (dxhat * xhat).sum(axis=(0, 2), keepdims=True))
        return dx * (inv_std[None, :, None] / count), grads


class Dense(Layer):
    """``y = x @ W.T + b`` with ``W`` stored as (out, in)."""

    def __init__(self, in_features, out_features, rng=None, dtype=DEFAULT_DTYPE):
        rng = np.random.default_rng(rng)
        self.params = {"weight": glorot_init((out_features, in_features), rng, dtype),
                       "bias": np.zeros(out_features, dtype=dtype)}
        self.buffers = {}

    def forward(self, x, training=False):
        w = self.params["weight"]
        if x.ndim != 2 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"dense expects (batch, {w.shape[1]}), got {x.shape}")
        return x @ w.T + self.params["bias"], {"layer": self, "x": x}

    def backward(self, cache, dy):
        _check_cache(self, cache)
        x = cache["x"]
        if dy.shape != (x.shape[0], self.params["weight"].shape[0]):
            raise ShapeError(f"upstream gradient shape {dy.shape} does not match forward")
        grads = {"weight": dy.T @ x, "bias": dy.sum(axis=0)}
        return dy @ self.params["weight"], grads


GRU_GATES = ("z", "r", "h")
# magnitudes below this are flushed to zero inside the GRU loops; subnormal
# arithmetic is orders of magnitude slower on x86
SUBNORMAL_GUARD = 1e-30


def _fast_sigmoid(x):
    """sigmoid via tanh: several times faster than expit on small float32 blocks.

    Loses relative precision only deep in saturation, which does not matter
    for gate values.
    """
    y = np.tanh(0.5 * x)
    y += 1
    y *= 0.5
    return y


class GRU(Layer):
    """Single-layer GRU over (batch, time, features).

    Per step::

        z = sigmoid(W_z x + U_z h + b_z)
        r = sigmoid(W_r x + U_r h + b_r)
        c = tanh(W_h x + U_h (r * h) + b_h)
        h = (1 - z) * h + z * c
    """

    def __init__(self, input_size, hidden_size, rng=None, dtype=DEFAULT_DTYPE):
        rng = np.random.default_rng(rng)
        self.input_size, self.hidden_size = input_size, hidden_size
        self.params = {}
        for g in GRU_GATES:
            self.params[f"W_{g}"] = glorot_init((hidden_size, input_size), rng, dtype)
        for g in GRU_GATES:
            self.params[f"U_{g}"] = glorot_init((hidden_size, hidden_size), rng, dtype)
        for g in GRU_GATES:
            self.params[f"b_{g}"] = np.zeros(hidden_size, dtype=dtype)
        self.buffers = {}

    def forward(self, x, h0=None, training=False):
        if x.ndim != 3 or x.shape[2] != self.input_size:
            raise ShapeError(f"GRU expects (batch, time, {self.input_size}), got {x.shape}")
        p = self.params
        b, t_len, _ = x.shape
        hid = self.hidden_size
        if h0 is None:
            h0 = np.zeros((b, hid), dtype=x.dtype)
        elif h0.shape != (b, hid):
            raise ShapeError(f"h0 must be ({b}, {hid}), got {h0.shape}")
        w = np.concatenate([p["W_z"], p["W_r"], p["W_h"]])
        bias = np.concatenate([p["b_z"], p["b_r"], p["b_h"]])
        u_zr = np.concatenate([p["U_z"], p["U_r"]]).T
        u_h = p["U_h"].T
        # time-major buffers keep every per-step slice contiguous
        xp = np.ascontiguousarray((x @ w.T + bias).transpose(1, 0, 2))    # t, b, 3h
        hs = np.empty((t_len + 1, b, hid), dtype=x.dtype)
        zs = np.empty((t_len, b, hid), dtype=x.dtype)
        rs = np.empty_like(zs)
        cs = np.empty_like(zs)
        hs[0] = h = h0
        for t in range(t_len):
            zr = _fast_sigmoid(xp[t, :, :2 * hid] + h @ u_zr)
            z, r = zr[:, :hid], zr[:, hid:]
            c = np.tanh(xp[t, :, 2 * hid:] + (r * h) @ u_h)
            h = h + z * (c - h)
            # zero-padded tails decay the state toward subnormal floats
            h[np.abs(h) < SUBNORMAL_GUARD] = 0
            zs[t], rs[t], cs[t], hs[t + 1] = z, r, c, h
        cache = {"layer": self, "x": x, "hs": hs, "z": zs, "r": rs, "c": cs}
        return hs[1:].transpose(1, 0, 2), hs[-1], cache

    def backward(self, cache, d_states=None, d_final=None):
        """Backpropagation through time.

        ``d_states`` is the upstream gradient on every hidden state
        (batch, time, hidden) and ``d_final`` on the last one; either may be
        None. Returns ``(input_grad, param_grads, h0_grad)``.
        """
        _check_cache(self, cache)
        p = self.params
        x, hs, zs, rs, cs = cache["x"], cache["hs"], cache["z"], cache["r"], cache["c"]
        b, t_len, _ = x.shape
        hid = self.hidden_size
        if d_states is not None and d_states.shape != (b, t_len, hid):
            raise StateError(f"state gradient {d_states.shape} does not match cache")
        dh = np.zeros((b, hid), dtype=x.dtype) if d_final is None else d_final.copy()
        u_zr = np.concatenate([p["U_z"], p["U_r"]])               # 2h, h
        u_h = p["U_h"]
        d_pre = np.empty((t_len, b, 3 * hid), dtype=x.dtype)
        for t in range(t_len - 1, -1, -1):
            if d_states is not None:
                dh = dh + d_states[:, t]
            h_prev, z, r, c = hs[t], zs[t], rs[t], cs[t]
            da_h = dh * z * (1 - c * c)
            d_rh = da_h @ u_h
            d_pre[t, :, :hid] = dh * (c - h_prev) * z * (1 - z)
            d_pre[t, :, hid:2 * hid] = d_rh * h_prev * r * (1 - r)
            d_pre[t, :, 2 * hid:] = da_h
            dh = dh * (1 - z) + d_rh * r + d_pre[t, :, :2 * hid] @ u_zr
            # same guard as the forward pass: fading gradients would turn subnormal
            dh[np.abs(dh) < SUBNORMAL_GUARD] = 0
        # weight gradients summed over all steps in one product each
        h_prev_all = hs[:-1].reshape(-1, hid)
        flat_t = d_pre.reshape(-1, 3 * hid)
        du_zr = flat_t[:, :2 * hid].T @ h_prev_all
        du_h = flat_t[:, 2 * hid:].T @ (rs.reshape(-1, hid) * h_prev_all)
        du_z, du_r = du_zr[:hid], du_zr[hid:]
        d_pre = d_pre.transpose(1, 0, 2)
        flat = d_pre.reshape(-1, 3 * hid)
        dw = flat.T @ x.reshape(-1, self.input_size)
        db = flat.sum(axis=0)
        w = np.concatenate([p["W_z"], p["W_r"], p["W_h"]])
        grads = {}
        for i, g in enumerate(GRU_GATES):
            grads[f"W_{g}"] = dw[i * hid:(i + 1) * hid]
        grads.update(U_z=du_z, U_r=du_r, U_h=du_h)
        for i, g in enumerate(GRU_GATES):
            grads[f"b_{g}"] = db[i * hid:(i + 1) * hid]
        return d_pre @ w, grads, dh


def leaky_relu(x, slope=0.01):
    if 0 <= slope <= 1:
        return np.maximum(x, slope * x)
    return np.where(x > 0, x, slope * x)


def leaky_relu_backward(x, dy, slope=0.01):
    return np.where(x > 0, dy, slope * dy)


def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, dy):
    return np.where(x > 0, dy, 0)


def sigmoid(x):
    return expit(x)


def sigmoid_backward(y, dy):
    """Gradient through a sigmoid given its output ``y``."""
    return dy * y * (1 - y)


def maxpool1d(x, pool=2, stride=2):
    """Max over windows along the last axis; remainder samples are dropped.

    Returns ``(pooled, argmax)`` with argmax as absolute positions along the
    input axis. Ties resolve to the earliest index.
    """
    n = x.shape[-1]
    if n < pool:
        raise ShapeError(f"length {n} shorter than pool {pool}")
    windows = sliding_window_view(x, pool, axis=-1)[..., ::stride, :]
    local = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, local[..., None], axis=-1)[..., 0]
    starts = np.arange(windows.shape[-2]) * stride
    return out, local + starts


def maxpool1d_backward(dy, argmax, length):
    dx = np.zeros(dy.shape[:-1] + (length,), dtype=dy.dtype)
    # windows never overlap when pool <= stride, so plain assignment routes exactly
    np.put_along_axis(dx, argmax, dy, axis=-1)
    return dx


BCE_CLAMP = 1e-7


def bce_loss(p, y):
    """Mean binary cross-entropy and its gradient w.r.t. ``p``.

    Probabilities are clamped to [1e-7, 1 - 1e-7]; the gradient is taken at
    the clamped value so saturated outputs still receive a learning signal.
    """
    p = np.asarray(p)
    y = np.asarray(y)
    if p.shape != y.shape:
        raise ShapeError(f"probabilities {p.shape} and targets {y.shape} differ")
    if not np.all((y == 0) | (y == 1)):
        raise LabelError("targets must be 0 or 1")
    pc = np.clip(p, BCE_CLAMP, 1 - BCE_CLAMP)
    y = y.astype(pc.dtype)
    loss = -np.mean(y * np.log(pc) + (1 - y) * np.log1p(-pc))
    grad = (pc - y) / (pc * (1 - pc)) / p.size
    return float(loss), grad.astype(p.dtype)
