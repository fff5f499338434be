"""A small layer engine: convolution, pooling, dense, dropout, losses, Adam.

Tensors are plain numpy arrays laid out ``[batch, channels, height, width]``
for images and ``[batch, features]`` otherwise.  Every layer caches what its
backward pass needs during ``forward`` and accumulates parameter gradients
into ``layer.grads`` during ``backward``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class StaleCacheError(RuntimeError):
    """backward() called without a matching forward()."""


class NonFiniteGradient(FloatingPointError):
    pass


def conv_output_size(size: int, kernel: int, stride: int = 1, pad: int = 0) -> int:
    return (size + 2 * pad - kernel) // stride + 1


class Layer:
    params: dict[str, np.ndarray]
    grads: dict[str, np.ndarray]

    def __init__(self):
        self.params = {}
        self.grads = {}
        self._cache = None

    def forward(self, x, train: bool = False):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def zero_grad(self):
        for k, p in self.params.items():
            g = self.grads.get(k)
            if g is not None and g.shape == p.shape and g.dtype == p.dtype:
                g.fill(0)  # reuse: the merge layer's gradient runs to ~100 MB
            else:
                self.grads[k] = np.zeros_like(p)

    def _take_cache(self):
        if self._cache is None:
            raise StaleCacheError(f"{type(self).__name__}.backward without forward")
        cache, self._cache = self._cache, None
        return cache


class Conv2D(Layer):
    """Cross-correlation with ``out_maps`` kernels of size ``k x k``."""

    def __init__(self, in_maps: int, out_maps: int, kernel: int, stride: int = 1, pad: int = 0,
                 rng: np.random.Generator | None = None, dtype=np.float64):
        super().__init__()
        if kernel < 1 or stride < 1 or pad < 0:
            raise ValueError("invalid convolution geometry")
        self.in_maps, self.out_maps = in_maps, out_maps
        self.kernel, self.stride, self.pad = kernel, stride, pad
        rng = rng or np.random.default_rng(0)
        fan_in = in_maps * kernel * kernel
        w = rng.standard_normal((out_maps, in_maps, kernel, kernel)) * np.sqrt(2.0 / fan_in)
        self.params = {"weight": w.astype(dtype), "bias": np.zeros(out_maps, dtype)}
        self.zero_grad()

    def output_shape(self, shape):
        c, h, w = shape
        return (self.out_maps, conv_output_size(h, self.kernel, self.stride, self.pad),
                conv_output_size(w, self.kernel, self.stride, self.pad))

    def _windows(self, x):
        p, k, s = self.pad, self.kernel, self.stride
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        return x.shape, win

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[1] != self.in_maps:
            raise ValueError(f"conv expects [B, {self.in_maps}, H, W], got {x.shape}")
        padded_shape, win = self._windows(x)
        if win.shape[2] < 1 or win.shape[3] < 1:
            raise ValueError(f"input {x.shape[2:]} too small for a {self.kernel}x{self.kernel} kernel")
        w = self.params["weight"]
        out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # [B, Ho, Wo, O]
        out = out.transpose(0, 3, 1, 2) + self.params["bias"][None, :, None, None]
        self._cache = (padded_shape, win)
        return np.ascontiguousarray(out)

    def backward(self, dy):
        padded_shape, win = self._take_cache()
        w = self.params["weight"]
        k, s, p = self.kernel, self.stride, self.pad
        self.grads["weight"] += np.tensordot(dy, win, axes=([0, 2, 3], [0, 2, 3]))
        self.grads["bias"] += dy.sum(axis=(0, 2, 3))
        dxp = np.zeros(padded_shape, dtype=dy.dtype)
        ho, wo = dy.shape[2], dy.shape[3]
        for i in range(k):
            for j in range(k):
                contrib = np.tensordot(dy, w[:, :, i, j], axes=([1], [0]))  # [B, Ho, Wo, C]
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += contrib.transpose(0, 3, 1, 2)
        if p:
            dxp = dxp[:, :, p:-p, p:-p]
        return dxp


class MaxPool2D(Layer):
    def __init__(self, window: int = 2, stride: int = 2):
        super().__init__()
        self.window, self.stride = window, stride

    def output_shape(self, shape):
        c, h, w = shape
        return (c, conv_output_size(h, self.window, self.stride),
                conv_output_size(w, self.window, self.stride))

    def forward(self, x, train=False):
        k, s = self.window, self.stride
        if x.shape[2] < k or x.shape[3] < k:
            raise ValueError(f"input {x.shape[2:]} smaller than the {k}x{k} pooling window")
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        b, c, ho, wo = win.shape[:4]
        flat = win.reshape(b, c, ho, wo, k * k)
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        self._cache = (x.shape, arg)
        return out

    def backward(self, dy):
        shape, arg = self._take_cache()
        k, s = self.window, self.stride
        b, c, ho, wo = dy.shape
        rows = (np.arange(ho) * s)[None, None, :, None] + arg // k
        cols = (np.arange(wo) * s)[None, None, None, :] + arg % k
        dx = np.zeros(shape, dtype=dy.dtype)
        bi = np.arange(b)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        if k <= s:
            # windows do not overlap: each input cell receives at most one value
            dx[bi, ci, rows, cols] = dy
        else:
            np.add.at(dx, (bi, ci, rows, cols), dy)
        return dx

    def argmax_indices(self):
        return None if self._cache is None else self._cache[1]


class ReLU(Layer):
    def forward(self, x, train=False):
        mask = x > 0
        self._cache = mask
        return x * mask

    def backward(self, dy):
        return dy * self._take_cache()


class Flatten(Layer):
    def forward(self, x, train=False):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._take_cache())


class Dense(Layer):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None,
                 dtype=np.float64):
        super().__init__()
        if n_in < 1 or n_out < 1:
            raise ValueError("dense dimensions must be positive")
        rng = rng or np.random.default_rng(0)
        w = rng.standard_normal((n_out, n_in)) * np.sqrt(2.0 / n_in)
        self.params = {"weight": w.astype(dtype), "bias": np.zeros(n_out, dtype)}
        self.zero_grad()

    def forward(self, x, train=False):
        self._cache = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, dy):
        x = self._take_cache()
        self.grads["weight"] += dy.T @ x
        self.grads["bias"] += dy.sum(axis=0)
        return dy @ self.params["weight"]


class MergeDense(Layer):
    """Dense layer over ``concat(image_features, contingency_code)``.

    Input features are given once per distinct image together with a
    ``group`` index mapping every pattern to its image, so the image part of
    the product is evaluated once per image rather than once per pattern.
    ``encoding`` is ``"onehot"`` (width ``n_codes``), ``"scalar"`` (one column
    holding ``id / n_codes``) or ``"none"``.
    """

    def __init__(self, n_feat: int, n_codes: int, n_out: int, encoding: str = "onehot",
                 rng: np.random.Generator | None = None, dtype=np.float64):
        super().__init__()
        self.n_feat, self.n_codes, self.encoding = n_feat, n_codes, encoding
        self.code_width = {"onehot": n_codes, "scalar": 1, "none": 0}[encoding]
        self._work = None
        rng = rng or np.random.default_rng(0)
        n_in = n_feat + self.code_width
        w = rng.standard_normal((n_out, n_in)) * np.sqrt(2.0 / n_in)
        self.params = {"weight": w.astype(dtype), "bias": np.zeros(n_out, dtype)}
        self.zero_grad()

    def forward(self, inputs, train=False):
        feat, group, codes = inputs
        w = self.params["weight"]
        h = (feat @ w[:, :self.n_feat].T)[group] + self.params["bias"]
        if self.encoding == "onehot":
            h = h + w[:, self.n_feat + codes].T
        elif self.encoding == "scalar":
            h = h + np.outer(codes / self.n_codes, w[:, self.n_feat])
        self._cache = (feat, group, codes)
        return h

    def backward(self, dy):
        feat, group, codes = self._take_cache()
        w = self.params["weight"]
        u = feat.shape[0]
        sel = np.zeros((u, dy.shape[0]), dtype=dy.dtype)
        sel[group, np.arange(dy.shape[0])] = 1.0
        per_image = sel @ dy  # [U, out]
        gw = self.grads["weight"]
        if self._work is None or self._work.shape != (gw.shape[0], self.n_feat) \
                or self._work.dtype != gw.dtype:
            self._work = np.empty((gw.shape[0], self.n_feat), gw.dtype)
        np.matmul(per_image.T, feat, out=self._work)
        gw[:, :self.n_feat] += self._work
        if self.encoding == "onehot":
            onehot = np.zeros((dy.shape[0], self.n_codes), dtype=dy.dtype)
            onehot[np.arange(dy.shape[0]), codes] = 1.0
            gw[:, self.n_feat:] += dy.T @ onehot
        elif self.encoding == "scalar":
            gw[:, self.n_feat] += dy.T @ (codes / self.n_codes)
        self.grads["bias"] += dy.sum(axis=0)
        return per_image @ w[:, :self.n_feat]


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)`` in training."""

    def __init__(self, rate: float = 0.5, rng: np.random.Generator | None = None):
        super().__init__()
        if not 0 <= rate < 1:
            raise ValueError("dropout rate must lie in [0, 1)")
        self.rate = rate
        self.rng = rng or np.random.default_rng(0)

    def forward(self, x, train=False):
        if not train or self.rate == 0:
            self._cache = 1.0
            return x
        keep = (self.rng.random(x.shape) >= self.rate).astype(x.dtype) / (1.0 - self.rate)
        self._cache = keep
        return x * keep

    def backward(self, dy):
        return dy * self._take_cache()


def relu(x):
    return np.maximum(x, 0)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def conv2d_forward(x, layer: Conv2D):
    """Single-image convenience wrapper: ``[m, H, W] -> [m', H', W']``."""
    return layer.forward(np.asarray(x)[None])[0]


def maxpool(x, window: int = 2, stride: int = 2):
    """Pool a ``[m, H, W]`` map; returns the output and flat in-window argmax."""
    layer = MaxPool2D(window, stride)
    out = layer.forward(np.asarray(x)[None])
    return out[0], layer.argmax_indices()[0]


# ---------------------------------------------------------------------------
# losses

CLIP = 1e-12


def _check_lengths(y_pred, y_true):
    y_pred = np.asarray(y_pred, dtype=np.float64).ravel()
    y_true = np.asarray(y_true, dtype=np.float64).ravel()
    if y_pred.shape != y_true.shape:
        raise ValueError(f"length mismatch: {y_pred.size} predictions, {y_true.size} targets")
    return y_pred, y_true


def cross_entropy(y_pred, y_true) -> float:
    p, y = _check_lengths(y_pred, y_true)
    p = np.clip(p, CLIP, 1 - CLIP)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def cross_entropy_grad(y_pred, y_true) -> np.ndarray:
    p, y = _check_lengths(y_pred, y_true)
    p = np.clip(p, CLIP, 1 - CLIP)
    return -(y / p - (1 - y) / (1 - p)) / p.size


def cross_entropy_logits(z, y_true) -> tuple[float, np.ndarray]:
    """Sigmoid + cross-entropy on logits: (loss, dloss/dz)."""
    z, y = _check_lengths(z, y_true)
    # log(1 + exp(-|z|)) form avoids overflow
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return float(loss.mean()), (sigmoid(z) - y) / z.size


def mse(y_pred, y_true) -> float:
    p, y = _check_lengths(y_pred, y_true)
    return float(np.mean((y - p) ** 2))


def mse_grad(y_pred, y_true) -> np.ndarray:
    p, y = _check_lengths(y_pred, y_true)
    return 2.0 * (p - y) / p.size


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-9
    t: int = 0
    # bias correction 1 - beta**t; the literal variant divides by 1 - beta
    paper_exact: bool = False
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    # scratch space per dtype; not part of the optimizer state
    _work: dict[str, np.ndarray] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState) -> None:
    """Update ``params`` in place.

    A non-finite gradient raises :class:`NonFiniteGradient` before anything
    (parameters, moments or step counter) changes.
    """
    for name, g in grads.items():
        if params[name].shape != g.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != {params[name].shape}")
        # a sum is non-finite iff some term is (or the sum overflows, which
        # is divergence anyway); cheaper than a full isfinite mask
        if not np.isfinite(np.sum(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    if state.paper_exact:
        c1, c2 = 1.0 - b1, 1.0 - b2
    else:
        c1, c2 = 1.0 - b1 ** state.t, 1.0 - b2 ** state.t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        work = state._work.get(p.dtype)
        if work is None:
            work = state._work[p.dtype] = np.empty(ADAM_CHUNK, p.dtype)
        pf, gf = p.reshape(-1), np.ascontiguousarray(g, dtype=p.dtype).reshape(-1)
        mf, vf = state.m[name].reshape(-1), state.v[name].reshape(-1)
        # chunked so the whole update runs in cache; each element sees the
        # same arithmetic as the unchunked formula
        for lo in range(0, pf.size, ADAM_CHUNK):
            hi = min(lo + ADAM_CHUNK, pf.size)
            _adam_chunk(pf[lo:hi], gf[lo:hi], mf[lo:hi], vf[lo:hi], work[:hi - lo],
                        b1, b2, c1, c2, state.eps, state.lr)


ADAM_CHUNK = 1 << 15


def _adam_chunk(p, g, m, v, work, b1, b2, c1, c2, eps, lr):
    m *= b1
    np.multiply(g, 1 - b1, out=work)
    m += work
    v *= b2
    np.multiply(g, g, out=work)
    work *= 1 - b2
    v += work
    np.divide(v, c2, out=work)
    np.sqrt(work, out=work)
    work += eps
    np.divide(m, work, out=work)
    work *= lr / c1
    p -= work


class Sequential:
    """Layers applied in order, with names ``"<index>.<param>"``."""

    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def parameters(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {f"{prefix}{i}.{k}": p for i, layer in enumerate(self.layers)
                for k, p in layer.params.items()}

    def gradients(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {f"{prefix}{i}.{k}": g for i, layer in enumerate(self.layers)
                for k, g in layer.grads.items()}

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()
