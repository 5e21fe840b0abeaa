"""Layer implementations with cached forward passes and manual backward passes.

All arrays carry a leading batch axis.  Image-like activations are
``(batch, time, freq, channels)``; sequences are ``(batch, time, features)``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .spec import LayerSpec, fixed_matrix, layer_param_shapes

LEAKY_SLOPE = 0.2
BN_EPS = 1e-5
BN_MOMENTUM = 0.9
LOG_FLOOR = 1e-10


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def rows_matmul(x, m):
    """``x @ m`` over the last axis, always as one 2-D product.

    Used by every fixed-matrix path so that the differentiable and plain
    feature pipelines produce bit-identical values.
    """
    flat = np.ascontiguousarray(x).reshape(-1, x.shape[-1])
    return (flat @ m).reshape(x.shape[:-1] + (m.shape[1],))


class Layer:
    """Base layer: parameterless identity."""

    def __init__(self, spec: LayerSpec, rng: np.random.Generator | None = None):
        self.spec = spec
        self.params: dict[str, np.ndarray] = {
            k: np.zeros(s) for k, s in layer_param_shapes(spec).items()
        }
        self.grads: dict[str, np.ndarray] = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.buffers: dict[str, np.ndarray] = {}
        self.frozen = False
        # the graph clears this when nothing upstream needs the input gradient
        self.need_input_grad = True
        if rng is not None:
            self.init_params(rng)

    def init_params(self, rng: np.random.Generator) -> None:
        pass

    def forward(self, x, train: bool, src=None):
        return x

    def backward(self, dy):
        """Return the input gradient (and source gradient for two-input layers)."""
        return dy

    def accumulate(self, name: str, g) -> None:
        if not self.frozen:
            self.grads[name] += g

    def release(self) -> None:
        """Drop the arrays cached by the last forward pass."""
        for name in [k for k in vars(self) if k.startswith("_")]:
            delattr(self, name)


class Conv2d(Layer):
    def init_params(self, rng):
        cout, cin, kt, kf = self.params["weight"].shape
        bound = 1.0 / np.sqrt(cin * kt * kf)
        self.params["weight"][...] = rng.uniform(-bound, bound, self.params["weight"].shape)
        self.params["bias"][...] = rng.uniform(-bound, bound, cout)

    def _matrix(self):
        # (kt*kf*cin, cout), rows ordered to match the column layout
        w = self.params["weight"]
        return np.ascontiguousarray(w.transpose(2, 3, 1, 0).reshape(-1, w.shape[0]))

    def forward(self, x, train, src=None):
        kt, kf = self.spec.kernel
        st, sf = self.spec.stride
        t0, t1, f0, f1 = self.spec.padding
        if t0 or t1 or f0 or f1:
            x_p = np.pad(x, ((0, 0), (t0, t1), (f0, f1), (0, 0)))
        else:
            x_p = x
        win = sliding_window_view(x_p, (kt, kf), axis=(1, 2))[:, ::st, ::sf]
        b, to, fo, c = win.shape[:4]
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(b * to * fo, kt * kf * c)
        y = cols @ self._matrix()
        y += self.params["bias"]
        self._x_shape = x.shape
        self._cols_cache = cols
        return y.reshape(b, to, fo, -1)

    def backward(self, dy):
        w = self.params["weight"]
        cout, cin, kt, kf = w.shape
        st, sf = self.spec.stride
        t0, t1, f0, f1 = self.spec.padding
        b, to, fo, _ = dy.shape
        dy2 = dy.reshape(-1, cout)
        if not self.frozen:
            dw = (dy2.T @ self._cols_cache).T.reshape(kt, kf, cin, cout)
            self.grads["weight"] += dw.transpose(3, 2, 0, 1)
            self.grads["bias"] += dy2.sum(axis=0)
        self._cols_cache = None
        if not self.need_input_grad:
            return None
        _, T, F, _ = self._x_shape
        dxp = np.zeros((b, T + t0 + t1, F + f0 + f1, cin))
        if cin < 16:
            # few input channels: one wide product, then scatter
            dcols = (dy2 @ self._matrix().T).reshape(b, to, fo, kt, kf, cin)
            parts = lambda i, j: dcols[:, :, :, i, j]
        else:
            # contiguous per-offset (cout, cin) blocks keep the products on BLAS
            blocks = np.ascontiguousarray(w.transpose(2, 3, 0, 1))
            parts = lambda i, j: (dy2 @ blocks[i, j]).reshape(b, to, fo, cin)
        for i in range(kt):
            for j in range(kf):
                dxp[:, i : i + st * (to - 1) + 1 : st, j : j + sf * (fo - 1) + 1 : sf] += parts(i, j)
        return dxp[:, t0 : t0 + T, f0 : f0 + F]


class ConvTranspose2d(Layer):
    """Strided transposed convolution; ``padding`` crops the full output."""

    def init_params(self, rng):
        cin, cout, kt, kf = self.params["weight"].shape
        bound = 1.0 / np.sqrt(cin * kt * kf)
        self.params["weight"][...] = rng.uniform(-bound, bound, self.params["weight"].shape)
        self.params["bias"][...] = rng.uniform(-bound, bound, cout)

    def _matrix(self):
        # (cin, kt*kf*cout)
        w = self.params["weight"]
        return np.ascontiguousarray(w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1))

    def forward(self, x, train, src=None):
        cin, cout, kt, kf = self.params["weight"].shape
        st, sf = self.spec.stride
        t0, t1, f0, f1 = self.spec.padding
        b, ti, fi, _ = x.shape
        x2 = np.ascontiguousarray(x).reshape(-1, cin)
        cols = (x2 @ self._matrix()).reshape(b, ti, fi, kt, kf, cout)
        full = np.zeros((b, (ti - 1) * st + kt, (fi - 1) * sf + kf, cout))
        for i in range(kt):
            for j in range(kf):
                full[:, i : i + st * (ti - 1) + 1 : st, j : j + sf * (fi - 1) + 1 : sf] += cols[:, :, :, i, j]
        self._x2 = x2
        self._in_shape = x.shape
        y = full[:, t0 : full.shape[1] - t1, f0 : full.shape[2] - f1]
        return y + self.params["bias"]

    def backward(self, dy):
        w = self.params["weight"]
        cin, cout, kt, kf = w.shape
        st, sf = self.spec.stride
        t0, t1, f0, f1 = self.spec.padding
        b, ti, fi, _ = self._in_shape
        if not self.frozen:
            self.grads["bias"] += dy.sum(axis=(0, 1, 2))
        dfull = np.pad(dy, ((0, 0), (t0, t1), (f0, f1), (0, 0)))
        win = sliding_window_view(dfull, (kt, kf), axis=(1, 2))[:, ::st, ::sf]
        dcols = win.transpose(0, 1, 2, 4, 5, 3).reshape(b * ti * fi, kt * kf * cout)
        if not self.frozen:
            dw = (self._x2.T @ dcols).reshape(cin, kt, kf, cout)
            self.grads["weight"] += dw.transpose(0, 3, 1, 2)
        self._x2 = None
        if not self.need_input_grad:
            return None
        return (dcols @ self._matrix().T).reshape(b, ti, fi, cin)


class Linear(Layer):
    def init_params(self, rng):
        cout, cin = self.params["weight"].shape
        bound = 1.0 / np.sqrt(cin)
        self.params["weight"][...] = rng.uniform(-bound, bound, (cout, cin))
        self.params["bias"][...] = rng.uniform(-bound, bound, cout)

    def forward(self, x, train, src=None):
        self._x = x
        return rows_matmul(x, self.params["weight"].T) + self.params["bias"]

    def backward(self, dy):
        w = self.params["weight"]
        dy2 = dy.reshape(-1, w.shape[0])
        if not self.frozen:
            x2 = self._x.reshape(-1, w.shape[1])
            self.grads["weight"] += dy2.T @ x2
            self.grads["bias"] += dy2.sum(axis=0)
        self._x = None
        return (dy2 @ w).reshape(dy.shape[:-1] + (w.shape[1],))


class BatchNorm(Layer):
    """Batch normalisation over the last (channel/feature) axis."""

    def __init__(self, spec, rng=None):
        super().__init__(spec, rng)
        c = spec.in_channels
        self.buffers = {"running_mean": np.zeros(c), "running_var": np.ones(c)}
        if spec.affine:
            self.params["gamma"][...] = 1.0

    def forward(self, x, train, src=None):
        x2 = x.reshape(-1, x.shape[-1])
        if train:
            mean = x2.mean(axis=0)
            var = x2.var(axis=0)
            n = x2.shape[0]
            unbiased = var * n / max(n - 1, 1)
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            rm *= BN_MOMENTUM
            rm += (1 - BN_MOMENTUM) * mean
            rv *= BN_MOMENTUM
            rv += (1 - BN_MOMENTUM) * unbiased
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x2 - mean) * inv
        self._xhat, self._inv, self._train = xhat, inv, train
        y = xhat
        if self.spec.affine:
            y = xhat * self.params["gamma"] + self.params["beta"]
        return y.reshape(x.shape)

    def backward(self, dy):
        dy2 = dy.reshape(-1, dy.shape[-1])
        xhat, inv = self._xhat, self._inv
        if self.spec.affine:
            if not self.frozen:
                self.grads["gamma"] += (dy2 * xhat).sum(axis=0)
                self.grads["beta"] += dy2.sum(axis=0)
            dxhat = dy2 * self.params["gamma"]
        else:
            dxhat = dy2
        if self._train:
            dx = inv * (dxhat - dxhat.mean(axis=0) - xhat * (dxhat * xhat).mean(axis=0))
        else:
            dx = dxhat * inv
        self._xhat = None
        return dx.reshape(dy.shape)


class Activation(Layer):
    def forward(self, x, train, src=None):
        kind = self.spec.activation
        if kind == "relu":
            y = np.maximum(x, 0.0)
        elif kind == "lrelu":
            y = np.where(x > 0, x, LEAKY_SLOPE * x)
        elif kind == "sigmoid":
            y = sigmoid(x)
        elif kind == "tanh":
            y = np.tanh(x)
        elif kind == "softmax":
            y = softmax(x)
        else:
            y = x
        self._x, self._y = x, y
        return y

    def backward(self, dy):
        kind = self.spec.activation
        x, y = self._x, self._y
        if kind == "relu":
            return dy * (x > 0)
        if kind == "lrelu":
            return dy * np.where(x > 0, 1.0, LEAKY_SLOPE)
        if kind == "sigmoid":
            return dy * y * (1.0 - y)
        if kind == "tanh":
            return dy * (1.0 - y * y)
        if kind == "softmax":
            return y * (dy - (dy * y).sum(axis=-1, keepdims=True))
        return dy


class BiLSTM(Layer):
    """Bidirectional LSTM, gate order (i, f, g, o), outputs ``[forward, backward]``."""

    def init_params(self, rng):
        u, d = self.spec.out_channels, self.spec.in_channels
        for direction in ("fwd", "bwd"):
            b_ih = 1.0 / np.sqrt(d)
            b_hh = 1.0 / np.sqrt(u)
            self.params[f"{direction}_w_ih"][...] = rng.uniform(-b_ih, b_ih, (4 * u, d))
            self.params[f"{direction}_w_hh"][...] = rng.uniform(-b_hh, b_hh, (4 * u, u))
            self.params[f"{direction}_b_ih"][...] = 0.0
            self.params[f"{direction}_b_ih"][u : 2 * u] = 1.0
            self.params[f"{direction}_b_hh"][...] = 0.0

    def _run(self, x, direction):
        p = self.params
        u = self.spec.out_channels
        b, T, _ = x.shape
        w_hh_t = p[f"{direction}_w_hh"].T
        xp = rows_matmul(x, p[f"{direction}_w_ih"].T) + p[f"{direction}_b_ih"] + p[f"{direction}_b_hh"]
        order = range(T) if direction == "fwd" else range(T - 1, -1, -1)
        h = np.zeros((b, u))
        c = np.zeros((b, u))
        hs = np.zeros((b, T, u))
        cache = []
        for t in order:
            z = xp[:, t] + h @ w_hh_t
            i = sigmoid(z[:, :u])
            f = sigmoid(z[:, u : 2 * u])
            g = np.tanh(z[:, 2 * u : 3 * u])
            o = sigmoid(z[:, 3 * u :])
            c_prev, h_prev = c, h
            c = f * c_prev + i * g
            tc = np.tanh(c)
            h = o * tc
            hs[:, t] = h
            cache.append((t, i, f, g, o, c_prev, h_prev, tc))
        return hs, cache

    def forward(self, x, train, src=None):
        hf, cf = self._run(x, "fwd")
        hb, cb = self._run(x, "bwd")
        self._x = x
        self._caches = {"fwd": cf, "bwd": cb}
        return np.concatenate([hf, hb], axis=-1)

    def _backprop(self, dh_all, direction):
        p = self.params
        u = self.spec.out_channels
        x = self._x
        b, T, _ = x.shape
        w_hh = p[f"{direction}_w_hh"]
        dz_all = np.zeros((b, T, 4 * u))
        dw_hh = np.zeros_like(w_hh)
        dh_next = np.zeros((b, u))
        dc_next = np.zeros((b, u))
        for t, i, f, g, o, c_prev, h_prev, tc in reversed(self._caches[direction]):
            dh = dh_all[:, t] + dh_next
            do = dh * tc
            dc = dh * o * (1.0 - tc * tc) + dc_next
            dz = dz_all[:, t]
            dz[:, :u] = dc * g * i * (1.0 - i)
            dz[:, u : 2 * u] = dc * c_prev * f * (1.0 - f)
            dz[:, 2 * u : 3 * u] = dc * i * (1.0 - g * g)
            dz[:, 3 * u :] = do * o * (1.0 - o)
            dw_hh += dz.T @ h_prev
            dh_next = dz @ w_hh
            dc_next = dc * f
        dz2 = dz_all.reshape(-1, 4 * u)
        if not self.frozen:
            self.grads[f"{direction}_w_ih"] += dz2.T @ x.reshape(-1, x.shape[-1])
            self.grads[f"{direction}_w_hh"] += dw_hh
            db = dz2.sum(axis=0)
            self.grads[f"{direction}_b_ih"] += db
            self.grads[f"{direction}_b_hh"] += db
        return (dz2 @ p[f"{direction}_w_ih"]).reshape(x.shape)

    def backward(self, dy):
        u = self.spec.out_channels
        dx = self._backprop(dy[..., :u], "fwd") + self._backprop(dy[..., u:], "bwd")
        self._caches = None
        return dx


class MaxPool2d(Layer):
    """Max pooling over (time, freq); ties route the gradient to the first maximum."""

    def _slices(self, to, fo):
        kt, kf = self.spec.kernel
        st, sf = self.spec.stride
        for i in range(kt):
            for j in range(kf):
                yield (slice(None), slice(i, i + st * (to - 1) + 1, st), slice(j, j + sf * (fo - 1) + 1, sf))

    def forward(self, x, train, src=None):
        kt, kf = self.spec.kernel
        st, sf = self.spec.stride
        to = (x.shape[1] - kt) // st + 1
        fo = (x.shape[2] - kf) // sf + 1
        y = None
        for sl in self._slices(to, fo):
            y = x[sl].copy() if y is None else np.maximum(y, x[sl])
        self._x, self._y = x, y
        return y

    def backward(self, dy):
        x, y = self._x, self._y
        dx = np.zeros(x.shape)
        taken = np.zeros(y.shape, dtype=bool)
        for sl in self._slices(*y.shape[1:3]):
            hit = (x[sl] == y) & ~taken
            taken |= hit
            dx[sl] += np.where(hit, dy, 0.0)
        self._x = self._y = None
        return dx


class Reshape(Layer):
    def forward(self, x, train, src=None):
        mode = self.spec.options["mode"]
        self._in_shape = x.shape
        b = x.shape[0]
        if mode == "image":
            return x[..., None]
        if mode == "squeeze":
            return x[..., 0]
        if mode == "sequence":
            _, t, f, c = x.shape
            return x.reshape(b, t, f * c)
        if mode == "channels":
            _, t, d = x.shape
            c = self.spec.out_channels
            return x.reshape(b, t, d // c, c)
        return x.reshape(b, -1)

    def backward(self, dy):
        return dy.reshape(self._in_shape)


class ConcatSkip(Layer):
    def forward(self, x, train, src=None):
        self._split = x.shape[-1]
        return np.concatenate([x, src], axis=-1)

    def backward(self, dy):
        return dy[..., : self._split], dy[..., self._split :]


class ElemwiseMul(Layer):
    def forward(self, x, train, src=None):
        self._x, self._src = x, src
        return x * src

    def backward(self, dy):
        return dy * self._src, dy * self._x


class FixedMatmul(Layer):
    def __init__(self, spec, rng=None):
        super().__init__(spec, rng)
        self.matrix = fixed_matrix(spec.options["matrix"])

    def forward(self, x, train, src=None):
        return rows_matmul(x, self.matrix)

    def backward(self, dy):
        return rows_matmul(dy, self.matrix.T)


class Log(Layer):
    def forward(self, x, train, src=None):
        floor = float(self.spec.options.get("floor", LOG_FLOOR))
        self._x = x
        self._floor = floor
        return np.log(np.maximum(x, floor))

    def backward(self, dy):
        x = self._x
        live = x > self._floor
        return np.where(live, dy / np.where(live, x, 1.0), 0.0)


class PadTime(Layer):
    """Zero-pad the time axis to a multiple, or centre within a fixed length."""

    def forward(self, x, train, src=None):
        ax = 1
        n = x.shape[ax]
        opts = self.spec.options
        if "multiple" in opts:
            m = int(opts["multiple"])
            before, after = 0, -(-n // m) * m - n
        else:
            extra = int(opts["length"]) - n
            before = extra // 2
            after = extra - before
        self._cut = (ax, before, n)
        widths = [(0, 0)] * x.ndim
        widths[ax] = (before, after)
        return np.pad(x, widths) if before or after else x

    def backward(self, dy):
        ax, before, n = self._cut
        return np.take(dy, np.arange(before, before + n), axis=ax)


class CropTime(Layer):
    """Crop the time axis back to the graph input's frame count."""

    frames = 0

    def forward(self, x, train, src=None):
        ax = 1
        self._full = x.shape
        return np.take(x, np.arange(self.frames), axis=ax)

    def backward(self, dy):
        ax = 1
        widths = [(0, 0)] * dy.ndim
        widths[ax] = (0, self._full[ax] - dy.shape[ax])
        return np.pad(dy, widths)


LAYER_TYPES = {
    "conv": Conv2d,
    "deconv": ConvTranspose2d,
    "bilstm": BiLSTM,
    "fc": Linear,
    "batchnorm": BatchNorm,
    "activation": Activation,
    "maxpool": MaxPool2d,
    "reshape": Reshape,
    "concat-skip": ConcatSkip,
    "fixed-matmul": FixedMatmul,
    "log": Log,
    "elemwise-mul": ElemwiseMul,
    "pad": PadTime,
    "crop": CropTime,
}


def make_layer(spec: LayerSpec, rng: np.random.Generator | None = None) -> Layer:
    return LAYER_TYPES[spec.kind](spec, rng)
