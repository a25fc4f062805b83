"""Manual layers with explicit backward passes, in fp32 and int8 modes.

The int8 mode emulates 8-bit training: weights are projected onto the
quantization grid before the multiply, accumulation stays at full
precision, and every layer output is requantized. The backward pass
bifurcates: the layer gradient passed upstream goes through
quantize-dequantize, while weight gradients stay full precision.

Normalization layers follow the range convention: the denominator is the
spread of the activations scaled by C(N) = 1/sqrt(2 ln N) instead of a
standard deviation, which avoids sums of squares and square roots on the
low-precision path.
"""

import math

import numpy as np

from .tensorq import qdq, quant_params_for, ste_grad

FP32 = "fp32"
INT8 = "int8"

EPS_RANGE = 1e-5
EPS_VAR = 1e-5


def _check_mode(mode: str):
    if mode not in (FP32, INT8):
        raise ValueError(f"mode must be '{FP32}' or '{INT8}', got {mode!r}")


def scaling_constant(count: int) -> float:
    """C(N) = 1/sqrt(2 ln N); the range of N samples estimates sigma/C(N)."""
    if count < 2:
        raise ValueError(f"range scaling needs N >= 2, got {count}")
    return 1.0 / math.sqrt(2.0 * math.log(count))


def sigmoid(t: np.ndarray) -> np.ndarray:
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def hard_sigmoid(x: np.ndarray) -> np.ndarray:
    """max(0, min(1, (x + 3)/6))"""
    return np.clip((np.asarray(x, dtype=np.float64) + 3.0) / 6.0, 0.0, 1.0)


def hard_sigmoid_grad(x: np.ndarray) -> np.ndarray:
    return np.where((x > -3.0) & (x < 3.0), 1.0 / 6.0, 0.0)


def skip_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ValueError(f"skip_add shape mismatch: {a.shape} vs {b.shape}")
    return a + b


class Layer:
    """Base layer: forward caches what backward needs; grads accumulate."""

    def params(self) -> list[np.ndarray]:
        return []

    def grads(self) -> list[np.ndarray]:
        return []

    @property
    def param_count(self) -> int:
        return sum(p.size for p in self.params())

    def zero_grads(self):
        for g in self.grads():
            g[...] = 0.0

    def forward(self, x: np.ndarray, mode: str = FP32) -> np.ndarray:
        raise NotImplementedError

    def backward(self, upstream: np.ndarray, mode: str = FP32) -> np.ndarray:
        raise NotImplementedError

    def _emit_forward(self, out: np.ndarray, mode: str) -> np.ndarray:
        return qdq(out) if mode == INT8 else out

    def _emit_grad(self, g: np.ndarray, mode: str) -> np.ndarray:
        # gradient bifurcation: only the layer gradient is quantized
        return qdq(g) if mode == INT8 else g


class Linear(Layer):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.c_in, self.c_out = c_in, c_out
        a = math.sqrt(6.0 / (c_in + c_out))
        self.w = rng.uniform(-a, a, size=(c_out, c_in))
        self.g_w = np.zeros_like(self.w)
        self._x = None
        self._w_used = None

    def params(self):
        return [self.w]

    def grads(self):
        return [self.g_w]

    def forward(self, x, mode=FP32):
        _check_mode(mode)
        if x.ndim != 2 or x.shape[1] != self.c_in:
            raise ValueError(f"linear expects (b, {self.c_in}), got {x.shape}")
        self._w_used = qdq(self.w) if mode == INT8 else self.w
        self._x_raw = x
        if mode == INT8:
            self._x_params = quant_params_for(x)
            self._x = qdq(x, self._x_params)
        else:
            self._x_params = None
            self._x = x
        return self._emit_forward(self._x @ self._w_used.T, mode)

    def backward(self, upstream, mode=FP32):
        if upstream.shape != (self._x.shape[0], self.c_out):
            raise ValueError(f"upstream shape {upstream.shape} mismatches output")
        self.g_w += upstream.T @ self._x
        g_x = upstream @ self._w_used
        if mode == INT8:
            g_x = ste_grad(g_x, self._x_raw, self._x_params)
        return self._emit_grad(g_x, mode)


class Conv2d(Layer):
    def __init__(
        self,
        c_in: int,
        c_out: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
    ):
        self.c_in, self.c_out = c_in, c_out
        self.kernel, self.stride, self.padding = kernel, stride, padding
        fan_in = c_in * kernel * kernel
        fan_out = c_out * kernel * kernel
        a = math.sqrt(6.0 / (fan_in + fan_out))
        self.w = rng.uniform(-a, a, size=(c_out, c_in, kernel, kernel))
        self.g_w = np.zeros_like(self.w)
        self._cols = None
        self._w_used = None
        self._in_shape = None

    def params(self):
        return [self.w]

    def grads(self):
        return [self.g_w]

    def out_size(self, length: int) -> int:
        num = length + 2 * self.padding - self.kernel
        if num % self.stride != 0 or num < 0:
            raise ValueError(
                f"conv geometry invalid: L={length} K={self.kernel} "
                f"P={self.padding} S={self.stride}"
            )
        return num // self.stride + 1

    def _im2col(self, x):
        k, s, p = self.kernel, self.stride, self.padding
        b = x.shape[0]
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
        win = win[:, :, ::s, ::s]
        oh, ow = win.shape[2], win.shape[3]
        cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(b, self.c_in * k * k, oh * ow)
        return cols, oh, ow

    def forward(self, x, mode=FP32):
        _check_mode(mode)
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ValueError(f"conv expects (b, {self.c_in}, h, w), got {x.shape}")
        self.out_size(x.shape[2])
        self.out_size(x.shape[3])
        self._in_shape = x.shape
        self._w_used = qdq(self.w) if mode == INT8 else self.w
        self._x_raw = x
        if mode == INT8:
            self._x_params = quant_params_for(x)
            x = qdq(x, self._x_params)
        else:
            self._x_params = None
        cols, oh, ow = self._im2col(x)
        self._cols = cols
        wf = self._w_used.reshape(self.c_out, -1)
        out = np.einsum("of,bfp->bop", wf, cols).reshape(x.shape[0], self.c_out, oh, ow)
        return self._emit_forward(out, mode)

    def backward(self, upstream, mode=FP32):
        b, _, h, w = self._in_shape
        k, s, p = self.kernel, self.stride, self.padding
        oh, ow = self.out_size(h), self.out_size(w)
        if upstream.shape != (b, self.c_out, oh, ow):
            raise ValueError(f"upstream shape {upstream.shape} mismatches output")
        uf = upstream.reshape(b, self.c_out, oh * ow)
        self.g_w += np.einsum("bop,bfp->of", uf, self._cols).reshape(self.w.shape)
        wf = self._w_used.reshape(self.c_out, -1)
        g_cols = np.einsum("of,bop->bfp", wf, uf).reshape(b, self.c_in, k, k, oh, ow)
        g_xp = np.zeros((b, self.c_in, h + 2 * p, w + 2 * p))
        for di in range(k):
            for dj in range(k):
                g_xp[:, :, di : di + s * oh : s, dj : dj + s * ow : s] += g_cols[
                    :, :, di, dj
                ]
        g_x = g_xp[:, :, p : p + h, p : p + w]
        if mode == INT8:
            g_x = ste_grad(g_x, self._x_raw, self._x_params)
        return self._emit_grad(g_x, mode)


def _as_channels(x: np.ndarray) -> tuple[np.ndarray, tuple]:
    """View (b, c, *spatial) or (b, c) input as (b, c, m)."""
    if x.ndim < 2:
        raise ValueError(f"norm layers need (b, c, ...) input, got {x.shape}")
    b, c = x.shape[0], x.shape[1]
    return x.reshape(b, c, -1), x.shape


class RangeBatchNormReLU(Layer):
    """Batch-range normalization fused with ReLU.

    Per channel: y = (x - mu) / (C(b) * range(x - mu)) * gamma + beta, with
    statistics over the batch and spatial positions; the range gradient is
    attributed to the argmax/argmin elements (first occurrence on ties).
    """

    def __init__(self, channels: int):
        self.channels = channels
        self.gamma = np.ones(channels)
        self.beta = np.zeros(channels)
        self.g_gamma = np.zeros(channels)
        self.g_beta = np.zeros(channels)
        self._cache = None

    def params(self):
        return [self.gamma, self.beta]

    def grads(self):
        return [self.g_gamma, self.g_beta]

    def forward(self, x, mode=FP32):
        _check_mode(mode)
        xc, shape = _as_channels(x)
        b, c, m = xc.shape
        if b < 2:
            raise ValueError("range batch-norm needs batch size >= 2")
        if c != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {c}")
        mu = xc.mean(axis=(0, 2))
        d = xc - mu[None, :, None]
        flat = d.transpose(1, 0, 2).reshape(c, b * m)
        amax = flat.argmax(axis=1)
        amin = flat.argmin(axis=1)
        rng_c = flat[np.arange(c), amax] - flat[np.arange(c), amin]
        denom = scaling_constant(b) * rng_c + EPS_RANGE
        xn = d / denom[None, :, None]
        y = xn * self.gamma[None, :, None] + self.beta[None, :, None]
        mask = y > 0.0
        out = np.where(mask, y, 0.0)
        self._cache = (d, xn, denom, amax, amin, mask, (b, c, m), shape)
        return self._emit_forward(out.reshape(shape), mode)

    def backward(self, upstream, mode=FP32):
        d, xn, denom, amax, amin, mask, (b, c, m), shape = self._cache
        if upstream.shape != shape:
            raise ValueError(f"upstream shape {upstream.shape} mismatches output")
        u = upstream.reshape(b, c, m) * mask
        self.g_beta += u.sum(axis=(0, 2))
        self.g_gamma += (u * xn).sum(axis=(0, 2))
        t = u * (self.gamma / denom)[None, :, None]
        # d(1/denom)/d(range) term lands on the extreme elements
        s_c = (u * d).sum(axis=(0, 2)) * self.gamma
        coef = -s_c * scaling_constant(b) / denom**2
        t_flat = t.transpose(1, 0, 2).reshape(c, b * m).copy()
        t_flat[np.arange(c), amax] += coef
        t_flat[np.arange(c), amin] -= coef
        t = t_flat.reshape(c, b, m).transpose(1, 0, 2)
        g_x = t - t.mean(axis=(0, 2), keepdims=True)
        return self._emit_grad(g_x.reshape(shape), mode)


class _GroupedNorm(Layer):
    """Shared plumbing for the per-sample grouped normalizations."""

    def __init__(self, channels: int, groups: int | None, min_group: int):
        if groups is None:
            groups = max(channels // 2, 1)  # default: two channels per group
        if channels % groups != 0:
            raise ValueError(f"{channels} channels not divisible by {groups} groups")
        cpg = channels // groups
        if cpg < min_group:
            raise ValueError(
                f"needs >= {min_group} channels per group, got {cpg}"
            )
        self.channels, self.groups, self.cpg = channels, groups, cpg
        self.gamma = np.ones(channels)
        self.beta = np.zeros(channels)
        self.v = np.ones(channels)
        self.g_gamma = np.zeros(channels)
        self.g_beta = np.zeros(channels)
        self.g_v = np.zeros(channels)
        self._cache = None

    def params(self):
        return [self.gamma, self.beta, self.v]

    def grads(self):
        return [self.g_gamma, self.g_beta, self.g_v]

    def _grouped(self, xc):
        b, c, m = xc.shape
        return xc.reshape(b, self.groups, self.cpg, m), (b, c, m)


class EvoNormS0(_GroupedNorm):
    """y = x * sigmoid(v x) / sqrt(var_group(x) + eps) * gamma + beta."""

    def __init__(self, channels: int, groups: int | None = None):
        super().__init__(channels, groups, min_group=1)

    def forward(self, x, mode=FP32):
        _check_mode(mode)
        xc, shape = _as_channels(x)
        if xc.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {xc.shape[1]}")
        xg, (b, c, m) = self._grouped(xc)
        mu = xg.mean(axis=(2, 3))
        var = xg.var(axis=(2, 3))
        dstd = np.sqrt(var + EPS_VAR)  # (b, groups)
        s = sigmoid(xc * self.v[None, :, None])
        f = xc * s
        dvals = np.repeat(dstd, self.cpg, axis=1)[:, :, None]
        y = f / dvals * self.gamma[None, :, None] + self.beta[None, :, None]
        self._cache = (xc, s, f, mu, dstd, dvals, (b, c, m), shape)
        return self._emit_forward(y.reshape(shape), mode)

    def backward(self, upstream, mode=FP32):
        xc, s, f, mu, dstd, dvals, (b, c, m), shape = self._cache
        if upstream.shape != shape:
            raise ValueError(f"upstream shape {upstream.shape} mismatches output")
        u = upstream.reshape(b, c, m)
        self.g_beta += u.sum(axis=(0, 2))
        self.g_gamma += (u * f / dvals).sum(axis=(0, 2))
        sv = s * (1.0 - s)
        self.g_v += (u * self.gamma[None, :, None] * xc**2 * sv / dvals).sum(
            axis=(0, 2)
        )
        w = u * self.gamma[None, :, None]
        fprime = s + xc * sv * self.v[None, :, None]
        wg = (w * f).reshape(b, self.groups, self.cpg, m)
        a_bg = wg.sum(axis=(2, 3))  # sum of w*f per group
        n_elems = self.cpg * m
        mu_full = np.repeat(mu, self.cpg, axis=1)[:, :, None]
        a_full = np.repeat(a_bg, self.cpg, axis=1)[:, :, None]
        g_x = w * fprime / dvals - a_full * (xc - mu_full) / (n_elems * dvals**3)
        return self._emit_grad(g_x.reshape(shape), mode)


class RangeEvoNorm(_GroupedNorm):
    """y = x * hard_sigmoid(v x) / (C(cpg) * range_group(x)) * gamma + beta."""

    def __init__(self, channels: int, groups: int | None = None):
        super().__init__(channels, groups, min_group=2)
        self.c_const = scaling_constant(self.cpg)

    def forward(self, x, mode=FP32):
        _check_mode(mode)
        xc, shape = _as_channels(x)
        if xc.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {xc.shape[1]}")
        xg, (b, c, m) = self._grouped(xc)
        flat = xg.reshape(b, self.groups, self.cpg * m)
        amax = flat.argmax(axis=2)
        amin = flat.argmin(axis=2)
        bi, gi = np.ogrid[:b, : self.groups]
        rng_bg = flat[bi, gi, amax] - flat[bi, gi, amin]
        rho = self.c_const * rng_bg + EPS_RANGE  # (b, groups)
        gate = hard_sigmoid(xc * self.v[None, :, None])
        f = xc * gate
        rho_full = np.repeat(rho, self.cpg, axis=1)[:, :, None]
        y = f / rho_full * self.gamma[None, :, None] + self.beta[None, :, None]
        self._cache = (xc, gate, f, rho, rho_full, amax, amin, (b, c, m), shape)
        return self._emit_forward(y.reshape(shape), mode)

    def backward(self, upstream, mode=FP32):
        xc, gate, f, rho, rho_full, amax, amin, (b, c, m), shape = self._cache
        if upstream.shape != shape:
            raise ValueError(f"upstream shape {upstream.shape} mismatches output")
        u = upstream.reshape(b, c, m)
        self.g_beta += u.sum(axis=(0, 2))
        self.g_gamma += (u * f / rho_full).sum(axis=(0, 2))
        gprime = hard_sigmoid_grad(xc * self.v[None, :, None])
        self.g_v += (u * self.gamma[None, :, None] * xc**2 * gprime / rho_full).sum(
            axis=(0, 2)
        )
        w = u * self.gamma[None, :, None]
        fprime = gate + xc * gprime * self.v[None, :, None]
        g_x = w * fprime / rho_full
        # range subgradient: argmax gets +, argmin gets - (first occurrence)
        a_bg = (w * f).reshape(b, self.groups, self.cpg * m).sum(axis=2)
        coef = -a_bg * self.c_const / rho**2  # (b, groups)
        g_flat = g_x.reshape(b, self.groups, self.cpg * m)
        bi, gi = np.ogrid[:b, : self.groups]
        g_flat[bi, gi, amax] += coef
        g_flat[bi, gi, amin] -= coef
        return self._emit_grad(g_flat.reshape(b, c, m).reshape(shape), mode)


class GlobalAvgPool(Layer):
    """Mean over the spatial positions: (b, c, h, w) -> (b, c)."""

    def __init__(self):
        self._in_shape = None

    def forward(self, x, mode=FP32):
        _check_mode(mode)
        if x.ndim != 4:
            raise ValueError(f"avgpool expects (b, c, h, w), got {x.shape}")
        self._in_shape = x.shape
        return self._emit_forward(x.mean(axis=(2, 3)), mode)

    def backward(self, upstream, mode=FP32):
        b, c, h, w = self._in_shape
        if upstream.shape != (b, c):
            raise ValueError(f"upstream shape {upstream.shape} mismatches output")
        g = np.broadcast_to(upstream[:, :, None, None] / (h * w), self._in_shape)
        return self._emit_grad(g.copy(), mode)


class ResidualBlock(Layer):
    """Skip connection around a chain of layers (shapes must match)."""

    def __init__(self, children: list[Layer]):
        self.children = children

    def params(self):
        return [p for child in self.children for p in child.params()]

    def grads(self):
        return [g for child in self.children for g in child.grads()]

    def forward(self, x, mode=FP32):
        h = x
        for child in self.children:
            h = child.forward(h, mode)
        return self._emit_forward(skip_add(h, x), mode)

    def backward(self, upstream, mode=FP32):
        g = upstream
        for child in reversed(self.children):
            g = child.backward(g, mode)
        return self._emit_grad(g + upstream, mode)


class SoftmaxCrossEntropy:
    """Mean cross-entropy over the batch; returns loss and dloss/dlogits."""

    def loss_and_grad(self, logits: np.ndarray, labels: np.ndarray):
        b = logits.shape[0]
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        probs = e / e.sum(axis=1, keepdims=True)
        eps = 1e-12
        loss = -np.log(probs[np.arange(b), labels] + eps).mean()
        grad = probs.copy()
        grad[np.arange(b), labels] -= 1.0
        return loss, grad / b

    def predict(self, logits: np.ndarray) -> np.ndarray:
        return logits.argmax(axis=1)


class Model:
    """A layer stack with a softmax cross-entropy head and flat-vector views."""

    def __init__(self, layers: list[Layer], name: str = "model"):
        self.layers = layers
        self.head = SoftmaxCrossEntropy()
        self.name = name

    @property
    def param_count(self) -> int:
        return sum(layer.param_count for layer in self.layers)

    def layer_param_offsets(self) -> list[int]:
        """Start offset of each layer's parameter segment (top-k layering)."""
        offsets, pos = [], 0
        for layer in self.layers:
            if layer.param_count:
                offsets.append(pos)
                pos += layer.param_count
        return offsets or [0]

    def param_vector(self) -> np.ndarray:
        return np.concatenate(
            [p.ravel() for layer in self.layers for p in layer.params()]
        )

    def set_param_vector(self, vec: np.ndarray):
        if vec.size != self.param_count:
            raise ValueError(f"expected {self.param_count} params, got {vec.size}")
        pos = 0
        for layer in self.layers:
            for p in layer.params():
                p[...] = vec[pos : pos + p.size].reshape(p.shape)
                pos += p.size

    def grad_vector(self) -> np.ndarray:
        return np.concatenate(
            [g.ravel() for layer in self.layers for g in layer.grads()]
        )

    def zero_grads(self):
        for layer in self.layers:
            layer.zero_grads()

    def forward(self, x: np.ndarray, mode: str = FP32) -> np.ndarray:
        _check_mode(mode)
        h = x  # weighted layers quantize their own inputs in int8 mode
        for layer in self.layers:
            h = layer.forward(h, mode)
        return h

    def loss_and_grad(self, x: np.ndarray, labels: np.ndarray, mode: str = FP32):
        logits = self.forward(x, mode)
        loss, g = self.head.loss_and_grad(logits, labels)
        if mode == INT8:
            g = qdq(g)
        self.zero_grads()
        for layer in reversed(self.layers):
            g = layer.backward(g, mode)
        return loss, self.grad_vector()

    def predict(self, x: np.ndarray, mode: str = FP32) -> np.ndarray:
        return self.head.predict(self.forward(x, mode))

    def accuracy(self, x: np.ndarray, labels: np.ndarray, mode: str = FP32) -> float:
        return float((self.predict(x, mode) == labels).mean())


_NORMS = {
    "range_bn": RangeBatchNormReLU,
    "evonorm_s0": EvoNormS0,
    "range_evonorm": RangeEvoNorm,
}


def make_norm(kind: str, channels: int, groups: int | None = None) -> Layer:
    if kind not in _NORMS:
        raise ValueError(f"unknown norm {kind!r}, expected one of {sorted(_NORMS)}")
    if kind == "range_bn":
        return RangeBatchNormReLU(channels)
    return _NORMS[kind](channels, groups=groups)


def build_model(
    arch: str,
    norm: str,
    classes: int,
    input_shape: tuple,
    seed: int = 0,
) -> Model:
    """Desk-scale architectures: 'tinymlp' on vectors, 'minicnn' on images."""
    rng = np.random.default_rng(seed)
    if arch == "tinymlp":
        (dim,) = input_shape
        # vector features have no spatial extent, so the grouped range/variance
        # statistics need wider groups (8 channels) to stay well conditioned
        layers = [
            Linear(dim, 32, rng),
            make_norm(norm, 32, groups=4),
            Linear(32, 64, rng),
            make_norm(norm, 64, groups=8),
            Linear(64, classes, rng),
        ]
    elif arch == "minicnn":
        c_in, h, w = input_shape
        if h != w:
            raise ValueError("minicnn expects square inputs")
        layers = [
            Conv2d(c_in, 8, 3, rng, padding=1),
            make_norm(norm, 8),
            ResidualBlock(
                [
                    Conv2d(8, 8, 3, rng, padding=1),
                    make_norm(norm, 8),
                    Conv2d(8, 8, 3, rng, padding=1),
                    make_norm(norm, 8),
                ]
            ),
            Conv2d(8, 16, 2, rng, stride=2),  # patch downsample
            make_norm(norm, 16),
            GlobalAvgPool(),
            Linear(16, classes, rng),
        ]
    else:
        raise ValueError(f"unknown arch {arch!r}, expected 'tinymlp' or 'minicnn'")
    return Model(layers, name=arch)
