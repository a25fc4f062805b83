"""Shared oracles for the test suite: finite differences and reference ops."""

import numpy as np

from declow.layers import FP32


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    num = np.linalg.norm((a - b).ravel())
    den = max(np.linalg.norm(a.ravel()) + np.linalg.norm(b.ravel()), 1e-12)
    return num / den


def _objective(layer, x, probe):
    out = layer.forward(x, FP32)
    return float((out * probe).sum())


def fd_input_grad(layer, x, probe, h=1e-3):
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = _objective(layer, x, probe)
        flat[i] = orig - h
        down = _objective(layer, x, probe)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return g


def fd_param_grads(layer, x, probe, h=1e-3):
    out = []
    for p in layer.params():
        g = np.zeros_like(p)
        flat = p.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = _objective(layer, x, probe)
            flat[i] = orig - h
            down = _objective(layer, x, probe)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        out.append(g)
    return out


def check_layer_gradients(layer, x, rng, tol=1e-4, h=1e-3):
    """Analytic vs central-difference gradients for inputs and parameters."""
    probe = rng.normal(size=layer.forward(x, FP32).shape)
    layer.forward(x, FP32)
    layer.zero_grads()
    g_x = layer.backward(probe, FP32)
    assert rel_err(g_x, fd_input_grad(layer, x, probe, h)) < tol
    for analytic, fd in zip(layer.grads(), fd_param_grads(layer, x, probe, h)):
        assert rel_err(analytic, fd) < tol


def reference_conv2d(x, w, stride=1, padding=0):
    """Naive direct convolution; the independent oracle for Conv2d."""
    b, c_in, h, wdt = x.shape
    c_out, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - k) // stride + 1
    ow = (wdt + 2 * padding - k) // stride + 1
    out = np.zeros((b, c_out, oh, ow))
    for bi in range(b):
        for co in range(c_out):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[bi, :, i * stride : i * stride + k, j * stride : j * stride + k]
                    out[bi, co, i, j] = (patch * w[co]).sum()
    return out


def ref_evonorm_s0(x, gamma, beta, v, groups, eps=1e-5):
    b, c = x.shape[0], x.shape[1]
    m = x.reshape(b, c, -1)
    cpg = c // groups
    xg = m.reshape(b, groups, cpg, -1)
    den = np.sqrt(xg.var(axis=(2, 3)) + eps)
    s = 1.0 / (1.0 + np.exp(-(v[None, :, None] * m)))
    den_full = np.repeat(den, cpg, axis=1)[:, :, None]
    y = m * s / den_full * gamma[None, :, None] + beta[None, :, None]
    return y.reshape(x.shape)


def ref_range_evonorm(x, gamma, beta, v, groups, eps=1e-5):
    """EvoNorm S0 with sqrt-variance replaced by C(cpg)*range and a hard gate."""
    b, c = x.shape[0], x.shape[1]
    m = x.reshape(b, c, -1)
    cpg = c // groups
    xg = m.reshape(b, groups, cpg * m.shape[2])
    rng_bg = xg.max(axis=2) - xg.min(axis=2)
    const = 1.0 / np.sqrt(2.0 * np.log(cpg))
    rho = const * rng_bg + eps
    gate = np.clip((v[None, :, None] * m + 3.0) / 6.0, 0.0, 1.0)
    rho_full = np.repeat(rho, cpg, axis=1)[:, :, None]
    y = m * gate / rho_full * gamma[None, :, None] + beta[None, :, None]
    return y.reshape(x.shape)


def _gap_ok(values, margin):
    srt = np.sort(values)
    return (srt[-1] - srt[-2]) > margin and (srt[1] - srt[0]) > margin


def bn_safe(x, gamma, beta, margin, eps=1e-5):
    """No argmax/argmin ties and no ReLU-boundary elements for FD probing."""
    import math

    b, c = x.shape[:2]
    xc = x.reshape(b, c, -1)
    d = xc - xc.mean(axis=(0, 2), keepdims=True)
    flat = d.transpose(1, 0, 2).reshape(c, -1)
    const = 1.0 / math.sqrt(2.0 * math.log(b))
    for ch in range(c):
        if not _gap_ok(flat[ch], margin):
            return False
        denom = const * (flat[ch].max() - flat[ch].min()) + eps
        y = flat[ch] / denom * gamma[ch] + beta[ch]
        if np.abs(y).min() < 0.05:
            return False
    return True


def ren_safe(x, v, groups, margin):
    """No range ties and no hard-sigmoid knees for FD probing."""
    b, c = x.shape[:2]
    xc = x.reshape(b, c, -1)
    xg = xc.reshape(b, groups, -1)
    for bi in range(b):
        for gi in range(groups):
            if not _gap_ok(xg[bi, gi], margin):
                return False
    t = v[None, :, None] * xc
    return bool((np.abs(np.abs(t) - 3.0) > 0.05).all())


def draw_until(rng, draw, safe, tries=500):
    for _ in range(tries):
        x = draw()
        if safe(x):
            return x
    raise AssertionError("could not draw a kink-free input")


def exact_grid_values(rng, shape, scale=0.25, zero_point=128):
    """Values that round-trip the 8-bit min/max quantizer bitwise.

    Draws integer codes, pins both grid ends so the derived scale is exact,
    and maps through (code - zp) * scale (a power of two).
    """
    codes = rng.integers(0, 256, size=shape).astype(np.float64)
    flat = codes.ravel()
    flat[0], flat[-1] = 0.0, 255.0
    return (codes - zero_point) * scale
