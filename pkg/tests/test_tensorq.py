import numpy as np
import pytest

from declow.tensorq import (
    EPS_SCALE,
    QuantParams,
    dequantize,
    qdq,
    quant_params_for,
    quant_params_from_range,
    quantize,
    round_half_up,
    ste_grad,
)


def test_params_identity_range():
    p = quant_params_from_range(0.0, 255.0)
    assert p.scale == 1.0
    assert p.zero_point == 0


def test_params_degenerate_range():
    p = quant_params_from_range(0.0, 0.0)
    assert p.scale == EPS_SCALE
    assert p.zero_point == 0


def test_params_symmetric_unit_range():
    # round(1 / (2/255)) = round(127.5) -> 128 under half-up rounding
    p = quant_params_from_range(-1.0, 1.0)
    assert p.scale == pytest.approx(2.0 / 255.0)
    assert p.zero_point == 128


def test_params_invalid_inputs():
    with pytest.raises(ValueError):
        quant_params_from_range(1.0, 0.0)
    with pytest.raises(ValueError):
        quant_params_from_range(float("nan"), 1.0)
    with pytest.raises(ValueError):
        quant_params_from_range(0.0, float("inf"))


def test_quantize_zero_maps_to_zero_point():
    p = QuantParams(scale=1.0, zero_point=0)
    q = quantize(np.array([0.0]), p)
    assert q.qdata.tolist() == [0]


def test_quantize_symmetric_values():
    p = quant_params_from_range(-1.0, 1.0)
    q = quantize(np.array([-1.0, 0.0, 1.0]), p)
    # round(-127.5) + 128 = 1 at the half-up tie
    assert q.qdata.tolist() == [1, 128, 255]


def test_quantize_saturates():
    p = QuantParams(scale=1.0, zero_point=0)
    assert quantize(np.array([1000.0]), p).qdata.tolist() == [255]


def test_dequantize_zero_point_is_zero():
    p = quant_params_from_range(-1.0, 1.0)
    x = dequantize(quantize(np.array([0.0]), p))
    assert x[0] == 0.0


def test_dequantize_top_code():
    p = quant_params_from_range(-1.0, 1.0)
    q = quantize(np.array([1.0]), p)
    assert dequantize(q)[0] == pytest.approx((255 - 128) * 2.0 / 255.0)


def test_round_trip_error_bound_on_grid():
    p = quant_params_from_range(-1.0, 1.0)
    x = np.linspace(-1.0, 1.0, 10_000)
    err = np.abs(qdq(x, p) - x)
    assert err.max() <= p.scale / 2 + 1e-7


def test_round_trip_error_bound_random_ranges():
    rng = np.random.default_rng(7)
    for _ in range(100):
        lo = -float(rng.uniform(0.0, 10.0))
        hi = float(rng.uniform(1e-6, 10.0))
        p = quant_params_from_range(lo, hi)
        x = rng.uniform(lo, hi, size=100)
        err = np.abs(qdq(x, p) - x)
        assert err.max() <= p.scale / 2 + 1e-7


def test_params_for_constant_tensor_round_trips_exactly():
    # zero-including range keeps constants representable
    x = np.full(5, 3.0)
    p = quant_params_for(x)
    assert np.array_equal(qdq(x, p), x)
    z = np.zeros(4)
    assert np.array_equal(qdq(z, quant_params_for(z)), z)


def test_quantize_monotone():
    rng = np.random.default_rng(11)
    p = quant_params_from_range(-3.0, 5.0)
    x = np.sort(rng.uniform(-4.0, 6.0, size=1000))
    q = quantize(x, p).qdata.astype(int)
    assert (np.diff(q) >= 0).all()


def test_quantize_deterministic():
    rng = np.random.default_rng(13)
    x = rng.normal(size=256)
    p = quant_params_for(x)
    a = quantize(x, p).qdata
    b = quantize(x.copy(), p).qdata
    assert np.array_equal(a, b)


def test_ste_interior_passes_through():
    p = quant_params_from_range(-1.0, 1.0)
    out = ste_grad(np.array([5.0]), np.array([0.2]), p)
    assert out.tolist() == [5.0]


def test_ste_saturated_blocks_gradient():
    p = quant_params_from_range(-1.0, 1.0)
    out = ste_grad(np.array([5.0]), np.array([3.0]), p)
    assert out.tolist() == [0.0]


def test_ste_zero_upstream():
    p = quant_params_from_range(-1.0, 1.0)
    out = ste_grad(np.zeros(4), np.array([0.1, -0.5, 2.0, -2.0]), p)
    assert np.array_equal(out, np.zeros(4))


def test_ste_identity_variant():
    p = quant_params_from_range(-1.0, 1.0)
    out = ste_grad(np.array([5.0]), np.array([3.0]), p, clip=False)
    assert out.tolist() == [5.0]


def test_ste_shape_mismatch():
    p = quant_params_from_range(-1.0, 1.0)
    with pytest.raises(ValueError):
        ste_grad(np.zeros(3), np.zeros(4), p)


def test_ste_linear():
    rng = np.random.default_rng(3)
    p = quant_params_from_range(-1.0, 1.0)
    x = rng.uniform(-2.0, 2.0, size=64)
    u = rng.normal(size=64)
    v = rng.normal(size=64)
    a, b = 2.5, -0.75
    lhs = ste_grad(a * u + b * v, x, p)
    rhs = a * ste_grad(u, x, p) + b * ste_grad(v, x, p)
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_round_half_up_ties():
    x = np.array([-127.5, -0.5, 0.5, 127.5])
    assert round_half_up(x).tolist() == [-127.0, 0.0, 1.0, 128.0]
