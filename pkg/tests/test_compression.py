import numpy as np
import pytest

from declow.compression import (
    FRAME_BYTES,
    HEADER_BYTES,
    CompressedMessage,
    ErrorFeedbackState,
    IdentityCompressor,
    TopKCompressor,
    dense_message,
    deserialize,
    ef_compress,
    message_bytes,
    quantize8_message,
    serialize,
    topk_layerwise,
)


def test_topk_fraction_one_is_identity():
    rng = np.random.default_rng(0)
    v = rng.normal(size=100)
    m = topk_layerwise(v, [0, 40], 1.0)
    assert np.array_equal(m.decompress(), v)


def test_topk_picks_largest_magnitude():
    m = topk_layerwise(np.array([1.0, -5.0, 2.0]), [0], 1.0 / 3.0)
    assert m.indices.tolist() == [1]
    assert m.values.tolist() == [-5.0]


def test_topk_matches_full_sort_oracle():
    rng = np.random.default_rng(42)
    v = rng.normal(size=100_000)
    offsets = [0, 1_000, 30_000, 64_000]
    m = topk_layerwise(v, offsets, 0.01)
    bounds = offsets + [v.size]
    expected = []
    for lo, hi in zip(bounds, bounds[1:]):
        seg = np.abs(v[lo:hi])
        k = int(np.ceil(0.01 * (hi - lo)))
        expected.append(lo + np.sort(np.argsort(-seg, kind="stable")[:k]))
    assert np.array_equal(m.indices, np.concatenate(expected))


def test_topk_tie_break_lower_index():
    v = np.array([2.0, -2.0, 2.0, 1.0])
    m = topk_layerwise(v, [0], 0.5)
    assert m.indices.tolist() == [0, 1]


def test_topk_invalid_fraction():
    with pytest.raises(ValueError):
        topk_layerwise(np.ones(4), [0], 0.0)
    with pytest.raises(ValueError):
        topk_layerwise(np.ones(4), [0], 1.5)


def test_topk_is_contraction():
    rng = np.random.default_rng(5)
    for frac in (0.01, 0.1, 0.5):
        v = rng.normal(size=1000)
        m = topk_layerwise(v, [0, 200, 700], frac)
        assert np.linalg.norm(v - m.decompress()) <= np.linalg.norm(v)


def test_quantize8_byte_accounting():
    v = np.linspace(-1, 1, 300)
    m = quantize8_message(v)
    assert message_bytes(m) == 300 + HEADER_BYTES


def test_quantize8_round_trip_error():
    rng = np.random.default_rng(1)
    v = rng.normal(size=500)
    m = quantize8_message(v)
    err = np.abs(m.decompress() - v)
    assert err.max() <= m.qvalues.params.scale / 2 + 1e-7


def test_quantize8_zeros_exact():
    m = quantize8_message(np.zeros(64))
    assert np.array_equal(m.decompress(), np.zeros(64))


def test_ef_identity_keeps_residual_zero():
    state = ErrorFeedbackState.zeros(8)
    comp = IdentityCompressor()
    rng = np.random.default_rng(2)
    for _ in range(20):
        ef_compress(rng.normal(size=8), state, comp)
        assert np.array_equal(state.residual, np.zeros(8))


def test_ef_top1_residual():
    state = ErrorFeedbackState.zeros(2)
    comp = TopKCompressor(fraction=0.5, layer_offsets=[0])
    m = ef_compress(np.array([3.0, 1.0]), state, comp)
    assert m.indices.tolist() == [0]
    assert m.values.tolist() == [3.0]
    assert state.residual.tolist() == [0.0, 1.0]


def test_ef_shape_mismatch():
    state = ErrorFeedbackState.zeros(3)
    with pytest.raises(ValueError):
        ef_compress(np.zeros(4), state, IdentityCompressor())


@pytest.mark.parametrize("fraction", [0.01, 0.1, 1.0])
def test_ef_telescoping_identity(fraction):
    # C[v_t] = x_t + delta_t - delta_{t+1}, so the sums telescope
    rng = np.random.default_rng(9)
    size = 400
    state = ErrorFeedbackState.zeros(size)
    comp = TopKCompressor(fraction=fraction, layer_offsets=[0, 100, 250])
    sent = np.zeros(size)
    total = np.zeros(size)
    for _ in range(100):
        x = rng.normal(size=size)
        total += x
        sent += ef_compress(x, state, comp).decompress()
    assert np.abs(sent + state.residual - total).max() <= 1e-6


def test_dense_fp_bytes():
    m = dense_message(np.zeros(270_000))
    assert message_bytes(m) == 1_080_000


def test_dense_lp_bytes():
    m = quantize8_message(np.zeros(270_000))
    assert message_bytes(m) == 270_000 + HEADER_BYTES


def test_fp_lp_value_ratio_is_four():
    v = np.linspace(0, 1, 4096)
    fp = dense_message(v).byte_breakdown()
    lp = quantize8_message(v).byte_breakdown()
    assert fp["values"] == 4 * lp["values"]


def test_push_weight_adds_eight_bytes():
    v = np.zeros(10)
    plain = dense_message(v)
    carrying = dense_message(v)
    carrying.push_weight = 1.0
    assert message_bytes(carrying) == message_bytes(plain) + 8


def test_sparse_quant_composite_bytes():
    rng = np.random.default_rng(3)
    v = rng.normal(size=1000)
    m = topk_layerwise(v, [0], 0.1, quantize_values=True)
    k = m.kept
    assert message_bytes(m) == 4 * k + 1 * k + HEADER_BYTES


def test_byte_accounting_additive():
    rng = np.random.default_rng(4)
    msgs = [quantize8_message(rng.normal(size=50)) for _ in range(5)]
    assert sum(message_bytes(m) for m in msgs) == 5 * (50 + HEADER_BYTES)


@pytest.mark.parametrize("push", [None, 2.5])
def test_serialize_round_trip_all_kinds(push):
    rng = np.random.default_rng(6)
    v = rng.normal(size=200).astype(np.float32).astype(np.float64)  # f32-exact
    msgs = [
        dense_message(v),
        quantize8_message(v),
        topk_layerwise(v, [0, 50], 0.1),
        topk_layerwise(v, [0, 50], 0.1, quantize_values=True),
    ]
    for m in msgs:
        m.push_weight = push
        buf = serialize(m)
        assert len(buf) == message_bytes(m) + FRAME_BYTES
        back = deserialize(buf)
        assert back.kind == m.kind
        assert back.total_params == m.total_params
        np.testing.assert_allclose(back.decompress(), m.decompress(), atol=1e-7)
        if push is None:
            assert back.push_weight is None
        else:
            assert back.push_weight == push


def test_sparse_indices_validated():
    with pytest.raises(ValueError):
        CompressedMessage(
            kind="sparse_fp",
            total_params=4,
            values=np.array([1.0, 2.0]),
            indices=np.array([2, 1]),
        )
