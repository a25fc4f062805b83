"""Communication compression operators and the error-feedback residual.

Byte accounting models the wire cost of each payload: 4-byte float values,
4-byte indices, 1-byte quantized values with an 8-byte quantization header
(scale f32 + zero_point/bits word), and an 8-byte push weight when one
rides along. In-memory values stay float64 so an identity compressor is
exactly transparent; only `serialize` narrows to the wire widths.
"""

from dataclasses import dataclass

import numpy as np

from .tensorq import QuantParams, QuantTensor, dequantize, quant_params_for, quantize

HEADER_BYTES = 8  # scale (f32) + zero_point/bits packed in 4 bytes
FP_VALUE_BYTES = 4
INDEX_BYTES = 4
LP_VALUE_BYTES = 1
PUSH_WEIGHT_BYTES = 8
FRAME_BYTES = 5  # serialization framing: tag u8 + total_params u32

DENSE_FP = "dense_fp"
DENSE_Q = "dense_q"
SPARSE_FP = "sparse_fp"
SPARSE_Q = "sparse_q"

_TAGS = {DENSE_FP: 0, DENSE_Q: 1, SPARSE_FP: 2, SPARSE_Q: 3}
_KINDS = {v: k for k, v in _TAGS.items()}


@dataclass
class CompressedMessage:
    kind: str
    total_params: int
    values: np.ndarray | None = None  # float64; dense payload or kept values
    indices: np.ndarray | None = None  # sparse kinds: strictly increasing
    qvalues: QuantTensor | None = None  # quantized payload
    push_weight: float | None = None

    def __post_init__(self):
        if self.kind not in _TAGS:
            raise ValueError(f"unknown message kind {self.kind!r}")
        if self.indices is not None:
            idx = np.asarray(self.indices, dtype=np.int64)
            if idx.size and (
                (np.diff(idx) <= 0).any() or idx[0] < 0 or idx[-1] >= self.total_params
            ):
                raise ValueError("sparse indices must be strictly increasing and in range")
            self.indices = idx

    @property
    def kept(self) -> int:
        if self.indices is not None:
            return int(self.indices.size)
        return self.total_params

    def byte_breakdown(self) -> dict[str, int]:
        out = {"values": 0, "indices": 0, "header": 0, "push_weight": 0}
        if self.kind == DENSE_FP:
            out["values"] = FP_VALUE_BYTES * self.total_params
        elif self.kind == DENSE_Q:
            out["values"] = LP_VALUE_BYTES * self.total_params
            out["header"] = HEADER_BYTES
        elif self.kind == SPARSE_FP:
            out["indices"] = INDEX_BYTES * self.kept
            out["values"] = FP_VALUE_BYTES * self.kept
        elif self.kind == SPARSE_Q:
            out["indices"] = INDEX_BYTES * self.kept
            out["values"] = LP_VALUE_BYTES * self.kept
            out["header"] = HEADER_BYTES
        if self.push_weight is not None:
            out["push_weight"] = PUSH_WEIGHT_BYTES
        return out

    @property
    def byte_size(self) -> int:
        return sum(self.byte_breakdown().values())

    def decompress(self) -> np.ndarray:
        """Reconstruct the dense tensor (zeros where nothing was sent)."""
        if self.kind == DENSE_FP:
            return self.values.copy()
        if self.kind == DENSE_Q:
            return dequantize(self.qvalues)
        out = np.zeros(self.total_params)
        if self.kind == SPARSE_FP:
            out[self.indices] = self.values
        else:
            out[self.indices] = dequantize(self.qvalues)
        return out


def message_bytes(m: CompressedMessage) -> int:
    return m.byte_size


def _check_offsets(v: np.ndarray, layer_offsets) -> list[tuple[int, int]]:
    starts = list(layer_offsets)
    if not starts or starts[0] != 0:
        raise ValueError("layer_offsets must start at 0")
    bounds = starts + [v.size] if starts[-1] != v.size else starts
    if any(b <= a for a, b in zip(bounds, bounds[1:])):
        raise ValueError("layer_offsets must be strictly increasing and partition v")
    return list(zip(bounds, bounds[1:]))


def topk_layerwise(
    v: np.ndarray,
    layer_offsets,
    fraction: float,
    quantize_values: bool = False,
) -> CompressedMessage:
    """Keep the ceil(fraction * len) largest-magnitude entries of each layer.

    Ties break toward the lower flat index. With quantize_values the kept
    values are 8-bit quantized (indices stay 4-byte exact).
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    v = np.asarray(v, dtype=np.float64)
    segments = _check_offsets(v, layer_offsets)
    keep: list[np.ndarray] = []
    for lo, hi in segments:
        seg = v[lo:hi]
        k = int(np.ceil(fraction * seg.size))
        order = np.lexsort((np.arange(seg.size), -np.abs(seg)))
        keep.append(np.sort(order[:k]) + lo)
    indices = np.concatenate(keep)
    values = v[indices]
    if quantize_values:
        q = quantize(values, quant_params_for(values))
        return CompressedMessage(
            kind=SPARSE_Q, total_params=v.size, indices=indices, qvalues=q
        )
    return CompressedMessage(
        kind=SPARSE_FP, total_params=v.size, indices=indices, values=values
    )


def quantize8_message(v: np.ndarray) -> CompressedMessage:
    """Dense 8-bit payload: QuantTensor plus its params in the header."""
    v = np.asarray(v, dtype=np.float64)
    q = quantize(v, quant_params_for(v))
    return CompressedMessage(kind=DENSE_Q, total_params=v.size, qvalues=q)


def dense_message(v: np.ndarray) -> CompressedMessage:
    v = np.asarray(v, dtype=np.float64)
    return CompressedMessage(kind=DENSE_FP, total_params=v.size, values=v.copy())


class IdentityCompressor:
    """Dense full-precision pass-through; decompress(compress(v)) == v."""

    def __call__(self, v: np.ndarray) -> CompressedMessage:
        return dense_message(v)


class Quantize8Compressor:
    """Dense 8-bit quantization of the whole vector."""

    def __call__(self, v: np.ndarray) -> CompressedMessage:
        return quantize8_message(v)


@dataclass
class TopKCompressor:
    """Layer-wise magnitude top-k, optionally with 8-bit kept values."""

    fraction: float
    layer_offsets: list
    quantize_values: bool = False

    def __call__(self, v: np.ndarray) -> CompressedMessage:
        return topk_layerwise(
            v, self.layer_offsets, self.fraction, quantize_values=self.quantize_values
        )


@dataclass
class ErrorFeedbackState:
    """Compression residual delta, carried into the next message."""

    residual: np.ndarray

    @classmethod
    def zeros(cls, size: int) -> "ErrorFeedbackState":
        return cls(residual=np.zeros(size))


def ef_compress(
    x: np.ndarray, state: ErrorFeedbackState, compressor
) -> CompressedMessage:
    """Emit C[x + delta] and keep the dropped part: delta <- v - C[v]."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != state.residual.shape:
        raise ValueError(
            f"shape mismatch: x {x.shape} vs residual {state.residual.shape}"
        )
    v = x + state.residual
    msg = compressor(v)
    state.residual = v - msg.decompress()
    return msg


def serialize(m: CompressedMessage) -> bytes:
    """Canonical little-endian wire form: tag, total_params u32, payload.

    Values are narrowed to their wire widths (f32 / u8), so the round trip
    is exact at 32-bit resolution. len(serialize(m)) == m.byte_size plus the
    5 framing bytes.
    """
    tag = _TAGS[m.kind] | (0x80 if m.push_weight is not None else 0)
    parts = [
        np.array(tag, dtype=np.uint8).tobytes(),
        np.array(m.total_params, dtype="<u4").tobytes(),
    ]
    if m.kind in (DENSE_Q, SPARSE_Q):
        p = m.qvalues.params
        parts.append(np.array(p.scale, dtype="<f4").tobytes())
        parts.append(np.array(p.zero_point, dtype=np.uint8).tobytes())
        parts.append(np.array(p.bits, dtype=np.uint8).tobytes())
        parts.append(b"\x00\x00")
    if m.indices is not None:
        parts.append(m.indices.astype("<u4").tobytes())
    if m.kind in (DENSE_FP, SPARSE_FP):
        parts.append(m.values.astype("<f4").tobytes())
    else:
        parts.append(m.qvalues.qdata.tobytes())
    if m.push_weight is not None:
        parts.append(np.array(m.push_weight, dtype="<f8").tobytes())
    return b"".join(parts)


def deserialize(buf: bytes) -> CompressedMessage:
    tag = buf[0]
    kind = _KINDS[tag & 0x7F]
    has_push = bool(tag & 0x80)
    total = int(np.frombuffer(buf[1:5], dtype="<u4")[0])
    body = buf[5 : len(buf) - (PUSH_WEIGHT_BYTES if has_push else 0)]
    push = (
        float(np.frombuffer(buf[-PUSH_WEIGHT_BYTES:], dtype="<f8")[0])
        if has_push
        else None
    )
    params = None
    if kind in (DENSE_Q, SPARSE_Q):
        scale = float(np.frombuffer(body[0:4], dtype="<f4")[0])
        zero_point, bits = body[4], body[5]
        params = QuantParams(scale=scale, zero_point=int(zero_point), bits=int(bits))
        body = body[HEADER_BYTES:]
    if kind == DENSE_FP:
        values = np.frombuffer(body, dtype="<f4").astype(np.float64)
        return CompressedMessage(kind, total, values=values, push_weight=push)
    if kind == DENSE_Q:
        q = QuantTensor(np.frombuffer(body, dtype=np.uint8).copy(), params)
        return CompressedMessage(kind, total, qvalues=q, push_weight=push)
    if kind == SPARSE_FP:
        k = len(body) // (INDEX_BYTES + FP_VALUE_BYTES)
        idx = np.frombuffer(body[: 4 * k], dtype="<u4").astype(np.int64)
        values = np.frombuffer(body[4 * k :], dtype="<f4").astype(np.float64)
        return CompressedMessage(kind, total, values=values, indices=idx, push_weight=push)
    k = len(body) // (INDEX_BYTES + LP_VALUE_BYTES)
    idx = np.frombuffer(body[: 4 * k], dtype="<u4").astype(np.int64)
    q = QuantTensor(np.frombuffer(body[4 * k :], dtype=np.uint8).copy(), params)
    return CompressedMessage(kind, total, qvalues=q, indices=idx, push_weight=push)
