"""Cut-layer payload and weight compression.

Quantization is symmetric and uniform over [-maxabs, +maxabs] with 2**bits
grid points (2**bits - 1 intervals), so both endpoints are representable and the
rounding error per element is at most maxabs / (2**bits - 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .nn import SegmentState, bytes_of

ACTIVATION_BITS = (32, 16, 8, 4, 2)
WEIGHT_BITS = (32, 16, 8)
SCALE_BYTES = 8
INDEX_BYTES = 4
VALUE_BYTES = 4


@dataclass(frozen=True)
class CompressionSpec:
    activation_bits: int = 32
    topk_ratio: float = 1.0
    weight_bits: dict = field(default_factory=lambda: {"client": 32, "server": 32})

    def __post_init__(self):
        if self.activation_bits not in ACTIVATION_BITS:
            raise ValueError(f"activation_bits must be one of {ACTIVATION_BITS}")
        if not 0 < self.topk_ratio <= 1:
            raise ValueError("topk_ratio must lie in (0, 1]")
        for role, bits in self.weight_bits.items():
            if bits not in WEIGHT_BITS:
                raise ValueError(f"weight_bits[{role}] must be one of {WEIGHT_BITS}")

    @property
    def is_identity(self) -> bool:
        return self.activation_bits == 32 and self.topk_ratio == 1.0

    def weight_bits_for(self, role: str) -> int:
        return int(self.weight_bits.get(role, 32))


@dataclass
class Payload:
    """A reconstructed tensor plus what it costs on the wire.

    ``value_bytes`` is the payload proper; ``meta_bytes`` is side information
    (quantization scale) that travels with it.
    """
    tensor: np.ndarray
    value_bytes: int
    meta_bytes: int = 0
    shape: tuple = ()
    bits: int = 32


def _levels(bits: int) -> int:
    return 2 ** bits - 1


def quantize_dequantize(t: np.ndarray, bits: int) -> Payload:
    t = np.asarray(t, dtype=np.float64)
    if int(bits) != bits or not 1 <= bits <= 32:
        raise ValueError(f"unsupported bitwidth {bits}")
    if bits == 32:
        return Payload(t, bytes_of(t.shape, 32), 0, t.shape, 32)
    maxabs = float(np.max(np.abs(t))) if t.size else 0.0
    if maxabs == 0.0:
        return Payload(t.copy(), bytes_of(t.shape, bits), SCALE_BYTES, t.shape, bits)
    step = 2.0 * maxabs / _levels(bits)
    codes = np.clip(np.rint((t + maxabs) / step), 0, _levels(bits))
    out = codes * step - maxabs
    # endpoints exactly representable
    out = np.where(codes == _levels(bits), maxabs, out)
    return Payload(out, bytes_of(t.shape, bits), SCALE_BYTES, t.shape, bits)


def quantization_step(t: np.ndarray, bits: int) -> float:
    maxabs = float(np.max(np.abs(t))) if np.size(t) else 0.0
    return 2.0 * maxabs / _levels(bits)


def topk_sparsify(t: np.ndarray, k: float) -> tuple[np.ndarray, np.ndarray, Payload]:
    """Keep the ceil(k*n) largest-magnitude entries (ties go to the lower index).

    Returns (flat indices, kept values, payload with dense reconstruction).
    """
    if not 0 < k <= 1:
        raise ValueError("k must lie in (0, 1]")
    t = np.asarray(t, dtype=np.float64)
    flat = t.ravel()
    n = flat.size
    kept = min(n, math.ceil(k * n - 1e-12))
    order = np.lexsort((np.arange(n), -np.abs(flat)))
    idx = np.sort(order[:kept])
    vals = flat[idx]
    recon = np.zeros_like(flat)
    recon[idx] = vals
    payload = Payload(recon.reshape(t.shape), kept * (INDEX_BYTES + VALUE_BYTES), 0, (kept,), 64)
    return idx, vals, payload


def compress_payload(t: np.ndarray, spec: CompressionSpec) -> Payload:
    """Apply the cut-layer compression in ``spec`` to an activation or gradient."""
    t = np.asarray(t, dtype=np.float64)
    if spec.is_identity:
        return Payload(t, bytes_of(t.shape, 32), 0, t.shape, 32)
    if spec.topk_ratio < 1.0:
        idx, vals, sparse = topk_sparsify(t, spec.topk_ratio)
        if spec.activation_bits == 32:
            return sparse
        q = quantize_dequantize(vals, spec.activation_bits)
        recon = np.zeros(t.size)
        recon[idx] = q.tensor
        value_bytes = idx.size * INDEX_BYTES + bytes_of(idx.size, spec.activation_bits)
        return Payload(recon.reshape(t.shape), value_bytes, q.meta_bytes, (idx.size,), spec.activation_bits)
    return quantize_dequantize(t, spec.activation_bits)


def payload_bytes(shape, spec: CompressionSpec) -> tuple[int, int]:
    """(value_bytes, meta_bytes) for a payload of ``shape`` without materialising it."""
    n = math.prod(shape)
    if spec.is_identity:
        return bytes_of(n, 32), 0
    if spec.topk_ratio < 1.0:
        kept = min(n, math.ceil(spec.topk_ratio * n - 1e-12))
        if spec.activation_bits == 32:
            return kept * (INDEX_BYTES + VALUE_BYTES), 0
        return kept * INDEX_BYTES + bytes_of(kept, spec.activation_bits), SCALE_BYTES
    return bytes_of(n, spec.activation_bits), SCALE_BYTES


def quantize_weights_step(seg: SegmentState, bits: int) -> SegmentState:
    """Snap every parameter tensor of ``seg`` onto its own uniform grid."""
    if bits == 32:
        return seg
    params = tuple({k: quantize_dequantize(v, bits).tensor for k, v in p.items()} for p in seg.params)
    return replace(seg, params=params)


def model_payload_bytes(seg: SegmentState, bits: int) -> tuple[int, int]:
    """(value_bytes, meta_bytes) to ship a segment's weights at ``bits``."""
    n = seg.param_count()
    tensors = sum(len(p) for p in seg.params)
    return bytes_of(n, bits), (SCALE_BYTES * tensors if bits < 32 else 0)
