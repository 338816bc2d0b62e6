"""Symmetric fake-quantization primitives.

Integers live in ``[-(2**(b-1) - 1), 2**(b-1) - 1]``; the ``-2**(b-1)`` level is
never produced so negation stays closed. Rounding is half-to-even and values
beyond the representable range saturate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

MIN_BITS = 2
MAX_BITS = 16


class QuantizationError(ValueError):
    """Raised on invalid quantization inputs or parameters."""


def qmax(bits: int) -> int:
    """Largest representable integer level for a symmetric ``bits``-bit grid."""
    if not (MIN_BITS <= int(bits) <= MAX_BITS):
        raise QuantizationError(f"bits must be in [{MIN_BITS}, {MAX_BITS}], got {bits}")
    return 2 ** (int(bits) - 1) - 1


@dataclass(frozen=True)
class QuantParams:
    scale: float
    bits: int = 8
    zero_point: int = 0

    def __post_init__(self):
        if not (isinstance(self.scale, (int, float, np.floating)) and math.isfinite(self.scale) and self.scale > 0):
            raise QuantizationError(f"scale must be positive and finite, got {self.scale!r}")
        if self.zero_point != 0:
            raise QuantizationError("only symmetric quantization (zero_point == 0) is supported")
        qmax(self.bits)
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "bits", int(self.bits))

    @property
    def qmax(self) -> int:
        return qmax(self.bits)

    @property
    def clip_value(self) -> float:
        """Largest magnitude representable without saturation."""
        return self.qmax * self.scale


@dataclass(frozen=True)
class QTensor:
    """Integer codes plus the parameters that produced them."""

    data: np.ndarray
    params: QuantParams
    degenerate: bool = False
    shape: tuple = field(init=False)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.int64)
        lim = self.params.qmax
        if data.size and (data.max() > lim or data.min() < -lim):
            raise QuantizationError("quantized value out of range")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "shape", data.shape)

    def dequantize(self) -> np.ndarray:
        return self.data.astype(np.float64) * self.params.scale


def as_tensor(t) -> np.ndarray:
    """Validate and convert to a float64 array (the library's tensor view)."""
    arr = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise QuantizationError("non-finite input")
    return arr


def quantize_value(x: float, params: QuantParams) -> int:
    if not math.isfinite(x):
        raise QuantizationError("non-finite input")
    lim = params.qmax
    q = int(np.rint(x / params.scale))
    return max(-lim, min(lim, q)) + params.zero_point


def dequantize_value(q: int, params: QuantParams) -> float:
    lim = params.qmax
    if not (-lim <= q <= lim):
        raise QuantizationError("quantized value out of range")
    return float(q) * params.scale


def quantize(t, params: QuantParams) -> np.ndarray:
    """Vectorised ``quantize_value``; returns int64 codes with the input's shape."""
    arr = as_tensor(t)
    lim = params.qmax
    return np.clip(np.rint(arr / params.scale), -lim, lim).astype(np.int64)


def fake_quantize(t, params: QuantParams) -> np.ndarray:
    """Quantize then dequantize, keeping the computation in floating point."""
    arr = as_tensor(t)
    lim = params.qmax
    return np.clip(np.rint(arr / params.scale), -lim, lim) * params.scale


def quantize_weights(w, bits: int = 8, method=None) -> tuple[QTensor, QuantParams]:
    """Calibrate a per-tensor scale for ``w`` and quantize it.

    A 2048-bin histogram of ``|w|`` is built and handed to the calibrator
    named by ``method`` (MSE when omitted). All-zero tensors get scale 1.0
    and the returned QTensor is flagged degenerate.
    """
    from .calibrators import CalibMethod, calibrate
    from .histogram import histogram_of

    arr = as_tensor(w)
    if arr.size == 0:
        raise QuantizationError("cannot quantize an empty tensor")
    if method is None:
        method = CalibMethod.mse()
    result = calibrate(histogram_of(arr), method, bits)
    params = result.params
    return QTensor(quantize(arr, params), params, degenerate=result.degenerate), params
