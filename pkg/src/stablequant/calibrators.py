"""Histogram-based scale calibrators.

``scale_calibration`` is the shared kernel: clip the histogram by a cut-off
percent, then either take the last surviving bin center (percentile mode) or
search every bin center for the scale with the least weighted
quantize-dequantize error (MSE mode). The Max and Entropy baselines sit
beside it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .histogram import ActivationHistogram, HistogramError, MAX_CLIP_PERCENT, bin_centers, clip_histogram
from .quant import QuantParams, qmax

KL_EPSILON = 1e-12
_ROW_CHUNK = 256

METHOD_TAGS = ("max", "percentile", "entropy", "mse", "clipped-mse")


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class CalibMethod:
    kind: str
    p: float | None = None

    def __post_init__(self):
        if self.kind not in METHOD_TAGS:
            raise CalibrationError(f"unknown calibration method {self.kind!r}")
        takes_p = self.kind in ("percentile", "clipped-mse")
        if takes_p:
            if self.p is None or not (0.0 <= self.p <= MAX_CLIP_PERCENT):
                raise CalibrationError(f"{self.kind} needs p in [0, {MAX_CLIP_PERCENT}], got {self.p}")
            object.__setattr__(self, "p", float(self.p))
        elif self.p is not None:
            raise CalibrationError(f"{self.kind} takes no p")

    @classmethod
    def max(cls):
        return cls("max")

    @classmethod
    def percentile(cls, p: float):
        return cls("percentile", p)

    @classmethod
    def entropy(cls):
        return cls("entropy")

    @classmethod
    def mse(cls):
        return cls("mse")

    @classmethod
    def clipped_mse(cls, p: float):
        return cls("clipped-mse", p)

    @classmethod
    def parse(cls, tag: str, p: float | None = None) -> CalibMethod:
        if tag in ("percentile", "clipped-mse"):
            return cls(tag, 0.0 if p is None else p)
        return cls(tag)

    def __str__(self):
        return self.kind if self.p is None else f"{self.kind}(p={self.p:g})"


@dataclass(frozen=True, eq=False)
class CalibResult:
    scale: float
    method: CalibMethod
    bits: int
    chosen_bin: int
    mse_curve: np.ndarray | None = None
    degenerate: bool = False

    @property
    def params(self) -> QuantParams:
        return QuantParams(self.scale, self.bits)

    @property
    def error(self) -> float | None:
        """Weighted error of the chosen candidate (MSE modes only)."""
        if self.mse_curve is None:
            return None
        return float(self.mse_curve[self.chosen_bin])


def _degenerate(method: CalibMethod, bits: int) -> CalibResult:
    return CalibResult(1.0, method, bits, chosen_bin=0, degenerate=True)


def candidate_errors(centers: np.ndarray, weights: np.ndarray, bits: int) -> np.ndarray:
    """Weighted squared error of every candidate scale ``c_i / qmax``.

    ``e_i = (1/B) * sum_j (c_j - fq(c_j; c_i/qmax))**2 * H_j`` with saturating
    fake quantization and ``B = len(centers)``.
    """
    lim = qmax(bits)
    n = centers.size
    mass = np.flatnonzero(weights)
    cj = centers[mass]
    hj = weights[mass]
    scales = centers / lim
    out = np.empty(n)
    for lo in range(0, n, _ROW_CHUNK):
        s = scales[lo : lo + _ROW_CHUNK, None]
        err = cj - np.clip(np.rint(cj / s), -lim, lim) * s
        out[lo : lo + _ROW_CHUNK] = (err * err) @ hj
    return out / n


def scale_calibration(h: ActivationHistogram, p: float, m: int, bits: int) -> CalibResult:
    """Scale for ``h`` after clipping the top ``p`` percent of mass.

    ``m == 0`` returns the last surviving bin center over ``qmax``;
    ``m == 1`` runs the candidate search. Ties go to the larger scale.
    """
    if m not in (0, 1):
        raise CalibrationError(f"m must be 0 or 1, got {m}")
    if m:
        method = CalibMethod.clipped_mse(p) if p > 0 else CalibMethod.mse()
    else:
        method = CalibMethod.percentile(p)
    lim = qmax(bits)
    if h.is_degenerate:
        return _degenerate(method, bits)
    clipped = clip_histogram(h, p)
    centers = bin_centers(clipped)
    if centers.size == 0:
        raise CalibrationError("empty histogram")
    if not m:
        return CalibResult(centers[-1] / lim, method, bits, chosen_bin=centers.size - 1)
    errors = candidate_errors(centers, clipped.counts[: centers.size], bits)
    best = centers.size - 1 - int(np.argmin(errors[::-1]))
    return CalibResult(centers[best] / lim, method, bits, chosen_bin=best, mse_curve=errors)


def calibrate_max(h: ActivationHistogram, bits: int = 8, use_amax: bool = True) -> CalibResult:
    """Scale from the largest magnitude.

    Uses the raw tracked ``amax`` when the histogram carries one, otherwise
    the center of the last nonzero bin.
    """
    if h.is_degenerate:
        return _degenerate(CalibMethod.max(), bits)
    lim = qmax(bits)
    last = h.effective_bins - 1
    if last < 0:
        raise CalibrationError("empty histogram")
    top = h.amax if (use_amax and h.amax is not None) else (last + 0.5) * h.bin_width
    return CalibResult(top / lim, CalibMethod.max(), bits, chosen_bin=last)


def calibrate_percentile(h: ActivationHistogram, p: float, bits: int = 8) -> CalibResult:
    return scale_calibration(h, p, 0, bits)


def calibrate_mse(h: ActivationHistogram, bits: int = 8) -> CalibResult:
    return scale_calibration(h, 0.0, 1, bits)


def calibrate_clipped_mse(h: ActivationHistogram, p: float, bits: int = 8) -> CalibResult:
    return scale_calibration(h, p, 1, bits)


def _quantized_candidate(sliced: np.ndarray, nq: int) -> np.ndarray:
    # merge into nq groups (last group absorbs the remainder), then spread each
    # group's mass evenly over its nonzero entries
    i = sliced.size
    width = i // nq
    starts = np.arange(nq) * width
    group_of = np.minimum(np.arange(i) // width, nq - 1)
    sums = np.add.reduceat(sliced, starts)
    nonzero = sliced != 0
    support = np.add.reduceat(nonzero.astype(np.float64), starts)
    q = np.zeros(i)
    q[nonzero] = sums[group_of[nonzero]] / support[group_of[nonzero]]
    return q


def kl_divergence(p_dist: np.ndarray, q_dist: np.ndarray) -> float:
    p = np.where(p_dist == 0, KL_EPSILON, p_dist)
    q = np.where(q_dist == 0, KL_EPSILON, q_dist)
    p = p / p.sum()
    q = q / q.sum()
    return float(np.sum(p * np.log(p / q)))


def entropy_divergences(h: ActivationHistogram, bits: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """KL divergence for every truncation index ``2**(b-1) .. B'``.

    The reference distribution is ``counts[:i]`` with all mass beyond ``i``
    folded into bin ``i - 1``; the candidate is the unfolded slice merged
    into ``2**(b-1)`` levels and re-expanded.
    """
    nq = 2 ** (bits - 1)
    n = h.effective_bins
    if n < nq:
        raise CalibrationError("histogram too coarse for entropy calibration")
    counts = h.counts[:n]
    tails = np.concatenate([np.cumsum(counts[::-1])[::-1], [0.0]])
    cuts = np.arange(nq, n + 1)
    divs = np.empty(cuts.size)
    for k, i in enumerate(cuts):
        sliced = counts[:i]
        ref = sliced.copy()
        ref[i - 1] += tails[i]
        divs[k] = kl_divergence(ref, _quantized_candidate(sliced, nq))
    return cuts, divs


def calibrate_entropy(h: ActivationHistogram, bits: int = 8) -> CalibResult:
    """KL-truncation calibration; the earliest truncation wins ties."""
    qmax(bits)
    if h.is_degenerate:
        return _degenerate(CalibMethod.entropy(), bits)
    cuts, divs = entropy_divergences(h, bits)
    k = int(np.argmin(divs))
    i = int(cuts[k])
    return CalibResult((i - 0.5) * h.bin_width / qmax(bits), CalibMethod.entropy(), bits, chosen_bin=i - 1)


def calibrate(h: ActivationHistogram, method: CalibMethod, bits: int = 8) -> CalibResult:
    """Dispatch on ``method.kind``."""
    kind = method.kind
    if kind == "max":
        return calibrate_max(h, bits)
    if kind == "percentile":
        return calibrate_percentile(h, method.p, bits)
    if kind == "entropy":
        return calibrate_entropy(h, bits)
    if kind == "mse":
        return calibrate_mse(h, bits)
    if kind == "clipped-mse":
        res = calibrate_clipped_mse(h, method.p, bits)
        # keep the caller's tag even when p == 0
        return CalibResult(res.scale, method, bits, res.chosen_bin, res.mse_curve, res.degenerate)
    raise CalibrationError(f"unknown calibration method {kind!r}")


def histogram_error(h: ActivationHistogram, scale: float, bits: int) -> float:
    """Weighted error of one scale over ``h``, normalised like ``candidate_errors``."""
    if h.is_degenerate:
        return 0.0
    centers = bin_centers(h)
    weights = h.counts[: centers.size]
    lim = qmax(bits)
    err = centers - np.clip(np.rint(centers / scale), -lim, lim) * scale
    return float(np.sum(err * err * weights) / centers.size)


__all__ = [
    "CalibMethod",
    "CalibResult",
    "CalibrationError",
    "HistogramError",
    "METHOD_TAGS",
    "calibrate",
    "calibrate_clipped_mse",
    "calibrate_entropy",
    "calibrate_max",
    "calibrate_mse",
    "calibrate_percentile",
    "candidate_errors",
    "entropy_divergences",
    "histogram_error",
    "kl_divergence",
    "scale_calibration",
]
