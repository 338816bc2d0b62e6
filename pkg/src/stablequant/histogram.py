"""Absolute-value histograms and percentile clipping.

Only ``|x|`` matters for a symmetric scale, so every histogram here is
one-sided over ``[0, num_bins * bin_width)``. Bin ``i`` holds values in
``[i * w, (i + 1) * w)``; a value sitting exactly on the top edge is counted
in the last bin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .quant import as_tensor

DEFAULT_BINS = 2048
MAX_CLIP_PERCENT = 0.5


class HistogramError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ActivationHistogram:
    """Immutable histogram snapshot.

    ``counts`` is float64 so clipped histograms can carry a fractional
    boundary bin. ``amax`` is the raw observed maximum when known; for
    histograms built directly from counts it stays ``None``.
    """

    bin_width: float
    counts: np.ndarray
    amax: float | None = None

    def __post_init__(self):
        counts = np.array(self.counts, dtype=np.float64)
        if counts.ndim != 1 or counts.size == 0:
            raise HistogramError("counts must be a non-empty 1-D sequence")
        if np.any(counts < 0) or not np.all(np.isfinite(counts)):
            raise HistogramError("counts must be finite and non-negative")
        if not (math.isfinite(self.bin_width) and self.bin_width > 0):
            raise HistogramError(f"bin_width must be positive, got {self.bin_width}")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "bin_width", float(self.bin_width))

    def __eq__(self, other):
        if not isinstance(other, ActivationHistogram):
            return NotImplemented
        return (
            self.bin_width == other.bin_width
            and self.amax == other.amax
            and np.array_equal(self.counts, other.counts)
        )

    @property
    def num_bins(self) -> int:
        return self.counts.size

    @property
    def total_count(self) -> float:
        return float(self.counts.sum())

    @property
    def effective_bins(self) -> int:
        """Index of the last bin with mass, plus one (0 if empty)."""
        nz = np.flatnonzero(self.counts)
        return int(nz[-1]) + 1 if nz.size else 0

    @property
    def effective_range(self) -> float:
        return self.effective_bins * self.bin_width

    @property
    def is_degenerate(self) -> bool:
        """True when every observed value was exactly zero."""
        return self.amax == 0.0


def covering_width(amax: float, num_bins: int) -> float:
    """``amax / num_bins``, nudged up until ``num_bins`` bins reach ``amax`` (matters for subnormals)."""
    width = amax / num_bins
    while width * num_bins < amax:
        width = float(np.nextafter(width, np.inf))
    return width


class HistogramCollector:
    """Streaming ``|x|`` histogram with integer-factor range growth.

    The first batch with a nonzero value fixes ``bin_width = amax / num_bins``
    unless a width was given. When a later value overflows the range, ``k``
    adjacent bins are merged so the old bin edges stay nested in the new ones.
    """

    def __init__(self, num_bins: int = DEFAULT_BINS, bin_width: float | None = None):
        if num_bins < 1:
            raise HistogramError("num_bins must be positive")
        if bin_width is not None and not bin_width > 0:
            raise HistogramError("bin_width must be positive")
        self.num_bins = int(num_bins)
        self.bin_width = None if bin_width is None else float(bin_width)
        self.counts = np.zeros(self.num_bins, dtype=np.int64)
        self.amax_observed = 0.0
        self.total_count = 0

    def _widen(self, needed: float) -> None:
        span = self.num_bins * self.bin_width
        ratio = needed / span
        if ratio >= self.num_bins:
            # every old bin folds into bin 0; only its span must stay covered
            total = self.counts.sum()
            self.counts = np.zeros(self.num_bins, dtype=np.int64)
            self.counts[0] = total
            self.bin_width = max(covering_width(needed, self.num_bins), span)
            return
        k = max(2, math.ceil(ratio))
        while k * span < needed:
            k += 1
        merged = np.add.reduceat(self.counts, np.arange(0, self.num_bins, k))
        self.counts = np.zeros(self.num_bins, dtype=np.int64)
        self.counts[: merged.size] = merged
        self.bin_width *= k

    def observe(self, t) -> HistogramCollector:
        arr = np.abs(as_tensor(t)).ravel()
        if arr.size == 0:
            return self
        peak = float(arr.max())
        if self.bin_width is None:
            if peak == 0.0:
                self.counts[0] += arr.size
                self.total_count += arr.size
                return self
            self.bin_width = covering_width(peak, self.num_bins)
        elif peak > self.num_bins * self.bin_width:
            self._widen(peak)
        idx = np.minimum((arr / self.bin_width).astype(np.int64), self.num_bins - 1)
        self.counts += np.bincount(idx, minlength=self.num_bins)
        self.amax_observed = max(self.amax_observed, peak)
        self.total_count += arr.size
        return self

    def finalize(self) -> ActivationHistogram:
        if self.total_count == 0:
            raise HistogramError("no calibration data")
        width = self.bin_width if self.bin_width is not None else 1.0
        return ActivationHistogram(width, self.counts.copy(), amax=self.amax_observed)


def histogram_of(t, num_bins: int = DEFAULT_BINS) -> ActivationHistogram:
    """One-shot histogram of a single tensor."""
    return HistogramCollector(num_bins).observe(t).finalize()


def clip_histogram(h: ActivationHistogram, p: float) -> ActivationHistogram:
    """Remove the top ``p`` percent of total mass from the high tail.

    Bins are emptied from the top down; the bin where the removal budget runs
    out keeps its (possibly fractional) remainder.
    """
    if not (0.0 <= p <= MAX_CLIP_PERCENT):
        raise HistogramError(f"clip percent must be in [0, {MAX_CLIP_PERCENT}], got {p}")
    if p == 0:
        return h
    total = h.total_count
    if total <= 0:
        raise HistogramError("cannot clip an empty histogram")
    budget = p * total / 100.0
    floor = (100.0 - p) / 100.0 * total
    counts = np.array(h.counts)
    removed = 0.0
    for i in range(counts.size - 1, -1, -1):
        c = counts[i]
        if c == 0:
            continue
        if removed + c <= budget:
            counts[i] = 0.0
            removed += c
            continue
        counts[i] = c - (budget - removed)
        # float rounding must never leave less than the guaranteed mass
        while counts.sum() < floor:
            counts[i] = np.nextafter(counts[i], np.inf)
        break
    if not counts.any():
        raise HistogramError("clipping emptied the histogram")
    return ActivationHistogram(h.bin_width, counts, amax=None)


def bin_centers(h: ActivationHistogram) -> np.ndarray:
    """Centers of bins ``0 .. effective_bins - 1``."""
    return (np.arange(h.effective_bins) + 0.5) * h.bin_width


def histogram_from_batches(batches: Callable[[], Iterable], num_bins: int = DEFAULT_BINS) -> ActivationHistogram:
    """Two-pass histogram over a re-iterable stream of tensors.

    ``batches()`` is called twice: once to find the global amax, once to bin
    with ``bin_width = amax / num_bins``. Only one batch is held at a time and
    the result does not depend on how the data is split into batches.
    """
    amax = 0.0
    seen = False
    for t in batches():
        arr = as_tensor(t)
        if arr.size:
            seen = True
            amax = max(amax, float(np.abs(arr).max()))
    if not seen:
        raise HistogramError("no calibration data")
    collector = HistogramCollector(num_bins, covering_width(amax, num_bins) if amax > 0 else None)
    for t in batches():
        collector.observe(t)
    return collector.finalize()
