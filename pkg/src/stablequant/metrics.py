"""Greedy decoding and token error rate."""

from __future__ import annotations

from typing import Sequence

import numpy as np


def decode_greedy(logits) -> list[int]:
    """Per-frame argmax over ``(frames, vocab)`` logits.

    ``np.argmax`` returns the first maximum, so ties go to the lower token.
    """
    arr = np.asarray(logits)
    if arr.ndim != 2:
        raise ValueError(f"expected (frames, vocab) logits, got shape {arr.shape}")
    return arr.argmax(axis=1).tolist()


def levenshtein(ref: Sequence, hyp: Sequence) -> int:
    """Unit-cost edit distance."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def token_error_rate(reference: Sequence, hypothesis: Sequence) -> float:
    """Edit distance as a percentage of the reference length."""
    if len(reference) == 0:
        raise ValueError("empty reference")
    return 100.0 * levenshtein(reference, hypothesis) / len(reference)
