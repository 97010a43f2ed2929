"""Numeric comparison helpers shared by the benchmark and the test suite."""

from __future__ import annotations

import numpy as np


def max_rel_diff(a: np.ndarray, b: np.ndarray) -> float:
    """Largest elementwise relative difference between two arrays.

    The denominator is floored at 1e-9 of the largest magnitude present so
    entries that are zero in both arrays compare as equal instead of
    dividing by zero.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    num = np.abs(a - b)
    den = np.maximum(np.abs(a), np.abs(b))
    floor = max(float(den.max()), 1e-30) * 1e-9
    return float((num / np.maximum(den, floor)).max())


def grads_max_rel_diff(ga, gb) -> float:
    """``max_rel_diff`` across every parameter array of two gradient sets."""
    return max(
        max_rel_diff(ga.position, gb.position),
        max_rel_diff(ga.rotation, gb.rotation),
        max_rel_diff(ga.log_scale, gb.log_scale),
        max_rel_diff(ga.opacity_logit, gb.opacity_logit),
        max_rel_diff(ga.sh, gb.sh),
    )
