"""Rank utilities shared by the AUC and rank-test computations."""

from __future__ import annotations

import numpy as np


def fractional_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values receive the mean rank of their group."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.size, dtype=np.float64)
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks
