"""
Exact enumeration of the augmentation distributions.

Cutout draws C uniformly among the size-C subsets of [P]. CutMix draws a size
|S| uniformly from {0..P}, then S uniformly among subsets of that size, so
P(S) = 1 / ((P + 1) * binom(P, |S|)).
"""

import itertools
import math
from collections.abc import Callable
from functools import lru_cache

import numpy as np


@lru_cache(maxsize=64)
def cutout_sets(P: int, C: int) -> np.ndarray:
    """(binom(P, C), P) boolean masks, True on cut patches, in combinations order."""
    combos = list(itertools.combinations(range(P), C))
    masks = np.zeros((len(combos), P), dtype=bool)
    for row, combo in enumerate(combos):
        masks[row, list(combo)] = True
    masks.setflags(write=False)
    return masks


def cutmix_subset_weight(P: int, size: int) -> float:
    """Probability of one particular subset of the given size."""
    return 1.0 / ((P + 1) * math.comb(P, size))


@lru_cache(maxsize=64)
def cutmix_subsets(P: int) -> tuple[np.ndarray, np.ndarray]:
    """
    All 2^P subsets in bitmask order with their probabilities.

    Returns:
        masks of shape (2^P, P) with masks[b, p] = bit p of b, and weights of shape (2^P,).
    """
    bits = np.arange(2**P)[:, None]
    masks = ((bits >> np.arange(P)[None, :]) & 1).astype(bool)
    weights = np.array([cutmix_subset_weight(P, int(row.sum())) for row in masks])
    masks.setflags(write=False)
    weights.setflags(write=False)
    return masks, weights


def expect_over_cardinality(P: int, f: Callable[[int], float]) -> float:
    """E_S[f(|S|)] under the CutMix law; |S| is uniform on {0..P}."""
    return math.fsum(f(s) for s in range(P + 1)) / (P + 1)
