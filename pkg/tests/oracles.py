"""
Independent reference implementations used by the tests.

Everything here is written as directly from the definitions as possible: explicit
loops over samples, augmentations and mixed pairs, and central differences.
"""

import itertools
import math
from collections.abc import Callable

import numpy as np

from patchlab.core.model import Weights, forward, grad_sample, logistic_loss
from patchlab.core.synthdata import Dataset


def finite_difference_grad(
    loss: Callable[[Weights], float], W: Weights, h: float = 1e-5
) -> np.ndarray:
    """Central differences of loss over every entry of W.w."""
    grad = np.zeros_like(W.w)
    for idx in np.ndindex(*W.w.shape):
        plus = W.w.copy()
        minus = W.w.copy()
        plus[idx] += h
        minus[idx] -= h
        grad[idx] = (loss(W.replace(plus)) - loss(W.replace(minus))) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def brute_force_cutout_loss(W: Weights, dataset: Dataset, C: int) -> float:
    """Mean over samples and over every size-C cut set of the masked-sample loss."""
    total = 0.0
    count = 0
    for sample in dataset:
        for cut in itertools.combinations(range(dataset.P), C):
            X = sample.X.copy()
            X[list(cut)] = 0.0
            total += float(logistic_loss(sample.y * forward(W, X)))
            count += 1
    return total / count


def brute_force_cutmix_loss(W: Weights, dataset: Dataset) -> float:
    """Triple loop over (i, j, S) with |S| uniform on {0..P} and S uniform given |S|."""
    n, P = dataset.n, dataset.P
    total = 0.0
    for i in range(n):
        for j in range(n):
            for size in range(P + 1):
                subsets = list(itertools.combinations(range(P), size))
                prob = 1.0 / ((P + 1) * len(subsets))
                lam = size / P
                for S in subsets:
                    X = dataset.X[j].copy()
                    X[list(S)] = dataset.X[i][list(S)]
                    f = forward(W, X)
                    total += prob * (
                        lam * float(logistic_loss(dataset.y[i] * f))
                        + (1 - lam) * float(logistic_loss(dataset.y[j] * f))
                    )
    return total / (n * n)


def brute_force_cutmix_grad(W: Weights, dataset: Dataset) -> np.ndarray:
    """The same triple loop, summing per-sample gradients of both label terms."""
    n, P = dataset.n, dataset.P
    grad = np.zeros_like(W.w)
    for i in range(n):
        for j in range(n):
            for size in range(P + 1):
                subsets = list(itertools.combinations(range(P), size))
                prob = 1.0 / ((P + 1) * len(subsets))
                lam = size / P
                for S in subsets:
                    X = dataset.X[j].copy()
                    X[list(S)] = dataset.X[i][list(S)]
                    grad += prob * (
                        lam * grad_sample(W, X, int(dataset.y[i]))
                        + (1 - lam) * grad_sample(W, X, int(dataset.y[j]))
                    )
    return grad / (n * n)


def balanced_cutmix_root(P: int) -> float:
    """Root of g_1 for equal class sizes, with E_S reduced by hand, found by plain bisection."""

    def lp(z: float) -> float:
        return -1.0 / (1.0 + math.exp(z))

    def g(z: float) -> float:
        mixed = sum(c * lp(c * z - (P - c) * z) for c in range(P + 1)) / (P + 1)
        return lp(P * z) + 2.0 / P * mixed + (P - 1) / (3.0 * P)

    lo, hi = 0.0, 1.0
    while True:
        if P * hi > 700:
            raise ValueError(f"g_1 has no sign change below z = {hi} for P = {P}")
        if g(hi) > 1e-9:
            break
        hi *= 2
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if g(mid) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
