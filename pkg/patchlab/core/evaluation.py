"""
Accuracy measurements and per-feature outputs.

A prediction is correct when y f(X) > 0; f(X) = 0 counts as an error.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from patchlab.core.model import Weights, forward_batch, patch_outputs
from patchlab.core.subsets import cutout_sets
from patchlab.core.synthdata import Dataset, FeatureBank, sample_test_batch
from patchlab.models.configs import DataConfig
from patchlab.models.enums import FeatureTier, TrainingMethod
from patchlab.models.reports import AccuracyReport, TierAccuracy

logger = logging.getLogger(__name__)

TEST_BLOCK = 1000
WILSON_Z = 1.959963984540054


def feature_output_trace(W: Weights, bank: FeatureBank) -> np.ndarray:
    """phi(<w_1, v_{s,k}>) - phi(<w_-1, v_{s,k}>) for every feature, shape (2, K)."""
    X = bank.vectors.reshape(-1, 1, bank.d)
    return patch_outputs(W, X).reshape(2, bank.K)


def accuracy_on(W: Weights, dataset: Dataset) -> float:
    """Fraction of samples with y f(X) > 0."""
    return float(np.mean(dataset.y * forward_batch(W, dataset.X) > 0))


def train_accuracy(W: Weights, dataset: Dataset) -> float:
    """Training accuracy under the strict sign rule."""
    return accuracy_on(W, dataset)


def augmented_accuracy(W: Weights, dataset: Dataset, C: int) -> float:
    """Accuracy over all n * binom(P, C) Cutout-masked training points."""
    keep = (~cutout_sets(dataset.P, C)).astype(float)
    f_cut = patch_outputs(W, dataset.X) @ keep.T
    return float(np.mean(dataset.y[:, None] * f_cut > 0))


def wilson_interval(correct: int, total: int, z: float = WILSON_Z) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if total == 0:
        return 0.0, 1.0
    p = correct / total
    denom = 1 + z * z / total
    centre = (p + z * z / (2 * total)) / denom
    half = z * math.sqrt(p * (1 - p) / total + z * z / (4 * total * total)) / denom
    return max(0.0, centre - half), min(1.0, centre + half)


def _block_rng(seed: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(block,))))


def _score_block(
    W: Weights, bank: FeatureBank, config: DataConfig, seed: int, block: int, size: int
) -> tuple[np.ndarray, np.ndarray]:
    batch = sample_test_batch(bank, config, _block_rng(seed, block), size)
    correct = batch.y * forward_batch(W, batch.X) > 0
    return correct, batch.k


def test_accuracy(
    W: Weights,
    bank: FeatureBank,
    config: DataConfig,
    n_test: int,
    seed: int,
    train: Dataset | None = None,
    C: int | None = None,
    method: TrainingMethod | None = None,
    threads: int = 1,
) -> AccuracyReport:
    """
    Monte-Carlo test accuracy over fresh draws, overall and per feature tier.

    Draws come in blocks of TEST_BLOCK; block b has its own generator keyed by
    (seed, b), so the result does not depend on the thread count.

    Args:
        W: Weights to evaluate.
        bank: Feature vectors.
        config: Distribution parameters.
        n_test: Number of fresh draws.
        seed: Test RNG seed.
        train: Training set, to also report training accuracy.
        C: Cutout size, to also report augmented accuracy on the training set.
        method: Method that produced W, recorded in the report.
        threads: Worker threads.

    Returns:
        AccuracyReport with Wilson intervals.
    """
    sizes = [TEST_BLOCK] * (n_test // TEST_BLOCK)
    if n_test % TEST_BLOCK:
        sizes.append(n_test % TEST_BLOCK)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(
                pool.map(
                    lambda b: _score_block(W, bank, config, seed, b, sizes[b]), range(len(sizes))
                )
            )
    else:
        parts = [_score_block(W, bank, config, seed, b, size) for b, size in enumerate(sizes)]

    correct = np.concatenate([p[0] for p in parts])
    k = np.concatenate([p[1] for p in parts])
    total_correct = int(correct.sum())
    low, high = wilson_interval(total_correct, n_test)

    conditional = []
    for tier in FeatureTier:
        ks = config.tier_indices(tier)
        if not ks:
            continue
        in_tier = np.isin(k, ks)
        n_tier = int(in_tier.sum())
        hits = int(correct[in_tier].sum())
        t_low, t_high = wilson_interval(hits, n_tier)
        conditional.append(
            TierAccuracy(
                tier=tier,
                n=n_tier,
                correct=hits,
                rate=hits / n_tier if n_tier else float("nan"),
                ci_low=t_low,
                ci_high=t_high,
            )
        )

    test_acc = total_correct / n_test
    train_acc = train_accuracy(W, train) if train is not None else None
    aug_acc = augmented_accuracy(W, train, C) if train is not None and C else None
    logger.info(
        f"Test accuracy {test_acc:.4f} [{low:.4f}, {high:.4f}] over {n_test} draws",
        extra={"method": method.value if method else None, "seed": seed},
    )
    return AccuracyReport(
        success=True,
        message=f"test accuracy {test_acc:.4f}",
        method=method,
        train_acc=train_acc,
        aug_acc=aug_acc,
        test_acc=test_acc,
        test_ci_low=low,
        test_ci_high=high,
        conditional=conditional,
        n_test=n_test,
        seed=seed,
    )


def predicted_test_accuracy(method: TrainingMethod, config: DataConfig) -> float:
    """
    Test accuracy each method is predicted to reach.

    ERM learns only common features, Cutout also rare ones, CutMix all of them;
    samples carrying an unlearned feature are classified at chance.
    """
    if method == TrainingMethod.ERM:
        return 1.0 - 0.5 * config.tier_mass(FeatureTier.RARE, FeatureTier.EXTREME)
    if method == TrainingMethod.CUTOUT:
        return 1.0 - 0.5 * config.tier_mass(FeatureTier.EXTREME)
    return 1.0


def unlearned_tiers(method: TrainingMethod) -> tuple[FeatureTier, ...]:
    """Feature tiers each method is predicted to leave at chance."""
    if method == TrainingMethod.ERM:
        return (FeatureTier.RARE, FeatureTier.EXTREME)
    if method == TrainingMethod.CUTOUT:
        return (FeatureTier.EXTREME,)
    return ()


# Not a pytest test despite the name.
test_accuracy.__test__ = False  # type: ignore[attr-defined]
