"""
Feature-noise patch data.

Each sample has P patches: one feature patch carrying v_{y,k}, one dominant noise
patch alpha * v_{s,1} + xi with xi ~ N(0, sigma_d^2 Lambda), and background noise
patches xi ~ N(0, sigma_b^2 Lambda). Lambda projects out every feature direction,
so noise is exactly orthogonal to the features.

Random decisions for one training sample are drawn from a Philox stream in this
order: label, feature index k (inverse CDF over rho, half-open bins), feature patch
p*, dominant noise patch p~ (uniform over the other patches), feature-noise sign,
then one Gaussian vector per non-feature patch in increasing patch index.
"""

import json
import logging
from collections.abc import Iterator
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from patchlab.errors import PatchLabError
from patchlab.models.configs import DataConfig
from patchlab.models.enums import FeatureTier

logger = logging.getLogger(__name__)

SIGNS = (1, -1)
BUNDLE_VERSION = 1


class DataGenerationError(PatchLabError):
    """Raised when a dataset cannot be generated from a config."""

    def __init__(self, message: str, code: str = "DATA_GENERATION_ERROR"):
        super().__init__(message, code)


class BundleFormatError(PatchLabError):
    """Raised when a dataset bundle on disk is malformed."""

    def __init__(self, message: str, code: str = "BUNDLE_FORMAT_ERROR"):
        super().__init__(message, code)


def sign_index(s: int) -> int:
    """Row index of an output sign: +1 -> 0, -1 -> 1."""
    return 0 if s == 1 else 1


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator used for every random stream in patchlab."""
    return np.random.Generator(np.random.Philox(seed))


@dataclass(frozen=True)
class FeatureBank:
    """
    Orthonormal feature vectors v_{s,k}.

    vectors has shape (2, K, d); row 0 holds the +1 class, row 1 the -1 class.
    """

    vectors: np.ndarray

    def __post_init__(self) -> None:
        flat = self.vectors.reshape(-1, self.vectors.shape[-1])
        gram = flat @ flat.T
        if not np.allclose(gram, np.eye(flat.shape[0]), atol=1e-12):
            raise DataGenerationError("feature vectors are not orthonormal", "BANK_NOT_ORTHONORMAL")
        self.vectors.setflags(write=False)

    @classmethod
    def standard(cls, d: int, K: int) -> "FeatureBank":
        """First 2K standard basis vectors: e_1..e_K for +1, e_{K+1}..e_{2K} for -1."""
        if d < 2 * K:
            raise DataGenerationError(f"d={d} < 2K={2 * K}", "DIMENSION_TOO_SMALL")
        vectors = np.zeros((2, K, d))
        for si in range(2):
            for k in range(K):
                vectors[si, k, si * K + k] = 1.0
        return cls(vectors)

    @property
    def K(self) -> int:
        return int(self.vectors.shape[1])

    @property
    def d(self) -> int:
        return int(self.vectors.shape[2])

    def vector(self, s: int, k: int) -> np.ndarray:
        """v_{s,k} with zero-based k."""
        return self.vectors[sign_index(s), k]

    @property
    def matrix(self) -> np.ndarray:
        """(d, 2K) matrix whose columns are v_{1,1..K}, v_{-1,1..K}."""
        return self.vectors.reshape(-1, self.d).T

    def project_out(self, g: np.ndarray) -> np.ndarray:
        """Apply Lambda = I - sum v v^T along the last axis."""
        basis = self.matrix
        return g - (g @ basis) @ basis.T


@dataclass(frozen=True)
class Sample:
    """One sample with its ground-truth patch roles. X has shape (P, d)."""

    X: np.ndarray
    y: int
    k: int
    p_star: int
    p_tilde: int
    fn_sign: int
    noise: np.ndarray


@dataclass(frozen=True)
class Dataset:
    """
    A realized training (or test) set.

    Arrays are indexed by sample first: X and noise are (n, P, d); the noise row at
    p* is zero and the dominant noise row excludes the alpha * v feature-noise term.
    """

    X: np.ndarray
    y: np.ndarray
    k: np.ndarray
    p_star: np.ndarray
    p_tilde: np.ndarray
    fn_sign: np.ndarray
    noise: np.ndarray
    bank: FeatureBank
    config: DataConfig

    def __post_init__(self) -> None:
        for arr in (self.X, self.y, self.k, self.p_star, self.p_tilde, self.fn_sign, self.noise):
            arr.setflags(write=False)

    @property
    def n(self) -> int:
        return int(self.X.shape[0])

    @property
    def P(self) -> int:
        return int(self.X.shape[1])

    @property
    def d(self) -> int:
        return int(self.X.shape[2])

    def __len__(self) -> int:
        return self.n

    def sample(self, i: int) -> Sample:
        """Materialize sample i."""
        return Sample(
            X=self.X[i],
            y=int(self.y[i]),
            k=int(self.k[i]),
            p_star=int(self.p_star[i]),
            p_tilde=int(self.p_tilde[i]),
            fn_sign=int(self.fn_sign[i]),
            noise=self.noise[i],
        )

    def __iter__(self) -> Iterator[Sample]:
        for i in range(self.n):
            yield self.sample(i)

    def subset(self, indices: np.ndarray | list[int]) -> "Dataset":
        """Dataset restricted to the given samples, in the given order."""
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            X=self.X[idx].copy(),
            y=self.y[idx].copy(),
            k=self.k[idx].copy(),
            p_star=self.p_star[idx].copy(),
            p_tilde=self.p_tilde[idx].copy(),
            fn_sign=self.fn_sign[idx].copy(),
            noise=self.noise[idx].copy(),
            bank=self.bank,
            config=self.config.model_copy(update={"n": len(idx)}),
        )

    # Index sets

    def V(self, s: int) -> np.ndarray:
        """Indices with label s."""
        return np.flatnonzero(self.y == s)

    def V_sk(self, s: int, k: int) -> np.ndarray:
        """Indices with label s and feature k (zero-based)."""
        return np.flatnonzero((self.y == s) & (self.k == k))

    def F(self, s: int) -> np.ndarray:
        """Indices whose dominant noise patch carries alpha * v_{s,1}."""
        return np.flatnonzero(self.fn_sign == s)

    def tier_of_sample(self) -> np.ndarray:
        """FeatureTier value of each sample's feature index."""
        tiers = np.array([t.value for t in self.config.tiers])
        return tiers[self.k]

    def tier_mask(self, *tiers: FeatureTier) -> np.ndarray:
        """Boolean mask of samples whose feature index lies in one of the tiers."""
        wanted = {k for t in tiers for k in self.config.tier_indices(t)}
        return np.isin(self.k, sorted(wanted))

    # Patch roles

    @property
    def noise_mask(self) -> np.ndarray:
        """(n, P) mask of non-feature patches."""
        mask = np.ones((self.n, self.P), dtype=bool)
        mask[np.arange(self.n), self.p_star] = False
        return mask

    @property
    def dominant_mask(self) -> np.ndarray:
        """(n, P) mask of dominant noise patches."""
        mask = np.zeros((self.n, self.P), dtype=bool)
        mask[np.arange(self.n), self.p_tilde] = True
        return mask

    @property
    def background_mask(self) -> np.ndarray:
        """(n, P) mask of background noise patches."""
        return self.noise_mask & ~self.dominant_mask

    @property
    def noise_norm_sq(self) -> np.ndarray:
        """(n, P) squared norms of xi_i^(p); zero at the feature patch."""
        return np.einsum("npd,npd->np", self.noise, self.noise)


def sample_lambda_noise(bank: FeatureBank, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """
    Draw xi ~ N(0, sigma^2 Lambda) by projecting an isotropic Gaussian.

    Args:
        bank: Feature vectors to project out.
        sigma: Noise standard deviation.
        rng: Random generator.

    Returns:
        Vector of length d orthogonal to every feature vector.

    Raises:
        DataGenerationError: If sigma is not positive.
    """
    if not sigma > 0:
        raise DataGenerationError(f"noise std must be positive, got {sigma}", "INVALID_SIGMA")
    g = rng.standard_normal(bank.d) * sigma
    return bank.project_out(g)


def _draw_feature_index(cumulative: np.ndarray, u: float | np.ndarray) -> np.ndarray:
    """Inverse CDF with half-open bins [c_{k-1}, c_k)."""
    idx = np.searchsorted(cumulative, u, side="right")
    return np.minimum(idx, len(cumulative) - 1)


def _draw_sample(
    bank: FeatureBank,
    config: DataConfig,
    cumulative: np.ndarray,
    rng: np.random.Generator,
) -> Sample:
    P = config.P
    y = 1 - 2 * int(rng.integers(2))
    k = int(_draw_feature_index(cumulative, rng.random()))
    p_star = int(rng.integers(P))
    j = int(rng.integers(P - 1))
    p_tilde = j if j < p_star else j + 1
    fn_sign = 1 - 2 * int(rng.integers(2))

    X = np.zeros((P, bank.d))
    noise = np.zeros((P, bank.d))
    for p in range(P):
        if p == p_star:
            X[p] = bank.vector(y, k)
            continue
        sigma = config.sigma_d if p == p_tilde else config.sigma_b
        noise[p] = sample_lambda_noise(bank, sigma, rng)
        X[p] = noise[p]
    X[p_tilde] = X[p_tilde] + config.alpha * bank.vector(fn_sign, 0)
    return Sample(X=X, y=y, k=k, p_star=p_star, p_tilde=p_tilde, fn_sign=fn_sign, noise=noise)


def _stack(samples: list[Sample], bank: FeatureBank, config: DataConfig) -> Dataset:
    return Dataset(
        X=np.stack([s.X for s in samples]),
        y=np.array([s.y for s in samples], dtype=np.int64),
        k=np.array([s.k for s in samples], dtype=np.int64),
        p_star=np.array([s.p_star for s in samples], dtype=np.int64),
        p_tilde=np.array([s.p_tilde for s in samples], dtype=np.int64),
        fn_sign=np.array([s.fn_sign for s in samples], dtype=np.int64),
        noise=np.stack([s.noise for s in samples]),
        bank=bank,
        config=config,
    )


def generate_dataset(config: DataConfig) -> Dataset:
    """
    Generate n i.i.d. training samples, deterministic given config.seed.

    Args:
        config: Distribution parameters.

    Returns:
        The realized dataset with all patch-role metadata.

    Raises:
        DataGenerationError: If n is zero or d < 2K.
    """
    if config.n < 1:
        raise DataGenerationError(f"n must be positive, got {config.n}", "EMPTY_DATASET")
    if config.d < 2 * config.K:
        raise DataGenerationError(
            f"d={config.d} cannot hold 2K={2 * config.K} orthonormal features",
            "DIMENSION_TOO_SMALL",
        )

    bank = FeatureBank.standard(config.d, config.K)
    cumulative = np.cumsum(config.rho)
    rng = make_rng(config.seed)
    samples = [_draw_sample(bank, config, cumulative, rng) for _ in range(config.n)]
    dataset = _stack(samples, bank, config)

    logger.info(
        f"Generated dataset n={config.n} d={config.d} P={config.P} K={config.K}",
        extra={"seed": config.seed, "n_pos": int((dataset.y == 1).sum())},
    )
    return dataset


def sample_test_point(
    bank: FeatureBank, config: DataConfig, rng: np.random.Generator
) -> Sample:
    """Draw one fresh sample from the training distribution."""
    return _draw_sample(bank, config, np.cumsum(config.rho), rng)


def sample_test_batch(
    bank: FeatureBank, config: DataConfig, rng: np.random.Generator, size: int
) -> Dataset:
    """
    Draw a batch of fresh samples in one vectorized pass.

    Same law as the training samples. Decisions are drawn array-wise in the order
    labels, k, p*, p~, sign, then a (size, P, d) Gaussian block whose feature-patch
    rows are discarded.
    """
    P, d = config.P, bank.d
    rows = np.arange(size)
    y = 1 - 2 * rng.integers(2, size=size)
    k = _draw_feature_index(np.cumsum(config.rho), rng.random(size))
    p_star = rng.integers(P, size=size)
    j = rng.integers(P - 1, size=size)
    p_tilde = np.where(j < p_star, j, j + 1)
    fn_sign = 1 - 2 * rng.integers(2, size=size)

    sigma = np.full((size, P), config.sigma_b)
    sigma[rows, p_tilde] = config.sigma_d
    sigma[rows, p_star] = 0.0
    noise = bank.project_out(rng.standard_normal((size, P, d)) * sigma[:, :, None])

    X = noise.copy()
    X[rows, p_star] = bank.vectors[(1 - y) // 2, k]
    X[rows, p_tilde] += config.alpha * bank.vectors[(1 - fn_sign) // 2, 0]
    return Dataset(
        X=X,
        y=y.astype(np.int64),
        k=k.astype(np.int64),
        p_star=p_star.astype(np.int64),
        p_tilde=p_tilde.astype(np.int64),
        fn_sign=fn_sign.astype(np.int64),
        noise=noise,
        bank=bank,
        config=config.model_copy(update={"n": size}),
    )


# =============================================================================
# Bundle format
# =============================================================================
#
# A .npz archive with three arrays:
#   header   0-d unicode array: JSON {"version": 1, "config": DataConfig}
#   rows     (n, 5) int64: y, k, p*, p~, fn_sign
#   patches  (d, n*P) float64: column i*P + p is x_i^(p)
# Raw noise is recovered as x minus the feature or feature-noise term.


def save_dataset(dataset: Dataset, path: Path) -> Path:
    """Write a dataset bundle."""
    header = json.dumps(
        {"version": BUNDLE_VERSION, "config": dataset.config.model_dump(mode="json")}
    )
    rows = np.stack(
        [dataset.y, dataset.k, dataset.p_star, dataset.p_tilde, dataset.fn_sign], axis=1
    )
    patches = dataset.X.reshape(dataset.n * dataset.P, dataset.d).T
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        np.savez(fh, header=np.array(header), rows=rows, patches=patches)
    logger.debug(f"Saved dataset bundle to {path}")
    return path


def load_dataset(path: Path) -> Dataset:
    """
    Read a dataset bundle written by save_dataset.

    Raises:
        BundleFormatError: If the archive is missing arrays or has inconsistent shapes.
    """
    try:
        with np.load(path, allow_pickle=False) as archive:
            header = json.loads(str(archive["header"]))
            rows = archive["rows"]
            patches = archive["patches"]
    except (OSError, KeyError, ValueError) as e:
        raise BundleFormatError(f"cannot read dataset bundle {path}: {e}") from e

    if header.get("version") != BUNDLE_VERSION:
        raise BundleFormatError(f"unsupported bundle version {header.get('version')}")
    config = DataConfig.model_validate(header["config"])
    n, P, d = config.n, config.P, config.d
    if rows.shape != (n, 5) or patches.shape != (d, n * P):
        raise BundleFormatError(
            f"bundle shapes rows={rows.shape} patches={patches.shape} do not match config"
        )

    bank = FeatureBank.standard(d, config.K)
    y, k, p_star, p_tilde, fn_sign = (rows[:, c].astype(np.int64) for c in range(5))
    X = np.ascontiguousarray(patches.T.reshape(n, P, d))
    idx = np.arange(n)
    noise = X.copy()
    noise[idx, p_star] = 0.0
    noise[idx, p_tilde] -= config.alpha * bank.vectors[(1 - fn_sign) // 2, 0]
    return Dataset(
        X=X,
        y=y,
        k=k,
        p_star=p_star,
        p_tilde=p_tilde,
        fn_sign=fn_sign,
        noise=noise,
        bank=bank,
        config=config,
    )
