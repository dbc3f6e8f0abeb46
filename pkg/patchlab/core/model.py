"""
Two-layer patch CNN with a smoothed leaky ReLU and the logistic loss.

f_W(X) = sum_p mean_r phi(<w_{+1,r}, x^(p)>) - sum_p mean_r phi(<w_{-1,r}, x^(p)>)

With one neuron per sign (the default) this is the usual
sum_p phi(<w_1, x^(p)>) - sum_p phi(<w_-1, x^(p)>).
"""

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from patchlab.core.synthdata import make_rng
from patchlab.errors import PatchLabError
from patchlab.models.configs import ActivationParams, InitConfig

logger = logging.getLogger(__name__)

OUTPUT_SIGNS = np.array([1.0, -1.0])

# Weight file layout (little endian):
#   magic "PLW1" | uint32 d | uint32 m | float64 beta | float64 r | float64 sigma_0 |
#   int64 seed | bool has_init
#   float64[2*m*d] weights, row-major (sign, neuron, coordinate), +1 rows first
#   float64[2*m*d] initialization snapshot, present when has_init
WEIGHTS_MAGIC = b"PLW1"
WEIGHTS_HEADER = struct.Struct("<4sIIdddq?")


class ShapeMismatchError(PatchLabError):
    """Raised when patches and weights disagree on dimension."""

    def __init__(self, message: str, code: str = "SHAPE_MISMATCH"):
        super().__init__(message, code)


@dataclass
class Weights:
    """
    First-layer filters.

    w has shape (2, m, d): w[0] are the neurons of output sign +1, w[1] of sign -1.
    init holds the frozen W^(0) snapshot when the weights came from init_weights.
    """

    w: np.ndarray
    act: ActivationParams
    init: np.ndarray | None = None
    sigma_0: float = float("nan")
    seed: int = -1

    def __post_init__(self) -> None:
        if self.w.ndim != 3 or self.w.shape[0] != 2:
            raise ShapeMismatchError(f"weights must have shape (2, m, d), got {self.w.shape}")
        if self.init is not None and self.init.shape != self.w.shape:
            raise ShapeMismatchError(
                f"init snapshot shape {self.init.shape} differs from weights {self.w.shape}"
            )

    @property
    def m(self) -> int:
        return int(self.w.shape[1])

    @property
    def d(self) -> int:
        return int(self.w.shape[2])

    @property
    def w_plus(self) -> np.ndarray:
        return self.w[0]

    @property
    def w_minus(self) -> np.ndarray:
        return self.w[1]

    def replace(self, w: np.ndarray) -> "Weights":
        """Same activation and snapshot, new filter values."""
        return Weights(w=w, act=self.act, init=self.init, sigma_0=self.sigma_0, seed=self.seed)

    @classmethod
    def zeros(cls, d: int, act: ActivationParams, m: int = 1) -> "Weights":
        return cls(w=np.zeros((2, m, d)), act=act, init=np.zeros((2, m, d)))


def _scalar_or_array(values: np.ndarray) -> float | np.ndarray:
    return float(values) if values.ndim == 0 else values


def phi(z: float | np.ndarray, act: ActivationParams) -> float | np.ndarray:
    """Smoothed leaky ReLU: beta*z below 0, quadratic blend on [0, r], z - (1-beta)r/2 above."""
    z = np.asarray(z, dtype=float)
    beta, r = act.beta, act.r
    quad = (1.0 - beta) / (2.0 * r) * z * z + beta * z
    out = np.where(z >= r, z - (1.0 - beta) * r / 2.0, np.where(z > 0, quad, beta * z))
    return _scalar_or_array(out)


def phi_prime(z: float | np.ndarray, act: ActivationParams) -> float | np.ndarray:
    """Derivative of phi; lies in [beta, 1]."""
    z = np.asarray(z, dtype=float)
    beta, r = act.beta, act.r
    out = np.where(z >= r, 1.0, np.where(z > 0, beta + (1.0 - beta) * z / r, beta))
    return _scalar_or_array(out)


def logistic_loss(z: float | np.ndarray) -> float | np.ndarray:
    """log(1 + e^{-z}) as -min(z, 0) + log1p(e^{-|z|})."""
    z = np.asarray(z, dtype=float)
    return _scalar_or_array(-np.minimum(z, 0.0) + np.log1p(np.exp(-np.abs(z))))


def logistic_loss_prime(z: float | np.ndarray) -> float | np.ndarray:
    """l'(z) = -1 / (1 + e^z)."""
    return _scalar_or_array(-expit(-np.asarray(z, dtype=float)))


def logistic_loss_second(z: float | np.ndarray) -> float | np.ndarray:
    """l''(z) = sigmoid(z) * sigmoid(-z)."""
    z = np.asarray(z, dtype=float)
    return _scalar_or_array(expit(z) * expit(-z))


# =============================================================================
# Batched forward / backward
# =============================================================================


def _check_patches(W: Weights, X: np.ndarray) -> None:
    if X.shape[-1] != W.d:
        raise ShapeMismatchError(f"patch dimension {X.shape[-1]} does not match weights d={W.d}")


def preactivations(W: Weights, X: np.ndarray) -> np.ndarray:
    """
    Inner products <w_{s,r}, x_i^(p)>.

    Args:
        W: Weights.
        X: Patches of shape (n, P, d).

    Returns:
        Array of shape (n, P, 2, m).
    """
    _check_patches(W, X)
    n, P, d = X.shape
    flat = X.reshape(n * P, d) @ W.w.reshape(2 * W.m, d).T
    return flat.reshape(n, P, 2, W.m)


def patch_outputs(W: Weights, X: np.ndarray, pre: np.ndarray | None = None) -> np.ndarray:
    """Per-patch contributions z_i^(p) with shape (n, P); f(X_i) is their row sum."""
    pre = preactivations(W, X) if pre is None else pre
    act_values = np.asarray(phi(pre, W.act))
    return act_values[:, :, 0, :].mean(axis=-1) - act_values[:, :, 1, :].mean(axis=-1)


def forward_batch(W: Weights, X: np.ndarray) -> np.ndarray:
    """Network outputs for a batch of samples X of shape (n, P, d)."""
    return patch_outputs(W, X).sum(axis=1)


def forward(W: Weights, X: np.ndarray) -> float:
    """Network output for one sample with patches X of shape (P, d)."""
    if X.ndim != 2:
        raise ShapeMismatchError(f"a single sample must have shape (P, d), got {X.shape}")
    return float(forward_batch(W, X[None])[0])


def patch_backprop(
    W: Weights, X: np.ndarray, G: np.ndarray, pre: np.ndarray | None = None
) -> np.ndarray:
    """
    Chain per-patch output gradients back to the filters.

    Args:
        W: Weights.
        X: Patches of shape (n, P, d).
        G: dLoss/dz_i^(p), shape (n, P).
        pre: Cached preactivations, if available.

    Returns:
        Gradient with the shape of W.w.
    """
    pre = preactivations(W, X) if pre is None else pre
    n, P, d = X.shape
    slopes = np.asarray(phi_prime(pre, W.act))
    coeff = G[:, :, None, None] * slopes * (OUTPUT_SIGNS[None, None, :, None] / W.m)
    grad = coeff.reshape(n * P, 2 * W.m).T @ X.reshape(n * P, d)
    return grad.reshape(2, W.m, d)


def grad_sample(W: Weights, X: np.ndarray, y: int) -> np.ndarray:
    """Gradient of l(y f_W(X)) for one sample with patches X of shape (P, d)."""
    if X.ndim != 2:
        raise ShapeMismatchError(f"a single sample must have shape (P, d), got {X.shape}")
    f = forward(W, X)
    G = np.full((1, X.shape[0]), y * float(logistic_loss_prime(y * f)))
    return patch_backprop(W, X[None], G)


def init_weights(
    d: int, m: int, config: InitConfig, act: ActivationParams | None = None
) -> Weights:
    """
    Draw W^(0) with i.i.d. N(0, sigma_0^2) entries and keep a frozen snapshot.

    Args:
        d: Patch dimension.
        m: Neurons per output sign.
        config: Initialization scale and seed.
        act: Activation parameters carried by the weights.

    Returns:
        Weights whose init snapshot equals their values.
    """
    rng = make_rng(config.seed)
    w = rng.standard_normal((2, m, d)) * config.sigma_0
    snapshot = w.copy()
    snapshot.setflags(write=False)
    logger.debug(f"Initialized weights d={d} m={m} sigma_0={config.sigma_0}")
    return Weights(
        w=w,
        act=act or ActivationParams(),
        init=snapshot,
        sigma_0=config.sigma_0,
        seed=config.seed,
    )


def save_weights(W: Weights, path: Path) -> Path:
    """Write weights in the flat binary layout."""
    header = WEIGHTS_HEADER.pack(
        WEIGHTS_MAGIC, W.d, W.m, W.act.beta, W.act.r, W.sigma_0, W.seed, W.init is not None
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(W.w, dtype="<f8").tobytes())
        if W.init is not None:
            fh.write(np.ascontiguousarray(W.init, dtype="<f8").tobytes())
    return path


def load_weights(path: Path) -> Weights:
    """Read weights written by save_weights."""
    raw = path.read_bytes()
    if len(raw) < WEIGHTS_HEADER.size:
        raise ShapeMismatchError(f"{path} is too short to be a weights file", "BAD_WEIGHTS_FILE")
    magic, d, m, beta, r, sigma_0, seed, has_init = WEIGHTS_HEADER.unpack_from(raw)
    if magic != WEIGHTS_MAGIC:
        raise ShapeMismatchError(f"{path} has bad magic {magic!r}", "BAD_WEIGHTS_FILE")
    count = 2 * m * d
    expected = WEIGHTS_HEADER.size + 8 * count * (2 if has_init else 1)
    if len(raw) != expected:
        raise ShapeMismatchError(
            f"{path} has {len(raw)} bytes, expected {expected}", "BAD_WEIGHTS_FILE"
        )
    body = np.frombuffer(raw, dtype="<f8", offset=WEIGHTS_HEADER.size)
    w = body[:count].reshape(2, m, d).copy()
    init = body[count:].reshape(2, m, d).copy() if has_init else None
    return Weights(
        w=w,
        act=ActivationParams(beta=beta, r=r),
        init=init,
        sigma_0=sigma_0,
        seed=seed,
    )
