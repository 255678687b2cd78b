"""LIME for token sequences: deletion perturbations + weighted ridge surrogate."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_KERNEL_WIDTH = 25.0
DEFAULT_NUM_SAMPLES = 1000


@dataclass(frozen=True)
class LimeConfig:
    num_samples: int = DEFAULT_NUM_SAMPLES
    kernel_width: float = DEFAULT_KERNEL_WIDTH
    ridge_alpha: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.num_samples < 1:
            raise ValueError("num_samples must be >= 1")
        if not self.kernel_width > 0:
            raise ValueError("kernel_width must be positive")
        if self.ridge_alpha < 0:
            raise ValueError("ridge_alpha must be nonnegative")


def instance_seed(seed: int, record_id: str) -> int:
    """Stable per-instance seed so results do not depend on evaluation order."""
    digest = hashlib.sha256(f"{seed}\x00{record_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def cosine_distance_to_ones(masks: np.ndarray) -> np.ndarray:
    """Cosine distance of each binary row to the all-ones row; empty rows get 1."""
    masks = np.asarray(masks, dtype=float)
    kept = masks.sum(axis=1)
    m = masks.shape[1]
    return 1.0 - np.sqrt(kept / m)


def perturb_samples(m: int, config: LimeConfig, seed: Optional[int] = None) -> tuple[np.ndarray, np.ndarray]:
    """Binary keep-masks (num_samples x m) and their distances to the instance.

    Row 0 is the unperturbed instance. Every other row removes between 1 and
    m tokens, the count drawn uniformly, then the positions uniformly.
    """
    if m < 1:
        raise ValueError("need at least one token")
    rng = np.random.default_rng(config.seed if seed is None else seed)
    masks = np.ones((config.num_samples, m), dtype=np.int8)
    for row in range(1, config.num_samples):
        n_drop = rng.integers(1, m + 1)
        masks[row, rng.choice(m, size=n_drop, replace=False)] = 0
    return masks, cosine_distance_to_ones(masks)


def kernel(distances: np.ndarray, kernel_width: float) -> np.ndarray:
    return np.exp(-(np.asarray(distances, dtype=float) ** 2) / kernel_width**2)


def fit_surrogate_full(
    masks: np.ndarray,
    outputs: Sequence[float],
    distances: np.ndarray,
    config: LimeConfig,
    weights: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, float]:
    """Weighted ridge fit; returns ``(token coefficients, intercept)``.

    Solves ``(X^T P X + alpha I') beta = X^T P y`` where ``X`` carries a
    leading intercept column that is not penalised. ``weights`` overrides
    the kernel weights computed from ``distances``.
    """
    masks = np.asarray(masks, dtype=float)
    y = np.asarray(outputs, dtype=float)
    if masks.ndim != 2 or masks.shape[0] < 1 or y.shape != (masks.shape[0],) or len(distances) != masks.shape[0]:
        raise ValueError("masks, outputs and distances disagree in shape")
    pi = kernel(distances, config.kernel_width) if weights is None else np.asarray(weights, dtype=float)
    X = np.hstack([np.ones((masks.shape[0], 1)), masks])
    XtP = X.T * pi
    A = XtP @ X
    penalty = np.full(X.shape[1], config.ridge_alpha)
    penalty[0] = 0.0
    A[np.diag_indices_from(A)] += penalty
    rhs = XtP @ y
    try:
        beta = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("surrogate normal equations are singular; use ridge_alpha > 0") from None
    return beta[1:], float(beta[0])


def fit_surrogate(masks, outputs, distances, config: LimeConfig) -> np.ndarray:
    return fit_surrogate_full(masks, outputs, distances, config)[0]


def lime_explain(
    predict_fn: Callable[[Sequence[str]], Sequence[float]],
    tokens: Sequence[str],
    target_class: Optional[int],
    config: LimeConfig,
    record_id: str = "",
) -> tuple[np.ndarray, np.ndarray, int]:
    """Explain one instance; returns ``(attributions, probabilities, target_class)``.

    ``target_class=None`` explains the class predicted on the full input.
    """
    tokens = list(tokens)
    full = np.asarray(predict_fn(tokens), dtype=float)
    if target_class is None:
        target_class = int(np.argmax(full))
    if not tokens:
        return np.zeros(0), full, target_class
    seed = instance_seed(config.seed, record_id) if record_id else config.seed
    masks, distances = perturb_samples(len(tokens), config, seed)
    outputs = np.empty(masks.shape[0])
    for row, keep in enumerate(masks):
        kept = [t for t, k in zip(tokens, keep) if k]
        try:
            outputs[row] = predict_fn(kept)[target_class]
        except Exception as err:
            raise RuntimeError(f"predict_fn failed on perturbation row {row}: {err}") from err
    return fit_surrogate(masks, outputs, distances, config), full, target_class
