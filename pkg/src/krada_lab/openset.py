"""Unknown-pixel detection by goodness of fit to the uniform distribution.

A closed-set classifier tends to spread its probability mass evenly over the
known classes when it sees something it was never trained on. Pixels whose
predicted distribution is close enough to uniform are pseudo-labeled as the
extra "unknown" class; everything else stays unlabeled.

Probability maps are laid out channel-first, ``K x H x W`` for one image or
``N x K x H x W`` for a batch; the class axis is always ``-3`` for maps.
"""

from __future__ import annotations

from typing import Iterable

import numpy as np

EPS = 1e-12
METRICS = ("kl", "kolmogorov")


def _check_simplex(p: np.ndarray, axis: int) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.shape[axis] < 2:
        raise ValueError(f"need at least 2 classes, got {p.shape[axis]}")
    if np.any(p < 0):
        raise ValueError("probabilities must be nonnegative")
    if np.any(np.abs(p.sum(axis=axis) - 1.0) > 1e-6):
        raise ValueError("probability vectors must sum to 1")
    return p


def kl_to_uniform(p, axis: int = -1):
    """``D_KL(uniform || p)`` in nats, with ``p`` clamped below at ``EPS``."""
    p = _check_simplex(p, axis)
    K = p.shape[axis]
    # sum_c (1/K) ln((1/K) / p_c)  ==  -ln K - mean_c ln p_c
    return -np.log(K) - np.log(np.maximum(p, EPS)).mean(axis=axis)


def kolmogorov_to_uniform(p, axis: int = -1):
    """Largest gap between the CDF of ``p`` and the uniform CDF.

    Classes are taken in their index order; no sorting is applied.
    """
    p = _check_simplex(p, axis)
    K = p.shape[axis]
    shape = [1] * p.ndim
    shape[axis] = K
    ref = (np.arange(1, K + 1) / K).reshape(shape)
    return np.abs(np.cumsum(p, axis=axis) - ref).max(axis=axis)


def entropy(p, axis: int = -1):
    p = _check_simplex(p, axis)
    return -(p * np.log(np.maximum(p, EPS))).sum(axis=axis)


def pixel_metric(probs, metric: str = "kl"):
    """Per-pixel distance to uniform for a ``(N x) K x H x W`` probability map."""
    if metric == "kl":
        return kl_to_uniform(probs, axis=-3)
    if metric == "kolmogorov":
        return kolmogorov_to_uniform(probs, axis=-3)
    raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")


def generate_pseudo_labels(probs, delta: float, metric: str = "kl") -> np.ndarray:
    """One-hot ``(N x) (K+1) x H x W`` map with only the unknown channel set.

    A pixel is marked unknown iff its distance to uniform is strictly below
    ``delta``. The map is built fresh on every call.
    """
    if delta < 0:
        raise ValueError(f"delta must be nonnegative, got {delta}")
    probs = np.asarray(probs, dtype=np.float64)
    unknown = pixel_metric(probs, metric) < delta
    shape = list(probs.shape)
    K = shape[-3]
    shape[-3] = K + 1
    labels = np.zeros(shape)
    labels[..., K, :, :] = unknown
    return labels


def known_region_mask(labels) -> np.ndarray:
    """Binary map that is 0 where the unknown channel is set and 1 elsewhere."""
    labels = np.asarray(labels)
    return 1.0 - labels[..., -1, :, :]


def calibrate_delta(prob_maps: Iterable, metric: str = "kl", steps: int = 10,
                    step_size: float = 0.1) -> list[float]:
    """Candidate thresholds starting at the mean over images of the per-image minimum metric."""
    minima = [float(pixel_metric(p, metric).min()) for p in prob_maps]
    if not minima:
        raise ValueError("calibrate_delta needs at least one probability map")
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    start = float(np.mean(minima))
    return [start + i * step_size for i in range(steps)]
