"""Segmentation and adversarial objectives.

Labels are integer maps with classes numbered from 1; 0 marks void pixels,
which never contribute to a loss. The unknown class is ``K + 1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .networks import Discriminator, SegModel, classify, discriminate, forward_features
from .tensor import Tensor, add, bce_logits, masked_cross_entropy, mul_mask


@dataclass
class LossBundle:
    L_seg_S: float
    L_seg_T: float
    L_seg: float
    L_seg_star: float
    L_adv: float
    alpha: float
    delta: float
    lr: float
    N: int
    unknown_fraction: float = 0.0


def one_hot(labels, n_classes: int) -> np.ndarray:
    """``N x H x W`` labels in ``0..n_classes`` to ``N x n_classes x H x W``; 0 maps to all-zero."""
    labels = np.asarray(labels)
    if labels.ndim != 3:
        raise ShapeError(f"labels must be N x H x W, got {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) > n_classes:
        raise ValueError(f"labels must lie in 0..{n_classes}")
    eye = np.vstack([np.zeros((1, n_classes)), np.eye(n_classes)])
    return np.moveaxis(eye[labels], -1, 1)


def _features(model, images, features):
    return forward_features(model, images) if features is None else features


def source_seg_loss(model: SegModel, images, labels, features: Tensor | None = None) -> Tensor:
    """Cross-entropy of the open-set head on labeled source pixels (labels in 1..K)."""
    labels = np.asarray(labels)
    if labels.max(initial=0) > model.K:
        raise ValueError(f"source labels must lie in 1..{model.K}")
    logits = classify(model.C, _features(model, images, features))
    return masked_cross_entropy(logits, one_hot(labels, model.K + 1))


def target_pseudo_loss(model: SegModel, images, pseudo, features: Tensor | None = None) -> Tensor:
    """Cross-entropy of the open-set head on pixels pseudo-labeled as unknown."""
    pseudo = np.asarray(pseudo, dtype=np.float64)
    logits = classify(model.C, _features(model, images, features))
    if pseudo.shape != logits.shape:
        raise ShapeError(f"pseudo-labels {pseudo.shape} do not match logits {logits.shape}")
    weights = pseudo[:, -1:]
    return masked_cross_entropy(logits, pseudo, weights)


def star_seg_loss(model: SegModel, images, labels, features: Tensor | None = None) -> Tensor:
    """Cross-entropy of the known-class head on source pixels."""
    labels = np.asarray(labels)
    if labels.max(initial=0) > model.K:
        raise ValueError(f"source labels must lie in 1..{model.K}")
    logits = classify(model.C_star, _features(model, images, features))
    return masked_cross_entropy(logits, one_hot(labels, model.K))


def unmasked_adv_loss(disc: Discriminator, feats_S: Tensor, feats_T: Tensor) -> Tensor:
    """Plain feature-level domain loss: source labeled 1, target labeled 0."""
    return add(bce_logits(discriminate(disc, feats_S), 1),
               bce_logits(discriminate(disc, feats_T), 0))


def masked_adv_loss(disc: Discriminator, feats_S: Tensor, feats_T: Tensor, mask,
                    role: str = "discriminator") -> Tensor:
    """Domain loss in which only target locations with ``mask == 1`` take part.

    Target features are multiplied by the mask before ``D``; the target term is
    averaged over unmasked locations only. ``role="generator"`` gives the
    non-saturating feature-extractor objective (masked target labeled 1).
    """
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim == 4:
        mask = mask[:, 0]
    if mask.shape != (feats_T.shape[0],) + feats_T.shape[2:]:
        raise ShapeError(f"mask {mask.shape} does not match target features {feats_T.shape}")
    weights = mask[:, None]
    target_logits = discriminate(disc, mul_mask(feats_T, weights))
    if role == "discriminator":
        return add(bce_logits(discriminate(disc, feats_S), 1),
                   bce_logits(target_logits, 0, weights))
    if role == "generator":
        return bce_logits(target_logits, 1, weights)
    raise ValueError(f"role must be 'discriminator' or 'generator', got {role!r}")
