"""Segmentation loss family: cross-entropy, Dice, generalized Dice, and their
lambda-weighted combination.

All losses take per-pixel class probabilities `p` (a tape Tensor, normally a
softmax output, shape (H, W, L)) and a one-hot target `r` of the same shape.
Class weights regularize squared inverse volume so absent labels stay finite:
w_l = 1 / (1 + (sum_x r_lx)^2). Weights are treated as constants; no gradient
flows through them.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError

GUARD = 1e-12
PROB_CLIP = 1e-12

VARIANTS = ("dl", "gdl", "gm_dl")


def _check_inputs(p: T.Tensor, r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    if p.shape != r.shape:
        raise ShapeError(f"prediction shape {p.shape} != target shape {r.shape}")
    if p.data.ndim < 2:
        raise ShapeError(f"expected (..., L) probability maps, got {p.shape}")
    return r


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """(H, W) integer labels -> (H, W, L) one-hot float64."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ShapeError(f"labels outside [0, {num_classes})")
    out = np.zeros(labels.shape + (num_classes,), dtype=np.float64)
    np.put_along_axis(out, labels[..., None].astype(np.int64), 1.0, axis=-1)
    return out


def cross_entropy(p: T.Tensor, r: np.ndarray) -> T.Tensor:
    """Mean over pixels of -sum_l r log p, with p clamped to [1e-12, 1-1e-12]."""
    r = _check_inputs(p, r)
    logp = T.log(T.clip(p, PROB_CLIP, 1.0 - PROB_CLIP))
    per_pixel = T.reduce_sum(T.mul(logp, T.Tensor(r)), axes=-1)
    return T.neg(T.reduce_mean(per_pixel))


def class_weights(r: np.ndarray) -> np.ndarray:
    """Regularized squared-inverse-volume weights, one per label.

    w_l = 1 / (1 + (sum_x r_lx)^2); an absent label gets weight exactly 1.
    """
    r = np.asarray(r, dtype=np.float64)
    volumes = r.reshape(-1, r.shape[-1]).sum(axis=0)
    return 1.0 / (1.0 + volumes * volumes)


def _per_label_sums(p: T.Tensor, r: np.ndarray) -> tuple[T.Tensor, T.Tensor]:
    """(sum_x p*r, sum_x p+r) per label, both shape (L,) on the tape."""
    spatial = tuple(range(p.data.ndim - 1))
    rt = T.Tensor(r)
    inter = T.reduce_sum(T.mul(p, rt), axes=spatial)
    total = T.reduce_sum(T.add(p, rt), axes=spatial)
    return inter, total


def _check_weights(weights, num_labels: int) -> np.ndarray:
    """Validate and normalize to unit sum.

    Both Dice formulations are invariant under scaling the weights, and a
    unit-sum vector makes the single-label case of the two losses agree
    bitwise (the lone weight becomes exactly 1.0).
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (num_labels,):
        raise ShapeError(f"expected {num_labels} class weights, got {weights.shape}")
    if np.any(weights < 0):
        raise ConfigError("class weights must be nonnegative")
    if not np.any(weights > 0):
        raise ConfigError("all class weights are zero")
    return weights / math.fsum(weights)


def dice_loss(p: T.Tensor, r: np.ndarray, weights) -> T.Tensor:
    """Weighted mean of per-label soft Dice scores, negated.

    L = -(1 / sum_l w_l) * sum_l w_l * 2 sum_x p r / (sum_x p + r + eps)
    """
    r = _check_inputs(p, r)
    weights = _check_weights(weights, p.shape[-1])
    inter, total = _per_label_sums(p, r)
    per_label = T.div(T.mul(T.Tensor(2.0), inter),
                      T.add(total, T.Tensor(GUARD)))
    weighted = T.reduce_fsum(T.mul(per_label, T.Tensor(weights)))
    return T.neg(T.div(weighted, T.Tensor(math.fsum(weights))))


def generalized_dice_loss(p: T.Tensor, r: np.ndarray, weights) -> T.Tensor:
    """Weighted intersections over weighted totals, pooled across labels.

    L = -2 * sum_l w_l sum_x p r / (sum_l w_l sum_x (p + r) + eps)
    """
    r = _check_inputs(p, r)
    weights = _check_weights(weights, p.shape[-1])
    inter, total = _per_label_sums(p, r)
    wt = T.Tensor(weights)
    num = T.mul(T.Tensor(2.0), T.reduce_fsum(T.mul(inter, wt)))
    den = T.add(T.reduce_fsum(T.mul(total, wt)), T.Tensor(GUARD))
    return T.neg(T.div(num, den))


def gm_only_weights(num_classes: int, gm_class: int = 1) -> np.ndarray:
    """Weight vector selecting the gray-matter label only."""
    w = np.zeros(num_classes)
    w[gm_class] = 1.0
    return w


def combined_loss(p: T.Tensor, r: np.ndarray, lam: float,
                  variant: str = "gdl", weights=None,
                  gm_class: int = 1) -> T.Tensor:
    """L = lam * dice-term + (1 - lam) * cross-entropy.

    variant: "dl" (weighted mean of per-label Dice), "gdl" (pooled), or
    "gm_dl" (Dice on the gray-matter label only). weights defaults to the
    regularized inverse-volume weighting computed from r; "gm_dl" ignores it.
    """
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda {lam} outside [0, 1]")
    if variant not in VARIANTS:
        raise ConfigError(f"unknown loss variant {variant!r}; pick from {VARIANTS}")
    r = _check_inputs(p, r)

    if lam == 0.0:
        return cross_entropy(p, r)

    if variant == "gm_dl":
        w = gm_only_weights(p.shape[-1], gm_class)
        dice = dice_loss(p, r, w)
    else:
        w = class_weights(r) if weights is None else np.asarray(weights, dtype=np.float64)
        dice = dice_loss(p, r, w) if variant == "dl" else generalized_dice_loss(p, r, w)

    if lam == 1.0:
        return dice
    ce = cross_entropy(p, r)
    return T.add(T.mul(T.Tensor(lam), dice), T.mul(T.Tensor(1.0 - lam), ce))
