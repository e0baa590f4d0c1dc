"""Class-imbalance-aware loss family.

Class weights are w_c = 1/sqrt(f_c) of per-class pixel counts. The weighted
cross entropy averages -w_c * log y at the true class over pixels of the
batch; the generalized dice loss is one minus a weight-scaled overlap ratio
with squared-mass denominator; the hybrid loss mixes the two by the
fraction of classes present in the batch:

    (1 - gamma) * max(1, L_wce) + gamma * L_gdice

The presence ratio gamma is a count and carries no gradient. The max-clamp
uses active-branch gradients, so the cross-entropy term stops contributing
once it falls below 1 (switchable off via ce_clamp="none").
"""

from __future__ import annotations

from collections import namedtuple
from dataclasses import dataclass, field

import numpy as np

from .ops import log_softmax_channels, softmax_channels, take_columns
from .tensor import Tensor

DICE_EPS = 1e-7
PROB_TOL = 1e-6

CE_CLAMP_MODES = ("max", "none")


@dataclass
class ClassStats:
    """Per-class pixel counts over a training set and derived weights."""

    counts: np.ndarray
    weights: np.ndarray = field(init=False)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 1 or self.counts.size < 2:
            raise ValueError("class counts must be a 1-d array with K >= 2 entries")
        if np.any(self.counts < 0):
            raise ValueError("class counts must be non-negative")
        if not np.any(self.counts > 0):
            raise ValueError("all class counts are zero")
        present = self.counts > 0
        w = np.zeros(self.counts.size)
        w[present] = 1.0 / np.sqrt(self.counts[present])
        # Absent classes get the largest present weight: finite, and still
        # "rare class gets a large weight".
        w[~present] = w[present].max()
        self.weights = w

    @property
    def num_classes(self):
        return self.counts.size


def class_weights(counts):
    """Weights w_c = 1/sqrt(f_c), absent classes capped at the max present w."""
    return ClassStats(np.asarray(counts))


def normalized_weights(stats, mode="expected_pixel"):
    """Rescale raw 1/sqrt(f) weights for training.

    "expected_pixel" divides by sum_c (f_c/F) * w_c so a uniformly wrong
    prediction yields a per-pixel weighted CE near log K; without it the raw
    weights shrink with corpus size and max(1, L_wce) would always clamp.
    """
    if mode == "raw":
        return stats.weights.copy()
    if mode != "expected_pixel":
        raise ValueError(f"unknown weight normalization {mode!r}")
    shares = stats.counts / stats.counts.sum()
    scale = float((shares * stats.weights).sum())
    return stats.weights / scale


def one_hot(labels, num_classes):
    """Flatten an integer label map to a [K,M] one-hot float array."""
    labels = np.asarray(labels).reshape(-1)
    if labels.size == 0:
        raise ValueError("empty label map")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"labels must lie in [0,{num_classes}), got range [{labels.min()},{labels.max()}]")
    t = np.zeros((num_classes, labels.size))
    t[labels, np.arange(labels.size)] = 1.0
    return t


def _check_one_hot(t):
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 2:
        raise ValueError(f"one-hot target must be [K,M], got shape {t.shape}")
    if not np.all((t == 0.0) | (t == 1.0)) or not np.all(t.sum(axis=0) == 1.0):
        raise ValueError("target must be one-hot with exactly one class per pixel")
    return t


def _check_probs(y, K, M):
    if y.shape != (K, M):
        raise ValueError(f"prediction shape {y.shape} does not match target ({K},{M})")
    if np.any(y.data < -PROB_TOL) or np.any(y.data > 1.0 + PROB_TOL):
        raise ValueError("predictions contain values outside [0,1] beyond tolerance")


def _check_weights(w, K):
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (K,):
        raise ValueError(f"weights must be [K]={K}, got shape {w.shape}")
    if np.any(w <= 0.0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be positive and finite")
    return w


def presence_ratio(t, num_classes=None):
    """Fraction of classes with at least one pixel in the batch (no gradient)."""
    t = _check_one_hot(t.data if isinstance(t, Tensor) else t)
    if num_classes is not None and t.shape[0] != num_classes:
        raise ValueError(f"target has {t.shape[0]} classes, expected {num_classes}")
    present = int((t.sum(axis=1) > 0).sum())
    return present / t.shape[0]


def weighted_cross_entropy(y, t, w):
    """-(1/M) sum_m w[c(m)] log y[c(m), m] for probabilities y on [K,M].

    Only the true-class probabilities are logged, so a one-hot perfect
    prediction evaluates to exactly 0. A zero probability at a true class
    raises (the loss is infinite there).
    """
    t = _check_one_hot(t)
    K, M = t.shape
    _check_probs(y, K, M)
    w = _check_weights(w, K)
    cls = t.argmax(axis=0)
    picked = take_columns(y, cls)
    if np.any(picked.data <= 0.0):
        raise ValueError("predicted probability is zero at a true class; cross entropy diverges")
    return -(Tensor(w[cls]) * picked.log()).sum() / M


def weighted_cross_entropy_from_logits(z, t, w):
    """Weighted CE computed through log-softmax of logits (never logs 0)."""
    t = _check_one_hot(t)
    K, M = t.shape
    if z.shape != (K, M):
        raise ValueError(f"logit shape {z.shape} does not match target ({K},{M})")
    w = _check_weights(w, K)
    cls = t.argmax(axis=0)
    picked = take_columns(log_softmax_channels(z), cls)
    return -(Tensor(w[cls]) * picked).sum() / M


def generalized_dice(y, t, w, eps=DICE_EPS):
    """1 - (2 sum_c w_c sum_m y*t + eps) / (sum_c w_c sum_m (y^2+t^2) + eps)."""
    t = _check_one_hot(t)
    K, M = t.shape
    _check_probs(y, K, M)
    w = _check_weights(w, K)
    wt = Tensor(w)
    tt = Tensor(t)  # binary, so t^2 == t
    intersect = ((y * tt).sum(axes=1) * wt).sum()
    energy = (((y.square() + tt).sum(axes=1)) * wt).sum()
    if energy.data.item() <= 0.0:
        raise ValueError("degenerate dice denominator")  # impossible for one-hot t
    return 1.0 - (2.0 * intersect + eps) / (energy + eps)


def generalized_dice_from_logits(z, t, w, eps=DICE_EPS):
    return generalized_dice(softmax_channels(z), t, w, eps)


HybridTerms = namedtuple("HybridTerms", "loss wce gdice gamma")


def combine_hybrid(gamma, wce, gdice, ce_clamp="max"):
    """(1-gamma) * max(1, wce) + gamma * gdice on scalar tensors.

    The clamp takes active-branch gradients: d/d(wce) is zero while wce < 1.
    ce_clamp="none" drops the clamp for ablation.
    """
    if ce_clamp not in CE_CLAMP_MODES:
        raise ValueError(f"ce_clamp must be one of {CE_CLAMP_MODES}, got {ce_clamp!r}")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0,1], got {gamma}")
    ce_term = wce.clamp_min(1.0) if ce_clamp == "max" else wce
    return (1.0 - gamma) * ce_term + gamma * gdice


def hybrid_terms(y, t, w, ce_clamp="max"):
    """Hybrid loss from probabilities, with its parts (wce, gdice, gamma)."""
    gamma = presence_ratio(t)
    wce = weighted_cross_entropy(y, t, w)
    gdice = generalized_dice(y, t, w)
    return HybridTerms(combine_hybrid(gamma, wce, gdice, ce_clamp), wce, gdice, gamma)


def hybrid_terms_from_logits(z, t, w, ce_clamp="max"):
    """Hybrid loss from logits: CE via log-softmax, dice via softmax."""
    gamma = presence_ratio(t)
    wce = weighted_cross_entropy_from_logits(z, t, w)
    gdice = generalized_dice_from_logits(z, t, w)
    return HybridTerms(combine_hybrid(gamma, wce, gdice, ce_clamp), wce, gdice, gamma)


def hybrid_loss(y, t, w, ce_clamp="max"):
    return hybrid_terms(y, t, w, ce_clamp).loss
