"""Evaluation quantities: accuracy, Equal Opportunity, and exact
mutual-information oracles used to validate the neural estimator.

All information measures are in nats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def accuracy(predictions: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of matching entries between two integer class arrays."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape or predictions.size == 0:
        raise ValueError("predictions and labels must be equal-length, nonempty")
    return float(np.mean(predictions == labels))


@dataclass
class EOReport:
    """True-positive rates by group and their absolute gap."""

    tp_rate_protected: float
    tp_rate_unprotected: float
    eo: float
    n_protected_positive: int
    n_unprotected_positive: int


def equal_opportunity(predictions: np.ndarray, labels: np.ndarray,
                      protected: np.ndarray, positive_class: int = 1) -> EOReport:
    """Absolute gap between per-group true-positive rates.

    ``protected`` flags the protected group; the TP rate within a group is
    P(predicted positive | label positive).  Both groups must contain at
    least one positive-label sample.
    """
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    protected = np.asarray(protected, dtype=bool)
    if not (len(predictions) == len(labels) == len(protected)):
        raise ValueError("predictions, labels and protected must be aligned")

    rates = {}
    counts = {}
    for name, mask in (("protected", protected), ("unprotected", ~protected)):
        pos = mask & (labels == positive_class)
        counts[name] = int(pos.sum())
        if counts[name] == 0:
            raise ValueError(f"group '{name}' has no positive-label samples")
        rates[name] = float(np.mean(predictions[pos] == positive_class))
    return EOReport(
        tp_rate_protected=rates["protected"],
        tp_rate_unprotected=rates["unprotected"],
        eo=abs(rates["protected"] - rates["unprotected"]),
        n_protected_positive=counts["protected"],
        n_unprotected_positive=counts["unprotected"],
    )


def plugin_discrete_mi(joint_counts: np.ndarray) -> float:
    """Plug-in mutual information of a 2-D contingency table, in nats.

    Sum of p(i,j) * ln( p(i,j) / (p(i) p(j)) ) over nonzero cells, with
    empirical probabilities.
    """
    counts = np.asarray(joint_counts, dtype=np.float64)
    if counts.ndim != 2:
        raise ValueError(f"need a 2-D count table, got shape {counts.shape}")
    if np.any(counts < 0):
        raise ValueError("counts must be nonnegative")
    total = counts.sum()
    if total == 0:
        raise ValueError("count table is all zeros")
    p = counts / total
    pi = p.sum(axis=1, keepdims=True)
    pj = p.sum(axis=0, keepdims=True)
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / (pi @ pj)[nz])))


def gaussian_mi(rho: float) -> float:
    """Mutual information of a bivariate Gaussian with correlation rho."""
    if abs(rho) >= 1.0:
        raise ValueError("|rho| must be < 1")
    return -0.5 * math.log(1.0 - rho * rho)


def quantize_colors(images: np.ndarray, bins: int = 8) -> np.ndarray:
    """Map (N, 3, H, W) images to a discrete color id via per-channel
    quantization of the maximum pixel value.  Used by plug-in MI checks.
    """
    maxima = images.reshape(images.shape[0], images.shape[1], -1).max(axis=2)
    q = np.clip((maxima * bins).astype(int), 0, bins - 1)
    return q[:, 0] * bins * bins + q[:, 1] * bins + q[:, 2]


def contingency(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Joint count table of two integer-coded arrays."""
    a = np.asarray(a)
    b = np.asarray(b)
    ua, ia = np.unique(a, return_inverse=True)
    ub, ib = np.unique(b, return_inverse=True)
    table = np.zeros((len(ua), len(ub)))
    np.add.at(table, (ia, ib), 1.0)
    return table
