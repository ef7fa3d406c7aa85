#!/usr/bin/env python3
"""
Metrics Module for the CoFInAl Scoring Head

Rank-correlation evaluation as reported for action quality assessment:
- ranks: 1-based fractional ranks (ties share their average rank)
- srcc: Spearman's coefficient, i.e. Pearson correlation of the rank vectors
- fisher_z_average: aggregate correlations through atanh / tanh
"""

import logging
from typing import Sequence

import numpy as np
from scipy import stats

from errors import UndefinedCorrelationError


# |rho| = 1 is pulled inside (-1, 1) by this margin before atanh
FISHER_Z_CLAMP = 1e-12


def ranks(values: Sequence[float]) -> np.ndarray:
    """
    Rank a batch of values.

    Args:
        values: Batch of at least two reals

    Returns:
        1-based ranks; tied values receive the mean of their positional ranks
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1 or values.size < 2:
        raise UndefinedCorrelationError(f"Ranking needs a 1-D batch of at least 2 values, got shape {values.shape}")
    return stats.rankdata(values, method="average")


def srcc(pred: Sequence[float], truth: Sequence[float]) -> float:
    """
    Spearman rank correlation between predicted and ground-truth scores.

    Args:
        pred: Predicted scores
        truth: Ground-truth scores (same length)

    Returns:
        Correlation in [-1, 1]
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise UndefinedCorrelationError(f"Batch lengths differ: {pred.shape} vs {truth.shape}")
    p, q = ranks(pred), ranks(truth)
    p_centered = p - p.mean()
    q_centered = q - q.mean()
    denominator = np.sqrt(np.sum(p_centered ** 2) * np.sum(q_centered ** 2))
    if denominator == 0.0:
        raise UndefinedCorrelationError("Correlation is undefined for a constant batch")
    rho = float(np.sum(p_centered * q_centered) / denominator)
    return min(1.0, max(-1.0, rho))


def fisher_z_average(rhos: Sequence[float]) -> float:
    """Average correlations as tanh(mean(atanh(rho)))."""
    rhos = np.asarray(rhos, dtype=np.float64)
    if rhos.size == 0:
        raise UndefinedCorrelationError("Fisher-z average of an empty batch")
    outside = rhos[~(np.abs(rhos) <= 1.0)]
    if outside.size:
        raise UndefinedCorrelationError(f"Correlations must lie in [-1, 1], got {outside.tolist()}")
    limit = 1.0 - FISHER_Z_CLAMP
    if np.any(np.abs(rhos) == 1.0):
        logging.warning(f"Clamping correlations of magnitude 1 to +/-{limit} for Fisher-z averaging")
    clamped = np.clip(rhos, -limit, limit)
    return float(np.tanh(np.mean(np.arctanh(clamped))))
