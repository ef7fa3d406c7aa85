#!/usr/bin/env python3
"""
Losses Module for the CoFInAl Scoring Head

The composite objective L = L_S + lambda_C L_C + lambda_F L_F + lambda_R L_R:
- score_loss: halved mean squared error on the coupled score
- coarse_loss: grade cross-entropy
- fine_loss: dot regression of the normalized fine feature onto its ETF prototype
- graph_reg_loss: KL divergence between prototype angles and grade distances
"""

import math
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Sequence

import numpy as np

import tensor_core as tc
from errors import ConfigError, DegeneratePrototypeError, DimensionError, LabelError, NonFiniteError
from etf import ETFMatrix
from tensor_core import Tensor


# Cosines are kept inside [-1 + eps, 1 - eps] before arccos
COSINE_CLAMP = 1e-7

# Prototype rows shorter than this cannot be normalized
PROTOTYPE_MIN_NORM = 1e-12


class FineTarget(Enum):
    """Which sub-grade prototype the fine loss regresses onto."""
    GROUND_TRUTH = "ground_truth"
    PREDICTED = "predicted"


@dataclass(frozen=True)
class LossWeights:
    """Weights of the coarse, fine and graph-regularization terms."""
    lambda_c: float = 1.0
    lambda_f: float = 1.0
    lambda_r: float = 1.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not math.isfinite(value) or value < 0:
                raise ConfigError(f"Loss weight {name} must be finite and >= 0, got {value}")


@dataclass
class LossParts:
    """The four unweighted loss terms (scalar tensors)."""
    score: Tensor
    coarse: Tensor
    fine: Tensor
    graph: Tensor

    def values(self) -> dict:
        return {
            "loss_s": self.score.item(),
            "loss_c": self.coarse.item(),
            "loss_f": self.fine.item(),
            "loss_r": self.graph.item(),
        }


def quality_distance_matrix(grades: int) -> np.ndarray:
    """D with D[i, j] = |i - j| over grade indices."""
    idx = np.arange(grades, dtype=np.float64)
    return np.abs(idx[:, None] - idx[None, :])


def _check_labels(labels: np.ndarray, classes: int, n: int, kind: str) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DimensionError(f"Expected {n} {kind} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise LabelError(f"{kind.capitalize()} label outside [0, {classes}): {labels.min()}..{labels.max()}")
    return labels.astype(np.intp)


def score_loss(s_hat: Tensor, s: Sequence[float]) -> Tensor:
    """
    Halved mean squared error between predicted and ground-truth scores.

    Args:
        s_hat: Predicted scores [N]
        s: Ground-truth scores [N]

    Returns:
        (1/2N) * sum (s - s_hat)^2
    """
    s = np.asarray(s, dtype=np.float64)
    if s_hat.shape != s.shape:
        raise DimensionError(f"score_loss: predictions {s_hat.shape} vs targets {s.shape}")
    n = s.size
    if n == 0:
        raise DimensionError("score_loss on an empty batch")
    return tc.mul(tc.reduce_sum(tc.square(tc.sub(s_hat, s))), 0.5 / n)


def coarse_loss(coarse_logits: Tensor, s_c: Sequence[int]) -> Tensor:
    """Mean cross-entropy of grade logits [N, G] against grade indices [N]."""
    if coarse_logits.ndim != 2:
        raise DimensionError(f"coarse_loss expects [N, G] logits, got {coarse_logits.shape}")
    n, g = coarse_logits.shape
    if n == 0:
        raise DimensionError("coarse_loss on an empty batch")
    labels = _check_labels(s_c, g, n, "grade")
    one_hot = np.eye(g)[labels]
    picked = tc.reduce_sum(tc.mul(tc.log_softmax(coarse_logits, axis=-1), one_hot))
    return tc.mul(picked, -1.0 / n)


def fine_loss(h_F: Tensor, targets: Sequence[int], etf: ETFMatrix) -> Tensor:
    """
    Dot-regression of the normalized pooled fine feature onto ETF prototypes.

    Prototypes have unit norm, so a feature along its target prototype gives zero loss.

    Args:
        h_F: Pooled fine features [N, D_S] (normalized here)
        targets: Sub-grade indices [N]
        etf: Fixed prototypes

    Returns:
        (1/2N) * sum (<h_F_unit, e_target> - 1)^2
    """
    if h_F.ndim != 2 or h_F.shape[1] != etf.d:
        raise DimensionError(f"fine_loss expects [N, {etf.d}] features, got {h_F.shape}")
    n = h_F.shape[0]
    if n == 0:
        raise DimensionError("fine_loss on an empty batch")
    labels = _check_labels(targets, etf.K, n, "sub-grade")
    unit = tc.l2_normalize(h_F)
    dots = tc.reduce_sum(tc.mul(unit, etf.E[labels]), axis=-1)
    return tc.mul(tc.reduce_sum(tc.square(tc.sub(dots, 1.0))), 0.5 / n)


def graph_reg_loss(prototypes: Tensor) -> Tensor:
    """
    Quality-aware graph regularization of the grade prototypes.

    Pairwise angles arccos(<g_i, g_j> / |g_i||g_j|) and the distances |i - j|
    are each restricted to off-diagonal entries and normalized to sum to one;
    the loss is KL(angles || distances).

    Args:
        prototypes: Grade prototypes [G, D_P]

    Returns:
        Non-negative scalar, invariant to positive rescaling of the prototypes
    """
    if prototypes.ndim != 2:
        raise DimensionError(f"Prototypes must be [G, D_P], got {prototypes.shape}")
    g = prototypes.shape[0]
    if g < 2:
        raise ConfigError(f"Graph regularization needs G >= 2, got {g}")
    norms = np.linalg.norm(prototypes.data, axis=-1)
    if np.any(norms < PROTOTYPE_MIN_NORM):
        raise DegeneratePrototypeError(f"Zero-norm grade prototype at rows {np.flatnonzero(norms < PROTOTYPE_MIN_NORM).tolist()}")

    unit = tc.l2_normalize(prototypes)
    cosines = tc.clip(tc.matmul(unit, tc.transpose(unit)), -1.0 + COSINE_CLAMP, 1.0 - COSINE_CLAMP)
    angles = tc.arccos(cosines)

    off_diagonal = np.flatnonzero(~np.eye(g, dtype=bool))
    a = tc.take(tc.reshape(angles, (g * g,)), off_diagonal)
    p_a = tc.div(a, tc.reduce_sum(a))
    d = quality_distance_matrix(g).reshape(-1)[off_diagonal]
    log_p_d = np.log(d / d.sum())
    return tc.reduce_sum(tc.mul(p_a, tc.sub(tc.log(p_a), log_p_d)))


def total_loss(parts: LossParts, weights: LossWeights) -> Tensor:
    """L = L_S + lambda_C L_C + lambda_F L_F + lambda_R L_R."""
    for name, term in (("score", parts.score), ("coarse", parts.coarse), ("fine", parts.fine), ("graph", parts.graph)):
        if not np.all(np.isfinite(term.data)):
            raise NonFiniteError(f"Non-finite {name} loss")
    total = parts.score
    total = tc.add(total, tc.mul(parts.coarse, weights.lambda_c))
    total = tc.add(total, tc.mul(parts.fine, weights.lambda_f))
    return tc.add(total, tc.mul(parts.graph, weights.lambda_r))


def compute_losses(bundle,
                   prototypes: Tensor,
                   etf: ETFMatrix,
                   scores: np.ndarray,
                   grades: np.ndarray,
                   sub_grades: np.ndarray,
                   fine_target: str = FineTarget.GROUND_TRUTH.value,
                   use_fgs: bool = True) -> LossParts:
    """
    Build the four loss terms for one batch of predictions.

    Args:
        bundle: PredictionBundle of the batch
        prototypes: Grade prototype tensor of the model
        etf: Fixed sub-grade prototypes
        scores: Ground-truth scores [N] in [0, S]
        grades: Ground-truth grade indices [N]
        sub_grades: Ground-truth sub-grade indices [N]
        fine_target: ground_truth or predicted sub-grade as fine-loss target
        use_fgs: When False the fine term is a constant zero

    Returns:
        LossParts
    """
    target_kind = FineTarget(fine_target)
    if use_fgs:
        targets = sub_grades if target_kind is FineTarget.GROUND_TRUTH else bundle.sub_grade_pred
        fine = fine_loss(bundle.h_F, targets, etf)
    else:
        fine = Tensor(0.0)
    return LossParts(
        score=score_loss(bundle.s_hat, scores),
        coarse=coarse_loss(bundle.coarse_logits, grades),
        fine=fine,
        graph=graph_reg_loss(prototypes),
    )
