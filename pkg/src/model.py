#!/usr/bin/env python3
"""
Model Module for the CoFInAl Scoring Head

This module implements the coarse-to-fine scoring head on clip features:
- TFM: pooled-query self-attention fusing C clips into P procedure features
- GPM: grade prototypes cross-attend to procedures, yielding coarse responses
  H_C, a grade mask M and masked fine residuals H_F
- Coarse head: MLP classifier over H_C producing grade logits
- FGS: pooled fine feature scored against a fixed simplex ETF
- Coupling of the soft grade and sub-grade expectations into a score

Every block works on a leading batch axis; a single sample is a batch of one.
"""

import logging
from dataclasses import asdict, dataclass, fields
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import tensor_core as tc
from errors import ConfigError, DimensionError
from etf import ETFMatrix, build_etf
from grading import GradingScheme
from tensor_core import RngStream, Tensor


class AlignMode(Enum):
    """Target ranges for per-vector feature alignment."""
    FEATURE_DIM = 0    # [0, D_C]
    SYMMETRIC = 1      # [-1, 1]
    UNIT = 2           # [0, 1]


class Activation(Enum):
    """Hidden-layer activations of the coarse head."""
    RELU = "relu"
    SIGMOID = "sigmoid"
    LEAKY_RELU = "leaky_relu"
    RELU_SHIFTED = "relu_shifted"


# Negative slope of leaky_relu and threshold of relu_shifted
LEAKY_SLOPE = 0.01
RELU_SHIFT = 0.5

# Pooled fine features with a smaller norm are treated as degenerate
DEGENERATE_NORM = 1e-12

# Prototype init scale
PROTOTYPE_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    """Head dimensions and switches (defaults are full-size backbone dimensions)."""
    d_c: int = 1024
    d_p: int = 512
    d_s: int = 256
    c_train: int = 5
    p: int = 5
    g: int = 7
    g_prime: int = 10
    dropout_p: float = 0.3
    align_mode: int = 1
    activation_mode: str = "leaky_relu"
    use_tfm: bool = True
    use_fgs: bool = True

    def __post_init__(self):
        for field in ("d_c", "d_p", "d_s", "c_train", "p"):
            if getattr(self, field) < 1:
                raise ConfigError(f"Model dimension {field} must be >= 1, got {getattr(self, field)}")
        if self.g < 2 or self.g_prime < 2:
            raise ConfigError(f"Model needs G >= 2 and G' >= 2, got G={self.g}, G'={self.g_prime}")
        if self.d_s < self.g_prime:
            raise ConfigError(f"D_S ({self.d_s}) must be >= G' ({self.g_prime}) to host the ETF")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"Dropout probability must lie in [0, 1), got {self.dropout_p}")
        try:
            AlignMode(self.align_mode)
            Activation(self.activation_mode)
        except ValueError as e:
            raise ConfigError(str(e))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TFMWeights:
    """Affine maps of the temporal fusion module."""
    w_q: Tensor    # D_C -> P * D_P
    b_q: Tensor
    w_k: Tensor    # D_C -> D_P
    b_k: Tensor
    w_v: Tensor    # D_C -> D_P
    b_v: Tensor


@dataclass
class GPMWeights:
    """Grade prototypes and the affine maps of the grade parsing module."""
    prototypes: Tensor   # G x D_P, rows g_1..g_G
    w_q: Tensor          # D_P -> D_S, applied to the prototypes
    b_q: Tensor
    w_k: Tensor          # D_P -> D_S, applied to procedure features
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor


@dataclass
class CoarseHeadWeights:
    """One-hidden-layer MLP classifier: G * D_S -> D_S -> G."""
    w_hidden: Tensor
    b_hidden: Tensor
    w_out: Tensor
    b_out: Tensor


@dataclass
class PredictionBundle:
    """
    Batched predictions of the head.

    Tensors keep their graph so losses can be built on them; numpy fields
    are detached reporting values.
    """
    coarse_logits: Tensor       # N x G
    coarse_probs: Tensor        # N x G
    fine_similarities: Tensor   # N x G'
    h_F: Tensor                 # N x D_S pooled fine feature
    h_F_unit: Tensor            # N x D_S normalized pooled fine feature
    mask: Tensor                # N x G grade mask
    s_hat_C: Tensor             # N expected grade index
    s_hat_F: Tensor             # N expected sub-grade index
    s_hat: Tensor               # N coupled score
    degenerate: np.ndarray      # N flags for vanishing pooled fine features
    grade_pred: np.ndarray      # N argmax grade
    sub_grade_pred: np.ndarray  # N argmax sub-grade
    s_hard: np.ndarray          # N hard-coupled score clamped to [0, S]


def activation(x: Tensor, mode: str) -> Tensor:
    """
    Apply one of the supported activations.

    Args:
        x: Input tensor
        mode: relu, sigmoid, leaky_relu or relu_shifted (max(0, x - 0.5))

    Returns:
        Activated tensor
    """
    kind = Activation(mode)
    if kind is Activation.RELU:
        return tc.relu(x)
    if kind is Activation.SIGMOID:
        return tc.sigmoid(x)
    if kind is Activation.LEAKY_RELU:
        return tc.leaky_relu(x, LEAKY_SLOPE)
    return tc.relu(tc.sub(x, RELU_SHIFT))


def alignment_range(mode: int, d_c: int) -> Tuple[float, float]:
    kind = AlignMode(mode)
    if kind is AlignMode.FEATURE_DIM:
        return 0.0, float(d_c)
    if kind is AlignMode.SYMMETRIC:
        return -1.0, 1.0
    return 0.0, 1.0


def align_features(h: Tensor, mode: int, d_c: int) -> Tensor:
    """
    Min-max align each vector (last axis) onto the range selected by mode.

    Mode 0 maps onto [0, D_C], mode 1 onto [-1, 1] and mode 2 onto [0, 1].
    Constant vectors map to the range midpoint.
    """
    low, high = alignment_range(mode, d_c)
    return tc.minmax_scale(h, low, high)


def tfm_forward(H: Tensor, w: TFMWeights, p: int) -> Tensor:
    """
    Temporal fusion of clip features into procedure features.

    The per-clip query Q_T (C x P x D_P) is averaged over clips to
    Q~_T (P x D_P), which attends over the clip keys and values.

    Args:
        H: Clip features [N, C, D_C]
        w: TFM weights
        p: Procedure count P

    Returns:
        Procedure features [N, P, D_P]
    """
    if H.ndim != 3:
        raise DimensionError(f"TFM expects [N, C, D_C] input, got {H.shape}")
    n, c, _ = H.shape
    if c == 0:
        raise DimensionError("TFM received a sample with no clips")
    d_p = w.w_k.shape[1]
    K = tc.affine_map(H, w.w_k, w.b_k)
    V = tc.affine_map(H, w.w_v, w.b_v)
    Q = tc.affine_map(H, w.w_q, w.b_q)                       # N x C x (P * D_P)
    Q_pooled = tc.reshape(tc.avg_pool(Q, axis=1), (n, p, d_p))
    return tc.scaled_dot_attention(Q_pooled, K, V)


def gpm_forward(w: GPMWeights, H_tilde: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
    """
    Grade parsing: split procedure features into coarse and fine parts.

    H_C = softmax(Q_G K_G^T / sqrt(D_S)) V_G
    M = softmax over grades of the feature-mean of H_C
    H_F = M * (H_C - Q_G), M broadcast across features

    The residual subtracts the prototype embedding Q_G, which lives in the
    same D_S space as H_C.

    Args:
        w: GPM weights (holding the grade prototypes)
        H_tilde: Procedure features [N, P, D_P]

    Returns:
        (H_C [N, G, D_S], H_F [N, G, D_S], M [N, G])
    """
    Q_G = tc.affine_map(w.prototypes, w.w_q, w.b_q)          # G x D_S
    K_G = tc.affine_map(H_tilde, w.w_k, w.b_k)               # N x P x D_S
    V_G = tc.affine_map(H_tilde, w.w_v, w.b_v)
    H_C = tc.scaled_dot_attention(Q_G, K_G, V_G)             # N x G x D_S
    M = tc.softmax(tc.avg_pool(H_C, axis=-1), axis=-1)       # N x G
    n, g = M.shape
    H_F = tc.mul(tc.reshape(M, (n, g, 1)), tc.sub(H_C, Q_G))
    return H_C, H_F, M


def coarse_head(H_C: Tensor,
                w: CoarseHeadWeights,
                activation_mode: str,
                dropout_p: float = 0.0,
                rng: Optional[RngStream] = None,
                training: bool = False) -> Tensor:
    """Flatten H_C, apply the hidden layer (activation + dropout) and emit G logits."""
    n = H_C.shape[0]
    flat = tc.reshape(H_C, (n, -1))
    hidden = activation(tc.affine_map(flat, w.w_hidden, w.b_hidden), activation_mode)
    if training:
        hidden = tc.dropout(hidden, dropout_p, rng, training)
    return tc.affine_map(hidden, w.w_out, w.b_out)


def fgs_forward(H_F: Tensor, etf: ETFMatrix) -> Tuple[Tensor, Tensor, Tensor, np.ndarray]:
    """
    Fine-grained scoring against the fixed ETF prototypes.

    Args:
        H_F: Fine features [N, G, D_S] (already aligned)
        etf: Fixed sub-grade prototypes (G' x D_S)

    Returns:
        (fine_similarities [N, G'], h_F [N, D_S], h_F normalized [N, D_S],
         degenerate flags [N])
    """
    if H_F.shape[-1] != etf.d:
        raise ConfigError(f"Fine feature width {H_F.shape[-1]} does not match ETF dimension {etf.d}")
    h_F = tc.avg_pool(H_F, axis=-2)
    degenerate = np.linalg.norm(h_F.data, axis=-1) < DEGENERATE_NORM
    h_unit = tc.l2_normalize(h_F, DEGENERATE_NORM)
    similarities = tc.matmul(h_unit, tc.transpose(etf.as_tensor()))
    return similarities, h_F, h_unit, degenerate


def expected_index(probs: Tensor) -> Tensor:
    """Sum_k k * probs_k along the last axis."""
    return tc.reduce_sum(tc.mul(probs, np.arange(probs.shape[-1], dtype=np.float64)), axis=-1)


class CoFInAlHead:
    """Coarse-to-fine scoring head with its parameters and fixed ETF."""

    def __init__(self, config: ModelConfig, scheme: GradingScheme, rng: RngStream):
        """
        Initialize the head.

        Args:
            config: Model configuration
            scheme: Grading scheme (must agree with config.g / config.g_prime)
            rng: Stream used for parameter initialization and the ETF rotation
        """
        if scheme.grades != config.g or scheme.sub_grades != config.g_prime:
            raise ConfigError(
                f"Grading scheme ({scheme.grades} x {scheme.sub_grades}) disagrees with "
                f"model config ({config.g} x {config.g_prime})"
            )
        self.config = config
        self.scheme = scheme

        init_rng = rng.child(0)
        c = config
        w_q, b_q = tc.init_affine(init_rng, c.d_c, c.p * c.d_p, "tfm.query")
        w_k, b_k = tc.init_affine(init_rng, c.d_c, c.d_p, "tfm.key")
        w_v, b_v = tc.init_affine(init_rng, c.d_c, c.d_p, "tfm.value")
        self.tfm = TFMWeights(w_q, b_q, w_k, b_k, w_v, b_v)

        prototypes = Tensor(init_rng.normal((c.g, c.d_p), PROTOTYPE_STD), requires_grad=True,
                            name="gpm.prototypes")
        gq, gbq = tc.init_affine(init_rng, c.d_p, c.d_s, "gpm.query")
        gk, gbk = tc.init_affine(init_rng, c.d_p, c.d_s, "gpm.key")
        gv, gbv = tc.init_affine(init_rng, c.d_p, c.d_s, "gpm.value")
        self.gpm = GPMWeights(prototypes, gq, gbq, gk, gbk, gv, gbv)

        wh, bh = tc.init_affine(init_rng, c.g * c.d_s, c.d_s, "head.hidden")
        wo, bo = tc.init_affine(init_rng, c.d_s, c.g, "head.out")
        self.head = CoarseHeadWeights(wh, bh, wo, bo)

        self.etf = build_etf(c.d_s, c.g_prime, rng.child(1))
        logging.info(
            f"CoFInAlHead initialized: D_C={c.d_c}, D_P={c.d_p}, D_S={c.d_s}, P={c.p}, "
            f"G={c.g}, G'={c.g_prime}, {self.num_parameters()} parameters"
        )

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        """Trainable tensors in their fixed declaration order."""
        return [
            ("tfm.w_q", self.tfm.w_q), ("tfm.b_q", self.tfm.b_q),
            ("tfm.w_k", self.tfm.w_k), ("tfm.b_k", self.tfm.b_k),
            ("tfm.w_v", self.tfm.w_v), ("tfm.b_v", self.tfm.b_v),
            ("gpm.prototypes", self.gpm.prototypes),
            ("gpm.w_q", self.gpm.w_q), ("gpm.b_q", self.gpm.b_q),
            ("gpm.w_k", self.gpm.w_k), ("gpm.b_k", self.gpm.b_k),
            ("gpm.w_v", self.gpm.w_v), ("gpm.b_v", self.gpm.b_v),
            ("head.w_hidden", self.head.w_hidden), ("head.b_hidden", self.head.b_hidden),
            ("head.w_out", self.head.w_out), ("head.b_out", self.head.b_out),
        ]

    def parameters(self) -> List[Tensor]:
        return [t for _, t in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        """Copy parameter values in; names and shapes must match exactly."""
        for name, tensor in self.named_parameters():
            if name not in state:
                raise DimensionError(f"Missing parameter {name}")
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != tensor.shape:
                raise DimensionError(f"Parameter {name}: shape {value.shape} != {tensor.shape}")
            tensor.data = value.copy()

    def _procedures(self, H: Tensor) -> Tensor:
        if self.config.use_tfm:
            return tfm_forward(H, self.tfm, self.config.p)
        # Without temporal fusion every clip is its own procedure
        return tc.affine_map(H, self.tfm.w_v, self.tfm.b_v)

    def forward(self, clips: np.ndarray, training: bool = False, rng: Optional[RngStream] = None) -> PredictionBundle:
        """
        Run the full head on a batch of equally long clip sequences.

        Args:
            clips: Clip features [N, C, D_C] (or [C, D_C] for one sample)
            training: Enables dropout
            rng: Dropout stream (required when training with dropout)

        Returns:
            PredictionBundle for the batch
        """
        c = self.config
        clips = np.asarray(clips, dtype=np.float64)
        if clips.ndim == 2:
            clips = clips[None]
        if clips.ndim != 3 or clips.shape[-1] != c.d_c:
            raise DimensionError(f"Expected clip features [N, C, {c.d_c}], got {clips.shape}")
        if clips.shape[1] == 0:
            raise DimensionError("Sample with no clips")
        if training and c.dropout_p > 0 and rng is None:
            raise ConfigError("Training with dropout needs a random stream")
        n = clips.shape[0]

        H_tilde = self._procedures(Tensor(clips))
        if training:
            H_tilde = tc.dropout(H_tilde, c.dropout_p, rng, training)
        H_C, H_F, M = gpm_forward(self.gpm, H_tilde)

        logits = coarse_head(H_C, self.head, c.activation_mode, c.dropout_p, rng, training)
        coarse_probs = tc.softmax(logits, axis=-1)
        s_hat_C = expected_index(coarse_probs)

        aligned = align_features(H_F, c.align_mode, c.d_c)
        similarities, h_F, h_unit, degenerate = fgs_forward(aligned, self.etf)
        if c.use_fgs:
            s_hat_F = expected_index(tc.softmax(similarities, axis=-1))
        else:
            s_hat_F = Tensor(np.full(n, 0.5 * (c.g_prime - 1)))

        s_hat = tc.add(tc.mul(s_hat_C, self.scheme.grade_span), tc.mul(s_hat_F, self.scheme.sub_grade_span))

        grade_pred = np.argmax(logits.data, axis=-1)
        sub_grade_pred = np.argmax(similarities.data, axis=-1)
        if not c.use_fgs:
            sub_grade_pred = np.full(n, (c.g_prime - 1) // 2)
        s_hard = np.clip(grade_pred * self.scheme.grade_span + sub_grade_pred * self.scheme.sub_grade_span,
                         0.0, self.scheme.score_max)

        return PredictionBundle(
            coarse_logits=logits,
            coarse_probs=coarse_probs,
            fine_similarities=similarities,
            h_F=h_F,
            h_F_unit=h_unit,
            mask=M,
            s_hat_C=s_hat_C,
            s_hat_F=s_hat_F,
            s_hat=s_hat,
            degenerate=degenerate,
            grade_pred=grade_pred,
            sub_grade_pred=sub_grade_pred,
            s_hard=s_hard,
        )

    def forward_samples(self,
                        samples: Sequence[np.ndarray],
                        training: bool = False,
                        rng: Optional[RngStream] = None) -> PredictionBundle:
        """
        Run the head on samples whose clip counts may differ.

        Samples are grouped by clip count, each group runs as one batch and
        the results are gathered back into input order.

        Args:
            samples: Clip feature matrices [C_i, D_C]
            training: Enables dropout
            rng: Dropout stream

        Returns:
            PredictionBundle with one row per sample, in input order
        """
        if len(samples) == 0:
            raise DimensionError("Empty batch")
        groups: Dict[int, List[int]] = {}
        for i, sample in enumerate(samples):
            if np.ndim(sample) != 2:
                raise DimensionError(f"Sample {i} must be [C, D_C], got shape {np.shape(sample)}")
            groups.setdefault(np.shape(sample)[0], []).append(i)
        if len(groups) == 1:
            return self.forward(np.stack(samples), training=training, rng=rng)

        bundles = []
        order: List[int] = []
        for count in sorted(groups):
            members = groups[count]
            bundles.append(self.forward(np.stack([samples[i] for i in members]), training=training, rng=rng))
            order.extend(members)
        inverse = np.argsort(order)

        merged = {}
        for field in fields(PredictionBundle):
            parts = [getattr(b, field.name) for b in bundles]
            if isinstance(parts[0], Tensor):
                merged[field.name] = tc.take(tc.concat(parts, axis=0), inverse, axis=0)
            else:
                merged[field.name] = np.concatenate(parts)[inverse]
        return PredictionBundle(**merged)


def model_forward(clips: np.ndarray,
                  model: CoFInAlHead,
                  training: bool = False,
                  rng: Optional[RngStream] = None) -> PredictionBundle:
    """Functional entry point: run model on one sample [C, D_C] or a batch [N, C, D_C]."""
    return model.forward(clips, training=training, rng=rng)
