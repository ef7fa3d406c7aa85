#!/usr/bin/env python3
"""
Trainer Module for the CoFInAl Scoring Head

This module binds model, losses, grading, metrics and data:
- RunConfig: immutable tree of every hyperparameter of a run
- Trainer: deterministic epoch loop (SGD with momentum, cosine schedule)
- evaluate: full-clip inference with SRCC and grade accuracy
- Checkpoints: single-file COFK format with CRC32, enough state to resume
  training bit-for-bit
- composite_grad_check: finite-difference check of the full objective
"""

import csv
import io
import json
import logging
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from data import FeatureDataset, batch_indices, sample_clips
from errors import CheckpointError, ConfigError, DimensionError, NonFiniteError, UndefinedCorrelationError
from etf import ETFMatrix
from grading import GradingScheme, decompose_batch, normalize_scores
from losses import FineTarget, LossParts, LossWeights, compute_losses, total_loss
from metrics import srcc
from model import CoFInAlHead, ModelConfig
from tensor_core import RngStream, SGDMomentum, Tensor, cosine_lr, grad_check, no_grad


CHECKPOINT_MAGIC = b"COFK"
CHECKPOINT_VERSION = 1
_U32 = struct.Struct("<I")

HISTORY_COLUMNS = ["epoch", "lr", "loss_total", "loss_s", "loss_c", "loss_f", "loss_r",
                   "train_srcc", "test_srcc", "grade_acc"]

# Recorded when SRCC is undefined for a split; stored as null in checkpoint headers
UNDEFINED_METRIC = float("nan")

# Child stream tags of the run seed
STREAM_INIT = 0
STREAM_SHUFFLE = 1
STREAM_CLIPS = 2
STREAM_DROPOUT = 3

GRADCHECK_TOLERANCE = 1e-4


@dataclass(frozen=True)
class OptimizerConfig:
    """SGD-with-momentum and schedule settings."""
    lr_max: float = 0.01
    lr_min: float = 0.0001
    momentum: float = 0.9
    weight_decay: float = 0.01
    batch_size: int = 32
    epochs: int = 200

    def __post_init__(self):
        if not 0 <= self.lr_min <= self.lr_max:
            raise ConfigError(f"Need 0 <= lr_min <= lr_max, got {self.lr_min}, {self.lr_max}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"Momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"Weight decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError(f"batch_size and epochs must be >= 1, got {self.batch_size}, {self.epochs}")


@dataclass(frozen=True)
class RunConfig:
    """Everything that determines a training run besides the data."""
    model: ModelConfig = field(default_factory=ModelConfig)
    score_max: float = 1.0
    loss: LossWeights = field(default_factory=LossWeights)
    fine_target: str = FineTarget.GROUND_TRUTH.value
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    score_max_observed: float = 100.0
    seed: int = 0

    def __post_init__(self):
        FineTarget(self.fine_target)
        if self.score_max_observed <= 0:
            raise ConfigError(f"score_max_observed must be positive, got {self.score_max_observed}")
        scheme = self.scheme
        if scheme.grades != self.model.g or scheme.sub_grades != self.model.g_prime:
            raise ConfigError(f"Score range {self.score_max} cannot host {self.model.g} x {self.model.g_prime} grades")

    @property
    def scheme(self) -> GradingScheme:
        return GradingScheme.from_counts(self.score_max, self.model.g, self.model.g_prime)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        try:
            return cls(
                model=ModelConfig(**data["model"]),
                score_max=float(data["score_max"]),
                loss=LossWeights(**data["loss"]),
                fine_target=data["fine_target"],
                optimizer=OptimizerConfig(**data["optimizer"]),
                score_max_observed=float(data["score_max_observed"]),
                seed=int(data["seed"]),
            )
        except (KeyError, TypeError) as e:
            raise ConfigError(f"Malformed run configuration: {e}")


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss_total: float
    loss_s: float
    loss_c: float
    loss_f: float
    loss_r: float
    train_srcc: float
    test_srcc: float
    grade_acc: float


@dataclass
class TrainHistory:
    """One record per completed epoch."""
    records: List[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: EpochRecord) -> None:
        self.records.append(record)

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for r in self.records:
            writer.writerow([r.epoch] + [repr(float(getattr(r, c))) for c in HISTORY_COLUMNS[1:]])
        return buffer.getvalue()

    def write_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(self.to_csv())

    def to_list(self) -> List[Dict[str, Any]]:
        return [{k: None if isinstance(v, float) and np.isnan(v) else v for k, v in asdict(r).items()}
                for r in self.records]

    @classmethod
    def from_list(cls, rows: List[Dict[str, Any]]) -> "TrainHistory":
        return cls([EpochRecord(**{k: UNDEFINED_METRIC if v is None else v for k, v in row.items()})
                    for row in rows])


@dataclass
class Checkpoint:
    """Model parameters plus all state needed to continue training."""
    config: RunConfig
    params: Dict[str, np.ndarray]
    velocities: Dict[str, np.ndarray]
    etf: np.ndarray
    epoch: int
    rng_state: Dict[str, Any]
    history: TrainHistory
    version: int = CHECKPOINT_VERSION


@dataclass
class EvaluationResult:
    """Predictions and metrics on one dataset (scores in normalized units)."""
    srcc: float
    srcc_hard: Optional[float]
    grade_accuracy: float
    scores: np.ndarray
    pred_soft: np.ndarray
    pred_hard: np.ndarray
    grades: np.ndarray
    grade_pred: np.ndarray


def build_model(cfg: RunConfig) -> CoFInAlHead:
    """Model initialized from the run seed's init stream."""
    return CoFInAlHead(cfg.model, cfg.scheme, RngStream(cfg.seed).child(STREAM_INIT))


def model_from_checkpoint(ckpt: Checkpoint) -> CoFInAlHead:
    model = build_model(ckpt.config)
    model.load_state_dict(ckpt.params)
    if ckpt.etf.shape != model.etf.E.shape:
        raise CheckpointError(f"Stored ETF shape {ckpt.etf.shape} does not match model {model.etf.E.shape}")
    E = np.array(ckpt.etf, dtype=np.float64)
    E.setflags(write=False)
    model.etf = ETFMatrix(E=E, K=model.etf.K, d=model.etf.d, seed=model.etf.seed)
    return model


def _check_dataset(dataset: FeatureDataset, cfg: RunConfig, label: str) -> None:
    if len(dataset) == 0:
        raise DimensionError(f"{label} dataset is empty")
    if dataset.d_c != cfg.model.d_c:
        raise ConfigError(f"{label} features have D_C={dataset.d_c}, model expects {cfg.model.d_c}")


def predict(model: CoFInAlHead,
            features: List[np.ndarray],
            batch_size: int = 32) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Deterministic full-clip inference returning (soft scores, hard scores, argmax grades)."""
    soft, hard, grade_pred = [], [], []
    with no_grad():
        for start in range(0, len(features), batch_size):
            bundle = model.forward_samples(features[start:start + batch_size], training=False)
            soft.append(bundle.s_hat.data)
            hard.append(bundle.s_hard)
            grade_pred.append(bundle.grade_pred)
    return np.concatenate(soft), np.concatenate(hard), np.concatenate(grade_pred)


def evaluate_model(model: CoFInAlHead, dataset: FeatureDataset, cfg: RunConfig) -> EvaluationResult:
    """
    Evaluate a model on a dataset of raw scores.

    SRCC uses the soft coupled score; grade accuracy uses argmax grades.

    Args:
        model: Head to evaluate (dropout off)
        dataset: Samples with raw scores
        cfg: Run configuration (score normalization and batch size)

    Returns:
        EvaluationResult
    """
    if len(dataset) < 2:
        raise UndefinedCorrelationError(f"Evaluation needs at least 2 samples, got {len(dataset)}")
    _check_dataset(dataset, cfg, "Evaluation")
    scheme = cfg.scheme
    scores = normalize_scores(dataset.scores, cfg.score_max_observed, scheme)
    grades, _ = decompose_batch(scores, scheme)
    pred_soft, pred_hard, grade_pred = predict(model, dataset.features, cfg.optimizer.batch_size)
    try:
        srcc_hard = srcc(pred_hard, scores)
    except UndefinedCorrelationError:
        srcc_hard = None
    return EvaluationResult(
        srcc=srcc(pred_soft, scores),
        srcc_hard=srcc_hard,
        grade_accuracy=float(np.mean(grade_pred == grades)),
        scores=scores,
        pred_soft=pred_soft,
        pred_hard=pred_hard,
        grades=grades,
        grade_pred=grade_pred,
    )


def evaluate(ckpt: Checkpoint, dataset: FeatureDataset) -> EvaluationResult:
    """Evaluate the model stored in a checkpoint."""
    return evaluate_model(model_from_checkpoint(ckpt), dataset, ckpt.config)


class Trainer:
    """Deterministic training loop for one run."""

    def __init__(self, cfg: RunConfig, resume: Optional[Checkpoint] = None):
        """
        Initialize trainer.

        Args:
            cfg: Run configuration
            resume: Checkpoint to continue from (its config must equal cfg)
        """
        self.cfg = cfg
        root = RngStream(cfg.seed)
        self.model = build_model(cfg)
        self.optimizer = SGDMomentum(self.model.parameters(), cfg.optimizer.momentum, cfg.optimizer.weight_decay)
        self.shuffle_rng = root.child(STREAM_SHUFFLE)
        self.clip_rng = root.child(STREAM_CLIPS)
        self.dropout_rng = root.child(STREAM_DROPOUT)
        self.history = TrainHistory()
        self.epoch = 0
        if resume is not None:
            self._restore(resume)

    def _restore(self, ckpt: Checkpoint) -> None:
        if ckpt.config != self.cfg:
            raise CheckpointError("Checkpoint was written with a different run configuration")
        self.model = model_from_checkpoint(ckpt)
        self.optimizer = SGDMomentum(self.model.parameters(), self.cfg.optimizer.momentum,
                                     self.cfg.optimizer.weight_decay)
        for i, (name, _) in enumerate(self.model.named_parameters()):
            self.optimizer.velocities[i] = np.array(ckpt.velocities[name], dtype=np.float64)
        self.shuffle_rng.set_state(ckpt.rng_state["shuffle"])
        self.clip_rng.set_state(ckpt.rng_state["clips"])
        self.dropout_rng.set_state(ckpt.rng_state["dropout"])
        self.history = TrainHistory.from_list(ckpt.history.to_list())
        self.epoch = ckpt.epoch
        logging.info(f"Resuming training after epoch {self.epoch}")

    def checkpoint(self) -> Checkpoint:
        names = [name for name, _ in self.model.named_parameters()]
        return Checkpoint(
            config=self.cfg,
            params=self.model.state_dict(),
            velocities={name: v.copy() for name, v in zip(names, self.optimizer.velocities)},
            etf=np.array(self.model.etf.E),
            epoch=self.epoch,
            rng_state={
                "shuffle": self.shuffle_rng.get_state(),
                "clips": self.clip_rng.get_state(),
                "dropout": self.dropout_rng.get_state(),
            },
            history=TrainHistory.from_list(self.history.to_list()),
        )

    def _batch_losses(self, features: List[np.ndarray], scores: np.ndarray) -> Tuple[Tensor, LossParts]:
        cfg = self.cfg
        scheme = cfg.scheme
        windows = [sample_clips(f, cfg.model.c_train, True, self.clip_rng) for f in features]
        bundle = self.model.forward_samples(windows, training=True, rng=self.dropout_rng)
        grades, subs = decompose_batch(scores, scheme)
        parts = compute_losses(bundle, self.model.gpm.prototypes, self.model.etf, scores, grades, subs,
                               cfg.fine_target, cfg.model.use_fgs)
        return total_loss(parts, cfg.loss), parts

    def train_epoch(self, train_set: FeatureDataset, scores: np.ndarray) -> Dict[str, float]:
        """
        Run one epoch of SGD over the training split.

        Returns:
            Sample-weighted mean of the total loss and of each part, plus the lr
        """
        opt = self.cfg.optimizer
        lr = cosine_lr(self.epoch, opt.epochs, opt.lr_max, opt.lr_min)
        sums = {"loss_total": 0.0, "loss_s": 0.0, "loss_c": 0.0, "loss_f": 0.0, "loss_r": 0.0}
        batches = batch_indices(len(train_set), opt.batch_size, self.shuffle_rng)
        for b, idx in enumerate(batches):
            try:
                self.optimizer.zero_grad()
                total, parts = self._batch_losses([train_set.features[i] for i in idx], scores[idx])
                value = total.item()
                if not np.isfinite(value):
                    raise NonFiniteError("Training loss is not finite")
                total.backward()
                self.optimizer.step(lr)
            except NonFiniteError as e:
                raise NonFiniteError(f"Training aborted: {e}", epoch=self.epoch, batch=b)
            weight = len(idx)
            sums["loss_total"] += weight * value
            for key, part in parts.values().items():
                sums[key] += weight * part
            logging.debug(f"epoch {self.epoch} batch {b}: loss={value:.6f}")
        means = {key: total / len(train_set) for key, total in sums.items()}
        means["lr"] = lr
        return means

    def train(self,
              train_set: FeatureDataset,
              test_set: FeatureDataset,
              stop_at_epoch: Optional[int] = None) -> Tuple[Checkpoint, TrainHistory]:
        """
        Train until the configured epoch count (or stop_at_epoch).

        Args:
            train_set: Training samples (raw scores)
            test_set: Held-out samples evaluated after each epoch
            stop_at_epoch: Stop once this many epochs are complete

        Returns:
            (final checkpoint, history)
        """
        cfg = self.cfg
        _check_dataset(train_set, cfg, "Training")
        _check_dataset(test_set, cfg, "Test")
        scores = normalize_scores(train_set.scores, cfg.score_max_observed, cfg.scheme)
        end = cfg.optimizer.epochs if stop_at_epoch is None else min(stop_at_epoch, cfg.optimizer.epochs)
        logging.info(f"Training {self.model.num_parameters()} parameters on {len(train_set)} samples, "
                     f"epochs {self.epoch + 1}..{end}")

        while self.epoch < end:
            means = self.train_epoch(train_set, scores)
            self.epoch += 1
            train_eval = self._evaluate_or_none(train_set)
            test_eval = self._evaluate_or_none(test_set)
            record = EpochRecord(
                epoch=self.epoch,
                lr=means["lr"],
                loss_total=means["loss_total"],
                loss_s=means["loss_s"],
                loss_c=means["loss_c"],
                loss_f=means["loss_f"],
                loss_r=means["loss_r"],
                train_srcc=train_eval.srcc if train_eval else UNDEFINED_METRIC,
                test_srcc=test_eval.srcc if test_eval else UNDEFINED_METRIC,
                grade_acc=test_eval.grade_accuracy if test_eval else UNDEFINED_METRIC,
            )
            self.history.append(record)
            logging.info(
                f"epoch {record.epoch}/{cfg.optimizer.epochs} lr={record.lr:.6f} "
                f"loss={record.loss_total:.5f} (s={record.loss_s:.5f} c={record.loss_c:.5f} "
                f"f={record.loss_f:.5f} r={record.loss_r:.5f}) "
                f"train_srcc={record.train_srcc:.4f} test_srcc={record.test_srcc:.4f} "
                f"grade_acc={record.grade_acc:.4f}"
            )
        return self.checkpoint(), self.history

    def _evaluate_or_none(self, dataset: FeatureDataset) -> Optional[EvaluationResult]:
        try:
            return evaluate_model(self.model, dataset, self.cfg)
        except UndefinedCorrelationError as e:
            logging.warning(f"SRCC undefined after epoch {self.epoch}: {e}")
            return None


def train(cfg: RunConfig,
          train_set: FeatureDataset,
          test_set: FeatureDataset,
          resume: Optional[Checkpoint] = None,
          stop_at_epoch: Optional[int] = None) -> Tuple[Checkpoint, TrainHistory]:
    """Train a fresh (or resumed) run; see Trainer.train()."""
    return Trainer(cfg, resume).train(train_set, test_set, stop_at_epoch)


def _canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def save_checkpoint(path: Union[str, Path], ckpt: Checkpoint) -> None:
    """
    Write a checkpoint.

    Layout (little-endian): magic "COFK", u32 version, u32 header length,
    UTF-8 JSON header, float64 blobs (parameters, then velocities, then the
    ETF) in the order listed in the header, u32 CRC32 of all preceding bytes.
    """
    names = list(ckpt.params)
    header = {
        "config": ckpt.config.to_dict(),
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "history": ckpt.history.to_list(),
        "tensors": [{"name": n, "shape": list(ckpt.params[n].shape)} for n in names],
        "etf_shape": list(ckpt.etf.shape),
    }
    header_bytes = _canonical_json(header)
    parts = [CHECKPOINT_MAGIC, _U32.pack(ckpt.version), _U32.pack(len(header_bytes)), header_bytes]
    parts += [np.ascontiguousarray(ckpt.params[n], dtype="<f8").tobytes() for n in names]
    parts += [np.ascontiguousarray(ckpt.velocities[n], dtype="<f8").tobytes() for n in names]
    parts.append(np.ascontiguousarray(ckpt.etf, dtype="<f8").tobytes())
    payload = b"".join(parts)
    with open(path, "wb") as f:
        f.write(payload)
        f.write(_U32.pack(zlib.crc32(payload)))
    logging.info(f"Saved checkpoint (epoch {ckpt.epoch}) to {path}")


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """
    Read a checkpoint written by save_checkpoint().

    Raises:
        CheckpointError: bad magic, unsupported version, truncation or CRC mismatch
    """
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 16 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    (version,) = _U32.unpack_from(blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"Incompatible checkpoint version {version} (supported: {CHECKPOINT_VERSION})")
    (stored_crc,) = _U32.unpack_from(blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) != stored_crc:
        raise CheckpointError(f"CRC32 mismatch in {path}: checkpoint is corrupted")

    (header_len,) = _U32.unpack_from(blob, 8)
    offset = 12 + header_len
    try:
        header = json.loads(blob[12:offset].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Unreadable checkpoint header: {e}")

    def read_block(shape: List[int]) -> np.ndarray:
        nonlocal offset
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * count
        if end > len(blob) - 4:
            raise CheckpointError(f"Checkpoint truncated at byte {offset}")
        block = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset = end
        return block

    tensors = header["tensors"]
    params = {t["name"]: read_block(t["shape"]) for t in tensors}
    velocities = {t["name"]: read_block(t["shape"]) for t in tensors}
    etf = read_block(header["etf_shape"])
    if offset != len(blob) - 4:
        raise CheckpointError(f"Unexpected {len(blob) - 4 - offset} trailing bytes in checkpoint")
    logging.info(f"Loaded checkpoint (epoch {header['epoch']}) from {path}")
    return Checkpoint(
        config=RunConfig.from_dict(header["config"]),
        params=params,
        velocities=velocities,
        etf=etf,
        epoch=int(header["epoch"]),
        rng_state=header["rng_state"],
        history=TrainHistory.from_list(header["history"]),
        version=version,
    )


def toy_run_config(seed: int = 0) -> RunConfig:
    """Small configuration used for gradient checking (C=4, P=2, G=3, G'=4, D_C=16, D_P=8, D_S=8)."""
    model = ModelConfig(d_c=16, d_p=8, d_s=8, c_train=4, p=2, g=3, g_prime=4, dropout_p=0.0)
    return RunConfig(model=model, score_max=1.0, seed=seed)


def composite_grad_check(cfg: RunConfig,
                         clips: np.ndarray,
                         scores: np.ndarray,
                         eps: float = 1e-5) -> Dict[str, float]:
    """
    Finite-difference check of the composite objective for every parameter.

    Args:
        cfg: Run configuration (the model is built from its seed)
        clips: Clip features [N, C, D_C]
        scores: Normalized scores [N]
        eps: Central-difference step

    Returns:
        Parameter name -> max relative error
    """
    model = build_model(cfg)
    scheme = cfg.scheme
    grades, subs = decompose_batch(scores, scheme)

    def objective(_: Tensor) -> Tensor:
        bundle = model.forward(clips, training=False)
        parts = compute_losses(bundle, model.gpm.prototypes, model.etf, scores, grades, subs,
                               cfg.fine_target, cfg.model.use_fgs)
        return total_loss(parts, cfg.loss)

    errors = {}
    for name, param in model.named_parameters():
        errors[name] = grad_check(objective, param, eps)
        for other in model.parameters():
            other.grad = None
    return errors


def with_overrides(cfg: RunConfig, **changes: Any) -> RunConfig:
    """Copy of cfg with model-level fields (p, g, g_prime, ...) or top-level fields replaced."""
    model_fields = {f.name for f in fields(ModelConfig)}
    model_changes = {k: v for k, v in changes.items() if k in model_fields}
    top_changes = {k: v for k, v in changes.items() if k not in model_fields}
    model = replace(cfg.model, **model_changes) if model_changes else cfg.model
    return replace(cfg, model=model, **top_changes)
