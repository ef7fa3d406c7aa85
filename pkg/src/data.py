#!/usr/bin/env python3
"""
Data Module for the CoFInAl Scoring Head

This module handles clip-feature datasets:
- FeatureDataset: per-sample clip feature matrices with their scores
- A single-file little-endian feature format with a CRC32 trailer
- Synthetic datasets with planted grade / sub-grade structure
- Splitting, batching and training-time clip window sampling
"""

import logging
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats

from errors import ConfigError, DimensionError, FeatureFormatError
from grading import GradingScheme, decompose_batch
from tensor_core import RngStream


FEATURE_MAGIC = b"COFI"
FEATURE_VERSION = 1

# magic, version, N, C, D_C
_HEADER = struct.Struct("<4sIIII")
_U32 = struct.Struct("<I")

# Planted-structure scales of the synthetic generator
GRADE_AXIS_SCALE = 4.0
SUB_GRADE_AXIS_SCALE = 2.0
GRADE_JITTER_SCALE = 0.5
PHASE_SCALE = 0.5


@dataclass
class FeatureDataset:
    """Clip features (float32, one [C_i, D_C] matrix per sample) and raw float64 scores."""
    features: List[np.ndarray]
    scores: np.ndarray

    def __post_init__(self):
        self.features = [np.asarray(f, dtype=np.float32) for f in self.features]
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if len(self.features) != self.scores.shape[0] or self.scores.ndim != 1:
            raise DimensionError(f"{len(self.features)} feature matrices but scores of shape {self.scores.shape}")
        widths = {f.shape[1] for f in self.features if f.ndim == 2}
        if any(f.ndim != 2 for f in self.features) or len(widths) > 1:
            raise DimensionError(f"Samples must be [C, D_C] with a common D_C, got widths {sorted(widths)}")
        if not np.all(np.isfinite(self.scores)):
            raise DimensionError("Scores must be finite")

    def __len__(self) -> int:
        return len(self.features)

    @property
    def d_c(self) -> int:
        return self.features[0].shape[1] if self.features else 0

    @property
    def clip_counts(self) -> np.ndarray:
        return np.array([f.shape[0] for f in self.features], dtype=np.int64)

    @property
    def uniform_clips(self) -> Optional[int]:
        """Common clip count, or None when samples differ."""
        counts = set(self.clip_counts.tolist())
        return counts.pop() if len(counts) == 1 else None

    @property
    def score_range(self) -> Tuple[float, float]:
        return float(self.scores.min()), float(self.scores.max())

    def subset(self, indices: Sequence[int]) -> "FeatureDataset":
        return FeatureDataset([self.features[i] for i in indices], self.scores[np.asarray(indices, dtype=np.intp)])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FeatureDataset) or len(self) != len(other):
            return False
        return (np.array_equal(self.scores, other.scores)
                and all(np.array_equal(a, b) for a, b in zip(self.features, other.features)))


def write_features(path: Union[str, Path], dataset: FeatureDataset) -> None:
    """
    Write a dataset in the COFI feature format.

    Layout (little-endian): magic, u32 version, u32 N, u32 C, u32 D_C,
    [N x u32 clip counts when C = 0], float32 features sample-major,
    N float64 scores, u32 CRC32 of all preceding bytes.

    Args:
        path: Destination file
        dataset: Dataset to store
    """
    n = len(dataset)
    common = dataset.uniform_clips
    clips = common if common is not None and common > 0 else 0
    parts = [_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, n, clips, dataset.d_c)]
    if clips == 0:
        parts.append(dataset.clip_counts.astype("<u4").tobytes())
    for matrix in dataset.features:
        parts.append(np.ascontiguousarray(matrix, dtype="<f4").tobytes())
    parts.append(dataset.scores.astype("<f8").tobytes())
    payload = b"".join(parts)
    with open(path, "wb") as f:
        f.write(payload)
        f.write(_U32.pack(zlib.crc32(payload)))
    logging.info(f"Wrote {n} samples ({dataset.d_c}-dim clip features) to {path}")


def read_features(path: Union[str, Path]) -> FeatureDataset:
    """
    Read a dataset written by write_features().

    Args:
        path: Feature file

    Returns:
        FeatureDataset

    Raises:
        FeatureFormatError: bad magic, version, length or checksum
    """
    with open(path, "rb") as f:
        blob = f.read()

    if len(blob) < _HEADER.size:
        raise FeatureFormatError(f"Truncated header: expected {_HEADER.size} bytes, got {len(blob)}", len(blob))
    magic, version, n, clips, d_c = _HEADER.unpack_from(blob, 0)
    if magic != FEATURE_MAGIC:
        raise FeatureFormatError(f"Bad magic {magic!r}, expected {FEATURE_MAGIC!r}", 0)
    if version != FEATURE_VERSION:
        raise FeatureFormatError(f"Unsupported format version {version}", 4)

    offset = _HEADER.size
    if clips == 0:
        end = offset + 4 * n
        if len(blob) < end:
            raise FeatureFormatError(f"Truncated clip counts: expected {end} bytes, got {len(blob)}", len(blob))
        counts = np.frombuffer(blob, dtype="<u4", count=n, offset=offset).astype(np.int64)
        offset = end
    else:
        counts = np.full(n, clips, dtype=np.int64)

    feature_bytes = 4 * int(counts.sum()) * d_c
    expected = offset + feature_bytes + 8 * n + 4
    if len(blob) != expected:
        what = "Truncated payload" if len(blob) < expected else "Trailing bytes after payload"
        raise FeatureFormatError(f"{what}: expected {expected} bytes, got {len(blob)}", min(len(blob), expected))

    crc_offset = expected - 4
    (stored_crc,) = _U32.unpack_from(blob, crc_offset)
    if zlib.crc32(blob[:crc_offset]) != stored_crc:
        raise FeatureFormatError("CRC32 mismatch", crc_offset)

    features = []
    for count in counts:
        size = int(count) * d_c
        block = np.frombuffer(blob, dtype="<f4", count=size, offset=offset)
        features.append(block.reshape(int(count), d_c).astype(np.float32))
        offset += 4 * size
    scores = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).astype(np.float64)
    logging.info(f"Read {n} samples ({d_c}-dim clip features) from {path}")
    return FeatureDataset(features, scores)


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic dataset parameters."""
    n: int = 200
    clips: int = 5
    d_c: int = 64
    grades: int = 7
    sub_grades: int = 10
    noise_sigma: float = 0.1
    score_max: float = 100.0
    seed: int = 0

    def __post_init__(self):
        if min(self.n, self.clips, self.d_c) < 1:
            raise ConfigError(f"Synthetic N, C and D_C must be positive, got {self.n}, {self.clips}, {self.d_c}")
        if self.grades < 2 or self.sub_grades < 2:
            raise ConfigError(f"Synthetic data needs G >= 2 and G' >= 2, got {self.grades}, {self.sub_grades}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.score_max <= 0:
            raise ConfigError(f"score_max must be positive, got {self.score_max}")


def _unit_vector(rng: RngStream, d: int) -> np.ndarray:
    v = rng.normal((d,))
    norm = np.linalg.norm(v)
    return v / norm if norm > 0 else np.ones(d) / np.sqrt(d)


def synth_generate(cfg: SynthConfig, stream: int = 0) -> FeatureDataset:
    """
    Generate a dataset with planted quality structure.

    The planted structure (grade means, quality axes, clip phases) depends
    only on cfg.seed, so splits drawn with different stream tags share it.
    Each sample draws q ~ U[0, S), decomposes it into (grade, sub-grade) and
    builds every clip as

        grade_mean[grade] + (sub_grade / G') * sub_axis + phase[clip] + noise

    Args:
        cfg: Generator parameters
        stream: Tag of the sample stream (e.g. 0 for train, 1 for test)

    Returns:
        FeatureDataset with raw scores q
    """
    root = RngStream(cfg.seed)
    structure = root.child(0)
    grade_axis = _unit_vector(structure, cfg.d_c)
    sub_axis = _unit_vector(structure, cfg.d_c)
    levels = np.arange(cfg.grades)[:, None] / (cfg.grades - 1)
    grade_means = (GRADE_AXIS_SCALE * levels * grade_axis
                   + GRADE_JITTER_SCALE * structure.normal((cfg.grades, cfg.d_c)))
    phases = PHASE_SCALE * structure.normal((cfg.clips, cfg.d_c))

    samples = root.child(1).child(stream)
    scheme = GradingScheme.from_counts(cfg.score_max, cfg.grades, cfg.sub_grades)
    q = stats.uniform(0.0, cfg.score_max).rvs(size=cfg.n, random_state=samples.generator)
    q = np.minimum(q, np.nextafter(cfg.score_max, 0.0))
    grades, subs = decompose_batch(q, scheme)

    base = grade_means[grades] + SUB_GRADE_AXIS_SCALE * (subs / cfg.sub_grades)[:, None] * sub_axis
    clips = base[:, None, :] + phases[None, :, :]
    if cfg.noise_sigma > 0:
        clips = clips + stats.norm(0.0, cfg.noise_sigma).rvs(size=clips.shape, random_state=samples.generator)
    logging.info(
        f"Generated {cfg.n} synthetic samples: C={cfg.clips}, D_C={cfg.d_c}, "
        f"G={cfg.grades}, G'={cfg.sub_grades}, sigma={cfg.noise_sigma}, seed={cfg.seed}"
    )
    return FeatureDataset(list(clips), q)


def sample_clips(sample: np.ndarray, c_train: int, training: bool, rng: Optional[RngStream]) -> np.ndarray:
    """
    Training-time clip window.

    Args:
        sample: Clip features [C, D_C]
        c_train: Window length
        training: When False the sample is returned unchanged
        rng: Stream for the window start

    Returns:
        Rows [k, k + c_train) for a random k, or every row when C <= c_train
    """
    if c_train < 1:
        raise ConfigError(f"c_train must be >= 1, got {c_train}")
    count = sample.shape[0]
    if not training or count <= c_train:
        return sample
    start = rng.integers(0, count - c_train + 1)
    return sample[start:start + c_train]


def split_dataset(dataset: FeatureDataset, n_train: int, rng: RngStream) -> Tuple[FeatureDataset, FeatureDataset]:
    """Shuffle and split into (train, test) with n_train training samples."""
    if not 0 < n_train < len(dataset):
        raise ConfigError(f"n_train must lie in (0, {len(dataset)}), got {n_train}")
    order = rng.permutation(len(dataset))
    return dataset.subset(order[:n_train]), dataset.subset(order[n_train:])


def batch_indices(n: int, batch_size: int, rng: Optional[RngStream] = None) -> List[np.ndarray]:
    """
    Partition range(n) into batches, shuffled when rng is given.

    The last batch may be smaller than batch_size.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    order = rng.permutation(n) if rng is not None else np.arange(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]
