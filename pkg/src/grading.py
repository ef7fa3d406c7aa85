#!/usr/bin/env python3
"""
Grading Module for the CoFInAl Scoring Head

Score-space arithmetic shared by training and reporting:
- GradingScheme: score range S split into G grades of span S_C, each split
  into G' sub-grades of span S_F
- decompose: ground-truth score -> (grade, sub-grade) supervision targets
- couple: (grade, sub-grade) values -> score
- normalize_scores / denormalize_scores: raw dataset units <-> [0, S]
"""

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from errors import ConfigError, ScoreRangeError


# Guards floor/ceil against representation error (e.g. 1 / (1/7) = 7.000000000000001)
_SNAP = 1e-9


@dataclass(frozen=True)
class GradingScheme:
    """Uniform grade / sub-grade partition of the score range [0, S]."""
    score_max: float
    grade_span: float
    sub_grade_span: float

    def __post_init__(self):
        if not 0 < self.sub_grade_span <= self.grade_span <= self.score_max:
            raise ConfigError(
                f"Grading needs 0 < S_F <= S_C <= S, got S={self.score_max}, "
                f"S_C={self.grade_span}, S_F={self.sub_grade_span}"
            )
        if self.grades < 2 or self.sub_grades < 2:
            raise ConfigError(f"Grading needs G >= 2 and G' >= 2, got G={self.grades}, G'={self.sub_grades}")

    @classmethod
    def from_counts(cls, score_max: float, grades: int, sub_grades: int) -> "GradingScheme":
        """Scheme with S_C = S / G and S_F = S_C / G'."""
        if grades < 2 or sub_grades < 2:
            raise ConfigError(f"Grading needs G >= 2 and G' >= 2, got G={grades}, G'={sub_grades}")
        grade_span = score_max / grades
        return cls(score_max, grade_span, grade_span / sub_grades)

    @property
    def grades(self) -> int:
        """G = ceil(S / S_C)."""
        return int(math.ceil(self.score_max / self.grade_span - _SNAP))

    @property
    def sub_grades(self) -> int:
        """G' = ceil(S_C / S_F)."""
        return int(math.ceil(self.grade_span / self.sub_grade_span - _SNAP))

    @property
    def max_coupled(self) -> float:
        """Largest score couple() can produce from class indices."""
        return (self.grades - 1) * self.grade_span + (self.sub_grades - 1) * self.sub_grade_span

    def to_dict(self) -> dict:
        return {"score_max": self.score_max, "grade_span": self.grade_span, "sub_grade_span": self.sub_grade_span}


def decompose(s: float, scheme: GradingScheme) -> Tuple[int, int]:
    """
    Split a score into its grade and sub-grade indices.

    grade = min(floor(s / S_C), G - 1)
    sub_grade = min(floor((s - grade * S_C) / S_F), G' - 1)

    Args:
        s: Score in [0, S]
        scheme: Grading scheme

    Returns:
        (grade, sub_grade)
    """
    if not 0.0 <= s <= scheme.score_max:
        raise ScoreRangeError(f"Score {s} outside [0, {scheme.score_max}]")
    grade = min(max(int(math.floor(s / scheme.grade_span + _SNAP)), 0), scheme.grades - 1)
    residual = s - grade * scheme.grade_span
    sub_grade = min(max(int(math.floor(residual / scheme.sub_grade_span + _SNAP)), 0), scheme.sub_grades - 1)
    return grade, sub_grade


def decompose_batch(scores: np.ndarray, scheme: GradingScheme) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized decompose() returning integer arrays of grades and sub-grades."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size and (scores.min() < 0.0 or scores.max() > scheme.score_max):
        raise ScoreRangeError(
            f"Scores span [{scores.min()}, {scores.max()}], outside [0, {scheme.score_max}]"
        )
    grades = np.clip(np.floor(scores / scheme.grade_span + _SNAP), 0, scheme.grades - 1).astype(np.int64)
    residual = scores - grades * scheme.grade_span
    sub_grades = np.clip(np.floor(residual / scheme.sub_grade_span + _SNAP), 0, scheme.sub_grades - 1)
    return grades, sub_grades.astype(np.int64)


def couple(grade_value: float, sub_grade_value: float, scheme: GradingScheme) -> float:
    """Reconstruct a score as grade * S_C + sub_grade * S_F, clamped to [0, S]."""
    score = grade_value * scheme.grade_span + sub_grade_value * scheme.sub_grade_span
    return float(min(max(score, 0.0), scheme.score_max))


def normalize_scores(raw: np.ndarray, observed_max: float, scheme: GradingScheme) -> np.ndarray:
    """
    Map raw dataset scores linearly onto [0, S].

    Args:
        raw: Scores in dataset units
        observed_max: Raw value that maps to S
        scheme: Grading scheme providing S

    Returns:
        raw * S / observed_max
    """
    if observed_max <= 0:
        raise ConfigError(f"Observed score maximum must be positive, got {observed_max}")
    return np.asarray(raw, dtype=np.float64) * (scheme.score_max / observed_max)


def denormalize_scores(normalized: np.ndarray, observed_max: float, scheme: GradingScheme) -> np.ndarray:
    """Inverse of normalize_scores()."""
    if observed_max <= 0:
        raise ConfigError(f"Observed score maximum must be positive, got {observed_max}")
    return np.asarray(normalized, dtype=np.float64) * (observed_max / scheme.score_max)
