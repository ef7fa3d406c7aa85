#!/usr/bin/env python3
"""
Unit tests for the Grading Module
"""

import sys
import unittest
from pathlib import Path

import numpy as np

# Add src to path
sys.path.insert(0, str(Path(__file__).parent.parent / 'src'))

from errors import ConfigError, ScoreRangeError
from grading import GradingScheme, couple, decompose, decompose_batch, denormalize_scores, normalize_scores


class TestGradingScheme(unittest.TestCase):
    """Test cases for GradingScheme construction."""

    def test_from_counts(self):
        """Test spans derived from counts."""
        scheme = GradingScheme.from_counts(100.0, 10, 10)
        self.assertAlmostEqual(scheme.grade_span, 10.0)
        self.assertAlmostEqual(scheme.sub_grade_span, 1.0)
        self.assertEqual(scheme.grades, 10)
        self.assertEqual(scheme.sub_grades, 10)

    def test_counts_survive_representation_error(self):
        """Test G and G' for spans that are not exact in binary."""
        scheme = GradingScheme.from_counts(1.0, 7, 10)
        self.assertEqual(scheme.grades, 7)
        self.assertEqual(scheme.sub_grades, 10)

    def test_invalid_spans(self):
        """Test span ordering is enforced."""
        with self.assertRaises(ConfigError):
            GradingScheme(100.0, 10.0, 20.0)
        with self.assertRaises(ConfigError):
            GradingScheme(100.0, 0.0, 0.0)
        with self.assertRaises(ConfigError):
            GradingScheme.from_counts(100.0, 1, 10)

    def test_to_dict(self):
        """Test the dictionary form."""
        scheme = GradingScheme(100.0, 10.0, 1.0)
        self.assertEqual(scheme.to_dict(), {"score_max": 100.0, "grade_span": 10.0, "sub_grade_span": 1.0})


class TestDecomposeCouple(unittest.TestCase):
    """Test cases for score decomposition and coupling."""

    def setUp(self):
        """Set up test fixtures."""
        self.scheme = GradingScheme(100.0, 10.0, 1.0)

    def test_decompose_examples(self):
        """Test representative scores."""
        self.assertEqual(decompose(32.5, self.scheme), (3, 2))
        self.assertEqual(decompose(0.0, self.scheme), (0, 0))
        self.assertEqual(decompose(99.99, self.scheme), (9, 9))

    def test_top_of_range_clamped(self):
        """Test s = S maps to the last grade and sub-grade."""
        self.assertEqual(decompose(100.0, self.scheme), (9, 9))

    def test_out_of_range(self):
        """Test scores outside [0, S]."""
        with self.assertRaises(ScoreRangeError):
            decompose(-0.5, self.scheme)
        with self.assertRaises(ScoreRangeError):
            decompose(100.5, self.scheme)
        with self.assertRaises(ScoreRangeError):
            decompose_batch(np.array([1.0, 101.0]), self.scheme)

    def test_couple_examples(self):
        """Test coupling arithmetic and clamping."""
        self.assertEqual(couple(3, 2, self.scheme), 32.0)
        self.assertEqual(couple(12, 0, self.scheme), 100.0)
        self.assertEqual(couple(-1, 0, self.scheme), 0.0)

    def test_round_trip_grid(self):
        """Test |couple(decompose(s)) - s| over a 0.01 grid of [0, 100]."""
        grid = np.arange(10001) * 0.01
        previous = -1.0
        for s in grid:
            g, j = decompose(float(s), self.scheme)
            reconstructed = couple(g, j, self.scheme)
            if s < 100.0:
                self.assertLess(abs(reconstructed - s), 1.0, msg=f"s={s}")
            else:
                # The endpoint clamps to (G-1, G'-1) and sits exactly one sub-grade below S
                self.assertLessEqual(abs(reconstructed - s), 1.0 + 1e-9)
            self.assertGreaterEqual(reconstructed, previous)
            previous = reconstructed

    def test_batch_matches_scalar(self):
        """Test decompose_batch agrees with decompose."""
        scores = np.random.default_rng(0).uniform(0.0, 100.0, 500)
        grades, subs = decompose_batch(scores, self.scheme)
        for s, g, j in zip(scores, grades, subs):
            self.assertEqual((int(g), int(j)), decompose(float(s), self.scheme))

    def test_normalized_scheme(self):
        """Test decomposition on the unit range with 7 x 10 grades."""
        scheme = GradingScheme.from_counts(1.0, 7, 10)
        self.assertEqual(decompose(1.0, scheme), (6, 9))
        self.assertEqual(decompose(0.5, scheme), (3, 5))


class TestNormalization(unittest.TestCase):
    """Test cases for raw <-> normalized scores."""

    def test_round_trip(self):
        """Test normalize then denormalize."""
        scheme = GradingScheme.from_counts(1.0, 7, 10)
        raw = np.array([0.0, 25.0, 104.5])
        normalized = normalize_scores(raw, 104.5, scheme)
        np.testing.assert_allclose(normalized, [0.0, 25.0 / 104.5, 1.0])
        np.testing.assert_allclose(denormalize_scores(normalized, 104.5, scheme), raw)

    def test_invalid_observed_max(self):
        """Test non-positive observed maximum."""
        scheme = GradingScheme.from_counts(1.0, 7, 10)
        with self.assertRaises(ConfigError):
            normalize_scores(np.array([1.0]), 0.0, scheme)


if __name__ == '__main__':
    unittest.main()
