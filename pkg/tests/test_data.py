#!/usr/bin/env python3
"""
Unit tests for the Data Module
"""

import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np

# Add src to path
sys.path.insert(0, str(Path(__file__).parent.parent / 'src'))

from data import (FeatureDataset, SynthConfig, batch_indices, read_features, sample_clips, split_dataset,
                  synth_generate, write_features)
from errors import ConfigError, DimensionError, FeatureFormatError
from grading import GradingScheme, decompose_batch
from metrics import srcc
from tensor_core import RngStream


class TestFeatureFormat(unittest.TestCase):
    """Test cases for the feature file format."""

    def setUp(self):
        """Set up test fixtures."""
        self.tmp = tempfile.TemporaryDirectory()
        self.path = Path(self.tmp.name) / "features.cofi"
        self.dataset = synth_generate(SynthConfig(n=12, clips=3, d_c=8, seed=4))

    def tearDown(self):
        """Clean up test fixtures."""
        self.tmp.cleanup()

    def _corrupt(self, offset, value):
        blob = bytearray(self.path.read_bytes())
        blob[offset] = value
        self.path.write_bytes(bytes(blob))

    def test_round_trip_uniform(self):
        """Test a dataset with a common clip count survives write/read."""
        write_features(self.path, self.dataset)
        loaded = read_features(self.path)
        self.assertEqual(loaded, self.dataset)
        self.assertEqual(loaded.uniform_clips, 3)

    def test_round_trip_variable_clips(self):
        """Test ragged clip counts are stored through the count table."""
        rng = np.random.default_rng(0)
        features = [rng.normal(size=(c, 6)).astype(np.float32) for c in (1, 4, 2, 7)]
        dataset = FeatureDataset(features, [10.0, 20.5, 0.0, 99.0])
        write_features(self.path, dataset)
        loaded = read_features(self.path)
        self.assertEqual(loaded, dataset)
        self.assertIsNone(loaded.uniform_clips)
        np.testing.assert_array_equal(loaded.clip_counts, [1, 4, 2, 7])

    def test_round_trip_random_shapes(self):
        """Test random sample counts, widths and clip layouts survive write/read."""
        rng = np.random.default_rng(7)
        for trial in range(40):
            n = int(rng.integers(1, 65))
            d_c = int(rng.integers(1, 129))
            if trial % 2:
                counts = rng.integers(1, 9, size=n)
            else:
                counts = np.full(n, int(rng.integers(1, 9)))
            features = [rng.normal(size=(int(c), d_c)).astype(np.float32) for c in counts]
            dataset = FeatureDataset(features, rng.uniform(0.0, 100.0, size=n))
            write_features(self.path, dataset)
            loaded = read_features(self.path)
            self.assertEqual(loaded, dataset, msg=f"n={n}, d_c={d_c}")
            np.testing.assert_array_equal(loaded.clip_counts, counts)

    def test_file_size(self):
        """Test the uniform layout has no count table."""
        write_features(self.path, self.dataset)
        expected = 20 + 4 * 12 * 3 * 8 + 8 * 12 + 4
        self.assertEqual(self.path.stat().st_size, expected)

    def test_bad_magic(self):
        """Test a wrong magic is reported at offset 0."""
        write_features(self.path, self.dataset)
        self._corrupt(0, ord("X"))
        with self.assertRaises(FeatureFormatError) as ctx:
            read_features(self.path)
        self.assertEqual(ctx.exception.offset, 0)
        self.assertIn("magic", str(ctx.exception))

    def test_bad_version(self):
        """Test an unsupported version is reported at offset 4."""
        write_features(self.path, self.dataset)
        self._corrupt(4, 9)
        with self.assertRaises(FeatureFormatError) as ctx:
            read_features(self.path)
        self.assertEqual(ctx.exception.offset, 4)

    def test_truncated(self):
        """Test a short file reports the expected length."""
        write_features(self.path, self.dataset)
        blob = self.path.read_bytes()
        self.path.write_bytes(blob[:-10])
        with self.assertRaises(FeatureFormatError) as ctx:
            read_features(self.path)
        self.assertIn("expected", str(ctx.exception))

    def test_truncated_header(self):
        """Test a file shorter than the header."""
        self.path.write_bytes(b"COFI")
        with self.assertRaises(FeatureFormatError):
            read_features(self.path)

    def test_checksum(self):
        """Test a flipped payload byte fails the CRC check."""
        write_features(self.path, self.dataset)
        blob = self.path.read_bytes()
        self._corrupt(30, blob[30] ^ 0xFF)
        with self.assertRaises(FeatureFormatError) as ctx:
            read_features(self.path)
        self.assertIn("CRC32", str(ctx.exception))
        self.assertEqual(ctx.exception.offset, len(blob) - 4)


class TestFeatureDataset(unittest.TestCase):
    """Test cases for FeatureDataset validation."""

    def test_mismatched_scores(self):
        """Test one score per sample is required."""
        with self.assertRaises(DimensionError):
            FeatureDataset([np.zeros((2, 4))], [1.0, 2.0])

    def test_mixed_widths(self):
        """Test samples must share D_C."""
        with self.assertRaises(DimensionError):
            FeatureDataset([np.zeros((2, 4)), np.zeros((2, 5))], [1.0, 2.0])

    def test_subset(self):
        """Test subset keeps features and scores aligned."""
        dataset = FeatureDataset([np.full((1, 2), i) for i in range(4)], [0.0, 1.0, 2.0, 3.0])
        part = dataset.subset([3, 1])
        np.testing.assert_array_equal(part.scores, [3.0, 1.0])
        self.assertEqual(part.features[0][0, 0], 3.0)
        self.assertEqual(dataset.score_range, (0.0, 3.0))


class TestSynthetic(unittest.TestCase):
    """Test cases for the synthetic generator."""

    def test_deterministic(self):
        """Test the same seed and stream give identical data."""
        cfg = SynthConfig(n=30, d_c=16, seed=3)
        self.assertEqual(synth_generate(cfg), synth_generate(cfg))
        self.assertNotEqual(synth_generate(cfg, stream=0), synth_generate(cfg, stream=1))

    def test_shapes_and_range(self):
        """Test sample count, clip shape and score range."""
        dataset = synth_generate(SynthConfig(n=50, clips=4, d_c=12, seed=1))
        self.assertEqual(len(dataset), 50)
        self.assertEqual(dataset.uniform_clips, 4)
        self.assertEqual(dataset.d_c, 12)
        self.assertTrue(np.all(dataset.scores >= 0.0))
        self.assertTrue(np.all(dataset.scores < 100.0))

    def test_noise_free_cells_coincide(self):
        """Test samples sharing (grade, sub-grade) share features when noise is off."""
        cfg = SynthConfig(n=200, d_c=8, noise_sigma=0.0, seed=2)
        dataset = synth_generate(cfg)
        scheme = GradingScheme.from_counts(cfg.score_max, cfg.grades, cfg.sub_grades)
        grades, subs = decompose_batch(dataset.scores, scheme)
        seen = {}
        collisions = 0
        for i, key in enumerate(zip(grades.tolist(), subs.tolist())):
            if key in seen:
                np.testing.assert_array_equal(dataset.features[i], dataset.features[seen[key]])
                collisions += 1
            else:
                seen[key] = i
        self.assertGreater(collisions, 0)

    def test_least_squares_ranks_held_out(self):
        """Test least squares on mean clip features ranks held-out scores."""
        cfg = SynthConfig(n=200, d_c=64, seed=0)
        train, test = synth_generate(cfg, stream=0), synth_generate(cfg, stream=1)

        def design(dataset):
            pooled = np.stack([f.mean(axis=0) for f in dataset.features]).astype(np.float64)
            return np.hstack([pooled, np.ones((len(dataset), 1))])

        weights, *_ = np.linalg.lstsq(design(train), train.scores, rcond=None)
        self.assertGreater(srcc(design(test) @ weights, test.scores), 0.95)

    def test_grade_coverage(self):
        """Test every grade is populated across seeds."""
        for seed in range(20):
            cfg = SynthConfig(n=350, d_c=4, seed=seed)
            scheme = GradingScheme.from_counts(cfg.score_max, cfg.grades, cfg.sub_grades)
            grades, _ = decompose_batch(synth_generate(cfg).scores, scheme)
            self.assertEqual(set(grades.tolist()), set(range(cfg.grades)), msg=f"seed={seed}")

    def test_invalid_config(self):
        """Test parameter validation."""
        with self.assertRaises(ConfigError):
            SynthConfig(n=0)
        with self.assertRaises(ConfigError):
            SynthConfig(grades=1)
        with self.assertRaises(ConfigError):
            SynthConfig(noise_sigma=-0.1)


class TestSampling(unittest.TestCase):
    """Test cases for clip windows, splits and batches."""

    def setUp(self):
        """Set up test fixtures."""
        self.sample = np.arange(40, dtype=np.float32).reshape(10, 4)

    def test_window_is_contiguous(self):
        """Test a training window is a contiguous run of c_train clips."""
        rng = RngStream(0)
        for _ in range(20):
            window = sample_clips(self.sample, 3, True, rng)
            self.assertEqual(window.shape, (3, 4))
            start = int(window[0, 0]) // 4
            np.testing.assert_array_equal(window, self.sample[start:start + 3])

    def test_evaluation_uses_all_clips(self):
        """Test evaluation keeps every clip."""
        self.assertIs(sample_clips(self.sample, 3, False, None), self.sample)

    def test_short_sample_kept(self):
        """Test C <= c_train returns the sample unchanged."""
        self.assertEqual(sample_clips(self.sample[:2], 3, True, RngStream(0)).shape, (2, 4))

    def test_invalid_window(self):
        """Test c_train must be positive."""
        with self.assertRaises(ConfigError):
            sample_clips(self.sample, 0, True, RngStream(0))

    def test_batches_partition(self):
        """Test batches cover every index once, last batch partial."""
        batches = batch_indices(10, 4, RngStream(1))
        self.assertEqual([len(b) for b in batches], [4, 4, 2])
        self.assertEqual(sorted(np.concatenate(batches).tolist()), list(range(10)))
        np.testing.assert_array_equal(np.concatenate(batch_indices(5, 2)), np.arange(5))

    def test_split(self):
        """Test split sizes and disjointness."""
        dataset = FeatureDataset([np.full((1, 1), i) for i in range(10)], np.arange(10.0))
        train, test = split_dataset(dataset, 7, RngStream(0))
        self.assertEqual((len(train), len(test)), (7, 3))
        self.assertEqual(sorted(train.scores.tolist() + test.scores.tolist()), list(np.arange(10.0)))
        with self.assertRaises(ConfigError):
            split_dataset(dataset, 10, RngStream(0))


if __name__ == '__main__':
    unittest.main()
