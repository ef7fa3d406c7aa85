#!/usr/bin/env python3
"""
Unit tests for the command-line front end
"""

import csv
import io
import json
import os
import sys
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

# Add src to path
sys.path.insert(0, str(Path(__file__).parent.parent / 'src'))

from data import FeatureDataset, SynthConfig, read_features, synth_generate, write_features
from main import build_parser, main


SMALL_CONFIG = """
[model]
d_c = 16
d_p = 8
d_s = 8
c_train = 4
p = 2
dropout_p = 0.3

[grading]
grades = 3
sub_grades = 4

[optimizer]
batch_size = 8
epochs = 2

[data]
synth_n_train = 16
synth_n_test = 8
synth_clips = 5

[misc]
log_level = WARNING
log_to_console = false
"""


def run_cli(argv):
    """Run main() and capture stdout."""
    with patch('sys.stdout', new_callable=io.StringIO) as stdout:
        code = main(argv)
    return code, stdout.getvalue()


class TestParser(unittest.TestCase):
    """Test cases for argument parsing."""

    def test_global_flags(self):
        """Test global flags precede the subcommand."""
        args = build_parser().parse_args(['--seed', '3', '--set', 'model.p=1', 'fisher-z', '0.5'])
        self.assertEqual(args.seed, 3)
        self.assertEqual(args.set, ['model.p=1'])
        self.assertEqual(args.values, [0.5])

    def test_unknown_command(self):
        """Test argparse errors map to exit status 2."""
        with patch('sys.stderr', new_callable=io.StringIO):
            self.assertEqual(main(['bogus']), 2)


class TestUtilityCommands(unittest.TestCase):
    """Test cases for srcc, fisher-z, verify-etf and gradcheck."""

    def setUp(self):
        """Set up test fixtures."""
        self.tmp = tempfile.TemporaryDirectory()
        self.config_path = os.path.join(self.tmp.name, 'config.ini')
        with open(self.config_path, 'w') as f:
            f.write(SMALL_CONFIG)

    def tearDown(self):
        """Clean up test fixtures."""
        self.tmp.cleanup()

    def test_fisher_z(self):
        """Test Fisher-z averaging from the command line."""
        code, out = run_cli(['--config', self.config_path, 'fisher-z', '0.716', '0.843'])
        self.assertEqual(code, 0)
        self.assertAlmostEqual(float(out), 0.788, delta=0.001)

    def test_srcc_csv(self):
        """Test SRCC of a two-column CSV with a header."""
        path = os.path.join(self.tmp.name, 'pairs.csv')
        with open(path, 'w') as f:
            f.write("pred,truth\n1,1\n2,3\n3,2\n4,4\n")
        code, out = run_cli(['--config', self.config_path, 'srcc', path])
        self.assertEqual(code, 0)
        rho, n = out.split()
        self.assertAlmostEqual(float(rho), 0.8, places=12)
        self.assertEqual(int(n), 4)

    def test_srcc_identical_columns(self):
        """Test identical columns print exactly 1.0."""
        path = os.path.join(self.tmp.name, 'same.csv')
        with open(path, 'w') as f:
            f.write("3.5,3.5\n1.0,1.0\n2.25,2.25\n9.0,9.0\n")
        code, out = run_cli(['--config', self.config_path, 'srcc', path])
        self.assertEqual(code, 0)
        self.assertEqual(out.strip(), '1.0\t4')

    def test_srcc_whitespace(self):
        """Test SRCC of a whitespace-separated file."""
        path = os.path.join(self.tmp.name, 'pairs.txt')
        with open(path, 'w') as f:
            f.write("0.1 10\n0.2 20\n0.3 30\n")
        code, out = run_cli(['--config', self.config_path, 'srcc', path])
        self.assertEqual(code, 0)
        rho, n = out.split()
        self.assertAlmostEqual(float(rho), 1.0, places=12)
        self.assertEqual(int(n), 3)

    def test_srcc_undefined(self):
        """Test constant columns exit with status 1."""
        path = os.path.join(self.tmp.name, 'flat.csv')
        with open(path, 'w') as f:
            f.write("1,1\n1,2\n1,3\n")
        with patch('sys.stderr', new_callable=io.StringIO) as stderr:
            code, _ = run_cli(['--config', self.config_path, 'srcc', path])
        self.assertEqual(code, 1)
        self.assertIn('UndefinedCorrelationError', stderr.getvalue())

    def test_srcc_swapped_pair(self):
        """Test one adjacent swap among five values gives 0.9."""
        path = os.path.join(self.tmp.name, 'swap.csv')
        with open(path, 'w') as f:
            f.write("1,1\n2,2\n3,3\n5,4\n4,5\n")
        code, out = run_cli(['--config', self.config_path, 'srcc', path])
        self.assertEqual(code, 0)
        rho, n = out.split()
        self.assertAlmostEqual(float(rho), 0.9, places=12)
        self.assertEqual(n, '5')

    def test_srcc_single_column(self):
        """Test a one-column file is rejected as having too few columns."""
        path = os.path.join(self.tmp.name, 'one.csv')
        with open(path, 'w') as f:
            f.write("1\n2\n3\n4\n")
        with patch('sys.stderr', new_callable=io.StringIO) as stderr:
            code, _ = run_cli(['--config', self.config_path, 'srcc', path])
        self.assertEqual(code, 1)
        self.assertIn('needs two columns, found 1', stderr.getvalue())

    def test_srcc_single_row(self):
        """Test a one-row two-column file reaches the correlation and is undefined."""
        path = os.path.join(self.tmp.name, 'row.csv')
        with open(path, 'w') as f:
            f.write("1,2\n")
        with patch('sys.stderr', new_callable=io.StringIO) as stderr:
            code, _ = run_cli(['--config', self.config_path, 'srcc', path])
        self.assertEqual(code, 1)
        self.assertNotIn('needs two columns', stderr.getvalue())

    def test_verify_etf(self):
        """Test the ETF check reports success."""
        code, out = run_cli(['--config', self.config_path, 'verify-etf', '--d', '16', '--k', '10'])
        self.assertEqual(code, 0)
        result = json.loads(out)
        self.assertTrue(result['ok'])
        self.assertEqual((result['d'], result['K']), (16, 10))

    def test_verify_etf_infeasible(self):
        """Test d < K is a library error."""
        with patch('sys.stderr', new_callable=io.StringIO):
            code, _ = run_cli(['--config', self.config_path, 'verify-etf', '--d', '3', '--k', '5'])
        self.assertEqual(code, 1)

    def test_gradcheck(self):
        """Test one gradient-check draw passes."""
        code, out = run_cli(['--config', self.config_path, 'gradcheck', '--draws', '1'])
        self.assertEqual(code, 0)
        lines = out.strip().splitlines()
        self.assertEqual(lines[0], 'parameter\tmax_relative_error')
        self.assertEqual(len(lines), 18)

    def test_bad_override(self):
        """Test configuration errors exit with status 2."""
        with patch('sys.stderr', new_callable=io.StringIO) as stderr:
            code, _ = run_cli(['--config', self.config_path, '--set', 'model.width=3', 'fisher-z', '0.5'])
        self.assertEqual(code, 2)
        self.assertIn('ConfigParseError', stderr.getvalue())

    def test_missing_config(self):
        """Test a missing explicit configuration file exits with status 1."""
        with patch('sys.stderr', new_callable=io.StringIO):
            code, _ = run_cli(['--config', os.path.join(self.tmp.name, 'absent.ini'), 'fisher-z', '0.5'])
        self.assertEqual(code, 1)


class TestPipelineCommands(unittest.TestCase):
    """Test cases for synth, train, eval and sweep."""

    def setUp(self):
        """Set up test fixtures."""
        self.tmp = tempfile.TemporaryDirectory()
        self.root = self.tmp.name
        self.config_path = os.path.join(self.root, 'config.ini')
        with open(self.config_path, 'w') as f:
            f.write(SMALL_CONFIG)
        code, out = run_cli(['--config', self.config_path, '--out', os.path.join(self.root, 'data'), 'synth'])
        self.assertEqual(code, 0)
        self.paths = json.loads(out)

    def tearDown(self):
        """Clean up test fixtures."""
        self.tmp.cleanup()

    def test_synth_files(self):
        """Test synth writes both splits of one draw with the configured sizes."""
        train_set = read_features(self.paths['train'])
        test_set = read_features(self.paths['test'])
        self.assertEqual((len(train_set), len(test_set)), (16, 8))
        self.assertFalse(set(train_set.scores.tolist()) & set(test_set.scores.tolist()))

    def test_synth_split_matches_pool(self):
        """Test the two files partition a single synthetic draw."""
        train_set = read_features(self.paths['train'])
        test_set = read_features(self.paths['test'])
        pool = synth_generate(SynthConfig(n=24, clips=5, d_c=16, grades=3, sub_grades=4))
        self.assertEqual(sorted(train_set.scores.tolist() + test_set.scores.tolist()), sorted(pool.scores.tolist()))

    def test_train_then_eval(self):
        """Test training output and evaluating the written checkpoint."""
        run_dir = os.path.join(self.root, 'run')
        code, out = run_cli(['--config', self.config_path, '--out', run_dir, 'train',
                             '--train', self.paths['train'], '--test', self.paths['test']])
        self.assertEqual(code, 0)
        trained = json.loads(out)
        self.assertEqual(trained['epoch'], 2)
        with open(trained['history']) as f:
            self.assertEqual(len(f.read().strip().splitlines()), 3)

        predictions = os.path.join(self.root, 'pred.csv')
        code, out = run_cli(['--config', self.config_path, 'eval', '--checkpoint', trained['checkpoint'],
                             '--data', self.paths['test'], '--predictions', predictions])
        self.assertEqual(code, 0)
        evaluated = json.loads(out)
        self.assertEqual(evaluated['n'], 8)
        self.assertEqual(evaluated['srcc'], trained['test_srcc'])
        self.assertEqual(evaluated['grade_accuracy'], trained['grade_acc'])

        with open(predictions, newline='') as f:
            rows = list(csv.DictReader(f))
        self.assertEqual(len(rows), 8)
        for row in rows:
            self.assertGreaterEqual(float(row['pred_soft']), 0.0)
            self.assertLessEqual(float(row['pred_soft']), 100.0)

    def test_train_undefined_test_srcc(self):
        """Test a constant-score test file gives null test metrics in the JSON output."""
        test_set = read_features(self.paths['test'])
        flat_path = os.path.join(self.root, 'flat.cofi')
        write_features(flat_path, FeatureDataset(test_set.features, [50.0] * len(test_set)))
        code, out = run_cli(['--config', self.config_path, '--out', os.path.join(self.root, 'flat_run'), 'train',
                             '--train', self.paths['train'], '--test', flat_path])
        self.assertEqual(code, 0)
        trained = json.loads(out)
        self.assertIsNone(trained['test_srcc'])
        self.assertIsNone(trained['grade_acc'])
        self.assertIsInstance(trained['train_srcc'], float)

    def test_train_resume(self):
        """Test stopping early and resuming from the written checkpoint."""
        first = os.path.join(self.root, 'first')
        code, out = run_cli(['--config', self.config_path, '--out', first, 'train', '--train', self.paths['train'],
                             '--test', self.paths['test'], '--stop-at-epoch', '1'])
        self.assertEqual(code, 0)
        self.assertEqual(json.loads(out)['epoch'], 1)
        code, out = run_cli(['--config', self.config_path, '--out', os.path.join(self.root, 'second'), 'train',
                             '--train', self.paths['train'], '--test', self.paths['test'],
                             '--resume', os.path.join(first, 'checkpoint.cofk')])
        self.assertEqual(code, 0)
        self.assertEqual(json.loads(out)['epoch'], 2)

    def test_sweep(self):
        """Test a sweep over the procedure count writes per-value runs and a summary."""
        sweep_dir = os.path.join(self.root, 'sweep')
        code, out = run_cli(['--config', self.config_path, '--set', 'optimizer.epochs=1', '--out', sweep_dir,
                             'sweep', '--param', 'p', '--values', '1,2',
                             '--train', self.paths['train'], '--test', self.paths['test']])
        self.assertEqual(code, 0)
        rows = list(csv.DictReader(io.StringIO(out)))
        self.assertEqual([r['value'] for r in rows], ['1', '2'])
        for value in ('1', '2'):
            self.assertTrue(os.path.exists(os.path.join(sweep_dir, f'p={value}', 'history.csv')))
        self.assertTrue(os.path.exists(os.path.join(sweep_dir, 'summary.csv')))

    def test_sweep_bad_value(self):
        """Test an ill-typed sweep value fails before any run."""
        with patch('sys.stderr', new_callable=io.StringIO):
            code, _ = run_cli(['--config', self.config_path, '--out', os.path.join(self.root, 'bad'),
                               'sweep', '--param', 'use_fgs', '--values', 'maybe',
                               '--train', self.paths['train'], '--test', self.paths['test']])
        self.assertEqual(code, 2)
        self.assertFalse(os.path.exists(os.path.join(self.root, 'bad', 'use_fgs=maybe')))


if __name__ == '__main__':
    unittest.main()
