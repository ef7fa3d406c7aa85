#!/usr/bin/env python3
"""
Main Application for the CoFInAl Scoring Head

Batch command-line front end:
- synth: write synthetic train/test feature files
- train / eval: fit a head, evaluate a checkpoint
- gradcheck / verify-etf: numerical self-checks
- srcc / fisher-z: correlation utilities
- sweep: one training run per value of a hyperparameter, plus a summary

Results go to stdout (JSON or CSV); logs go to stderr.
Exit status: 0 on success, 1 on a library or I/O error, 2 on a bad configuration.
"""

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

# Add src directory to path
sys.path.insert(0, str(Path(__file__).parent))

from config import Config
from data import read_features, split_dataset, synth_generate, SynthConfig, write_features
from errors import CoFInAlError, ConfigParseError, UndefinedCorrelationError
from etf import ETF_TOLERANCE, build_etf, verify_etf
from grading import denormalize_scores
from metrics import fisher_z_average, srcc
from tensor_core import RngStream
from trainer import (GRADCHECK_TOLERANCE, composite_grad_check, evaluate, load_checkpoint, save_checkpoint,
                     toy_run_config, train)


DEFAULT_CONFIG = "config.ini"

# RngStream child tag for the synth train/test split
SPLIT_STREAM = 2

# Swept parameter -> configuration key
SWEEP_KEYS = {
    "p": "model.p",
    "P": "model.p",
    "G": "grading.grades",
    "G'": "grading.sub_grades",
    "grades": "grading.grades",
    "sub_grades": "grading.sub_grades",
    "align_mode": "model.align_mode",
    "activation_mode": "model.activation_mode",
    "use_tfm": "model.use_tfm",
    "use_fgs": "model.use_fgs",
}

PREDICTION_COLUMNS = ["index", "score", "pred_soft", "pred_hard", "grade", "grade_pred"]
SWEEP_COLUMNS = ["param", "value", "final_train_srcc", "final_test_srcc", "best_test_srcc", "final_grade_acc"]


def _emit(result: Any) -> None:
    print(json.dumps(result, sort_keys=True))


def _defined(value: Optional[float]) -> Optional[float]:
    """NaN (undefined SRCC) becomes None so JSON output stays valid."""
    return None if value is None or np.isnan(value) else value


def _sweep_run(config_file: Optional[str],
               overrides: List[str],
               train_path: str,
               test_path: str,
               out_dir: str,
               param: str,
               value: str) -> Dict[str, Any]:
    """One sweep point; runs in a worker process."""
    cfg = Config(config_file, overrides).to_run_config()
    ckpt, history = train(cfg, read_features(train_path), read_features(test_path))
    os.makedirs(out_dir, exist_ok=True)
    history.write_csv(os.path.join(out_dir, "history.csv"))
    save_checkpoint(os.path.join(out_dir, "checkpoint.cofk"), ckpt)
    last = history.records[-1]
    return {
        "param": param,
        "value": value,
        "final_train_srcc": last.train_srcc,
        "final_test_srcc": last.test_srcc,
        "best_test_srcc": max((r.test_srcc for r in history.records if not np.isnan(r.test_srcc)),
                              default=float("nan")),
        "final_grade_acc": last.grade_acc,
    }


class CoFInAlApp:
    """Command dispatcher for one CLI invocation."""

    def __init__(self, args: argparse.Namespace):
        """
        Initialize the application.

        Args:
            args: Parsed command-line arguments
        """
        self.args = args
        self.config_file = args.config
        if self.config_file is None and os.path.exists(DEFAULT_CONFIG):
            self.config_file = DEFAULT_CONFIG
        self.overrides = list(args.set or [])
        if args.seed is not None:
            self.overrides.append(f"misc.seed={args.seed}")
        self.config = Config(self.config_file, self.overrides)
        self._setup_logging()

    def _setup_logging(self) -> None:
        """Setup logging configuration."""
        log_level = getattr(logging, self.config.log_level.upper(), logging.INFO)

        handlers = []

        # Console handler (stderr; stdout is reserved for results)
        if self.config.log_to_console:
            console_handler = logging.StreamHandler(sys.stderr)
            console_handler.setFormatter(
                logging.Formatter('[%(levelname)s] %(name)s: %(message)s')
            )
            handlers.append(console_handler)

        # File handler
        warning = None
        if self.config.log_file:
            try:
                file_handler = logging.FileHandler(self.config.log_file)
                file_handler.setFormatter(
                    logging.Formatter(
                        '%(asctime)s [%(levelname)s] %(name)s: %(message)s',
                        datefmt='%Y-%m-%d %H:%M:%S'
                    )
                )
                handlers.append(file_handler)
            except PermissionError:
                warning = f"Cannot write to log file: {self.config.log_file}"

        if not handlers:
            handlers.append(logging.NullHandler())
        logging.basicConfig(level=log_level, handlers=handlers, force=True)
        if warning:
            logging.warning(warning)
        logging.debug(f"Logging configured: level={self.config.log_level}")

    def _out_dir(self) -> str:
        out = self.args.out or "."
        os.makedirs(out, exist_ok=True)
        return out

    def run(self) -> int:
        handler = getattr(self, "cmd_" + self.args.command.replace("-", "_"))
        return handler()

    def cmd_synth(self) -> int:
        out = self._out_dir()
        n_train = self.config.get_int('data', 'synth_n_train')
        n_test = self.config.get_int('data', 'synth_n_test')
        # One draw, shuffle-split into train and test
        pool = synth_generate(self.config.synth_config(n_train + n_test))
        splits = split_dataset(pool, n_train, RngStream(self.config.seed).child(SPLIT_STREAM))
        paths = {}
        for split, dataset in zip(("train", "test"), splits):
            paths[split] = os.path.join(out, f"{split}.cofi")
            write_features(paths[split], dataset)
        logging.info(f"Split {len(pool)} synthetic samples into {n_train} train and {n_test} test")
        _emit(paths)
        return 0

    def cmd_train(self) -> int:
        train_path = self.args.train or self.config.train_file
        test_path = self.args.test or self.config.test_file
        resume = load_checkpoint(self.args.resume) if self.args.resume else None
        cfg = resume.config if resume is not None else self.config.to_run_config()
        ckpt, history = train(cfg, read_features(train_path), read_features(test_path),
                              resume=resume, stop_at_epoch=self.args.stop_at_epoch)
        out = self._out_dir()
        history_path = os.path.join(out, "history.csv")
        ckpt_path = os.path.join(out, "checkpoint.cofk")
        history.write_csv(history_path)
        save_checkpoint(ckpt_path, ckpt)
        last = history.records[-1] if history.records else None
        _emit({
            "epoch": ckpt.epoch,
            "checkpoint": ckpt_path,
            "history": history_path,
            "train_srcc": _defined(last.train_srcc) if last else None,
            "test_srcc": _defined(last.test_srcc) if last else None,
            "grade_acc": _defined(last.grade_acc) if last else None,
        })
        return 0

    def cmd_eval(self) -> int:
        ckpt = load_checkpoint(self.args.checkpoint)
        dataset = read_features(self.args.data or self.config.test_file)
        result = evaluate(ckpt, dataset)
        if self.args.predictions:
            self._write_predictions(self.args.predictions, ckpt.config, result)
        _emit({
            "n": int(result.scores.size),
            "srcc": result.srcc,
            "srcc_hard": result.srcc_hard,
            "grade_accuracy": result.grade_accuracy,
        })
        return 0

    @staticmethod
    def _write_predictions(path: str, cfg, result) -> None:
        scheme = cfg.scheme
        raw = [denormalize_scores(values, cfg.score_max_observed, scheme)
               for values in (result.scores, result.pred_soft, result.pred_hard)]
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(PREDICTION_COLUMNS)
            for i in range(result.scores.size):
                writer.writerow([i, repr(float(raw[0][i])), repr(float(raw[1][i])), repr(float(raw[2][i])),
                                 int(result.grades[i]), int(result.grade_pred[i])])
        logging.info(f"Wrote {result.scores.size} predictions to {path}")

    def cmd_gradcheck(self) -> int:
        seed = self.config.seed
        worst: Dict[str, float] = {}
        for draw in range(self.args.draws):
            cfg = toy_run_config(seed + draw)
            toy = synth_generate(SynthConfig(n=4, clips=4, d_c=cfg.model.d_c, grades=cfg.model.g,
                                             sub_grades=cfg.model.g_prime, score_max=cfg.score_max,
                                             seed=seed + draw))
            clips = np.stack([f.astype(np.float64) for f in toy.features])
            errors = composite_grad_check(cfg, clips, toy.scores)
            for name, error in errors.items():
                worst[name] = max(worst.get(name, 0.0), error)
        print("parameter\tmax_relative_error")
        for name, error in worst.items():
            print(f"{name}\t{error:.3e}")
        overall = max(worst.values())
        logging.info(f"Gradient check over {self.args.draws} draws: max relative error {overall:.3e}")
        return 0 if overall < GRADCHECK_TOLERANCE else 1

    def cmd_verify_etf(self) -> int:
        d = self.args.d or self.config.d_s
        k = self.args.k or self.config.sub_grades
        etf = build_etf(d, k, RngStream(self.config.seed))
        deviation = verify_etf(etf)
        ok = deviation < ETF_TOLERANCE
        _emit({"d": d, "K": k, "deviation": deviation, "ok": ok})
        return 0 if ok else 1

    def cmd_srcc(self) -> int:
        table = _read_columns(self.args.file)
        print(f"{srcc(table[:, 0], table[:, 1])!r}\t{table.shape[0]}")
        return 0

    def cmd_fisher_z(self) -> int:
        print(repr(fisher_z_average(self.args.values)))
        return 0

    def cmd_sweep(self) -> int:
        param = self.args.param
        values = [v.strip() for v in self.args.values.split(",") if v.strip()]
        if not values:
            raise ConfigParseError("sweep needs at least one value")
        key = SWEEP_KEYS[param]
        # Type-check every value before any run starts
        for value in values:
            Config(self.config_file, self.overrides + [f"{key}={value}"]).to_run_config()

        out = self._out_dir()
        train_path = self.args.train or self.config.train_file
        test_path = self.args.test or self.config.test_file
        jobs = [(self.config_file, self.overrides + [f"{key}={value}"], train_path, test_path,
                 os.path.join(out, f"{param}={value}"), param, value) for value in values]
        if self.args.jobs > 1:
            with ProcessPoolExecutor(max_workers=self.args.jobs) as pool:
                rows = list(pool.map(_sweep_run, *zip(*jobs)))
        else:
            rows = [_sweep_run(*job) for job in jobs]

        summary_path = os.path.join(out, "summary.csv")
        with open(summary_path, "w", encoding="utf-8", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
        with open(summary_path, encoding="utf-8") as f:
            sys.stdout.write(f.read())
        return 0


def _read_columns(path: str) -> np.ndarray:
    """Two numeric columns (comma or whitespace separated); non-numeric header rows are skipped."""
    with open(path, encoding="utf-8") as f:
        first = f.readline()
    delimiter = "," if "," in first else None
    columns = len(first.split(delimiter))
    if columns < 2:
        raise UndefinedCorrelationError(f"{path} needs two columns, found {columns}")
    table = np.genfromtxt(path, delimiter=delimiter, dtype=np.float64, usecols=(0, 1)).reshape(-1, 2)
    return table[~np.isnan(table).any(axis=1)]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cofinal", description="Coarse-to-fine action quality scoring head")
    parser.add_argument("--config", help="INI configuration file (default: ./config.ini if present)")
    parser.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="Override a configuration value")
    parser.add_argument("--out", help="Output directory")
    parser.add_argument("--seed", type=int, help="Random seed (overrides misc.seed, default 0)")
    parser.add_argument("--jobs", type=int, default=1, help="Parallel runs for sweep")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", help="Write synthetic train/test feature files")

    p = sub.add_parser("train", help="Train a head")
    p.add_argument("--train", help="Training feature file")
    p.add_argument("--test", help="Test feature file")
    p.add_argument("--resume", help="Checkpoint to continue from")
    p.add_argument("--stop-at-epoch", type=int, help="Stop after this many completed epochs")

    p = sub.add_parser("eval", help="Evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="Feature file (default: data.test_file)")
    p.add_argument("--predictions", help="Write per-sample predictions CSV")

    p = sub.add_parser("gradcheck", help="Finite-difference check of the composite loss on a toy model")
    p.add_argument("--draws", type=int, default=10)

    p = sub.add_parser("verify-etf", help="Check the simplex ETF Gram matrix")
    p.add_argument("--d", type=int, help="Prototype dimension (default: model.d_s)")
    p.add_argument("--k", type=int, help="Prototype count (default: grading.sub_grades)")

    p = sub.add_parser("srcc", help="Spearman correlation of a two-column file")
    p.add_argument("file")

    p = sub.add_parser("fisher-z", help="Fisher-z average of correlations")
    p.add_argument("values", type=float, nargs="+")

    p = sub.add_parser("sweep", help="Train once per value of a hyperparameter")
    p.add_argument("--param", required=True, choices=sorted(SWEEP_KEYS))
    p.add_argument("--values", required=True, help="Comma-separated values")
    p.add_argument("--train", help="Training feature file")
    p.add_argument("--test", help="Test feature file")
    p.add_argument("--jobs", type=int, default=argparse.SUPPRESS, help="Parallel runs")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point; returns the process exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code else 0
    try:
        return CoFInAlApp(args).run()
    except ConfigParseError as e:
        print(f"[{type(e).__name__}] {e}", file=sys.stderr)
        return 2
    except (CoFInAlError, OSError) as e:
        print(f"[{type(e).__name__}] {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
