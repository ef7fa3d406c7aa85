#!/usr/bin/env python3
"""
Configuration Module for the CoFInAl Scoring Head

This module handles loading and managing configuration from config.ini file.
Every key is declared in a schema with its type and default; values from
the file and `--set section.key=value` overrides are type-checked against
it. Config.to_run_config() turns the document into the immutable RunConfig
consumed by the trainer.
"""

import configparser
import logging
import os
from typing import Any, Dict, Iterable, Optional, Tuple

from data import SynthConfig
from errors import ConfigError, ConfigParseError
from losses import FineTarget, LossWeights
from model import Activation, ModelConfig
from trainer import OptimizerConfig, RunConfig


SCHEMA_VERSION = 1

# (section, key) -> (type, default); a tuple type lists the allowed strings
SCHEMA: Dict[Tuple[str, str], Tuple[Any, Any]] = {
    ("model", "d_c"): (int, 64),
    ("model", "d_p"): (int, 32),
    ("model", "d_s"): (int, 32),
    ("model", "c_train"): (int, 5),
    ("model", "p"): (int, 5),
    ("model", "dropout_p"): (float, 0.3),
    ("model", "align_mode"): (("0", "1", "2"), "1"),
    ("model", "activation_mode"): (tuple(a.value for a in Activation), "leaky_relu"),
    ("model", "use_tfm"): (bool, True),
    ("model", "use_fgs"): (bool, True),
    ("grading", "score_max"): (float, 1.0),
    ("grading", "grades"): (int, 7),
    ("grading", "sub_grades"): (int, 10),
    ("loss", "lambda_c"): (float, 1.0),
    ("loss", "lambda_f"): (float, 1.0),
    ("loss", "lambda_r"): (float, 1.0),
    ("loss", "fine_target"): (tuple(t.value for t in FineTarget), "ground_truth"),
    ("optimizer", "lr_max"): (float, 0.01),
    ("optimizer", "lr_min"): (float, 0.0001),
    ("optimizer", "momentum"): (float, 0.9),
    ("optimizer", "weight_decay"): (float, 0.01),
    ("optimizer", "batch_size"): (int, 32),
    ("optimizer", "epochs"): (int, 200),
    ("data", "train_file"): (str, "data/train.cofi"),
    ("data", "test_file"): (str, "data/test.cofi"),
    ("data", "score_max_observed"): (float, 100.0),
    ("data", "synth_n_train"): (int, 200),
    ("data", "synth_n_test"): (int, 50),
    ("data", "synth_clips"): (int, 5),
    ("data", "synth_noise_sigma"): (float, 0.1),
    ("misc", "schema_version"): (int, SCHEMA_VERSION),
    ("misc", "seed"): (int, 0),
    ("misc", "log_level"): (("DEBUG", "INFO", "WARNING", "ERROR"), "INFO"),
    ("misc", "log_file"): (str, ""),
    ("misc", "log_to_console"): (bool, True),
}


class Config:
    """Configuration manager for CoFInAl runs."""

    def __init__(self, config_file: Optional[str] = "config.ini", overrides: Iterable[str] = ()):
        """
        Initialize configuration manager.

        Args:
            config_file: Path to configuration file, or None for built-in defaults
            overrides: "section.key=value" strings applied after the file
        """
        self.config_file = config_file
        self.config = configparser.ConfigParser(interpolation=None)
        for section, _ in SCHEMA:
            if not self.config.has_section(section):
                self.config.add_section(section)
        if config_file is not None:
            self.load()
        for override in overrides:
            self.apply_override(override)
        self.validate()

    def load(self) -> None:
        """Load configuration from file."""
        if not os.path.exists(self.config_file):
            raise FileNotFoundError(f"Configuration file not found: {self.config_file}")
        try:
            self.config.read(self.config_file, encoding="utf-8")
        except configparser.Error as e:
            raise ConfigParseError(f"Cannot parse {self.config_file}: {e}")
        logging.info(f"Configuration loaded from {self.config_file}")

    def apply_override(self, override: str) -> None:
        """
        Apply one "section.key=value" override.

        Args:
            override: Assignment string; the key must exist in the schema
        """
        target, sep, value = override.partition("=")
        section, dot, key = target.strip().partition(".")
        if not sep or not dot:
            raise ConfigParseError(f"Override must look like section.key=value, got {override!r}")
        if (section, key) not in SCHEMA:
            raise ConfigParseError(f"Unknown configuration key {section}.{key}")
        self.config.set(section, key, value.strip())
        self._typed(section, key)
        logging.debug(f"Override {section}.{key} = {value.strip()}")

    def validate(self) -> None:
        """Reject unknown keys, ill-typed values and unsupported schema versions."""
        for section in self.config.sections():
            for key in self.config.options(section):
                if (section, key) not in SCHEMA:
                    raise ConfigParseError(f"Unknown configuration key {section}.{key}")
        for section, key in SCHEMA:
            self._typed(section, key)
        if self.get_int("misc", "schema_version") != SCHEMA_VERSION:
            raise ConfigParseError(
                f"Unsupported schema_version {self.get('misc', 'schema_version')} (expected {SCHEMA_VERSION})"
            )

    def _typed(self, section: str, key: str) -> Any:
        kind, default = SCHEMA[(section, key)]
        try:
            if kind is int:
                return self.config.getint(section, key, fallback=default)
            if kind is float:
                return self.config.getfloat(section, key, fallback=default)
            if kind is bool:
                return self.config.getboolean(section, key, fallback=default)
        except ValueError as e:
            raise ConfigParseError(f"Invalid value for {section}.{key}: {e}")
        value = self.config.get(section, key, fallback=default)
        if isinstance(kind, tuple) and value not in kind:
            raise ConfigParseError(f"{section}.{key} must be one of {', '.join(kind)}, got {value!r}")
        return value

    def get(self, section: str, key: str, fallback: Any = None) -> Any:
        """
        Get configuration value.

        Args:
            section: Configuration section name
            key: Configuration key name
            fallback: Default value if key not found (schema default when None)

        Returns:
            Configuration value
        """
        if fallback is None and (section, key) in SCHEMA:
            fallback = str(SCHEMA[(section, key)][1])
        return self.config.get(section, key, fallback=fallback)

    def get_int(self, section: str, key: str, fallback: Optional[int] = None) -> int:
        """Get integer configuration value."""
        if fallback is None:
            return self._typed(section, key)
        return self.config.getint(section, key, fallback=fallback)

    def get_float(self, section: str, key: str, fallback: Optional[float] = None) -> float:
        """Get float configuration value."""
        if fallback is None:
            return self._typed(section, key)
        return self.config.getfloat(section, key, fallback=fallback)

    def get_bool(self, section: str, key: str, fallback: Optional[bool] = None) -> bool:
        """Get boolean configuration value."""
        if fallback is None:
            return self._typed(section, key)
        return self.config.getboolean(section, key, fallback=fallback)

    # Model configuration properties
    @property
    def d_c(self) -> int:
        """Clip feature dimension."""
        return self.get_int('model', 'd_c')

    @property
    def d_p(self) -> int:
        return self.get_int('model', 'd_p')

    @property
    def d_s(self) -> int:
        return self.get_int('model', 'd_s')

    @property
    def c_train(self) -> int:
        """Clips sampled per training sample."""
        return self.get_int('model', 'c_train')

    @property
    def procedures(self) -> int:
        return self.get_int('model', 'p')

    @property
    def dropout_p(self) -> float:
        return self.get_float('model', 'dropout_p')

    @property
    def align_mode(self) -> int:
        return int(self.get('model', 'align_mode'))

    @property
    def activation_mode(self) -> str:
        return self.get('model', 'activation_mode')

    @property
    def use_tfm(self) -> bool:
        return self.get_bool('model', 'use_tfm')

    @property
    def use_fgs(self) -> bool:
        return self.get_bool('model', 'use_fgs')

    # Grading configuration properties
    @property
    def score_max(self) -> float:
        """Upper end of the normalized score range."""
        return self.get_float('grading', 'score_max')

    @property
    def grades(self) -> int:
        return self.get_int('grading', 'grades')

    @property
    def sub_grades(self) -> int:
        return self.get_int('grading', 'sub_grades')

    # Loss configuration properties
    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(
            lambda_c=self.get_float('loss', 'lambda_c'),
            lambda_f=self.get_float('loss', 'lambda_f'),
            lambda_r=self.get_float('loss', 'lambda_r'),
        )

    @property
    def fine_target(self) -> str:
        return self.get('loss', 'fine_target')

    # Optimizer configuration properties
    @property
    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(
            lr_max=self.get_float('optimizer', 'lr_max'),
            lr_min=self.get_float('optimizer', 'lr_min'),
            momentum=self.get_float('optimizer', 'momentum'),
            weight_decay=self.get_float('optimizer', 'weight_decay'),
            batch_size=self.get_int('optimizer', 'batch_size'),
            epochs=self.get_int('optimizer', 'epochs'),
        )

    # Data configuration properties
    @property
    def train_file(self) -> str:
        return self.get('data', 'train_file')

    @property
    def test_file(self) -> str:
        return self.get('data', 'test_file')

    @property
    def score_max_observed(self) -> float:
        """Raw score mapped to the top of the normalized range."""
        return self.get_float('data', 'score_max_observed')

    def synth_config(self, n: int) -> SynthConfig:
        """Synthetic generator settings matching the model and grading sections."""
        return SynthConfig(
            n=n,
            clips=self.get_int('data', 'synth_clips'),
            d_c=self.d_c,
            grades=self.grades,
            sub_grades=self.sub_grades,
            noise_sigma=self.get_float('data', 'synth_noise_sigma'),
            score_max=self.score_max_observed,
            seed=self.seed,
        )

    # Misc configuration properties
    @property
    def seed(self) -> int:
        return self.get_int('misc', 'seed')

    @property
    def log_level(self) -> str:
        """Logging level."""
        return self.get('misc', 'log_level')

    @property
    def log_file(self) -> str:
        """Log file path (empty to disable)."""
        return self.get('misc', 'log_file')

    @property
    def log_to_console(self) -> bool:
        """Whether to log to console."""
        return self.get_bool('misc', 'log_to_console')

    def to_run_config(self) -> RunConfig:
        """
        Build the immutable run configuration.

        Returns:
            RunConfig

        Raises:
            ConfigParseError: a value is well-typed but out of range
        """
        try:
            model = ModelConfig(
                d_c=self.d_c,
                d_p=self.d_p,
                d_s=self.d_s,
                c_train=self.c_train,
                p=self.procedures,
                g=self.grades,
                g_prime=self.sub_grades,
                dropout_p=self.dropout_p,
                align_mode=self.align_mode,
                activation_mode=self.activation_mode,
                use_tfm=self.use_tfm,
                use_fgs=self.use_fgs,
            )
            return RunConfig(
                model=model,
                score_max=self.score_max,
                loss=self.loss_weights,
                fine_target=self.fine_target,
                optimizer=self.optimizer,
                score_max_observed=self.score_max_observed,
                seed=self.seed,
            )
        except ConfigError as e:
            raise ConfigParseError(str(e))

    def __str__(self) -> str:
        """String representation of configuration."""
        return f"Config(file={self.config_file})"

