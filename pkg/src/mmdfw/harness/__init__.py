"""Experiment configs, file formats, the runner and the command line."""

from .config import ConfigError, ExperimentConfig, load_config, load_section, parse_config
from .io import (FormatError, ResultTable, atomic_write, read_particles, read_results, read_samples, write_particles,
                 write_samples)
from .runner import ExperimentFailed, RunOutput, eval_mmd_curve, run_experiment, sample_reference
