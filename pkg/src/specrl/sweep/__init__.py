"""Scenario sweeps over the rollout, cost and pipeline models."""

from .config import ConfigError, ScenarioSpec, load_scenario, validate_config
from .scenario import CellRecord, SweepResult, run_scenario

__all__ = ["CellRecord", "ConfigError", "ScenarioSpec", "SweepResult", "load_scenario",
           "run_scenario", "validate_config"]
