"""Simulation and cost modelling of speculative decoding inside RL post-training steps."""

from __future__ import annotations

__version__ = "0.1.0"

from .analytic import AcceptanceModel, StageTimes, amdahl_step_bound, expected_alpha_iid, invert_alpha_to_beta
from .cost_model import HardwareProfile, ModelProfile, RooflineCost, ShardingPlan
from .pipeline import PipelineConfig, run_async, run_sync
from .rollout import LengthDistribution, RolloutPlan, SpeculationConfig, simulate_rollout
from .specdec import CategoricalDist, exact_output_distribution, speculative_cycle

__all__ = [
    "AcceptanceModel", "CategoricalDist", "HardwareProfile", "LengthDistribution", "ModelProfile",
    "PipelineConfig", "RolloutPlan", "RooflineCost", "ShardingPlan", "SpeculationConfig", "StageTimes",
    "amdahl_step_bound", "exact_output_distribution", "expected_alpha_iid", "invert_alpha_to_beta",
    "run_async", "run_sync", "simulate_rollout", "speculative_cycle",
]
