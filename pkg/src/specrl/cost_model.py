"""Two-term roofline latency model for sharded LLM serving instances.

One decode step of an instance streams its weights (plus resident KV cache)
from HBM and performs ``2 * active_params`` flops per token. Latency is the
slower of the two, inflated by a sharding-efficiency penalty, plus a
tensor-parallel all-reduce term and an additive pipeline-bubble term:

    t = max(memory_bytes / (G * bw), 2 * A * tokens / (G * flops)) / eff + comm + bubble
    eff = 1 / (1 + c * log2 G)
    memory_bytes = weight traffic + kv_bytes_per_token * resident context tokens

Verification of ``k`` drafted tokens multiplies the compute and all-reduce
terms by ``k + 1`` and leaves memory traffic unchanged. All latency functions
accept numpy arrays for ``local_batch`` / ``context_tokens`` and broadcast.

Hardware numbers in the shipped profiles are configuration inputs, not
measurements.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml

PROFILE_DIR = Path(__file__).with_name("profiles")


class CapacityError(ValueError):
    """Model weights do not fit in the HBM of one instance."""


def _require_positive(obj: Any, names: list[str]) -> None:
    for name in names:
        v = getattr(obj, name)
        if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
            raise ValueError(f"{type(obj).__name__}.{name} must be strictly positive, got {v!r}")


@dataclass(frozen=True)
class HardwareProfile:
    gpu_name: str
    hbm_bandwidth_bytes_per_s: float
    peak_flops_per_s: float
    hbm_capacity_bytes: float
    interconnect_bandwidth_bytes_per_s: float
    per_layer_comm_latency_s: float

    def __post_init__(self) -> None:
        _require_positive(self, [f.name for f in fields(self)][1:])

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> HardwareProfile:
        return cls(**_pick(cls, d))


@dataclass(frozen=True)
class ModelProfile:
    name: str
    total_params: float
    active_params_per_token: float
    num_layers: int
    hidden_size: int
    bytes_per_param: int
    draft_cost_fraction: float = 0.0
    # bytes of KV cache read per resident context token per decode step; 0 disables
    kv_bytes_per_token: float = 0.0
    expert_spread_factor: float = 8.0

    def __post_init__(self) -> None:
        _require_positive(self, ["total_params", "active_params_per_token", "num_layers",
                                 "hidden_size", "expert_spread_factor"])
        if self.active_params_per_token > self.total_params:
            raise ValueError("active_params_per_token cannot exceed total_params")
        if self.bytes_per_param not in (1, 2, 4):
            raise ValueError("bytes_per_param must be 1, 2 or 4")
        if self.draft_cost_fraction < 0:
            raise ValueError("draft_cost_fraction must be >= 0")
        if self.kv_bytes_per_token < 0:
            raise ValueError("kv_bytes_per_token must be >= 0")

    @property
    def is_moe(self) -> bool:
        return self.active_params_per_token < self.total_params

    @property
    def weight_bytes(self) -> float:
        return self.total_params * self.bytes_per_param

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ModelProfile:
        return cls(**_pick(cls, d))


def sharding_efficiency(gpus_per_instance: int, penalty: float) -> float:
    """``1 / (1 + c * log2(G))``; 1.0 for a single GPU or ``c = 0``."""
    return 1.0 / (1.0 + penalty * math.log2(gpus_per_instance))


@dataclass(frozen=True)
class ShardingPlan:
    gpus_per_instance: int
    tensor_parallel: int = 1
    pipeline_parallel: int = 1
    expert_parallel: int = 1
    # default keeps 64-GPU instances at ~81% efficiency
    sharding_penalty: float = 0.04

    def __post_init__(self) -> None:
        _require_positive(self, ["gpus_per_instance", "tensor_parallel",
                                 "pipeline_parallel", "expert_parallel"])
        prod = self.tensor_parallel * self.pipeline_parallel * self.expert_parallel
        if prod != self.gpus_per_instance:
            raise ValueError(
                f"tensor_parallel x pipeline_parallel x expert_parallel = {prod}"
                f" but gpus_per_instance = {self.gpus_per_instance}"
            )
        if self.sharding_penalty < 0:
            raise ValueError("sharding_penalty must be >= 0")

    @property
    def sharding_efficiency(self) -> float:
        return sharding_efficiency(self.gpus_per_instance, self.sharding_penalty)

    @classmethod
    def tensor_only(cls, gpus: int, penalty: float = 0.04) -> ShardingPlan:
        return cls(gpus, tensor_parallel=gpus, sharding_penalty=penalty)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ShardingPlan:
        return cls(**_pick(cls, d))


def _pick(cls: type, d: Mapping[str, Any]) -> dict[str, Any]:
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    out = {}
    for f in fields(cls):
        if f.name not in d:
            continue
        v = d[f.name]
        if f.type in ("float", "float | None") and isinstance(v, str):
            v = float(v)
        elif f.type == "int" and isinstance(v, (str, float)) and float(v) == int(float(v)):
            v = int(float(v))
        out[f.name] = v
    return out


def check_capacity(hw: HardwareProfile, model: ModelProfile, plan: ShardingPlan) -> None:
    cap = plan.gpus_per_instance * hw.hbm_capacity_bytes
    if model.weight_bytes > cap:
        raise CapacityError(
            f"{model.name}: {model.weight_bytes:.3g} weight bytes exceed"
            f" {cap:.3g} bytes of HBM on {plan.gpus_per_instance} x {hw.gpu_name}"
        )


def weight_traffic_bytes(model: ModelProfile, local_batch):
    """Weight bytes streamed per step; MoE models only touch the experts the batch routes to."""
    if not model.is_moe:
        return model.weight_bytes + 0.0 * np.asarray(local_batch, dtype=float)
    touched = np.minimum(model.total_params,
                         model.active_params_per_token * np.asarray(local_batch, dtype=float)
                         * model.expert_spread_factor)
    return touched * model.bytes_per_param


ACTIVATION_BYTES = 2


def tensor_parallel_comm_s(hw: HardwareProfile, model: ModelProfile, plan: ShardingPlan, tokens):
    """Ring all-reduce time of the activations of ``tokens`` tokens.

    Two all-reduces per layer, each moving ``2 (tp - 1) / tp`` of the
    activation bytes over the interconnect. Zero without tensor parallelism.
    """
    tp = plan.tensor_parallel
    if tp == 1:
        return 0.0 * np.asarray(tokens, dtype=float)
    act = np.asarray(tokens, dtype=float) * model.hidden_size * ACTIVATION_BYTES
    return 2 * model.num_layers * act * 2 * (tp - 1) / tp / hw.interconnect_bandwidth_bytes_per_s


def _roofline(hw, model, plan, local_batch, context_tokens, token_multiplicity):
    b = np.asarray(local_batch, dtype=float)
    if np.any(b < 1):
        raise ValueError("local_batch must be >= 1")
    g = plan.gpus_per_instance
    mem_bytes = weight_traffic_bytes(model, b) + model.kv_bytes_per_token * np.asarray(context_tokens, dtype=float)
    memory_time = mem_bytes / (g * hw.hbm_bandwidth_bytes_per_s)
    compute_time = 2.0 * model.active_params_per_token * b * token_multiplicity / (g * hw.peak_flops_per_s)
    bubble = (plan.pipeline_parallel - 1) * hw.per_layer_comm_latency_s
    comm = tensor_parallel_comm_s(hw, model, plan, b * token_multiplicity)
    out = np.maximum(memory_time, compute_time) / plan.sharding_efficiency + comm + bubble
    return float(out) if out.ndim == 0 else out


def decode_step_latency(hw: HardwareProfile, model: ModelProfile, plan: ShardingPlan,
                        local_batch, context_tokens=0.0):
    """Seconds for one autoregressive step of ``local_batch`` live sequences.

    ``context_tokens`` is the total resident KV context across the batch and
    only matters when the model sets ``kv_bytes_per_token``.
    """
    check_capacity(hw, model, plan)
    return _roofline(hw, model, plan, local_batch, context_tokens, 1)


def verify_step_latency(hw: HardwareProfile, model: ModelProfile, plan: ShardingPlan,
                        local_batch, k: int, context_tokens=0.0):
    if k < 0:
        raise ValueError("k must be >= 0")
    check_capacity(hw, model, plan)
    return _roofline(hw, model, plan, local_batch, context_tokens, k + 1)


def draft_latency(model: ModelProfile, k: int, base_decode, fraction: float | None = None):
    f = model.draft_cost_fraction if fraction is None else fraction
    if f < 0:
        raise ValueError("draft cost fraction must be >= 0")
    return k * f * base_decode


def breakeven_cycle_overhead(hw: HardwareProfile, model: ModelProfile, plan: ShardingPlan,
                             local_batch, k: int, alpha: float, context_tokens=0.0,
                             fraction: float | None = None):
    """Largest fixed per-cycle overhead at which speculation still matches decoding.

    A cycle emits ``alpha`` tokens per sequence for ``verify + draft + h``
    seconds, against ``alpha`` plain decode steps, so speculation wins while
    ``h < alpha * decode - verify - draft``. Negative means it never wins.
    """
    d = decode_step_latency(hw, model, plan, local_batch, context_tokens)
    v = verify_step_latency(hw, model, plan, local_batch, k, context_tokens)
    return alpha * d - v - draft_latency(model, k, d, fraction)


def prefill_latency(hw: HardwareProfile, model: ModelProfile, plan: ShardingPlan,
                    prompt_tokens) -> float:
    """Compute-bound prefill of ``prompt_tokens`` tokens across the instance."""
    if np.any(np.asarray(prompt_tokens) < 1):
        raise ValueError("prompt_tokens must be >= 1")
    check_capacity(hw, model, plan)
    flops = 2.0 * model.active_params_per_token * np.asarray(prompt_tokens, dtype=float)
    out = flops / (plan.gpus_per_instance * hw.peak_flops_per_s) / plan.sharding_efficiency
    return float(out) if np.ndim(out) == 0 else out


def ridge_batch(hw: HardwareProfile, model: ModelProfile, token_multiplicity: int = 1) -> float:
    """Local batch at which compute time equals weight-streaming time (dense, no KV)."""
    return (model.weight_bytes * hw.peak_flops_per_s
            / (2.0 * model.active_params_per_token * hw.hbm_bandwidth_bytes_per_s * token_multiplicity))


@dataclass(frozen=True)
class StepCost:
    """Latency snapshot of one instance at a fixed local batch and draft length."""

    prefill_s_per_prompt: float
    decode_step_s: float
    verify_step_s: float
    draft_step_s: float
    k: int

    def __post_init__(self) -> None:
        if self.verify_step_s < self.decode_step_s * (1 - 1e-12):
            raise ValueError("verify step cannot be cheaper than a decode step")


def step_cost(hw: HardwareProfile, model: ModelProfile, plan: ShardingPlan, local_batch: int,
              k: int, prompt_tokens: int, context_tokens: float = 0.0) -> StepCost:
    d = decode_step_latency(hw, model, plan, local_batch, context_tokens)
    return StepCost(
        prefill_s_per_prompt=prefill_latency(hw, model, plan, prompt_tokens),
        decode_step_s=d,
        verify_step_s=verify_step_latency(hw, model, plan, local_batch, k, context_tokens),
        draft_step_s=draft_latency(model, k, d),
        k=k,
    )


class RooflineCost:
    """Cost provider for the rollout simulator backed by the roofline functions."""

    def __init__(self, hw: HardwareProfile, model: ModelProfile, plan: ShardingPlan):
        check_capacity(hw, model, plan)
        self.hw, self.model, self.plan = hw, model, plan

    def prefill(self, tokens) -> float:
        return prefill_latency(self.hw, self.model, self.plan, tokens)

    def decode(self, batch, context):
        return _roofline(self.hw, self.model, self.plan, batch, context, 1)

    def verify(self, batch, context, k: int):
        return _roofline(self.hw, self.model, self.plan, batch, context, k + 1)

    def draft(self, k: int, base_decode, fraction: float | None = None):
        return draft_latency(self.model, k, base_decode, fraction)


class FlatCost:
    """Batch-independent costs; a test double and an analysis aid."""

    def __init__(self, decode_s: float, verify_s: float | None = None, prefill_s: float = 0.0,
                 draft_fraction: float = 0.0):
        self.decode_s = decode_s
        self.verify_s = decode_s if verify_s is None else verify_s
        self.prefill_s = prefill_s
        self.draft_fraction = draft_fraction

    def prefill(self, tokens) -> float:
        return self.prefill_s

    def decode(self, batch, context):
        return np.full(np.shape(batch), self.decode_s, dtype=float)

    def verify(self, batch, context, k: int):
        return np.full(np.shape(batch), self.verify_s, dtype=float)

    def draft(self, k: int, base_decode, fraction: float | None = None):
        f = self.draft_fraction if fraction is None else fraction
        return k * f * np.asarray(base_decode, dtype=float)


# ---------------------------------------------------------------------------
# profile files
# ---------------------------------------------------------------------------


def _load_yaml(path: Path) -> dict[str, Any]:
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a mapping at the top level")
    return data


def profile_path(kind: str, name: str) -> Path:
    p = PROFILE_DIR / f"{kind}_{name}.yaml"
    if not p.exists():
        raise FileNotFoundError(f"no shipped {kind} profile named {name!r}")
    return p


def load_profile_dict(kind: str, ref: str | Mapping[str, Any]) -> dict[str, Any]:
    """Resolve a profile reference: a shipped name, a file path, or an inline mapping."""
    if isinstance(ref, Mapping):
        return dict(ref)
    p = Path(ref)
    if p.suffix in (".yaml", ".yml") and p.exists():
        data = _load_yaml(p)
    else:
        data = _load_yaml(profile_path(kind, str(ref)))
    return dict(data.get(kind, data))


def shipped_profiles() -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    for p in sorted(PROFILE_DIR.glob("*.yaml")):
        kind, _, name = p.stem.partition("_")
        out.setdefault(kind, []).append(name)
    return out


def profile_to_dict(obj) -> dict[str, Any]:
    return asdict(obj)
