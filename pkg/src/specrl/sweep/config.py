"""Scenario and profile configuration: loading, resolution, validation, typed builders.

A scenario is a YAML mapping::

    name: fig3_heatmap
    kind: rollout            # rollout | stage_replay | async_replay
    seed: 7
    base: {...}              # hardware, model, deployment, traffic, rollout, speculation, pipeline
    variants:                # optional named override sets, grouped; axis ``variant.<group>``
      case: {a: {speculation.alpha: 2.0}, b: {...}}
    axes:
      - {path: speculation.k, values: [1, 2, 3]}
    outputs: [table, heatmap]

Validation never raises on malformed input; it returns every violation found.
"""

from __future__ import annotations

import copy
import hashlib
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from ..analytic import AcceptanceModel, StageTimes
from ..cost_model import HardwareProfile, ModelProfile, ShardingPlan, load_profile_dict
from ..pipeline import PipelineConfig
from ..rollout import LengthDistribution, SpeculationConfig

PRESET_DIR = Path(__file__).resolve().parent.parent / "presets"
KINDS = ("rollout", "stage_replay", "async_replay")
DEFAULT_MAX_CELLS = 10_000


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        super().__init__("\n".join(errors))
        self.errors = errors


@dataclass
class ScenarioSpec:
    name: str
    kind: str
    seed: int
    base: dict[str, Any]
    axes: list[tuple[str, list[Any]]] = field(default_factory=list)
    variants: dict[str, dict[str, dict[str, Any]]] = field(default_factory=dict)
    outputs: list[str] = field(default_factory=lambda: ["table"])
    heatmaps: list[dict[str, str]] = field(default_factory=list)
    checks: list[dict[str, Any]] = field(default_factory=list)
    max_cells: int = DEFAULT_MAX_CELLS
    description: str = ""

    def cells(self) -> list[dict[str, Any]]:
        """Axis coordinates of every cell, row-major in axis order."""
        if not self.axes:
            return [{}]
        names = [p for p, _ in self.axes]
        return [dict(zip(names, combo)) for combo in itertools.product(*(v for _, v in self.axes))]

    def cell_config(self, coords: Mapping[str, Any]) -> dict[str, Any]:
        cfg = copy.deepcopy(self.base)
        for path, value in coords.items():
            if path.startswith("variant."):
                for p, v in _flatten(self.variants[path[8:]][value]):
                    set_path(cfg, p, copy.deepcopy(v))
            else:
                set_path(cfg, path, copy.deepcopy(value))
        return cfg

    def canonical(self) -> dict[str, Any]:
        return {
            "name": self.name, "kind": self.kind, "seed": self.seed, "base": self.base,
            "axes": [[p, v] for p, v in self.axes], "variants": self.variants,
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, default=repr)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _flatten(d: Mapping[str, Any], prefix: str = "") -> list[tuple[str, Any]]:
    out = []
    for k, v in d.items():
        p = f"{prefix}.{k}" if prefix else k
        if isinstance(v, Mapping) and v:
            out.extend(_flatten(v, p))
        else:
            out.append((p, v))
    return out


def get_path(cfg: Mapping[str, Any], path: str) -> Any:
    node: Any = cfg
    for part in path.split("."):
        if not isinstance(node, Mapping) or part not in node:
            raise KeyError(path)
        node = node[part]
    return node


def has_path(cfg: Mapping[str, Any], path: str) -> bool:
    try:
        get_path(cfg, path)
        return True
    except KeyError:
        return False


def set_path(cfg: dict[str, Any], path: str, value: Any) -> None:
    parts = path.split(".")
    node = cfg
    for part in parts[:-1]:
        if node.get(part) is None:
            node[part] = {}
        node = node[part]
    node[parts[-1]] = value


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------


def load_yaml(path: str | Path) -> Any:
    with open(path) as fh:
        return yaml.safe_load(fh)


def list_presets() -> list[str]:
    return sorted(p.stem for p in PRESET_DIR.glob("*.yaml"))


def preset_path(name: str) -> Path:
    return PRESET_DIR / f"{name}.yaml"


def resolve_scenario_ref(ref: str | Path) -> Path:
    p = Path(ref)
    if p.exists():
        return p
    if preset_path(str(ref)).exists():
        return preset_path(str(ref))
    raise FileNotFoundError(f"{ref}: neither a file nor a shipped preset ({', '.join(list_presets())})")


def parse_scenario(raw: Any, errors: list[str] | None = None) -> ScenarioSpec | None:
    """Build a :class:`ScenarioSpec`; structural problems are appended to ``errors``."""
    errs: list[str] = [] if errors is None else errors
    if not isinstance(raw, Mapping):
        errs.append("scenario: expected a mapping at the top level")
        return None
    kind = raw.get("kind", "rollout")
    if kind not in KINDS:
        errs.append(f"kind: unknown scenario kind {kind!r} (expected one of {', '.join(KINDS)})")
    base = raw.get("base")
    if not isinstance(base, Mapping):
        errs.append("base: missing or not a mapping")
        base = {}
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        errs.append(f"seed: expected an integer, got {seed!r}")
        seed = 0
    axes: list[tuple[str, list[Any]]] = []
    for i, ax in enumerate(raw.get("axes") or []):
        if not isinstance(ax, Mapping) or "path" not in ax or not isinstance(ax.get("values"), list):
            errs.append(f"axes[{i}]: expected {{path, values: [...]}}")
            continue
        if not ax["values"]:
            errs.append(f"axes[{i}] ({ax['path']}): empty value list")
            continue
        axes.append((str(ax["path"]), list(ax["values"])))
    variants = raw.get("variants") or {}
    if not isinstance(variants, Mapping) or not all(
            isinstance(g, Mapping) and all(isinstance(o, Mapping) or o is None for o in g.values())
            for g in variants.values()):
        errs.append("variants: expected group -> name -> overrides mappings")
        variants = {}
    max_cells = raw.get("max_cells", DEFAULT_MAX_CELLS)
    return ScenarioSpec(
        name=str(raw.get("name", "scenario")),
        kind=kind,
        seed=seed,
        base=copy.deepcopy(dict(base)),
        axes=axes,
        variants={str(g): {str(k): dict(v or {}) for k, v in grp.items()} for g, grp in variants.items()},
        outputs=list(raw.get("outputs") or (["table", "heatmap"] if raw.get("heatmaps") else ["table"])),
        heatmaps=list(raw.get("heatmaps") or []),
        checks=list(raw.get("checks") or []),
        max_cells=int(max_cells),
        description=str(raw.get("description", "")),
    )


def load_scenario(ref: str | Path) -> ScenarioSpec:
    errors: list[str] = []
    spec = parse_scenario(load_yaml(resolve_scenario_ref(ref)), errors)
    if spec is not None:
        errors.extend(validate_scenario(spec))
    if errors:
        raise ConfigError(errors)
    return spec


# ---------------------------------------------------------------------------
# typed builders (raise ValueError with a path-prefixed message)
# ---------------------------------------------------------------------------


def _profile(kind: str, ref: Any) -> dict[str, Any]:
    if isinstance(ref, Mapping) and "profile" in ref:
        d = load_profile_dict(kind, ref["profile"])
        d.update({k: v for k, v in ref.items() if k != "profile"})
        return d
    return load_profile_dict(kind, ref)


def build_hardware(cfg: Mapping[str, Any]) -> HardwareProfile:
    return HardwareProfile.from_dict(_profile("hardware", cfg["hardware"]))


def build_model(cfg: Mapping[str, Any]) -> ModelProfile:
    return ModelProfile.from_dict(_profile("model", cfg["model"]))


@dataclass(frozen=True)
class Deployment:
    plan: ShardingPlan
    num_instances: int
    concurrency: int
    gpus: int


def _pow2_floor(n: int) -> int:
    return 1 << (max(1, n).bit_length() - 1)


def build_deployment(cfg: Mapping[str, Any], lag: int = 0) -> Deployment:
    """Sharding plan and instance count for the generation pool.

    Explicit form gives ``gpus_per_instance`` and the parallel degrees.
    ``auto`` form splits ``gpus`` into ``concurrency`` groups (largest power
    of two <= lag + 1, one in-flight rollout batch per group) and uses as
    many tensor-parallel instances per group as ``min_local_batch`` allows.
    """
    dep = dict(cfg.get("deployment") or {})
    batch = int(get_path(cfg, "rollout.global_batch"))
    penalty = float(dep.get("sharding_penalty", 0.04))
    gpus = int(dep.get("gpus", 0))
    auto = dep.get("auto")
    if auto:
        gmin = int(auto.get("min_gpus_per_instance", 1))
        min_local = int(auto.get("min_local_batch", 1))
        if gpus < gmin:
            raise ValueError(f"gpus: {gpus} GPUs cannot host a {gmin}-GPU instance")
        conc = 1
        while conc * 2 <= lag + 1 and gpus // (conc * 2) >= gmin:
            conc *= 2
        group = gpus // conc
        inst = max(1, min(group // gmin, batch // min_local))
        gpi = _pow2_floor(group // inst)
        plan = ShardingPlan(gpi, tensor_parallel=gpi, sharding_penalty=penalty)
        return Deployment(plan, inst, conc, gpus)
    gpi = int(dep.get("gpus_per_instance", 1))
    plan = ShardingPlan(
        gpi,
        tensor_parallel=int(dep.get("tensor_parallel", gpi)),
        pipeline_parallel=int(dep.get("pipeline_parallel", 1)),
        expert_parallel=int(dep.get("expert_parallel", 1)),
        sharding_penalty=penalty,
    )
    if "num_instances" in dep:
        inst = int(dep["num_instances"])
    elif gpus:
        if gpus % gpi:
            raise ValueError(f"gpus: {gpus} is not a multiple of gpus_per_instance {gpi}")
        inst = gpus // gpi
    else:
        raise ValueError("give gpus or num_instances")
    if inst < 1:
        raise ValueError("need at least one instance")
    return Deployment(plan, inst, 1, gpus or inst * gpi)


def build_traffic(cfg: Mapping[str, Any]) -> tuple[LengthDistribution, int]:
    t = dict(cfg.get("traffic") or {})
    kind = t.get("kind", "lognormal")
    max_tokens = int(t.get("max_tokens", 32768))
    prompt = int(t.get("prompt_tokens", 512))
    if prompt < 1:
        raise ValueError("traffic.prompt_tokens: must be >= 1")
    if kind == "constant":
        dist = LengthDistribution.constant(int(t["length"]), max_tokens=max(max_tokens, int(t["length"])))
    elif kind == "empirical":
        if "file" in t:
            dist = LengthDistribution.from_file(t["file"], max_tokens=t.get("max_tokens"))
        else:
            dist = LengthDistribution("empirical", max_tokens=max_tokens, samples=tuple(t["samples"]))
    elif kind == "lognormal":
        if "median_tokens" in t:
            med, p99 = float(t["median_tokens"]), float(t["p99_tokens"])
            if not 0 < med < p99:
                raise ValueError("traffic: need 0 < median_tokens < p99_tokens")
            dist = LengthDistribution.lognormal_from_quantiles(med, p99, max_tokens)
        else:
            sigma = float(t.get("sigma", float("nan")))
            if not sigma > 0:
                raise ValueError(f"traffic.sigma: lognormal sigma must be > 0, got {t.get('sigma')!r}")
            dist = LengthDistribution.lognormal(float(t["mu"]), sigma, max_tokens)
    else:
        raise ValueError(f"traffic.kind: unknown distribution {kind!r}")
    return dist, prompt


def speculation_alpha(cfg: Mapping[str, Any]) -> tuple[int, float] | None:
    s = cfg.get("speculation")
    if not s or s.get("method", "draft") == "none":
        return None
    k = int(s["k"])
    if k < 1:
        raise ValueError(f"draft length k must be >= 1, got {k}")
    return k, float(s["alpha"]) if "alpha" in s else float("nan")


def build_speculation(cfg: Mapping[str, Any]) -> SpeculationConfig | None:
    s = cfg.get("speculation")
    if not s or s.get("method", "draft") == "none":
        return None
    k = int(s["k"])
    if "alpha" in s:
        acc = AcceptanceModel.from_alpha(float(s["alpha"]), k)
    elif "beta" in s:
        acc = AcceptanceModel.iid(float(s["beta"]))
    elif "trace" in s:
        acc = AcceptanceModel.empirical(s["trace"])
    else:
        raise ValueError("speculation: give alpha, beta or trace")
    frac = s.get("draft_cost_fraction")
    return SpeculationConfig(k, acc, None if frac is None else float(frac),
                             float(s.get("cycle_overhead_s", 0.0)))


def build_pipeline(cfg: Mapping[str, Any], concurrency: int = 1) -> PipelineConfig:
    p = dict(cfg.get("pipeline") or {})
    lag = int(p.get("max_policy_lag", 0))
    mode = p.get("mode", "sync_colocated")
    if mode == "auto":
        mode = "sync_colocated" if lag == 0 else "async_noncolocated"
    pc = PipelineConfig(
        mode=mode,
        gen_nodes=int(p.get("gen_nodes", 8)),
        train_nodes=int(p.get("train_nodes", 8)),
        max_policy_lag=lag,
        num_steps=int(p.get("num_steps", 10)),
        warmup_steps=int(p.get("warmup_steps", 2)),
        transfer_latency_s=float(p.get("transfer_latency_s", 0.0)),
        gen_capacity=int(p.get("gen_capacity", concurrency)),
    )
    errs = pc.validate()
    if errs:
        raise ValueError("; ".join(f"pipeline.{e}" for e in errs))
    return pc


def non_generation_stages(cfg: Mapping[str, Any], ar_gen_s: float) -> StageTimes:
    """Non-generation stage times: absolute, or derived from a target generation share.

    A ``generation_share`` target spreads ``ar_gen_s * (1 - r) / r`` over
    data/prepare/logprob/train in the proportions of ``non_generation``
    (default: equal logprob/train split).
    """
    p = cfg.get("pipeline") or {}
    ng = p.get("non_generation") or {}
    base = StageTimes(float(ng.get("data_s", 0.0)), float(ng.get("prepare_s", 0.0)), 0.0,
                      float(ng.get("logprob_s", 0.0)), float(ng.get("train_s", 0.0)))
    share = p.get("generation_share")
    if share is None:
        return base
    r = float(share)
    if not 0 < r < 1:
        raise ValueError("pipeline.generation_share: must lie strictly between 0 and 1")
    target = ar_gen_s * (1 - r) / r
    if base.total_s == 0:
        base = StageTimes(logprob_s=1.0, train_s=1.0)
    scale = target / base.total_s
    return StageTimes(base.data_s * scale, base.prepare_s * scale, 0.0,
                      base.logprob_s * scale, base.train_s * scale)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


def _try(errors: list[str], prefix: str, fn, *args):
    try:
        return fn(*args)
    except (ValueError, KeyError, TypeError, FileNotFoundError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) else str(exc)
        if isinstance(exc, KeyError):
            msg = f"missing key {msg}"
        errors.append(f"{prefix}{msg}")
        return None


def validate_cell_config(cfg: Mapping[str, Any], kind: str, prefix: str = "") -> list[str]:
    errors: list[str] = []
    if kind == "rollout":
        _try(errors, prefix + "hardware: ", build_hardware, cfg)
        _try(errors, prefix + "model: ", build_model, cfg)
        lag = (cfg.get("pipeline") or {}).get("max_policy_lag", 0)
        dep = _try(errors, prefix + "deployment: ", build_deployment, cfg, int(lag) if isinstance(lag, int) else 0)
        _try(errors, prefix, build_traffic, cfg)
        ka = _try(errors, prefix + "speculation: ", speculation_alpha, cfg)
        # alpha above k + 1 marks an infeasible cell, not a configuration error
        if ka is None or math.isnan(ka[1]) or ka[1] <= ka[0] + 1:
            _try(errors, prefix + "speculation: ", build_speculation, cfg)
        _try(errors, prefix, build_pipeline, cfg, dep.concurrency if dep else 1)
        _try(errors, prefix, non_generation_stages, cfg, 1.0)
    elif kind == "stage_replay":
        wls = cfg.get("workloads")
        if not isinstance(wls, Mapping) or not wls:
            errors.append(prefix + "workloads: expected a non-empty mapping")
        else:
            for name, wl in wls.items():
                for mode in ("ar", "spec"):
                    _try(errors, f"{prefix}workloads.{name}.{mode}: ", lambda d: StageTimes(**d), (wl or {}).get(mode, {}))
    elif kind == "async_replay":
        cal = cfg.get("calibration") or {}
        e, s = cal.get("exposed_gen_s"), cal.get("effective_step_s")
        if not (isinstance(e, (int, float)) and isinstance(s, (int, float)) and 0 < e < s):
            errors.append(prefix + "calibration: need 0 < exposed_gen_s < effective_step_s")
        rs = cfg.get("rollout_speedup")
        if not (isinstance(rs, (int, float)) and rs > 0):
            errors.append(prefix + "rollout_speedup: must be a positive number")
        if cfg.get("speculative_training_side", "reference") not in ("reference", "baseline"):
            errors.append(prefix + "speculative_training_side: expected reference or baseline")
        p = cfg.get("pipeline") or {}
        if int(p.get("max_policy_lag", 1)) < 1:
            errors.append(prefix + "pipeline.max_policy_lag: async replay needs lag >= 1")
        for mode in ("ar", "spec"):
            _try(errors, f"{prefix}sync_reference.{mode}: ", lambda d: StageTimes(**d),
                 (cfg.get("sync_reference") or {}).get(mode, {}))
    return errors


def validate_scenario(spec: ScenarioSpec) -> list[str]:
    errors: list[str] = []
    for path, values in spec.axes:
        if path.startswith("variant."):
            group = spec.variants.get(path[8:])
            if group is None:
                errors.append(f"axes: unknown variant group {path[8:]!r}")
                continue
            for v in values:
                if v not in group:
                    errors.append(f"axes.{path}: unknown variant {v!r}")
        elif not has_path(spec.base, path):
            errors.append(f"axes: path {path!r} does not exist in base config")
    n = 1
    for _, v in spec.axes:
        n *= len(v)
    if n > spec.max_cells:
        errors.append(f"axes: {n} cells exceed the cap of {spec.max_cells} (raise max_cells to override)")
    if errors:
        return errors + validate_cell_config(spec.base, spec.kind)
    seen: set[str] = set()
    for coords in spec.cells():
        label = ", ".join(f"{k}={v}" for k, v in coords.items())
        for e in validate_cell_config(spec.cell_config(coords), spec.kind, f"[{label}] " if label else ""):
            # report each distinct violation once, tagged with the first offending cell
            key = e.split("] ", 1)[-1]
            if key not in seen:
                seen.add(key)
                errors.append(e)
    return errors


def _validate_profile_file(data: Mapping[str, Any]) -> list[str]:
    errors: list[str] = []
    builders = {"hardware": HardwareProfile.from_dict, "model": ModelProfile.from_dict,
                "sharding": ShardingPlan.from_dict}
    found = False
    for key, fn in builders.items():
        if key in data:
            found = True
            _try(errors, f"{key}: ", fn, data[key])
    if not found:
        errors.append("profile: expected a hardware, model or sharding section")
    return errors


def validate_config(paths: list[str | Path]) -> list[str]:
    """Validate scenario and profile files; returns every violation (empty when valid)."""
    errors: list[str] = []
    for ref in paths:
        try:
            path = resolve_scenario_ref(ref)
            raw = load_yaml(path)
        except (OSError, yaml.YAMLError) as exc:
            errors.append(f"{ref}: cannot load ({exc})")
            continue
        tag = f"{ref}: "
        if isinstance(raw, Mapping) and ("base" in raw or "kind" in raw):
            local: list[str] = []
            spec = parse_scenario(raw, local)
            if spec is not None and not local:
                local.extend(validate_scenario(spec))
            errors.extend(tag + e for e in local)
        elif isinstance(raw, Mapping):
            errors.extend(tag + e for e in _validate_profile_file(raw))
        else:
            errors.append(tag + "expected a mapping at the top level")
    return errors
