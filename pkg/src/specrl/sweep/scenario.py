"""Evaluate a scenario over the cross-product of its axes.

Each cell is seeded from the scenario seed and its coordinate *values*, so a
cell's result does not depend on axis order, cell order or thread count.
Response lengths depend only on the traffic block (common random numbers
across cells), and the autoregressive baseline of a deployment is simulated
once and shared by every cell that needs it.
"""

from __future__ import annotations

import json
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from .. import __version__
from ..analytic import StageTimes, amdahl_step_bound, generation_share
from ..cost_model import CapacityError, RooflineCost, check_capacity
from ..pipeline import (
    PipelineConfig,
    StepTrace,
    calibrate_async,
    calibrated_stage_times,
    effective_generation_share,
    run,
)
from ..rng import derive_seed, make_rng
from ..rollout import RolloutPlan, RolloutResult, sample_lengths, simulate_rollout
from .config import (
    ScenarioSpec,
    build_deployment,
    build_hardware,
    build_model,
    build_pipeline,
    build_speculation,
    build_traffic,
    get_path,
    non_generation_stages,
    speculation_alpha,
)


@dataclass
class CellRecord:
    coords: dict[str, Any]
    values: dict[str, Any] = field(default_factory=dict)
    feasible: bool = True
    reason: str = ""
    # large in-memory outputs (timelines, occupancy); not part of the JSON summary
    artifacts: dict[str, str] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        return {"coords": self.coords, "feasible": self.feasible, "reason": self.reason,
                "values": self.values}


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


@dataclass
class SweepResult:
    spec: ScenarioSpec
    cells: list[CellRecord]
    checks: list[CheckResult] = field(default_factory=list)

    @property
    def axis_names(self) -> list[str]:
        return [p for p, _ in self.spec.axes] or list(self.cells[0].coords)

    def provenance(self) -> dict[str, Any]:
        return {"config_hash": self.spec.config_hash(), "seed": self.spec.seed,
                "version": __version__, "kind": self.spec.kind, "num_cells": len(self.cells)}

    def value_fields(self) -> list[str]:
        seen: dict[str, None] = {}
        for c in self.cells:
            for k in c.values:
                seen.setdefault(k, None)
        return list(seen)

    def lookup(self, **coords: Any) -> CellRecord:
        for c in self.cells:
            if all(c.coords.get(k) == v for k, v in coords.items()):
                return c
        raise KeyError(coords)

    def summary(self) -> dict[str, Any]:
        return {
            "scenario": self.spec.name,
            "provenance": self.provenance(),
            "axes": [[p, v] for p, v in self.spec.axes],
            "cells": [c.to_json() for c in self.cells],
            "checks": [{"name": c.name, "passed": c.passed, "detail": c.detail} for c in self.checks],
        }

    def summary_json(self) -> str:
        return json.dumps(_plain(self.summary()), sort_keys=True, indent=2) + "\n"


def _plain(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def cell_seed(seed: int, coords: Mapping[str, Any]) -> int:
    return derive_seed(seed, "cell", sorted(coords.items()))


def _canon(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, default=repr)


class _BaselineCache:
    """Thread-safe memo keyed by canonical JSON; each key is computed once."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._locks: dict[str, threading.Lock] = {}
        self._data: dict[str, Any] = {}

    def get(self, key: str, compute):
        with self._lock:
            lock = self._locks.setdefault(key, threading.Lock())
        with lock:
            if key not in self._data:
                self._data[key] = compute()
            return self._data[key]


class ScenarioRunner:
    def __init__(self, spec: ScenarioSpec, threads: int = 1):
        self.spec = spec
        self.threads = max(1, int(threads))
        self._cache = _BaselineCache()

    def run(self) -> SweepResult:
        coords = self._coords()
        fn = {"rollout": self._rollout_cell, "stage_replay": self._replay_cell,
              "async_replay": self._async_cell}[self.spec.kind]
        if self.threads > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                cells = list(pool.map(fn, coords))
        else:
            cells = [fn(c) for c in coords]
        result = SweepResult(self.spec, cells)
        from .checks import run_checks

        result.checks = run_checks(result)
        return result

    def _coords(self) -> list[dict[str, Any]]:
        if self.spec.kind == "stage_replay" and not self.spec.axes:
            return [{"workload": w} for w in self.spec.base["workloads"]]
        return self.spec.cells()

    # -- rollout -----------------------------------------------------------

    def _lengths(self, cfg: Mapping[str, Any], dist, batch: int) -> np.ndarray:
        key = _canon({"traffic": cfg.get("traffic"), "batch": batch})
        return self._cache.get("len:" + key, lambda: sample_lengths(
            dist, batch, make_rng(self.spec.seed, "lengths", cfg.get("traffic"))))

    def _rollout_cell(self, coords: dict[str, Any]) -> CellRecord:
        cfg = self.spec.cell_config(coords)
        rec = CellRecord(dict(coords))
        ka = speculation_alpha(cfg)
        if ka is not None:
            k, alpha = ka
            rec.values.update(k=k, alpha_target=alpha)
            if alpha > k + 1:
                rec.feasible = False
                rec.reason = f"alpha {alpha:g} exceeds k + 1 = {k + 1}"
                return rec
        hw, model = build_hardware(cfg), build_model(cfg)
        lag = int((cfg.get("pipeline") or {}).get("max_policy_lag", 0))
        dep = build_deployment(cfg, lag)
        try:
            check_capacity(hw, model, dep.plan)
        except CapacityError as exc:
            rec.feasible = False
            rec.reason = str(exc)
            return rec
        dist, prompt = build_traffic(cfg)
        batch = int(get_path(cfg, "rollout.global_batch"))
        lengths = self._lengths(cfg, dist, batch)
        cost = RooflineCost(hw, model, dep.plan)
        seed = cell_seed(self.spec.seed, coords)

        ar_key = _canon({"hw": cfg["hardware"], "model": cfg["model"], "plan": repr(dep.plan),
                         "inst": dep.num_instances, "traffic": cfg.get("traffic"), "batch": batch,
                         "prompt": prompt})
        ar: RolloutResult = self._cache.get("ar:" + ar_key, lambda: simulate_rollout(
            RolloutPlan(batch, dep.num_instances, None, prompt), dist, cost, lengths=lengths))
        spec_cfg = build_speculation(cfg)
        if spec_cfg is None:
            sp = ar
        else:
            sp = simulate_rollout(RolloutPlan(batch, dep.num_instances, spec_cfg, prompt),
                                  dist, cost, seed=seed, lengths=lengths)
        speedup = ar.rollout_latency / sp.rollout_latency
        rec.values.update(
            gpus_per_instance=dep.plan.gpus_per_instance,
            num_instances=dep.num_instances,
            concurrency=dep.concurrency,
            local_batch=int(np.ceil(batch / dep.num_instances)),
            rollout_ar_s=ar.rollout_latency,
            rollout_spec_s=sp.rollout_latency,
            rollout_speedup=speedup,
            alpha_realized=sp.mean_alpha,
            tokens=sp.total_tokens,
            tokens_ar=ar.total_tokens,
            tokens_sampled=int(lengths.sum()),
        )

        pcfg = build_pipeline(cfg, dep.concurrency)
        ng = non_generation_stages(cfg, ar.rollout_latency)
        t_ar, t_sp = ng.with_gen(ar.rollout_latency), ng.with_gen(sp.rollout_latency)
        tr_ar, tr_sp = run(pcfg, t_ar), run(pcfg, t_sp)
        e2e = tr_ar.effective_step_s / tr_sp.effective_step_s
        r_gen = generation_share(t_ar)
        rec.values.update(
            mode=pcfg.mode,
            generation_share=r_gen,
            effective_generation_share=effective_generation_share(tr_ar),
            step_ar_s=tr_ar.effective_step_s,
            step_spec_s=tr_sp.effective_step_s,
            exposed_gen_spec_s=tr_sp.steady_exposed_gen_s,
            e2e_speedup=e2e,
            amdahl_bound=amdahl_step_bound(r_gen, max(1.0, speedup)),
        )
        return rec

    # -- stage replay ------------------------------------------------------

    def _replay_cell(self, coords: dict[str, Any]) -> CellRecord:
        cfg = self.spec.cell_config(coords)
        name = coords.get("workload") or cfg.get("workload")
        wl = cfg["workloads"][name]
        ar, sp = StageTimes(**wl["ar"]), StageTimes(**wl["spec"])
        rec = CellRecord(dict(coords))
        for stage, v in ar.as_dict().items():
            rec.values[f"ar_{stage}"] = v
        for stage, v in sp.as_dict().items():
            rec.values[f"spec_{stage}"] = v
        r = generation_share(ar)
        gen_speedup = ar.gen_s / sp.gen_s
        rec.values.update(
            ar_total_s=ar.total_s,
            spec_total_s=sp.total_s,
            gen_speedup=gen_speedup,
            step_speedup=ar.total_s / sp.total_s,
            generation_share=r,
            amdahl_bound=amdahl_step_bound(r, gen_speedup),
        )
        if "alpha" in wl:
            rec.values["alpha"] = float(wl["alpha"])
            rec.values["amdahl_bound_alpha"] = amdahl_step_bound(r, float(wl["alpha"]))
        return rec

    # -- async replay ------------------------------------------------------

    def _async_cell(self, coords: dict[str, Any]) -> CellRecord:
        cfg = self.spec.cell_config(coords)
        cal_cfg = cfg["calibration"]
        cal = calibrate_async(float(cal_cfg["exposed_gen_s"]), float(cal_cfg["effective_step_s"]))
        ref = cfg["sync_reference"]
        sync_ar, sync_sp = StageTimes(**ref["ar"]), StageTimes(**ref["spec"])
        async_ar = calibrated_stage_times(cal, sync_ar)
        gen_sp = async_ar.gen_s / float(cfg["rollout_speedup"])
        side = cfg.get("speculative_training_side", "reference")
        if side == "reference":
            # the speculative run's own non-generation stages, on the calibrated scale
            scale = cal.train_side_s / sync_ar.non_generation_s
            async_sp = StageTimes(sync_sp.data_s * scale, sync_sp.prepare_s * scale, gen_sp,
                                  sync_sp.logprob_s * scale, sync_sp.train_s * scale)
        elif side == "baseline":
            async_sp = async_ar.with_gen(gen_sp)
        else:
            raise ValueError(f"speculative_training_side: expected reference or baseline, got {side!r}")
        p = dict(cfg.get("pipeline") or {})
        acfg = PipelineConfig(
            mode="async_noncolocated",
            gen_nodes=int(p.get("gen_nodes", 12)),
            train_nodes=int(p.get("train_nodes", 4)),
            max_policy_lag=int(p.get("max_policy_lag", 1)),
            num_steps=int(p.get("num_steps", 10)),
            warmup_steps=int(p.get("warmup_steps", 2)),
            transfer_latency_s=float(p.get("transfer_latency_s", 0.0)),
        )
        scfg = PipelineConfig(mode="sync_colocated", num_steps=acfg.num_steps, warmup_steps=acfg.warmup_steps)
        traces: dict[str, StepTrace] = {
            "sync_ar": run(scfg, sync_ar), "sync_spec": run(scfg, sync_sp),
            "async_ar": run(acfg, async_ar), "async_spec": run(acfg, async_sp),
        }
        for tr in traces.values():
            tr.check_invariants()
        rec = CellRecord(dict(coords))
        rec.values.update(
            calibrated_gen_s=cal.gen_s,
            calibrated_train_side_s=cal.train_side_s,
            rollout_speedup=float(cfg["rollout_speedup"]),
        )
        for key, tr in traces.items():
            rec.values[f"{key}_step_s"] = tr.effective_step_s
            rec.values[f"{key}_exposed_gen_s"] = tr.steady_exposed_gen_s
        sync_speedup = traces["sync_ar"].effective_step_s / traces["sync_spec"].effective_step_s
        async_speedup = traces["async_ar"].effective_step_s / traces["async_spec"].effective_step_s
        rec.values.update(
            sync_speedup=sync_speedup,
            async_speedup=async_speedup,
            async_effective_generation_share=effective_generation_share(traces["async_ar"]),
        )
        rec.artifacts = {f"timeline_{k}": tr.timeline_csv() for k, tr in traces.items()}
        return rec


def run_scenario(spec: ScenarioSpec, threads: int = 1) -> SweepResult:
    return ScenarioRunner(spec, threads).run()
