"""Step-level scheduling of RL training under synchronous or asynchronous execution.

Synchronous colocated mode runs data -> prepare -> generation -> logprob ->
train serially. Asynchronous non-colocated mode splits the work over two
pools: the generation pool produces rollout batches, the training pool
consumes them in step order (data, logprob, train, then prepare which
publishes the next policy version). Generation of batch ``i`` may not start
before policy version ``i - max_policy_lag`` has been published and
transferred, so batches are at most ``max_policy_lag`` versions stale.

Everything runs on a virtual clock; a run is a pure function of its inputs.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from .analytic import StageTimes

Mode = Literal["sync_colocated", "async_noncolocated"]
GEN_POOL = "generation"
TRAIN_POOL = "training"
SHARED_POOL = "shared"


class PipelineConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    mode: Mode = "sync_colocated"
    gen_nodes: int = 8
    train_nodes: int = 8
    max_policy_lag: int = 0
    num_steps: int = 10
    warmup_steps: int = 2
    transfer_latency_s: float = 0.0
    # concurrent rollout batches the generation pool may hold
    gen_capacity: int = 1

    def validate(self) -> list[str]:
        errs = []
        if self.mode not in ("sync_colocated", "async_noncolocated"):
            errs.append(f"mode: unknown mode {self.mode!r}")
        if self.max_policy_lag < 0:
            errs.append("max_policy_lag: must be >= 0")
        if self.num_steps < 1:
            errs.append("num_steps: must be >= 1")
        if self.warmup_steps < 0:
            errs.append("warmup_steps: must be >= 0")
        if self.transfer_latency_s < 0:
            errs.append("transfer_latency_s: must be >= 0")
        if self.gen_capacity < 1:
            errs.append("gen_capacity: must be >= 1")
        if self.mode == "async_noncolocated":
            if self.gen_nodes < 1 or self.train_nodes < 1:
                errs.append("gen_nodes/train_nodes: async mode needs both pools non-empty")
            if self.max_policy_lag < 1:
                errs.append("max_policy_lag: async mode needs lag >= 1 (lag 0 is synchronous)")
        return errs


@dataclass(frozen=True)
class StageInterval:
    step: int
    stage: str
    pool: str
    start_s: float
    end_s: float
    policy_version: int


@dataclass
class StepTrace:
    intervals: list[StageInterval]
    policy_version_used: np.ndarray
    exposed_gen_s: np.ndarray
    step_end_s: np.ndarray
    max_policy_lag: int
    mode: str
    warmup_steps: int

    @property
    def num_steps(self) -> int:
        return self.step_end_s.size

    @property
    def makespan_s(self) -> float:
        return float(self.step_end_s[-1])

    def _window(self) -> int:
        w = self.warmup_steps
        return w if self.num_steps - w >= 1 and w >= 1 else 0

    @property
    def effective_step_s(self) -> float:
        """Steady-state seconds per step, excluding the warmup steps."""
        w = self._window()
        if w == 0:
            return self.makespan_s / self.num_steps
        return float(self.step_end_s[-1] - self.step_end_s[w - 1]) / (self.num_steps - w)

    @property
    def steady_exposed_gen_s(self) -> float:
        return float(np.mean(self.exposed_gen_s[self._window():]))

    def pool_busy_s(self, pool: str) -> float:
        return sum(iv.end_s - iv.start_s for iv in self.intervals if iv.pool == pool)

    def pool_idle_s(self, pool: str) -> float:
        """Sum of gaps on ``pool`` between time 0 and the makespan."""
        ivs = sorted((iv for iv in self.intervals if iv.pool == pool), key=lambda iv: iv.start_s)
        idle, t = 0.0, 0.0
        for iv in ivs:
            idle += max(0.0, iv.start_s - t)
            t = max(t, iv.end_s)
        return idle + max(0.0, self.makespan_s - t)

    def pools(self) -> list[str]:
        return sorted({iv.pool for iv in self.intervals})

    def check_invariants(self) -> None:
        idx = np.arange(self.num_steps)
        if np.any(self.policy_version_used < idx - self.max_policy_lag):
            raise AssertionError("policy lag bound violated")
        if np.any(self.exposed_gen_s < -1e-9):
            raise AssertionError("negative exposed generation time")
        for pool in self.pools():
            ivs = sorted((iv for iv in self.intervals if iv.pool == pool and iv.end_s > iv.start_s),
                         key=lambda iv: iv.start_s)
            for a, b in zip(ivs, ivs[1:]):
                if b.start_s < a.end_s - 1e-9 and pool != GEN_POOL:
                    raise AssertionError(f"overlapping stages on pool {pool}")

    def timeline_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "stage", "pool", "start_s", "end_s", "policy_version"])
        for iv in self.intervals:
            w.writerow([iv.step, iv.stage, iv.pool, f"{iv.start_s:.6f}", f"{iv.end_s:.6f}", iv.policy_version])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "mode": self.mode,
            "num_steps": self.num_steps,
            "max_policy_lag": self.max_policy_lag,
            "makespan_s": round(self.makespan_s, 6),
            "effective_step_s": round(self.effective_step_s, 6),
            "exposed_gen_s": round(self.steady_exposed_gen_s, 6),
            "effective_generation_share": round(effective_generation_share(self), 6),
        }

    def summary_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True, indent=2) + "\n"


def _per_step(times: StageTimes | Sequence[StageTimes], n: int) -> list[StageTimes]:
    if isinstance(times, StageTimes):
        return [times] * n
    times = list(times)
    if len(times) != n:
        raise PipelineConfigError(f"need {n} per-step stage times, got {len(times)}")
    return times


def run_sync(config: PipelineConfig, stage_times: StageTimes | Sequence[StageTimes]) -> StepTrace:
    if config.mode != "sync_colocated":
        raise PipelineConfigError("run_sync requires mode sync_colocated")
    errs = config.validate()
    if errs:
        raise PipelineConfigError("; ".join(errs))
    steps = _per_step(stage_times, config.num_steps)
    intervals: list[StageInterval] = []
    ends, exposed = [], []
    t = 0.0
    for i, st in enumerate(steps):
        for stage, dur in (("data", st.data_s), ("prepare", st.prepare_s), ("generation", st.gen_s),
                           ("logprob", st.logprob_s), ("train", st.train_s)):
            intervals.append(StageInterval(i, stage, SHARED_POOL, t, t + dur, i))
            t += dur
        ends.append(t)
        exposed.append(st.gen_s)
    return StepTrace(intervals, np.arange(config.num_steps), np.array(exposed), np.array(ends),
                     0, config.mode, config.warmup_steps)


def simulate_pipeline(config: PipelineConfig, stage_times: StageTimes | Sequence[StageTimes],
                      lag: int) -> StepTrace:
    """Two-pool schedule for any ``lag >= 0``.

    ``lag = 0`` forces generation of batch ``i`` to wait for version ``i``,
    i.e. a fully serial schedule equal in length to :func:`run_sync`.
    """
    steps = _per_step(stage_times, config.num_steps)
    n = config.num_steps
    intervals: list[StageInterval] = []
    publish = [0.0]  # publish[v]: time version v is available to the generation pool
    gen_end = np.zeros(n)
    gen_slots = [0.0] * config.gen_capacity
    version_used = np.zeros(n, dtype=np.int64)
    exposed = np.zeros(n)
    step_end = np.zeros(n)
    train_free = 0.0
    next_gen = 0

    def launch_generation(i: int) -> None:
        need = max(0, i - lag)
        slot = int(np.argmin(gen_slots))
        start = max(gen_slots[slot], publish[need])
        # newest version already available at launch
        v = max(u for u in range(len(publish)) if publish[u] <= start)
        version_used[i] = v
        end = start + steps[i].gen_s
        gen_slots[slot] = end
        gen_end[i] = end
        intervals.append(StageInterval(i, "generation", GEN_POOL, start, end, v))

    for i in range(n):
        # launch every batch whose lag requirement is already published
        while next_gen < n and max(0, next_gen - lag) < len(publish):
            launch_generation(next_gen)
            next_gen += 1
        st = steps[i]
        t0 = train_free
        ready = gen_end[i]
        exposed[i] = max(0.0, ready - t0)
        t = max(t0, ready)
        for stage, dur in (("data", st.data_s), ("logprob", st.logprob_s), ("train", st.train_s),
                           ("prepare", st.prepare_s)):
            intervals.append(StageInterval(i, stage, TRAIN_POOL, t, t + dur, i))
            t += dur
        train_free = t
        step_end[i] = t
        publish.append(t + config.transfer_latency_s)

    return StepTrace(intervals, version_used, exposed, step_end, lag, config.mode, config.warmup_steps)


def run_async(config: PipelineConfig, stage_times: StageTimes | Sequence[StageTimes]) -> StepTrace:
    if config.mode != "async_noncolocated":
        raise PipelineConfigError("run_async requires mode async_noncolocated")
    errs = config.validate()
    if errs:
        raise PipelineConfigError("; ".join(errs))
    return simulate_pipeline(config, stage_times, config.max_policy_lag)


def run(config: PipelineConfig, stage_times: StageTimes | Sequence[StageTimes]) -> StepTrace:
    if config.mode == "sync_colocated":
        return run_sync(config, stage_times)
    return run_async(config, stage_times)


def effective_generation_share(trace: StepTrace) -> float:
    """Exposed generation time over elapsed time, in the steady-state window."""
    step = trace.effective_step_s
    if step <= 0:
        return 0.0
    return trace.steady_exposed_gen_s / step


@dataclass(frozen=True)
class AsyncCalibration:
    gen_s: float
    train_side_s: float


def calibrate_async(exposed_gen_s: float, effective_step_s: float) -> AsyncCalibration:
    """Invert the steady-state lag >= 1 overlap equations for a generation-bound pipeline.

    With one batch in flight the generation pool is the bottleneck whenever
    it is exposed at all, so ``step = gen`` and ``exposed = gen - train_side``.
    """
    if not 0 < exposed_gen_s < effective_step_s:
        raise ValueError("need 0 < exposed < effective step to calibrate a generation-bound pipeline")
    return AsyncCalibration(gen_s=effective_step_s, train_side_s=effective_step_s - exposed_gen_s)


def calibrated_stage_times(cal: AsyncCalibration, template: StageTimes | None = None) -> StageTimes:
    """Spread the calibrated training-side time over stages in ``template``'s proportions."""
    if template is None:
        return StageTimes(gen_s=cal.gen_s, train_s=cal.train_side_s)
    side = template.non_generation_s
    scale = cal.train_side_s / side
    return StageTimes(template.data_s * scale, template.prepare_s * scale, cal.gen_s,
                      template.logprob_s * scale, template.train_s * scale)


@dataclass
class ModeReport:
    """2 x 2 grid of effective step times: {sync, async} x {autoregressive, speculative}."""

    step_s: dict[tuple[str, str], float]
    exposed_s: dict[tuple[str, str], float]

    def speedup(self, mode: str) -> float:
        return self.step_s[(mode, "ar")] / self.step_s[(mode, "spec")]

    def rows(self) -> list[dict]:
        out = []
        for mode in ("sync", "async"):
            out.append({
                "mode": mode,
                "ar_step_s": self.step_s[(mode, "ar")],
                "spec_step_s": self.step_s[(mode, "spec")],
                "ar_exposed_gen_s": self.exposed_s[(mode, "ar")],
                "spec_exposed_gen_s": self.exposed_s[(mode, "spec")],
                "speedup": self.speedup(mode),
            })
        return out


def compare_modes(sync_ar: StageTimes, sync_spec: StageTimes, async_ar: StageTimes,
                  async_spec: StageTimes, sync_config: PipelineConfig | None = None,
                  async_config: PipelineConfig | None = None) -> ModeReport:
    sync_config = sync_config or PipelineConfig(mode="sync_colocated")
    async_config = async_config or PipelineConfig(mode="async_noncolocated", gen_nodes=12,
                                                  train_nodes=4, max_policy_lag=1)
    step, exp = {}, {}
    for key, cfg, times in ((("sync", "ar"), sync_config, sync_ar), (("sync", "spec"), sync_config, sync_spec),
                            (("async", "ar"), async_config, async_ar), (("async", "spec"), async_config, async_spec)):
        tr = run(cfg, times)
        step[key] = tr.effective_step_s
        exp[key] = tr.steady_exposed_gen_s
    return ModeReport(step, exp)
