"""Batch-level simulation of one rollout phase.

Response lengths are sampled once per rollout and partitioned round-robin over
serving instances. Each instance decodes with continuous batching: finished
sequences leave the live batch immediately and nothing refills it. With
speculation every cycle costs ``verify + draft + overhead`` for the live batch
and each live sequence advances by its sampled emitted-token count, capped at
its remaining length.

Sequences advance independently of each other (only cycle *cost* depends on
the live set), so per-sequence trajectories are drawn first from per-sequence
Philox streams and the per-cycle live batch and resident context are then
aggregated in one vectorized pass.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal, Protocol, Sequence

import numpy as np
from scipy import stats

from .analytic import AcceptanceModel
from .rng import derive_seed, make_rng, philox


class CostProvider(Protocol):
    def prefill(self, tokens) -> float: ...
    def decode(self, batch, context): ...
    def verify(self, batch, context, k: int): ...
    def draft(self, k: int, base_decode, fraction: float | None = None): ...


@dataclass(frozen=True)
class LengthDistribution:
    kind: Literal["lognormal", "empirical", "constant"]
    max_tokens: int
    mu: float | None = None
    sigma: float | None = None
    samples: tuple[int, ...] | None = None
    length: int | None = None

    def __post_init__(self) -> None:
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if self.kind == "lognormal":
            if self.mu is None or not math.isfinite(self.mu):
                raise ValueError("lognormal needs a finite mu")
            if self.sigma is None or not self.sigma > 0:
                raise ValueError("lognormal sigma must be > 0")
        elif self.kind == "empirical":
            if not self.samples or min(self.samples) < 1:
                raise ValueError("empirical lengths must be a non-empty list of positive integers")
            object.__setattr__(self, "samples", tuple(int(s) for s in self.samples))
        elif self.kind == "constant":
            if self.length is None or self.length < 1:
                raise ValueError("constant length must be >= 1")
        else:
            raise ValueError(f"unknown length distribution {self.kind!r}")

    @classmethod
    def constant(cls, length: int, max_tokens: int | None = None) -> LengthDistribution:
        return cls("constant", max_tokens=max_tokens or length, length=length)

    @classmethod
    def lognormal(cls, mu: float, sigma: float, max_tokens: int) -> LengthDistribution:
        return cls("lognormal", max_tokens=max_tokens, mu=mu, sigma=sigma)

    @classmethod
    def lognormal_from_quantiles(cls, median: float, p99: float, max_tokens: int) -> LengthDistribution:
        """Fit ``mu, sigma`` so the untruncated median and 99th percentile match."""
        if not 0 < median < p99:
            raise ValueError("need 0 < median < p99")
        sigma = math.log(p99 / median) / stats.norm.ppf(0.99)
        return cls.lognormal(math.log(median), sigma, max_tokens)

    @classmethod
    def from_file(cls, path: str | Path, max_tokens: int | None = None) -> LengthDistribution:
        """One integer length per line; blank lines and ``#`` comments ignored."""
        vals = []
        for line in Path(path).read_text().splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                vals.append(int(line))
        return cls("empirical", max_tokens=max_tokens or max(vals), samples=tuple(vals))

    def quantile(self, q: float) -> float:
        """Quantile of the capped distribution (lognormal only)."""
        if self.kind != "lognormal":
            raise NotImplementedError("closed-form quantiles exist for lognormal only")
        return min(float(self.max_tokens), float(stats.lognorm.ppf(q, s=self.sigma, scale=math.exp(self.mu))))


def sample_lengths(dist: LengthDistribution, n: int, rng: np.random.Generator) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    if dist.kind == "constant":
        raw = np.full(n, dist.length, dtype=np.int64)
    elif dist.kind == "empirical":
        raw = rng.choice(np.asarray(dist.samples, dtype=np.int64), size=n, replace=True)
    else:
        raw = np.ceil(rng.lognormal(dist.mu, dist.sigma, size=n)).astype(np.int64)
    return np.clip(raw, 1, dist.max_tokens)


@dataclass(frozen=True)
class SpeculationConfig:
    k: int
    acceptance: AcceptanceModel
    # overrides the model's draft_cost_fraction when set
    draft_cost_fraction: float | None = None
    # fixed host-side cost per cycle (n-gram lookup, scheduling)
    cycle_overhead_s: float = 0.0

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("draft length k must be >= 1")
        if self.cycle_overhead_s < 0:
            raise ValueError("cycle_overhead_s must be >= 0")
        if self.draft_cost_fraction is not None and self.draft_cost_fraction < 0:
            raise ValueError("draft_cost_fraction must be >= 0")
        self.acceptance.validate_for(self.k)

    @classmethod
    def from_alpha(cls, k: int, alpha: float, **kw) -> SpeculationConfig:
        return cls(k, AcceptanceModel.from_alpha(alpha, k), **kw)


@dataclass(frozen=True)
class RolloutPlan:
    global_batch: int = 4096
    num_instances: int = 1
    speculation: SpeculationConfig | None = None
    prompt_tokens: int = 512

    def __post_init__(self) -> None:
        if self.global_batch < 1 or self.num_instances < 1:
            raise ValueError("global_batch and num_instances must be >= 1")
        if self.num_instances > self.global_batch:
            raise ValueError("more instances than sequences")
        if self.prompt_tokens < 1:
            raise ValueError("prompt_tokens must be >= 1")

    def assignment(self) -> np.ndarray:
        """Instance index of every sequence (round-robin)."""
        return np.arange(self.global_batch) % self.num_instances


@dataclass
class InstanceResult:
    latency_s: float
    prefill_s: float
    cycles: int
    sequence_cycles: int
    tokens: int
    occupancy_t: np.ndarray = field(repr=False)
    occupancy_live: np.ndarray = field(repr=False)

    @property
    def mean_alpha(self) -> float:
        return self.tokens / self.sequence_cycles if self.sequence_cycles else 1.0

    def busy_integral(self) -> float:
        """Integral of live batch size over decode time (sequence-seconds)."""
        dt = np.diff(np.append(self.occupancy_t, self.latency_s))
        return float(np.dot(dt, self.occupancy_live))


@dataclass
class RolloutResult:
    per_instance_latency: np.ndarray
    rollout_latency: float
    total_decode_cycles: int
    mean_alpha: float
    total_tokens: int
    lengths: np.ndarray = field(repr=False)
    instances: list[InstanceResult] = field(repr=False)

    @property
    def occupancy_curve(self) -> tuple[np.ndarray, np.ndarray]:
        """Global live-sequence count as a step function of time."""
        events_t = [np.array([0.0])]
        events_d = [np.array([0.0])]
        for inst in self.instances:
            live = inst.occupancy_live
            if live.size == 0:
                continue
            delta = np.diff(np.concatenate([[0.0], live, [0.0]]))
            times = np.concatenate([[0.0], inst.occupancy_t[1:], [inst.latency_s]])
            events_t.append(times)
            events_d.append(delta)
        t = np.concatenate(events_t)
        d = np.concatenate(events_d)
        order = np.argsort(t, kind="stable")
        t, d = t[order], d[order]
        ut, inv = np.unique(t, return_inverse=True)
        level = np.cumsum(np.bincount(inv, weights=d))
        return ut, np.round(level).astype(np.int64)

    def utilization(self) -> float:
        """Mean over instances of time-averaged live batch / initial batch, measured
        over the whole rollout (instances that finish early count as idle)."""
        vals = []
        for inst in self.instances:
            peak = inst.occupancy_live.max() if inst.occupancy_live.size else 0
            if peak == 0:
                continue
            vals.append(inst.busy_integral() / (peak * (self.rollout_latency - inst.prefill_s)))
        return float(np.mean(vals))

    def occupancy_csv(self) -> str:
        t, live = self.occupancy_curve
        rows = ["time_s,live_sequences"] + [f"{a:.9g},{b}" for a, b in zip(t, live)]
        return "\n".join(rows) + "\n"


def _emitted_counts(u: np.ndarray, spec: SpeculationConfig, start: int) -> np.ndarray:
    """Tokens emitted per cycle (accepted + 1) for uniforms ``u`` of cycles ``start..``."""
    acc = spec.acceptance
    k = spec.k
    if acc.kind == "iid":
        b = acc.beta
        if b <= 0.0:
            a = np.zeros(u.size, dtype=np.int64)
        elif b >= 1.0:
            a = np.full(u.size, k, dtype=np.int64)
        else:
            # number of leading successes: P(a >= j) = b**j; monotone in b for fixed u
            with np.errstate(divide="ignore"):
                a = np.floor(np.log(u) / math.log(b))
            a = np.minimum(np.nan_to_num(a, posinf=k), k).astype(np.int64)
        return a + 1
    if acc.kind == "fixed":
        t = np.arange(start, start + u.size, dtype=np.float64)
        return (np.floor((t + 1) * acc.alpha + 1e-9) - np.floor(t * acc.alpha + 1e-9)).astype(np.int64)
    trace = np.minimum(np.asarray(acc.trace, dtype=np.int64), k)
    return trace[np.minimum((u * trace.size).astype(np.int64), trace.size - 1)] + 1


def sequence_emissions(length: int, spec: SpeculationConfig, gen: np.random.Generator) -> np.ndarray:
    """Per-cycle emitted tokens for one sequence until ``length`` tokens exist."""
    expected = spec.acceptance.expected_alpha(spec.k)
    chunks = []
    total = 0
    drawn = 0
    guess = min(length, int(length / expected * 1.15) + 16)
    while total < length:
        m = guess if drawn == 0 else max(16, length - total)
        e = _emitted_counts(1.0 - gen.random(m), spec, drawn)
        chunks.append(e)
        total += int(e.sum())
        drawn += m
    e = np.concatenate(chunks)
    cs = np.cumsum(e)
    n = int(np.searchsorted(cs, length, side="left")) + 1
    e = e[:n].copy()
    e[-1] -= int(cs[n - 1]) - length
    return e


def simulate_instance(
    lengths: Sequence[int],
    cost: CostProvider,
    spec: SpeculationConfig | None = None,
    seed: int = 0,
    seq_ids: Sequence[int] | None = None,
    prompt_tokens: int = 512,
) -> InstanceResult:
    """Simulate one serving instance decoding ``lengths`` to completion.

    Acceptance draws for sequence ``i`` come from the Philox stream
    ``(seed, seq_ids[i])`` so results do not depend on how sequences are
    grouped into instances.
    """
    L = np.asarray(lengths, dtype=np.int64)
    if L.size == 0:
        raise ValueError("an instance needs at least one sequence")
    if np.any(L < 1):
        raise ValueError("lengths must be >= 1")
    ids = np.arange(L.size) if seq_ids is None else np.asarray(seq_ids)
    n = L.size
    prefill_s = float(cost.prefill(n * prompt_tokens))

    if spec is None:
        T = int(L.max())
        t = np.arange(T)
        live = n - np.searchsorted(np.sort(L), t, side="right")
        context = live * (prompt_tokens + t).astype(np.float64)
        cycle = np.asarray(cost.decode(live, context), dtype=float)
        seq_cycles = int(L.sum())
        emitted = int(live.sum())
    else:
        per_seq = [sequence_emissions(int(l), spec, philox(seed, int(i))) for l, i in zip(L, ids)]
        counts = np.array([e.size for e in per_seq])
        T = int(counts.max())
        flat = np.concatenate(per_seq)
        seg_start = np.repeat(np.cumsum(counts) - counts, counts)
        t_idx = np.arange(flat.size) - seg_start
        # tokens generated before each cycle = exclusive cumsum within the sequence
        cs = np.cumsum(flat)
        before = cs - flat - np.repeat(np.concatenate([[0], cs[np.cumsum(counts)[:-1] - 1]]), counts)
        live = np.bincount(t_idx, minlength=T)
        context = np.bincount(t_idx, weights=prompt_tokens + before, minlength=T)
        base = np.asarray(cost.decode(live, context), dtype=float)
        cycle = (np.asarray(cost.verify(live, context, spec.k), dtype=float)
                 + np.asarray(cost.draft(spec.k, base, spec.draft_cost_fraction), dtype=float)
                 + spec.cycle_overhead_s)
        seq_cycles = int(counts.sum())
        emitted = int(flat.sum())

    starts = prefill_s + np.concatenate([[0.0], np.cumsum(cycle)[:-1]])
    return InstanceResult(
        latency_s=prefill_s + float(cycle.sum()),
        prefill_s=prefill_s,
        cycles=T,
        sequence_cycles=seq_cycles,
        tokens=emitted,
        occupancy_t=starts,
        occupancy_live=np.asarray(live, dtype=np.int64),
    )


def simulate_rollout(
    plan: RolloutPlan,
    dist: LengthDistribution,
    cost: CostProvider,
    seed: int = 0,
    lengths: np.ndarray | None = None,
    workers: int = 1,
) -> RolloutResult:
    """Sample (or take) global lengths, partition them, and simulate every instance.

    ``lengths`` defaults to a draw from the stream ``(seed, "lengths")``.
    Instance order and ``workers`` never change the result.
    """
    if lengths is None:
        lengths = sample_lengths(dist, plan.global_batch, make_rng(seed, "lengths"))
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.size != plan.global_batch:
        raise ValueError("lengths must hold global_batch entries")
    owner = plan.assignment()
    accept_seed = derive_seed(seed, "acceptance")

    def run(i: int) -> InstanceResult:
        ids = np.flatnonzero(owner == i)
        return simulate_instance(lengths[ids], cost, plan.speculation, accept_seed, ids, plan.prompt_tokens)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(plan.num_instances)))
    else:
        results = [run(i) for i in range(plan.num_instances)]

    lat = np.array([r.latency_s for r in results])
    seq_cycles = sum(r.sequence_cycles for r in results)
    tokens = sum(r.tokens for r in results)
    return RolloutResult(
        per_instance_latency=lat,
        rollout_latency=float(lat.max()),
        total_decode_cycles=int(sum(r.cycles for r in results)),
        mean_alpha=tokens / seq_cycles,
        total_tokens=tokens,
        lengths=lengths,
        instances=results,
    )


def rollout_speedup(baseline: RolloutResult, speculative: RolloutResult) -> float:
    return baseline.rollout_latency / speculative.rollout_latency


def breakeven_overhead(baseline: RolloutResult, speculative: RolloutResult, overhead_s: float = 0.0) -> float:
    """Per-cycle overhead at which ``speculative`` exactly matches ``baseline``.

    ``speculative`` was simulated with per-cycle overhead ``overhead_s``. Each
    instance's latency is linear in the overhead with slope equal to its cycle
    count, and acceptance draws do not depend on cost, so the rollout is slower
    than the baseline exactly when the overhead exceeds the returned value.
    """
    best = math.inf
    for inst in speculative.instances:
        if inst.cycles == 0:
            continue
        intercept = inst.latency_s - overhead_s * inst.cycles
        best = min(best, (baseline.rollout_latency - intercept) / inst.cycles)
    return best


LengthSchedule = Callable[[int], LengthDistribution]


def simulate_rollout_steps(
    plan: RolloutPlan,
    schedule: LengthSchedule | LengthDistribution,
    cost: CostProvider,
    num_steps: int,
    seed: int = 0,
    workers: int = 1,
) -> list[RolloutResult]:
    """One rollout per RL step, with step ``i`` drawing lengths from ``schedule(i)``.

    Lets traces lengthen as training proceeds. Step ``i`` uses the seed
    ``derive_seed(seed, "step", i)``, so a step's result does not depend on how
    many steps run before it. No schedule ships as authoritative.
    """
    if num_steps < 1:
        raise ValueError("num_steps must be >= 1")
    fn = schedule if callable(schedule) else (lambda _i: schedule)
    return [simulate_rollout(plan, fn(i), cost, seed=derive_seed(seed, "step", i), workers=workers)
            for i in range(num_steps)]
