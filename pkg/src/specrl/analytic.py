"""Closed-form step-time models: generation share, Amdahl bound, i.i.d. acceptance."""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Literal, Sequence

import numpy as np


@dataclass(frozen=True)
class StageTimes:
    """Durations (seconds) of the five stages of one synchronous RL step."""

    data_s: float = 0.0
    prepare_s: float = 0.0
    gen_s: float = 0.0
    logprob_s: float = 0.0
    train_s: float = 0.0

    def __post_init__(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{f.name} must be a finite non-negative number, got {v!r}")

    @property
    def total_s(self) -> float:
        return self.data_s + self.prepare_s + self.gen_s + self.logprob_s + self.train_s

    @property
    def non_generation_s(self) -> float:
        return self.total_s - self.gen_s

    @property
    def generation_share(self) -> float:
        return generation_share(self)

    def with_gen(self, gen_s: float) -> StageTimes:
        return StageTimes(self.data_s, self.prepare_s, gen_s, self.logprob_s, self.train_s)

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def generation_share(times: StageTimes) -> float:
    total = times.total_s
    if total <= 0:
        raise ValueError("step total must be positive")
    return times.gen_s / total


def amdahl_step_bound(r_gen: float, alpha: float) -> float:
    """Upper bound on step speedup when only generation is sped up by ``alpha``."""
    if not 0.0 <= r_gen <= 1.0:
        raise ValueError(f"r_gen must lie in [0, 1], got {r_gen}")
    if alpha < 1.0:
        raise ValueError(f"alpha must be >= 1, got {alpha}")
    return 1.0 / (r_gen / alpha + (1.0 - r_gen))


def step_speedup(baseline: StageTimes, accelerated: StageTimes) -> float:
    if accelerated.total_s <= 0:
        raise ValueError("accelerated step total must be positive")
    return baseline.total_s / accelerated.total_s


def expected_alpha_iid(beta: float, k: int) -> float:
    """Mean tokens per cycle when each draft survives independently with prob ``beta``.

    Equals ``(1 - beta**(k+1)) / (1 - beta)``; summed term by term so the
    value is exact at and near ``beta = 1``.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    if k < 1:
        raise ValueError("k must be >= 1")
    return float(sum(beta**i for i in range(k + 1)))


def invert_alpha_to_beta(alpha: float, k: int, tol: float = 1e-10) -> float:
    """Unique ``beta`` with ``expected_alpha_iid(beta, k) == alpha`` (bisection)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not 1.0 <= alpha <= k + 1:
        raise ValueError(f"alpha must lie in [1, {k + 1}] for k = {k}, got {alpha}")
    if alpha == 1.0:
        return 0.0
    if alpha == k + 1:
        return 1.0
    lo, hi = 0.0, 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        a = expected_alpha_iid(mid, k)
        if abs(a - alpha) < tol * 1e-3 or hi - lo < 1e-16:
            return mid
        if a < alpha:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class AcceptanceModel:
    """How many drafted tokens survive per verification cycle.

    ``iid``: each position accepted independently with probability ``beta``.
    ``empirical``: accepted counts resampled from ``trace``.
    ``fixed``: deterministic schedule emitting ``alpha`` tokens per cycle on average.
    """

    kind: Literal["iid", "empirical", "fixed"]
    beta: float | None = None
    trace: tuple[int, ...] | None = None
    alpha: float | None = None

    def __post_init__(self) -> None:
        if self.kind == "iid":
            if self.beta is None or not 0.0 <= self.beta <= 1.0:
                raise ValueError("iid acceptance needs beta in [0, 1]")
        elif self.kind == "empirical":
            if not self.trace:
                raise ValueError("empirical acceptance needs a non-empty trace")
            if min(self.trace) < 0:
                raise ValueError("accepted counts must be non-negative")
            object.__setattr__(self, "trace", tuple(int(t) for t in self.trace))
        elif self.kind == "fixed":
            if self.alpha is None or self.alpha < 1.0:
                raise ValueError("fixed acceptance needs alpha >= 1")
        else:
            raise ValueError(f"unknown acceptance kind {self.kind!r}")

    @classmethod
    def iid(cls, beta: float) -> AcceptanceModel:
        return cls("iid", beta=beta)

    @classmethod
    def fixed(cls, alpha: float) -> AcceptanceModel:
        return cls("fixed", alpha=alpha)

    @classmethod
    def empirical(cls, trace: Sequence[int]) -> AcceptanceModel:
        return cls("empirical", trace=tuple(trace))

    @classmethod
    def from_alpha(cls, alpha: float, k: int) -> AcceptanceModel:
        """i.i.d. model hitting a target acceptance length at draft length ``k``."""
        return cls.iid(invert_alpha_to_beta(alpha, k))

    def validate_for(self, k: int) -> None:
        if self.kind == "fixed" and not 1.0 <= self.alpha <= k + 1:
            raise ValueError(f"fixed alpha {self.alpha} outside [1, {k + 1}]")
        if self.kind == "empirical" and max(self.trace) > k:
            raise ValueError(f"trace holds accepted counts above k = {k}")

    def expected_alpha(self, k: int) -> float:
        if self.kind == "iid":
            return expected_alpha_iid(self.beta, k)
        if self.kind == "fixed":
            return float(self.alpha)
        return 1.0 + float(np.mean(np.minimum(self.trace, k)))
