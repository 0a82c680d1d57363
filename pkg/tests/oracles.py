"""Independent reference implementations and frozen reference values.

These are written without importing the package's algorithms so that tests
compare two separately derived answers.
"""

from __future__ import annotations

from fractions import Fraction
from typing import Sequence

import numpy as np

# ---------------------------------------------------------------------------
# speculative sampling: exact law by recursion over exact rationals
# ---------------------------------------------------------------------------


def exact_cycle_law(p: Sequence[Sequence[Fraction]], q: Sequence[Sequence[Fraction]]):
    """Joint law of the emitted token tuple for one speculative cycle.

    ``p`` holds k + 1 target rows, ``q`` k draft rows, as Fractions.
    Returns ``{emitted_tuple: probability}``.
    """
    k = len(q)
    out: dict[tuple[int, ...], Fraction] = {}

    def rec(i: int, prefix: tuple[int, ...], w: Fraction) -> None:
        if i == k:
            for y, py in enumerate(p[k]):
                if py:
                    out[prefix + (y,)] = out.get(prefix + (y,), 0) + w * py
            return
        resid = [max(Fraction(0), a - b) for a, b in zip(p[i], q[i])]
        z = sum(resid)
        for x, qx in enumerate(q[i]):
            if not qx:
                continue
            acc = min(Fraction(1), p[i][x] / qx)
            if acc:
                rec(i + 1, prefix + (x,), w * qx * acc)
            rej = w * qx * (1 - acc)
            if rej:
                for y, r in enumerate(resid):
                    if r:
                        key = prefix + (y,)
                        out[key] = out.get(key, 0) + rej * r / z

    rec(0, (), Fraction(1))
    return out


def law_marginals(law: dict[tuple[int, ...], Fraction], vocab: int, k: int):
    """Per-position conditional marginals and accepted-count pmf from a joint law."""
    mass = [[Fraction(0)] * vocab for _ in range(k + 1)]
    reach = [Fraction(0)] * (k + 1)
    pmf = [Fraction(0)] * (k + 1)
    for seq, pr in law.items():
        pmf[len(seq) - 1] += pr
        for j, t in enumerate(seq):
            mass[j][t] += pr
            reach[j] += pr
    marg = [[m / reach[j] if reach[j] else Fraction(0) for m in mass[j]] for j in range(k + 1)]
    return marg, pmf


def to_fractions(rows: np.ndarray) -> list[list[Fraction]]:
    """Exact rationals of float rows, renormalised so each row sums to exactly 1."""
    out = []
    for r in rows:
        fr = [Fraction(float(x)) for x in r]
        s = sum(fr)
        out.append([x / s for x in fr])
    return out


# ---------------------------------------------------------------------------
# closed forms
# ---------------------------------------------------------------------------


def alpha_closed_form(beta: float, k: int) -> float:
    if beta == 1.0:
        return k + 1.0
    return (1 - beta ** (k + 1)) / (1 - beta)


def amdahl(r: float, s: float) -> float:
    return 1.0 / (r / s + 1.0 - r)


# ---------------------------------------------------------------------------
# rollout: straightforward cycle-by-cycle loop
# ---------------------------------------------------------------------------


def loop_instance_latency(lengths, emitted_per_cycle, cycle_cost, prefill_s=0.0, prompt=0):
    """Advance every live sequence one cycle at a time.

    ``emitted_per_cycle(seq, cycle)`` gives tokens emitted by ``seq`` in that
    cycle; ``cycle_cost(live, context)`` gives the cycle's seconds.
    """
    done = [0] * len(lengths)
    t = prefill_s
    cycle = 0
    cycles = 0
    while any(d < n for d, n in zip(done, lengths)):
        live = [i for i, (d, n) in enumerate(zip(done, lengths)) if d < n]
        context = sum(prompt + done[i] for i in live)
        t += cycle_cost(len(live), context)
        for i in live:
            done[i] = min(lengths[i], done[i] + emitted_per_cycle(i, cycle))
        cycle += 1
        cycles += len(live)
    return t, cycle, cycles


# ---------------------------------------------------------------------------
# pipeline: event-free closed forms for constant stage times
# ---------------------------------------------------------------------------


def lag1_steady_step(gen_s: float, train_side_s: float) -> float:
    """Steady step of a one-slot, lag-1 two-pool pipeline."""
    return max(gen_s, train_side_s)


def lag1_exposed(gen_s: float, train_side_s: float) -> float:
    return max(0.0, gen_s - train_side_s)


# ---------------------------------------------------------------------------
# frozen reference values
# ---------------------------------------------------------------------------

# p = (0.9, 0.1), q = (0.1, 0.9), k = 1: accept mass sum_x min(p, q) = 0.2
TWO_TOKEN_ACCEPT_PMF = (0.8, 0.2)
TWO_TOKEN_FIRST_MARGINAL = (0.9, 0.1)
TWO_TOKEN_EXPECTED_LENGTH = 1.2

# published stage times
PUBLISHED_STAGES = {
    "rl_think": {"ar": (0.3, 2.1, 133.6, 17.9, 31.4), "spec": (0.2, 1.6, 87.0, 18.1, 30.5)},
    "rl_zero": {"ar": (0.2, 1.9, 100.0, 17.8, 31.3), "spec": (0.2, 2.1, 56.6, 18.1, 30.5)},
}
PUBLISHED_STEP_SPEEDUP = {"rl_think": 1.349, "rl_zero": 1.407}
PUBLISHED_SHARE = {"rl_think": 0.721, "rl_zero": 0.661}
PUBLISHED_ALPHA = {"rl_think": 2.77, "rl_zero": 3.32}
# 1 / (R / alpha + 1 - R) with the shares above, by hand
AMDAHL_BOUND = {"rl_think": 1.854, "rl_zero": 1.859}

# lag-1 calibration of the async baseline: gen = step, train side = step - exposed
ASYNC_EXPOSED, ASYNC_STEP, ASYNC_SPEEDUP = 10.4, 75.0, 1.54
ASYNC_GEN, ASYNC_TRAIN_SIDE = 75.0, 64.6
