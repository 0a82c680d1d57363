"""Exact speculative sampling over explicit categorical distributions.

A drafter proposes ``k`` tokens from its distributions ``q_i``; the verifier
accepts token ``x`` at position ``i`` with probability ``min(1, p_i(x)/q_i(x))``.
The first rejected position is replaced by a draw from the normalized residual
``max(0, p_i - q_i)``. If every draft is accepted a bonus token is drawn from
``p_k``. Each emitted position is then distributed exactly as the target.

Distributions may be given either as fixed sequences (one per position) or,
for context-dependent drafters such as an n-gram table, as callables mapping
the drafted prefix to a distribution.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence, Union

import numpy as np

MAX_VOCAB = 1024
MAX_ENUM_VOCAB = 8
MAX_ENUM_K = 4


class VocabMismatchError(ValueError):
    pass


class DraftInconsistencyError(ValueError):
    """A proposed token has zero probability under the distribution it was drawn from."""


class EnumerationTooLargeError(ValueError):
    pass


@dataclass(frozen=True)
class CategoricalDist:
    probs: np.ndarray

    def __post_init__(self) -> None:
        p = np.array(self.probs, dtype=np.float64)
        if p.ndim != 1:
            raise ValueError("probs must be one-dimensional")
        if not 2 <= p.size <= MAX_VOCAB:
            raise ValueError(f"vocab_size must be in [2, {MAX_VOCAB}], got {p.size}")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ValueError("probabilities must be finite and non-negative")
        if abs(p.sum() - 1.0) > 1e-12:
            raise ValueError(f"probabilities sum to {p.sum()!r}, not 1")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @property
    def vocab_size(self) -> int:
        return self.probs.size

    @classmethod
    def uniform(cls, vocab_size: int) -> CategoricalDist:
        return cls(np.full(vocab_size, 1.0 / vocab_size))

    @classmethod
    def one_hot(cls, vocab_size: int, token: int) -> CategoricalDist:
        p = np.zeros(vocab_size)
        p[token] = 1.0
        return cls(p)

    @classmethod
    def from_weights(cls, weights: Iterable[float]) -> CategoricalDist:
        w = np.asarray(list(weights), dtype=np.float64)
        return cls(w / w.sum())

    def sample(self, rng: np.random.Generator) -> int:
        return _sample_index(self.probs, rng.random())

    def tv_distance(self, other: CategoricalDist) -> float:
        return 0.5 * float(np.abs(self.probs - other.probs).sum())


def _sample_index(p: np.ndarray, u: float) -> int:
    idx = int(np.searchsorted(np.cumsum(p), u * p.sum(), side="right"))
    idx = min(idx, p.size - 1)
    # never land on a zero-mass entry because of rounding at the top of the CDF
    while p[idx] == 0.0 and idx > 0:
        idx -= 1
    return idx


@dataclass(frozen=True)
class DraftProposal:
    tokens: tuple[int, ...]
    per_position_dists: tuple[CategoricalDist, ...]

    def __post_init__(self) -> None:
        if len(self.tokens) < 1:
            raise ValueError("draft length must be >= 1")
        if len(self.tokens) != len(self.per_position_dists):
            raise ValueError("one distribution per drafted token is required")
        for tok, dist in zip(self.tokens, self.per_position_dists):
            if not 0 <= tok < dist.vocab_size:
                raise ValueError(f"token {tok} outside vocabulary of size {dist.vocab_size}")

    @property
    def k(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class VerifyOutcome:
    accepted_count: int
    emitted_tokens: tuple[int, ...]
    bonus_from_residual: bool

    def __post_init__(self) -> None:
        if len(self.emitted_tokens) != self.accepted_count + 1:
            raise ValueError("emitted length must equal accepted_count + 1")

    @property
    def emitted_length(self) -> int:
        return len(self.emitted_tokens)


def residual(p: CategoricalDist, q: CategoricalDist) -> np.ndarray:
    """Normalized positive part of ``p - q``; falls back to ``p`` when p == q."""
    r = np.maximum(p.probs - q.probs, 0.0)
    s = r.sum()
    if s <= 0.0:
        return p.probs.copy()
    return r / s


def acceptance_probability(p: CategoricalDist, q: CategoricalDist) -> float:
    """Probability that a token drawn from ``q`` survives verification against ``p``."""
    return float(np.minimum(p.probs, q.probs).sum())


def _check_vocab(dists: Iterable[CategoricalDist]) -> int:
    sizes = {d.vocab_size for d in dists}
    if len(sizes) != 1:
        raise VocabMismatchError(f"distributions disagree on vocab size: {sorted(sizes)}")
    return sizes.pop()


def speculative_cycle(
    target_dists: Sequence[CategoricalDist],
    draft_dists: Sequence[CategoricalDist],
    rng: np.random.Generator,
    draft_tokens: Sequence[int] | None = None,
) -> VerifyOutcome:
    """Run one draft-then-verify cycle.

    If ``draft_tokens`` is omitted the drafts are sampled here from
    ``draft_dists``; otherwise they must already have been drawn from them
    (as :func:`ngram_draft` does).
    """
    k = len(draft_dists)
    if k < 1:
        raise ValueError("draft length must be >= 1")
    if len(target_dists) != k + 1:
        raise ValueError(f"need k + 1 = {k + 1} target distributions, got {len(target_dists)}")
    _check_vocab([*target_dists, *draft_dists])

    if draft_tokens is None:
        tokens = [q.sample(rng) for q in draft_dists]
    else:
        if len(draft_tokens) != k:
            raise ValueError("draft_tokens length must equal len(draft_dists)")
        tokens = [int(t) for t in draft_tokens]

    for i, (x, p, q) in enumerate(zip(tokens, target_dists, draft_dists)):
        qx = q.probs[x]
        if qx <= 0.0:
            raise DraftInconsistencyError(f"position {i}: q({x}) = 0 for a proposed token")
        if rng.random() < min(1.0, p.probs[x] / qx):
            continue
        replacement = _sample_index(residual(p, q), rng.random())
        return VerifyOutcome(i, tuple(tokens[:i]) + (replacement,), True)

    bonus = target_dists[k].sample(rng)
    return VerifyOutcome(k, tuple(tokens) + (bonus,), False)


def run_cycles(
    target_dists: Sequence[CategoricalDist],
    draft_dists: Sequence[CategoricalDist],
    n: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`speculative_cycle` for fixed per-position distributions.

    Returns ``(accepted_counts, emitted)`` where ``emitted`` has shape
    ``(n, k + 1)`` and is padded with -1 past each cycle's last token.
    """
    k = len(draft_dists)
    if len(target_dists) != k + 1:
        raise ValueError("need k + 1 target distributions")
    _check_vocab([*target_dists, *draft_dists])

    emitted = np.full((n, k + 1), -1, dtype=np.int64)
    accepted = np.full(n, k, dtype=np.int64)
    alive = np.ones(n, dtype=bool)

    for i, (p, q) in enumerate(zip(target_dists, draft_dists)):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        x = _sample_many(q.probs, rng.random(idx.size))
        ratio = p.probs[x] / q.probs[x]
        ok = rng.random(idx.size) < np.minimum(1.0, ratio)
        emitted[idx[ok], i] = x[ok]
        rej = idx[~ok]
        if rej.size:
            emitted[rej, i] = _sample_many(residual(p, q), rng.random(rej.size))
            accepted[rej] = i
            alive[rej] = False

    idx = np.flatnonzero(alive)
    if idx.size:
        emitted[idx, k] = _sample_many(target_dists[k].probs, rng.random(idx.size))
    return accepted, emitted


def _sample_many(p: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(p)
    out = np.searchsorted(cdf, u * cdf[-1], side="right")
    return np.minimum(out, p.size - 1)


# ---------------------------------------------------------------------------
# brute-force oracle
# ---------------------------------------------------------------------------

DistSource = Union[Sequence[CategoricalDist], Callable[[tuple[int, ...]], CategoricalDist]]


def _as_fn(src: DistSource) -> Callable[[tuple[int, ...]], CategoricalDist]:
    if callable(src):
        return src
    seq = list(src)
    return lambda prefix: seq[len(prefix)]


@dataclass(frozen=True)
class ExactOutcome:
    """Exact law of one speculative cycle.

    ``position_marginals[j]`` is the distribution of the ``j``-th emitted token
    conditional on the cycle emitting at least ``j + 1`` tokens, and
    ``emission_probs[j]`` is the probability that it does.
    """

    position_marginals: tuple[CategoricalDist, ...]
    emission_probs: np.ndarray
    accepted_pmf: np.ndarray

    @property
    def expected_length(self) -> float:
        return float(np.dot(np.arange(1, self.accepted_pmf.size + 1), self.accepted_pmf))


def exact_output_distribution(
    target_dists: DistSource,
    draft_dists: DistSource,
    k: int | None = None,
    vocab_size: int | None = None,
) -> ExactOutcome:
    """Enumerate every draft sequence and accept/reject/residual branch.

    With fixed distribution sequences ``k`` and ``vocab_size`` are inferred;
    callables need both. Marginals are only meaningful position-wise when the
    target does not depend on the prefix; with prefix-dependent callables use
    ``accepted_pmf`` / ``expected_length``.
    """
    if k is None:
        if callable(draft_dists):
            raise ValueError("k is required when draft_dists is a callable")
        k = len(draft_dists)
    if vocab_size is None:
        if callable(target_dists):
            raise ValueError("vocab_size is required when distributions are callables")
        vocab_size = _check_vocab([*target_dists, *(draft_dists if not callable(draft_dists) else [])])
    if k < 1:
        raise ValueError("k must be >= 1")
    if vocab_size > MAX_ENUM_VOCAB or k > MAX_ENUM_K:
        raise EnumerationTooLargeError(
            f"enumeration limited to vocab <= {MAX_ENUM_VOCAB} and k <= {MAX_ENUM_K}"
            f" (got vocab {vocab_size}, k {k})"
        )

    target = _as_fn(target_dists)
    draft = _as_fn(draft_dists)
    mass = np.zeros((k + 1, vocab_size))
    accepted_pmf = np.zeros(k + 1)

    # stack of (prefix, probability of reaching this position with all drafts accepted)
    stack: list[tuple[tuple[int, ...], float]] = [((), 1.0)]
    while stack:
        prefix, w = stack.pop()
        i = len(prefix)
        p = target(prefix)
        if p.vocab_size != vocab_size:
            raise VocabMismatchError("target distribution vocab size changed")
        if i == k:
            mass[k] += w * p.probs
            accepted_pmf[k] += w
            continue
        q = draft(prefix)
        if q.vocab_size != vocab_size:
            raise VocabMismatchError("draft distribution vocab size changed")
        res = residual(p, q)
        for x in range(vocab_size):
            wx = w * q.probs[x]
            if wx == 0.0:
                continue
            acc = min(1.0, p.probs[x] / q.probs[x])
            if acc > 0.0:
                mass[i, x] += wx * acc
                stack.append((prefix + (x,), wx * acc))
            if acc < 1.0:
                wr = wx * (1.0 - acc)
                for y in range(vocab_size):
                    mass[i, y] += wr * res[y]
                accepted_pmf[i] += wr

    emission = mass.sum(axis=1)
    marginals = []
    for j in range(k + 1):
        if emission[j] > 0.0:
            row = mass[j] / emission[j]
            row = row / row.sum()
        else:
            row = np.full(vocab_size, 1.0 / vocab_size)
        marginals.append(CategoricalDist(row))
    emission.setflags(write=False)
    accepted_pmf.setflags(write=False)
    return ExactOutcome(tuple(marginals), emission, accepted_pmf)


# ---------------------------------------------------------------------------
# n-gram drafter
# ---------------------------------------------------------------------------


@dataclass
class NGramTable:
    order: int
    vocab_size: int
    counts: dict[tuple[int, ...], np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.order < 1:
            raise ValueError("order must be >= 1")
        if not 2 <= self.vocab_size <= MAX_VOCAB:
            raise ValueError(f"vocab_size must be in [2, {MAX_VOCAB}]")

    @classmethod
    def from_corpus(cls, corpus: Sequence[int], order: int, vocab_size: int) -> NGramTable:
        table = cls(order, vocab_size)
        acc: dict[tuple[int, ...], np.ndarray] = defaultdict(lambda: np.zeros(vocab_size))
        toks = [int(t) for t in corpus]
        for t in toks:
            if not 0 <= t < vocab_size:
                raise ValueError(f"corpus token {t} outside vocabulary")
        for end in range(order, len(toks)):
            acc[tuple(toks[end - order:end])][toks[end]] += 1
        table.counts = dict(acc)
        return table

    def distribution(self, context: Sequence[int]) -> CategoricalDist:
        """Add-one smoothed next-token distribution; unseen contexts are uniform."""
        key = tuple(int(t) for t in context[len(context) - self.order:])
        c = self.counts.get(key)
        if c is None:
            return CategoricalDist.uniform(self.vocab_size)
        return CategoricalDist((c + 1.0) / (c.sum() + self.vocab_size))


def ngram_draft(
    table: NGramTable,
    context: Sequence[int],
    k: int,
    rng: np.random.Generator | None = None,
) -> DraftProposal:
    """Propose ``k`` tokens by repeated table lookup.

    With ``rng`` the tokens are sampled from the smoothed distributions, which
    are reported as the proposal distributions. Without it the lookup is
    greedy; the reported distributions are then point masses on the chosen
    tokens, which is the distribution the greedy drafter actually samples from
    and keeps verification exact.
    """
    if len(context) < table.order:
        raise ValueError(f"context must hold at least {table.order} tokens")
    if k < 1:
        raise ValueError("k must be >= 1")
    ctx = [int(t) for t in context]
    tokens: list[int] = []
    dists: list[CategoricalDist] = []
    for _ in range(k):
        d = table.distribution(ctx)
        if rng is None:
            tok = int(np.argmax(d.probs))
            dists.append(CategoricalDist.one_hot(table.vocab_size, tok))
        else:
            tok = d.sample(rng)
            dists.append(d)
        tokens.append(tok)
        ctx.append(tok)
    return DraftProposal(tuple(tokens), tuple(dists))


def measure_acceptance(outcomes: Iterable[VerifyOutcome]) -> float:
    """Mean emitted tokens per cycle, bonus/replacement token included."""
    total = 0
    n = 0
    for o in outcomes:
        total += o.emitted_length
        n += 1
    if n == 0:
        raise ValueError("cannot measure acceptance of an empty stream")
    return total / n
