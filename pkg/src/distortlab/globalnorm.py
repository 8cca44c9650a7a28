"""Globally normalized counterparts of the local strategies.

The exact route enumerates every admissible length-T completion and
normalizes once over complete sequences; the sampling route draws from the
model and rejects, which reproduces the same distribution without ever
computing the global constant.  Also hosts the sequence argmax and the
transfer-operator route that normalizes "at time infinity".
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .decoding import DecoderSpec, GenerationRecord, StepTrace, _step
from .errors import (
    InvalidTau,
    NonConvergence,
    RejectionBudgetExceeded,
    SupportTooLarge,
    UnsupportedKind,
    UnsupportedOrder,
)
from .models import NEG_INF, TokenModel, context_key, next_distribution
from .rng import SplitMix64, derive_seed

DEFAULT_ENUM_CAP = 10_000_000
DEFAULT_STATE_CAP = 1_000_000
DEFAULT_REJECTION_BUDGET = 1_000_000


@dataclass(frozen=True)
class SequenceDistribution:
    """Explicit probability table over all supported length-T completions."""

    context: tuple[int, ...]
    length: int
    entries: dict                 # completion ids -> probability
    log_p: dict                   # completion ids -> model chain log-prob
    support_descriptor: str

    def __len__(self):
        return len(self.entries)

    def argmax(self) -> tuple[int, ...]:
        """Most probable completion; ties go to the smallest id sequence."""
        return min(self.entries, key=lambda ids: (-self.entries[ids], ids))

    def sorted_items(self):
        """(completion, prob) sorted by descending prob then ids."""
        return sorted(self.entries.items(), key=lambda kv: (-kv[1], kv[0]))


@dataclass
class RejectionStats:
    attempts: int = 0
    accepted: int = 0

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.attempts if self.attempts else 0.0


class _StepCache:
    """Memoizes per-context step data; contexts sharing their last-L tokens
    share one entry.  Benign to share across threads."""

    def __init__(self, model: TokenModel, spec: DecoderSpec):
        self.model = model
        self.spec = spec
        self._data = {}

    def at(self, context_ids):
        key = context_key(context_ids, self.model.order)
        hit = self._data.get(key)
        if hit is None:
            dist = next_distribution(self.model, context_ids)
            q, z, _ = _step(dist, self.spec)
            if self.spec.kind in ("pure", "temperature"):
                children = np.flatnonzero(dist > 0)
            else:
                children = np.flatnonzero(q > 0)
            hit = (dist, q, z, tuple(int(c) for c in children),
                   np.cumsum(dist))
            self._data[key] = hit
        return hit


def _draw(cum: np.ndarray, u: float) -> int:
    idx = int(np.searchsorted(cum, u, side="right"))
    if idx >= len(cum):        # float shortfall at the top of the CDF
        idx = len(cum) - 1
        while idx > 0 and cum[idx] == cum[idx - 1]:
            idx -= 1           # skip a zero-probability tail
    return idx


def _count_support(cache: _StepCache, prompt, length, cap):
    """Exact support size by memoized counting over Markov states."""
    model = cache.model
    memo = {}

    def count(t, context):
        if t == length:
            return 1
        key = (t, context_key(context, model.order))
        hit = memo.get(key)
        if hit is None:
            total = 0
            for tok in cache.at(context)[3]:
                total += count(t + 1, context + [tok])
                if total > cap:
                    break
            hit = memo[key] = total
        return hit

    total = count(0, list(prompt))
    if total > cap:
        raise SupportTooLarge(total, cap)
    return total


def _enumerate(model: TokenModel, prompt, length, spec: DecoderSpec,
               cap=DEFAULT_ENUM_CAP):
    """All supported completions as (ids, log_p, log_q, sum of log Z)."""
    if length < 0:
        raise ValueError("length must be non-negative")
    cache = _StepCache(model, spec)
    _count_support(cache, prompt, length, cap)
    out = []

    def walk(context, chosen, log_p, log_q, log_z):
        if len(chosen) == length:
            out.append((tuple(chosen), log_p, log_q, log_z))
            return
        dist, q, z, children, _ = cache.at(context)
        for tok in children:
            walk(context + [tok], chosen + [tok],
                 log_p + math.log(float(dist[tok])),
                 log_q + (math.log(float(q[tok])) if q[tok] > 0 else NEG_INF),
                 log_z + math.log(z))

    walk(list(prompt), [], 0.0, 0.0, 0.0)
    return out


def enumerate_support(model: TokenModel, prompt, length, spec: DecoderSpec,
                      cap=DEFAULT_ENUM_CAP):
    """Supported completions with chain log-p, local log-q, and the sum of
    log step normalizers along each completion."""
    return _enumerate(model, prompt, length, spec, cap)


def _logsumexp(values) -> float:
    top = max(values)
    if top == NEG_INF:
        return NEG_INF
    return top + math.log(sum(math.exp(v - top) for v in values))


def enumerate_local(model: TokenModel, prompt, length, spec: DecoderSpec,
                    cap=DEFAULT_ENUM_CAP) -> SequenceDistribution:
    """The locally normalized strategy as an explicit sequence distribution."""
    if spec.mode != "local":
        spec = spec.with_mode("local")
    triples = _enumerate(model, prompt, length, spec, cap)
    entries = {ids: math.exp(lq) for ids, _, lq, _ in triples}
    log_p = {ids: lp for ids, lp, _, _ in triples}
    return SequenceDistribution(
        context=tuple(int(i) for i in prompt), length=length,
        entries=entries, log_p=log_p, support_descriptor=spec.label,
    )


def enumerate_global(model: TokenModel, prompt, length, spec: DecoderSpec,
                     cap=DEFAULT_ENUM_CAP) -> SequenceDistribution:
    """Exact globally normalized distribution over length-T completions.

    Truncation kinds condition the chain measure p on the set of sequences
    whose every token stays inside its step's allowed set; temperature
    weights every positive-probability sequence by p^(1/tau).
    """
    triples = _enumerate(model, prompt, length, spec, cap)
    if spec.kind == "temperature":
        weights = [lp / float(spec.param) for _, lp, _, _ in triples]
    else:
        weights = [lp for _, lp, _, _ in triples]
    norm = _logsumexp(weights)
    entries = {}
    log_p = {}
    for (ids, lp, _, _), w in zip(triples, weights):
        entries[ids] = math.exp(w - norm)
        log_p[ids] = lp
    return SequenceDistribution(
        context=tuple(int(i) for i in prompt), length=length,
        entries=entries, log_p=log_p,
        support_descriptor=spec.with_mode("global").label,
    )


def _argmax_dp(model: TokenModel, prompt, length, step_fn,
               state_cap=DEFAULT_STATE_CAP):
    """Sequence maximizing a sum of per-step log-weights over Markov states.

    ``step_fn(context) -> (children, logw)`` lists admissible next tokens
    and their weights; weights may depend only on the last ``order`` tokens.
    Ties resolve to the lexicographically smallest id sequence.
    """
    memo = {}

    def best(t, context):
        if t == length:
            return 0.0
        key = (t, context_key(context, model.order))
        hit = memo.get(key)
        if hit is None:
            if len(memo) > state_cap:
                raise SupportTooLarge(len(memo), state_cap)
            children, logw = step_fn(context)
            if not len(children):
                hit = NEG_INF
            else:
                hit = max(logw[i] + best(t + 1, context + [tok])
                          for i, tok in enumerate(children))
            memo[key] = hit
        return hit

    best(0, list(prompt))
    out = []
    context = list(prompt)
    for t in range(length):
        children, logw = step_fn(context)
        target = best(t, context)
        for i, tok in enumerate(children):     # ascending id order
            if logw[i] + best(t + 1, context + [tok]) == target:
                out.append(tok)
                context = context + [tok]
                break
        else:
            raise AssertionError("argmax reconstruction lost the optimum")
    return out


def global_argmax(model: TokenModel, prompt, length, spec: DecoderSpec,
                  state_cap=DEFAULT_STATE_CAP) -> list[int]:
    """Completion with globally maximal log p within the strategy's support."""
    cache = _StepCache(model, spec)

    def step_fn(context):
        dist, _, _, children, _ = cache.at(context)
        return children, [math.log(float(dist[c])) for c in children]

    return _argmax_dp(model, prompt, length, step_fn, state_cap)


def _propose(cache: _StepCache, prompt, length, stream):
    """One completion drawn from the chain measure p, with step data."""
    context = list(prompt)
    tokens = []
    entries = []
    for _ in range(length):
        entry = cache.at(context)
        tok = _draw(entry[4], stream.uniform())
        tokens.append(tok)
        entries.append(entry)
        context.append(tok)
    return tokens, entries


def _rejection_truncated(cache, prompt, length, spec, seed, max_attempts,
                         stats):
    stream = SplitMix64(seed)
    start = stats.attempts
    while stats.attempts - start < max_attempts:
        stats.attempts += 1
        tokens, entries = _propose(cache, prompt, length, stream)
        steps = []
        log_p = 0.0
        for tok, (dist, q, z, children, _) in zip(tokens, entries):
            if q[tok] == 0.0:
                steps = None
                break
            p_t = float(dist[tok])
            log_p += math.log(p_t)
            steps.append(StepTrace(token=tok, prob=p_t, z=z,
                                   set_size=len(children)))
        if steps is not None:
            stats.accepted += 1
            return GenerationRecord(
                prompt=tuple(int(i) for i in prompt), completion=tuple(tokens),
                steps=tuple(steps), log_q=float("nan"), log_p=log_p,
                seed=seed, decoder=spec.with_mode("global"),
            )
    raise RejectionBudgetExceeded(stats)


def _rejection_temperature(cache, prompt, length, tau, seed, max_attempts,
                           stats):
    stream = SplitMix64(seed)
    exponent = 1.0 / tau - 1.0
    spec = cache.spec
    start = stats.attempts
    while stats.attempts - start < max_attempts:
        stats.attempts += 1
        tokens, entries = _propose(cache, prompt, length, stream)
        log_p = 0.0
        steps = []
        for tok, (dist, _, z, children, _) in zip(tokens, entries):
            p_t = float(dist[tok])
            log_p += math.log(p_t)
            steps.append(StepTrace(token=tok, prob=p_t, z=z,
                                   set_size=len(children)))
        u = stream.uniform()
        if u == 0.0 or math.log(u) < exponent * log_p:
            stats.accepted += 1
            return GenerationRecord(
                prompt=tuple(int(i) for i in prompt), completion=tuple(tokens),
                steps=tuple(steps), log_q=float("nan"), log_p=log_p,
                seed=seed, decoder=spec,
            )
    raise RejectionBudgetExceeded(stats)


def rejection_sample_truncated(model: TokenModel, prompt, length,
                               spec: DecoderSpec, seed: int,
                               max_attempts=DEFAULT_REJECTION_BUDGET):
    """One sample from globally normalized top-k / nucleus sampling.

    Proposes from the chain measure p and accepts when every step stayed
    inside that step's allowed set; accepted samples follow the
    enumeration distribution exactly.  Returns (record, stats); the
    record's log_q is NaN since the global constant is unknown here.
    """
    if spec.kind not in ("topk", "nucleus"):
        raise UnsupportedKind(f"{spec.kind} has no truncated rejection sampler")
    cache = _StepCache(model, spec)
    stats = RejectionStats()
    record = _rejection_truncated(cache, prompt, length, spec, seed,
                                  max_attempts, stats)
    return record, stats


def rejection_sample_temperature(model: TokenModel, prompt, length, tau,
                                 seed: int,
                                 max_attempts=DEFAULT_REJECTION_BUDGET):
    """One sample from globally normalized temperature sampling.

    Proposes from p and accepts with probability p^(1/tau - 1), so accepted
    samples follow p^(1/tau) renormalized over complete sequences.  The
    accept test runs in log space: log u < (1/tau - 1) * log_p.
    """
    if not 0 < tau <= 1:
        raise InvalidTau(f"rejection sampling needs 0 < tau <= 1, got {tau}")
    spec = DecoderSpec("temperature", float(tau), "global")
    cache = _StepCache(model, spec)
    stats = RejectionStats()
    record = _rejection_temperature(cache, prompt, length, float(tau), seed,
                                    max_attempts, stats)
    return record, stats


def rejection_sample_batch(model: TokenModel, prompt, length,
                           spec: DecoderSpec, master_seed: int, n: int,
                           max_attempts=DEFAULT_REJECTION_BUDGET,
                           jobs: int = 1):
    """n independent globally normalized samples with pooled statistics.

    Sample i draws from the substream ``derive_seed(master_seed, i)``, so
    results do not depend on ``jobs``.  After the batch, each record's
    log_q is filled in from the pooled acceptance rate, which estimates
    the global normalizer (sum of p, or of p^(1/tau), over the support).
    """
    if spec.kind not in ("topk", "nucleus", "temperature"):
        raise UnsupportedKind(f"{spec.kind} has no rejection sampler")
    cache = _StepCache(model, spec if spec.kind != "temperature"
                       else DecoderSpec("temperature", float(spec.param), "global"))

    def run(index):
        seed = derive_seed(master_seed, index)
        stats = RejectionStats()
        if spec.kind == "temperature":
            rec = _rejection_temperature(cache, prompt, length,
                                         float(spec.param), seed,
                                         max_attempts, stats)
        else:
            rec = _rejection_truncated(cache, prompt, length, spec, seed,
                                       max_attempts, stats)
        return rec, stats

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, range(n)))
    else:
        results = [run(i) for i in range(n)]

    stats = RejectionStats()
    for _, s in results:
        stats.attempts += s.attempts
        stats.accepted += s.accepted
    log_c = math.log(stats.acceptance_rate)
    records = []
    for record, _ in results:
        if spec.kind == "temperature":
            log_q = record.log_p / float(spec.param) - log_c
        else:
            log_q = record.log_p - log_c
        records.append(replace(record, log_q=log_q))
    return records, stats


@dataclass(frozen=True)
class PressureResult:
    """Dominant-eigenvalue data of the transfer matrix M[i][j]=p(j|i)^(1/tau)."""

    pressure: float               # log of the dominant eigenvalue
    eigenvalue: float
    states: tuple                 # state labels (context tuples)
    right: np.ndarray             # Mr = lam r, normalized to sum 1
    left: np.ndarray              # l^T M = lam l^T, normalized to sum 1
    iterations: int
    matrix: np.ndarray = field(repr=False, compare=False, default=None)

    @property
    def stationary(self) -> np.ndarray:
        """Stationary distribution of the Gibbs chain: l*r renormalized."""
        w = self.left * self.right
        return w / w.sum()

    @property
    def transition_matrix(self) -> np.ndarray:
        """Gibbs chain transitions Q[i][j] = M[i][j] r[j] / (lam r[i])."""
        return self.matrix * self.right[None, :] / (
            self.eigenvalue * self.right[:, None])


def _power_iteration(matrix: np.ndarray, max_iter: int, rtol: float):
    x = np.full(matrix.shape[0], 1.0 / matrix.shape[0])
    for it in range(1, max_iter + 1):
        y = matrix @ x
        lam = float(y.sum())
        if lam <= 0:
            raise NonConvergence("transfer matrix iterate collapsed to zero")
        if float(np.max(np.abs(y - lam * x))) <= rtol * lam:
            return lam, y / lam, it
        x = y / lam
    raise NonConvergence(f"no convergence after {max_iter} iterations")


def transfer_pressure(model: TokenModel, tau: float, lift: bool = False,
                      max_iter: int = 200_000, rtol: float = 1e-10,
                      lift_cap: int = 4096) -> PressureResult:
    """Topological pressure and eigenvector data at temperature tau.

    P = log of the dominant eigenvalue of M[i][j] = p(j|i)^(1/tau) over
    Markov states, found by power iteration.  Orders 0 and 1 use token
    states; higher orders require ``lift=True`` to expand the |V|^L state
    space explicitly.  All conditional rows must be strictly positive.
    """
    if model.kind == "remote":
        raise UnsupportedOrder("transfer operator needs a table or ngram model")
    if tau <= 0:
        raise InvalidTau(f"tau must be positive, got {tau}")
    size = len(model.vocab)
    if model.order <= 1:
        states = [(i,) for i in range(size)]
        rows = np.stack([next_distribution(model, list(s)) for s in states])
        successors = None
    else:
        if not lift:
            raise UnsupportedOrder(
                f"order {model.order} needs lift=True to expand the state space")
        n_states = size ** model.order
        if n_states > lift_cap:
            raise SupportTooLarge(n_states, lift_cap)
        states = list(itertools.product(range(size), repeat=model.order))
        index = {s: i for i, s in enumerate(states)}
        rows = np.stack([next_distribution(model, list(s)) for s in states])
        successors = np.array(
            [[index[s[1:] + (j,)] for j in range(size)] for s in states])
    if np.any(rows <= 0):
        raise ValueError("transfer operator requires full positive support")

    weights = rows ** (1.0 / tau)
    n = len(states)
    if successors is None:
        matrix = np.array(weights)
    else:
        matrix = np.zeros((n, n))
        for i in range(n):
            for j in range(size):
                matrix[i, successors[i, j]] += weights[i, j]

    lam, right, it_r = _power_iteration(matrix, max_iter, rtol)
    _, left, it_l = _power_iteration(matrix.T, max_iter, rtol)
    return PressureResult(
        pressure=math.log(lam), eigenvalue=lam, states=tuple(states),
        right=right / right.sum(), left=left / left.sum(),
        iterations=max(it_r, it_l), matrix=matrix,
    )
