"""Parameter matching across decoder families.

Top-k, nucleus, and temperature renormalize by different step masses; to
compare their distortions fairly, pick pi and tau so that the average
normalizer over randomly visited contexts matches the average top-k mass.
Averages are step functions of pi, so a grid search (default step 0.01)
replaces root finding.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass

from .decoding import DecoderSpec, _step, sample_sequence
from .errors import NoMatch
from .models import TokenModel, context_key, next_distribution
from .rng import derive_seed

DEFAULT_GRID = tuple(round(0.01 * i, 2) for i in range(1, 101))


@dataclass(frozen=True)
class CalibrationResult:
    k: int
    matched_pi: float
    matched_tau: float
    avg_z_k: float
    avg_z_pi: float
    avg_z_tau: float
    n_contexts: int
    residual_pi: float
    residual_tau: float

    def to_dict(self) -> dict:
        return asdict(self)


def generate_contexts(model: TokenModel, prompt, n: int, length: int = 16,
                      seed: int = 0) -> list[list[int]]:
    """Contexts visited by pure sampling from the model, one per sample."""
    out = []
    for i in range(n):
        rec = sample_sequence(model, prompt, length, DecoderSpec("pure"),
                              derive_seed(seed, i))
        out.append(list(rec.prompt) + list(rec.completion))
    return out


def _grouped(model, contexts):
    """Contexts collapsed to their Markov state, with multiplicities."""
    if not contexts:
        raise ValueError("contexts list is empty")
    groups = Counter(context_key(c, model.order) for c in contexts)
    reps = {}
    for ctx in contexts:
        reps.setdefault(context_key(ctx, model.order), ctx)
    return [(reps[key], count) for key, count in groups.items()], len(contexts)


def average_normalizer(model: TokenModel, spec: DecoderSpec, contexts) -> float:
    """Mean step normalizer over the contexts: allowed-set mass for
    truncation kinds, sum of p^(1/tau) for temperature."""
    grouped, total = _grouped(model, contexts)
    acc = 0.0
    for ctx, count in grouped:
        dist = next_distribution(model, ctx)
        acc += _step(dist, spec)[1] * count
    return acc / total


def match_parameters(model: TokenModel, k: int, contexts,
                     grid_pi=DEFAULT_GRID, grid_tau=DEFAULT_GRID,
                     tol: float = 0.05) -> CalibrationResult:
    """pi and tau whose average normalizer best matches top-k's.

    Grid minimizers of |avg Z - avg Z_k|; raises NoMatch when either
    residual exceeds ``tol``.  Averages plateau in pi, so ties keep the
    largest grid value (k = |V| then matches pi = 1 exactly).
    """
    avg_k = average_normalizer(model, DecoderSpec("topk", k), contexts)

    def scan(specs):
        best = None
        for spec in specs:
            avg = average_normalizer(model, spec, contexts)
            resid = abs(avg - avg_k)
            if best is None or resid <= best[2]:
                best = (spec.param, avg, resid)
        return best

    pi, avg_pi, res_pi = scan([DecoderSpec("nucleus", g) for g in grid_pi])
    tau, avg_tau, res_tau = scan([DecoderSpec("temperature", g) for g in grid_tau])
    if res_pi > tol or res_tau > tol:
        raise NoMatch({"pi": res_pi, "tau": res_tau})
    return CalibrationResult(
        k=k, matched_pi=pi, matched_tau=tau,
        avg_z_k=avg_k, avg_z_pi=avg_pi, avg_z_tau=avg_tau,
        n_contexts=len(contexts), residual_pi=res_pi, residual_tau=res_tau,
    )
