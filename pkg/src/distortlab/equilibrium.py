"""Variational characterization of decoding strategies.

On an enumerable support, the local strategy's sequence distribution q is
the unique maximizer of

    H(mu) + sum mu log p (+1/tau for temperature) + sum mu log eps,

where eps is the product of inverse step normalizers along each sequence;
the three terms sum to -KL(mu || q) plus a mu-independent constant.  The
globally normalized variant maximizes the same objective without the
distortion term, with constant log sum p (or log sum p^(1/tau)) over the
support.  This module evaluates the terms and stress-tests maximality
against perturbation measures.  Throughout, 0 log 0 = 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .decoding import DecoderSpec, greedy_sequence, q_logprob
from .errors import SupportViolation
from .globalnorm import (
    DEFAULT_ENUM_CAP,
    SequenceDistribution,
    _argmax_dp,
    _StepCache,
    enumerate_global,
    enumerate_support,
    global_argmax,
)
from .models import TokenModel

NEG_INF = float("-inf")


@dataclass(frozen=True)
class ObjectiveReport:
    """Three-term objective value of a measure against a decoder."""

    entropy_term: float
    quality_term: float
    distortion_term: float
    total: float
    kl_to_q: float

    @property
    def constant(self) -> float:
        """The mu-independent value total + KL(mu || q)."""
        return self.total + self.kl_to_q


def _xlogx(m: np.ndarray) -> np.ndarray:
    return np.where(m > 0, m * np.log(np.where(m > 0, m, 1.0)), 0.0)


def _entropy(m: np.ndarray) -> float:
    return float(-_xlogx(m).sum())


def _kl(m: np.ndarray, q: np.ndarray) -> float:
    if np.any((m > 0) & (q <= 0)):
        raise SupportViolation("measure puts mass where the reference has none")
    logq = np.log(np.where(q > 0, q, 1.0))
    return float((_xlogx(m) - np.where(m > 0, m * logq, 0.0)).sum())


class _Support:
    """Enumerated decoder support with aligned probability vectors."""

    def __init__(self, model, spec, prompt, length, cap):
        rows = enumerate_support(model, prompt, length, spec, cap)
        self.spec = spec
        self.seqs = [r[0] for r in rows]
        self.index = {ids: i for i, ids in enumerate(self.seqs)}
        self.log_p = np.array([r[1] for r in rows])
        self.log_q = np.array([r[2] for r in rows])
        self.log_z = np.array([r[3] for r in rows])
        self.q_local = np.exp(self.log_q)
        if spec.kind == "temperature":
            weights = self.log_p / float(spec.param)
        else:
            weights = self.log_p
        shift = weights.max()
        w = np.exp(weights - shift)
        self.log_norm_global = float(shift + math.log(w.sum()))
        self.q_global = w / w.sum()

    def align(self, dist: SequenceDistribution) -> np.ndarray:
        m = np.zeros(len(self.seqs))
        for ids, prob in dist.entries.items():
            if prob == 0.0:
                continue
            pos = self.index.get(tuple(ids))
            if pos is None:
                raise SupportViolation(
                    f"sequence {ids} is outside the {self.spec.label} support")
            m[pos] = prob
        return m

    def objective(self, m: np.ndarray, mode: str) -> ObjectiveReport:
        scale = 1.0 / float(self.spec.param) \
            if self.spec.kind == "temperature" else 1.0
        entropy = _entropy(m)
        quality = float(np.where(m > 0, m * self.log_p, 0.0).sum()) * scale
        if mode == "local":
            distortion = float(-np.where(m > 0, m * self.log_z, 0.0).sum())
            kl = _kl(m, self.q_local)
        else:
            distortion = 0.0
            kl = _kl(m, self.q_global)
        total = entropy + quality + distortion
        return ObjectiveReport(entropy_term=entropy, quality_term=quality,
                               distortion_term=distortion, total=total,
                               kl_to_q=kl)


def kl_objective(mu: SequenceDistribution, r: SequenceDistribution) -> float:
    """H(mu) + sum mu log r, which equals -KL(mu || r)."""
    total = 0.0
    for ids, m in mu.entries.items():
        if m == 0.0:
            continue
        ref = r.entries.get(tuple(ids), 0.0)
        if ref <= 0.0:
            raise SupportViolation(f"sequence {ids} has no reference mass")
        total += m * (math.log(ref) - math.log(m))
    return total


def decompose_objective(mu: SequenceDistribution, model: TokenModel,
                        spec: DecoderSpec, prompt, length: int,
                        cap=DEFAULT_ENUM_CAP) -> ObjectiveReport:
    """Evaluate the decoder's variational objective at the measure ``mu``.

    Local mode scores all three terms against the local strategy q; global
    mode drops the distortion term and scores KL against the globally
    normalized distribution.
    """
    support = _Support(model, spec, prompt, length, cap)
    return support.objective(support.align(mu), spec.mode)


def _perturbations(support: _Support, mode: str, n_random: int, seed: int):
    """Interior and boundary test measures on the support simplex."""
    n = len(support.seqs)
    q = support.q_local if mode == "local" else support.q_global
    out = [np.full(n, 1.0 / n)]
    point_ids = range(n) if n <= 128 else [0, n - 1, int(np.argmax(q))]
    for i in point_ids:
        m = np.zeros(n)
        m[i] = 1.0
        out.append(m)
    rng = np.random.default_rng(seed)
    for _ in range(n_random):
        m = q * rng.dirichlet(np.ones(n))
        total = m.sum()
        if total <= 0:
            continue
        out.append(m / total)
    return out


def verify_variational_max(model: TokenModel, spec: DecoderSpec, prompt,
                           length: int, n_perturbations: int = 100,
                           seed: int = 0, cap=DEFAULT_ENUM_CAP,
                           tol: float = 1e-9) -> dict:
    """Check that q maximizes its objective and q' the two-term variant.

    For every perturbation measure the gap total(q) - total(mu) must equal
    KL(mu || q) up to ``tol``; the report carries the largest violation of
    total(mu) + KL <= total(q) for both normalization modes.
    """
    support = _Support(model, spec, prompt, length, cap)
    report = {
        "decoder": spec.label,
        "support_size": len(support.seqs),
        "n_perturbations": n_perturbations,
        "expected_constant_global": support.log_norm_global,
    }
    for mode, q in (("local", support.q_local), ("global", support.q_global)):
        ref_total = support.objective(q, mode).total
        worst = NEG_INF
        for m in _perturbations(support, mode, n_perturbations, seed):
            obj = support.objective(m, mode)
            worst = max(worst, obj.total + obj.kl_to_q - ref_total)
        report[f"constant_{mode}"] = ref_total
        report[f"max_violation_{mode}"] = worst
    report["passed"] = (
        report["max_violation_local"] <= tol
        and report["max_violation_global"] <= tol
        and abs(report["constant_local"]) <= tol
        and abs(report["constant_global"] - support.log_norm_global) <= tol
    )
    return report


def zero_temperature_scan(model: TokenModel, prompt, length: int, tau_list,
                          cap=DEFAULT_ENUM_CAP) -> dict:
    """Trace both temperature argmaxes toward the tau -> 0 limits.

    Local temperature sampling concentrates on the greedy sequence; its
    globally normalized variant concentrates on the sequence of maximal
    chain log-probability.  For each tau the scan reports both argmaxes
    and the mass each limit sequence carries; the converged tau is the
    largest scanned value from which the argmax sticks to its limit for
    every smaller scanned value.
    """
    taus = sorted(set(float(t) for t in tau_list), reverse=True)
    if not taus:
        raise ValueError("tau_list is empty")
    greedy_target = tuple(greedy_sequence(model, prompt, length))
    global_target = tuple(global_argmax(model, prompt, length,
                                        DecoderSpec("pure")))
    rows = []
    for tau in taus:
        spec = DecoderSpec("temperature", tau)
        cache = _StepCache(model, spec)

        def step_fn(context):
            # q can underflow to exactly 0 at extreme temperatures
            _, q, _, children, _ = cache.at(context)
            return children, [math.log(float(q[c])) if q[c] > 0 else NEG_INF
                              for c in children]

        local_arg = tuple(_argmax_dp(model, prompt, length, step_fn))
        greedy_mass = math.exp(q_logprob(model, spec, prompt, greedy_target)[0])
        dist = enumerate_global(model, prompt, length, spec, cap)
        global_arg = dist.argmax()
        rows.append({
            "tau": tau,
            "local_argmax": list(local_arg),
            "local_matches_greedy": local_arg == greedy_target,
            "greedy_mass_local": greedy_mass,
            "global_argmax": list(global_arg),
            "global_matches_target": global_arg == global_target,
            "target_mass_global": dist.entries.get(global_target, 0.0),
        })

    def converged(flag_key):
        threshold = None
        for row in rows:                      # taus descending
            if row[flag_key]:
                if threshold is None:
                    threshold = row["tau"]
            else:
                threshold = None
        return threshold

    return {
        "greedy_sequence": list(greedy_target),
        "global_argmax": list(global_target),
        "rows": rows,
        "converged_tau_local": converged("local_matches_greedy"),
        "converged_tau_global": converged("global_matches_target"),
    }
