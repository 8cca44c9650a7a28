"""Locally normalized decoding strategies.

Each strategy turns the model's next-token distribution p into a step
distribution q: truncation kinds (top-k, nucleus, and their greedy/pure
limits) restrict to an allowed set and renormalize by its mass Z;
temperature raises p to 1/tau and renormalizes by Z_tau = sum p^(1/tau).
Ties are always broken by ascending token id after descending probability.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateDistribution,
    InvalidTau,
    ParseError,
    UnsupportedKind,
)
from .models import NEG_INF, TokenModel, next_distribution
from .rng import SplitMix64

KINDS = ("greedy", "pure", "topk", "nucleus", "temperature")
MODES = ("local", "global")


@dataclass(frozen=True)
class DecoderSpec:
    """Decoding strategy identifier: kind, parameter, normalization mode."""

    kind: str
    param: float | int | None = None
    mode: str = "local"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParseError(f"unknown decoder kind {self.kind!r}")
        if self.mode not in MODES:
            raise ParseError(f"unknown mode {self.mode!r}")
        if self.kind in ("greedy", "pure"):
            if self.param is not None:
                raise ParseError(f"{self.kind} takes no parameter")
        elif self.kind == "topk":
            if not isinstance(self.param, int) or isinstance(self.param, bool) \
                    or self.param < 1:
                raise ParseError(f"top-k needs an integer k >= 1, got {self.param!r}")
        elif self.kind == "nucleus":
            if not isinstance(self.param, (int, float)) or not 0 < self.param <= 1:
                raise ParseError(f"nucleus needs 0 < pi <= 1, got {self.param!r}")
        elif self.kind == "temperature":
            if not isinstance(self.param, (int, float)) or not 0 < self.param <= 1:
                raise InvalidTau(f"temperature needs 0 < tau <= 1, got {self.param!r}")

    @classmethod
    def parse(cls, text: str) -> "DecoderSpec":
        """Parse ``kind[:param][@local|@global]``, e.g. ``topk:5@global``."""
        body, _, mode = text.partition("@")
        mode = mode or "local"
        kind, _, param = body.partition(":")
        kind = {"temp": "temperature"}.get(kind, kind)
        if kind not in KINDS:
            raise ParseError(f"cannot parse decoder {text!r}")
        if not param:
            return cls(kind=kind, mode=mode)
        try:
            value = int(param) if kind == "topk" else float(param)
        except ValueError:
            raise ParseError(f"bad parameter in decoder {text!r}") from None
        return cls(kind=kind, param=value, mode=mode)

    @property
    def label(self) -> str:
        body = self.kind if self.param is None else f"{self.kind}:{self.param:g}"
        return f"{body}@{self.mode}"

    def with_mode(self, mode: str) -> "DecoderSpec":
        return DecoderSpec(self.kind, self.param, mode)


@dataclass(frozen=True)
class AllowedSet:
    """Token ids a truncation strategy admits, with their total mass."""

    ids: tuple[int, ...]
    mass: float


@dataclass(frozen=True)
class StepTrace:
    token: int
    prob: float       # probability of the token under q
    z: float          # step normalizer
    set_size: int


@dataclass(frozen=True)
class GenerationRecord:
    """A sampled completion with its per-step trace."""

    prompt: tuple[int, ...]
    completion: tuple[int, ...]
    steps: tuple[StepTrace, ...]
    log_q: float
    log_p: float
    seed: int
    decoder: DecoderSpec

    @property
    def z_values(self) -> list[float]:
        return [s.z for s in self.steps]

    def to_json(self, model: TokenModel) -> str:
        doc = {
            "prompt": {"ids": list(self.prompt),
                       "tokens": model.vocab.text(self.prompt)},
            "completion": {"ids": list(self.completion),
                           "tokens": model.vocab.text(self.completion)},
            "log_p": self.log_p,
            "log_q": self.log_q,
            "z_values": self.z_values,
            "seed": self.seed,
            "decoder": self.decoder.label,
        }
        return json.dumps(doc)


def _descending_order(dist: np.ndarray) -> np.ndarray:
    # stable sort on -p keeps equal probabilities in ascending-id order
    return np.argsort(-dist, kind="stable")


def allowed_set(dist: np.ndarray, spec: DecoderSpec) -> AllowedSet:
    """Allowed token set and its exact mass for a truncation strategy.

    A set covering the entire positive support performs no effective
    renormalization, so its mass is reported as exactly 1.
    """
    dist = np.asarray(dist)
    size = dist.shape[0]
    if spec.kind == "temperature":
        raise UnsupportedKind("temperature sampling has no allowed set")
    positive = np.flatnonzero(dist > 0)
    if spec.kind == "pure":
        ids = positive
    elif spec.kind == "greedy":
        ids = np.array([int(np.argmax(dist))])
    elif spec.kind == "topk":
        k = spec.param
        if k > size:
            warnings.warn(f"k={k} exceeds |V|={size}; clamped to {size}")
            k = size
        ids = _descending_order(dist)[:k]
    else:  # nucleus
        order = _descending_order(dist)
        order = order[dist[order] > 0]
        cum = np.cumsum(dist[order])
        r = int(np.searchsorted(cum, spec.param, side="left")) + 1
        ids = order[:min(r, len(order))]
    ids = np.sort(ids)
    covers_all = len(positive) > 0 and np.all(np.isin(positive, ids))
    mass = 1.0 if covers_all else float(dist[ids].sum())
    return AllowedSet(ids=tuple(int(i) for i in ids), mass=mass)


def _step(dist: np.ndarray, spec: DecoderSpec):
    """Step distribution q plus its normalizer and support size."""
    dist = np.asarray(dist)
    if not np.any(dist > 0):
        raise DegenerateDistribution("next-token distribution is all zero")
    if spec.kind == "pure":
        return dist, 1.0, int(np.count_nonzero(dist))
    if spec.kind == "temperature":
        tau = float(spec.param)
        if tau == 1.0:
            return dist, 1.0, int(np.count_nonzero(dist))
        with np.errstate(divide="ignore"):
            logits = np.log(dist)
        shift = logits.max()
        w = np.exp((logits - shift) / tau)
        total = float(w.sum())
        q = w / total
        q.flags.writeable = False
        z = math.exp(shift / tau) * total          # = sum_i p_i^(1/tau)
        return q, z, int(np.count_nonzero(dist))
    chosen = allowed_set(dist, spec)
    if chosen.mass <= 0.0:
        raise DegenerateDistribution(f"allowed set has zero mass for {spec.label}")
    ids = list(chosen.ids)
    q = np.zeros_like(dist)
    q[ids] = dist[ids] / chosen.mass
    q.flags.writeable = False
    return q, chosen.mass, len(ids)


def step_distribution(dist: np.ndarray, spec: DecoderSpec) -> np.ndarray:
    """The locally normalized next-token distribution q(.|context)."""
    return _step(dist, spec)[0]


def _inverse_cdf(q: np.ndarray, u: float) -> int:
    cum = np.cumsum(q)
    idx = int(np.searchsorted(cum, u, side="right"))
    if idx >= len(q):           # float shortfall at the top of the CDF
        idx = int(np.flatnonzero(q > 0)[-1])
    return idx


def trace_completion(model: TokenModel, spec: DecoderSpec, prompt, completion):
    """Per-step trace of a given completion under the local strategy."""
    context = list(prompt)
    steps = []
    log_q = 0.0
    log_p = 0.0
    for tok in completion:
        tok = int(tok)
        dist = next_distribution(model, context)
        q, z, size = _step(dist, spec)
        qt = float(q[tok])
        pt = float(dist[tok])
        log_q += math.log(qt) if qt > 0.0 else NEG_INF
        log_p += math.log(pt) if pt > 0.0 else NEG_INF
        steps.append(StepTrace(token=tok, prob=qt, z=z, set_size=size))
        context.append(tok)
    return tuple(steps), log_q, log_p


def sample_sequence(model: TokenModel, prompt, length: int, spec: DecoderSpec,
                    seed: int) -> GenerationRecord:
    """Draw ``length`` tokens by inverse-CDF over token-id order.

    Deterministic in (model, prompt, length, spec, seed): one uniform
    variate per step from the SplitMix64 stream of ``seed``.
    """
    if spec.mode != "local":
        raise ValueError("sample_sequence requires a local-mode decoder")
    if length < 1:
        raise ValueError("length must be >= 1")
    stream = SplitMix64(seed)
    context = list(prompt)
    completion = []
    for _ in range(length):
        dist = next_distribution(model, context)
        q, _, _ = _step(dist, spec)
        tok = _inverse_cdf(q, stream.uniform())
        completion.append(tok)
        context.append(tok)
    steps, log_q, log_p = trace_completion(model, spec, prompt, completion)
    return GenerationRecord(
        prompt=tuple(int(i) for i in prompt), completion=tuple(completion),
        steps=steps, log_q=log_q, log_p=log_p, seed=seed, decoder=spec,
    )


def q_logprob(model: TokenModel, spec: DecoderSpec, prompt, completion):
    """log q of a completion plus the per-step normalizer list.

    Returns -inf when any token falls outside its step's allowed set.
    """
    if spec.mode != "local":
        raise ValueError("q_logprob scores locally normalized strategies")
    steps, log_q, _ = trace_completion(model, spec, prompt, completion)
    return log_q, [s.z for s in steps]


def greedy_sequence(model: TokenModel, prompt, length: int) -> list[int]:
    """Deterministic argmax chain; ties resolve to the lowest token id."""
    context = list(prompt)
    out = []
    for _ in range(length):
        dist = next_distribution(model, context)
        tok = int(np.argmax(dist))
        out.append(tok)
        context.append(tok)
    return out
