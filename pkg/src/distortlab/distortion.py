"""Local normalization distortion (LND).

A locally normalized strategy q and its globally normalized counterpart q'
assign a completion masses whose ratio q/q' is the completion's distortion.
The global constant in q' is unknowable at scale, but it cancels in the
ratio of two completions' distortions, which reduces to observable
quantities: (q/p over a) / (q/p over b) for truncation strategies, with p
replaced by p^(1/tau) for temperature.  Equivalently, the log ratio is the
difference of the summed log step normalizers along the two completions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .decoding import DecoderSpec, GenerationRecord, sample_sequence, trace_completion
from .errors import MissingTrace, ZeroMass
from .models import TokenModel
from .rng import derive_seed

DEFAULT_LEVELS = (10.0, 25.0, 50.0, 75.0, 90.0)


@dataclass(frozen=True)
class LndRecord:
    """Pairwise distortion-ratio measurement between two completions."""

    seq_a: tuple[int, ...]
    seq_b: tuple[int, ...]
    log_ratio: float
    z_sums: tuple[float, float]   # sum of log Z along a, along b
    decoder: DecoderSpec


@dataclass(frozen=True)
class QuantileTable:
    """Quantiles of |log distortion ratio| for one decoder."""

    decoder: str
    levels: tuple[float, ...]     # percent
    values: tuple[float, ...]


def distortion_weight(record: GenerationRecord) -> float:
    """Log distortion of a sampled completion up to the additive constant
    -log C shared by its context: minus the summed log step normalizers."""
    if not record.steps:
        raise MissingTrace("record has no step trace")
    total = 0.0
    for s in record.steps:
        if s.z <= 0.0:
            raise MissingTrace("record carries a zero step normalizer")
        total -= math.log(s.z)
    return total


def lnd_pair_ratio(model: TokenModel, spec: DecoderSpec, prompt,
                   seq_a, seq_b) -> LndRecord:
    """Log of the ratio of the two completions' distortions.

    Truncation kinds:  [log q(a) - log p(a)] - [log q(b) - log p(b)];
    temperature uses (1/tau) log p in place of log p.  Both sequences must
    carry positive mass under the local strategy.
    """
    steps_a, log_q_a, log_p_a = trace_completion(model, spec, prompt, seq_a)
    steps_b, log_q_b, log_p_b = trace_completion(model, spec, prompt, seq_b)
    if math.isinf(log_q_a) or math.isinf(log_q_b):
        raise ZeroMass("a sequence lies outside the decoder's support")
    if spec.kind == "temperature":
        scale = 1.0 / float(spec.param)
        log_ratio = (log_q_a - scale * log_p_a) - (log_q_b - scale * log_p_b)
    else:
        log_ratio = (log_q_a - log_p_a) - (log_q_b - log_p_b)
    z_a = sum(math.log(s.z) for s in steps_a)
    z_b = sum(math.log(s.z) for s in steps_b)
    return LndRecord(seq_a=tuple(int(i) for i in seq_a),
                     seq_b=tuple(int(i) for i in seq_b),
                     log_ratio=log_ratio, z_sums=(z_a, z_b), decoder=spec)


def sample_pair_records(model: TokenModel, spec: DecoderSpec, prompt,
                        n_pairs: int, length: int, seed: int) -> list[LndRecord]:
    """n_pairs independent completion pairs under the local strategy.

    Pair i uses the derived seeds (2i, 2i+1) of the master seed.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    records = []
    for i in range(n_pairs):
        rec_a = sample_sequence(model, prompt, length, spec,
                                derive_seed(seed, 2 * i))
        rec_b = sample_sequence(model, prompt, length, spec,
                                derive_seed(seed, 2 * i + 1))
        records.append(lnd_pair_ratio(model, spec, prompt,
                                      rec_a.completion, rec_b.completion))
    return records


def quantiles_of_records(records, levels=DEFAULT_LEVELS,
                         label: str | None = None) -> QuantileTable:
    """Quantiles of |log ratio| by linear interpolation between order
    statistics."""
    values = np.abs([r.log_ratio for r in records])
    qs = np.quantile(values, np.asarray(levels) / 100.0, method="linear")
    decoder = label if label is not None else records[0].decoder.label
    return QuantileTable(decoder=decoder, levels=tuple(float(l) for l in levels),
                         values=tuple(float(v) for v in qs))


def lnd_quantile_table(model: TokenModel, spec: DecoderSpec, prompt,
                       n_pairs: int, length: int, seed: int,
                       levels=DEFAULT_LEVELS) -> QuantileTable:
    """Distortion-ratio quantiles from freshly sampled completion pairs."""
    records = sample_pair_records(model, spec, prompt, n_pairs, length, seed)
    return quantiles_of_records(records, levels)
