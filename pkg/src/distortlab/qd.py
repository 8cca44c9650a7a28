"""Quality-diversity evaluation of decoding strategies.

Diversity is the Shannon entropy of the length-T sequence distribution;
quality is the mean model negative log-likelihood of complete strings.
Both come exactly from enumeration on small supports, or from sampled
estimates: entropy by averaging -log q over generations
(Shannon-McMillan-Breiman), quality by averaging -log p.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .decoding import KINDS, DecoderSpec, sample_sequence
from .errors import DistortLabError, MixedDecoders
from .globalnorm import (
    DEFAULT_ENUM_CAP,
    DEFAULT_REJECTION_BUDGET,
    enumerate_support,
    rejection_sample_batch,
)
from .models import TokenModel
from .rng import derive_seed


@dataclass(frozen=True)
class QdPoint:
    """One (entropy, mean-NLL) measurement for one decoder."""

    decoder: DecoderSpec
    entropy: float
    nll: float
    entropy_stderr: float | None
    nll_stderr: float | None
    n_samples: int
    exact: bool


def exact_qd(model: TokenModel, spec: DecoderSpec, prompt, length: int,
             cap=DEFAULT_ENUM_CAP) -> QdPoint:
    """Exact entropy and mean NLL over the enumerated sequence distribution."""
    rows = enumerate_support(model, prompt, length, spec, cap)
    log_p = np.array([r[1] for r in rows])
    if spec.mode == "global":
        weights = log_p / float(spec.param) \
            if spec.kind == "temperature" else log_p
        shift = weights.max()
        w = np.exp(weights - shift)
        q = w / w.sum()
    else:
        q = np.exp(np.array([r[2] for r in rows]))
    mask = q > 0
    entropy = float(-(q[mask] * np.log(q[mask])).sum())
    nll = float(-(q[mask] * log_p[mask]).sum())
    return QdPoint(decoder=spec, entropy=entropy, nll=nll,
                   entropy_stderr=0.0, nll_stderr=0.0, n_samples=0, exact=True)


def _mean_stderr(values):
    values = np.asarray(values, dtype=np.float64)
    mean = float(values.mean())
    if len(values) < 2:
        return mean, None
    stderr = float(values.std(ddof=1) / math.sqrt(len(values)))
    return mean, stderr


def smb_entropy(records):
    """Entropy estimate: mean of -log q over sampled generations."""
    if not records:
        raise ValueError("no records")
    spec = records[0].decoder
    if any(r.decoder != spec for r in records):
        raise MixedDecoders("records come from different decoders")
    values = [-r.log_q for r in records]
    if any(math.isnan(v) for v in values):
        raise ValueError("records carry no log_q (unnormalized global sample?)")
    return _mean_stderr(values)


def mean_nll(records):
    """Quality estimate: mean of -log p over sampled generations."""
    if not records:
        raise ValueError("no records")
    return _mean_stderr([-r.log_p for r in records])


def _sampled_point(model, spec, prompt, length, n_samples, point_seed,
                   budget, jobs) -> QdPoint:
    if spec.mode == "global" and spec.kind in ("topk", "nucleus", "temperature"):
        records, _ = rejection_sample_batch(
            model, prompt, length, spec, point_seed, n_samples,
            max_attempts=budget, jobs=jobs)
    else:
        local = spec.with_mode("local")
        records = [
            sample_sequence(model, prompt, length, local,
                            derive_seed(point_seed, i))
            for i in range(n_samples)
        ]
    entropy, e_err = smb_entropy(records)
    nll, n_err = mean_nll(records)
    return QdPoint(decoder=spec, entropy=entropy, nll=nll,
                   entropy_stderr=e_err, nll_stderr=n_err,
                   n_samples=n_samples, exact=False)


def qd_sweep(model: TokenModel, prompt, length: int, decoder_grid,
             n_samples: int = 1000, seed: int = 0, mode: str = "exact",
             cap=DEFAULT_ENUM_CAP, budget=DEFAULT_REJECTION_BUDGET,
             jobs: int = 1):
    """One QdPoint per decoder in the grid.

    Per-point failures (support too large, rejection budget exhausted) are
    collected, not raised; the sweep continues.  Returns (points, errors)
    with points sorted by decoder kind, parameter, then mode.
    """
    if not decoder_grid:
        raise ValueError("decoder grid is empty")
    points = []
    errors = []
    for idx, spec in enumerate(decoder_grid):
        point_seed = derive_seed(seed, idx)
        try:
            if mode == "exact":
                points.append(exact_qd(model, spec, prompt, length, cap))
            elif mode == "sampled":
                points.append(_sampled_point(model, spec, prompt, length,
                                             n_samples, point_seed, budget,
                                             jobs))
            else:
                raise ValueError(f"unknown sweep mode {mode!r}")
        except DistortLabError as exc:
            errors.append((spec.label, f"{type(exc).__name__}: {exc}"))
    points.sort(key=lambda p: (KINDS.index(p.decoder.kind),
                               p.decoder.param or 0, p.decoder.mode))
    return points, errors
