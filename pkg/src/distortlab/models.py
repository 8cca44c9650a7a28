"""Autoregressive token models with finite context.

A model maps a context (the last ``order`` token ids) to a conditional
distribution over the next token.  Three kinds exist: explicit probability
tables, additively smoothed n-grams trained from text, and remote HTTP
endpoints serving log-probabilities.  Models are immutable after
construction and safe to share across threads.
"""

from __future__ import annotations

import json
import math
import os
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    EmptyCorpus,
    NormalizationError,
    ParseError,
    RemoteError,
    UnknownContext,
)

ROW_TOLERANCE = 1e-9
REMOTE_TOLERANCE = 1e-6
NEG_INF = float("-inf")


@dataclass(frozen=True)
class Vocabulary:
    """Ordered token strings; the position of a token is its id."""

    tokens: tuple[str, ...]
    _index: dict = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        if not self.tokens:
            raise ParseError("vocabulary is empty")
        index = {}
        for i, tok in enumerate(self.tokens):
            if tok in index:
                raise ParseError(f"duplicate vocabulary token {tok!r}")
            index[tok] = i
        object.__setattr__(self, "_index", index)

    def __len__(self):
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise ParseError(f"token {token!r} not in vocabulary") from None

    def text(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]


class _RemoteBackend:
    """Thread-safe client for the log-probability wire protocol."""

    def __init__(self, endpoint: str, timeout: float):
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self._client = None
        self._lock = threading.Lock()

    def _get_client(self):
        with self._lock:
            if self._client is None:
                import httpx

                self._client = httpx.Client(timeout=self.timeout)
            return self._client

    def logprobs(self, context_ids: list[int]) -> np.ndarray:
        import httpx

        try:
            resp = self._get_client().post(
                self.endpoint + "/v1/logprobs", json={"context": list(context_ids)}
            )
        except httpx.HTTPError as exc:
            raise RemoteError(f"request failed: {exc}") from exc
        if resp.status_code != 200:
            raise RemoteError(f"endpoint returned HTTP {resp.status_code}")
        try:
            payload = resp.json()
            values = payload["logprobs"]
            return np.asarray(values, dtype=np.float64)
        except (ValueError, KeyError, TypeError) as exc:
            raise RemoteError(f"malformed reply: {exc}") from exc


@dataclass(frozen=True)
class TokenModel:
    """Immutable conditional-distribution provider of Markov order ``order``."""

    kind: str                       # "table" | "ngram" | "remote"
    order: int
    vocab: Vocabulary
    rows: dict = field(default_factory=dict)      # context key -> np row
    default_row: np.ndarray | None = None
    unit: str = "word"              # how prompt text splits into tokens
    endpoint: str | None = None
    timeout: float = 5.0
    _remote: _RemoteBackend | None = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        if self.kind not in ("table", "ngram", "remote"):
            raise ParseError(f"unknown model kind {self.kind!r}")
        if self.order < 0:
            raise ParseError("order must be non-negative")
        if self.kind == "remote":
            if not self.endpoint:
                raise ParseError("remote model needs an endpoint")
            object.__setattr__(
                self, "_remote", _RemoteBackend(self.endpoint, self.timeout)
            )

    def __len__(self):
        return len(self.vocab)

    def encode(self, text: str) -> list[int]:
        """Tokenize prompt text by the model's unit mode."""
        units = list(text) if self.unit == "char" else text.split()
        return [self.vocab.id_of(u) for u in units]

    def decode(self, ids) -> str:
        sep = "" if self.unit == "char" else " "
        return sep.join(self.vocab.text(ids))


def context_key(context_ids, order: int) -> str:
    """Comma-joined ids of the last ``order`` context tokens."""
    if order == 0:
        return ""
    tail = context_ids[-order:]
    return ",".join(str(int(i)) for i in tail)


def _validate_row(probs: np.ndarray, key: str, size: int,
                  tolerance: float = ROW_TOLERANCE) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (size,):
        raise ParseError(f"row {key!r} has {probs.shape} entries, expected {size}")
    if np.any(probs < 0) or not np.all(np.isfinite(probs)):
        raise ParseError(f"row {key!r} has negative or non-finite entries")
    total = float(probs.sum())
    if abs(total - 1.0) > tolerance:
        raise NormalizationError(key, total, tolerance)
    probs.flags.writeable = False
    return probs


def _infer_unit(spec_unit, tokens) -> str:
    if spec_unit is not None:
        if spec_unit not in ("char", "word"):
            raise ParseError(f"unknown unit mode {spec_unit!r}")
        return spec_unit
    return "char" if all(len(t) == 1 for t in tokens) else "word"


def load_model(path) -> TokenModel:
    """Read and validate a model file (see the JSON schema in the README)."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot read model {path}: {exc}") from exc
    try:
        kind = raw["kind"]
        order = int(raw["order"])
        tokens = tuple(raw["vocab"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"model {path} misses required field: {exc}") from exc
    vocab = Vocabulary(tokens)
    unit = _infer_unit(raw.get("unit"), tokens)

    if kind == "remote":
        return TokenModel(
            kind="remote", order=order, vocab=vocab, unit=unit,
            endpoint=raw.get("endpoint"), timeout=float(raw.get("timeout", 5.0)),
        )

    rows = {}
    for key, values in raw.get("rows", {}).items():
        rows[key] = _validate_row(values, key, len(vocab))
    default_row = None
    if raw.get("default") is not None:
        default_row = _validate_row(raw["default"], "<default>", len(vocab))
    return TokenModel(
        kind=kind, order=order, vocab=vocab, rows=rows,
        default_row=default_row, unit=unit,
    )


def save_model(model: TokenModel, path) -> None:
    """Serialize a model; load_model(save_model(m)) is bit-for-bit identical.

    Probabilities are written with ``repr`` precision (up to 17 significant
    digits), which round-trips every IEEE-754 double exactly.
    """
    doc = {"kind": model.kind, "order": model.order, "unit": model.unit,
           "vocab": list(model.vocab.tokens)}
    if model.kind == "remote":
        doc["endpoint"] = model.endpoint
        doc["timeout"] = model.timeout
    else:
        doc["rows"] = {k: [float(v) for v in row] for k, row in model.rows.items()}
        if model.default_row is not None:
            doc["default"] = [float(v) for v in model.default_row]
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")
    os.replace(tmp, path)


def train_ngram(corpus: str, order: int, smoothing: float = 1.0,
                mode: str = "char") -> TokenModel:
    """Additively smoothed n-gram from raw text.

    Counts every context of length 0..order; a looked-up context falls back
    to the uniform smoothed row when unseen.  p(w|ctx) =
    (count(ctx,w) + a) / (count(ctx,*) + a*|V|) with a = ``smoothing``.
    """
    if smoothing <= 0:
        raise ValueError("smoothing must be positive")
    if order < 0:
        raise ValueError("order must be non-negative")
    units = list(corpus) if mode == "char" else corpus.split()
    if not units:
        raise EmptyCorpus(f"no {mode} units in corpus")
    tokens = tuple(sorted(set(units)))
    vocab = Vocabulary(tokens)
    ids = [vocab.id_of(u) for u in units]
    size = len(vocab)

    counts: dict[str, np.ndarray] = {}
    for ell in range(order + 1):
        for i in range(ell, len(ids)):
            key = ",".join(str(t) for t in ids[i - ell:i])
            row = counts.get(key)
            if row is None:
                row = counts[key] = np.zeros(size)
            row[ids[i]] += 1

    rows = {}
    for key, cnt in counts.items():
        probs = (cnt + smoothing) / (cnt.sum() + smoothing * size)
        probs.flags.writeable = False
        rows[key] = probs
    default = np.full(size, 1.0 / size)
    default.flags.writeable = False
    return TokenModel(kind="ngram", order=order, vocab=vocab, rows=rows,
                      default_row=default, unit=mode)


def next_distribution(model: TokenModel, context_ids) -> np.ndarray:
    """Conditional distribution after ``context_ids`` (last ``order`` used)."""
    size = len(model.vocab)
    for i in context_ids:
        if not 0 <= int(i) < size:
            raise ParseError(f"context id {i} out of range for |V|={size}")
    if model.kind == "remote":
        tail = list(context_ids)[-model.order:] if model.order else []
        logprobs = model._remote.logprobs(tail)
        if logprobs.shape != (size,):
            raise RemoteError(
                f"reply has {logprobs.shape} entries, expected {size}")
        probs = np.exp(logprobs)
        total = float(probs.sum())
        if abs(total - 1.0) > REMOTE_TOLERANCE:
            raise NormalizationError("<remote>", total, REMOTE_TOLERANCE)
        probs /= total
        probs.flags.writeable = False
        return probs
    key = context_key(context_ids, model.order)
    row = model.rows.get(key)
    if row is not None:
        return row
    if model.default_row is not None:
        return model.default_row
    raise UnknownContext(f"no row for context {key!r} and no default row")


def sequence_logprob(model: TokenModel, prefix, completion) -> float:
    """Natural-log chain probability of ``completion`` after ``prefix``."""
    if not len(completion):
        raise ValueError("completion is empty")
    context = list(prefix)
    total = 0.0
    for tok in completion:
        p = float(next_distribution(model, context)[tok])
        total += math.log(p) if p > 0.0 else NEG_INF
        context.append(int(tok))
    return total
