"""Next-token-distribution backends: exact tabular oracle, add-k n-gram, remote client.

All probability arithmetic stays in the natural-log domain with logsumexp
reductions; probabilities are exponentiated only at reporting boundaries.
Temperature is fixed at 1.0 and no nucleus/top-k filtering happens anywhere:
the projection diagnostics are defined against the raw model distribution.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np
import requests
from scipy.special import logsumexp

from .errors import (
    BackendError,
    FingerprintMismatchError,
    ParseError,
    ValidationError,
)
from .vocab import Vocabulary

__all__ = [
    "NextTokenDistribution",
    "Prefix",
    "LanguageModel",
    "TabularLM",
    "NGramLM",
    "RemoteLM",
    "next_distribution",
    "fit_ngram",
    "load_backend",
]

NORMALIZATION_TOL = 1e-9


@dataclass(frozen=True)
class NextTokenDistribution:
    """Log-probability vector over the full vocabulary; logsumexp(logprobs) = 0.

    Entries may be -inf (exactly zero probability) but never NaN.
    """

    logprobs: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.logprobs, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise ValidationError("logprobs must be a non-empty 1-D vector")
        if np.isnan(arr).any():
            raise ValidationError("logprobs contain NaN")
        if np.isposinf(arr).any():
            raise ValidationError("logprobs contain +inf")
        total = float(logsumexp(arr))
        if abs(total) > NORMALIZATION_TOL:
            raise ValidationError(
                f"distribution is not normalized: logsumexp(logprobs) = {total:.3e}"
            )
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "logprobs", arr)

    def __len__(self) -> int:
        return int(self.logprobs.size)

    @classmethod
    def normalized(cls, raw_logprobs: Sequence[float] | np.ndarray) -> "NextTokenDistribution":
        """Shift arbitrary finite-or--inf log weights so they sum to one."""
        arr = np.asarray(raw_logprobs, dtype=np.float64)
        total = logsumexp(arr)
        if not np.isfinite(total):
            raise ValidationError("cannot normalize: total mass is zero")
        return cls(arr - total)

    @classmethod
    def from_probs(cls, probs: Sequence[float] | np.ndarray) -> "NextTokenDistribution":
        arr = np.asarray(probs, dtype=np.float64)
        if (arr < 0).any():
            raise ValidationError("probabilities must be non-negative")
        with np.errstate(divide="ignore"):
            return cls.normalized(np.log(arr))

    @classmethod
    def uniform(cls, size: int) -> "NextTokenDistribution":
        return cls(np.full(size, -np.log(size)))

    def probs(self) -> np.ndarray:
        return np.exp(self.logprobs)


@dataclass(frozen=True)
class Prefix:
    """Conditioning input ids and the ids generated so far."""

    prompt_ids: tuple[int, ...]
    generated_ids: tuple[int, ...] = ()

    def context(self) -> tuple[int, ...]:
        return self.prompt_ids + self.generated_ids

    def extend(self, token_id: int) -> "Prefix":
        return Prefix(self.prompt_ids, self.generated_ids + (token_id,))


class LanguageModel(Protocol):
    def next_distribution(self, prefix: Prefix) -> NextTokenDistribution: ...

    @property
    def vocab_size(self) -> int: ...


@dataclass(frozen=True)
class TabularLM:
    """Explicit context -> distribution map with a default for unseen contexts.

    Contexts longer than ``horizon`` fall back to the default distribution;
    that fallback is documented behaviour, not an error. Deterministic and
    safe for concurrent queries.
    """

    table: Mapping[tuple[int, ...], NextTokenDistribution]
    default: NextTokenDistribution
    horizon: int | None = None

    def __post_init__(self) -> None:
        size = len(self.default)
        for context, dist in self.table.items():
            if len(dist) != size:
                raise ValidationError(
                    f"table entry for context {context} has size {len(dist)}, expected {size}"
                )

    @property
    def vocab_size(self) -> int:
        return len(self.default)

    def next_distribution(self, prefix: Prefix) -> NextTokenDistribution:
        context = prefix.context()
        if self.horizon is not None and len(context) > self.horizon:
            return self.default
        return self.table.get(context, self.default)


@dataclass(frozen=True)
class NGramLM:
    """Order-n model with add-k smoothing applied lazily at query time."""

    order: int
    k: float
    vocab_size: int
    ngram_counts: Mapping[tuple[int, ...], int]
    context_counts: Mapping[tuple[int, ...], int]

    @property
    def _count_total(self) -> int:
        return sum(self.ngram_counts.values())

    def next_distribution(self, prefix: Prefix) -> NextTokenDistribution:
        context = prefix.context()
        ctx = tuple(context[-(self.order - 1):]) if self.order > 1 else ()
        denom_count = self.context_counts.get(ctx, 0) if self.order > 1 else self._count_total
        denom = denom_count + self.k * self.vocab_size
        logprobs = np.log(
            [
                (self.ngram_counts.get(ctx + (v,), 0) + self.k) / denom
                for v in range(self.vocab_size)
            ]
        )
        return NextTokenDistribution.normalized(logprobs)


def fit_ngram(
    corpus: Sequence[Sequence[int]], order: int, k: float, vocab_size: int
) -> NGramLM:
    """Count every order-length window of the corpus; smoothing stays lazy."""
    if not corpus:
        raise ValidationError("corpus is empty")
    if order < 1:
        raise ValidationError(f"order must be >= 1, got {order}")
    if k <= 0:
        raise ValidationError(f"smoothing constant must be > 0, got {k}")
    ngram_counts: Counter = Counter()
    context_counts: Counter = Counter()
    for sequence in corpus:
        seq = tuple(sequence)
        for token_id in seq:
            if not 0 <= token_id < vocab_size:
                raise ValidationError(f"corpus token id {token_id} outside vocabulary")
        for i in range(len(seq) - order + 1):
            window = seq[i : i + order]
            ngram_counts[window] += 1
            if order > 1:
                context_counts[window[:-1]] += 1
    return NGramLM(
        order=order,
        k=k,
        vocab_size=vocab_size,
        ngram_counts=dict(ngram_counts),
        context_counts=dict(context_counts),
    )


# Wire protocol: POST <endpoint>/v1/next_logprobs
#   request  {"vocab_fingerprint": "<hex>", "prompt_ids": [...], "generated_ids": [...]}
#   response {"vocab_fingerprint": "<hex>", "logprobs": [...]}
# with exactly |vocab| entries, each a finite float or the string "-inf".
REMOTE_PATH = "/v1/next_logprobs"

# How far off a remote vector's total mass may be before the response counts
# as malformed. Within this band the vector is re-shifted to exact
# normalization so downstream invariants hold.
REMOTE_NORMALIZATION_TOL = 1e-6


def encode_logprob(value: float) -> float | str:
    return "-inf" if value == float("-inf") else float(value)


def decode_logprob(value: object) -> float:
    if value == "-inf":
        return float("-inf")
    if isinstance(value, (int, float)):
        return float(value)
    raise BackendError(f"logprob entry is neither a number nor '-inf': {value!r}")


@dataclass
class RemoteLM:
    """Client for a logprobs service that returns the full vocabulary vector.

    Full vectors, not top-k: the masked mass must be exactly computable, and
    truncation would corrupt it. Responses carrying an unexpected vocabulary
    fingerprint are rejected. Connections are kept alive per thread, so
    concurrent in-flight requests from different decode sessions are fine.
    """

    endpoint: str
    expected_fingerprint: str
    expected_vocab_size: int
    timeout: float = 10.0

    def __post_init__(self) -> None:
        import threading

        self._local = threading.local()

    def _session(self) -> requests.Session:
        if not hasattr(self._local, "session"):
            self._local.session = requests.Session()
        return self._local.session

    @property
    def vocab_size(self) -> int:
        return self.expected_vocab_size

    def next_distribution(self, prefix: Prefix) -> NextTokenDistribution:
        body = {
            "vocab_fingerprint": self.expected_fingerprint,
            "prompt_ids": list(prefix.prompt_ids),
            "generated_ids": list(prefix.generated_ids),
        }
        url = self.endpoint.rstrip("/") + REMOTE_PATH
        try:
            response = self._session().post(url, json=body, timeout=self.timeout)
        except requests.RequestException as exc:
            raise BackendError(f"request to {url} failed: {exc}") from exc
        if response.status_code != 200:
            raise BackendError(f"{url} answered HTTP {response.status_code}: {response.text[:200]}")
        try:
            payload = response.json()
        except ValueError as exc:
            raise BackendError(f"{url} returned non-JSON body: {exc}") from exc
        fingerprint = payload.get("vocab_fingerprint")
        if fingerprint != self.expected_fingerprint:
            raise FingerprintMismatchError(
                f"backend vocabulary fingerprint {fingerprint!r} does not match "
                f"expected {self.expected_fingerprint!r}"
            )
        raw = payload.get("logprobs")
        if not isinstance(raw, list) or len(raw) != self.expected_vocab_size:
            got = len(raw) if isinstance(raw, list) else type(raw).__name__
            raise BackendError(
                f"logprobs must be a list of exactly {self.expected_vocab_size} entries, got {got}"
            )
        arr = np.array([decode_logprob(v) for v in raw], dtype=np.float64)
        if np.isnan(arr).any():
            raise BackendError("logprobs contain NaN")
        total = float(logsumexp(arr))
        if not np.isfinite(total) or abs(total) > REMOTE_NORMALIZATION_TOL:
            raise BackendError(f"logprobs are not normalized (logsumexp = {total!r})")
        return NextTokenDistribution(arr - total)


def next_distribution(model: LanguageModel, prefix: Prefix) -> NextTokenDistribution:
    """Query any backend for the normalized next-token log-distribution."""
    return model.next_distribution(prefix)


def _dist_from_json(raw: object, vocab_size: int, where: str) -> NextTokenDistribution:
    if raw == "uniform":
        return NextTokenDistribution.uniform(vocab_size)
    if isinstance(raw, list):
        if len(raw) != vocab_size:
            raise ParseError(f"{where}: expected {vocab_size} logprobs, got {len(raw)}")
        return NextTokenDistribution(np.array([decode_logprob(v) for v in raw]))
    raise ParseError(f"{where}: expected 'uniform' or a logprob list")


def load_backend(
    spec: Mapping | str | Path,
    vocab: Vocabulary,
    endpoint_override: str | None = None,
) -> LanguageModel:
    """Instantiate a backend from its JSON spec (inline mapping or file path).

    ``endpoint_override`` replaces a remote spec's endpoint (the CLI wires the
    CDTAX_BACKEND_URL environment variable through here).
    """
    if isinstance(spec, (str, Path)):
        try:
            raw = json.loads(Path(spec).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ParseError(f"{spec}: not valid JSON: {exc}")
        return load_backend(raw, vocab, endpoint_override)

    kind = spec.get("type")
    if kind == "tabular":
        default = _dist_from_json(spec.get("default", "uniform"), len(vocab), "backend.default")
        table: dict[tuple[int, ...], NextTokenDistribution] = {}
        for i, entry in enumerate(spec.get("entries", [])):
            context = tuple(int(t) for t in entry["context"])
            table[context] = _dist_from_json(entry["logprobs"], len(vocab), f"backend.entries[{i}]")
        horizon = spec.get("horizon")
        return TabularLM(table=table, default=default, horizon=horizon)
    if kind == "ngram":
        return fit_ngram(
            corpus=[[int(t) for t in seq] for seq in spec["corpus"]],
            order=int(spec.get("order", 1)),
            k=float(spec.get("k", 1.0)),
            vocab_size=len(vocab),
        )
    if kind == "remote":
        endpoint = endpoint_override or spec.get("endpoint") or spec.get("url")
        if not endpoint:
            raise ParseError("remote backend spec has no endpoint")
        return RemoteLM(
            endpoint=str(endpoint),
            expected_fingerprint=vocab.fingerprint,
            expected_vocab_size=len(vocab),
            timeout=float(spec.get("timeout", 10.0)),
        )
    raise ParseError(f"unknown backend type {kind!r}")
