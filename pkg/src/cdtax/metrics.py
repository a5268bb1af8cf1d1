"""Scoring layer: canonicalization, bounded metrics, expected scores, and the
gain-versus-distortion test for key rewordings.

Canonicalization renames a variant's key back to the canonical field name so
every wording is evaluated identically. Its parser accepts exactly the byte
language the compiled automaton accepts (same minified form, same escape
rules, same length cap, no leading zeros), so "valid under the enforced
schema" means the same thing on both sides of the pipeline. Anything else is
an invalid output, which the bounded metric maps to a hard 0.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable

from .errors import InvalidOutputError, MetricRangeError, ValidationError
from .grammar import BACKSLASH, QUOTE, KeyVariant, SchemaSpec, apply_variant
from .projection import ContinuationDistribution
from .vocab import detokenize

__all__ = [
    "CanonicalObject",
    "Metric",
    "ExpectedScore",
    "SufficientCondition",
    "ActivationDecomposition",
    "canonicalize",
    "bounded_metric",
    "expected_score",
    "sufficient_condition",
    "activation_decomposition",
    "metric_from_name",
    "predicate_from_name",
    "answers_equal",
]


@dataclass(frozen=True)
class CanonicalObject:
    """Field values under canonical key names, in schema order."""

    values: tuple[tuple[str, object], ...]

    def __getitem__(self, key: str) -> object:
        for k, v in self.values:
            if k == key:
                return v
        raise KeyError(key)

    def as_dict(self) -> dict[str, object]:
        return dict(self.values)


_INTEGER_RE = re.compile(rb"-?(?:0|[1-9][0-9]*)")
_NUMBER_RE = re.compile(rb"-?(?:0|[1-9][0-9]*)(?:\.[0-9]+)?(?:[eE][+-]?[0-9]+)?")


def _parse_string(data: bytes, pos: int, max_len: int) -> tuple[str, int]:
    if pos >= len(data) or data[pos] != QUOTE:
        raise InvalidOutputError(f"expected '\"' at byte {pos}")
    pos += 1
    content = bytearray()
    consumed = 0
    while True:
        if pos >= len(data):
            raise InvalidOutputError("unterminated string value")
        b = data[pos]
        if b == QUOTE:
            pos += 1
            break
        if b == BACKSLASH:
            if pos + 1 >= len(data) or data[pos + 1] not in (QUOTE, BACKSLASH):
                raise InvalidOutputError(f"invalid escape at byte {pos}")
            content.append(data[pos + 1])
            pos += 2
            consumed += 2
        else:
            content.append(b)
            pos += 1
            consumed += 1
        if consumed > max_len:
            raise InvalidOutputError(f"string value exceeds {max_len} bytes")
    return bytes(content).decode("utf-8", errors="surrogateescape"), pos


def _parse_numeric(data: bytes, pos: int, kind: str) -> tuple[object, int]:
    pattern = _INTEGER_RE if kind == "integer" else _NUMBER_RE
    match = pattern.match(data, pos)
    if not match:
        raise InvalidOutputError(f"expected a {kind} at byte {pos}")
    text = match.group(0).decode("ascii")
    value: object = int(text) if kind == "integer" else float(text)
    return value, match.end()


def canonicalize(
    output_bytes: bytes, variant: KeyVariant, schema: SchemaSpec
) -> CanonicalObject:
    """Parse output bytes under the variant-applied schema, renaming the
    variant key back to its canonical name.

    Raises :class:`InvalidOutputError` on any deviation from the enforced
    serialization language.
    """
    enforced = apply_variant(schema, variant)
    data = output_bytes
    pos = 0

    def expect(literal: bytes) -> None:
        nonlocal pos
        if not data.startswith(literal, pos):
            raise InvalidOutputError(
                f"expected {literal!r} at byte {pos}, found {data[pos:pos + len(literal) + 2]!r}"
            )
        pos += len(literal)

    expect(b"{")
    values: list[tuple[str, object]] = []
    for i, (enforced_field, canonical_field) in enumerate(zip(enforced.fields, schema.fields)):
        if i:
            expect(b",")
        expect(b'"' + enforced_field.key.encode("ascii") + b'":')
        if enforced_field.kind == "string":
            value, pos = _parse_string(data, pos, schema.max_string_len)
        else:
            value, pos = _parse_numeric(data, pos, enforced_field.kind)
        values.append((canonical_field.key, value))
    expect(b"}")
    if pos != len(data):
        raise InvalidOutputError(f"trailing bytes after the closing brace at byte {pos}")
    return CanonicalObject(values=tuple(values))


@dataclass(frozen=True)
class Metric:
    """A scoring rule over canonical objects with range [0, 1].

    Values outside the range are a defect in the rule and raise; they are
    never clamped.
    """

    name: str
    fn: Callable[[CanonicalObject], float]

    def __call__(self, obj: CanonicalObject) -> float:
        value = float(self.fn(obj))
        if not 0.0 <= value <= 1.0:
            raise MetricRangeError(f"metric {self.name!r} produced {value} outside [0, 1]")
        return value


def bounded_metric(
    output_bytes: bytes, variant: KeyVariant, schema: SchemaSpec, metric: Metric
) -> float:
    """Total scoring function: metric of the canonical object when the bytes
    are valid under the enforced schema, exactly 0 otherwise."""
    try:
        obj = canonicalize(output_bytes, variant, schema)
    except InvalidOutputError:
        return 0.0
    return metric(obj)


def answers_equal(got: object, gold: object) -> bool:
    """Answer equality: exact for integers and strings, 1e-9 relative for
    other numerics (so 1.0 and 1 compare equal)."""
    if isinstance(got, str) or isinstance(gold, str):
        return got == gold
    if isinstance(got, int) and isinstance(gold, int):
        return got == gold
    return math.isclose(float(got), float(gold), rel_tol=1e-9, abs_tol=0.0)  # type: ignore[arg-type]


def metric_from_name(name: str, schema: SchemaSpec, gold: object | None = None) -> Metric:
    if name == "constant_one":
        return Metric("constant_one", lambda obj: 1.0)
    if name == "exact_answer":
        if gold is None:
            raise ValidationError("exact_answer metric needs a gold answer")
        answer_key = schema.fields[-1].key  # answer field is the trailing one
        return Metric(
            "exact_answer",
            lambda obj: 1.0 if answers_equal(obj[answer_key], gold) else 0.0,
        )
    raise ValidationError(f"unknown metric {name!r}")


def predicate_from_name(
    name: str, schema: SchemaSpec, target_key: str | None = None
) -> Callable[[CanonicalObject], bool]:
    """Resolve a reasoning-set predicate by name, e.g. ``min_reasoning_len:3``.

    The reasoning field defaults to the schema's leading field.
    """
    key = target_key or schema.fields[0].key
    if name == "always_true":
        return lambda obj: True
    if name.startswith("min_reasoning_len:"):
        try:
            threshold = int(name.split(":", 1)[1])
        except ValueError:
            raise ValidationError(f"malformed predicate name {name!r}")
        def predicate(obj: CanonicalObject) -> bool:
            value = obj[key]
            return isinstance(value, str) and len(value) >= threshold
        return predicate
    raise ValidationError(f"unknown reasoning predicate {name!r}")


@dataclass(frozen=True)
class ExpectedScore:
    value: float
    under: str  # "P" (unconstrained) | "Q" (constrained)
    key_variant: str


def _continuation_output_bytes(
    dist: ContinuationDistribution, continuation: tuple[int, ...]
) -> bytes:
    generated = dist.origin.generated_ids + continuation
    return detokenize(dist.vocab, generated)


def expected_score(
    dist: ContinuationDistribution,
    variant: KeyVariant,
    schema: SchemaSpec,
    metric: Metric,
) -> ExpectedScore:
    """Probability-weighted bounded metric over an enumerated distribution.

    Each continuation is prepended with the already-generated prefix bytes so
    the metric always sees a complete output.
    """
    total = 0.0
    for y, prob in dist.probabilities.items():
        output = _continuation_output_bytes(dist, y)
        total += prob * bounded_metric(output, variant, schema, metric)
    return ExpectedScore(
        value=total,
        under="Q" if dist.kind == "constrained" else "P",
        key_variant=variant.wording,
    )


@dataclass(frozen=True)
class SufficientCondition:
    holds: bool
    margin: float


def sufficient_condition(
    rp_k1: ExpectedScore | float,
    rp_k0: ExpectedScore | float,
    b_k1: float,
    b_k0: float,
) -> SufficientCondition:
    """Does the unconstrained score gain of the reworded key exceed both
    distortion bounds?

    When it does, the constrained scores are ordered the same way. This is a
    one-way implication: a failed test says nothing about the ordering.
    """
    gain = _score_value(rp_k1) - _score_value(rp_k0)
    margin = gain - (b_k1 + b_k0)
    return SufficientCondition(holds=margin > 0.0, margin=margin)


def _score_value(score: ExpectedScore | float) -> float:
    return score.value if isinstance(score, ExpectedScore) else float(score)


@dataclass(frozen=True)
class ActivationDecomposition:
    """Split of an expected score by a reasoning-set predicate.

    ``reconstructed`` is activation * conditional-mean-inside plus the
    complementary term, and always equals the direct expected score. Empty
    parts report a conditional mean of 0 with a degenerate flag instead of
    NaN so the identity stays testable.
    """

    activation: float
    mu_plus: float
    mu_minus: float
    reconstructed: float
    degenerate_plus: bool
    degenerate_minus: bool


def activation_decomposition(
    dist: ContinuationDistribution,
    variant: KeyVariant,
    schema: SchemaSpec,
    metric: Metric,
    reasoning_predicate: Callable[[CanonicalObject], bool],
) -> ActivationDecomposition:
    mass_plus = 0.0
    mass_minus = 0.0
    score_plus = 0.0
    score_minus = 0.0
    direct = 0.0
    for y, prob in dist.probabilities.items():
        output = _continuation_output_bytes(dist, y)
        try:
            obj = canonicalize(output, variant, schema)
            in_set = reasoning_predicate(obj)
            score = metric(obj)
        except InvalidOutputError:
            in_set = False  # unparseable outputs cannot exhibit reasoning
            score = 0.0
        direct += prob * score
        if in_set:
            mass_plus += prob
            score_plus += prob * score
        else:
            mass_minus += prob
            score_minus += prob * score
    degenerate_plus = mass_plus == 0.0
    degenerate_minus = mass_minus == 0.0
    mu_plus = 0.0 if degenerate_plus else score_plus / mass_plus
    mu_minus = 0.0 if degenerate_minus else score_minus / mass_minus
    reconstructed = mass_plus * mu_plus + mass_minus * mu_minus
    if abs(reconstructed - direct) > 1e-9:
        raise ValidationError(
            f"decomposition identity broken: {reconstructed} vs direct {direct}"
        )
    return ActivationDecomposition(
        activation=mass_plus,
        mu_plus=mu_plus,
        mu_minus=mu_minus,
        reconstructed=reconstructed,
        degenerate_plus=degenerate_plus,
        degenerate_minus=degenerate_minus,
    )
