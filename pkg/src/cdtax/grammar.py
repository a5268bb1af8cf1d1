"""Byte-level automaton for a restricted JSON schema with swappable key wordings.

The accepted language is the set of minified serializations of a flat object:
fields in declared order, no whitespace, keys restricted to ``[A-Za-z0-9_]+``
so they never need escaping. String values may contain any byte except an
unescaped ``"`` or ``\\``; the only escapes are ``\\"`` and ``\\\\``, and the
content length (raw bytes between the quotes) is capped so enumeration over
the language stays bounded. Integer values follow the JSON integer grammar
(no leading zeros); ``number`` values additionally allow a fraction and an
exponent.

Token validity is whole-token: a token is valid from a state only if its
entire surface is consumable. Compilation fails unless every automaton state
can consume at least one vocabulary token, which is what guarantees the
masked probability mass is never zero at decode time.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

from .errors import (
    ContractViolationError,
    CoverageError,
    ParseError,
    ValidationError,
)
from .vocab import Token, Vocabulary

__all__ = [
    "FieldSpec",
    "SchemaSpec",
    "KeyVariant",
    "CompiledGrammar",
    "DecoderState",
    "ValidTokenSet",
    "compile_grammar",
    "advance",
    "valid_tokens",
    "apply_variant",
    "structurally_equivalent",
    "load_schema",
    "load_variant",
    "serialize_object",
]

VALUE_KINDS = ("string", "number", "integer")
KEY_PATTERN = re.compile(r"^[A-Za-z0-9_]+$")

QUOTE = 0x22
BACKSLASH = 0x5C

# Token ids whose full surface is consumable from a state; includes eos iff
# the state is accepting. Plain set, no ordering hint.
ValidTokenSet = frozenset


@dataclass(frozen=True)
class FieldSpec:
    key: str
    kind: str


@dataclass(frozen=True)
class SchemaSpec:
    """Flat object schema: ordered fields, each a string/number/integer value."""

    fields: tuple[FieldSpec, ...]
    max_string_len: int = 512

    def __post_init__(self) -> None:
        if not self.fields:
            raise ValidationError("schema must declare at least one field")
        seen: set[str] = set()
        for f in self.fields:
            if f.kind not in VALUE_KINDS:
                raise ValidationError(f"unknown value kind {f.kind!r} for key {f.key!r}")
            if not KEY_PATTERN.match(f.key):
                raise ValidationError(
                    f"key {f.key!r} contains characters outside [A-Za-z0-9_]"
                )
            if f.key in seen:
                raise ValidationError(f"duplicate key {f.key!r}")
            seen.add(f.key)
        if self.max_string_len < 0:
            raise ValidationError("max_string_len must be >= 0")

    def field_index(self, key: str) -> int:
        for i, f in enumerate(self.fields):
            if f.key == key:
                return i
        raise ValidationError(f"schema has no field named {key!r}")

    def to_dict(self) -> dict:
        return {
            "fields": [{"key": f.key, "kind": f.kind} for f in self.fields],
            "max_string_len": self.max_string_len,
        }

    @classmethod
    def from_dict(cls, raw: Mapping) -> "SchemaSpec":
        try:
            fields = tuple(FieldSpec(str(f["key"]), str(f["kind"])) for f in raw["fields"])
        except (KeyError, TypeError) as exc:
            raise ParseError(f"malformed schema document: {exc}")
        return cls(fields=fields, max_string_len=int(raw.get("max_string_len", 512)))


@dataclass(frozen=True)
class KeyVariant:
    """A rewording of one field's key; structure is untouched by design."""

    target_field_index: int
    canonical_key: str
    wording: str


def load_schema(path: str | Path) -> SchemaSpec:
    import json

    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: not valid JSON: {exc}")
    return SchemaSpec.from_dict(raw)


def load_variant(path: str | Path, schema: SchemaSpec) -> KeyVariant:
    import json

    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: not valid JSON: {exc}")
    try:
        field_key = str(raw["field"])
        wording = str(raw["wording"])
    except (KeyError, TypeError) as exc:
        raise ParseError(f"{path}: malformed variant document: {exc}")
    index = schema.field_index(field_key)
    return KeyVariant(target_field_index=index, canonical_key=field_key, wording=wording)


def apply_variant(schema: SchemaSpec, variant: KeyVariant) -> SchemaSpec:
    """Rename one field's key, leaving count, order and value kinds untouched."""
    if not 0 <= variant.target_field_index < len(schema.fields):
        raise ValidationError(
            f"variant targets field index {variant.target_field_index}, "
            f"schema has {len(schema.fields)} fields"
        )
    target = schema.fields[variant.target_field_index]
    if target.key != variant.canonical_key:
        raise ValidationError(
            f"variant canonical key {variant.canonical_key!r} does not match "
            f"schema field {target.key!r} at index {variant.target_field_index}"
        )
    if not KEY_PATTERN.match(variant.wording):
        raise ValidationError(
            f"variant wording {variant.wording!r} contains characters outside [A-Za-z0-9_]"
        )
    for i, f in enumerate(schema.fields):
        if i != variant.target_field_index and f.key == variant.wording:
            raise ValidationError(
                f"variant wording {variant.wording!r} collides with existing key"
            )
    fields = tuple(
        FieldSpec(variant.wording, f.kind) if i == variant.target_field_index else f
        for i, f in enumerate(schema.fields)
    )
    return SchemaSpec(fields=fields, max_string_len=schema.max_string_len)


def identity_variant(schema: SchemaSpec, field_index: int = 0) -> KeyVariant:
    key = schema.fields[field_index].key
    return KeyVariant(target_field_index=field_index, canonical_key=key, wording=key)


def structurally_equivalent(a: SchemaSpec, b: SchemaSpec) -> bool:
    """Same field count, order and value kinds; key wordings may differ."""
    return (
        len(a.fields) == len(b.fields)
        and all(x.kind == y.kind for x, y in zip(a.fields, b.fields))
        and a.max_string_len == b.max_string_len
    )


@dataclass(frozen=True)
class DecoderState:
    """Recognizer position of one decoding session; a small shareable value."""

    automaton_state: int
    bytes_consumed: int
    region: tuple


class CompiledGrammar:
    """Deterministic byte acceptor plus the per-state valid-token table.

    Immutable after construction and safe to share across decode sessions.
    """

    def __init__(
        self,
        schema: SchemaSpec,
        vocab: Vocabulary,
        transitions: list[dict[int, int]],
        start: int,
        accepting: frozenset[int],
        terminal: int,
        regions: list[tuple],
        value_marks: list[tuple[int, int]],
        skeleton: list[tuple],
        valid_table: list[frozenset[int]],
    ):
        self.schema = schema
        self.vocab = vocab
        self.transitions = transitions
        self.start = start
        self.accepting = accepting
        self.terminal = terminal
        self.regions = regions
        self.value_marks = value_marks
        # Alternating literal/value chunks: ("lit", bytes) or ("value", field_index).
        self.skeleton = skeleton
        self.valid_table = valid_table

    @property
    def num_states(self) -> int:
        return len(self.transitions)

    @property
    def num_transitions(self) -> int:
        return sum(len(t) for t in self.transitions)

    def initial_state(self) -> DecoderState:
        return DecoderState(self.start, 0, self.regions[self.start])

    def is_accepting(self, state_id: int) -> bool:
        return state_id in self.accepting

    def step_byte(self, state_id: int, byte: int) -> int | None:
        return self.transitions[state_id].get(byte)

    def accepts(self, data: bytes) -> bool:
        """Byte-level membership in the serialization language."""
        state = self.start
        for b in data:
            nxt = self.transitions[state].get(b)
            if nxt is None:
                return False
            state = nxt
        return state in self.accepting

    def key_literal(self, field_index: int) -> bytes:
        return self.schema.fields[field_index].key.encode("ascii")

    def pre_value_literal(self, field_index: int) -> bytes:
        """Forced byte prefix up to the start of a field's value region.

        Only defined when every chunk before the value is a literal, i.e. for
        the leading field.
        """
        prefix = b""
        for chunk in self.skeleton:
            if chunk[0] == "value":
                if chunk[1] == field_index:
                    return prefix
                raise ValidationError(
                    f"field {field_index} is preceded by other values; its byte "
                    "prefix is not a fixed literal"
                )
            prefix += chunk[1]
        raise ValidationError(f"no value region for field {field_index}")


class _Builder:
    def __init__(self) -> None:
        self.transitions: list[dict[int, int]] = []
        self.regions: list[tuple] = []

    def new_state(self, region: tuple) -> int:
        self.transitions.append({})
        self.regions.append(region)
        return len(self.transitions) - 1

    def edge(self, src: int, byte: int, dst: int) -> None:
        existing = self.transitions[src].get(byte)
        if existing is not None and existing != dst:
            raise ValidationError(f"non-deterministic byte 0x{byte:02X} at state {src}")
        self.transitions[src][byte] = dst

    def literal_chain(self, src: int, data: bytes, region: tuple) -> int:
        state = src
        for b in data:
            nxt = self.new_state(region)
            self.edge(state, b, nxt)
            state = nxt
        return state


def _build_string_value(b: _Builder, entry: int, region: tuple, max_len: int) -> list[int]:
    # entry expects the opening quote; content states count raw bytes consumed.
    content = [b.new_state(region) for _ in range(max_len + 1)]
    b.edge(entry, QUOTE, content[0])
    exit_state = b.new_state(region)
    for j in range(max_len + 1):
        b.edge(content[j], QUOTE, exit_state)
        if j < max_len:
            for byte in range(256):
                if byte not in (QUOTE, BACKSLASH):
                    b.edge(content[j], byte, content[j + 1])
        if j + 2 <= max_len:
            esc = b.new_state(region)
            b.edge(content[j], BACKSLASH, esc)
            b.edge(esc, QUOTE, content[j + 2])
            b.edge(esc, BACKSLASH, content[j + 2])
    return [exit_state]


DIGITS = tuple(range(0x30, 0x3A))


def _build_numeric_value(b: _Builder, entry: int, region: tuple, kind: str) -> list[int]:
    after_minus = b.new_state(region)
    zero = b.new_state(region)       # a single leading 0; no further digits
    digits = b.new_state(region)     # 1-9 followed by any digits
    b.edge(entry, ord("-"), after_minus)
    for src in (entry, after_minus):
        b.edge(src, ord("0"), zero)
        for d in DIGITS[1:]:
            b.edge(src, d, digits)
    for d in DIGITS:
        b.edge(digits, d, digits)
    exits = [zero, digits]
    if kind == "number":
        frac_start = b.new_state(region)
        frac = b.new_state(region)
        for src in (zero, digits):
            b.edge(src, ord("."), frac_start)
        for d in DIGITS:
            b.edge(frac_start, d, frac)
            b.edge(frac, d, frac)
        exp_start = b.new_state(region)
        exp_signed = b.new_state(region)
        exp_digits = b.new_state(region)
        for src in (zero, digits, frac):
            b.edge(src, ord("e"), exp_start)
            b.edge(src, ord("E"), exp_start)
        b.edge(exp_start, ord("+"), exp_signed)
        b.edge(exp_start, ord("-"), exp_signed)
        for d in DIGITS:
            b.edge(exp_start, d, exp_digits)
            b.edge(exp_signed, d, exp_digits)
            b.edge(exp_digits, d, exp_digits)
        exits = [zero, digits, frac, exp_digits]
    return exits


def _check_byte_coverage(schema: SchemaSpec, vocab: Vocabulary, skeleton: list[tuple]) -> None:
    present: set[int] = set()
    for token in vocab.tokens:
        present.update(token.surface)

    required: set[int] = set()
    for chunk in skeleton:
        if chunk[0] == "lit":
            required.update(chunk[1])
    kinds = {f.kind for f in schema.fields}
    if "string" in kinds:
        required.add(QUOTE)
    if kinds & {"integer", "number"}:
        required.update(DIGITS)

    missing = sorted(required - present)
    if missing:
        listing = ", ".join(f"0x{b:02X}" for b in missing)
        raise CoverageError(
            f"vocabulary cannot express required bytes: {listing}",
            missing_bytes=tuple(missing),
        )
    if "string" in kinds:
        if not any(
            token.surface and all(b not in (QUOTE, BACKSLASH) for b in token.surface)
            for token in vocab.tokens
        ):
            raise CoverageError(
                "vocabulary has no token usable inside string values "
                "(every surface contains a quote or backslash)"
            )


def _walk_token(transitions: list[dict[int, int]], state: int, surface: bytes) -> int | None:
    for b in surface:
        nxt = transitions[state].get(b)
        if nxt is None:
            return None
        state = nxt
    return state


def compile_grammar(schema: SchemaSpec, vocab: Vocabulary) -> CompiledGrammar:
    """Compile a schema into a pruned byte acceptor over the given vocabulary.

    Fails if the vocabulary cannot express some required byte, or if any
    state would be left without a single consumable token (which would make
    the masked next-token set empty at decode time).
    """
    b = _Builder()
    start = b.new_state(("pre",))
    skeleton: list[tuple] = []
    value_marks: list[tuple[int, int]] = []

    state = b.literal_chain(start, b"{", ("key", 0))
    pending_literal = b"{"
    for i, field in enumerate(schema.fields):
        key_bytes = b'"' + field.key.encode("ascii") + b'":'
        state = b.literal_chain(state, b'"' + field.key.encode("ascii") + b'"', ("key", i))
        state = b.literal_chain(state, b":", ("sep", i))
        pending_literal += key_bytes
        skeleton.append(("lit", pending_literal))
        skeleton.append(("value", i))
        pending_literal = b""

        value_start = state
        region = ("value", i)
        if field.kind == "string":
            exits = _build_string_value(b, value_start, region, schema.max_string_len)
        else:
            exits = _build_numeric_value(b, value_start, region, field.kind)

        last = i == len(schema.fields) - 1
        if last:
            nxt = b.new_state(("post",))
            for e in exits:
                b.edge(e, ord("}"), nxt)
            pending_literal = b"}"
        else:
            nxt = b.new_state(("key", i + 1))
            for e in exits:
                b.edge(e, ord(","), nxt)
            pending_literal = b","
        value_marks.append((value_start, nxt))
        state = nxt
    skeleton.append(("lit", pending_literal))
    accept = state

    # Prune: keep states reachable from the start that can still reach
    # acceptance. Construction never produces dead states, but the guarantee
    # belongs to the compiler, not to the builder's discipline.
    forward = _reachable(b.transitions, start)
    backward = _co_reachable(b.transitions, accept)
    keep = forward & backward
    if start not in keep:
        raise ValidationError("grammar accepts no string at all")
    remap = {old: new for new, old in enumerate(sorted(keep))}
    transitions = [
        {byte: remap[dst] for byte, dst in b.transitions[old].items() if dst in keep}
        for old in sorted(keep)
    ]
    regions = [b.regions[old] for old in sorted(keep)]
    terminal = len(transitions)
    transitions.append({})
    regions.append(("terminal",))

    start = remap[start]
    accepting = frozenset({remap[accept]})
    value_marks = [(remap[s], remap[e]) for s, e in value_marks]

    _check_byte_coverage(schema, vocab, skeleton)

    valid_table: list[frozenset[int]] = []
    for sid in range(len(transitions)):
        if sid == terminal:
            valid_table.append(frozenset())
            continue
        ok: set[int] = set()
        for token in vocab.tokens:
            if token.id == vocab.eos_id:
                continue
            if _walk_token(transitions, sid, token.surface) is not None:
                ok.add(token.id)
        if sid in accepting:
            ok.add(vocab.eos_id)
        if not ok:
            raise CoverageError(
                f"no vocabulary token is consumable from state {sid} "
                f"(region {regions[sid]}); the valid-token set would be empty"
            )
        valid_table.append(frozenset(ok))

    return CompiledGrammar(
        schema=schema,
        vocab=vocab,
        transitions=transitions,
        start=start,
        accepting=accepting,
        terminal=terminal,
        regions=regions,
        value_marks=value_marks,
        skeleton=skeleton,
        valid_table=valid_table,
    )


def _reachable(transitions: list[dict[int, int]], start: int) -> set[int]:
    seen = {start}
    stack = [start]
    while stack:
        s = stack.pop()
        for dst in transitions[s].values():
            if dst not in seen:
                seen.add(dst)
                stack.append(dst)
    return seen


def _co_reachable(transitions: list[dict[int, int]], accept: int) -> set[int]:
    incoming: dict[int, set[int]] = {}
    for src, edges in enumerate(transitions):
        for dst in edges.values():
            incoming.setdefault(dst, set()).add(src)
    seen = {accept}
    stack = [accept]
    while stack:
        s = stack.pop()
        for src in incoming.get(s, ()):
            if src not in seen:
                seen.add(src)
                stack.append(src)
    return seen


def advance(grammar: CompiledGrammar, state: DecoderState, token: Token | int) -> DecoderState:
    """Consume one token's surface byte-by-byte; eos moves accept -> terminal.

    The token must be valid from ``state`` (callers mask first).
    """
    token_id = token.id if isinstance(token, Token) else int(token)
    if state.automaton_state == grammar.terminal:
        raise ContractViolationError("cannot advance a terminal state")
    if token_id == grammar.vocab.eos_id:
        if state.automaton_state not in grammar.accepting:
            raise ContractViolationError("eos is only valid from an accepting state")
        return DecoderState(grammar.terminal, state.bytes_consumed, ("terminal",))
    surface = grammar.vocab.surface(token_id)
    sid = state.automaton_state
    for offset, byte in enumerate(surface):
        nxt = grammar.transitions[sid].get(byte)
        if nxt is None:
            raise ContractViolationError(
                f"token {token_id} is not consumable from state {sid} "
                f"(byte 0x{byte:02X} at surface offset {offset}); mask before advancing"
            )
        sid = nxt
    return DecoderState(sid, state.bytes_consumed + len(surface), grammar.regions[sid])


def valid_tokens(grammar: CompiledGrammar, state: DecoderState, vocab: Vocabulary) -> ValidTokenSet:
    """Exactly the tokens whose whole surface is consumable from ``state``.

    Includes eos iff the state is accepting. Never empty for a reachable,
    non-terminal state (enforced at compile time).
    """
    if vocab.fingerprint != grammar.vocab.fingerprint:
        raise ValidationError("vocabulary does not match the one this grammar was compiled for")
    if state.automaton_state == grammar.terminal:
        raise ContractViolationError("terminal state has no valid tokens")
    return grammar.valid_table[state.automaton_state]


def _escape_string_value(value: str | bytes) -> bytes:
    data = value.encode("utf-8", errors="surrogateescape") if isinstance(value, str) else value
    return data.replace(b"\\", b"\\\\").replace(b'"', b'\\"')


def _format_number(value: int | float, kind: str) -> bytes:
    if kind == "integer":
        if isinstance(value, float):
            if not value.is_integer():
                raise ValidationError(f"value {value!r} is not an integer")
            value = int(value)
        return str(int(value)).encode("ascii")
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValidationError(f"value {value!r} is not numeric")
    if isinstance(value, float) and not (value == value and abs(value) != float("inf")):
        raise ValidationError("NaN and infinities have no serialization")
    return repr(value).encode("ascii") if isinstance(value, float) else str(value).encode("ascii")


def serialize_object(schema: SchemaSpec, values: Mapping[str, object]) -> bytes:
    """Canonical minified serialization of field values in schema order."""
    parts = [b"{"]
    for i, field in enumerate(schema.fields):
        if field.key not in values:
            raise ValidationError(f"missing value for field {field.key!r}")
        if i:
            parts.append(b",")
        parts.append(b'"' + field.key.encode("ascii") + b'":')
        value = values[field.key]
        if field.kind == "string":
            if not isinstance(value, (str, bytes)):
                raise ValidationError(f"field {field.key!r} expects a string")
            parts.append(b'"' + _escape_string_value(value) + b'"')
        else:
            parts.append(_format_number(value, field.kind))  # type: ignore[arg-type]
    parts.append(b"}")
    return b"".join(parts)


def max_valid_branching(grammar: CompiledGrammar) -> int:
    """Largest valid-token set over all non-terminal states."""
    return max(len(s) for i, s in enumerate(grammar.valid_table) if i != grammar.terminal)
