"""Token alphabet shared by the grammar engine and all model backends.

Tokens are byte strings, not unicode strings, so multi-byte characters split
across tokens stay representable and grammar matching can happen at the byte
level. The end-of-sequence token lives inside the vocabulary (empty surface
by convention) so constrained masking can include or exclude it uniformly.

File format (UTF-8 text)::

    #eos <id>
    <id><TAB><base64-of-surface-bytes>
    ...

Lines starting with ``#`` other than the ``#eos`` header are comments. Ids
must be exactly 0..N-1. Duplicate surfaces under distinct ids are permitted
(real BPE vocabularies have them); duplicate ids are not.
"""

from __future__ import annotations

import base64
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ParseError, ValidationError

__all__ = [
    "Token",
    "Vocabulary",
    "load_vocabulary",
    "parse_vocabulary",
    "save_vocabulary",
    "detokenize",
    "greedy_tokenize",
]


@dataclass(frozen=True)
class Token:
    """One vocabulary entry: an integer id and its surface byte string."""

    id: int
    surface: bytes


@dataclass(frozen=True)
class Vocabulary:
    """Immutable ordered token list with a designated end-of-sequence id.

    Safe to share across concurrent decoders. ``fingerprint`` is a content
    hash: two vocabularies with identical token lists and eos id always hash
    the same, so backends can verify they talk about the same alphabet.
    """

    tokens: tuple[Token, ...]
    eos_id: int
    fingerprint: str = field(init=False)

    def __post_init__(self) -> None:
        if not self.tokens:
            raise ValidationError("vocabulary is empty")
        for position, token in enumerate(self.tokens):
            if token.id != position:
                raise ValidationError(
                    f"token ids must be exactly 0..{len(self.tokens) - 1} with no gaps; "
                    f"position {position} holds id {token.id}"
                )
        if not 0 <= self.eos_id < len(self.tokens):
            raise ValidationError(f"eos id {self.eos_id} is not a valid token id")
        for token in self.tokens:
            if token.id == self.eos_id:
                if token.surface != b"":
                    raise ValidationError(
                        f"eos token {token.id} must have an empty surface, got {token.surface!r}"
                    )
            elif len(token.surface) < 1:
                raise ValidationError(f"token {token.id} has an empty surface")
        object.__setattr__(self, "fingerprint", self._content_hash())

    def _content_hash(self) -> str:
        hasher = hashlib.sha256()
        hasher.update(f"eos:{self.eos_id}\n".encode())
        for token in self.tokens:
            hasher.update(f"{token.id}:".encode())
            hasher.update(token.surface)
            hasher.update(b"\n")
        return hasher.hexdigest()

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def surface(self, token_id: int) -> bytes:
        if not 0 <= token_id < len(self.tokens):
            raise ValidationError(f"unknown token id {token_id}")
        return self.tokens[token_id].surface

    @classmethod
    def from_surfaces(cls, surfaces: Sequence[bytes], eos_id: int) -> "Vocabulary":
        """Build a vocabulary from surfaces listed in id order."""
        tokens = tuple(Token(i, s) for i, s in enumerate(surfaces))
        return cls(tokens=tokens, eos_id=eos_id)


def parse_vocabulary(text: str, source: str = "<string>") -> Vocabulary:
    """Parse the vocabulary file format. Errors name the offending line."""
    eos_id: int | None = None
    entries: dict[int, bytes] = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.rstrip("\n")
        if not line.strip():
            continue
        if line.startswith("#"):
            if line.startswith("#eos"):
                parts = line.split()
                if len(parts) != 2:
                    raise ParseError(f"{source}:{lineno}: malformed #eos header: {line!r}")
                try:
                    eos_id = int(parts[1])
                except ValueError:
                    raise ParseError(f"{source}:{lineno}: #eos id is not an integer: {parts[1]!r}")
            continue
        if "\t" not in line:
            raise ParseError(f"{source}:{lineno}: expected '<id>\\t<base64>', got {line!r}")
        id_text, b64 = line.split("\t", 1)
        try:
            token_id = int(id_text)
        except ValueError:
            raise ParseError(f"{source}:{lineno}: token id is not an integer: {id_text!r}")
        if token_id < 0:
            raise ParseError(f"{source}:{lineno}: token id must be non-negative, got {token_id}")
        try:
            surface = base64.b64decode(b64, validate=True)
        except Exception as exc:
            raise ParseError(f"{source}:{lineno}: invalid base64 {b64!r}: {exc}")
        if token_id in entries:
            raise ValidationError(f"{source}:{lineno}: duplicate token id {token_id}")
        entries[token_id] = surface
    if eos_id is None:
        raise ParseError(f"{source}: missing '#eos <id>' header line")
    if not entries:
        raise ParseError(f"{source}: no token entries found")
    expected = set(range(len(entries)))
    if set(entries) != expected:
        missing = sorted(expected - set(entries))
        extra = sorted(set(entries) - expected)
        raise ValidationError(
            f"{source}: token ids must be exactly 0..{len(entries) - 1}"
            f" (missing {missing}, unexpected {extra})"
        )
    surfaces = [entries[i] for i in range(len(entries))]
    return Vocabulary.from_surfaces(surfaces, eos_id=eos_id)


def load_vocabulary(path: str | Path) -> Vocabulary:
    path = Path(path)
    return parse_vocabulary(path.read_text(encoding="utf-8"), source=str(path))


def serialize_vocabulary(vocab: Vocabulary) -> str:
    lines = [f"#eos {vocab.eos_id}"]
    for token in vocab.tokens:
        lines.append(f"{token.id}\t{base64.b64encode(token.surface).decode('ascii')}")
    return "\n".join(lines) + "\n"


def save_vocabulary(vocab: Vocabulary, path: str | Path) -> None:
    Path(path).write_text(serialize_vocabulary(vocab), encoding="utf-8")


def detokenize(vocab: Vocabulary, ids: Iterable[int]) -> bytes:
    """Concatenate token surfaces in order; eos contributes nothing."""
    parts = []
    for token_id in ids:
        parts.append(vocab.surface(token_id))
    return b"".join(parts)


def greedy_tokenize(vocab: Vocabulary, data: bytes) -> list[int]:
    """Longest-match tokenization of ``data`` into vocabulary ids.

    The tokens must tile ``data`` exactly; a position where no surface
    matches raises. Never emits eos (its surface is empty).
    """
    by_first_byte: dict[int, list[Token]] = {}
    for token in vocab.tokens:
        if not token.surface:
            continue
        by_first_byte.setdefault(token.surface[0], []).append(token)
    for candidates in by_first_byte.values():
        candidates.sort(key=lambda t: (-len(t.surface), t.id))

    out: list[int] = []
    pos = 0
    while pos < len(data):
        candidates = by_first_byte.get(data[pos], [])
        for token in candidates:
            if data.startswith(token.surface, pos):
                out.append(token.id)
                pos += len(token.surface)
                break
        else:
            raise ValidationError(
                f"no vocabulary token matches input at byte offset {pos} "
                f"(next bytes {data[pos:pos + 8]!r})"
            )
    return out
