"""Self-contained on-disk form of a compiled grammar.

The file embeds the vocabulary it was compiled against, so decoding needs no
separate vocabulary argument and cannot silently mix alphabets. Byte
transitions are stored as ranges grouped by target state, which keeps the
string-content fan-out compact.
"""

from __future__ import annotations

import base64
import json
from pathlib import Path

from .errors import ParseError
from .grammar import CompiledGrammar, SchemaSpec, _walk_token
from .vocab import Vocabulary

__all__ = ["serialize_grammar", "save_grammar", "load_grammar"]

FORMAT_NAME = "cdtax-grammar"
FORMAT_VERSION = 1


def _ranges(transitions: dict[int, int]) -> list[list]:
    by_target: dict[int, list[int]] = {}
    for byte, dst in transitions.items():
        by_target.setdefault(dst, []).append(byte)
    out = []
    for dst in sorted(by_target):
        bytes_sorted = sorted(by_target[dst])
        runs: list[list[int]] = []
        for b in bytes_sorted:
            if runs and runs[-1][1] == b - 1:
                runs[-1][1] = b
            else:
                runs.append([b, b])
        out.append([dst, runs])
    return out


def serialize_grammar(grammar: CompiledGrammar) -> str:
    payload = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "schema": grammar.schema.to_dict(),
        "vocab": {
            "eos_id": grammar.vocab.eos_id,
            "tokens": [
                base64.b64encode(t.surface).decode("ascii") for t in grammar.vocab.tokens
            ],
        },
        "automaton": {
            "start": grammar.start,
            "accepting": sorted(grammar.accepting),
            "terminal": grammar.terminal,
            "transitions": [_ranges(t) for t in grammar.transitions],
        },
        "regions": [list(r) for r in grammar.regions],
        "value_marks": [list(m) for m in grammar.value_marks],
        "skeleton": [
            ["lit", base64.b64encode(chunk[1]).decode("ascii")]
            if chunk[0] == "lit"
            else ["value", chunk[1]]
            for chunk in grammar.skeleton
        ],
    }
    return json.dumps(payload, sort_keys=True)


def save_grammar(grammar: CompiledGrammar, path: str | Path) -> None:
    from .fileio import atomic_write_text

    atomic_write_text(path, serialize_grammar(grammar) + "\n")


def load_grammar(path: str | Path) -> CompiledGrammar:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: not valid JSON: {exc}")
    if payload.get("format") != FORMAT_NAME:
        raise ParseError(f"{path}: not a {FORMAT_NAME} file")
    if payload.get("version") != FORMAT_VERSION:
        raise ParseError(f"{path}: unsupported version {payload.get('version')!r}")

    schema = SchemaSpec.from_dict(payload["schema"])
    vocab = Vocabulary.from_surfaces(
        [base64.b64decode(b64) for b64 in payload["vocab"]["tokens"]],
        eos_id=int(payload["vocab"]["eos_id"]),
    )
    auto = payload["automaton"]
    transitions: list[dict[int, int]] = []
    for state_edges in auto["transitions"]:
        edges: dict[int, int] = {}
        for dst, runs in state_edges:
            for lo, hi in runs:
                for byte in range(lo, hi + 1):
                    edges[byte] = dst
        transitions.append(edges)
    terminal = int(auto["terminal"])
    regions = [tuple(r) for r in payload["regions"]]
    skeleton = [
        ("lit", base64.b64decode(chunk[1])) if chunk[0] == "lit" else ("value", chunk[1])
        for chunk in payload["skeleton"]
    ]

    accepting = frozenset(int(s) for s in auto["accepting"])
    valid_table: list[frozenset[int]] = []
    for sid in range(len(transitions)):
        if sid == terminal:
            valid_table.append(frozenset())
            continue
        ok = {
            token.id
            for token in vocab.tokens
            if token.id != vocab.eos_id
            and _walk_token(transitions, sid, token.surface) is not None
        }
        if sid in accepting:
            ok.add(vocab.eos_id)
        valid_table.append(frozenset(ok))

    return CompiledGrammar(
        schema=schema,
        vocab=vocab,
        transitions=transitions,
        start=int(auto["start"]),
        accepting=accepting,
        terminal=terminal,
        regions=regions,
        value_marks=[tuple(m) for m in payload["value_marks"]],
        skeleton=skeleton,
        valid_table=valid_table,
    )
