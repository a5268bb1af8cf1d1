"""The 2x2 instruction-placement harness.

An instruction can reach the model through the prompt (a schema-description
span in the prompt ids) or through the decoder-enforced schema key. The four
cells none / key-only / prompt-only / both vary exactly those two switches
while everything else stays byte-identical, which the control checks assert
rather than assume. Cell scores are percentage points; effect deltas and the
interaction term are plain differences of those scores.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

from .errors import BackendError, ConfigError, ValidationError
from .fileio import atomic_write_text
from .grammar import (
    CompiledGrammar,
    KeyVariant,
    SchemaSpec,
    apply_variant,
    compile_grammar,
    identity_variant,
)
from .lm import LanguageModel, load_backend
from .metrics import canonicalize, metric_from_name, bounded_metric
from .projection import decode_constrained
from .vocab import Vocabulary, detokenize, load_vocabulary
from .errors import InvalidOutputError

__all__ = [
    "PlacementSetting",
    "ALL_SETTINGS",
    "PromptTemplate",
    "ExperimentItem",
    "ExperimentConfig",
    "ItemRecord",
    "CellResult",
    "MatrixResult",
    "EffectReport",
    "build_cell_inputs",
    "run_matrix",
    "effects",
    "sensitivity_map",
    "SensitivityRow",
    "SensitivityTable",
    "load_experiment_config",
    "verify_controls",
]


@dataclass(frozen=True)
class PlacementSetting:
    """(c_p, c_s): instructional wording in the prompt / in the enforced key."""

    c_p: int
    c_s: int

    def __post_init__(self) -> None:
        if self.c_p not in (0, 1) or self.c_s not in (0, 1):
            raise ValidationError("placement switches must be 0 or 1")

    @property
    def label(self) -> str:
        return {
            (0, 0): "none",
            (0, 1): "key_only",
            (1, 0): "prompt_only",
            (1, 1): "both",
        }[(self.c_p, self.c_s)]


ALL_SETTINGS = (
    PlacementSetting(0, 0),
    PlacementSetting(0, 1),
    PlacementSetting(1, 0),
    PlacementSetting(1, 1),
)


@dataclass(frozen=True)
class PromptTemplate:
    """Prompt ids with a marked schema-description span.

    The neutral and instructional prompts share prefix and suffix by
    construction; only the span differs.
    """

    prefix_ids: tuple[int, ...]
    neutral_span_ids: tuple[int, ...]
    instructional_span_ids: tuple[int, ...]
    suffix_ids: tuple[int, ...] = ()

    def render(self, c_p: int) -> tuple[int, ...]:
        span = self.instructional_span_ids if c_p else self.neutral_span_ids
        return self.prefix_ids + span + self.suffix_ids


@dataclass(frozen=True)
class ExperimentItem:
    item_id: str
    prompt_ids: tuple[int, ...]
    gold_answer: object


@dataclass(frozen=True)
class ExperimentConfig:
    vocab: Vocabulary
    schema: SchemaSpec
    instructional_variant: KeyVariant
    template: PromptTemplate
    backend: LanguageModel | Mapping
    items: tuple[ExperimentItem, ...]
    metric: str = "exact_answer"
    policy: str = "greedy"
    seed: int = 0
    max_steps: int = 128
    neutral_variant: KeyVariant | None = None
    label: str = "run"
    benchmark: str = ""

    def __post_init__(self) -> None:
        if not self.items:
            raise ConfigError("item list is empty")
        ids = [item.item_id for item in self.items]
        if len(set(ids)) != len(ids):
            raise ConfigError("item ids must be unique")

    def resolved_neutral(self) -> KeyVariant:
        if self.neutral_variant is not None:
            return self.neutral_variant
        return identity_variant(self.schema, self.instructional_variant.target_field_index)


def _typed_gold(raw: object, schema: SchemaSpec) -> object:
    kind = schema.fields[-1].kind
    if kind == "string":
        return str(raw)
    if kind == "integer":
        return int(raw)  # type: ignore[arg-type]
    return float(raw)  # type: ignore[arg-type]


def load_experiment_config(
    path: str | Path, endpoint_override: str | None = None
) -> ExperimentConfig:
    """Load the single-document experiment config, resolving relative paths
    against the config file's directory."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON: {exc}")
    base = path.parent

    def resolve(ref: object, loader):
        if isinstance(ref, str):
            return loader(base / ref)
        return ref

    try:
        vocab = resolve(raw["vocab"], load_vocabulary)
        if not isinstance(vocab, Vocabulary):
            raise ConfigError(f"{path}: 'vocab' must be a file path")
        schema_raw = raw["schema"]
        if isinstance(schema_raw, str):
            schema = SchemaSpec.from_dict(json.loads((base / schema_raw).read_text()))
        else:
            schema = SchemaSpec.from_dict(schema_raw)
        variant_raw = raw["instructional_variant"]
        instructional = KeyVariant(
            target_field_index=schema.field_index(str(variant_raw["field"])),
            canonical_key=str(variant_raw["field"]),
            wording=str(variant_raw["wording"]),
        )
        neutral = None
        if "neutral_variant" in raw:
            nraw = raw["neutral_variant"]
            neutral = KeyVariant(
                target_field_index=schema.field_index(str(nraw["field"])),
                canonical_key=str(nraw["field"]),
                wording=str(nraw["wording"]),
            )
        tmpl_raw = raw["prompt_template"]
        template = PromptTemplate(
            prefix_ids=tuple(int(t) for t in tmpl_raw.get("prefix_ids", [])),
            neutral_span_ids=tuple(int(t) for t in tmpl_raw["neutral_span_ids"]),
            instructional_span_ids=tuple(int(t) for t in tmpl_raw["instructional_span_ids"]),
            suffix_ids=tuple(int(t) for t in tmpl_raw.get("suffix_ids", [])),
        )
        backend_raw = raw["backend"]
        if isinstance(backend_raw, str):
            backend = json.loads((base / backend_raw).read_text(encoding="utf-8"))
        else:
            backend = backend_raw
        items = tuple(
            ExperimentItem(
                item_id=str(item["id"]),
                prompt_ids=tuple(int(t) for t in item["prompt_ids"]),
                gold_answer=_typed_gold(item.get("gold_answer"), schema),
            )
            for item in raw["items"]
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: malformed experiment config: {exc}")

    config = ExperimentConfig(
        vocab=vocab,
        schema=schema,
        instructional_variant=instructional,
        template=template,
        backend=backend,
        items=items,
        metric=str(raw.get("metric", "exact_answer")),
        policy=str(raw.get("policy", "greedy")),
        seed=int(raw.get("seed", 0)),
        max_steps=int(raw.get("max_steps", 128)),
        neutral_variant=neutral,
        label=str(raw.get("label", path.stem)),
        benchmark=str(raw.get("benchmark", "")),
    )
    if endpoint_override and isinstance(config.backend, Mapping):
        backend_spec = dict(config.backend)
        if backend_spec.get("type") == "remote":
            backend_spec["endpoint"] = endpoint_override
            config = replace(config, backend=backend_spec)
    return config


def build_cell_inputs(
    config: ExperimentConfig, setting: PlacementSetting
) -> tuple[tuple[int, ...], SchemaSpec]:
    """Prompt ids and enforced schema for one cell.

    c_p selects the prompt span; c_s selects whether the instructional
    rewording is applied to the enforced key. Nothing else varies.
    """
    prompt_ids = config.template.render(setting.c_p)
    variant = config.instructional_variant if setting.c_s else config.resolved_neutral()
    enforced = apply_variant(config.schema, variant)
    return prompt_ids, enforced


def cell_variant(config: ExperimentConfig, setting: PlacementSetting) -> KeyVariant:
    return config.instructional_variant if setting.c_s else config.resolved_neutral()


def derive_item_seed(master_seed: int, item_id: str, setting: PlacementSetting) -> int:
    """Stable per-(item, setting) seed; adding items never perturbs existing ones."""
    digest = hashlib.sha256(
        f"{master_seed}|{item_id}|{setting.c_p}{setting.c_s}".encode()
    ).digest()
    return int.from_bytes(digest[:8], "big")


def verify_controls(config: ExperimentConfig) -> None:
    """Assert the cross-setting controls instead of trusting construction.

    The two prompts must agree byte-for-byte outside the description span,
    and the two enforced serialization skeletons must differ exactly in the
    target key literal.
    """
    t = config.template
    p0 = t.render(0)
    p1 = t.render(1)
    n = len(t.prefix_ids)
    if p0[:n] != p1[:n]:
        raise ValidationError("prompt prefixes differ outside the description span")
    if t.suffix_ids and (p0[-len(t.suffix_ids):] != t.suffix_ids or p1[-len(t.suffix_ids):] != t.suffix_ids):
        raise ValidationError("prompt suffixes differ outside the description span")
    if p0[n : len(p0) - len(t.suffix_ids)] != t.neutral_span_ids:
        raise ValidationError("neutral prompt body is not exactly the neutral span")
    if p1[n : len(p1) - len(t.suffix_ids)] != t.instructional_span_ids:
        raise ValidationError("instructional prompt body is not exactly the instructional span")

    neutral_schema = apply_variant(config.schema, config.resolved_neutral())
    instr_schema = apply_variant(config.schema, config.instructional_variant)
    target = config.instructional_variant.target_field_index
    if len(neutral_schema.fields) != len(instr_schema.fields):
        raise ValidationError("enforced schemas differ in field count")
    for i, (a, b) in enumerate(zip(neutral_schema.fields, instr_schema.fields)):
        if a.kind != b.kind:
            raise ValidationError("enforced schemas differ in value kinds")
        if i != target and a.key != b.key:
            raise ValidationError(
                f"enforced skeletons differ at field {i}, outside the target key literal"
            )


@dataclass(frozen=True)
class ItemRecord:
    item_id: str
    trace: str | None
    valid: bool
    correct: bool
    score: float
    cumulative_tax: float
    truncated: bool
    output: str

    def to_json(self) -> str:
        return json.dumps(
            {
                "item_id": self.item_id,
                "trace": self.trace,
                "valid": self.valid,
                "correct": self.correct,
                "score": self.score,
                "cumulative_tax": self.cumulative_tax,
                "truncated": self.truncated,
                "output": self.output,
            },
            sort_keys=True,
        )


@dataclass(frozen=True)
class CellResult:
    setting: PlacementSetting
    score: float  # percentage points
    items: tuple[ItemRecord, ...]


@dataclass(frozen=True)
class EffectReport:
    delta_key: float
    delta_prompt: float
    delta_both: float
    delta_int: float


def effects(r00: float, r01: float, r10: float, r11: float) -> EffectReport:
    """Single-channel and interaction effects of the four cell scores."""
    delta_key = r01 - r00
    delta_prompt = r10 - r00
    delta_both = r11 - r00
    return EffectReport(
        delta_key=delta_key,
        delta_prompt=delta_prompt,
        delta_both=delta_both,
        # Defined via the other three so the algebraic identity is exact.
        delta_int=delta_both - delta_key - delta_prompt,
    )


@dataclass(frozen=True)
class MatrixResult:
    cells: Mapping[str, CellResult]

    @property
    def r00(self) -> float:
        return self.cells["none"].score

    @property
    def r01(self) -> float:
        return self.cells["key_only"].score

    @property
    def r10(self) -> float:
        return self.cells["prompt_only"].score

    @property
    def r11(self) -> float:
        return self.cells["both"].score

    def effect_report(self) -> EffectReport:
        return effects(self.r00, self.r01, self.r10, self.r11)

    def to_matrix_json(self, label: str = "run", benchmark: str = "") -> str:
        report = self.effect_report()
        payload = {
            "label": label,
            "benchmark": benchmark,
            "r00": self.r00,
            "r01": self.r01,
            "r10": self.r10,
            "r11": self.r11,
            "effects": {
                "delta_key": report.delta_key,
                "delta_prompt": report.delta_prompt,
                "delta_both": report.delta_both,
                "delta_int": report.delta_int,
            },
            "cells": {
                label_: {
                    "score": cell.score,
                    "n_items": len(cell.items),
                }
                for label_, cell in self.cells.items()
            },
        }
        return json.dumps(payload, sort_keys=True, indent=2)


def _run_one_item(
    config: ExperimentConfig,
    model: LanguageModel,
    grammar: CompiledGrammar,
    variant: KeyVariant,
    prompt_base: tuple[int, ...],
    setting: PlacementSetting,
    item: ExperimentItem,
    out_dir: Path | None,
) -> ItemRecord:
    seed = derive_item_seed(config.seed, item.item_id, setting)
    trace = decode_constrained(
        model,
        grammar,
        config.vocab,
        prompt_base + item.prompt_ids,
        policy=config.policy,
        seed=seed,
        max_steps=config.max_steps,
    )
    output_bytes = detokenize(config.vocab, trace.output_ids)
    metric = metric_from_name(config.metric, config.schema, gold=item.gold_answer)
    score = bounded_metric(output_bytes, variant, config.schema, metric)
    try:
        canonicalize(output_bytes, variant, config.schema)
        valid = True
    except InvalidOutputError:
        valid = False
    trace_ref: str | None = None
    if out_dir is not None:
        trace_ref = f"{setting.label}/traces/{item.item_id}.jsonl"
        atomic_write_text(out_dir / trace_ref, trace.dump_jsonl())
    return ItemRecord(
        item_id=item.item_id,
        trace=trace_ref,
        valid=valid,
        correct=score == 1.0,
        score=score,
        cumulative_tax=trace.cumulative_tax,
        truncated=trace.truncated,
        output=output_bytes.decode("utf-8", errors="surrogateescape"),
    )


def _load_partial(out_dir: Path, setting: PlacementSetting) -> dict[str, ItemRecord]:
    path = out_dir / setting.label / "items.jsonl"
    if not path.exists():
        return {}
    records: dict[str, ItemRecord] = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        raw = json.loads(line)
        records[raw["item_id"]] = ItemRecord(**raw)
    return records


def _persist_cell(out_dir: Path, setting: PlacementSetting, records: Sequence[ItemRecord]) -> None:
    text = "".join(r.to_json() + "\n" for r in records)
    atomic_write_text(out_dir / setting.label / "items.jsonl", text)


def run_matrix(
    config: ExperimentConfig,
    out_dir: str | Path | None = None,
    resume: bool = False,
    jobs: int = 1,
) -> MatrixResult:
    """Run all four cells over the identical item list.

    Deterministic for deterministic backends: per-item seeds derive from the
    master seed and item id, and aggregation is an ordered fold. A backend
    error aborts the current cell after persisting the items that finished,
    so a later ``resume=True`` run completes only the missing ones.
    """
    model = (
        config.backend
        if not isinstance(config.backend, Mapping)
        else load_backend(config.backend, config.vocab)
    )
    verify_controls(config)
    out_path = Path(out_dir) if out_dir is not None else None

    grammars: dict[int, CompiledGrammar] = {}
    for c_s in (0, 1):
        setting = PlacementSetting(0, c_s)
        _, enforced = build_cell_inputs(config, setting)
        grammars[c_s] = compile_grammar(enforced, config.vocab)

    cells: dict[str, CellResult] = {}
    for setting in ALL_SETTINGS:
        prompt_base, _ = build_cell_inputs(config, setting)
        grammar = grammars[setting.c_s]
        variant = cell_variant(config, setting)
        done: dict[str, ItemRecord] = {}
        if resume and out_path is not None:
            done = _load_partial(out_path, setting)
        pending = [item for item in config.items if item.item_id not in done]

        def task(item: ExperimentItem) -> ItemRecord:
            return _run_one_item(
                config, model, grammar, variant, prompt_base, setting, item, out_path
            )

        try:
            if jobs > 1 and len(pending) > 1:
                from concurrent.futures import ThreadPoolExecutor

                with ThreadPoolExecutor(max_workers=jobs) as pool:
                    for item, record in zip(pending, pool.map(task, pending)):
                        done[item.item_id] = record
            else:
                for item in pending:
                    done[item.item_id] = task(item)
        except BackendError:
            if out_path is not None:
                finished = [done[i.item_id] for i in config.items if i.item_id in done]
                _persist_cell(out_path, setting, finished)
            raise

        records = tuple(done[item.item_id] for item in config.items)
        score = 100.0 * (sum(r.score for r in records) / len(records))
        if out_path is not None:
            _persist_cell(out_path, setting, records)
        cells[setting.label] = CellResult(setting=setting, score=score, items=records)

    result = MatrixResult(cells=cells)
    if out_path is not None:
        atomic_write_text(
            out_path / "matrix.json", result.to_matrix_json(config.label, config.benchmark)
        )
        report = result.effect_report()
        atomic_write_text(
            out_path / "effects.csv",
            effects_csv([(config.label, config.benchmark, result.r00, result.r01, result.r10, result.r11, report)]),
        )
    return result


def effects_csv(
    rows: Sequence[tuple[str, str, float, float, float, float, EffectReport]]
) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        [
            "model",
            "benchmark",
            "r00",
            "r01",
            "r10",
            "r11",
            "delta_key",
            "delta_prompt",
            "delta_both",
            "delta_int",
        ]
    )
    for model, benchmark, r00, r01, r10, r11, report in rows:
        writer.writerow(
            [
                model,
                benchmark,
                f"{r00:.6f}",
                f"{r01:.6f}",
                f"{r10:.6f}",
                f"{r11:.6f}",
                f"{report.delta_key:.6f}",
                f"{report.delta_prompt:.6f}",
                f"{report.delta_both:.6f}",
                f"{report.delta_int:.6f}",
            ]
        )
    return buf.getvalue()


@dataclass(frozen=True)
class SensitivityRow:
    model: str
    benchmark: str
    delta_key: float
    delta_prompt: float
    delta_int: float
    annotation: str


@dataclass(frozen=True)
class SensitivityTable:
    rows: tuple[SensitivityRow, ...]
    epsilon: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["model", "benchmark", "delta_key", "delta_prompt", "delta_int", "annotation"])
        for row in self.rows:
            writer.writerow(
                [
                    row.model,
                    row.benchmark,
                    f"{row.delta_key:.6f}",
                    f"{row.delta_prompt:.6f}",
                    f"{row.delta_int:.6f}",
                    row.annotation,
                ]
            )
        return buf.getvalue()

    def to_json_data(self) -> str:
        """Palette-free data file for external plotting."""
        payload = {
            "epsilon": self.epsilon,
            "columns": ["delta_key", "delta_prompt", "delta_int"],
            "rows": [
                {
                    "model": row.model,
                    "benchmark": row.benchmark,
                    "delta_key": row.delta_key,
                    "delta_prompt": row.delta_prompt,
                    "delta_int": row.delta_int,
                    "annotation": row.annotation,
                }
                for row in self.rows
            ],
        }
        return json.dumps(payload, sort_keys=True, indent=2)


def _annotate(delta_int: float, epsilon: float) -> str:
    if delta_int > epsilon:
        return "synergy"
    if delta_int < -epsilon:
        return "redundancy-conflict"
    return "additive"


def sensitivity_map(
    reports: Sequence[tuple[str, str, EffectReport]], epsilon: float = 0.5
) -> SensitivityTable:
    """Grid of per-(model, benchmark) effect triples with sign annotations."""
    if not reports:
        raise ValidationError("no effect reports given")
    seen: set[tuple[str, str]] = set()
    rows = []
    for model, benchmark, report in reports:
        key = (model, benchmark)
        if key in seen:
            raise ValidationError(f"duplicate (model, benchmark) pair {key}")
        seen.add(key)
        rows.append(
            SensitivityRow(
                model=model,
                benchmark=benchmark,
                delta_key=report.delta_key,
                delta_prompt=report.delta_prompt,
                delta_int=report.delta_int,
                annotation=_annotate(report.delta_int, epsilon),
            )
        )
    return SensitivityTable(rows=tuple(rows), epsilon=epsilon)
