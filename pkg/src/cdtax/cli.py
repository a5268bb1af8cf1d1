"""Command-line interface.

Exit codes: 0 success, 1 usage, 2 validation, 3 backend, 4 budget refusal.
Human-readable summaries go to stderr; stdout and --out paths carry only the
declared machine formats.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import channels, grammar as grammar_mod, metrics, plots, projection
from .errors import (
    BackendError,
    BudgetExceededError,
    CdtaxError,
    ParseError,
    UsageError,
    ValidationError,
)
from .fileio import atomic_write_text
from .grammarfile import load_grammar, save_grammar
from .lm import Prefix, load_backend
from .vocab import detokenize, greedy_tokenize, load_vocabulary

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_BACKEND = 3
EXIT_BUDGET = 4

ENV_BACKEND_URL = "CDTAX_BACKEND_URL"


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # usage problems exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _parse_ids(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    try:
        return tuple(int(part) for part in text.replace(",", " ").split())
    except ValueError:
        raise UsageError(f"could not parse token ids from {text!r}")


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} file not found: {path}")
    return p


def _say(message: str) -> None:
    print(message, file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cdtax", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p_compile = sub.add_parser("compile", help="compile a schema into a grammar file")
    p_compile.add_argument("--schema", required=True, help="schema JSON file")
    p_compile.add_argument("--variant", help="key-variant JSON file applied before compiling")
    p_compile.add_argument("--vocab", required=True, help="vocabulary file")
    p_compile.add_argument("--out", required=True, help="output grammar file")

    p_decode = sub.add_parser("decode", help="constrained decode with step-cost trace")
    p_decode.add_argument("--grammar", required=True, help="compiled grammar file")
    p_decode.add_argument("--backend", required=True, help="backend spec JSON file")
    p_decode.add_argument("--prompt-ids", default="", help="comma/space separated token ids")
    p_decode.add_argument("--policy", default="greedy", choices=["greedy", "sample"])
    p_decode.add_argument("--seed", type=int, default=None)
    p_decode.add_argument("--max-steps", type=int, default=256)
    p_decode.add_argument("--trace", required=True, help="output JSONL trace file")

    p_oracle = sub.add_parser("oracle", help="exact continuation diagnostics")
    p_oracle.add_argument("--grammar", required=True, help="compiled grammar file")
    p_oracle.add_argument("--backend", required=True, help="backend spec JSON file")
    p_oracle.add_argument("--prefix-ids", default="", help="prompt ids conditioning the value")
    p_oracle.add_argument("--max-len", type=int, required=True)
    p_oracle.add_argument("--metric", default="constant_one")
    p_oracle.add_argument("--gold", default=None, help="gold answer for exact_answer")
    p_oracle.add_argument("--field", default=None, help="target field key (default: leading field)")
    p_oracle.add_argument("--variant-pair", help="JSON file naming neutral+instructional wordings")

    p_matrix = sub.add_parser("matrix", help="run the 2x2 placement matrix")
    p_matrix.add_argument("--config", required=True, help="experiment config JSON")
    p_matrix.add_argument("--out", required=True, help="results directory")
    p_matrix.add_argument("--resume", action="store_true", help="complete a partial run")
    p_matrix.add_argument("--jobs", type=int, default=1, help="max concurrent items per cell")

    p_report = sub.add_parser("report", help="effects and sensitivity tables from matrices")
    p_report.add_argument("--matrix", required=True, help="matrix.json or multi-matrix JSON")
    p_report.add_argument("--out-csv", required=True, help="effects CSV path")
    p_report.add_argument("--sensitivity-csv", default=None)
    p_report.add_argument("--sensitivity-json", default=None)
    p_report.add_argument("--epsilon", type=float, default=0.5, help="additivity band for annotations")
    p_report.add_argument("--no-figures", action="store_true", help="skip figure rendering")
    p_report.add_argument("--figures-dir", default=None)

    return parser


def cmd_compile(args: argparse.Namespace) -> int:
    vocab = load_vocabulary(_require_file(args.vocab, "vocabulary"))
    schema = grammar_mod.load_schema(_require_file(args.schema, "schema"))
    if args.variant:
        variant = grammar_mod.load_variant(_require_file(args.variant, "variant"), schema)
        schema = grammar_mod.apply_variant(schema, variant)
    compiled = grammar_mod.compile_grammar(schema, vocab)
    save_grammar(compiled, args.out)
    _say(
        f"compiled {len(schema.fields)} fields over {len(vocab)} tokens: "
        f"{compiled.num_states} states, {compiled.num_transitions} transitions -> {args.out}"
    )
    return EXIT_OK


def _load_backend_for(grammar, args: argparse.Namespace):
    override = os.environ.get(ENV_BACKEND_URL)
    return load_backend(
        _require_file(args.backend, "backend"), grammar.vocab, endpoint_override=override
    )


def cmd_decode(args: argparse.Namespace) -> int:
    compiled = load_grammar(_require_file(args.grammar, "grammar"))
    model = _load_backend_for(compiled, args)
    prompt_ids = _parse_ids(args.prompt_ids)
    trace = projection.decode_constrained(
        model,
        compiled,
        compiled.vocab,
        prompt_ids,
        policy=args.policy,
        seed=args.seed,
        max_steps=args.max_steps,
    )
    atomic_write_text(args.trace, trace.dump_jsonl())
    output_bytes = detokenize(compiled.vocab, trace.output_ids)
    print(
        json.dumps(
            {
                "output": output_bytes.decode("utf-8", errors="surrogateescape"),
                "output_ids": list(trace.output_ids),
                "cumulative_tax": trace.cumulative_tax,
                "truncated": trace.truncated,
            },
            sort_keys=True,
        )
    )
    _say(f"decoded {len(trace.output_ids)} tokens, cumulative tax {trace.cumulative_tax:.6f}")
    return EXIT_OK


def _typed_gold(raw: str | None, schema) -> object | None:
    if raw is None:
        return None
    kind = schema.fields[-1].kind
    if kind == "integer":
        return int(raw)
    if kind == "number":
        return float(raw)
    return raw


def _value_analysis(model, compiled, canonical_schema, variant, prompt_ids, max_len, metric):
    """P/Q continuation distributions and their scores after the key prefix."""
    vocab = compiled.vocab
    literal = compiled.pre_value_literal(variant.target_field_index)
    generated = tuple(greedy_tokenize(vocab, literal))
    prefix = Prefix(prompt_ids, generated)
    p_bar = projection.enumerate_continuations(model, vocab, prefix, max_len)
    q_bar = projection.enumerate_continuations(model, vocab, prefix, max_len, grammar=compiled)
    report = projection.divergences(q_bar, p_bar)
    r_p = metrics.expected_score(p_bar, variant, canonical_schema, metric)
    r_q = metrics.expected_score(q_bar, variant, canonical_schema, metric)
    return {
        "p_bar": {
            "support_size": len(p_bar.support),
            "truncation_mass": p_bar.truncation_mass,
            "completed_mass": p_bar.completed_mass,
        },
        "q_bar": {
            "support_size": len(q_bar.support),
            "truncation_mass": q_bar.truncation_mass,
            "completed_mass": q_bar.completed_mass,
        },
        "t_val": report.t_val,
        "bound": report.bound,
        "tv": report.tv,
        "r_p": r_p.value,
        "r_q": r_q.value,
    }


def cmd_oracle(args: argparse.Namespace) -> int:
    compiled = load_grammar(_require_file(args.grammar, "grammar"))
    model = _load_backend_for(compiled, args)
    prompt_ids = _parse_ids(args.prefix_ids)
    schema = compiled.schema
    field_key = args.field or schema.fields[0].key
    field_index = schema.field_index(field_key)
    gold = _typed_gold(args.gold, schema)
    metric = metrics.metric_from_name(args.metric, schema, gold=gold)

    if not args.variant_pair:
        variant = grammar_mod.identity_variant(schema, field_index)
        result = _value_analysis(
            model, compiled, schema, variant, prompt_ids, args.max_len, metric
        )
        print(json.dumps(result, sort_keys=True, indent=2))
        return EXIT_OK

    pair_path = _require_file(args.variant_pair, "variant pair")
    try:
        pair_raw = json.loads(pair_path.read_text(encoding="utf-8"))
        pair_field = str(pair_raw["field"])
        neutral_wording = str(pair_raw["neutral"])
        instructional_wording = str(pair_raw["instructional"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ParseError(f"{pair_path}: malformed variant pair: {exc}")
    pair_index = schema.field_index(pair_field)
    result: dict = {"field": pair_field}
    analyses = {}
    for label, wording in (("neutral", neutral_wording), ("instructional", instructional_wording)):
        variant = grammar_mod.KeyVariant(
            target_field_index=pair_index, canonical_key=pair_field, wording=wording
        )
        enforced = grammar_mod.apply_variant(schema, variant)
        variant_grammar = grammar_mod.compile_grammar(enforced, compiled.vocab)
        analyses[label] = _value_analysis(
            model, variant_grammar, schema, variant, prompt_ids, args.max_len, metric
        )
        result[label] = {"wording": wording, **analyses[label]}
    verdict = metrics.sufficient_condition(
        analyses["instructional"]["r_p"],
        analyses["neutral"]["r_p"],
        analyses["instructional"]["bound"],
        analyses["neutral"]["bound"],
    )
    result["sufficient_condition"] = {"holds": verdict.holds, "margin": verdict.margin}
    print(json.dumps(result, sort_keys=True, indent=2))
    return EXIT_OK


def cmd_matrix(args: argparse.Namespace) -> int:
    override = os.environ.get(ENV_BACKEND_URL)
    config = channels.load_experiment_config(
        _require_file(args.config, "config"), endpoint_override=override
    )
    result = channels.run_matrix(config, out_dir=args.out, resume=args.resume, jobs=args.jobs)
    print(result.to_matrix_json(config.label, config.benchmark))
    _say(
        "matrix complete: "
        + ", ".join(f"{label}={cell.score:.2f}" for label, cell in result.cells.items())
    )
    return EXIT_OK


def _report_rows(payload: dict) -> list[tuple[str, str, float, float, float, float]]:
    if "r00" in payload:
        entries = [payload]
    elif isinstance(payload.get("matrices"), list):
        entries = payload["matrices"]
    else:
        raise ParseError("matrix input must contain 'r00'..'r11' or a 'matrices' list")
    rows = []
    for i, entry in enumerate(entries):
        try:
            rows.append(
                (
                    str(entry.get("model", entry.get("label", f"row{i}"))),
                    str(entry.get("benchmark", "")),
                    float(entry["r00"]),
                    float(entry["r01"]),
                    float(entry["r10"]),
                    float(entry["r11"]),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"matrix entry {i} is malformed: {exc}")
    return rows


def cmd_report(args: argparse.Namespace) -> int:
    payload = json.loads(_require_file(args.matrix, "matrix").read_text(encoding="utf-8"))
    rows = _report_rows(payload)
    effect_rows = []
    labeled_reports = []
    for model, benchmark, r00, r01, r10, r11 in rows:
        report = channels.effects(r00, r01, r10, r11)
        effect_rows.append((model, benchmark, r00, r01, r10, r11, report))
        labeled_reports.append((model, benchmark, report))

    out_csv = Path(args.out_csv)
    atomic_write_text(out_csv, channels.effects_csv(effect_rows))
    table = channels.sensitivity_map(labeled_reports, epsilon=args.epsilon)
    sens_csv = Path(args.sensitivity_csv) if args.sensitivity_csv else out_csv.with_name("sensitivity.csv")
    sens_json = Path(args.sensitivity_json) if args.sensitivity_json else out_csv.with_name("sensitivity.json")
    atomic_write_text(sens_csv, table.to_csv())
    atomic_write_text(sens_json, table.to_json_data())
    written = [str(out_csv), str(sens_csv), str(sens_json)]

    if not args.no_figures:
        figures_dir = Path(args.figures_dir) if args.figures_dir else out_csv.parent
        figures_dir.mkdir(parents=True, exist_ok=True)
        heatmap = figures_dir / "sensitivity_map.png"
        plots.render_sensitivity_heatmap(table, heatmap)
        written.append(str(heatmap))
        if len(rows) == 1:
            model, benchmark, r00, r01, r10, r11 = rows[0]
            bars = figures_dir / "placement_scores.png"
            plots.render_placement_bars(
                {"none": r00, "key_only": r01, "prompt_only": r10, "both": r11},
                bars,
                title=f"{model} {benchmark}".strip(),
            )
            written.append(str(bars))
    _say("report written: " + ", ".join(written))
    return EXIT_OK


COMMANDS = {
    "compile": cmd_compile,
    "decode": cmd_decode,
    "oracle": cmd_oracle,
    "matrix": cmd_matrix,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        _say(f"cdtax {args.command}: {exc}")
        _say(f"run 'cdtax {args.command} --help' for usage")
        return EXIT_USAGE
    except FileNotFoundError as exc:
        _say(f"cdtax {args.command}: file not found: {exc.filename or exc}")
        _say(f"run 'cdtax {args.command} --help' for usage")
        return EXIT_USAGE
    except BudgetExceededError as exc:
        _say(f"cdtax {args.command}: {exc}")
        return EXIT_BUDGET
    except BackendError as exc:
        _say(f"cdtax {args.command}: backend error: {exc}")
        return EXIT_BACKEND
    except (ParseError, ValidationError, CdtaxError) as exc:
        _say(f"cdtax {args.command}: {exc}")
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
