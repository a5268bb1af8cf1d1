import json
import math

import pytest

from conftest import build_matrix_fixture, make_integer_instance
from cdtax.cli import main
from cdtax.grammarfile import load_grammar
from cdtax.lm import encode_logprob
from cdtax.mockserver import run_mock_server
from cdtax.vocab import save_vocabulary


@pytest.fixture()
def compile_inputs(tmp_path):
    inst = make_integer_instance(0)
    vocab_path = tmp_path / "vocab.txt"
    save_vocabulary(inst.vocab, vocab_path)
    schema_path = tmp_path / "schema.json"
    schema_path.write_text(json.dumps(inst.schema.to_dict()))
    backend_path = tmp_path / "backend.json"
    backend_path.write_text(
        json.dumps(
            {
                "type": "tabular",
                "default": [encode_logprob(v) for v in inst.model.default.logprobs.tolist()],
                "entries": [
                    {
                        "context": list(ctx),
                        "logprobs": [encode_logprob(v) for v in dist.logprobs.tolist()],
                    }
                    for ctx, dist in inst.model.table.items()
                ],
            }
        )
    )
    return inst, vocab_path, schema_path, backend_path


def run_cli(*argv: str, capsys=None) -> int:
    return main(list(argv))


def test_help_screens_exit_zero(capsys):
    for command in ("compile", "decode", "oracle", "matrix", "report"):
        assert main([command, "--help"]) == 0
        help_text = capsys.readouterr().out
        expected_flags = {
            "compile": ["--schema", "--variant", "--vocab", "--out"],
            "decode": ["--grammar", "--backend", "--prompt-ids", "--policy", "--seed", "--trace"],
            "oracle": ["--grammar", "--backend", "--prefix-ids", "--max-len", "--metric", "--variant-pair"],
            "matrix": ["--config", "--resume", "--jobs", "--out"],
            "report": ["--matrix", "--out-csv"],
        }[command]
        for flag in expected_flags:
            assert flag in help_text


def test_compile_success_and_stats(tmp_path, compile_inputs, capsys):
    inst, vocab_path, schema_path, _ = compile_inputs
    out = tmp_path / "grammar.json"
    code = run_cli("compile", "--schema", str(schema_path), "--vocab", str(vocab_path), "--out", str(out))
    assert code == 0
    stderr = capsys.readouterr().err
    assert "states" in stderr
    loaded = load_grammar(out)
    assert loaded.vocab.fingerprint == inst.vocab.fingerprint


def test_compile_missing_vocab_is_usage_error(tmp_path, compile_inputs, capsys):
    _, _, schema_path, _ = compile_inputs
    code = run_cli(
        "compile", "--schema", str(schema_path), "--vocab", str(tmp_path / "nope.txt"),
        "--out", str(tmp_path / "g.json"),
    )
    assert code == 1
    assert "--help" in capsys.readouterr().err


def test_compile_coverage_failure_exits_2(tmp_path, capsys):
    vocab_path = tmp_path / "tiny.txt"
    # no opening brace anywhere
    vocab_path.write_text("#eos 1\n0\tYQ==\n1\t\n")
    schema_path = tmp_path / "schema.json"
    schema_path.write_text(json.dumps({"fields": [{"key": "a", "kind": "string"}]}))
    code = run_cli(
        "compile", "--schema", str(schema_path), "--vocab", str(vocab_path),
        "--out", str(tmp_path / "g.json"),
    )
    assert code == 2
    assert "0x7B" in capsys.readouterr().err


def test_compile_with_variant(tmp_path, compile_inputs):
    inst, vocab_path, schema_path, _ = compile_inputs
    key = inst.schema.fields[0].key
    variant_path = tmp_path / "variant.json"
    # rewording must stay expressible by the vocabulary: reuse the same key
    variant_path.write_text(json.dumps({"field": key, "wording": key}))
    out = tmp_path / "g.json"
    code = run_cli(
        "compile", "--schema", str(schema_path), "--variant", str(variant_path),
        "--vocab", str(vocab_path), "--out", str(out),
    )
    assert code == 0


def test_decode_writes_trace_and_json(tmp_path, compile_inputs, capsys):
    inst, vocab_path, schema_path, backend_path = compile_inputs
    grammar_path = tmp_path / "g.json"
    assert run_cli("compile", "--schema", str(schema_path), "--vocab", str(vocab_path), "--out", str(grammar_path)) == 0
    capsys.readouterr()
    trace_path = tmp_path / "trace.jsonl"
    code = run_cli(
        "decode", "--grammar", str(grammar_path), "--backend", str(backend_path),
        "--prompt-ids", "", "--policy", "greedy", "--trace", str(trace_path),
    )
    assert code == 0
    out = capsys.readouterr().out
    payload = json.loads(out)
    assert payload["output"].startswith("{")
    assert not payload["truncated"]
    lines = trace_path.read_text().splitlines()
    footer = json.loads(lines[-1])
    assert footer["output_ids"] == payload["output_ids"]
    assert math.isclose(footer["cumulative_tax"], payload["cumulative_tax"])
    steps = [json.loads(l) for l in lines[:-1]]
    assert [s["step"] for s in steps] == list(range(1, len(steps) + 1))

    # determinism: run again, compare both outputs byte for byte
    capsys.readouterr()
    trace2 = tmp_path / "trace2.jsonl"
    assert run_cli(
        "decode", "--grammar", str(grammar_path), "--backend", str(backend_path),
        "--prompt-ids", "", "--policy", "greedy", "--trace", str(trace2),
    ) == 0
    assert capsys.readouterr().out == out
    assert trace2.read_text() == trace_path.read_text()


def test_oracle_json_output(tmp_path, compile_inputs, capsys):
    inst, vocab_path, schema_path, backend_path = compile_inputs
    grammar_path = tmp_path / "g.json"
    assert run_cli("compile", "--schema", str(schema_path), "--vocab", str(vocab_path), "--out", str(grammar_path)) == 0
    capsys.readouterr()
    code = run_cli(
        "oracle", "--grammar", str(grammar_path), "--backend", str(backend_path),
        "--prefix-ids", ",".join(str(i) for i in inst.prefix.prompt_ids),
        "--max-len", "5", "--metric", "exact_answer", "--gold", inst.value_digit,
    )
    assert code == 0
    payload = json.loads(capsys.readouterr().out)
    for field in ("p_bar", "q_bar", "t_val", "bound", "tv", "r_p", "r_q"):
        assert field in payload
    assert payload["t_val"] >= 0
    assert payload["tv"] <= payload["bound"] + 1e-9
    assert payload["q_bar"]["truncation_mass"] < 1e-6


def test_oracle_budget_refusal(tmp_path, compile_inputs, capsys):
    inst, vocab_path, schema_path, backend_path = compile_inputs
    grammar_path = tmp_path / "g.json"
    assert run_cli("compile", "--schema", str(schema_path), "--vocab", str(vocab_path), "--out", str(grammar_path)) == 0
    code = run_cli(
        "oracle", "--grammar", str(grammar_path), "--backend", str(backend_path),
        "--prefix-ids", "", "--max-len", "64",
    )
    assert code == 4
    assert "refusing" in capsys.readouterr().err


def test_oracle_variant_pair(tmp_path, capsys):
    from conftest import make_variant_pair_instance

    inst = make_variant_pair_instance(2, aligned=True)
    vocab_path = tmp_path / "vocab.txt"
    save_vocabulary(inst.vocab, vocab_path)
    schema_path = tmp_path / "schema.json"
    schema_path.write_text(json.dumps(inst.schema.to_dict()))
    backend_path = tmp_path / "backend.json"
    backend_path.write_text(
        json.dumps(
            {
                "type": "tabular",
                "default": [encode_logprob(v) for v in inst.model.default.logprobs.tolist()],
                "entries": [
                    {"context": list(ctx), "logprobs": [encode_logprob(v) for v in d.logprobs.tolist()]}
                    for ctx, d in inst.model.table.items()
                ],
            }
        )
    )
    pair_path = tmp_path / "pair.json"
    pair_path.write_text(
        json.dumps(
            {
                "field": inst.neutral.canonical_key,
                "neutral": inst.neutral.wording,
                "instructional": inst.instructional.wording,
            }
        )
    )
    grammar_path = tmp_path / "g.json"
    assert run_cli("compile", "--schema", str(schema_path), "--vocab", str(vocab_path), "--out", str(grammar_path)) == 0
    capsys.readouterr()
    code = run_cli(
        "oracle", "--grammar", str(grammar_path), "--backend", str(backend_path),
        "--prefix-ids", ",".join(str(i) for i in inst.prompt),
        "--max-len", "3", "--metric", "exact_answer", "--gold", str(inst.gold),
        "--variant-pair", str(pair_path),
    )
    assert code == 0
    payload = json.loads(capsys.readouterr().out)
    assert "neutral" in payload and "instructional" in payload
    verdict = payload["sufficient_condition"]
    gain = payload["instructional"]["r_p"] - payload["neutral"]["r_p"]
    bounds = payload["instructional"]["bound"] + payload["neutral"]["bound"]
    assert verdict["holds"] == (gain > bounds)
    assert math.isclose(verdict["margin"], gain - bounds, abs_tol=1e-12)


def write_matrix_files(tmp_path, n_items=4):
    config, model, vocab = build_matrix_fixture(n_items)
    vocab_path = tmp_path / "vocab.txt"
    save_vocabulary(vocab, vocab_path)
    config_doc = {
        "label": "fixture",
        "benchmark": "toy",
        "vocab": "vocab.txt",
        "schema": config.schema.to_dict(),
        "instructional_variant": {"field": "steps", "wording": "step_by_step_reasoning"},
        "prompt_template": {
            "prefix_ids": list(config.template.prefix_ids),
            "neutral_span_ids": list(config.template.neutral_span_ids),
            "instructional_span_ids": list(config.template.instructional_span_ids),
            "suffix_ids": list(config.template.suffix_ids),
        },
        "backend": {"type": "remote", "endpoint": "http://placeholder.invalid"},
        "items": [
            {"id": i.item_id, "prompt_ids": list(i.prompt_ids), "gold_answer": i.gold_answer}
            for i in config.items
        ],
        "metric": "exact_answer",
        "policy": "greedy",
        "seed": 7,
        "max_steps": 64,
    }
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(config_doc))
    return config, model, vocab, config_path


def test_matrix_and_report_end_to_end(tmp_path, capsys, monkeypatch):
    config, model, vocab, config_path = write_matrix_files(tmp_path)
    out_dir = tmp_path / "results"
    with run_mock_server(model, vocab) as server:
        monkeypatch.setenv("CDTAX_BACKEND_URL", server.endpoint)
        code = run_cli("matrix", "--config", str(config_path), "--out", str(out_dir))
    assert code == 0
    matrix_payload = json.loads(capsys.readouterr().out)
    assert set(matrix_payload["cells"]) == {"none", "key_only", "prompt_only", "both"}
    assert (out_dir / "matrix.json").exists()
    assert (out_dir / "effects.csv").exists()

    capsys.readouterr()
    effects_csv = tmp_path / "effects.csv"
    code = run_cli(
        "report", "--matrix", str(out_dir / "matrix.json"), "--out-csv", str(effects_csv)
    )
    assert code == 0
    rows = effects_csv.read_text().strip().split("\n")
    assert rows[0].startswith("model,benchmark,r00")
    assert len(rows) == 2
    assert (tmp_path / "sensitivity.csv").exists()
    assert (tmp_path / "sensitivity.json").exists()
    # the report path renders figures next to the delimited output
    assert (tmp_path / "sensitivity_map.png").stat().st_size > 0
    assert (tmp_path / "placement_scores.png").stat().st_size > 0


def test_matrix_backend_failure_then_resume(tmp_path, capsys, monkeypatch):
    config, model, vocab, config_path = write_matrix_files(tmp_path)
    out_dir = tmp_path / "results"
    with run_mock_server(model, vocab, fail_after=30) as server:
        monkeypatch.setenv("CDTAX_BACKEND_URL", server.endpoint)
        code = run_cli("matrix", "--config", str(config_path), "--out", str(out_dir))
        assert code == 3
        server.reset_failure(None)
        capsys.readouterr()
        code = run_cli("matrix", "--config", str(config_path), "--out", str(out_dir), "--resume")
        assert code == 0
    payload = json.loads(capsys.readouterr().out)
    reference = {"none": 50.0, "key_only": 50.0, "prompt_only": 50.0, "both": 50.0}
    assert {k: v["score"] for k, v in payload["cells"].items()} == reference


def test_matrix_empty_items_exits_2(tmp_path, capsys):
    _, _, _, config_path = write_matrix_files(tmp_path)
    doc = json.loads(config_path.read_text())
    doc["items"] = []
    config_path.write_text(json.dumps(doc))
    assert run_cli("matrix", "--config", str(config_path), "--out", str(tmp_path / "r")) == 2


def test_report_reproduces_published_effect_table(tmp_path, capsys):
    from conftest import PLACEMENT_ROWS

    fixture = {
        "matrices": [
            {"model": m, "benchmark": b, "r00": r00, "r01": r01, "r10": r10, "r11": r11}
            for m, b, r00, r01, r11, r10, *_ in PLACEMENT_ROWS
        ]
    }
    path = tmp_path / "rows.json"
    path.write_text(json.dumps(fixture))
    out_csv = tmp_path / "out" / "effects.csv"
    code = run_cli("report", "--matrix", str(path), "--out-csv", str(out_csv), "--no-figures")
    assert code == 0
    lines = out_csv.read_text().strip().split("\n")
    assert len(lines) == 1 + len(PLACEMENT_ROWS)
    for line, row in zip(lines[1:], PLACEMENT_ROWS):
        cells = line.split(",")
        assert cells[0] == row[0] and cells[1] == row[1]
        dkey, dprompt, dint = float(cells[6]), float(cells[7]), float(cells[9])
        assert math.isclose(dkey, row[6], abs_tol=0.01)
        assert math.isclose(dprompt, row[7], abs_tol=0.01)
        assert math.isclose(dint, row[8], abs_tol=0.01)
    sens = (tmp_path / "out" / "sensitivity.csv").read_text().strip().split("\n")
    assert len(sens) == 1 + len(PLACEMENT_ROWS)
    # DeepSeek-R1 GSM8K shows synergy at the default 0.5-point band
    synergy_row = next(l for l in sens if l.startswith("DeepSeek-R1-Distill-Qwen-7B,GSM8K"))
    assert synergy_row.endswith("synergy")
    assert not (tmp_path / "out" / "sensitivity_map.png").exists()


def test_unknown_flag_exits_1(capsys):
    assert main(["compile", "--bogus"]) == 1
    assert main(["compile"]) == 1  # missing required flags is a usage error
