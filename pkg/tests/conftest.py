"""Shared fixtures and generators for desk-scale test instances.

The enumerable instance families are built so that exact oracles stay cheap:
chunky vocabularies make every automaton state token-consumable while keeping
the constrained token paths short, and the random models are biased toward
stopping so the recorded truncation masses stay below 1e-6.
"""

from __future__ import annotations

import string as string_mod
from dataclasses import dataclass

import numpy as np
import pytest

from cdtax.grammar import (
    CompiledGrammar,
    FieldSpec,
    KeyVariant,
    SchemaSpec,
    compile_grammar,
    identity_variant,
)
from cdtax.lm import NextTokenDistribution, Prefix, TabularLM
from cdtax.vocab import Vocabulary, greedy_tokenize


def biased_probs(
    rng: np.random.Generator,
    size: int,
    eos_id: int,
    heavy: dict[int, tuple[float, float]],
    rest_total_range: tuple[float, float] = (0.0015, 0.003),
) -> np.ndarray:
    """Probability vector with designated heavy entries and a tiny random rest.

    ``heavy`` maps token id -> uniform range for its share; eos takes whatever
    keeps the total at one.
    """
    probs = np.zeros(size)
    assigned = 0.0
    for token_id, (lo, hi) in heavy.items():
        share = rng.uniform(lo, hi)
        probs[token_id] = share
        assigned += share
    rest_total = rng.uniform(*rest_total_range)
    others = [i for i in range(size) if i != eos_id and probs[i] == 0.0]
    if others:
        weights = rng.dirichlet(np.ones(len(others)))
        probs[others] = weights * rest_total
        assigned += rest_total
    if assigned >= 1.0:
        raise ValueError("heavy shares exceed total mass")
    probs[eos_id] += 1.0 - probs.sum()
    return probs


@dataclass
class EnumerableInstance:
    """One exact-oracle test case: grammar, model, and the value-region prefix."""

    vocab: Vocabulary
    schema: SchemaSpec
    grammar: CompiledGrammar
    model: TabularLM
    prefix: Prefix
    max_len: int
    value_digit: str | None = None  # integer family: the repeatable value digit

    @property
    def variant(self) -> KeyVariant:
        return identity_variant(self.schema)


LETTERS = "abcdefghjkmnpqrstuvwxyz"


def assign_digit_tails(rng: np.random.Generator, digits: list[str], lengths: list[int]) -> list[str]:
    """Split digits into numeric tails whose leading digit is never zero."""
    pool = [d for d in digits if d != "0"]
    rng.shuffle(pool)
    zero_pending = "0" in digits
    tails = []
    for length in lengths:
        tail = pool.pop()  # leads stay nonzero
        for _ in range(length - 1):
            if zero_pending:
                tail += "0"
                zero_pending = False
            else:
                tail += pool.pop()
        tails.append(tail)
    if zero_pending:
        raise ValueError("no non-leading slot available for digit 0")
    return tails


def make_integer_instance(seed: int, max_len: int = 5) -> EnumerableInstance:
    """Single integer-field schema over an 8-token vocabulary.

    Seven surfaces are coverage-forced (one per automaton entry byte class);
    the value token is a single nonzero digit, so grammar-valid continuations
    are digit runs closed by '}'. Models are stop-biased so both truncation
    masses stay below 1e-6 at the chosen horizon.
    """
    rng = np.random.default_rng(seed)
    key = rng.choice(list(LETTERS))
    digits = list("0123456789")
    rng.shuffle(digits)
    nonzero = next(d for d in digits if d != "0")
    digits.remove(nonzero)
    tails = assign_digit_tails(rng, digits, [2, 2, 2, 3])
    kind = rng.choice(["integer", "number"])

    surfaces = [
        f'{{"{key}":'.encode(),          # start -> value start
        f'"{key}":{tails[0]}}}'.encode(),  # covers the post-{ state
        f'{key}":{tails[1]}}}'.encode(),   # covers the in-key state
        f'":{tails[2]}}}'.encode(),        # covers the post-key state
        f':{tails[3]}}}'.encode(),         # covers the pre-colon state
        nonzero.encode(),                 # value digit; loops in the digit state
        b"}",                             # closes the object; covers the zero state
        b"",                              # eos
    ]
    vocab = Vocabulary.from_surfaces(surfaces, eos_id=7)
    schema = SchemaSpec(fields=(FieldSpec(str(key), str(kind)),), max_string_len=4)
    grammar = compile_grammar(schema, vocab)

    eos, close, value = 7, 6, 5
    heavy = {close: (0.04, 0.055), value: (1e-4, 3e-4)}

    def draw() -> NextTokenDistribution:
        return NextTokenDistribution.from_probs(
            biased_probs(rng, len(vocab), eos, heavy, rest_total_range=(0.001, 0.002))
        )

    prompt = tuple(int(t) for t in rng.integers(0, len(vocab) - 1, size=rng.integers(0, 3)))
    generated = tuple(greedy_tokenize(vocab, grammar.pre_value_literal(0)))
    prefix = Prefix(prompt, generated)
    table: dict[tuple[int, ...], NextTokenDistribution] = {}
    context = prefix.context()
    for extension in [(), (value,), (value, value)]:
        table[context + extension] = draw()
    model = TabularLM(table=table, default=draw())
    return EnumerableInstance(
        vocab=vocab,
        schema=schema,
        grammar=grammar,
        model=model,
        prefix=prefix,
        max_len=max_len,
        value_digit=nonzero,
    )


def make_string_instance(seed: int, max_len: int = 4) -> EnumerableInstance:
    """Single string-field schema (content cap 2) over 12 tokens.

    All grammar-valid continuations from the value start finish within three
    tokens, so the constrained distribution has zero truncation and a support
    of five differently-shaped string values.
    """
    rng = np.random.default_rng(seed)
    key = rng.choice(list(LETTERS))
    c1, c2 = rng.choice(list(LETTERS), size=2, replace=False)

    surfaces = [
        f'{{"{key}":'.encode(),            # 0: start -> value start
        f'"{key}":"{c1}"}}'.encode(),      # 1: covers post-{
        f'{key}":"{c1}"}}'.encode(),       # 2: covers in-key
        f'":"{c1}"}}'.encode(),            # 3: covers post-key
        f':"{c1}"}}'.encode(),             # 4: covers pre-colon
        f'"{c1}"}}'.encode(),              # 5: value c1
        b'""}',                            # 6: empty value; covers the escape state
        f'"{c1}{c2}"}}'.encode(),          # 7: value c1c2
        f'{c2}"}}'.encode(),               # 8: covers content states
        b'"}',                             # 9: covers the at-cap state
        b"}",                              # 10: covers the exit state
        b"",                               # 11: eos
    ]
    vocab = Vocabulary.from_surfaces(surfaces, eos_id=11)
    schema = SchemaSpec(fields=(FieldSpec(str(key), "string"),), max_string_len=2)
    grammar = compile_grammar(schema, vocab)

    eos = 11
    heavy = {5: (0.002, 0.005), 6: (0.002, 0.005), 7: (0.002, 0.005), 10: (0.006, 0.010)}

    def draw() -> NextTokenDistribution:
        return NextTokenDistribution.from_probs(
            biased_probs(rng, len(vocab), eos, heavy, rest_total_range=(0.0005, 0.001))
        )

    prompt = tuple(int(t) for t in rng.integers(0, len(vocab) - 1, size=rng.integers(0, 3)))
    generated = tuple(greedy_tokenize(vocab, grammar.pre_value_literal(0)))
    prefix = Prefix(prompt, generated)
    table = {prefix.context(): draw(), prefix.context() + (9,): draw()}
    model = TabularLM(table=table, default=draw())
    return EnumerableInstance(
        vocab=vocab,
        schema=schema,
        grammar=grammar,
        model=model,
        prefix=prefix,
        max_len=max_len,
    )


@dataclass
class VariantPairInstance:
    """Two structurally equivalent grammars differing in one key wording."""

    vocab: Vocabulary
    schema: SchemaSpec
    neutral: KeyVariant
    instructional: KeyVariant
    grammar_neutral: CompiledGrammar
    grammar_instructional: CompiledGrammar
    model: TabularLM
    prompt: tuple[int, ...]
    max_len: int
    gold: int
    digit_gold: str
    digit_other: str

    def prefix_for(self, wording_grammar: CompiledGrammar) -> Prefix:
        generated = tuple(
            greedy_tokenize(self.vocab, wording_grammar.pre_value_literal(0))
        )
        return Prefix(self.prompt, generated)


def make_variant_pair_instance(seed: int, aligned: bool) -> VariantPairInstance:
    """Instance for gain-versus-distortion tests.

    ``aligned`` models concentrate on grammar-valid single-digit answers,
    keyed differently per wording (the reworded key steers toward the gold
    digit); diffuse models spread mass more evenly. Value tokens close the
    object immediately, so constrained continuations always complete.
    """
    rng = np.random.default_rng(seed)
    k0, k1 = rng.choice(list(LETTERS), size=2, replace=False)
    digits = list("0123456789")
    rng.shuffle(digits)
    v_gold = next(i for i, dd in enumerate(digits) if dd != "0")
    gold_digit = digits.pop(v_gold)
    v_other = next(i for i, dd in enumerate(digits) if dd != "0")
    other_digit = digits.pop(v_other)
    tails = assign_digit_tails(rng, digits, [2, 2, 1, 1, 1, 1])

    surfaces = [
        f'{{"{k0}":'.encode(),              # 0
        f'{{"{k1}":'.encode(),              # 1
        f'"{k0}":{tails[0]}}}'.encode(),    # 2
        f'"{k1}":{tails[1]}}}'.encode(),    # 3
        f'{k0}":{tails[2]}}}'.encode(),     # 4
        f'{k1}":{tails[3]}}}'.encode(),     # 5
        f'":{tails[4]}}}'.encode(),         # 6 shared across both grammars
        f':{tails[5]}}}'.encode(),          # 7 shared
        f"{gold_digit}}}".encode(),         # 8: gold answer, closes object
        f"{other_digit}}}".encode(),        # 9: distractor answer
        b"}",                               # 10
        b"",                                # 11 eos
    ]
    vocab = Vocabulary.from_surfaces(surfaces, eos_id=11)
    schema = SchemaSpec(fields=(FieldSpec(str(k0), "integer"),), max_string_len=4)
    neutral = identity_variant(schema)
    instructional = KeyVariant(0, str(k0), str(k1))
    grammar_neutral = compile_grammar(schema, vocab)
    from cdtax.grammar import apply_variant

    grammar_instructional = compile_grammar(apply_variant(schema, instructional), vocab)

    eos, gold_tok, other_tok = 11, 8, 9
    prompt = tuple(int(t) for t in rng.integers(0, 8, size=rng.integers(1, 3)))

    def value_dist(gold_share: float, other_share: float) -> NextTokenDistribution:
        heavy = {
            gold_tok: (gold_share * 0.9, gold_share),
            other_tok: (other_share * 0.9, other_share),
        }
        return NextTokenDistribution.from_probs(
            biased_probs(rng, len(vocab), eos, heavy, rest_total_range=(0.001, 0.004))
        )

    table: dict[tuple[int, ...], NextTokenDistribution] = {}
    if aligned:
        table[prompt + (1,)] = value_dist(rng.uniform(0.75, 0.9), rng.uniform(0.01, 0.05))
        table[prompt + (0,)] = value_dist(rng.uniform(0.01, 0.05), rng.uniform(0.75, 0.9))
    else:
        table[prompt + (1,)] = value_dist(rng.uniform(0.05, 0.45), rng.uniform(0.05, 0.45))
        table[prompt + (0,)] = value_dist(rng.uniform(0.05, 0.45), rng.uniform(0.05, 0.45))
    default = NextTokenDistribution.from_probs(
        biased_probs(rng, len(vocab), eos, {10: (2e-4, 4e-4)}, rest_total_range=(1e-4, 2e-4))
    )
    model = TabularLM(table=table, default=default)
    return VariantPairInstance(
        vocab=vocab,
        schema=schema,
        neutral=neutral,
        instructional=instructional,
        grammar_neutral=grammar_neutral,
        grammar_instructional=grammar_instructional,
        model=model,
        prompt=prompt,
        max_len=3,
        gold=int(gold_digit),
        digit_gold=gold_digit,
        digit_other=other_digit,
    )


def enumerate_language(
    grammar: CompiledGrammar, max_bytes: int, alphabet: set[int] | None = None
) -> set[bytes]:
    """All accepted byte strings up to a length bound, optionally restricted
    to a tiny alphabet so the walk stays bounded."""
    out: set[bytes] = set()
    stack: list[tuple[int, bytes]] = [(grammar.start, b"")]
    while stack:
        state, acc = stack.pop()
        if state in grammar.accepting:
            out.add(acc)
        if len(acc) < max_bytes:
            for byte, dst in grammar.transitions[state].items():
                if alphabet is None or byte in alphabet:
                    stack.append((dst, acc + bytes([byte])))
    return out


# -- 2x2 matrix fixture ------------------------------------------------------

MATRIX_CHARS = '{}":,_' + string_mod.ascii_lowercase + string_mod.digits


def matrix_vocab() -> tuple[Vocabulary, dict[str, int]]:
    surfaces = [c.encode() for c in MATRIX_CHARS] + [b""]
    vocab = Vocabulary.from_surfaces(surfaces, eos_id=len(surfaces) - 1)
    char_id = {c: i for i, c in enumerate(MATRIX_CHARS)}
    return vocab, char_id


def build_matrix_fixture(n_items: int = 10, correct_rule=None, steps_text: str = "ok"):
    """Experiment config plus a tabular model that drives greedy decoding to a
    chosen serialization per (item, setting).

    ``correct_rule(setting_label, item_index)`` decides whether the emitted
    answer matches the item's gold answer.
    """
    from cdtax.channels import (
        ALL_SETTINGS,
        ExperimentConfig,
        ExperimentItem,
        PromptTemplate,
        build_cell_inputs,
    )
    from cdtax.grammar import apply_variant, serialize_object

    if correct_rule is None:
        correct_rule = lambda label, i: i % 2 == 0

    vocab, char_id = matrix_vocab()

    def ids(text: str) -> tuple[int, ...]:
        return tuple(char_id[c] for c in text)

    schema = SchemaSpec(
        fields=(FieldSpec("steps", "string"), FieldSpec("answer", "integer")),
        max_string_len=8,
    )
    instructional = KeyVariant(0, "steps", "step_by_step_reasoning")
    template = PromptTemplate(
        prefix_ids=ids("task:"),
        neutral_span_ids=ids("plain"),
        instructional_span_ids=ids("reasonfirst"),
        suffix_ids=ids("go"),
    )
    items = tuple(
        ExperimentItem(item_id=f"item{i:02d}", prompt_ids=ids(f"q{i}"), gold_answer=10 + i)
        for i in range(n_items)
    )

    peak = 0.9
    off = (1.0 - peak) / (len(vocab) - 1)

    def peaked(token_id: int) -> NextTokenDistribution:
        probs = np.full(len(vocab), off)
        probs[token_id] = peak
        return NextTokenDistribution.from_probs(probs)

    base_config = ExperimentConfig(
        vocab=vocab,
        schema=schema,
        instructional_variant=instructional,
        template=template,
        backend=TabularLM(table={}, default=NextTokenDistribution.uniform(len(vocab))),
        items=items,
        metric="exact_answer",
        seed=7,
        max_steps=64,
        label="fixture",
        benchmark="toy",
    )

    table: dict[tuple[int, ...], NextTokenDistribution] = {}
    for setting in ALL_SETTINGS:
        prompt_base, enforced = build_cell_inputs(base_config, setting)
        for i, item in enumerate(items):
            answer = item.gold_answer if correct_rule(setting.label, i) else 900 + i
            target = serialize_object(
                enforced, {enforced.fields[0].key: steps_text, "answer": answer}
            )
            target_ids = tuple(greedy_tokenize(vocab, target))
            context = prompt_base + item.prompt_ids
            for k, token_id in enumerate(target_ids):
                table[context + target_ids[:k]] = peaked(token_id)
            table[context + target_ids] = peaked(vocab.eos_id)

    model = TabularLM(table=table, default=NextTokenDistribution.uniform(len(vocab)))
    config = ExperimentConfig(
        vocab=vocab,
        schema=schema,
        instructional_variant=instructional,
        template=template,
        backend=model,
        items=items,
        metric="exact_answer",
        seed=7,
        max_steps=64,
        label="fixture",
        benchmark="toy",
    )
    return config, model, vocab


SAFE_CONTENT = sorted(
    set(string_mod.ascii_letters + string_mod.digits + " !#$%&'()*+,-./;<=>?@[]^_`|~")
)


def rich_walk_vocab() -> Vocabulary:
    """JSON-safe vocabulary with per-byte coverage plus a few BPE-ish chunks.

    Random constrained walks over it always produce output that a strict
    standard JSON parser accepts.
    """
    singles = ['{', '}', '"', ':', ',', '\\'] + [c for c in SAFE_CONTENT]
    chunks = ['{"', '":', ',"', '":"', 'ab', '12', 'er', 'the', '0}', '"}']
    surfaces = [s.encode() for s in dict.fromkeys(singles + chunks)] + [b""]
    return Vocabulary.from_surfaces(surfaces, eos_id=len(surfaces) - 1)


# Published placement scores, one row per (model, benchmark): the four cell
# scores in (none, key, both, prompt) order followed by the (key, prompt,
# interaction) effect triple derived from them. Arithmetic oracles only.
PLACEMENT_ROWS = [
    ("Qwen2.5-3B", "GSM8K", 71.10, 73.24, 67.25, 70.43, 2.14, -0.67, -5.32),
    ("Qwen2.5-3B", "Math500", 27.80, 33.80, 25.20, 25.00, 6.00, -2.80, -5.80),
    ("Qwen2.5-7B", "GSM8K", 79.61, 86.50, 86.13, 85.60, 6.89, 5.99, -6.36),
    ("Qwen2.5-7B", "Math500", 37.20, 41.00, 33.00, 34.80, 3.80, -2.40, -5.60),
    ("DeepSeek-R1-Distill-Qwen-7B", "GSM8K", 61.18, 49.89, 74.30, 70.74, -11.29, 9.56, 14.85),
    ("DeepSeek-R1-Distill-Qwen-7B", "Math500", 36.60, 21.00, 33.00, 36.80, -15.60, 0.20, 11.80),
    ("Qwen2.5-Coder-14B", "GSM8K", 84.23, 87.87, 89.16, 87.57, 3.64, 3.34, -2.05),
    ("Qwen2.5-Coder-14B", "Math500", 38.40, 32.60, 34.20, 35.80, -5.80, -2.60, 4.20),
    ("Llama-3.2-1B", "GSM8K", 7.96, 5.00, 13.72, 10.24, -2.96, 2.28, 6.44),
    ("Llama-3.2-1B", "Math500", 5.20, 10.00, 5.20, 5.60, 4.80, 0.40, -5.20),
    ("Llama-3.2-3B", "GSM8K", 53.15, 37.38, 57.70, 56.33, -15.77, 3.18, 17.14),
    ("Llama-3.2-3B", "Math500", 16.80, 12.20, 21.60, 20.00, -4.60, 3.20, 6.20),
    ("Llama-3.1-8B", "GSM8K", 71.80, 71.80, 76.50, 75.74, 0.00, 3.94, 0.76),
    ("Llama-3.1-8B", "Math500", 28.40, 24.40, 24.60, 26.20, -4.00, -2.20, 2.40),
]

ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, name: str, ok: bool, detail: str) -> None:
    status = "PASS" if ok else "FAIL"
    ACCEPTANCE_LINES.append(f"[criterion {number}] {status} {name}: {detail}")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def walk_vocab() -> Vocabulary:
    return rich_walk_vocab()


@pytest.fixture(scope="session")
def two_field_schema() -> SchemaSpec:
    return SchemaSpec(
        fields=(FieldSpec("steps", "string"), FieldSpec("answer", "integer")),
        max_string_len=12,
    )


@pytest.fixture(scope="session")
def walk_grammar(two_field_schema, walk_vocab) -> CompiledGrammar:
    return compile_grammar(two_field_schema, walk_vocab)
