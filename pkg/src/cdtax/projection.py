"""Constrained decoding with per-step mask-cost instrumentation, plus exact
enumeration of continuation distributions and their divergences.

Masking a normalized distribution onto the valid-token set and renormalizing
keeps a fraction Z of the original mass; the step cost -ln Z is the KL
divergence from the masked distribution to the original one, and the costs
add across steps. Everything here is exact at desk scale: the continuation
oracles enumerate the full tree and refuse (rather than approximate) when the
tree is too large.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from scipy.special import logsumexp

from .errors import (
    BudgetExceededError,
    SupportViolationError,
    ValidationError,
    ZeroMassError,
)
from .grammar import CompiledGrammar, DecoderState, ValidTokenSet, advance, valid_tokens
from .lm import LanguageModel, NextTokenDistribution, Prefix, next_distribution
from .vocab import Vocabulary

__all__ = [
    "StepTrace",
    "DecodeTrace",
    "ContinuationDistribution",
    "TaxReport",
    "constrain",
    "kl_divergence",
    "kl_projection_identity",
    "decode_constrained",
    "enumerate_continuations",
    "divergences",
    "expected_tax",
    "ENUMERATION_NODE_BUDGET",
]

ENUMERATION_NODE_BUDGET = 10**7

NEG_INF = float("-inf")


def _mask(dist: NextTokenDistribution, valid: ValidTokenSet) -> tuple[np.ndarray, float]:
    """Masked, renormalized logprobs and the log of the kept mass.

    When the mask removes no probability mass the kept mass is exactly one
    and the cost exactly zero, with no float round-off.
    """
    if not valid:
        raise ValidationError("valid-token set is empty")
    idx = np.fromiter(valid, dtype=np.intp)
    if len(valid) == len(dist) or not np.any(np.delete(dist.logprobs, idx) > NEG_INF):
        return dist.logprobs.copy(), 0.0
    log_z = float(logsumexp(dist.logprobs[idx]))
    if log_z == NEG_INF:
        raise ZeroMassError(
            "every valid token carries zero model probability; "
            "the model and grammar have disjoint support here"
        )
    log_z = min(log_z, 0.0)  # kept mass is a sub-probability; clip float excess
    out = np.full(len(dist), NEG_INF)
    out[idx] = dist.logprobs[idx] - log_z
    return out, log_z


def constrain(
    dist: NextTokenDistribution, valid: ValidTokenSet
) -> tuple[NextTokenDistribution, float]:
    """Zero out tokens outside ``valid`` and renormalize.

    Returns the masked distribution and Z, the unconstrained probability mass
    the mask kept. Raises :class:`ZeroMassError` when that mass is zero.
    """
    masked, log_z = _mask(dist, valid)
    return NextTokenDistribution(masked), math.exp(log_z)


def kl_divergence(r: NextTokenDistribution, p: NextTokenDistribution) -> float:
    """D(r || p) over r's support; raises if r puts mass where p has none."""
    if len(r) != len(p):
        raise ValidationError("distributions have different sizes")
    total = 0.0
    for i in range(len(r)):
        lr = r.logprobs[i]
        if lr == NEG_INF:
            continue
        lp = p.logprobs[i]
        if lp == NEG_INF:
            raise SupportViolationError(
                f"numerator has mass at index {i} where denominator has none"
            )
        total += math.exp(lr) * (lr - lp)
    return total


def kl_projection_identity(
    r: NextTokenDistribution,
    p: NextTokenDistribution,
    q: NextTokenDistribution,
    z: float,
) -> tuple[float, float]:
    """Both sides of the identity D(r||p) = D(r||q) - ln Z.

    ``q`` must be ``p`` masked and renormalized with kept mass ``z``, and
    ``r`` must be supported inside q's support. With r = q the left side is
    exactly the step cost -ln Z.
    """
    lhs = kl_divergence(r, p)
    rhs = kl_divergence(r, q) - math.log(z)
    return lhs, rhs


@dataclass(frozen=True)
class StepTrace:
    """One decode step: kept mass, its -ln cost, the chosen token."""

    step: int
    z: float
    tax: float
    chosen_id: int
    valid_count: int


@dataclass(frozen=True)
class DecodeTrace:
    steps: tuple[StepTrace, ...]
    output_ids: tuple[int, ...]
    cumulative_tax: float
    truncated: bool

    def dump_jsonl(self) -> str:
        """One step record per line plus a footer with the trace totals."""
        lines = [
            json.dumps(
                {
                    "step": s.step,
                    "z": s.z,
                    "tax": s.tax,
                    "chosen_id": s.chosen_id,
                    "valid_count": s.valid_count,
                },
                sort_keys=True,
            )
            for s in self.steps
        ]
        lines.append(
            json.dumps(
                {
                    "cumulative_tax": self.cumulative_tax,
                    "output_ids": list(self.output_ids),
                    "truncated": self.truncated,
                },
                sort_keys=True,
            )
        )
        return "\n".join(lines) + "\n"


def decode_constrained(
    model: LanguageModel,
    grammar: CompiledGrammar,
    vocab: Vocabulary,
    prompt_ids: Iterable[int],
    policy: str = "greedy",
    seed: int | None = None,
    max_steps: int = 256,
) -> DecodeTrace:
    """Decode under the grammar mask, recording the kept mass at every step.

    ``greedy`` picks the argmax of the masked distribution (ties resolve to
    the lowest id); ``sample`` draws from it with a mandatory seed so runs
    are reproducible. Stops when eos is chosen at an accepting state. Hitting
    ``max_steps`` first marks the trace truncated: the grammar guarantees a
    finite completion exists, so truncation means the budget was too small,
    not that decoding dead-ended.
    """
    if max_steps < 1:
        raise ValidationError("max_steps must be >= 1")
    if policy not in ("greedy", "sample"):
        raise ValidationError(f"unknown policy {policy!r}")
    if policy == "sample":
        if seed is None:
            raise ValidationError("sample policy requires a seed")
        rng = np.random.default_rng(seed)

    prefix = Prefix(tuple(prompt_ids))
    state = grammar.initial_state()
    steps: list[StepTrace] = []
    output: list[int] = []
    cumulative = 0.0
    truncated = True
    for t in range(1, max_steps + 1):
        dist = next_distribution(model, prefix)
        valid = valid_tokens(grammar, state, vocab)
        try:
            masked, log_z = _mask(dist, valid)
        except ZeroMassError as exc:
            raise ZeroMassError(f"zero valid mass at step {t}", step=t) from exc
        if policy == "greedy":
            chosen = int(np.argmax(masked))
        else:
            probs = np.exp(masked)
            probs /= probs.sum()
            chosen = int(rng.choice(len(probs), p=probs))
        tax = -log_z
        cumulative += tax
        steps.append(
            StepTrace(step=t, z=math.exp(log_z), tax=tax, chosen_id=chosen, valid_count=len(valid))
        )
        output.append(chosen)
        state = advance(grammar, state, chosen)
        prefix = prefix.extend(chosen)
        if chosen == vocab.eos_id:
            truncated = False
            break
    return DecodeTrace(
        steps=tuple(steps),
        output_ids=tuple(output),
        cumulative_tax=cumulative,
        truncated=truncated,
    )


@dataclass
class ContinuationDistribution:
    """Exact distribution over complete continuations (ending in eos) of a prefix.

    ``raw_log_probs`` hold the unrenormalized product measure restricted to
    continuations that complete within the horizon; ``probabilities`` is the
    renormalized view. ``truncation_mass`` is the product-measure mass of
    branches that hit the horizon without completing; it is recorded, never
    silently dropped. For the constrained kind, ``taxes`` maps each
    continuation to its accumulated -ln Z along the way.
    """

    kind: str  # "unconstrained" | "constrained"
    origin: Prefix
    vocab: Vocabulary
    raw_log_probs: dict[tuple[int, ...], float]
    truncation_mass: float
    max_len: int
    taxes: dict[tuple[int, ...], float] | None = None
    _normalized: dict[tuple[int, ...], float] | None = field(default=None, repr=False)

    @property
    def support(self) -> tuple[tuple[int, ...], ...]:
        return tuple(self.raw_log_probs)

    @property
    def completed_mass(self) -> float:
        return float(np.exp(logsumexp(np.array(list(self.raw_log_probs.values())))))

    @property
    def probabilities(self) -> dict[tuple[int, ...], float]:
        if self._normalized is None:
            values = np.array(list(self.raw_log_probs.values()))
            norm = np.exp(values - logsumexp(values))
            self._normalized = dict(zip(self.raw_log_probs, norm.tolist()))
        return self._normalized


def _unconstrained_estimate(vocab_size: int, max_len: int) -> float:
    # Internal (model-querying) nodes of the full depth-limited tree: each
    # internal node has vocab_size - 1 non-eos children.
    count = 0.0
    level = 1.0
    for _ in range(max_len):
        count += level
        level *= max(vocab_size - 1, 1)
        if count > 10 * ENUMERATION_NODE_BUDGET:
            break
    return count


def _constrained_estimate(grammar: CompiledGrammar, start: DecoderState, max_len: int) -> float:
    """Exact count of internal nodes of the constrained walk, model aside.

    The grammar fixes the tree shape, so the count is a cheap dynamic program
    over (automaton state, remaining depth); zero-probability pruning can
    only shrink the real walk below it.
    """
    memo: dict[tuple[int, int], float] = {}
    eos = grammar.vocab.eos_id

    def count(state_id: int, remaining: int) -> float:
        if remaining == 0:
            return 0.0
        key = (state_id, remaining)
        if key not in memo:
            total = 1.0
            for token_id in grammar.valid_table[state_id]:
                if token_id == eos:
                    continue
                nxt = _walk_surface(grammar, state_id, token_id)
                total += count(nxt, remaining - 1)
                if total > 10 * ENUMERATION_NODE_BUDGET:
                    break
            memo[key] = total
        return memo[key]

    return count(start.automaton_state, max_len)


def _walk_surface(grammar: CompiledGrammar, state_id: int, token_id: int) -> int:
    for byte in grammar.vocab.surface(token_id):
        state_id = grammar.transitions[state_id][byte]
    return state_id


def check_enumeration_budget(estimate: float) -> None:
    if estimate > ENUMERATION_NODE_BUDGET:
        raise BudgetExceededError(
            f"exact enumeration would visit about {estimate:.3g} nodes "
            f"(budget {ENUMERATION_NODE_BUDGET:.0e}); refusing",
            estimate=estimate,
        )


def enumerate_continuations(
    model: LanguageModel,
    vocab: Vocabulary,
    prefix: Prefix,
    max_len: int,
    grammar: CompiledGrammar | None = None,
) -> ContinuationDistribution:
    """Depth-first exact enumeration of complete continuations of ``prefix``.

    Without a grammar this is the raw model measure over continuations of up
    to ``max_len`` tokens ending in eos. With a grammar, only grammar-valid
    branches are walked and each step renormalizes over the valid-token set,
    i.e. the result is the constrained decoder's sequence distribution. The
    walk is refused up front when the size estimate exceeds the node budget.
    """
    if max_len < 1:
        raise ValidationError("max_len must be >= 1")
    if grammar is None:
        start_state = None
        check_enumeration_budget(_unconstrained_estimate(len(vocab), max_len))
    else:
        start_state = grammar.initial_state()
        for token_id in prefix.generated_ids:
            start_state = advance(grammar, start_state, token_id)
        check_enumeration_budget(_constrained_estimate(grammar, start_state, max_len))

    raw: dict[tuple[int, ...], float] = {}
    taxes: dict[tuple[int, ...], float] = {}
    truncated_logs: list[float] = []
    eos = vocab.eos_id

    def walk_unconstrained(node: Prefix, cont: tuple[int, ...], logp: float, depth: int) -> None:
        if depth == max_len:
            truncated_logs.append(logp)
            return
        dist = next_distribution(model, node)
        for v in range(len(vocab)):
            lp = float(dist.logprobs[v])
            if lp == NEG_INF:
                continue
            if v == eos:
                raw[cont + (v,)] = logp + lp
            else:
                walk_unconstrained(node.extend(v), cont + (v,), logp + lp, depth + 1)

    def walk_constrained(
        node: Prefix, state: DecoderState, cont: tuple[int, ...], logq: float, tax: float, depth: int
    ) -> None:
        if depth == max_len:
            truncated_logs.append(logq)
            return
        dist = next_distribution(model, node)
        valid = valid_tokens(grammar, state, vocab)
        masked, log_z = _mask(dist, valid)
        step_tax = -log_z
        for v in sorted(valid):
            lq = float(masked[v])
            if lq == NEG_INF:
                continue
            if v == eos:
                raw[cont + (v,)] = logq + lq
                taxes[cont + (v,)] = tax + step_tax
            else:
                walk_constrained(
                    node.extend(v),
                    advance(grammar, state, v),
                    cont + (v,),
                    logq + lq,
                    tax + step_tax,
                    depth + 1,
                )

    if grammar is None:
        walk_unconstrained(prefix, (), 0.0, 0)
    else:
        walk_constrained(prefix, start_state, (), 0.0, 0.0, 0)

    if not raw:
        raise ZeroMassError("no continuation completes within the horizon")
    truncation = (
        float(np.exp(logsumexp(np.array(truncated_logs)))) if truncated_logs else 0.0
    )
    return ContinuationDistribution(
        kind="unconstrained" if grammar is None else "constrained",
        origin=prefix,
        vocab=vocab,
        raw_log_probs=raw,
        truncation_mass=truncation,
        max_len=max_len,
        taxes=taxes if grammar is not None else None,
    )


@dataclass(frozen=True)
class TaxReport:
    """Value-level divergence, its square-root bound, and exact total variation."""

    t_val: float
    bound: float
    tv: float


def divergences(
    q_bar: ContinuationDistribution, p_bar: ContinuationDistribution
) -> TaxReport:
    """KL(q||p), bound = sqrt(KL/2), and total variation, all on the
    renormalized views.

    The bound dominates the total variation (Pinsker); a violation beyond
    float tolerance indicates corrupted inputs and raises.
    """
    q = q_bar.probabilities
    p = p_bar.probabilities
    t_val = 0.0
    for y, qy in q.items():
        if qy == 0.0:
            continue
        py = p.get(y, 0.0)
        if py == 0.0:
            raise SupportViolationError(
                f"constrained support includes {y} where the reference has zero mass"
            )
        t_val += qy * math.log(qy / py)
    t_val = max(t_val, 0.0)
    bound = math.sqrt(t_val / 2.0)
    tv = 0.5 * sum(abs(q.get(y, 0.0) - p.get(y, 0.0)) for y in set(q) | set(p))
    if tv > bound + 1e-9:
        raise ValidationError(
            f"total variation {tv} exceeds the divergence bound {bound}; inputs are inconsistent"
        )
    return TaxReport(t_val=t_val, bound=bound, tv=tv)


def expected_tax(
    model: LanguageModel,
    grammar: CompiledGrammar,
    vocab: Vocabulary,
    prefix: Prefix,
    max_len: int,
) -> float:
    """Exact expectation of the accumulated per-step cost under the
    constrained continuation distribution.

    Matches the sequence-level divergence from the constrained distribution
    to the unconstrained one taken over the same stopping set without
    renormalizing the latter.
    """
    q_bar = enumerate_continuations(model, vocab, prefix, max_len, grammar=grammar)
    assert q_bar.taxes is not None
    probs = q_bar.probabilities
    return sum(probs[y] * q_bar.taxes[y] for y in q_bar.support)
