"""cdtax: grammar-constrained JSON decoding with projection-cost diagnostics.

Enforces schema validity by masking next-token choices with a byte-level
automaton, measures the per-step probability mass the mask removes, and runs
controlled 2x2 experiments on where instruction wording is placed (prompt
text vs. the decoder-enforced schema key).
"""

from .channels import (
    ALL_SETTINGS,
    EffectReport,
    ExperimentConfig,
    PlacementSetting,
    build_cell_inputs,
    effects,
    run_matrix,
    sensitivity_map,
)
from .errors import CdtaxError
from .grammar import (
    CompiledGrammar,
    DecoderState,
    FieldSpec,
    KeyVariant,
    SchemaSpec,
    advance,
    apply_variant,
    compile_grammar,
    structurally_equivalent,
    valid_tokens,
)
from .lm import (
    NGramLM,
    NextTokenDistribution,
    Prefix,
    RemoteLM,
    TabularLM,
    fit_ngram,
    next_distribution,
)
from .metrics import (
    ActivationDecomposition,
    CanonicalObject,
    ExpectedScore,
    Metric,
    activation_decomposition,
    bounded_metric,
    canonicalize,
    expected_score,
    sufficient_condition,
)
from .projection import (
    ContinuationDistribution,
    DecodeTrace,
    StepTrace,
    TaxReport,
    constrain,
    decode_constrained,
    divergences,
    enumerate_continuations,
    expected_tax,
    kl_projection_identity,
)
from .vocab import Token, Vocabulary, detokenize, greedy_tokenize, load_vocabulary

__version__ = "0.1.0"
