"""Multi-head attention biased by lexical relations, for NLI robustness.

A relation store (synonyms, hypernyms, hyponyms, antonyms, co-hyponyms)
drives additive per-head attention biases. Two architectures consume them:
a decomposable premise/hypothesis encoder pair with biased cross-attention,
and a single concatenated transformer with biased cross-segment
self-attention. A synthetic-world harness reproduces the robustness gap on
held-out relation pairs at desk scale.
"""

from .data import (
    Example,
    Vocabulary,
    adversarial_substitute,
    build_vocab,
    encode_batch,
    gen_examples,
    gen_world,
    load_tsv,
    load_vocab,
    save_tsv,
    save_vocab,
    tokenize,
)
from .knowledge import (
    LABELS,
    SUBSTITUTION_LABELS,
    BiasStack,
    RelationKind,
    RelationStore,
    build_bias_concat,
    build_bias_cross,
    load_relations,
    save_relations,
    wordnet_rule_predict,
)
from .layers import multi_head_attention, scaled_dot_attention
from .models import (
    ModelConfig,
    forward,
    gradient_check,
    init_params,
    load_checkpoint,
    load_word_vectors,
    save_checkpoint,
)
from .tensor import ShapeError, Tensor, finite_diff_check
from .training import (
    Metrics,
    OptimizerState,
    ablate_layers,
    adam_step,
    evaluate,
    evaluate_rule_baseline,
    lr_at_step,
    make_experiment_data,
    scenario_grid,
    train,
)

__all__ = [
    "BiasStack",
    "Example",
    "LABELS",
    "Metrics",
    "ModelConfig",
    "OptimizerState",
    "RelationKind",
    "RelationStore",
    "SUBSTITUTION_LABELS",
    "ShapeError",
    "Tensor",
    "Vocabulary",
    "ablate_layers",
    "adam_step",
    "adversarial_substitute",
    "build_bias_concat",
    "build_bias_cross",
    "build_vocab",
    "encode_batch",
    "evaluate",
    "evaluate_rule_baseline",
    "finite_diff_check",
    "forward",
    "gen_examples",
    "gen_world",
    "gradient_check",
    "init_params",
    "load_checkpoint",
    "load_relations",
    "load_tsv",
    "load_vocab",
    "load_word_vectors",
    "lr_at_step",
    "make_experiment_data",
    "multi_head_attention",
    "save_checkpoint",
    "save_relations",
    "save_tsv",
    "save_vocab",
    "scaled_dot_attention",
    "scenario_grid",
    "tokenize",
    "train",
    "wordnet_rule_predict",
]
