"""Streaming multilingual transducer with gated language experts.

A small, dependency-light laboratory: a numpy autodiff core, a chunked
streaming transformer encoder whose expert layers are mixed by a learned
language gate, a transducer loss verified against brute-force enumeration,
and a curriculum trainer plus evaluation matrix for comparing model
variants on synthetic multilingual data.
"""

from .autodiff import (
    ContractError,
    DimensionError,
    NumericError,
    Tensor,
    backward,
    grad_check,
    no_grad,
)
from .config import DEFAULTS, ConfigError, config_hash, resolve_config
from .data import (
    DataError,
    ToyLanguageSpec,
    Utterance,
    build_corpus,
    generate_utterance,
    load_corpus,
    make_language_specs,
)
from .evaluate import (
    CONDITIONS,
    EvalReport,
    gate_lid_accuracy,
    greedy_decode,
    levenshtein,
    run_matrix,
    summarize_report,
    token_error_rate,
)
from .experts import all_ones_lid, one_hot_lid, validate_lid
from .model import (
    VARIANTS,
    Model,
    ModelConfig,
    build_model,
    count_parameters,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
)
from .training import (
    Adam,
    CurriculumSchedule,
    TrainingDiverged,
    TrainResult,
    TrainRunConfig,
    curriculum_p,
    sample_lid_vector,
    train,
    warmup_lr,
)
from .transducer import (
    LatticeTooLargeError,
    enumerate_alignment_paths,
    enumerate_alignment_probability,
    transducer_loss,
)
from .verification import run_gradient_suite, run_oracle_suite

__version__ = "0.1.0"
