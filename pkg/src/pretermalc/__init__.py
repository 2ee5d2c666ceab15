"""Synthetic perinatal cohorts, record linkage, and label-noise-aware training."""

__version__ = "0.1.0"

from .bench import (
    BenchmarkReport,
    Corpus,
    build_corpus,
    calibrate_noise,
    derive_seed,
    repeated_benchmark,
)
from .linkage import LinkSet, MatchCandidate, derive_noisy_labels, link_accuracy, match_newborns
from .metrics import auc, pr_auc
from .net import (
    Batch,
    ModelParams,
    NetDims,
    backward,
    forward,
    init_params,
    load_checkpoint,
    predict_probs,
    save_checkpoint,
)
from .noise import (
    CorruptionMatrix,
    apply_class_conditional_noise,
    corrected_probabilities,
    estimate_corruption_matrix,
)
from .records import (
    CodeVocabulary,
    DatasetSplit,
    Label,
    LabeledExample,
    PatientRecord,
    Visit,
    load_examples,
    load_records,
    save_examples,
    save_records,
)
from .synth import ClericalNoiseModel, SynthConfig, build_datasets, generate_cohort
from .train import TrainConfig, TrainMethod, plan_epochs, train

__all__ = [
    "BenchmarkReport",
    "Batch",
    "ClericalNoiseModel",
    "CodeVocabulary",
    "Corpus",
    "CorruptionMatrix",
    "DatasetSplit",
    "Label",
    "LabeledExample",
    "LinkSet",
    "MatchCandidate",
    "ModelParams",
    "NetDims",
    "PatientRecord",
    "SynthConfig",
    "TrainConfig",
    "TrainMethod",
    "Visit",
    "apply_class_conditional_noise",
    "auc",
    "backward",
    "build_corpus",
    "build_datasets",
    "calibrate_noise",
    "corrected_probabilities",
    "derive_noisy_labels",
    "derive_seed",
    "estimate_corruption_matrix",
    "forward",
    "generate_cohort",
    "init_params",
    "link_accuracy",
    "load_checkpoint",
    "load_examples",
    "load_records",
    "match_newborns",
    "plan_epochs",
    "pr_auc",
    "predict_probs",
    "repeated_benchmark",
    "save_checkpoint",
    "save_examples",
    "save_records",
    "train",
]
