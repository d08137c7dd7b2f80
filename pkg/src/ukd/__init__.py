"""Unsupervised knowledge distillation for cross-modal hashing."""
from .datamodel import (
    LabelSet,
    PairedDataset,
    SplitSpec,
    generate_synthetic,
    load_features,
    load_labels,
    make_split,
    oracle_relevant,
    save_features,
    save_labels,
)
from .distill import RelevantPairSet, build_relevant_pairs, pair_precision, select_pairs, similarity
from .embednet import TrainConfig, TwoPathwayModel, forward, init_model, load_model, save_model
from .kernels import BACKEND
from .pipeline import ExperimentConfig, run_pipeline
from .retrieval import EvalReport, evaluate_cross_modal, hamming_distance, quantize, rank_by_hamming
from .student import (
    DistillConfig,
    GenerationRecord,
    run_generation,
    train_student_supervised,
    train_student_unsupervised,
)
from .teacher import sample_triplets, train_teacher

__version__ = "0.1.0"
