"""Structured meta-learning for conditional sequence-to-sequence generation."""

from .data import Corpus, FamilySpec, TaskSpec, Vocab, generate_synthetic_families, synthetic_vocab
from .meta import Learner, MetaConfig, finetune, meta_train, mtl_train, run_experiment
from .model import HyperParams

__version__ = "0.1.0"

__all__ = [
    "Corpus",
    "FamilySpec",
    "HyperParams",
    "Learner",
    "MetaConfig",
    "TaskSpec",
    "Vocab",
    "finetune",
    "generate_synthetic_families",
    "meta_train",
    "mtl_train",
    "run_experiment",
    "synthetic_vocab",
]
