"""Spoofing-aware speaker verification with a dual-path model and bilevel training."""

from .datagen import CorpusSpec, Utterance, read_manifest, spoofify, synth_corpus, with_spoofs, write_manifest
from .metrics import (
    EerResult,
    ScoreRecord,
    compute_eer,
    diff_report,
    genre_matrix,
    sasv_eer,
    score_trials,
    sv_eer,
)
from .model import DualPathModel, ModelConfig, load_checkpoint, save_checkpoint
from .protocol import (
    DEFAULT_GROUPING,
    CgpProtocol,
    GenreGrouping,
    MetaTask,
    TrialPair,
    build_cgp,
    build_complex_eval,
    filter_training,
    label_trial,
    sample_meta_task,
    sample_pairwise_trials,
    split_manifest,
)
from .trainer import TrainConfig, lr_schedule, train

__version__ = "0.1.0"

__all__ = [
    "CorpusSpec",
    "Utterance",
    "read_manifest",
    "spoofify",
    "synth_corpus",
    "with_spoofs",
    "write_manifest",
    "EerResult",
    "ScoreRecord",
    "compute_eer",
    "diff_report",
    "genre_matrix",
    "sasv_eer",
    "score_trials",
    "sv_eer",
    "DualPathModel",
    "ModelConfig",
    "load_checkpoint",
    "save_checkpoint",
    "DEFAULT_GROUPING",
    "CgpProtocol",
    "GenreGrouping",
    "MetaTask",
    "TrialPair",
    "build_cgp",
    "build_complex_eval",
    "filter_training",
    "label_trial",
    "sample_meta_task",
    "sample_pairwise_trials",
    "split_manifest",
    "TrainConfig",
    "lr_schedule",
    "train",
]
