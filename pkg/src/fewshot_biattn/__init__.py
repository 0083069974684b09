"""Few-shot image classification with a multi-head bi-attention comparator.

The package is self-contained: a float64 tensor engine with reverse-mode
autodiff, binary dataset/checkpoint formats, episodic training with three
comparators (bi-attention, relation CNN, prototype distance), an
evaluation protocol with confidence intervals, sklearn-style estimators
and a CLI.
"""

from .backbone import BackboneConfig, class_embeddings, embed_batch, init_backbone, pair_and_reshape
from .compare import (BiAttentionParams, ScoreMatrix, bi_attention, compare,
                      make_comparator, multi_head, proto_distance_score,
                      relation_cnn_score, score_head)
from .data import (DatasetStore, Episode, SplitManifest, generate_synthetic,
                   load_dataset, load_manifest, proportional_split, sample_episode,
                   save_manifest, write_dataset)
from .estimator import EpisodeClassifier, FewShotMetricLearner
from .gradcheck import grad_check, run_suite
from .rng import PortableRng, derive_seed
from .tensor import Graph, Tensor, backward
from .training import (ConvergenceLog, EvalReport, FewShotModel, TrainConfig,
                       episode_loss, evaluate, lr_at, pretrain_backbone, sgd_step,
                       train)

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig", "BiAttentionParams", "ConvergenceLog", "DatasetStore",
    "Episode", "EpisodeClassifier", "EvalReport", "FewShotMetricLearner",
    "FewShotModel", "Graph", "PortableRng", "ScoreMatrix", "SplitManifest",
    "Tensor", "TrainConfig", "backward", "bi_attention", "class_embeddings",
    "compare", "derive_seed", "embed_batch", "episode_loss", "evaluate",
    "generate_synthetic", "grad_check", "init_backbone", "load_dataset",
    "load_manifest", "lr_at", "make_comparator", "multi_head",
    "pair_and_reshape", "pretrain_backbone", "proportional_split",
    "proto_distance_score", "relation_cnn_score", "run_suite", "sample_episode",
    "save_manifest", "score_head", "sgd_step", "train", "write_dataset",
]
