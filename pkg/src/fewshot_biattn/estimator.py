"""Scikit-learn style estimators wrapping the episodic trainer.

``FewShotMetricLearner`` is the dataset-level estimator: ``fit`` runs
episodic training on a :class:`~fewshot_biattn.data.DatasetStore` plus
split manifest and exposes the learned model, convergence log and an
evaluation method.

``EpisodeClassifier`` is the task-level classifier: ``fit`` takes one
support set (images + labels) and ``predict`` labels queries against it,
so a single few-shot task follows the ordinary fit/predict contract and
composes with sklearn tooling (``get_params``, ``clone``, metrics).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from .backbone import BackboneConfig, class_embeddings, embed_batch
from .data import DatasetStore, SplitManifest
from .tensor import constant, reshape
from .training import (EvalReport, FewShotModel, TrainConfig, evaluate, train)
from .validation import check_image_array, check_seed, check_support_set


class FewShotMetricLearner(BaseEstimator):
    """Episodic metric learner with a pluggable comparator.

    Parameters mirror the training configuration; ``fit(store, manifest)``
    trains backbone and comparator jointly and records ``model_``, ``log_``
    and ``episodes_hash_``.
    """

    def __init__(self, n_way: int = 5, k_shot: int = 1, queries_per_class: int = 15,
                 epochs: int = 120, tasks_per_epoch: int = 100, val_tasks: int = 50,
                 lr_initial: float = 0.001, lr_halve_every: int = 10,
                 optimizer: str = "sgd", momentum: float = 0.9,
                 comparator: str = "biattn", backbone: str = "tiny",
                 stage_channels: tuple | None = None, heads: int = 8,
                 hidden_size: int = 128, relation_channels: int = 64,
                 relation_hidden: int = 64, seed: int = 0):
        self.n_way = n_way
        self.k_shot = k_shot
        self.queries_per_class = queries_per_class
        self.epochs = epochs
        self.tasks_per_epoch = tasks_per_epoch
        self.val_tasks = val_tasks
        self.lr_initial = lr_initial
        self.lr_halve_every = lr_halve_every
        self.optimizer = optimizer
        self.momentum = momentum
        self.comparator = comparator
        self.backbone = backbone
        self.stage_channels = stage_channels
        self.heads = heads
        self.hidden_size = hidden_size
        self.relation_channels = relation_channels
        self.relation_hidden = relation_hidden
        self.seed = seed

    def _train_config(self, store: DatasetStore) -> TrainConfig:
        if store.height != store.width:
            raise ValueError(f"images must be square, got {store.height}x{store.width}")
        backbone = BackboneConfig(self.backbone, store.height, store.channels,
                                  tuple(self.stage_channels) if self.stage_channels else ())
        return TrainConfig(backbone=backbone, n_way=self.n_way, k_shot=self.k_shot,
                           queries_per_class=self.queries_per_class, epochs=self.epochs,
                           tasks_per_epoch=self.tasks_per_epoch, val_tasks=self.val_tasks,
                           lr_initial=self.lr_initial, lr_halve_every=self.lr_halve_every,
                           optimizer=self.optimizer, momentum=self.momentum,
                           seed=check_seed(self.seed), comparator=self.comparator,
                           heads=self.heads, hidden_size=self.hidden_size,
                           relation_channels=self.relation_channels,
                           relation_hidden=self.relation_hidden)

    def fit(self, store: DatasetStore, manifest: SplitManifest,
            initial_backbone: dict | None = None) -> "FewShotMetricLearner":
        result = train(self._train_config(store), store, manifest,
                       initial_backbone=initial_backbone)
        self.model_ = result.model
        self.log_ = result.log
        self.episodes_hash_ = result.episodes_hash
        return self

    def _check_fitted(self) -> FewShotModel:
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit before using this estimator")
        return self.model_

    def evaluate(self, store: DatasetStore, manifest: SplitManifest,
                 split: str = "test", num_tasks: int = 600, seed: int = 0) -> EvalReport:
        return evaluate(self._check_fitted(), store, manifest, split, num_tasks,
                        check_seed(seed), n_way=self.n_way, k_shot=self.k_shot,
                        queries_per_class=self.queries_per_class)

    def episode_classifier(self) -> "EpisodeClassifier":
        """Task-level classifier sharing this learner's trained model."""
        return EpisodeClassifier(model=self._check_fitted())


class EpisodeClassifier(BaseEstimator, ClassifierMixin):
    """Classify one few-shot task with a trained model.

    ``fit(X, y)`` embeds a support set (equal shot counts per class) and
    stores the class embeddings; ``predict(X)`` scores queries against them
    and returns labels from the original label alphabet.
    """

    def __init__(self, model: FewShotModel | None = None):
        self.model = model

    def fit(self, X, y) -> "EpisodeClassifier":
        if self.model is None:
            raise ValueError("EpisodeClassifier needs a trained FewShotModel")
        classes, grouped, shots = check_support_set(X, y)
        n, k = grouped.shape[0], grouped.shape[1]
        emb = embed_batch(self.model.backbone_config, self.model.backbone_params,
                          constant(grouped.reshape((n * k,) + grouped.shape[2:])))
        grouped_emb = reshape(emb, (n, k) + tuple(emb.shape[1:]))
        self.classes_ = classes
        self.k_shot_ = k
        self.class_embeddings_ = class_embeddings(grouped_emb)
        return self

    def _check_fitted(self):
        if not hasattr(self, "class_embeddings_"):
            raise NotFittedError("call fit with a support set first")

    def decision_function(self, X) -> np.ndarray:
        """Score matrix (n_queries, n_classes) for query images."""
        self._check_fitted()
        queries = check_image_array(X)
        q_emb = embed_batch(self.model.backbone_config, self.model.backbone_params,
                            constant(queries))
        scores = self.model.comparator.score(q_emb, self.class_embeddings_,
                                             self.model.comparator_params, self.k_shot_)
        return scores.data.copy()

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]
