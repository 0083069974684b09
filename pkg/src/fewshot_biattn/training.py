"""Episodic training, backbone pretraining and the evaluation protocol.

Training minimizes a per-episode cross-entropy: each query's row of the
score matrix goes through a softmax over the N classes and the mean
negative log-likelihood over the M queries is the loss, optimized by SGD
(optionally with momentum) over backbone and comparator jointly.  The
learning rate starts at ``lr_initial`` and halves every
``lr_halve_every`` epochs.

Evaluation samples tasks with per-task derived seeds (base XOR task
index), predicts by row-wise argmax (ties to the lowest class index) and
reports mean accuracy with a 95% confidence interval
1.96 * sample_std / sqrt(num_tasks).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .backbone import BackboneConfig, class_embeddings, embed_batch, init_backbone
from .compare import Comparator, ScoreMatrix, make_comparator
from .data import DatasetStore, Episode, SplitManifest, episode_hash, sample_episode
from .rng import PortableRng, derive_seed
from .tensor import Tensor, constant, exp, log, mul, reduce_sum, reshape, sub

_MASK64 = (1 << 64) - 1


class NumericsError(RuntimeError):
    """A non-finite loss or gradient aborted an update."""


@dataclass(frozen=True)
class TrainConfig:
    backbone: BackboneConfig
    n_way: int = 5
    k_shot: int = 1
    queries_per_class: int = 15
    epochs: int = 120
    tasks_per_epoch: int = 100
    val_tasks: int = 50
    lr_initial: float = 0.001
    lr_halve_every: int = 10
    optimizer: str = "sgd"
    momentum: float = 0.9
    seed: int = 0
    comparator: str = "biattn"
    heads: int = 8
    hidden_size: int = 128
    relation_channels: int = 64
    relation_hidden: int = 64
    pretrain_passes: int = 10
    pretrain_lr: float = 0.01
    pretrain_batch: int = 64

    def __post_init__(self):
        for name in ("n_way", "k_shot", "queries_per_class", "epochs",
                     "tasks_per_epoch", "lr_halve_every", "heads", "hidden_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr_initial <= 0:
            raise ValueError("lr_initial must be positive")
        if self.optimizer not in ("sgd", "sgd_momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    val_acc: float
    seconds: float


@dataclass
class ConvergenceLog:
    records: list[EpochRecord] = field(default_factory=list)

    CSV_HEADER = "epoch,mean_loss,val_acc,seconds"

    def to_csv(self) -> str:
        epochs = [r.epoch for r in self.records]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ValueError(f"epochs must be strictly increasing, got {epochs}")
        lines = [self.CSV_HEADER]
        for r in self.records:
            lines.append(f"{r.epoch},{r.mean_loss:.12g},{r.val_acc:.12g},{r.seconds:.3f}")
        return "\n".join(lines) + "\n"

    def write_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_csv())


@dataclass
class EvalReport:
    task_accuracies: list[float]
    num_tasks: int

    @property
    def mean(self) -> float:
        return float(np.mean(self.task_accuracies))

    @property
    def ci95(self) -> float:
        """1.96 * unbiased sample std / sqrt(n); zero for fewer than 2 tasks."""
        if self.num_tasks < 2:
            return 0.0
        return float(1.96 * np.std(self.task_accuracies, ddof=1) / np.sqrt(self.num_tasks))

    def format(self) -> str:
        return f"acc = {self.mean * 100:.2f}% +/- {self.ci95 * 100:.2f}% (n={self.num_tasks})"


@dataclass
class FewShotModel:
    """Backbone plus comparator with their learnable parameters."""

    backbone_config: BackboneConfig
    comparator: Comparator
    backbone_params: dict[str, Tensor]
    comparator_params: dict[str, Tensor]

    def all_params(self) -> dict[str, Tensor]:
        return {**self.backbone_params, **self.comparator_params}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Overwrite parameter values from a checkpoint dict, by name."""
        params = self.all_params()
        missing = set(params) - set(arrays)
        extra = set(arrays) - set(params)
        if missing or extra:
            raise ValueError(f"checkpoint mismatch: missing {sorted(missing)}, "
                             f"unexpected {sorted(extra)}")
        for name, tensor in params.items():
            if arrays[name].shape != tensor.shape:
                raise ValueError(f"checkpoint tensor {name} has shape "
                                 f"{arrays[name].shape}, expected {tensor.shape}")
            tensor.data[...] = arrays[name]


def init_model(config: TrainConfig) -> FewShotModel:
    comparator = make_comparator(config.comparator, heads=config.heads,
                                 hidden_size=config.hidden_size,
                                 relation_channels=config.relation_channels,
                                 relation_hidden=config.relation_hidden)
    backbone_rng = PortableRng(derive_seed(config.seed, "init/backbone"))
    comp_rng = PortableRng(derive_seed(config.seed, "init/comparator"))
    return FewShotModel(
        backbone_config=config.backbone,
        comparator=comparator,
        backbone_params=init_backbone(config.backbone, backbone_rng),
        comparator_params=comparator.init_params(config.backbone, comp_rng))


# ---------------------------------------------------------------------------
# loss and optimizer


def episode_loss(score_matrix: ScoreMatrix | Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of row-wise softmax scores against local labels.

    The raw comparator scores are unbounded, so each query's N scores pass
    through a softmax and the loss is -(1/M) sum_j log p_j[y_j], computed
    via a max-shifted log-sum-exp for stability.
    """
    scores = score_matrix.scores if isinstance(score_matrix, ScoreMatrix) else score_matrix
    m, n = scores.shape
    labels = np.asarray(labels)
    if labels.shape != (m,):
        raise ValueError(f"expected {m} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= n:
        raise ValueError(f"label out of range 0..{n - 1}: {labels.min()}..{labels.max()}")
    shift = constant(scores.data.max(axis=1, keepdims=True))  # detached, exact
    shifted = sub(scores, shift)
    lse = log(reduce_sum(exp(shifted), axis=1, keepdims=True))
    log_probs = sub(shifted, lse)
    onehot = np.zeros((m, n))
    onehot[np.arange(m), labels] = 1.0
    picked = reduce_sum(mul(log_probs, constant(onehot)))
    return mul(picked, constant(-1.0 / m))


def lr_at(epoch: int, config: TrainConfig) -> float:
    """lr_initial * 0.5^floor(epoch / lr_halve_every)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return config.lr_initial * 0.5 ** (epoch // config.lr_halve_every)


def sgd_step(params: dict[str, Tensor], lr: float, momentum: float,
             velocity: dict[str, np.ndarray]) -> dict[str, Tensor]:
    """In-place SGD update v <- mu*v + g; p <- p - lr*v (mu=0 is plain SGD)."""
    for name, p in params.items():
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient in {name}")
        if momentum != 0.0:
            v = velocity.get(name)
            if v is None:
                v = np.zeros_like(g)
            v = momentum * v + g
            velocity[name] = v
        else:
            v = g
        p.data -= lr * v
    return params


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.zero_grad()


# ---------------------------------------------------------------------------
# episode forward


def episode_tensors(episode: Episode) -> tuple[Tensor, Tensor]:
    """Support and query image batches as constant tensors."""
    n, k = episode.n_way, episode.k_shot
    sup = constant(episode.support_images.reshape((n * k,) + episode.support_images.shape[2:]))
    qry = constant(episode.query_images)
    return sup, qry


def forward_episode(model: FewShotModel, episode: Episode) -> ScoreMatrix:
    """Embed the episode and score every query against every class."""
    sup, qry = episode_tensors(episode)
    sup_emb = embed_batch(model.backbone_config, model.backbone_params, sup)
    qry_emb = embed_batch(model.backbone_config, model.backbone_params, qry)
    n, k = episode.n_way, episode.k_shot
    grouped = reshape(sup_emb, (n, k) + tuple(sup_emb.shape[1:]))
    class_emb = class_embeddings(grouped)
    return model.comparator.score(qry_emb, class_emb, model.comparator_params,
                                  episode.k_shot)


def predict_labels(score_matrix: ScoreMatrix) -> np.ndarray:
    """Row-wise argmax; ties resolve to the lowest class index."""
    return np.argmax(score_matrix.data, axis=1)


# ---------------------------------------------------------------------------
# training loops


@dataclass
class TrainResult:
    model: FewShotModel
    log: ConvergenceLog
    episodes_hash: int


def train(config: TrainConfig, store: DatasetStore, manifest: SplitManifest,
          initial_backbone: dict[str, np.ndarray] | None = None) -> TrainResult:
    """Episodic training of backbone and comparator jointly.

    Each epoch samples ``tasks_per_epoch`` episodes from the train split
    from a single seeded stream, then measures validation accuracy on
    ``val_tasks`` fresh tasks (skipped when val_tasks is 0).  A non-finite
    loss aborts with epoch/task/lr diagnostics.
    """
    manifest.validate_against(store)
    model = init_model(config)
    if initial_backbone is not None:
        for name, tensor in model.backbone_params.items():
            tensor.data[...] = initial_backbone[name]
    params = model.all_params()
    velocity: dict[str, np.ndarray] = {}
    momentum = config.momentum if config.optimizer == "sgd_momentum" else 0.0
    episode_rng = PortableRng(derive_seed(config.seed, "train/episodes"))
    log = ConvergenceLog()
    stream_hash = None

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = lr_at(epoch, config)
        losses = []
        for task in range(config.tasks_per_epoch):
            episode = sample_episode(store, manifest, "train", config.n_way,
                                     config.k_shot, config.queries_per_class,
                                     episode_rng)
            stream_hash = episode_hash(episode, stream_hash)
            zero_grads(params)
            scores = forward_episode(model, episode)
            loss = episode_loss(scores, episode.query_labels)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericsError(f"non-finite loss {value} at epoch {epoch}, "
                                    f"task {task}, lr {lr}")
            loss.backward()
            try:
                sgd_step(params, lr, momentum, velocity)
            except NumericsError as e:
                raise NumericsError(f"{e} at epoch {epoch}, task {task}, lr {lr}") from None
            losses.append(value)
        if config.val_tasks > 0:
            val = evaluate(model, store, manifest, "val", config.val_tasks,
                           derive_seed(config.seed, f"val/{epoch}"),
                           n_way=config.n_way, k_shot=config.k_shot,
                           queries_per_class=config.queries_per_class)
            val_acc = val.mean
        else:
            val_acc = float("nan")
        log.records.append(EpochRecord(epoch=epoch, mean_loss=float(np.mean(losses)),
                                       val_acc=val_acc,
                                       seconds=time.perf_counter() - t0))
    return TrainResult(model=model, log=log, episodes_hash=stream_hash or 0)


def evaluate(model: FewShotModel, store: DatasetStore, manifest: SplitManifest,
             split: str, num_tasks: int, seed: int, *, n_way: int, k_shot: int,
             queries_per_class: int) -> EvalReport:
    """Accuracy over ``num_tasks`` episodes with per-task seeds (seed XOR index).

    With frozen parameters this is a pure function of its arguments; the
    per-task seeds make the result independent of evaluation order.
    """
    accs = []
    for t in range(num_tasks):
        rng = PortableRng((seed ^ t) & _MASK64)
        episode = sample_episode(store, manifest, split, n_way, k_shot,
                                 queries_per_class, rng)
        scores = forward_episode(model, episode)
        pred = predict_labels(scores)
        accs.append(float(np.mean(pred == episode.query_labels)))
    return EvalReport(task_accuracies=accs, num_tasks=num_tasks)


# ---------------------------------------------------------------------------
# backbone pretraining


def pretrain_backbone(store: DatasetStore, manifest: SplitManifest,
                      config: TrainConfig, with_head: bool = False):
    """Initialize the backbone by plain classification on the train split.

    A temporary linear head over the train-split classes is trained jointly
    with the backbone (softmax cross-entropy, ``pretrain_passes`` shuffled
    passes, lr halving every 10 passes) and then discarded.  With zero
    passes the fresh initialization is returned unchanged.  Pass
    ``with_head=True`` to also get the head back for diagnostics, as
    ``(params, head_weight, head_bias)``.
    """
    manifest.validate_against(store)
    backbone_rng = PortableRng(derive_seed(config.seed, "init/backbone"))
    params = init_backbone(config.backbone, backbone_rng)
    if config.pretrain_passes <= 0:
        return (params, None, None) if with_head else params

    classes = sorted(manifest.train_classes)
    if not classes:
        raise ValueError("train split is empty")
    class_pos = {c: i for i, c in enumerate(classes)}
    feat = config.backbone.feature_dim
    head_rng = PortableRng(derive_seed(config.seed, "init/pretrain-head"))
    head_w = Tensor(head_rng.fill_uniform_signed((feat, len(classes)),
                                                 np.sqrt(6.0 / feat)), requires_grad=True)
    head_b = Tensor(np.zeros((len(classes),)), requires_grad=True)
    trainable = dict(params)
    trainable["pretrain/head/weight"] = head_w
    trainable["pretrain/head/bias"] = head_b

    items = [(c, s) for c in classes for s in range(store.samples_per_class)]
    order_rng = PortableRng(derive_seed(config.seed, "pretrain/order"))
    velocity: dict[str, np.ndarray] = {}
    momentum = config.momentum if config.optimizer == "sgd_momentum" else 0.0

    for p in range(config.pretrain_passes):
        lr = config.pretrain_lr * 0.5 ** (p // 10)
        order = list(items)
        order_rng.shuffle(order)
        for start in range(0, len(order), config.pretrain_batch):
            batch = order[start:start + config.pretrain_batch]
            images = np.stack([store.images(c, s) for c, s in batch])
            labels = np.array([class_pos[c] for c, _ in batch])
            zero_grads(trainable)
            emb = embed_batch(config.backbone, params, constant(images))
            flat = reshape(emb, (len(batch), feat))
            logits = (flat @ head_w) + head_b
            loss = episode_loss(logits, labels)
            if not np.isfinite(loss.item()):
                raise NumericsError(f"non-finite pretraining loss at pass {p}")
            loss.backward()
            sgd_step(trainable, lr, momentum, velocity)
    return (params, head_w, head_b) if with_head else params


def classification_accuracy(backbone_params: dict[str, Tensor],
                            head_w: Tensor, head_b: Tensor,
                            config: BackboneConfig, images: np.ndarray,
                            labels: np.ndarray) -> float:
    """Head-classifier accuracy of a pretrained backbone, for diagnostics."""
    emb = embed_batch(config, backbone_params, constant(images))
    flat = reshape(emb, (images.shape[0], int(np.prod(emb.shape[1:]))))
    logits = (flat @ head_w) + head_b
    return float(np.mean(np.argmax(logits.data, axis=1) == labels))
