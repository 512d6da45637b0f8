"""Cross-entropy training of the verb-translation classifiers.

Plain minibatch SGD (no momentum, no weight decay), early stopping on
validation accuracy, best-epoch checkpointing. Gradients are analytic; the
output-layer error signal is (softmax - onehot) propagated through the
affine stack by the chain rule.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import corpus, models
from .corpus import DatasetManifest, build_label_vocab, filter_split
from .features import EmbeddingTable, FeatureStore, embed_phrase
from .models import ModelParams, forward, softmax

EPS = 1e-12  # floor inside log(); keeps the loss finite for a zero probability


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 1e-4
    max_epochs: int = 100
    patience: int = 20  # consecutive non-improving epochs tolerated; 0 disables
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.patience < 0:
            raise ValueError("patience must be >= 0")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")


@dataclass(frozen=True)
class Gradients:
    """Same tensor slots as :class:`ModelParams`; absent slots are ``None``."""

    w_img: np.ndarray | None = None
    b_img: np.ndarray | None = None
    w_text: np.ndarray | None = None
    b_text: np.ndarray | None = None
    w_fuse: np.ndarray | None = None
    b_fuse: np.ndarray | None = None
    w_out: np.ndarray | None = None
    b_out: np.ndarray | None = None

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: value for name, value in self.__dict__.items() if value is not None}


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_accuracy: float


def cross_entropy(dist: np.ndarray, gold: int) -> float:
    """Negative log probability of the gold label under ``dist``."""
    dist = np.asarray(dist)
    if not 0 <= gold < dist.shape[-1]:
        raise IndexError(f"gold label {gold} out of range for {dist.shape[-1]} labels")
    return float(-np.log(dist[gold] + EPS))


def _act_grad(pre: np.ndarray, activation: str) -> np.ndarray:
    if activation == "none":
        return np.ones_like(pre)
    if activation == "relu":
        return (pre > 0).astype(np.float64)
    raise ValueError(f"unknown activation {activation!r}")


def backward(params: ModelParams, golds, x_img=None, phrases=None):
    """Mean cross-entropy loss over a batch and its analytic gradients.

    ``x_img`` is a (B, img_dim) matrix for visual/multimodal models,
    ``phrases`` a (B, embed_dim) matrix for textual/multimodal models;
    single vectors are promoted to a batch of one. Returns
    ``(loss, Gradients)`` where the gradients are of the *mean* loss.
    """
    golds = np.atleast_1d(np.asarray(golds, dtype=np.int64))
    batch = golds.shape[0]
    if batch == 0:
        raise ValueError("empty batch")
    if golds.min() < 0 or golds.max() >= params.n_labels:
        raise IndexError("gold label out of range")
    act = params.activation

    def as_batch(a, dim, what):
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        if a.shape != (batch, dim):
            raise ValueError(f"{what} has shape {a.shape}, expected ({batch}, {dim})")
        return a

    grads: dict[str, np.ndarray] = {}
    if params.kind == "visual":
        x = as_batch(x_img, params.img_dim, "image batch")
        pre = x @ params.w_img.T + params.b_img
        hidden = models._activate(pre, act)
    elif params.kind == "textual":
        q = as_batch(phrases, params.embed_dim, "phrase batch")
        pre = q @ params.w_text.T + params.b_text
        hidden = models._activate(pre, act)
    else:
        x = as_batch(x_img, params.img_dim, "image batch")
        q = as_batch(phrases, params.embed_dim, "phrase batch")
        pre_text = q @ params.w_text.T + params.b_text
        h_text = models._activate(pre_text, act)
        joint = np.concatenate([x, h_text], axis=1)
        pre = joint @ params.w_fuse.T + params.b_fuse
        hidden = models._activate(pre, act)

    logits = hidden @ params.w_out.T + params.b_out
    probs = softmax(logits)
    loss = float(np.mean(-np.log(probs[np.arange(batch), golds] + EPS)))

    d_logits = probs.copy()
    d_logits[np.arange(batch), golds] -= 1.0
    d_logits /= batch

    grads["w_out"] = d_logits.T @ hidden
    grads["b_out"] = d_logits.sum(axis=0)
    d_hidden = d_logits @ params.w_out
    d_pre = d_hidden * _act_grad(pre, act)

    if params.kind == "visual":
        grads["w_img"] = d_pre.T @ x
        grads["b_img"] = d_pre.sum(axis=0)
    elif params.kind == "textual":
        grads["w_text"] = d_pre.T @ q
        grads["b_text"] = d_pre.sum(axis=0)
    else:
        grads["w_fuse"] = d_pre.T @ joint
        grads["b_fuse"] = d_pre.sum(axis=0)
        d_joint = d_pre @ params.w_fuse
        d_text = d_joint[:, params.img_dim:] * _act_grad(pre_text, act)
        grads["w_text"] = d_text.T @ q
        grads["b_text"] = d_text.sum(axis=0)

    return loss, Gradients(**grads)


def sgd_step(params: ModelParams, grads: Gradients, lr: float) -> ModelParams:
    """One plain SGD update: theta <- theta - lr * grad, elementwise."""
    updates = {}
    for name, g in grads.tensors().items():
        value = getattr(params, name)
        if value is None:
            raise ValueError(f"gradient for absent tensor {name!r}")
        if value.shape != g.shape:
            raise ValueError(f"tensor {name!r}: shape {g.shape} != {value.shape}")
        updates[name] = value - lr * g
    return models.with_tensors(params, **updates)


def build_inputs(samples, store: FeatureStore, table: EmbeddingTable | None,
                 vocab: corpus.LabelVocab, kind: str):
    """Assemble (x_img, phrases, golds) matrices for a list of samples.

    Only the modality the model consumes is materialized; the other entry is
    ``None``. Feature rows are bounds-checked against the store.
    """
    samples = list(samples)
    golds = np.array([vocab.index[s.target_verb] for s in samples], dtype=np.int64)
    x_img = None
    phrases = None
    if kind in ("visual", "multimodal"):
        for s in samples:
            if s.feature_row >= store.count:
                raise corpus.ManifestError(
                    f"sample {s.id!r}: feature_row {s.feature_row} out of range "
                    f"(store has {store.count} rows)"
                )
        x_img = store.data[[s.feature_row for s in samples]].astype(np.float64)
    if kind in ("textual", "multimodal"):
        if table is None:
            raise ValueError(f"{kind} model needs an embedding table")
        phrases = np.stack(
            [embed_phrase(s.query_phrase, table).values for s in samples]
        ).astype(np.float64)
    return x_img, phrases, golds


def _split_accuracy(params, x_img, phrases, golds) -> float:
    logits = forward(
        params,
        x_img=x_img if x_img is not None else None,
        q=phrases if phrases is not None else None,
    )
    return float(np.mean(np.argmax(logits, axis=1) == golds))


def train(manifest: DatasetManifest, store: FeatureStore,
          table: EmbeddingTable | None, kind: str, config: TrainConfig,
          img_dim: int | None = None, hidden_size: int = 128):
    """Train one model and return ``(best_params, history, vocab)``.

    The label vocabulary is built over the whole manifest so that validation
    and test labels always index into the output layer. Epochs iterate
    seeded-shuffled minibatches; after each epoch validation accuracy is
    measured and the best-scoring parameters are kept (ties keep the earlier
    epoch). Training stops after ``patience`` consecutive epochs without
    improvement, or at ``max_epochs``.
    """
    train_samples = filter_split(manifest, "train")
    val_samples = filter_split(manifest, "val")
    if not train_samples:
        raise corpus.ManifestError("training split is empty")
    if not val_samples:
        raise corpus.ManifestError("validation split is empty")
    vocab = build_label_vocab(manifest.samples)

    x_train, q_train, y_train = build_inputs(train_samples, store, table, vocab, kind)
    x_val, q_val, y_val = build_inputs(val_samples, store, table, vocab, kind)

    embed_dim = table.dim if table is not None else 1
    params = models.init_params(
        kind, hidden_size=hidden_size, embed_dim=embed_dim, n_labels=vocab.size,
        seed=config.seed, img_dim=img_dim if img_dim is not None else store.dim,
    )

    rng = np.random.default_rng(config.seed)
    n = len(train_samples)
    best_params = params
    best_acc = -1.0
    since_improve = 0
    history: list[EpochStats] = []

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n) if config.shuffle else np.arange(n)
        total_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads = backward(
                params, y_train[idx],
                x_img=x_train[idx] if x_train is not None else None,
                phrases=q_train[idx] if q_train is not None else None,
            )
            params = sgd_step(params, grads, config.learning_rate)
            total_loss += loss * len(idx)
        train_loss = total_loss / n
        val_acc = _split_accuracy(params, x_val, q_val, y_val)
        history.append(EpochStats(epoch=epoch, train_loss=train_loss, val_accuracy=val_acc))
        if val_acc > best_acc:
            best_acc = val_acc
            best_params = params
            since_improve = 0
        else:
            since_improve += 1
            if config.patience > 0 and since_improve >= config.patience:
                break
    return best_params, history, vocab


def write_history(history, path) -> None:
    """Write per-epoch stats as CSV: epoch, train_loss, val_accuracy."""
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_accuracy"])
        for row in history:
            writer.writerow([row.epoch, repr(row.train_loss), repr(row.val_accuracy)])
