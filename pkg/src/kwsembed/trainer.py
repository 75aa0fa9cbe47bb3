"""Training loops: full model, multi-head shared-trunk pretraining, frozen-trunk heads."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from kwsembed import nn
from kwsembed.model import EmbeddingModel, HeadModel, prepare_input
from kwsembed.nn import AdamState, adam_step

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 10
    learning_rate: float = 1e-3
    seed: int = 0
    freeze_trunk: bool = False
    non_target_class: bool = True
    warmup_steps: int = 0  # linear learning-rate ramp over the first optimizer steps

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.warmup_steps < 0:
            raise ConfigError(f"warmup_steps must be >= 0, got {self.warmup_steps}")


@dataclass
class TrainReport:
    epoch_losses: list[float] = field(default_factory=list)
    train_accuracy: float = 0.0
    wall_seconds: float = 0.0
    steps: int = 0

    def lines(self) -> list[str]:
        out = [f"epoch={i + 1} loss={loss:.6f}" for i, loss in enumerate(self.epoch_losses)]
        out.append(f"train_accuracy={self.train_accuracy:.6f} steps={self.steps} seconds={self.wall_seconds:.3f}")
        return out


@dataclass
class HeadGroup:
    """One head's task inside multi-head pretraining.

    ``labels`` index into the head's classes; when a non-target class is used
    it is the last class index.
    """

    group_id: int
    target_labels: tuple[str, ...]
    head: HeadModel
    features: np.ndarray  # (N, T, F) uint8
    labels: np.ndarray  # (N,) int


def label_indices(labels, head: HeadModel) -> np.ndarray:
    """Map string labels through the head's class map, or validate integer labels."""
    labels = list(labels) if not isinstance(labels, np.ndarray) else labels
    if len(labels) and isinstance(labels[0], str):
        if head.labels is None:
            raise ValueError("string labels given but the head has no class map")
        index = {name: i for i, name in enumerate(head.labels)}
        missing = sorted({l for l in labels if l not in index})
        if missing:
            raise ValueError(f"labels {missing} are not in the head's class map {list(head.labels)}")
        return np.array([index[l] for l in labels], dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    bad = (y < 0) | (y >= head.num_classes)
    if np.any(bad):
        raise ValueError(f"label {int(y[bad][0])} is outside the head's {head.num_classes} classes")
    return y


def make_head_groups(
    features: np.ndarray,
    labels: Sequence[str],
    groups: Sequence[Sequence[str]],
    heads: Sequence[HeadModel],
    non_target_class: bool = True,
    seed: int = 0,
    non_target_count: int | None = None,
) -> list[HeadGroup]:
    """Slice a labeled pool into per-group datasets.

    With ``non_target_class`` each group also gets examples whose label is
    outside the group (other groups' words, or unlabeled filler speech in the
    pool), relabeled as its extra last class. ``non_target_count`` defaults to
    the group's mean per-word count and is capped by what the pool holds.
    """
    _check_disjoint(groups)
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    out = []
    for gid, (targets, head) in enumerate(zip(groups, heads)):
        targets = tuple(targets)
        expected = len(targets) + (1 if non_target_class else 0)
        if head.num_classes != expected:
            raise ConfigError(f"group {gid} head has {head.num_classes} classes, expected {expected}")
        idx = np.flatnonzero(np.isin(labels, targets))
        y = np.array([targets.index(l) for l in labels[idx]], dtype=np.int64)
        if non_target_class:
            others = np.flatnonzero(~np.isin(labels, targets))
            want = int(round(len(idx) / len(targets))) if non_target_count is None else non_target_count
            n_other = min(len(others), want)
            if n_other:
                picked = np.sort(rng.choice(others, n_other, replace=False))
                idx = np.concatenate([idx, picked])
                y = np.concatenate([y, np.full(n_other, len(targets), dtype=np.int64)])
        out.append(HeadGroup(gid, targets, head, features[idx], y))
    return out


def _ramp(states, cfg: TrainConfig, step: int) -> None:
    if cfg.warmup_steps:
        lr = cfg.learning_rate * min(1.0, (step + 1) / cfg.warmup_steps)
        for st in states:
            st.lr = lr


def _check_disjoint(groups: Sequence[Sequence[str]]):
    seen: dict[str, int] = {}
    for gid, g in enumerate(groups):
        for label in g:
            if label in seen:
                raise ConfigError(f"label {label!r} appears in groups {seen[label]} and {gid}")
            seen[label] = gid


def _batch(perm: np.ndarray, step: int, size: int, longest: bool) -> np.ndarray:
    lo, hi = step * size, (step + 1) * size
    if hi <= perm.size or longest:
        return perm[lo:hi]
    return np.take(perm, np.arange(lo, hi), mode="wrap")


def head_step(trunk: EmbeddingModel, head: HeadModel, features: np.ndarray, y: np.ndarray, need_trunk: bool = True):
    """Forward/backward for one batch. Returns (loss, trunk_grad, head_grad, n_correct)."""
    x = prepare_input(features, trunk.params.dtype.type)
    emb, cache = trunk.forward(x, keep_cache=True)
    logits, hcache = head.forward(emb, keep_cache=True)
    loss, g = nn.softmax_xent(logits, y)
    head_grad, g_emb = head.backward(hcache, g)
    trunk_grad = trunk.backward(cache, g_emb)[0] if need_trunk else None
    correct = int(np.sum(np.argmax(logits, axis=-1) == y))
    return loss, trunk_grad, head_grad, correct


def multihead_gradients(trunk: EmbeddingModel, batches: Sequence[tuple[HeadModel, np.ndarray, np.ndarray]]):
    """Summed trunk gradient and per-head gradients for one batch per head."""
    trunk_grad = np.zeros_like(trunk.params)
    head_grads, losses, correct = [], [], []
    for head, feats, y in batches:
        loss, tg, hg, c = head_step(trunk, head, feats, y)
        trunk_grad += tg
        head_grads.append(hg)
        losses.append(loss)
        correct.append(c)
    return trunk_grad, head_grads, losses, correct


def train_multihead(trunk: EmbeddingModel, groups: Sequence[HeadGroup], cfg: TrainConfig, on_epoch=None):
    """Train one shared trunk under several heads at once.

    Each optimizer step draws one batch per group; the trunk update uses the
    sum of all heads' trunk gradients, each head only its own gradient.
    ``on_epoch(epoch, trunk)`` is called after every epoch (e.g. to checkpoint).
    Returns (trunk, heads, report); the trunk is updated in place.
    """
    if not groups:
        raise ConfigError("train_multihead needs at least one head group")
    if cfg.freeze_trunk:
        raise ConfigError("train_multihead trains the trunk; freeze_trunk must be false")
    _check_disjoint([g.target_labels for g in groups])
    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    trunk_state = AdamState.for_params(trunk.params, lr=cfg.learning_rate)
    head_states = [AdamState.for_params(g.head.params, lr=cfg.learning_rate) for g in groups]
    sizes = [len(g.labels) for g in groups]
    longest = max(sizes)
    steps_per_epoch = math.ceil(longest / cfg.batch_size)
    report = TrainReport()
    for epoch in range(cfg.epochs):
        perms = [rng.permutation(n) for n in sizes]
        total_loss, n_correct, n_seen = 0.0, 0, 0
        for step in range(steps_per_epoch):
            batches = []
            for g, perm in zip(groups, perms):
                idx = _batch(perm, step, cfg.batch_size, len(perm) == longest)
                batches.append((g.head, g.features[idx], g.labels[idx]))
            trunk_grad, head_grads, losses, correct = multihead_gradients(trunk, batches)
            _ramp([trunk_state, *head_states], cfg, report.steps)
            adam_step(trunk.params, trunk_grad, trunk_state)
            for g, hg, st in zip(groups, head_grads, head_states):
                adam_step(g.head.params, hg, st)
            total_loss += sum(losses)
            n_correct += sum(correct)
            n_seen += sum(len(b[2]) for b in batches)
            report.steps += 1
        report.epoch_losses.append(total_loss / steps_per_epoch)
        report.train_accuracy = n_correct / n_seen
        log.info("multihead epoch %d loss %.4f acc %.3f", epoch + 1, report.epoch_losses[-1], report.train_accuracy)
        if on_epoch is not None:
            on_epoch(epoch + 1, trunk)
    report.wall_seconds = time.perf_counter() - t0
    return trunk, [g.head for g in groups], report


def train_full(trunk: EmbeddingModel, head: HeadModel, features: np.ndarray, labels, cfg: TrainConfig):
    """Ordinary single-task training of trunk and head together. Returns (trunk, head, report)."""
    if cfg.freeze_trunk:
        raise ConfigError("train_full trains the trunk; use train_head for a frozen trunk")
    y = label_indices(labels, head)
    if len(y) == 0:
        raise ValueError("no training examples")
    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    trunk_state = AdamState.for_params(trunk.params, lr=cfg.learning_rate)
    head_state = AdamState.for_params(head.params, lr=cfg.learning_rate)
    report = TrainReport()
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(y))
        total_loss, n_correct, steps = 0.0, 0, 0
        for start in range(0, len(y), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            loss, tg, hg, c = head_step(trunk, head, features[idx], y[idx])
            _ramp([trunk_state, head_state], cfg, report.steps + steps)
            adam_step(trunk.params, tg, trunk_state)
            adam_step(head.params, hg, head_state)
            total_loss += loss
            n_correct += c
            steps += 1
        report.steps += steps
        report.epoch_losses.append(total_loss / steps)
        report.train_accuracy = n_correct / len(y)
        log.info("full epoch %d loss %.4f acc %.3f", epoch + 1, report.epoch_losses[-1], report.train_accuracy)
    report.wall_seconds = time.perf_counter() - t0
    return trunk, head, report


def embed(trunk: EmbeddingModel, features: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Trunk outputs (N, T', 1, C) for uint8 feature grids (N, T, F)."""
    outs = [
        trunk.forward(prepare_input(features[i : i + batch_size], trunk.params.dtype.type))
        for i in range(0, len(features), batch_size)
    ]
    if not outs:
        raise ValueError("no examples to embed")
    return np.concatenate(outs)


def fit_head_on_embeddings(head: HeadModel, embeddings: np.ndarray, labels, cfg: TrainConfig):
    """Train only the head on precomputed trunk outputs. Returns (head, report)."""
    y = label_indices(labels, head)
    if len(y) == 0:
        raise ValueError("no training examples")
    embeddings = embeddings.astype(head.params.dtype, copy=False)
    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    state = AdamState.for_params(head.params, lr=cfg.learning_rate)
    report = TrainReport()
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(y))
        total_loss, steps = 0.0, 0
        for start in range(0, len(y), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            logits, cache = head.forward(embeddings[idx], keep_cache=True)
            loss, g = nn.softmax_xent(logits, y[idx])
            grad, _ = head.backward(cache, g)
            _ramp([state], cfg, report.steps + steps)
            adam_step(head.params, grad, state)
            total_loss += loss
            steps += 1
        report.steps += steps
        report.epoch_losses.append(total_loss / steps)
    report.train_accuracy = _accuracy(head.forward(embeddings), y)
    report.wall_seconds = time.perf_counter() - t0
    return head, report


def train_head(trunk: EmbeddingModel, head: HeadModel, features: np.ndarray, labels, cfg: TrainConfig):
    """Train a head on a frozen trunk; trunk parameters are never written.

    Trunk outputs are computed once per example and reused across epochs.
    """
    if not cfg.freeze_trunk:
        raise ConfigError("train_head requires freeze_trunk=true")
    y = label_indices(labels, head)
    t0 = time.perf_counter()
    emb = embed(trunk, features, max(cfg.batch_size, 64))
    head, report = fit_head_on_embeddings(head, emb, y, cfg)
    report.wall_seconds = time.perf_counter() - t0
    return head, report


def _accuracy(logits: np.ndarray, y: np.ndarray) -> float:
    # np.argmax picks the lowest index on ties
    return float(np.mean(np.argmax(logits, axis=-1) == y))


def predict_logits(trunk: EmbeddingModel, head: HeadModel, features: np.ndarray, batch_size: int = 64) -> np.ndarray:
    return head.forward(embed(trunk, features, batch_size).astype(head.params.dtype, copy=False))


def evaluate_accuracy(trunk: EmbeddingModel, head: HeadModel, features: np.ndarray, labels, batch_size: int = 64) -> float:
    """Top-1 accuracy; ties go to the lowest class index."""
    if len(labels) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    y = label_indices(labels, head)
    return _accuracy(predict_logits(trunk, head, features, batch_size), y)
