"""Repeated-trial experiment grids over the three data-selection protocols.

Every (grid point, trial) pair gets its own seed, draws a training set with
the matching selection protocol, trains a model and scores it on the fixed
test split. Results go to ``trials.csv`` and ``summary.csv``.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import logging
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from kwsembed import data, trainer
from kwsembed.data import DatasetView, FeatureStore, ManifestEntry
from kwsembed.model import EmbeddingModel, build_embedding, build_head, load_weights

log = logging.getLogger(__name__)

KINDS = ("size_sweep", "replacement", "augmentation")
MODES = ("full", "head_on_frozen_trunk")
TRIALS_HEADER = ("experiment", "point", "trial", "seed", "accuracy", "train_seconds")
SUMMARY_HEADER = ("experiment", "point", "mean_accuracy", "std_accuracy", "repeats")


class ExperimentError(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    kind: str
    grid: list
    repeats: int = 20
    base_seed: int = 0
    mode: str = "head_on_frozen_trunk"
    trunk_path: str | None = None
    train: trainer.TrainConfig = field(default_factory=trainer.TrainConfig)
    words: list[str] | None = None
    record_timing: bool = True
    threads: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        if self.mode not in MODES:
            raise ValueError(f"unknown model mode {self.mode!r}; expected one of {', '.join(MODES)}")
        if self.repeats < 1:
            raise ValueError(f"repeats must be >= 1, got {self.repeats}")
        if not self.grid:
            raise ValueError("grid must not be empty")
        if self.threads < 1:
            raise ValueError(f"threads must be >= 1, got {self.threads}")


@dataclass(frozen=True)
class TrialResult:
    experiment: str
    point: float
    trial: int
    seed: int
    accuracy: float
    train_seconds: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 1]")


@dataclass(frozen=True)
class TrialSummary:
    experiment: str
    point: float
    mean_accuracy: float
    std_accuracy: float
    repeats: int


@dataclass
class DataPools:
    real_train: list[ManifestEntry]
    synthetic: list[ManifestEntry]
    test: list[ManifestEntry]
    features: FeatureStore

    @classmethod
    def from_entries(cls, entries: Sequence[ManifestEntry], features: FeatureStore | None = None) -> "DataPools":
        return cls(
            real_train=[e for e in entries if e.split == "train" and e.source == "real"],
            synthetic=[e for e in entries if e.split == "train" and e.source == "synthetic"],
            test=[e for e in entries if e.split == "test"],
            features=features or FeatureStore(),
        )


def trial_seed(base_seed: int, point, trial: int) -> int:
    """base_seed XOR a stable 32-bit hash of (point, trial)."""
    digest = hashlib.sha256(f"{format_point(point)}:{trial}".encode()).digest()
    return base_seed ^ int.from_bytes(digest[:4], "little")


def format_point(point) -> str:
    if isinstance(point, (int, np.integer)):
        return str(int(point))
    return f"{float(point):g}"


def parse_point(text: str):
    try:
        return int(text)
    except ValueError:
        return float(text)


def class_words(cfg: ExperimentConfig, pools: DataPools) -> list[str]:
    if cfg.words:
        return list(cfg.words)
    source = pools.synthetic if cfg.kind != "size_sweep" and pools.synthetic else pools.real_train
    return sorted(data.words_in_order(source))


def build_view(cfg: ExperimentConfig, pools: DataPools, point, seed: int, words: Sequence[str]) -> DatasetView:
    if cfg.kind == "size_sweep":
        return data.select_n_per_word(pools.real_train, int(point), words, seed)
    synth = [e for e in pools.synthetic if e.label in set(words)]
    real = [e for e in pools.real_train if e.label in set(words)]
    if cfg.kind == "replacement":
        return data.mix_replacement(real, synth, float(point), seed)
    return data.mix_augmentation(synth, real, int(point), seed)


TrialFn = Callable[[DatasetView, int], float]


def make_trial_runner(cfg: ExperimentConfig, pools: DataPools, words: Sequence[str]) -> TrialFn:
    """Default trial: train per ``cfg.mode`` on the view, return test accuracy.

    In head mode the frozen trunk's outputs are cached per file, so each
    example is embedded once across all trials.
    """
    words = list(words)
    test = [e for e in pools.test if e.label in set(words)]
    if not test:
        raise ExperimentError("no test-split examples for the experiment's words")
    test_x = pools.features.stack(test)
    test_y = [e.label for e in test]

    if cfg.mode == "full":

        def run_full(view: DatasetView, seed: int) -> float:
            trunk = build_embedding(seed)
            head = build_head(len(words), seed=seed + 1, labels=words)
            tc = dataclasses.replace(cfg.train, seed=seed, freeze_trunk=False)
            trainer.train_full(trunk, head, pools.features.stack(view), view.labels(), tc)
            return trainer.evaluate_accuracy(trunk, head, test_x, test_y)

        return run_full

    if cfg.trunk_path is None:
        raise ExperimentError("head_on_frozen_trunk mode needs a trunk weights path")
    trunk = load_weights(cfg.trunk_path, expect_kind="embedding")
    return head_trial_runner(trunk, pools.features, test_x, test_y, words, cfg.train)


def head_trial_runner(trunk: EmbeddingModel, features: FeatureStore, test_x, test_y, words, train_cfg) -> TrialFn:
    words = list(words)
    cache: dict[str, np.ndarray] = {}
    test_emb = trainer.embed(trunk, test_x)

    def embeddings(entries: Sequence[ManifestEntry]) -> np.ndarray:
        todo = [e for e in dict.fromkeys(entries) if e.path not in cache]
        if todo:
            for e, emb in zip(todo, trainer.embed(trunk, features.stack(todo))):
                cache[e.path] = emb
        return np.stack([cache[e.path] for e in entries])

    def run_head(view: DatasetView, seed: int) -> float:
        if len(view) == 0:
            raise ValueError("empty training view")
        head = build_head(len(words), seed=seed, labels=words)
        tc = dataclasses.replace(train_cfg, seed=seed, freeze_trunk=True)
        trainer.fit_head_on_embeddings(head, embeddings(view.entries), view.labels(), tc)
        y = trainer.label_indices(test_y, head)
        return float(np.mean(np.argmax(head.forward(test_emb), axis=-1) == y))

    return run_head


def run_experiment(cfg: ExperimentConfig, pools: DataPools, trial_fn: TrialFn | None = None) -> list[TrialResult]:
    """Run every (grid point, trial) and return results in grid order, then trial order."""
    words = class_words(cfg, pools)
    if trial_fn is None:
        trial_fn = make_trial_runner(cfg, pools, words)
    tasks = [(gi, point, t) for gi, point in enumerate(cfg.grid) for t in range(cfg.repeats)]

    def one(task) -> tuple[int, TrialResult]:
        gi, point, t = task
        seed = trial_seed(cfg.base_seed, point, t)
        try:
            view = build_view(cfg, pools, point, seed, words)
            start = time.perf_counter()
            acc = float(trial_fn(view, seed))
            seconds = time.perf_counter() - start
        except Exception as exc:
            raise ExperimentError(f"{cfg.kind} point {format_point(point)} trial {t}: {exc}") from exc
        log.info("%s point=%s trial=%d accuracy=%.4f", cfg.kind, format_point(point), t, acc)
        return gi, TrialResult(cfg.kind, point, t, seed, acc, seconds if cfg.record_timing else 0.0)

    if cfg.threads == 1:
        done = [one(t) for t in tasks]
    else:
        with ThreadPoolExecutor(cfg.threads) as pool:
            done = list(pool.map(one, tasks))
    done.sort(key=lambda item: (item[0], item[1].trial))
    return [r for _, r in done]


def summarize(results: Sequence[TrialResult]) -> list[TrialSummary]:
    """Mean and sample (n-1) standard deviation of accuracy per grid point; std is 0 for one trial."""
    if not results:
        raise ValueError("no trial results to summarize")
    groups: dict[tuple[str, str], list[TrialResult]] = {}
    for r in results:
        groups.setdefault((r.experiment, format_point(r.point)), []).append(r)
    out = []
    for (kind, _), rs in groups.items():
        accs = [r.accuracy for r in rs]
        std = statistics.stdev(accs) if len(accs) > 1 else 0.0
        out.append(TrialSummary(kind, rs[0].point, statistics.fmean(accs), std, len(accs)))
    return out


def write_results(results: Sequence[TrialResult], summaries: Sequence[TrialSummary], destination) -> tuple[Path, Path]:
    """Write ``trials.csv`` and ``summary.csv`` into the ``destination`` directory."""
    dest = Path(destination)
    try:
        dest.mkdir(parents=True, exist_ok=True)
        trials_path, summary_path = dest / "trials.csv", dest / "summary.csv"
        with open(trials_path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRIALS_HEADER)
            for r in results:
                w.writerow([r.experiment, format_point(r.point), r.trial, r.seed, f"{r.accuracy:.6f}", f"{r.train_seconds:.6f}"])
        with open(summary_path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SUMMARY_HEADER)
            for s in summaries:
                w.writerow([s.experiment, format_point(s.point), f"{s.mean_accuracy:.6f}", f"{s.std_accuracy:.6f}", s.repeats])
    except OSError as exc:
        raise OSError(f"cannot write results to {exc.filename or dest}: {exc.strerror}") from exc
    return trials_path, summary_path


def read_summary(path) -> list[TrialSummary]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        TrialSummary(r["experiment"], parse_point(r["point"]), float(r["mean_accuracy"]), float(r["std_accuracy"]), int(r["repeats"]))
        for r in rows
    ]


def read_trials(path) -> list[TrialResult]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        TrialResult(r["experiment"], parse_point(r["point"]), int(r["trial"]), int(r["seed"]), float(r["accuracy"]), float(r["train_seconds"]))
        for r in rows
    ]
