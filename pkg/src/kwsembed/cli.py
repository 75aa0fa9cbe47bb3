"""Command-line entry point: ``kwsembed <subcommand>``.

stdout carries machine-readable results only (``key=value`` lines);
diagnostics go to stderr. Exit codes: 0 success, 2 usage or input error,
1 internal error.

Feature container (KWSF), all integers little-endian::

    b"KWSF" | u32 version (1) | u32 count | count x (198 x 32) uint8 grids
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import struct
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from kwsembed import data, experiments, toycorpus, trainer
from kwsembed.frontend import FrontendConfig
from kwsembed.model import CONTEXT_FRAMES, build_embedding, build_head, load_weights, param_count, save_weights

log = logging.getLogger("kwsembed")

KWSF_MAGIC = b"KWSF"
KWSF_VERSION = 1
_KWSF_HEAD = struct.Struct("<4sII")
SEED_ENV = "KWS_SEED"


class UsageError(ValueError):
    """Bad flags, config or inputs; maps to exit code 2."""


# --- feature container ------------------------------------------------------


def write_kwsf(contexts: np.ndarray, destination) -> None:
    contexts = np.ascontiguousarray(contexts, dtype=np.uint8)
    if contexts.ndim != 3 or contexts.shape[1] != CONTEXT_FRAMES:
        raise ValueError(f"expected (count, {CONTEXT_FRAMES}, bins) contexts, got {contexts.shape}")
    with open(destination, "wb") as fh:
        fh.write(_KWSF_HEAD.pack(KWSF_MAGIC, KWSF_VERSION, contexts.shape[0]))
        fh.write(contexts.tobytes())


def read_kwsf(source, num_bins: int = 32) -> np.ndarray:
    raw = Path(source).read_bytes()
    if len(raw) < _KWSF_HEAD.size:
        raise ValueError(f"{source}: truncated KWSF header ({len(raw)} bytes)")
    magic, version, count = _KWSF_HEAD.unpack_from(raw)
    if magic != KWSF_MAGIC:
        raise ValueError(f"{source}: bad magic {magic!r}, expected {KWSF_MAGIC!r}")
    if version != KWSF_VERSION:
        raise ValueError(f"{source}: unsupported KWSF version {version}")
    grid = CONTEXT_FRAMES * num_bins
    body = raw[_KWSF_HEAD.size :]
    if len(body) != count * grid:
        raise ValueError(f"{source}: expected {count * grid} payload bytes for {count} grids, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(count, CONTEXT_FRAMES, num_bins).copy()


# --- config -----------------------------------------------------------------


def _section(cls, values: dict, name: str, **overrides):
    if not isinstance(values, dict):
        raise UsageError(f"config section {name!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise UsageError(f"unknown key(s) in {name!r}: {', '.join(unknown)}")
    try:
        return cls(**{**values, **overrides})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"config section {name!r}: {exc}") from exc


@dataclass
class PretrainSection:
    words: list[str] | None = None


@dataclass
class ExperimentSection:
    kind: str = "size_sweep"
    grid: list = field(default_factory=lambda: [1, 5, 10])
    repeats: int = 20
    base_seed: int = 0
    mode: str = "head_on_frozen_trunk"
    trunk: str | None = None
    words: list[str] | None = None
    record_timing: bool = True


@dataclass
class RunConfig:
    """JSON run definition; relative paths resolve against the config file's directory."""

    manifest: str | None = None
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    train: trainer.TrainConfig = field(default_factory=trainer.TrainConfig)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)

    @classmethod
    def from_dict(cls, doc: dict, base_dir: Path = Path("."), seed: int | None = None) -> "RunConfig":
        if not isinstance(doc, dict):
            raise UsageError("config must be a JSON object")
        unknown = sorted(set(doc) - {f.name for f in dataclasses.fields(cls)})
        if unknown:
            raise UsageError(f"unknown top-level key(s): {', '.join(unknown)}")

        def path(p):
            return None if p is None else str(base_dir / p)

        train_over = {} if seed is None else {"seed": seed}
        exp_over = {} if seed is None else {"base_seed": seed}
        exp = _section(ExperimentSection, doc.get("experiment", {}), "experiment", **exp_over)
        exp.trunk = path(exp.trunk)
        return cls(
            manifest=path(doc.get("manifest")),
            frontend=_section(FrontendConfig, doc.get("frontend", {}), "frontend"),
            train=_section(trainer.TrainConfig, doc.get("train", {}), "train", **train_over),
            pretrain=_section(PretrainSection, doc.get("pretrain", {}), "pretrain"),
            experiment=exp,
        )

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise UsageError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_dict(doc, path.parent, seed=env_seed())


def env_seed() -> int | None:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError as exc:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from exc


# --- helpers ----------------------------------------------------------------


def _manifest(path) -> list[data.ManifestEntry]:
    if path is None:
        raise UsageError("no manifest given")
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"manifest not found: {path}")
    return data.resolve_paths(data.load_manifest(path), path.parent)


def _check_files(entries) -> None:
    missing = [e.path for e in entries if not os.path.isfile(e.path)]
    if missing:
        raise UsageError(f"audio file not found: {missing[0]}" + (f" (+{len(missing) - 1} more)" if len(missing) > 1 else ""))


def _stack(entries, cfg: FrontendConfig, threads: int = 1) -> np.ndarray:
    _check_files(entries)
    store = data.FeatureStore(cfg)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            ctxs = list(pool.map(store.context, entries))
        return np.stack(ctxs) if ctxs else store.stack([])
    return store.stack(entries)


def _emit(*lines: str) -> None:
    for line in lines:
        print(line)


def _train_cfg(args, base: trainer.TrainConfig) -> trainer.TrainConfig:
    over = {k: v for k, v in (("epochs", args.epochs), ("seed", args.seed)) if v is not None}
    seed = env_seed()
    if seed is not None:
        over["seed"] = seed
    return dataclasses.replace(base, **over)


# --- subcommands ------------------------------------------------------------


def cmd_features(args) -> int:
    cfg = RunConfig.load(args.config).frontend if args.config else FrontendConfig()
    if args.wav:
        entries = [data.ManifestEntry(str(args.wav), "unknown")]
    else:
        entries = _manifest(args.manifest)
    contexts = _stack(entries, cfg, args.threads)
    write_kwsf(contexts, args.out)
    _emit(f"count={len(contexts)}", f"out={args.out}")
    return 0


def split_groups(words: list[str], k: int) -> list[list[str]]:
    """Contiguous, near-equal, disjoint word groups."""
    if k < 1:
        raise UsageError(f"--groups must be >= 1, got {k}")
    if k > len(words):
        raise UsageError(f"--groups {k} exceeds the {len(words)} available words")
    return [list(chunk) for chunk in np.array_split(np.array(words, dtype=object), k)]


def cmd_pretrain(args) -> int:
    if args.groups < 1:
        raise UsageError(f"--groups must be >= 1, got {args.groups}")
    cfg = RunConfig.load(args.config)
    entries = [e for e in _manifest(cfg.manifest) if e.split == "train" and e.source == "real"]
    if not entries:
        raise UsageError("manifest has no real training examples")
    words = cfg.pretrain.words or sorted(data.words_in_order(entries))
    groups = split_groups(list(words), args.groups)
    entries = [e for e in entries if e.label in set(words)]
    tc = cfg.train
    features = _stack(entries, cfg.frontend, args.threads)
    extra = 1 if tc.non_target_class else 0
    heads = [
        build_head(len(g) + extra, seed=tc.seed + 1 + i)
        for i, g in enumerate(groups)
    ]
    trunk = build_embedding(tc.seed)
    head_groups = trainer.make_head_groups(
        features, [e.label for e in entries], groups, heads, tc.non_target_class, tc.seed
    )
    trunk, _, report = trainer.train_multihead(trunk, head_groups, dataclasses.replace(tc, freeze_trunk=False))
    save_weights(trunk, args.out)
    _emit(*report.lines(), f"params={param_count(trunk)}", f"out={args.out}")
    return 0


def _load_trunk(path):
    if not Path(path).is_file():
        raise UsageError(f"trunk file not found: {path}")
    return load_weights(path, expect_kind="embedding")


def cmd_train_head(args) -> int:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    trunk = _load_trunk(args.trunk)
    entries = [e for e in _manifest(args.manifest) if e.split == "train"]
    if not entries:
        raise UsageError("manifest has no training examples")
    words = sorted(data.words_in_order(entries))
    tc = dataclasses.replace(_train_cfg(args, cfg.train), freeze_trunk=True)
    head = build_head(len(words), seed=tc.seed, channels=trunk.config.out_channels, labels=words)
    features = _stack(entries, cfg.frontend, args.threads)
    _, report = trainer.train_head(trunk, head, features, [e.label for e in entries], tc)
    save_weights(head, args.out)
    _emit(*report.lines(), f"classes={len(words)}", f"out={args.out}")
    return 0


def cmd_eval(args) -> int:
    trunk = _load_trunk(args.trunk)
    entries = _manifest(args.manifest)
    words = data.words_in_order(entries)
    if not Path(args.head).is_file():
        raise UsageError(f"head file not found: {args.head}")
    head = load_weights(args.head, expect_kind="head", num_classes=len(words))
    test = [e for e in entries if e.split == "test"]
    if not test:
        raise UsageError("manifest has no test-split examples")
    unknown = sorted({e.label for e in test} - set(head.labels))
    if unknown:
        raise UsageError(f"test labels not known to the head: {', '.join(unknown)}")
    features = _stack(test, FrontendConfig(), args.threads)
    acc = trainer.evaluate_accuracy(trunk, head, features, [e.label for e in test])
    _emit(f"accuracy={acc:.6f}")
    return 0


def cmd_experiment(args) -> int:
    cfg = RunConfig.load(args.config)
    ex = cfg.experiment
    try:
        ecfg = experiments.ExperimentConfig(
            kind=ex.kind,
            grid=list(ex.grid),
            repeats=ex.repeats,
            base_seed=ex.base_seed,
            mode=ex.mode,
            trunk_path=ex.trunk,
            train=cfg.train,
            words=ex.words,
            record_timing=ex.record_timing,
            threads=args.threads,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if ecfg.trunk_path is not None and not Path(ecfg.trunk_path).is_file():
        raise UsageError(f"trunk file not found: {ecfg.trunk_path}")
    entries = _manifest(cfg.manifest)
    _check_files(entries)
    pools = experiments.DataPools.from_entries(entries, data.FeatureStore(cfg.frontend))
    results = experiments.run_experiment(ecfg, pools)
    trials, summary = experiments.write_results(results, experiments.summarize(results), args.out)
    _emit(f"trials={trials}", f"summary={summary}")
    return 0


def cmd_gen_toy_corpus(args) -> int:
    seed = env_seed()
    entries = toycorpus.generate_corpus(
        args.out,
        num_words=args.words,
        train_per_word=args.train_per_word,
        test_per_word=args.test_per_word,
        synthetic_per_word=args.synthetic_per_word,
        seed=args.seed if seed is None else seed,
    )
    _emit(f"count={len(entries)}", f"manifest={Path(args.out) / 'manifest.csv'}")
    return 0


# --- parser -----------------------------------------------------------------


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kwsembed", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.set_defaults(func=fn)
        sp.add_argument("--threads", type=_positive, default=1, help="worker threads (1 = bitwise reproducible)")
        return sp

    sp = add("features", cmd_features, "extract 198x32 feature contexts into a KWSF container")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--wav", help="single 16 kHz mono 16-bit WAV file")
    src.add_argument("--manifest", help="CSV manifest (path,label,source,split)")
    sp.add_argument("--out", required=True, help="output .kwsf path")
    sp.add_argument("--config", help="JSON run config (frontend section is used)")

    sp = add("pretrain", cmd_pretrain, "multi-head pretraining of the embedding trunk")
    sp.add_argument("--config", required=True, help="JSON run config")
    sp.add_argument("--groups", type=int, required=True, help="number of disjoint word groups (heads)")
    sp.add_argument("--out", required=True, help="output trunk .kwsw path")

    sp = add("train-head", cmd_train_head, "train a head on a frozen trunk")
    sp.add_argument("--trunk", required=True, help="trunk .kwsw path")
    sp.add_argument("--manifest", required=True, help="CSV manifest; train split is used")
    sp.add_argument("--out", required=True, help="output head .kwsw path")
    sp.add_argument("--config", help="JSON run config (frontend and train sections are used)")
    sp.add_argument("--epochs", type=_positive, help="override train.epochs")
    sp.add_argument("--seed", type=int, help="override train.seed")

    sp = add("eval", cmd_eval, "print accuracy on a manifest's test split")
    sp.add_argument("--trunk", required=True, help="trunk .kwsw path")
    sp.add_argument("--head", required=True, help="head .kwsw path")
    sp.add_argument("--manifest", required=True, help="CSV manifest; test split is scored")

    sp = add("experiment", cmd_experiment, "run a data-regime experiment and write trials.csv and summary.csv")
    sp.add_argument("--config", required=True, help="JSON run config")
    sp.add_argument("--out", required=True, help="output directory")

    sp = add("gen-toy-corpus", cmd_gen_toy_corpus, "write a synthetic toy corpus with a manifest")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--words", type=_positive, default=8, help="vocabulary size")
    sp.add_argument("--train-per-word", type=int, default=200)
    sp.add_argument("--test-per-word", type=int, default=50)
    sp.add_argument("--synthetic-per-word", type=int, default=0)
    sp.add_argument("--seed", type=int, default=0)
    return p


def _is_input_error(exc: BaseException) -> bool:
    while exc is not None:
        if isinstance(exc, (ValueError, FileNotFoundError, IsADirectoryError, PermissionError, KeyError)):
            return True
        exc = exc.__cause__
    return False


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s", stream=sys.stderr
    )
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes
        if _is_input_error(exc):
            print(f"error: {exc}", file=sys.stderr)
            return 2
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
