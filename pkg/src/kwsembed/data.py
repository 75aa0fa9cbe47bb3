"""Dataset ingestion and the three training-set selection protocols.

Manifests are CSV files with header ``path,label,source,split``. Selections
return a :class:`DatasetView` and are pure functions of (pool, params, seed).
"""

from __future__ import annotations

import csv
import io
import os
import wave
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from kwsembed.frontend import DEFAULT_CONFIG, FrontendConfig, extract_log_mel

CONTEXT_FRAMES = 198
SOURCES = ("real", "synthetic")
SPLITS = ("train", "validation", "test")
MANIFEST_HEADER = ("path", "label", "source", "split")


class ManifestError(ValueError):
    pass


class WavFormatError(ValueError):
    pass


class SelectionError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: str
    source: str = "real"
    split: str = "train"

    def __post_init__(self):
        if not self.label:
            raise ValueError("label must be non-empty")
        if self.source not in SOURCES:
            raise ValueError(f"source must be one of {SOURCES}, got {self.source!r}")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")


@dataclass(frozen=True)
class DatasetView:
    entries: tuple[ManifestEntry, ...]
    seed: int | None = None
    note: str = ""

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def labels(self) -> list[str]:
        return [e.label for e in self.entries]


# --- manifests --------------------------------------------------------------


def load_manifest(source) -> list[ManifestEntry]:
    """Parse a manifest from a path or an open text stream.

    Raises ManifestError naming the line for missing columns or unknown
    ``source``/``split`` tokens. Paths are kept as written (validated lazily).
    """
    if hasattr(source, "read"):
        return _parse_manifest(source, "<stream>")
    with open(source, encoding="utf-8", newline="") as fh:
        return _parse_manifest(fh, str(source))


def _parse_manifest(fh, name: str) -> list[ManifestEntry]:
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        raise ManifestError(f"{name}: line 1: empty manifest, expected header {','.join(MANIFEST_HEADER)}")
    header = [h.strip() for h in header]
    missing = [c for c in MANIFEST_HEADER if c not in header]
    if missing:
        raise ManifestError(f"{name}: line 1: header missing column(s) {', '.join(missing)}")
    col = {c: header.index(c) for c in MANIFEST_HEADER}
    entries = []
    for row in reader:
        line = reader.line_num
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            raise ManifestError(f"{name}: line {line}: expected {len(header)} columns, got {len(row)}")
        path, label, src, split = (row[col[c]].strip() for c in MANIFEST_HEADER)
        if src not in SOURCES:
            raise ManifestError(f"{name}: line {line}: unknown source {src!r} (expected real or synthetic)")
        if split not in SPLITS:
            raise ManifestError(f"{name}: line {line}: unknown split {split!r} (expected train, validation or test)")
        if not label:
            raise ManifestError(f"{name}: line {line}: empty label")
        entries.append(ManifestEntry(path, label, src, split))
    return entries


def write_manifest(entries: Iterable[ManifestEntry], destination) -> None:
    def _write(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for e in entries:
            w.writerow([e.path, e.label, e.source, e.split])

    if hasattr(destination, "write"):
        _write(destination)
    else:
        with open(destination, "w", encoding="utf-8", newline="") as fh:
            _write(fh)


def resolve_paths(entries: Sequence[ManifestEntry], base_dir) -> list[ManifestEntry]:
    """Make relative entry paths absolute against ``base_dir``."""
    base = Path(base_dir)
    return [
        e if os.path.isabs(e.path) else ManifestEntry(str(base / e.path), e.label, e.source, e.split)
        for e in entries
    ]


# --- WAV --------------------------------------------------------------------


def load_wav(path, sample_rate_hz: int = 16000) -> np.ndarray:
    """Read 16-bit PCM mono WAV as float64 samples in [-1, 1)."""
    try:
        with wave.open(str(path), "rb") as w:
            channels, width, rate, frames = w.getnchannels(), w.getsampwidth(), w.getframerate(), w.getnframes()
            comptype = w.getcomptype()
            raw = w.readframes(frames)
    except wave.Error as exc:
        raise WavFormatError(f"{path}: encoding: {exc}") from None
    except EOFError:
        raise WavFormatError(f"{path}: chunks: truncated RIFF header") from None
    if comptype != "NONE":
        raise WavFormatError(f"{path}: encoding: expected PCM, got {comptype}")
    if width != 2:
        raise WavFormatError(f"{path}: sample width: expected 16-bit, got {8 * width}-bit")
    if channels != 1:
        raise WavFormatError(f"{path}: channels: expected mono, got {channels}")
    if rate != sample_rate_hz:
        raise WavFormatError(f"{path}: sample rate: expected {sample_rate_hz} Hz, got {rate} Hz")
    if len(raw) != frames * width:
        raise WavFormatError(f"{path}: data chunk: truncated, {len(raw)} of {frames * width} bytes present")
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0


def save_wav(path, samples, sample_rate_hz: int = 16000) -> None:
    """Write float samples in [-1, 1] (or int16 values) as 16-bit PCM mono."""
    x = np.asarray(samples)
    if x.dtype != np.int16:
        x = np.clip(np.round(x * 32768.0), -32768, 32767).astype(np.int16)
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate_hz)
        w.writeframes(x.astype("<i2").tobytes())


# --- contexts ---------------------------------------------------------------


def window_to_context(frames: np.ndarray, length: int = CONTEXT_FRAMES) -> np.ndarray:
    """Center-pad with zero bytes (extra frame on the right) or center-crop to ``length`` frames."""
    frames = np.asarray(frames, dtype=np.uint8)
    n = frames.shape[0]
    if n == 0:
        raise ValueError("cannot build a context from zero frames")
    if n == length:
        return frames.copy()
    if n > length:
        start = (n - length) // 2
        return frames[start : start + length].copy()
    left = (length - n) // 2
    out = np.zeros((length,) + frames.shape[1:], dtype=np.uint8)
    out[left : left + n] = frames
    return out


def audio_to_context(audio, cfg: FrontendConfig = DEFAULT_CONFIG) -> np.ndarray:
    return window_to_context(extract_log_mel(audio, cfg))


class FeatureStore:
    """Lazily computed 198x32 feature contexts keyed by entry path."""

    def __init__(self, cfg: FrontendConfig = DEFAULT_CONFIG):
        self.cfg = cfg
        self._cache: dict[str, np.ndarray] = {}

    def add(self, path: str, context: np.ndarray) -> None:
        self._cache[path] = np.asarray(context, dtype=np.uint8)

    def context(self, entry: ManifestEntry | str) -> np.ndarray:
        path = entry.path if isinstance(entry, ManifestEntry) else entry
        ctx = self._cache.get(path)
        if ctx is None:
            ctx = audio_to_context(load_wav(path, self.cfg.sample_rate_hz), self.cfg)
            self._cache[path] = ctx
        return ctx

    def stack(self, entries: Iterable[ManifestEntry]) -> np.ndarray:
        ctxs = [self.context(e) for e in entries]
        if not ctxs:
            return np.zeros((0, CONTEXT_FRAMES, self.cfg.num_mel_bins), dtype=np.uint8)
        return np.stack(ctxs)


# --- selection protocols ----------------------------------------------------


def words_in_order(entries: Iterable[ManifestEntry]) -> list[str]:
    return list(OrderedDict.fromkeys(e.label for e in entries))


def _by_word(entries: Sequence[ManifestEntry]) -> dict[str, list[ManifestEntry]]:
    groups: dict[str, list[ManifestEntry]] = {}
    for e in entries:
        groups.setdefault(e.label, []).append(e)
    return groups


def _sample(pool: list[ManifestEntry], n: int, rng: np.random.Generator) -> list[ManifestEntry]:
    idx = np.sort(rng.choice(len(pool), size=n, replace=False))
    return [pool[i] for i in idx]


def select_n_per_word(entries: Sequence[ManifestEntry], n: int, words: Sequence[str], seed: int) -> DatasetView:
    """Exactly ``n`` entries per word, sampled without replacement."""
    if n < 0:
        raise SelectionError(f"n must be >= 0, got {n}")
    groups = _by_word(entries)
    for w in words:
        have = len(groups.get(w, ()))
        if have < n:
            raise SelectionError(f"word {w!r} has {have} examples, {n} requested")
    rng = np.random.default_rng(seed)
    chosen: list[ManifestEntry] = []
    for w in words:
        chosen.extend(_sample(groups[w], n, rng) if n else [])
    return DatasetView(tuple(chosen), seed, f"n_per_word={n}")


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def mix_replacement(
    real_pool: Sequence[ManifestEntry],
    synthetic_pool: Sequence[ManifestEntry],
    fraction_real: float,
    seed: int,
) -> DatasetView:
    """Per word, replace round(fraction_real * count) synthetic examples with real ones.

    The synthetic pool fixes each word's count, so the view is always as large
    as the synthetic pool.
    """
    if not 0.0 <= fraction_real <= 1.0:
        raise SelectionError(f"fraction_real must be in [0, 1], got {fraction_real}")
    synth = _by_word(synthetic_pool)
    real = _by_word(real_pool)
    if set(synth) != set(real):
        raise SelectionError(
            f"real and synthetic pools cover different words: {sorted(set(synth) ^ set(real))}"
        )
    rng = np.random.default_rng(seed)
    chosen: list[ManifestEntry] = []
    for w in words_in_order(synthetic_pool):
        count = len(synth[w])
        n_real = _round_half_up(fraction_real * count)
        if len(real[w]) < n_real:
            raise SelectionError(f"word {w!r} has {len(real[w])} real examples, {n_real} requested")
        chosen.extend(_sample(real[w], n_real, rng))
        chosen.extend(_sample(synth[w], count - n_real, rng))
    return DatasetView(tuple(chosen), seed, f"fraction_real={fraction_real:g}")


def mix_augmentation(
    synthetic_pool: Sequence[ManifestEntry],
    real_entries: Sequence[ManifestEntry],
    n_real_per_word: int,
    seed: int,
) -> DatasetView:
    """The whole synthetic pool plus ``n_real_per_word`` real examples of each of its words."""
    words = words_in_order(synthetic_pool)
    extra = select_n_per_word(real_entries, n_real_per_word, words, seed)
    return DatasetView(tuple(synthetic_pool) + extra.entries, seed, f"synthetic+n_real={n_real_per_word}")


# --- Speech Commands --------------------------------------------------------


def speech_commands_manifest(root, validation_list=None, testing_list=None) -> list[ManifestEntry]:
    """Build a manifest from a Speech Commands directory tree.

    Files named in the validation/testing list files (paths relative to
    ``root``, one per line, as shipped with the dataset) go to those splits;
    everything else is train. ``_background_noise_`` is skipped.
    """
    root = Path(root)

    def _read_list(p):
        if p is None:
            return set()
        return {line.strip() for line in Path(p).read_text(encoding="utf-8").splitlines() if line.strip()}

    val = _read_list(validation_list if validation_list is not None else _default(root, "validation_list.txt"))
    test = _read_list(testing_list if testing_list is not None else _default(root, "testing_list.txt"))
    entries = []
    for word_dir in sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith("_")):
        for wav in sorted(word_dir.glob("*.wav")):
            rel = f"{word_dir.name}/{wav.name}"
            split = "test" if rel in test else "validation" if rel in val else "train"
            entries.append(ManifestEntry(str(wav), word_dir.name, "real", split))
    return entries


def _default(root: Path, name: str):
    p = root / name
    return p if p.exists() else None
