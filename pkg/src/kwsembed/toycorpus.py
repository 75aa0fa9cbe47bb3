"""Procedurally generated toy keyword corpus.

A toy "word" is a fixed sequence of three phones drawn from a shared
inventory (formant pairs, glides, noise bursts). Utterances vary in pitch,
tempo, onset, level and noise. The ``synthetic`` variant is rendered clean,
with near-constant pitch and tempo and a systematic formant shift, standing
in for TTS audio that is consistent but acoustically off-domain.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from kwsembed.data import ManifestEntry, save_wav, write_manifest

SAMPLE_RATE = 16000
CLIP_SECONDS = 1.0
PHONES_PER_WORD = 3


@dataclass(frozen=True)
class Phone:
    kind: str  # "vowel" | "glide" | "burst"
    f1: float
    f2: float


@dataclass(frozen=True)
class Vocabulary:
    phones: tuple[Phone, ...]
    words: tuple[tuple[int, ...], ...]

    @property
    def num_words(self) -> int:
        return len(self.words)


def make_vocabulary(num_words: int, num_phones: int = 8, seed: int = 1234) -> Vocabulary:
    """Random phone inventory and word spellings.

    Words come in pairs spelled with the same three phones in a different
    order, so telling them apart needs temporal structure, not just which
    phones occur.
    """
    rng = np.random.default_rng(seed)
    kinds = ["vowel", "glide", "burst"]
    phones = []
    for i in range(num_phones):
        kind = kinds[i % 3]
        f1 = float(np.exp(rng.uniform(np.log(250), np.log(900))))
        f2 = float(np.exp(rng.uniform(np.log(1100), np.log(3300))))
        phones.append(Phone(kind, f1, f2))
    words: list[tuple[int, ...]] = []
    used: set[frozenset] = set()
    attempts = 0
    while len(words) < num_words:
        attempts += 1
        if attempts > 100000:
            raise ValueError(f"cannot spell {num_words} distinct words from {num_phones} phones")
        w = tuple(int(p) for p in rng.choice(num_phones, PHONES_PER_WORD, replace=False))
        if frozenset(w) in used:
            continue
        used.add(frozenset(w))
        words.append(w)
        if len(words) < num_words:
            # same phones, rotated: a minimal-pair partner
            words.append(w[1:] + w[:1])
    return Vocabulary(tuple(phones), tuple(words))


def _phone_audio(phone: Phone, n: int, scale1: float, scale2: float, rng: np.random.Generator, clean: bool) -> np.ndarray:
    t = np.arange(n) / SAMPLE_RATE
    env = np.sin(np.pi * np.arange(n) / max(n - 1, 1)) ** 2
    f1, f2 = phone.f1 * scale1, phone.f2 * scale2
    if phone.kind == "vowel":
        vib = 0.0 if clean else 0.01 * np.sin(2 * np.pi * rng.uniform(4, 7) * t)
        ph1 = 2 * np.pi * np.cumsum(f1 * (1 + vib)) / SAMPLE_RATE
        ph2 = 2 * np.pi * np.cumsum(f2 * (1 + vib)) / SAMPLE_RATE
        sig = np.sin(ph1) + 0.6 * np.sin(ph2)
    elif phone.kind == "glide":
        f = np.linspace(f1, f2, n)
        sig = np.sin(2 * np.pi * np.cumsum(f) / SAMPLE_RATE) + 0.4 * np.sin(4 * np.pi * np.cumsum(f) / SAMPLE_RATE)
    else:
        noise = rng.standard_normal(n)
        spec = np.fft.rfft(noise)
        freqs = np.fft.rfftfreq(n, 1 / SAMPLE_RATE)
        bw = 0.15 * f2
        spec *= np.exp(-0.5 * ((freqs - f2) / bw) ** 2) + 0.5 * np.exp(-0.5 * ((freqs - f1) / (0.2 * f1)) ** 2)
        sig = np.fft.irfft(spec, n)
        sig /= np.max(np.abs(sig)) + 1e-9
    return env * sig


def render_word(vocab: Vocabulary, word: int, variant: str, rng: np.random.Generator) -> np.ndarray:
    """One 1-second clip of ``word`` in the ``real`` or ``synthetic`` acoustic variant."""
    return render_phones(vocab, vocab.words[word], variant, rng)


def render_phones(vocab: Vocabulary, spelling, variant: str, rng: np.random.Generator) -> np.ndarray:
    """Like :func:`render_word` for an arbitrary phone sequence."""
    if variant not in ("real", "synthetic"):
        raise ValueError(f"variant must be 'real' or 'synthetic', got {variant!r}")
    clean = variant == "synthetic"
    n_total = int(SAMPLE_RATE * CLIP_SECONDS)
    if clean:
        s1 = s2 = 1.08 * rng.uniform(0.99, 1.01)
        tempo = rng.uniform(0.97, 1.03)
        level = 0.3
    else:
        # speaker: independent scaling of the two formant regions
        s1 = float(np.exp(rng.uniform(np.log(0.8), np.log(1.25))))
        s2 = float(np.exp(rng.uniform(np.log(0.8), np.log(1.25))))
        tempo = rng.uniform(0.75, 1.25)
        level = rng.uniform(0.08, 0.5)
    pieces = []
    for p in spelling:
        d = int(SAMPLE_RATE * 0.18 * tempo * (1.0 if clean else rng.uniform(0.8, 1.2)))
        j1, j2 = (1.0, 1.0) if clean else np.exp(rng.uniform(np.log(0.93), np.log(1.07), 2))
        pieces.append(_phone_audio(vocab.phones[p], d, s1 * j1, s2 * j2, rng, clean))
    speech = np.concatenate(pieces)[:n_total]
    if not clean:
        # spectral tilt: first-order pre/de-emphasis
        a = rng.uniform(-0.9, 0.9)
        speech = speech + a * np.concatenate([[0.0], speech[:-1]])
    slack = n_total - speech.size
    onset = slack // 2 if clean else int(rng.integers(0, slack + 1))
    out = np.zeros(n_total)
    out[onset : onset + speech.size] = level * speech / (np.max(np.abs(speech)) + 1e-9)
    if not clean:
        # background babble: stray phones from the shared inventory at lower level
        for _ in range(int(rng.integers(0, 4))):
            p = int(rng.integers(len(vocab.phones)))
            d = int(SAMPLE_RATE * rng.uniform(0.1, 0.25))
            at = int(rng.integers(0, n_total - d))
            gain = level * rng.uniform(0.2, 0.6)
            b1, b2 = np.exp(rng.uniform(np.log(0.8), np.log(1.25), 2))
            out[at : at + d] += gain * _phone_audio(vocab.phones[p], d, b1, b2, rng, False)
        snr_db = rng.uniform(0, 20)
        noise_rms = level / np.sqrt(2) / 10 ** (snr_db / 20)
        out += noise_rms * rng.standard_normal(n_total)
    return np.clip(out, -1.0, 1.0)


def word_name(i: int) -> str:
    return f"w{i:02d}"


def generate_audio(
    vocab: Vocabulary,
    words: list[int],
    per_word: int,
    variant: str,
    seed: int,
) -> tuple[list[str], np.ndarray]:
    """Labels and (N, 16000) audio, word-major order."""
    rng = np.random.default_rng(seed)
    labels, clips = [], []
    for w in words:
        for _ in range(per_word):
            labels.append(word_name(w))
            clips.append(render_word(vocab, w, variant, rng))
    return labels, np.array(clips).reshape(len(clips), int(SAMPLE_RATE * CLIP_SECONDS))


FILLER_LABEL = "other"


def generate_filler(vocab: Vocabulary, count: int, variant: str, seed: int) -> tuple[list[str], np.ndarray]:
    """Non-keyword speech: random phone strings that spell no vocabulary word."""
    rng = np.random.default_rng(seed)
    words = set(vocab.words)
    clips = []
    while len(clips) < count:
        spelling = tuple(int(p) for p in rng.choice(len(vocab.phones), PHONES_PER_WORD, replace=False))
        if spelling in words:
            continue
        clips.append(render_phones(vocab, spelling, variant, rng))
    return [FILLER_LABEL] * count, np.array(clips).reshape(count, int(SAMPLE_RATE * CLIP_SECONDS))


def generate_corpus(
    out_dir,
    num_words: int = 8,
    train_per_word: int = 200,
    test_per_word: int = 50,
    synthetic_per_word: int = 0,
    seed: int = 0,
    vocab_seed: int = 1234,
) -> list[ManifestEntry]:
    """Write toy WAVs under ``out_dir`` plus ``manifest.csv`` (relative paths); returns the entries."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab = make_vocabulary(num_words, seed=vocab_seed)
    entries: list[ManifestEntry] = []
    plan = [("real", "train", train_per_word), ("real", "test", test_per_word), ("synthetic", "train", synthetic_per_word)]
    for k, (variant, split, count) in enumerate(plan):
        if count == 0:
            continue
        labels, audio = generate_audio(vocab, list(range(num_words)), count, variant, seed * 1000 + k)
        for i, (label, clip) in enumerate(zip(labels, audio)):
            rel = f"{variant}/{split}/{label}_{i:05d}.wav"
            (out / rel).parent.mkdir(parents=True, exist_ok=True)
            save_wav(out / rel, clip)
            entries.append(ManifestEntry(rel, label, variant, split))
    write_manifest(entries, out / "manifest.csv")
    return entries
