"""Log-mel feature frontend: 32 mel bins over 60-3800 Hz, 8-bit quantized, one frame per 10 ms.

Pipeline per frame: Hann window -> |rfft|^2 (normalized so a full-scale sine
carries unit energy) -> triangular mel filterbank -> ln(E + 1e-6) -> byte.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

LOG_OFFSET = 1e-6


@dataclass(frozen=True)
class FrontendConfig:
    sample_rate_hz: int = 16000
    window_ms: int = 25
    hop_ms: int = 10
    fft_size: int = 512
    num_mel_bins: int = 32
    fmin_hz: float = 60.0
    fmax_hz: float = 3800.0
    log_floor: float = math.log(LOG_OFFSET)
    log_ceil: float = 0.0

    def __post_init__(self):
        if self.sample_rate_hz != 16000:
            raise ValueError(f"sample_rate_hz must be 16000, got {self.sample_rate_hz}")
        if not 0 <= self.fmin_hz < self.fmax_hz <= self.sample_rate_hz / 2:
            raise ValueError(
                f"need 0 <= fmin_hz < fmax_hz <= {self.sample_rate_hz / 2}, "
                f"got fmin_hz={self.fmin_hz} fmax_hz={self.fmax_hz}"
            )
        if self.hop_ms <= 0 or self.window_ms <= 0:
            raise ValueError("window_ms and hop_ms must be positive")
        if self.fft_size < self.window_samples:
            raise ValueError(
                f"fft_size {self.fft_size} is shorter than the window ({self.window_samples} samples)"
            )
        if self.num_mel_bins < 1:
            raise ValueError("num_mel_bins must be >= 1")
        if not self.log_floor < self.log_ceil:
            raise ValueError(f"log_floor {self.log_floor} must be < log_ceil {self.log_ceil}")

    @property
    def window_samples(self) -> int:
        return self.window_ms * self.sample_rate_hz // 1000

    @property
    def hop_samples(self) -> int:
        return self.hop_ms * self.sample_rate_hz // 1000


DEFAULT_CONFIG = FrontendConfig()


def hz_to_mel(f):
    """HTK mel scale. Accepts scalars or arrays; negative input raises ValueError."""
    f_arr = np.asarray(f, dtype=np.float64)
    if np.any(f_arr < 0):
        raise ValueError(f"frequency must be non-negative, got {f}")
    mel = 2595.0 * np.log10(1.0 + f_arr / 700.0)
    return float(mel) if mel.ndim == 0 else mel


def mel_to_hz(m):
    m_arr = np.asarray(m, dtype=np.float64)
    hz = 700.0 * (10.0 ** (m_arr / 2595.0) - 1.0)
    return float(hz) if hz.ndim == 0 else hz


def mel_edges_hz(cfg: FrontendConfig = DEFAULT_CONFIG) -> np.ndarray:
    """num_mel_bins + 2 filter edge frequencies, equally spaced on the mel scale."""
    mels = np.linspace(hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz), cfg.num_mel_bins + 2)
    return mel_to_hz(mels)


def filter_center_frequencies(cfg: FrontendConfig = DEFAULT_CONFIG) -> np.ndarray:
    return mel_edges_hz(cfg)[1:-1]


def build_mel_filterbank(cfg: FrontendConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Return a (fft_size // 2 + 1, num_mel_bins) matrix of triangular filters.

    Each filter is scaled so its largest weight (at the bin closest to its
    center) is exactly 1.0.
    """
    return _filterbank(cfg).copy()


@lru_cache(maxsize=8)
def _filterbank(cfg: FrontendConfig) -> np.ndarray:
    n_bins = cfg.fft_size // 2 + 1
    bin_hz = np.arange(n_bins) * cfg.sample_rate_hz / cfg.fft_size
    in_band = np.count_nonzero((bin_hz >= cfg.fmin_hz) & (bin_hz <= cfg.fmax_hz))
    if in_band < cfg.num_mel_bins:
        raise ValueError(
            f"only {in_band} FFT bins fall in [{cfg.fmin_hz}, {cfg.fmax_hz}] Hz, "
            f"fewer than {cfg.num_mel_bins} mel filters"
        )
    edges = mel_edges_hz(cfg)
    lo, mid, hi = edges[:-2], edges[1:-1], edges[2:]
    f = bin_hz[:, None]
    rising = (f - lo) / (mid - lo)
    falling = (hi - f) / (hi - mid)
    fb = np.clip(np.minimum(rising, falling), 0.0, None)
    peaks = fb.max(axis=0)
    if np.any(peaks <= 0):
        empty = int(np.argmin(peaks))
        raise ValueError(f"mel filter {empty} covers no FFT bin; increase fft_size")
    fb = fb / peaks
    fb.setflags(write=False)
    return fb


@lru_cache(maxsize=8)
def _window(cfg: FrontendConfig) -> tuple[np.ndarray, float]:
    n = cfg.window_samples
    # periodic Hann
    w = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)
    # one-sided power of a unit-amplitude sine sums to ~fft_size * sum(w^2) / 4 (Parseval)
    scale = cfg.fft_size * float(np.sum(w * w)) / 4.0
    w.setflags(write=False)
    return w, scale


def num_frames(num_samples: int, cfg: FrontendConfig = DEFAULT_CONFIG) -> int:
    if num_samples < cfg.window_samples:
        return 0
    return (num_samples - cfg.window_samples) // cfg.hop_samples + 1


def log_mel_energies(audio, cfg: FrontendConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Unquantized natural-log mel energies, shape (frames, num_mel_bins)."""
    x = np.asarray(audio, dtype=np.float64).reshape(-1)
    n = num_frames(x.size, cfg)
    if n == 0:
        return np.zeros((0, cfg.num_mel_bins))
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.window_samples)[:: cfg.hop_samples][:n]
    window, scale = _window(cfg)
    spec = np.fft.rfft(frames * window, n=cfg.fft_size, axis=1)
    power = (spec.real**2 + spec.imag**2) / scale
    mel = power @ _filterbank(cfg)
    return np.log(mel + LOG_OFFSET)


def quantize_value(x, cfg: FrontendConfig = DEFAULT_CONFIG):
    """Map log-mel values to bytes: round-half-up of 255 * clamp((x - floor) / (ceil - floor), 0, 1)."""
    x_arr = np.asarray(x, dtype=np.float64)
    unit = np.clip((x_arr - cfg.log_floor) / (cfg.log_ceil - cfg.log_floor), 0.0, 1.0)
    q = np.floor(255.0 * unit + 0.5).astype(np.uint8)
    return int(q) if q.ndim == 0 else q


def extract_log_mel(audio, cfg: FrontendConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Quantized log-mel frames as a (frames, num_mel_bins) uint8 array.

    Audio shorter than one window gives zero frames.
    """
    return quantize_value(log_mel_energies(audio, cfg), cfg).reshape(-1, cfg.num_mel_bins)
