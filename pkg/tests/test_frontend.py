import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kwsembed.frontend import (
    FrontendConfig,
    build_mel_filterbank,
    extract_log_mel,
    filter_center_frequencies,
    hz_to_mel,
    num_frames,
    quantize_value,
)

CFG = FrontendConfig()


def test_hz_to_mel_values():
    assert hz_to_mel(0) == 0.0
    # frozen from mpmath at 30 digits: 2595*log10(1 + f/700)
    assert hz_to_mel(700) == pytest.approx(781.1728387, abs=0.01)
    assert hz_to_mel(3800) == pytest.approx(2097.0570594, abs=0.01)


def test_hz_to_mel_rejects_negative():
    with pytest.raises(ValueError):
        hz_to_mel(-1.0)


@given(st.floats(0, 8000), st.floats(0.01, 100))
def test_hz_to_mel_increasing(f, df):
    assert hz_to_mel(f + df) > hz_to_mel(f)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"fmin_hz": 4000.0},
        {"fmax_hz": 9000.0},
        {"fft_size": 256},
        {"log_floor": 0.0},
        {"sample_rate_hz": 8000},
    ],
)
def test_config_invariants(kwargs):
    with pytest.raises(ValueError):
        FrontendConfig(**kwargs)


def test_filterbank_shape_and_range():
    fb = build_mel_filterbank(CFG)
    assert fb.shape == (257, 32)
    assert fb.min() >= 0.0 and fb.max() <= 1.0
    np.testing.assert_allclose(fb.max(axis=0), 1.0)
    assert np.all(fb.sum(axis=0) > 0)


def test_filterbank_zero_below_band():
    fb = build_mel_filterbank(CFG)
    bin_hz = np.arange(257) * 16000 / 512
    assert np.all(fb[bin_hz < 60.0] == 0.0)
    assert np.all(fb[bin_hz > 3800.0] == 0.0)


def test_filterbank_peak_bin_is_nearest_center():
    fb = build_mel_filterbank(CFG)
    centers = filter_center_frequencies(CFG)
    assert np.all(np.diff(centers) > 0)
    # independent: edges equally spaced in HTK mel between 60 and 3800 Hz
    mels = np.linspace(2595 * math.log10(1 + 60 / 700), 2595 * math.log10(1 + 3800 / 700), 34)
    np.testing.assert_allclose(centers, 700 * (10 ** (mels[1:-1] / 2595) - 1))
    bin_hz = np.arange(257) * 16000 / 512
    peaks = bin_hz[np.argmax(fb, axis=0)]
    assert np.all(np.abs(peaks - centers) <= 16000 / 512)


def test_filterbank_too_few_bins():
    # 1000-1400 Hz holds only 13 bins of 31.25 Hz
    with pytest.raises(ValueError, match="FFT bins|covers no FFT bin"):
        build_mel_filterbank(FrontendConfig(fmin_hz=1000.0, fmax_hz=1400.0))


def test_silence_one_second():
    frames = extract_log_mel(np.zeros(16000))
    assert frames.shape == (98, 32)
    assert frames.dtype == np.uint8
    assert np.all(frames == 0)


def test_short_audio_gives_no_frames():
    assert extract_log_mel(np.zeros(399)).shape == (0, 32)
    assert extract_log_mel(np.zeros(400)).shape == (1, 32)


def test_sine_lands_in_nearest_filter():
    t = np.arange(16000) / 16000
    frames = extract_log_mel(np.sin(2 * np.pi * 1000 * t))
    expected = int(np.argmin(np.abs(filter_center_frequencies() - 1000.0)))
    assert np.all(np.argmax(frames, axis=1) == expected)


def test_full_scale_sine_energy_at_most_one():
    from kwsembed.frontend import log_mel_energies

    t = np.arange(16000) / 16000
    for f in (200.0, 1000.0, 3000.0):
        assert log_mel_energies(np.sin(2 * np.pi * f * t)).max() <= 0.0


def test_quantize_examples():
    assert quantize_value(-20.0) == 0
    assert quantize_value(-13.8155) == 0
    assert quantize_value(0.0) == 255
    assert quantize_value(3.0) == 255
    # (x - floor)/(ceil - floor) = 0.5 -> 127.5 -> half up
    assert quantize_value(-6.90775) == 128
    assert quantize_value(math.log(1e-6) / 2) == 128


@given(st.floats(-30, 5), st.floats(-30, 5))
def test_quantize_monotone(a, b):
    lo, hi = min(a, b), max(a, b)
    assert quantize_value(lo) <= quantize_value(hi)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 160000))
def test_frame_count_formula(n):
    expected = (n - 400) // 160 + 1 if n >= 400 else 0
    assert num_frames(n) == expected


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 4000))
def test_extract_frame_count(n):
    expected = (n - 400) // 160 + 1 if n >= 400 else 0
    assert extract_log_mel(np.zeros(n)).shape == (expected, 32)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_halving_never_raises_bytes(seed):
    audio = np.random.default_rng(seed).uniform(-1, 1, 4000)
    full = extract_log_mel(audio)
    half = extract_log_mel(0.5 * audio)
    assert np.all(half <= full)


def test_deterministic(rng):
    audio = rng.uniform(-1, 1, 8000)
    assert np.array_equal(extract_log_mel(audio), extract_log_mel(audio.copy()))
