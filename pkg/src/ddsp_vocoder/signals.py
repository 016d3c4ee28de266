"""Deterministic synthetic test signals.

:func:`speechlike` stands in for a recorded utterance in tests and in the
throughput benchmark: voiced stretches with a gliding fundamental and
vowel-like formant envelopes, fricative noise bursts, short pauses and a
low background noise floor.
"""

from __future__ import annotations

import numpy as np
from scipy import signal

from .audio import SAMPLE_RATE, AudioBuffer

# (F1, F2, F3) in Hz for a handful of vowels
_VOWELS = ((730, 1090, 2440), (270, 2290, 3010), (530, 1840, 2480), (570, 840, 2410), (440, 1020, 2240))


def tone(freq: float, duration: float, amplitude: float = 0.5, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    n = int(round(duration * sample_rate))
    return amplitude * np.sin(2.0 * np.pi * freq * np.arange(n) / sample_rate)


def _ramp(n: int, fade: int) -> np.ndarray:
    env = np.ones(n)
    fade = min(fade, n // 2)
    if fade > 0:
        r = 0.5 - 0.5 * np.cos(np.pi * np.arange(fade) / fade)
        env[:fade] = r
        env[n - fade :] = r[::-1]
    return env


def _formant_gain(freqs: np.ndarray, formants) -> np.ndarray:
    gain = np.full_like(freqs, 0.02)
    for i, fc in enumerate(formants):
        bw = 80.0 + 40.0 * i
        gain += (0.9**i) / (1.0 + ((freqs - fc) / bw) ** 2)
    return gain


def speechlike(duration: float = 2.5, seed: int = 0, sample_rate: int = SAMPLE_RATE,
               f0_range: tuple = (175.0, 255.0), noise_floor: float = 1e-3) -> AudioBuffer:
    """Syllable-like sequence of voiced and fricative segments, peak 0.5.

    ``noise_floor`` is the standard deviation of white background noise added
    everywhere; 0 leaves the pauses digitally silent.
    """
    rng = np.random.default_rng(seed)
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    lo, hi = f0_range
    mid, span = (lo + hi) / 2, (hi - lo) / 2
    f0 = mid + span * (0.6 * np.sin(2 * np.pi * 0.7 * t + rng.uniform(0, 6.3)) + 0.4 * np.sin(2 * np.pi * 2.3 * t))
    f0 = np.clip(f0 - 15.0 * t / max(duration, 1e-9), lo, hi)
    phase = 2.0 * np.pi * np.cumsum(f0) / sample_rate

    out = np.zeros(n)
    pos = int(0.05 * sample_rate)
    k_max = int(sample_rate / 2 / lo)
    while pos < n:
        kind = rng.choice(["vowel", "vowel", "fricative", "pause"])
        seg = int(sample_rate * {"vowel": rng.uniform(0.15, 0.3), "fricative": rng.uniform(0.06, 0.12),
                                 "pause": rng.uniform(0.04, 0.08)}[kind])
        seg = min(seg, n - pos)
        sl = slice(pos, pos + seg)
        if kind == "vowel":
            formants = _VOWELS[rng.integers(len(_VOWELS))]
            voiced = np.zeros(seg)
            for k in range(1, k_max + 1):
                fk = k * f0[sl]
                gain = _formant_gain(fk, formants) / k ** 0.7
                voiced += np.where(fk < sample_rate / 2, gain, 0.0) * np.sin(k * phase[sl])
            out[sl] += voiced * _ramp(seg, int(0.02 * sample_rate))
        elif kind == "fricative":
            sos = signal.butter(4, rng.uniform(2500, 4500), "highpass", fs=sample_rate, output="sos")
            burst = signal.sosfilt(sos, rng.standard_normal(seg))
            out[sl] += 0.35 * burst * _ramp(seg, int(0.01 * sample_rate))
        pos += seg
    out *= 0.5 / max(np.abs(out).max(), 1e-12)
    background = rng.standard_normal(n)
    out += noise_floor * background
    return AudioBuffer(out, sample_rate)
