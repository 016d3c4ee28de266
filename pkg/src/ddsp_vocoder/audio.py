"""16-bit PCM WAV input/output and training-segment extraction."""

from __future__ import annotations

import wave
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, RateMismatchError, UnsupportedFormatError

SAMPLE_RATE = 22050
PCM_SCALE = 32768.0


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


def read_wav(path, expected_rate: int | None = SAMPLE_RATE) -> AudioBuffer:
    """Load a PCM16 WAV file as a mono buffer scaled by 1/32768.

    Multi-channel files are averaged to mono.  Files at any rate other than
    ``expected_rate`` are rejected since no resampler is included.
    """
    try:
        with wave.open(str(path), "rb") as wav:
            channels = wav.getnchannels()
            width = wav.getsampwidth()
            rate = wav.getframerate()
            raw = wav.readframes(wav.getnframes())
    except wave.Error as exc:
        raise UnsupportedFormatError(f"{path}: only 16-bit PCM WAV is supported ({exc})") from exc
    except EOFError as exc:
        raise UnsupportedFormatError(f"{path}: truncated or empty WAV file") from exc
    if width != 2:
        raise UnsupportedFormatError(f"{path}: only 16-bit PCM WAV is supported, file uses {8 * width}-bit samples")
    if expected_rate is not None and rate != expected_rate:
        raise RateMismatchError(
            f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz (no resampler is included; resample the file first)"
        )
    ints = np.frombuffer(raw, dtype="<i2").astype(np.float64)
    if channels > 1:
        ints = ints.reshape(-1, channels).mean(axis=1)
    return AudioBuffer(ints / PCM_SCALE, rate)


def quantize(samples) -> np.ndarray:
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0 - 1.0 / PCM_SCALE)
    return np.clip(np.round(x * PCM_SCALE), -32768, 32767).astype("<i2")


def write_wav(buffer: AudioBuffer, path) -> None:
    """Write a mono PCM16 file, clamping samples to [-1, 1 - 1/32768]."""
    if buffer.sample_rate <= 0:
        raise ContractError(f"sample_rate must be positive, got {buffer.sample_rate}")
    with wave.open(str(path), "wb") as wav:
        wav.setnchannels(1)
        wav.setsampwidth(2)
        wav.setframerate(int(buffer.sample_rate))
        wav.writeframes(quantize(buffer.samples).tobytes())


def random_segment(buffer: AudioBuffer, length: int, rng_seed) -> AudioBuffer:
    """Contiguous ``length``-sample slice at a seeded uniform offset, zero-padded if short."""
    if length < 1:
        raise ContractError(f"segment length must be >= 1, got {length}")
    n = len(buffer)
    if n <= length:
        out = np.zeros(length)
        out[:n] = buffer.samples
        return AudioBuffer(out, buffer.sample_rate)
    start = int(np.random.default_rng(rng_seed).integers(0, n - length + 1))
    return AudioBuffer(buffer.samples[start : start + length].copy(), buffer.sample_rate)
