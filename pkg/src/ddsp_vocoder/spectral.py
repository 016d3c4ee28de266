"""STFT magnitudes, mel spectrograms and the multi-resolution mel loss.

Framing is centred: ``fft_size // 2`` reflected samples are added at both
ends, so frame ``i`` is centred on sample ``i * hop`` and a signal of ``n``
samples yields ``n // hop + 1`` frames.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import autodiff as ad
from .audio import SAMPLE_RATE, AudioBuffer
from .errors import ConfigError, ContractError, InsufficientInputError

N_MELS = 80
FMIN = 0.0
FMAX = 8000.0
RESOLUTIONS = (2048, 1024, 512, 256, 128, 64)
DEFAULT_ALPHA = 1.0


@dataclass(frozen=True)
class MelConfig:
    fft_size: int = 1024
    hop: int = 256
    n_mels: int = N_MELS
    fmin: float = FMIN
    fmax: float = FMAX
    sample_rate: int = SAMPLE_RATE

    @classmethod
    def for_resolution(cls, fft_size: int, **kwargs) -> "MelConfig":
        return cls(fft_size=fft_size, hop=fft_size // 4, **kwargs)

    def validate(self) -> "MelConfig":
        n = self.fft_size
        if n < 4 or n & (n - 1):
            raise ConfigError(f"fft_size must be a power of two >= 4, got {n}")
        if self.hop * 4 != n:
            raise ConfigError(f"hop must be fft_size/4 (75% overlap), got hop={self.hop} for fft_size={n}")
        if self.n_mels < 1:
            raise ConfigError(f"n_mels must be >= 1, got {self.n_mels}")
        if not 0 <= self.fmin < self.fmax <= self.sample_rate / 2:
            raise ConfigError(
                f"need 0 <= fmin < fmax <= sample_rate/2, got fmin={self.fmin}, fmax={self.fmax}, "
                f"sample_rate={self.sample_rate}"
            )
        return self


@dataclass
class MelSpectrogram:
    values: np.ndarray  # frames x n_mels
    config: MelConfig

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


def _samples(audio) -> np.ndarray:
    if isinstance(audio, AudioBuffer):
        return audio.samples
    if isinstance(audio, ad.Tensor):
        return audio.data
    return np.asarray(audio, dtype=np.float64)


@functools.lru_cache(maxsize=32)
def hann(size: int) -> np.ndarray:
    """Periodic Hann window (constant overlap-add at 75% overlap)."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(size) / size)


@functools.lru_cache(maxsize=64)
def _pad_index(n: int, pad: int) -> np.ndarray:
    return np.pad(np.arange(n), pad, mode="reflect")


def frame_count(n_samples: int, hop: int) -> int:
    return n_samples // hop + 1


def _check_stft(n: int, fft_size: int, hop: int) -> None:
    if fft_size < 2 or fft_size & (fft_size - 1):
        raise ConfigError(f"fft_size must be a power of two, got {fft_size}")
    if hop < 1:
        raise ConfigError(f"hop must be >= 1, got {hop}")
    if n < 2:
        raise InsufficientInputError(f"STFT needs at least 2 samples, got {n}")


def _frames(x: np.ndarray, fft_size: int, hop: int) -> np.ndarray:
    padded = x[_pad_index(x.shape[0], fft_size // 2)]
    return sliding_window_view(padded, fft_size)[::hop]


def stft_magnitude(audio, fft_size: int = 1024, hop: int = 256) -> np.ndarray:
    """Hann-windowed, centre-padded STFT magnitudes, frames x (fft_size/2 + 1)."""
    x = _samples(audio)
    _check_stft(x.shape[0], fft_size, hop)
    return np.abs(np.fft.rfft(_frames(x, fft_size, hop) * hann(fft_size), axis=1))


def stft_magnitude_t(x: ad.Tensor, fft_size: int, hop: int) -> ad.Tensor:
    """Differentiable :func:`stft_magnitude` of a 1-D tensor."""
    x = ad.as_tensor(x)
    n = x.shape[0]
    _check_stft(n, fft_size, hop)
    window = hann(fft_size)
    spec = np.fft.rfft(_frames(x.data, fft_size, hop) * window, axis=1)
    mag = np.abs(spec)

    def vjp(g):
        with np.errstate(invalid="ignore", divide="ignore"):
            v = np.where(mag > 0, g * spec / mag, 0.0)
        v[:, 1 : fft_size // 2] *= 0.5
        frame_grads = np.fft.irfft(v, n=fft_size, axis=1) * (fft_size * window)
        padded = np.zeros(n + 2 * (fft_size // 2))
        if fft_size % hop == 0:
            stride = fft_size // hop
            for j in range(stride):
                block = frame_grads[j::stride].reshape(-1)
                padded[j * hop : j * hop + block.shape[0]] += block
        else:
            starts = np.arange(frame_grads.shape[0]) * hop
            np.add.at(padded, starts[:, None] + np.arange(fft_size), frame_grads)
        return (np.bincount(_pad_index(n, fft_size // 2), weights=padded, minlength=n),)

    return ad.record_op(mag.astype(x.data.dtype, copy=False), (x,), vjp)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(config: MelConfig) -> np.ndarray:
    """``n_mels + 2`` frequencies in Hz: lower edge, the filter centres, upper edge."""
    return mel_to_hz(np.linspace(hz_to_mel(config.fmin), hz_to_mel(config.fmax), config.n_mels + 2))


def mel_centers(config: MelConfig) -> np.ndarray:
    return mel_band_edges(config)[1:-1]


def _triangle_cdf(f, lo, mid, hi):
    """Integral of a unit-peak triangle (lo, mid, hi) from -inf to f."""
    f = np.clip(f, lo, hi)
    rising = (np.minimum(f, mid) - lo) ** 2 / (2.0 * (mid - lo))
    falling = np.where(f > mid, (hi - mid) / 2.0 - (hi - f) ** 2 / (2.0 * (hi - mid)), 0.0)
    return rising + falling


@functools.lru_cache(maxsize=32)
def mel_filterbank(config: MelConfig) -> np.ndarray:
    """Triangular mel filters, n_mels x (fft_size/2 + 1), each row summing to 1.

    Each FFT bin receives the share of the triangle's area that falls inside
    its band ``[(k - 1/2) df, (k + 1/2) df]``.  Narrow low-frequency triangles
    at short FFT sizes therefore still map onto the bin that contains them
    instead of coming out empty.
    """
    config.validate()
    n_bins = config.fft_size // 2 + 1
    df = config.sample_rate / config.fft_size
    edges = mel_band_edges(config)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    bounds = (np.arange(n_bins + 1) - 0.5) * df
    cdf = _triangle_cdf(bounds[None, :], lo, mid, hi)
    weights = np.diff(cdf, axis=1) / ((hi - lo) / 2.0)
    weights.setflags(write=False)
    return weights


def mel_spectrogram(audio, config: MelConfig = MelConfig()) -> MelSpectrogram:
    config.validate()
    mag = stft_magnitude(audio, config.fft_size, config.hop)
    return MelSpectrogram(mag @ mel_filterbank(config).T, config)


def mel_spectrogram_t(x: ad.Tensor, config: MelConfig) -> ad.Tensor:
    """Differentiable mel spectrogram values (frames x n_mels)."""
    config.validate()
    mag = stft_magnitude_t(x, config.fft_size, config.hop)
    return ad.dense(mag, ad.Tensor(mel_filterbank(config).T))


def mel_distance(s, s_hat, alpha: float = DEFAULT_ALPHA) -> ad.Tensor:
    """``sum|S - S_hat| + alpha * sum|log S - log S_hat|`` with log inputs floored at 1e-5."""
    s, s_hat = ad.as_tensor(s), ad.as_tensor(s_hat)
    linear = ad.sum_all(ad.abs_(ad.sub(s, s_hat)))
    if alpha == 0:
        return linear
    logs = ad.sum_all(ad.abs_(ad.sub(ad.log(s), ad.log(s_hat))))
    return ad.add(linear, ad.mul(logs, float(alpha)))


def multi_scale_mel_loss(
    y,
    y_hat,
    alpha: float = DEFAULT_ALPHA,
    resolutions=RESOLUTIONS,
    sample_rate: int = SAMPLE_RATE,
) -> ad.Tensor:
    """Sum over FFT sizes of the L1 and log-L1 distances between mel spectrograms.

    Every resolution uses hop = fft_size/4 and the same 80-band 0-8000 Hz mel
    scale.  Differentiable with respect to whichever argument is a
    grad-enabled :class:`Tensor`.
    """
    if alpha < 0:
        raise ContractError(f"alpha must be >= 0, got {alpha}")
    y = y if isinstance(y, ad.Tensor) else ad.Tensor(_samples(y))
    y_hat = y_hat if isinstance(y_hat, ad.Tensor) else ad.Tensor(_samples(y_hat))
    if y.shape != y_hat.shape:
        raise ContractError(f"loss inputs must have equal lengths, got {y.shape} and {y_hat.shape}")
    total = None
    base = MelConfig(sample_rate=sample_rate)
    for size in resolutions:
        config = replace(base, fft_size=int(size), hop=int(size) // 4)
        term = mel_distance(mel_spectrogram_t(y, config), mel_spectrogram_t(y_hat, config), alpha)
        total = term if total is None else ad.add(total, term)
    return total


def write_mel_csv(path, mel) -> None:
    values = mel.values if isinstance(mel, MelSpectrogram) else np.asarray(mel)
    header = ",".join(f"mel_{i}" for i in range(values.shape[1]))
    np.savetxt(path, values, delimiter=",", header=header, comments="", fmt="%.9g")
