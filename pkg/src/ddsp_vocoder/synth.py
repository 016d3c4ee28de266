"""Differentiable harmonic oscillator, filtered-noise generator and the control track.

All generators take numpy arrays or :class:`~ddsp_vocoder.autodiff.Tensor`
controls and return tensors, so a loss on the synthesized audio can be
backpropagated into whatever produced the controls.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .audio import SAMPLE_RATE
from .errors import ContractError, DimensionError, ManifestError
from .spectral import hann
from .tensorio import read_header, read_tensor, write_header, write_tensor
from .yin import HOP, PitchContour

F1_MIN = 165.0
N_NOISE_BINS = 101
UPSAMPLE = 8.5
CONTROLS_FORMAT = "ddsp-vocoder-controls"
CONTROLS_VERSION = 1


def harmonic_count(sample_rate: int = SAMPLE_RATE, f1_min: float = F1_MIN) -> int:
    """Harmonics needed to reach Nyquist from the lowest expected fundamental."""
    return math.ceil((sample_rate / 2) / f1_min)


N_HARMONICS = harmonic_count()


@dataclass(frozen=True)
class SynthConfig:
    sample_rate: int = SAMPLE_RATE
    f1_min: float = F1_MIN
    n_noise: int = N_NOISE_BINS
    rng_seed: int = 0

    @property
    def n_harmonics(self) -> int:
        return harmonic_count(self.sample_rate, self.f1_min)

    @property
    def noise_frame(self) -> int:
        return 2 * (self.n_noise - 1)


@dataclass
class ControlTrack:
    """Control variables at control rate (mel rate x 8.5).

    ``amplitude`` is frames x 1, ``harmonics`` frames x H with rows summing
    to one, ``noise_mags`` frames x M.  Fields may hold arrays or tensors.
    """

    amplitude: object
    harmonics: object
    noise_mags: object
    sample_rate: int = SAMPLE_RATE
    mel_hop: int = HOP
    upsample: float = UPSAMPLE
    audio_length: int | None = None
    extra: dict = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return self.amplitude.shape[0]

    @property
    def n_harmonics(self) -> int:
        return self.harmonics.shape[1]

    @property
    def n_noise(self) -> int:
        return self.noise_mags.shape[1]

    def arrays(self) -> "ControlTrack":
        """Copy with plain numpy arrays (detached from any tape)."""
        def raw(x):
            return np.array(x.data if isinstance(x, ad.Tensor) else x, dtype=np.float64)

        return ControlTrack(
            raw(self.amplitude), raw(self.harmonics), raw(self.noise_mags),
            self.sample_rate, self.mel_hop, self.upsample, self.audio_length, dict(self.extra),
        )

    def validate(self, atol: float = 1e-6) -> "ControlTrack":
        a, c, m = (np.asarray(x.data if isinstance(x, ad.Tensor) else x) for x in
                   (self.amplitude, self.harmonics, self.noise_mags))
        if a.ndim != 2 or a.shape[1] != 1 or c.ndim != 2 or m.ndim != 2:
            raise DimensionError(f"control shapes A {a.shape}, c {c.shape}, noise {m.shape} are not frames x channels")
        if not a.shape[0] == c.shape[0] == m.shape[0]:
            raise DimensionError(f"control tracks disagree on frame count: {a.shape[0]}, {c.shape[0]}, {m.shape[0]}")
        for name, x in (("amplitude", a), ("harmonics", c), ("noise_mags", m)):
            if not np.all(np.isfinite(x)) or np.any(x < 0):
                raise ContractError(f"{name} must be finite and nonnegative")
        if np.any(np.abs(c.sum(axis=1) - 1.0) > atol):
            raise ContractError("harmonic distribution rows must sum to 1")
        return self


def default_noise_hop(n_frames: int, out_len: int) -> float:
    """Audio samples per control frame, matching the endpoint-aligned interpolation grid."""
    if n_frames < 2:
        return float(out_len)
    return (out_len - 1) / (n_frames - 1)


def upsample_controls(track: ControlTrack, f0: PitchContour | np.ndarray, out_len: int):
    """Interpolate A, c (control rate) and f1 (mel rate) to one value per audio sample."""
    if track.audio_length is not None and track.audio_length != out_len:
        raise ContractError(f"out_len {out_len} differs from the track's audio length {track.audio_length}")
    f0 = f0.f0 if isinstance(f0, PitchContour) else np.asarray(f0, dtype=np.float64)
    if np.any(f0 <= 0):
        raise ContractError("f0 must be strictly positive everywhere; fill unvoiced frames first")
    amp = ad.linear_interp(ad.as_tensor(track.amplitude), out_len)
    harm = ad.linear_interp(ad.as_tensor(track.harmonics), out_len)
    f1 = ad.linear_interp(f0, out_len).data
    return amp, harm, f1


def harmonic_phases(f1: np.ndarray, n_harmonics: int, sample_rate: int) -> np.ndarray:
    """Masked ``sin(phi_k(n))`` for k = 1..H, shape n x H.

    The phase of the fundamental accumulates ``f1(i) / sample_rate`` cycles for
    i = 0..n; harmonics at or above Nyquist are zeroed.  Higher harmonics use
    the recurrence ``sin((k+1)x) = 2 cos(x) sin(kx) - sin((k-1)x)``.
    """
    theta = 2.0 * np.pi * (np.cumsum(f1 / sample_rate) % 1.0)
    rows = np.empty((n_harmonics, f1.shape[0]))
    rows[0] = np.sin(theta)
    if n_harmonics > 1:
        twice_cos = 2.0 * np.cos(theta)
        rows[1] = twice_cos * rows[0]
        for k in range(2, n_harmonics):
            np.multiply(twice_cos, rows[k - 1], out=rows[k])
            rows[k] -= rows[k - 2]
    out = rows.T
    if f1.max() * n_harmonics >= sample_rate / 2:
        k = np.arange(1, n_harmonics + 1, dtype=np.float64)
        out[f1[:, None] * k >= sample_rate / 2] = 0.0
    return out


def harmonic_oscillator(f1, amplitude, harmonics, sample_rate: int = SAMPLE_RATE) -> ad.Tensor:
    """Sum of harmonics ``A(n) c_k(n) sin(phi_k(n))``; differentiable in A and c, not f1."""
    f1 = np.asarray(f1, dtype=np.float64).reshape(-1)
    n = f1.shape[0]
    if np.any(f1 <= 0):
        raise ContractError("oscillator f1 must be strictly positive")
    harmonics = ad.as_tensor(harmonics)
    amplitude = ad.as_tensor(amplitude)
    if harmonics.shape[0] != n or amplitude.size != n:
        raise DimensionError(f"f1 has {n} samples but A has shape {amplitude.shape} and c {harmonics.shape}")
    if amplitude.data.ndim != 1:
        amplitude = ad.reshape(amplitude, (n,))
    phases = ad.Tensor(harmonic_phases(f1, harmonics.shape[1], sample_rate))
    return ad.mul(amplitude, ad.sum_axis(ad.mul(harmonics, phases), 1))


def noise_frames(n_frames: int, frame_len: int, rng_seed) -> np.ndarray:
    return np.random.default_rng(rng_seed).uniform(-1.0, 1.0, size=(n_frames, frame_len))


def filtered_noise(noise_mags, hop_samples: float, out_len: int, rng_seed=0) -> ad.Tensor:
    """White noise shaped per frame by real magnitude responses, then overlap-added.

    Each frame of ``2 (M - 1)`` uniform noise samples is Hann-windowed,
    transformed, multiplied bin-by-bin with its M magnitudes and transformed
    back.  Frame ``t`` is centred on sample ``round(t * hop_samples)`` and the
    sum is divided by the local sum of analysis windows.
    """
    mags = ad.as_tensor(noise_mags)
    if mags.data.ndim != 2:
        raise DimensionError(f"noise magnitudes must be frames x bins, got shape {mags.shape}")
    if hop_samples <= 0:
        raise ContractError(f"hop_samples must be positive, got {hop_samples}")
    n_frames, n_bins = mags.shape
    length = 2 * (n_bins - 1)
    half = length // 2
    window = hann(length)
    spectra = np.fft.rfft(noise_frames(n_frames, length, rng_seed) * window, axis=1)
    frames = np.fft.irfft(spectra * mags.data, n=length, axis=1)

    centers = np.round(np.arange(n_frames) * hop_samples).astype(np.int64)
    positions = centers[:, None] + np.arange(length)  # buffer index = sample index + half
    size = max(int(positions.max()) + 1, out_len + half)
    acc = np.bincount(positions.ravel(), weights=frames.ravel(), minlength=size)[half : half + out_len]
    wsum = np.bincount(positions.ravel(), weights=np.tile(window, n_frames), minlength=size)[half : half + out_len]
    covered = wsum > 1e-12
    scale = np.zeros(out_len)
    scale[covered] = 1.0 / wsum[covered]
    out = (acc * scale).astype(mags.data.dtype, copy=False)

    def vjp(g):
        full = np.zeros(size)
        full[half : half + out_len] = g * scale
        gspec = np.fft.rfft(full[positions], axis=1)
        weight = np.full(n_bins, 2.0 / length)
        weight[0] = weight[-1] = 1.0 / length
        return (np.real(spectra * np.conj(gspec)) * weight,)

    return ad.record_op(out, (mags,), vjp)


def mix(harmonic, noise) -> ad.Tensor:
    harmonic, noise = ad.as_tensor(harmonic), ad.as_tensor(noise)
    if harmonic.shape != noise.shape:
        raise ContractError(f"cannot mix signals of shapes {harmonic.shape} and {noise.shape}")
    return ad.add(harmonic, noise)


def synthesize(track: ControlTrack, f0, out_len: int, rng_seed=0) -> ad.Tensor:
    """Full generator chain: upsample controls, oscillator + filtered noise, sum."""
    amp, harm, f1 = upsample_controls(track, f0, out_len)
    voiced = harmonic_oscillator(f1, amp, harm, track.sample_rate)
    hop = default_noise_hop(track.n_frames, out_len)
    unvoiced = filtered_noise(track.noise_mags, hop, out_len, rng_seed)
    return mix(voiced, unvoiced)


def save_controls(directory, track: ControlTrack) -> None:
    os.makedirs(directory, exist_ok=True)
    plain = track.arrays()
    write_tensor(os.path.join(directory, "amplitude.dtf"), plain.amplitude)
    write_tensor(os.path.join(directory, "harmonics.dtf"), plain.harmonics)
    write_tensor(os.path.join(directory, "noise_mags.dtf"), plain.noise_mags)
    write_header(
        os.path.join(directory, "header.txt"),
        {
            "format": CONTROLS_FORMAT,
            "version": CONTROLS_VERSION,
            "sample_rate": plain.sample_rate,
            "mel_hop": plain.mel_hop,
            "upsample": plain.upsample,
            "control_rate_hz": plain.sample_rate / plain.mel_hop * plain.upsample,
            "n_frames": plain.n_frames,
            "n_harmonics": plain.n_harmonics,
            "n_noise": plain.n_noise,
            "noise_hop": default_noise_hop(plain.n_frames, plain.audio_length) if plain.audio_length else "",
            "audio_length": plain.audio_length if plain.audio_length is not None else "",
        },
    )


def load_controls(directory) -> ControlTrack:
    header = read_header(os.path.join(directory, "header.txt"))
    if header.get("format") != CONTROLS_FORMAT:
        raise ManifestError(f"{directory}: not a control-track directory")
    if header.get("version") != str(CONTROLS_VERSION):
        raise ManifestError(f"{directory}: unsupported control-track version {header.get('version')}")
    arrays = {}
    for name in ("amplitude", "harmonics", "noise_mags"):
        path = os.path.join(directory, f"{name}.dtf")
        if not os.path.exists(path):
            raise ManifestError(f"{directory}: missing tensor {name}.dtf")
        arrays[name] = read_tensor(path).astype(np.float64)
    try:
        audio_length = int(header["audio_length"]) if header.get("audio_length") else None
        track = ControlTrack(
            arrays["amplitude"], arrays["harmonics"], arrays["noise_mags"],
            sample_rate=int(header["sample_rate"]), mel_hop=int(header["mel_hop"]),
            upsample=float(header["upsample"]), audio_length=audio_length,
        )
        expected = (int(header["n_frames"]), int(header["n_harmonics"]), int(header["n_noise"]))
    except (KeyError, ValueError) as exc:
        raise ManifestError(f"{directory}: malformed header ({exc})") from exc
    if (track.n_frames, track.n_harmonics, track.n_noise) != expected:
        raise ManifestError(f"{directory}: tensor shapes do not match header {expected}")
    return track
