"""YIN fundamental-frequency tracking on the mel analysis frame grid."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import SAMPLE_RATE, AudioBuffer
from .errors import ContractError, InsufficientInputError
from .spectral import _frames, _samples

THRESHOLD = 0.1
FMIN_SEARCH = 65.0
FMAX_SEARCH = 2093.0
FRAME_SIZE = 1024
HOP = 256


@dataclass
class PitchContour:
    f0: np.ndarray  # Hz per frame, 0 = unvoiced
    frame_size: int = FRAME_SIZE
    hop: int = HOP
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.f0 = np.asarray(self.f0, dtype=np.float64).reshape(-1)

    def __len__(self):
        return self.f0.shape[0]

    @property
    def voiced(self) -> np.ndarray:
        return self.f0 > 0

    def with_f0(self, f0) -> "PitchContour":
        return PitchContour(f0, self.frame_size, self.hop, self.sample_rate)


def difference_function(frame, tau_max: int) -> np.ndarray:
    """Squared difference d(tau) for tau = 0..tau_max over a fixed window.

    Every lag uses the same ``len(frame) - tau_max`` summation terms.
    """
    x = np.asarray(frame, dtype=np.float64)
    width = x.shape[0]
    if not 0 < tau_max < width:
        raise ContractError(f"tau_max must be in (0, {width}), got {tau_max}")
    span = width - tau_max
    head = x[:span]
    energy = np.concatenate([[0.0], np.cumsum(x * x)])
    shifted = energy[np.arange(tau_max + 1) + span] - energy[: tau_max + 1]
    cross = np.correlate(x[: span + tau_max], head, mode="valid")
    d = head @ head + shifted - 2.0 * cross
    d[0] = 0.0
    return np.maximum(d, 0.0)


def cmnd(d) -> np.ndarray:
    """Cumulative mean normalised difference; 0/0 is taken as 1."""
    d = np.asarray(d, dtype=np.float64)
    out = np.ones_like(d)
    running = np.cumsum(d[1:])
    tau = np.arange(1, d.shape[0])
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = d[1:] * tau / running
    out[1:] = np.where(running > 0, ratio, 1.0)
    return out


def lag_range(sample_rate: int, fmin_search: float, fmax_search: float) -> tuple[int, int]:
    return int(np.floor(sample_rate / fmax_search)), int(np.ceil(sample_rate / fmin_search))


def yin_frame(
    frame,
    threshold: float = THRESHOLD,
    fmin_search: float = FMIN_SEARCH,
    fmax_search: float = FMAX_SEARCH,
    sample_rate: int = SAMPLE_RATE,
) -> float:
    """Estimate f0 in Hz for one frame, or 0.0 when no dip falls under ``threshold``."""
    if not 0 < threshold < 1:
        raise ContractError(f"threshold must be in (0, 1), got {threshold}")
    tau_min, tau_max = lag_range(sample_rate, fmin_search, fmax_search)
    frame = np.asarray(frame, dtype=np.float64)
    if not 2 <= tau_min < tau_max < frame.shape[0] - 1:
        raise ContractError(
            f"search range {fmin_search}-{fmax_search} Hz gives lags {tau_min}-{tau_max}, "
            f"which do not fit a {frame.shape[0]}-sample frame"
        )
    dn = cmnd(difference_function(frame, tau_max))
    below = np.flatnonzero(dn[tau_min:tau_max] < threshold)
    if below.size == 0:
        return 0.0
    tau = tau_min + int(below[0])
    while tau + 1 < tau_max and dn[tau + 1] < dn[tau]:
        tau += 1
    a, b, c = dn[tau - 1], dn[tau], dn[tau + 1]
    curvature = a - 2.0 * b + c
    shift = 0.5 * (a - c) / curvature if curvature > 0 else 0.0
    f0 = sample_rate / (tau + shift)
    if not fmin_search <= f0 <= fmax_search:
        return 0.0
    return float(f0)


def track(
    audio,
    threshold: float = THRESHOLD,
    fmin_search: float = FMIN_SEARCH,
    fmax_search: float = FMAX_SEARCH,
    frame_size: int = FRAME_SIZE,
    hop: int = HOP,
    sample_rate: int | None = None,
) -> PitchContour:
    """Per-frame YIN with the same centred framing as the mel analysis."""
    if sample_rate is None:
        sample_rate = audio.sample_rate if isinstance(audio, AudioBuffer) else SAMPLE_RATE
    x = _samples(audio)
    if x.shape[0] < 2:
        raise InsufficientInputError(f"pitch tracking needs at least 2 samples, got {x.shape[0]}")
    frames = _frames(x, frame_size, hop)
    f0 = np.array([yin_frame(fr, threshold, fmin_search, fmax_search, sample_rate) for fr in frames])
    return PitchContour(f0, frame_size, hop, sample_rate)


def fill_unvoiced(contour: PitchContour) -> PitchContour:
    """Linearly bridge unvoiced gaps; hold the nearest voiced value at the edges."""
    voiced = contour.voiced
    if not voiced.any():
        raise ContractError("cannot fill a pitch contour with no voiced frames")
    idx = np.arange(len(contour))
    filled = np.interp(idx, idx[voiced], contour.f0[voiced])
    return contour.with_f0(filled)


def write_contour_csv(path, contour: PitchContour) -> None:
    rows = np.column_stack([np.arange(len(contour)), contour.f0])
    np.savetxt(path, rows, delimiter=",", header="frame_index,f0_hz", comments="", fmt=["%d", "%.6f"])
