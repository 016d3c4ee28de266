"""Edits of pitch, loudness, rhythm and timbre applied to analyzed controls.

Every edit is a pure function returning new objects.  An edit script is a
text file with one edit per line, ``name arg``, applied in order::

    pitch_shift 3.0
    time_stretch 1.25
    pitch_flatten mean
"""

from __future__ import annotations

import os
import shlex
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError
from .synth import ControlTrack
from .tensorio import read_tensor
from .yin import PitchContour

STRETCH_RANGE = (0.25, 4.0)


def _values(f0) -> np.ndarray:
    return f0.f0 if isinstance(f0, PitchContour) else np.asarray(f0, dtype=np.float64)


def _like(f0, values):
    return f0.with_f0(values) if isinstance(f0, PitchContour) else values


def _resample(values: np.ndarray, n_out: int) -> np.ndarray:
    if values.shape[0] == n_out:
        return values.copy()
    if values.shape[0] == 1:
        return np.repeat(values, n_out, axis=0)
    return ad.linear_interp(values, n_out).data


def pitch_shift(f0, semitones: float):
    if not np.isfinite(semitones):
        raise ContractError(f"semitones must be finite, got {semitones}")
    return _like(f0, _values(f0) * 2.0 ** (semitones / 12.0))


def pitch_flatten(f0, target="mean", voiced=None):
    """Constant contour at ``target`` Hz, or at the mean of the voiced frames."""
    values = _values(f0)
    if isinstance(target, str):
        if target != "mean":
            raise ContractError(f"pitch_flatten target must be a frequency or 'mean', got {target!r}")
        mask = values > 0 if voiced is None else np.asarray(voiced, dtype=bool)
        if not mask.any():
            raise ContractError("no voiced frames to average")
        target = float(values[mask].mean())
    if not target > 0:
        raise ContractError(f"pitch_flatten target must be positive, got {target}")
    return _like(f0, np.full_like(values, float(target)))


def pitch_replace(f0_dst, f0_src):
    """Substitute the source contour, linearly resampled to the destination length."""
    src = _values(f0_src)
    if src.size == 0:
        raise ContractError("source pitch contour is empty")
    return _like(f0_dst, _resample(src, _values(f0_dst).shape[0]))


def _controls(track: ControlTrack) -> ControlTrack:
    return track.arrays()


def loudness_scale(track: ControlTrack, gain: float) -> ControlTrack:
    """Scale both the harmonic amplitude and the noise magnitudes by ``gain``."""
    if not (np.isfinite(gain) and gain > 0):
        raise ContractError(f"gain must be positive and finite, got {gain}")
    out = _controls(track)
    out.amplitude = out.amplitude * gain
    out.noise_mags = out.noise_mags * gain
    return out


def _normalize(c: np.ndarray) -> np.ndarray:
    return c / c.sum(axis=1, keepdims=True)


def time_stretch(track: ControlTrack, f0, factor: float):
    """Resample every control sequence and the pitch contour along time by ``factor``."""
    lo, hi = STRETCH_RANGE
    if not lo <= factor <= hi:
        raise ContractError(f"time_stretch factor must be in [{lo}, {hi}], got {factor}")
    out = _controls(track)
    frames = max(2, int(round(out.n_frames * factor)))
    out.amplitude = _resample(out.amplitude, frames)
    out.harmonics = _normalize(_resample(out.harmonics, frames))
    out.noise_mags = _resample(out.noise_mags, frames)
    if out.audio_length is not None:
        out.audio_length = int(round(out.audio_length * factor))
    values = _values(f0)
    return out, _like(f0, _resample(values, max(2, int(round(values.shape[0] * factor)))))


def timbre_replace(track_dst: ControlTrack, c_src) -> ControlTrack:
    """Swap in another harmonic distribution, resampled to the destination frames."""
    if isinstance(c_src, ControlTrack):
        c_src = c_src.harmonics
    c_src = np.asarray(c_src.data if isinstance(c_src, ad.Tensor) else c_src, dtype=np.float64)
    out = _controls(track_dst)
    if c_src.ndim != 2 or c_src.shape[1] != out.n_harmonics:
        raise ContractError(f"harmonic count mismatch: source shape {c_src.shape}, destination has {out.n_harmonics}")
    out.harmonics = _normalize(_resample(c_src, out.n_frames))
    return out


# ---------------------------------------------------------------- scripts


@dataclass(frozen=True)
class Edit:
    name: str
    arg: str

    def number(self) -> float:
        try:
            value = float(self.arg)
        except ValueError:
            raise ContractError(f"{self.name} expects a number, got {self.arg!r}") from None
        if not np.isfinite(value):
            raise ContractError(f"{self.name} argument must be finite")
        return value


EDIT_NAMES = ("pitch_shift", "pitch_flatten", "pitch_replace", "loudness_scale", "time_stretch", "timbre_replace")


def parse_script(text: str) -> list:
    edits = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = shlex.split(line)
        if parts[0] not in EDIT_NAMES:
            raise ContractError(f"line {lineno}: unknown edit {parts[0]!r}")
        if len(parts) != 2:
            raise ContractError(f"line {lineno}: {parts[0]} takes exactly one argument")
        edit = Edit(parts[0], parts[1])
        if edit.name in ("pitch_shift", "loudness_scale", "time_stretch"):
            edit.number()
        edits.append(edit)
    return edits


def read_script(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return parse_script(fh.read())


def _load_harmonics(path) -> np.ndarray:
    if os.path.isdir(path):
        path = os.path.join(path, "harmonics.dtf")
    return read_tensor(path).astype(np.float64)


def apply_script(edits, track: ControlTrack, f0, voiced=None):
    """Apply edits in order to ``(track, f0)``; ``voiced`` marks the originally voiced frames."""
    for edit in edits:
        if edit.name == "pitch_shift":
            f0 = pitch_shift(f0, edit.number())
        elif edit.name == "pitch_flatten":
            target = "mean" if edit.arg == "mean" else edit.number()
            f0 = pitch_flatten(f0, target, voiced)
        elif edit.name == "pitch_replace":
            f0 = pitch_replace(f0, read_tensor(edit.arg).astype(np.float64).reshape(-1))
        elif edit.name == "loudness_scale":
            track = loudness_scale(track, edit.number())
        elif edit.name == "time_stretch":
            factor = edit.number()
            track, f0 = time_stretch(track, f0, factor)
            if voiced is not None:
                voiced = _resample(np.asarray(voiced, dtype=np.float64), _values(f0).shape[0]) > 0.5
        elif edit.name == "timbre_replace":
            track = timbre_replace(track, _load_harmonics(edit.arg))
        else:
            raise ContractError(f"unknown edit {edit.name!r}")
    return track, f0
