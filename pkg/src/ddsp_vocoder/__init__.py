"""Differentiable harmonic-plus-noise speech vocoder.

A decoder network maps mel spectrograms to interpretable control signals
(harmonic amplitude, harmonic distribution, noise filter magnitudes) that
drive a harmonic oscillator and a filtered-noise generator.  Everything down
to the spectral loss is differentiable through a small reverse-mode engine.
"""

from .audio import AudioBuffer, read_wav, write_wav
from .decoder import DecoderConfig, DecoderParams, decode, init, load_params, param_count, save_params
from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    InsufficientInputError,
    ManifestError,
    NonFiniteGradientError,
    RateMismatchError,
    UnsupportedFormatError,
    VocoderError,
)
from .spectral import MelConfig, MelSpectrogram, mel_spectrogram, multi_scale_mel_loss
from .synth import ControlTrack, harmonic_count, synthesize
from .yin import PitchContour, fill_unvoiced, track

__version__ = "0.1.0"
