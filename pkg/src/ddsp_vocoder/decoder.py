"""Decoder network: mel spectrogram -> control track.

Two parallel per-frame ConvNets (filter size 1) read the upsampled log-mel
frames, a GRU runs over their concatenated features, and an output ConvNet
reads the GRU states together with the GRU input before a single linear
projection is split into amplitude, harmonic and noise heads.
"""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .errors import DimensionError, InsufficientInputError, ManifestError
from .spectral import N_MELS, MelSpectrogram
from .synth import N_HARMONICS, N_NOISE_BINS, UPSAMPLE, ControlTrack
from .tensorio import read_header, read_tensor, write_header, write_tensor

CHECKPOINT_FORMAT = "ddsp-vocoder-checkpoint"
CHECKPOINT_VERSION = 1
OUTPUT_FLOOR = 1e-7
INPUT_FLOOR = 1e-5


@dataclass(frozen=True)
class DecoderConfig:
    n_mels: int = N_MELS
    hidden: int = 512
    layers: int = 3
    gru_units: int = 512
    n_harmonics: int = N_HARMONICS
    n_noise: int = N_NOISE_BINS
    upsample: float = UPSAMPLE
    leak: float = ad.LEAKY_SLOPE

    @property
    def n_outputs(self) -> int:
        return 1 + self.n_harmonics + self.n_noise

    @classmethod
    def small(cls) -> "DecoderConfig":
        """The reduced variant: one 256-wide layer per ConvNet."""
        return cls(hidden=256, layers=1)

    @classmethod
    def tiny(cls, width: int = 8) -> "DecoderConfig":
        return cls(hidden=width, layers=3, gru_units=width)

    def to_fields(self) -> dict:
        return {f"arch.{k}": v for k, v in asdict(self).items()}

    @classmethod
    def from_fields(cls, header: dict) -> "DecoderConfig":
        kwargs = {}
        for f in fields(cls):
            key = f"arch.{f.name}"
            if key not in header:
                raise ManifestError(f"manifest lacks {key}")
            kwargs[f.name] = float(header[key]) if f.type in (float, "float") else int(header[key])
        return cls(**kwargs)


def _layer_shapes(config: DecoderConfig):
    """Ordered (name, shape, fan_in) for every parameter tensor."""
    shapes = []

    def stack(prefix, width_in):
        for i in range(config.layers):
            n_in = width_in if i == 0 else config.hidden
            shapes.append((f"{prefix}.l{i}.w", (n_in, config.hidden), n_in))
            shapes.append((f"{prefix}.l{i}.b", (config.hidden,), None))
            shapes.append((f"{prefix}.l{i}.ln_g", (config.hidden,), None))
            shapes.append((f"{prefix}.l{i}.ln_b", (config.hidden,), None))

    stack("in0", config.n_mels)
    stack("in1", config.n_mels)
    gru_in, u = 2 * config.hidden, config.gru_units
    shapes += [
        ("gru.w_x", (gru_in, 3 * u), gru_in),
        ("gru.w_h", (u, 3 * u), u),
        ("gru.b_x", (3 * u,), None),
        ("gru.b_h", (3 * u,), None),
    ]
    stack("out", u + gru_in)
    shapes += [
        ("proj.w", (config.hidden, config.n_outputs), config.hidden),
        ("proj.b", (config.n_outputs,), None),
    ]
    return shapes


@dataclass
class DecoderParams:
    config: DecoderConfig
    tensors: dict  # name -> Tensor, in construction order

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def values(self):
        return self.tensors.values()

    def items(self):
        return self.tensors.items()

    def param_count(self) -> int:
        return param_count(self)

    def gru(self) -> dict:
        return {k: self.tensors[f"gru.{k}"] for k in ad.GRU_KEYS}


def init(seed: int = 0, config: DecoderConfig = DecoderConfig()) -> DecoderParams:
    """Uniform(+-sqrt(1/fan_in)) weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape, fan_in in _layer_shapes(config):
        if fan_in is not None:
            bound = math.sqrt(1.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        elif name.endswith("ln_g"):
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        tensors[name] = ad.Tensor(data, requires_grad=True, name=name)
    return DecoderParams(config, tensors)


def param_count(params: DecoderParams | DecoderConfig) -> int:
    if isinstance(params, DecoderConfig):
        return sum(int(np.prod(shape)) for _, shape, _ in _layer_shapes(params))
    return sum(t.size for t in params.values())


def control_frames(n_mel_frames: int, factor: float = UPSAMPLE) -> int:
    return math.ceil(n_mel_frames * factor)


def upsample_mel(mel, factor: float = UPSAMPLE) -> np.ndarray:
    values = mel.values if isinstance(mel, MelSpectrogram) else np.asarray(mel, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] < 2:
        raise InsufficientInputError(f"need at least 2 mel frames to upsample, got shape {values.shape}")
    return ad.linear_interp(values, control_frames(values.shape[0], factor)).data


def scaled_sigmoid(x) -> ad.Tensor:
    """``2 * sigmoid(x) ** ln(10) + 1e-7``: positive, bounded output nonlinearity."""
    return ad.add(ad.mul(ad.pow_const(ad.sigmoid(x), math.log(10.0)), 2.0), OUTPUT_FLOOR)


def _convnet(x, params: DecoderParams, prefix: str, taps: list | None = None) -> ad.Tensor:
    t = params.tensors
    for i in range(params.config.layers):
        x = ad.dense(x, t[f"{prefix}.l{i}.w"], t[f"{prefix}.l{i}.b"])
        x = ad.layer_norm(x, t[f"{prefix}.l{i}.ln_g"], t[f"{prefix}.l{i}.ln_b"])
        if taps is not None:
            taps.append(x.data)
        x = ad.leaky_relu(x, params.config.leak)
    return x


def forward(mel_up, params: DecoderParams, taps: list | None = None) -> ControlTrack:
    """Map upsampled mel frames (frames x n_mels) to a control track of tensors.

    Mel energies are log-compressed (floor 1e-5) before the first layer.  If
    ``taps`` is a list, the input of every leaky ReLU is appended to it.
    """
    cfg = params.config
    mel_up = ad.as_tensor(mel_up)
    if mel_up.data.ndim != 2 or mel_up.shape[1] != cfg.n_mels:
        raise DimensionError(f"decoder expects frames x {cfg.n_mels} input, got shape {mel_up.shape}")
    x = ad.log(mel_up, INPUT_FLOOR)
    features = ad.concat([_convnet(x, params, "in0", taps), _convnet(x, params, "in1", taps)], axis=1)
    states = ad.gru(features, params.gru())
    hidden = _convnet(ad.concat([states, features], axis=1), params, "out", taps)
    raw = ad.dense(hidden, params["proj.w"], params["proj.b"])
    h = cfg.n_harmonics
    amplitude = scaled_sigmoid(ad.columns(raw, 0, 1))
    harmonics = ad.normalize_rows(scaled_sigmoid(ad.columns(raw, 1, 1 + h)))
    noise = scaled_sigmoid(ad.columns(raw, 1 + h, cfg.n_outputs))
    return ControlTrack(amplitude, harmonics, noise, upsample=cfg.upsample)


def decode(mel, params: DecoderParams, audio_length: int | None = None) -> ControlTrack:
    """Upsample a mel spectrogram by the configured factor and run :func:`forward`."""
    track = forward(upsample_mel(mel, params.config.upsample), params)
    if isinstance(mel, MelSpectrogram):
        track.sample_rate = mel.config.sample_rate
        track.mel_hop = mel.config.hop
    track.audio_length = audio_length
    return track


# ---------------------------------------------------------------- checkpoints


def _tensor_file(name: str, prefix: str = "param") -> str:
    return f"{prefix}.{name}.dtf"


def save_params(directory, params: DecoderParams, extra_fields: dict | None = None,
                extra_tensors: dict | None = None) -> None:
    """Write every tensor as DTF1 plus a ``manifest.txt`` index."""
    os.makedirs(directory, exist_ok=True)
    manifest = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION}
    manifest.update(params.config.to_fields())
    for name, tensor in params.items():
        filename = _tensor_file(name)
        write_tensor(os.path.join(directory, filename), tensor.data)
        manifest[f"tensor.{name}"] = filename
    for key, array in (extra_tensors or {}).items():
        filename = f"{key}.dtf"
        write_tensor(os.path.join(directory, filename), array)
        manifest[f"extra.{key}"] = filename
    manifest.update(extra_fields or {})
    tmp = os.path.join(directory, "manifest.txt.tmp")
    write_header(tmp, manifest)
    os.replace(tmp, os.path.join(directory, "manifest.txt"))


def read_manifest(directory) -> dict:
    path = os.path.join(directory, "manifest.txt")
    header = read_header(path)
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ManifestError(f"{path}: not a decoder checkpoint manifest")
    if header.get("version") != str(CHECKPOINT_VERSION):
        raise ManifestError(f"{path}: checkpoint version {header.get('version')!r}, expected {CHECKPOINT_VERSION}")
    return header


def _load_array(directory, filename, expected_shape=None):
    path = os.path.join(directory, filename)
    if not os.path.exists(path):
        raise ManifestError(f"{directory}: missing tensor file {filename}")
    try:
        array = read_tensor(path)
    except ValueError as exc:
        raise ManifestError(f"{directory}: unreadable tensor file {filename} ({exc})") from exc
    if expected_shape is not None and array.shape != tuple(expected_shape):
        raise ManifestError(f"{directory}: {filename} has shape {array.shape}, expected {tuple(expected_shape)}")
    return array


def load_params(directory, manifest: dict | None = None) -> DecoderParams:
    """Load a checkpoint written by :func:`save_params`; nothing is returned on any error."""
    manifest = read_manifest(directory) if manifest is None else manifest
    config = DecoderConfig.from_fields(manifest)
    arrays = {}
    for name, shape, _ in _layer_shapes(config):
        key = f"tensor.{name}"
        if key not in manifest:
            raise ManifestError(f"{directory}: manifest lacks {key}")
        arrays[name] = _load_array(directory, manifest[key], shape)
    tensors = {name: ad.Tensor(a, requires_grad=True, name=name) for name, a in arrays.items()}
    return DecoderParams(config, tensors)


def load_extra(directory, manifest: dict, key: str, expected_shape=None) -> np.ndarray:
    entry = manifest.get(f"extra.{key}")
    if entry is None:
        raise ManifestError(f"{directory}: manifest lacks extra.{key}")
    return _load_array(directory, entry, expected_shape)
