"""Adam training of the decoder through the DSP generators against the mel loss."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .audio import AudioBuffer, random_segment
from .decoder import DecoderConfig, DecoderParams, decode, init, load_extra, load_params, read_manifest, save_params
from .errors import ContractError, ManifestError, NonFiniteGradientError
from .spectral import DEFAULT_ALPHA, RESOLUTIONS, MelSpectrogram, mel_spectrogram, multi_scale_mel_loss
from .synth import synthesize
from .yin import fill_unvoiced, track

FALLBACK_F0 = 200.0


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    decay: float = 0.98
    decay_every: int = 10_000
    batch_size: int = 8
    segment_len: int = 60_000
    max_iters: int = 400_000
    seed: int = 0
    alpha: float = DEFAULT_ALPHA
    resolutions: tuple = RESOLUTIONS
    val_fraction: float = 0.02
    val_every: int = 1000
    checkpoint_every: int = 10_000

    def validate(self) -> "TrainConfig":
        if not 0 < self.decay < 1:
            raise ContractError(f"decay must be in (0, 1), got {self.decay}")
        for name in ("beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise ContractError(f"{name} must be in [0, 1)")
        for name in ("adam_eps", "decay_every", "batch_size", "segment_len"):
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be positive, got {getattr(self, name)}")
        if self.lr0 < 0 or self.alpha < 0 or self.max_iters < 0:
            raise ContractError("lr0, alpha and max_iters must be nonnegative")
        return self


@dataclass
class TrainState:
    """Parameters, Adam moments, iteration counter and loss history.

    Per-iteration randomness is derived from ``(seed, iteration)``, so these
    two integers are the complete RNG state.
    """

    params: DecoderParams
    m: dict
    v: dict
    iteration: int = 0
    seed: int = 0
    loss_history: list = field(default_factory=list)

    @classmethod
    def fresh(cls, params: DecoderParams, seed: int = 0) -> "TrainState":
        m = {name: np.zeros_like(t.data) for name, t in params.items()}
        v = {name: np.zeros_like(t.data) for name, t in params.items()}
        return cls(params, m, v, 0, seed, [])


@dataclass
class TrainingItem:
    audio: np.ndarray
    mel: MelSpectrogram
    f0: np.ndarray  # filled, mel frame rate


def lr_at(iteration: int, config: TrainConfig) -> float:
    """Stepwise exponential decay: ``lr0 * decay ** floor(iteration / decay_every)``."""
    if iteration < 0:
        raise ContractError(f"iteration must be >= 0, got {iteration}")
    return config.lr0 * config.decay ** (iteration // config.decay_every)


def adam_step(state: TrainState, grads: dict, lr: float, config: TrainConfig = TrainConfig()) -> TrainState:
    """One bias-corrected Adam update, applied in place; returns ``state``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            index = int(np.flatnonzero(~np.isfinite(np.asarray(g).reshape(-1)))[0])
            raise NonFiniteGradientError(
                f"non-finite gradient for {name} (flat index {index}) at iteration {state.iteration}",
                name=name, index=index, iteration=state.iteration,
            )
    step = state.iteration + 1
    b1, b2 = config.beta1, config.beta2
    c1, c2 = 1.0 - b1**step, 1.0 - b2**step
    for name, tensor in state.params.items():
        g = grads.get(name)
        if g is None:
            continue
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        tensor.data -= lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
    state.iteration = step
    return state


def noise_seed(master_seed: int, iteration: int, item: int = 0) -> int:
    return int(np.random.SeedSequence([master_seed, iteration, item, 0x6E6F]).generate_state(1)[0])


def prepare_item(audio, fallback_f0: float = FALLBACK_F0) -> TrainingItem:
    """Mel spectrogram and gap-filled YIN contour for one training segment."""
    samples = audio.samples if isinstance(audio, AudioBuffer) else np.asarray(audio, dtype=np.float64)
    mel = mel_spectrogram(samples)
    contour = track(samples)
    if contour.voiced.any():
        f0 = fill_unvoiced(contour).f0
    else:
        f0 = np.full(len(contour), fallback_f0)
    return TrainingItem(samples, mel, f0)


def item_loss(params: DecoderParams, item: TrainingItem, rng_seed: int, config: TrainConfig) -> ad.Tensor:
    n = item.audio.shape[0]
    controls = decode(item.mel, params, n)
    y_hat = synthesize(controls, item.f0, n, rng_seed)
    return multi_scale_mel_loss(item.audio, y_hat, config.alpha, config.resolutions)


def train_step(state: TrainState, batch: list, config: TrainConfig) -> tuple[TrainState, float]:
    """Forward, backward and Adam update on one batch; the loss is averaged over items."""
    if not batch:
        raise ContractError("empty batch")
    if len({item.audio.shape[0] for item in batch}) != 1:
        raise ContractError("batch items must share one segment length")
    lr = lr_at(state.iteration, config)
    total = {name: np.zeros_like(t.data) for name, t in state.params.items()}
    value = 0.0
    for b, item in enumerate(batch):
        with ad.Tape() as tape:
            loss = item_loss(state.params, item, noise_seed(state.seed, state.iteration, b), config)
        grads = tape.backward(loss)
        for name, tensor in state.params.items():
            total[name] += grads[tensor]
        value += loss.item()
    scale = 1.0 / len(batch)
    for g in total.values():
        g *= scale
    value *= scale
    if not np.isfinite(value):
        raise NonFiniteGradientError(f"non-finite loss at iteration {state.iteration}", iteration=state.iteration)
    adam_step(state, total, lr, config)
    state.loss_history.append(value)
    return state, value


class ClipDataset:
    """Training clips with a seed-deterministic validation split and batch sampler."""

    def __init__(self, clips: list, config: TrainConfig):
        self.config = config
        clips = [c if isinstance(c, AudioBuffer) else AudioBuffer(c) for c in clips]
        if not clips:
            raise ContractError("need at least one training clip")
        order = np.random.default_rng(np.random.SeedSequence([config.seed, 0x7661])).permutation(len(clips))
        n_val = int(round(config.val_fraction * len(clips))) if len(clips) > 1 else 0
        n_val = min(n_val, len(clips) - 1)
        self.val = [clips[i] for i in sorted(order[:n_val])]
        self.train = [clips[i] for i in sorted(order[n_val:])]
        self._cache: dict = {}

    def _item(self, key, clip: AudioBuffer, rng_seed: int) -> TrainingItem:
        whole = len(clip) <= self.config.segment_len
        if whole and key in self._cache:
            return self._cache[key]
        item = prepare_item(random_segment(clip, self.config.segment_len, rng_seed))
        if whole:
            self._cache[key] = item
        return item

    def batch(self, seed: int, iteration: int) -> list:
        rng = np.random.default_rng(np.random.SeedSequence([seed, iteration]))
        items = []
        for _ in range(self.config.batch_size):
            index = int(rng.integers(len(self.train)))
            segment_seed = int(rng.integers(2**62))
            items.append(self._item(("train", index), self.train[index], segment_seed))
        return items

    def validation_items(self) -> list:
        return [self._item(("val", i), clip, 0) for i, clip in enumerate(self.val)]


def validation_loss(state: TrainState, items: list, config: TrainConfig) -> float:
    with ad.no_tape():
        losses = [item_loss(state.params, it, noise_seed(state.seed, 0, i), config).item() for i, it in enumerate(items)]
    return float(np.mean(losses))


def fit(
    state: TrainState,
    dataset: ClipDataset,
    config: TrainConfig,
    log_path=None,
    checkpoint_dir=None,
    target_ratio: float | None = None,
    window: int = 10,
    progress=None,
) -> TrainState:
    """Run :func:`train_step` until ``config.max_iters`` iterations are done.

    With ``target_ratio`` set, stops early once the mean of the last
    ``window`` losses is at most ``target_ratio`` times the first loss.
    Periodic checkpoints go to ``checkpoint_dir/iter_NNNNNNN``.
    """
    config.validate()
    val_items = dataset.validation_items()
    log = None
    if log_path is not None:
        fresh = state.iteration == 0 or not os.path.exists(log_path)
        log = open(log_path, "w" if fresh else "a", newline="")
        writer = csv.writer(log)
        if fresh:
            writer.writerow(["iter", "lr", "train_loss", "val_loss"])
    try:
        while state.iteration < config.max_iters:
            it = state.iteration
            lr = lr_at(it, config)
            _, loss = train_step(state, dataset.batch(state.seed, it), config)
            val = ""
            if val_items and (it + 1) % config.val_every == 0:
                val = repr(validation_loss(state, val_items, config))
            if log is not None:
                writer.writerow([it, repr(lr), repr(loss), val])
            if progress is not None:
                progress(it, loss)
            if checkpoint_dir is not None and (it + 1) % config.checkpoint_every == 0:
                save_checkpoint(state, os.path.join(checkpoint_dir, f"iter_{state.iteration:07d}"), config)
            if target_ratio is not None and len(state.loss_history) >= window:
                recent = float(np.mean(state.loss_history[-window:]))
                if recent <= target_ratio * state.loss_history[0]:
                    break
    finally:
        if log is not None:
            log.close()
    return state


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(state: TrainState, directory, config: TrainConfig | None = None) -> None:
    extra_tensors = {}
    for name in state.params.names():
        extra_tensors[f"adam_m.{name}"] = state.m[name]
        extra_tensors[f"adam_v.{name}"] = state.v[name]
    extra_tensors["loss_history"] = np.asarray(state.loss_history, dtype=np.float64)
    extra_fields = {"train.iteration": state.iteration, "train.seed": state.seed}
    if config is not None:
        for f in fields(config):
            value = getattr(config, f.name)
            extra_fields[f"config.{f.name}"] = ",".join(map(str, value)) if isinstance(value, tuple) else repr(value)
    save_params(directory, state.params, extra_fields, extra_tensors)


def load_checkpoint(directory) -> TrainState:
    """Restore a :class:`TrainState`; raises :class:`ManifestError` without partial results.

    Checkpoints holding only decoder parameters load with zero Adam moments.
    """
    manifest = read_manifest(directory)
    params = load_params(directory, manifest)
    m, v = {}, {}
    has_moments = any(k.startswith("extra.adam_m.") for k in manifest)
    for name, tensor in params.items():
        if has_moments:
            m[name] = load_extra(directory, manifest, f"adam_m.{name}", tensor.shape)
            v[name] = load_extra(directory, manifest, f"adam_v.{name}", tensor.shape)
        else:
            m[name] = np.zeros_like(tensor.data)
            v[name] = np.zeros_like(tensor.data)
    history = []
    if "extra.loss_history" in manifest:
        history = [float(x) for x in load_extra(directory, manifest, "loss_history")]
    try:
        iteration = int(manifest.get("train.iteration", 0))
        seed = int(manifest.get("train.seed", 0))
    except ValueError as exc:
        raise ManifestError(f"{directory}: malformed training fields ({exc})") from exc
    return TrainState(params, m, v, iteration, seed, history)


def new_state(config: TrainConfig, arch: DecoderConfig = DecoderConfig()) -> TrainState:
    return TrainState.fresh(init(config.seed, arch), config.seed)
