"""Finite-difference gradient suites at three scopes.

``primitive`` checks every differentiable op in isolation, ``synth`` the
signal generators, and ``full`` the decoder -> generators -> mel loss chain
with a tiny decoder.  Every suite is deterministic for a given seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .decoder import DecoderConfig, decode, forward, init, upsample_mel
from .spectral import MelConfig, mel_spectrogram, mel_spectrogram_t, multi_scale_mel_loss, stft_magnitude_t
from .synth import filtered_noise, harmonic_oscillator, synthesize

THRESHOLDS = {"primitive": 1e-6, "synth": 1e-5, "full": 1e-4}
FULL_SAMPLES = 1024
FULL_RESOLUTIONS = (256, 64)
FULL_WIDTH = 8
KINK_MARGIN = 1e-3


@dataclass
class CheckResult:
    case: str
    tensor: str
    max_rel_error: float
    index: int | None
    analytic: float | None
    numeric: float | None

    def line(self) -> str:
        return f"{self.case:<22s} {self.tensor:<14s} {self.max_rel_error:.3e}  (index {self.index})"


def _leaf(rng, shape, name, low=-1.0, high=1.0):
    return ad.Tensor(rng.uniform(low, high, size=shape), requires_grad=True, name=name)


def _away_from_zero(rng, shape, name, margin=0.1):
    x = rng.uniform(margin, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return ad.Tensor(x, requires_grad=True, name=name)


def primitive_cases(seed: int):
    rng = np.random.default_rng(seed)
    a, b = _leaf(rng, (4, 5), "a"), _leaf(rng, (4, 5), "b")
    pos = _leaf(rng, (4, 5), "pos", 0.2, 2.0)
    nz = _away_from_zero(rng, (4, 5), "nz")
    s = _leaf(rng, (), "s")
    seq = _leaf(rng, (6, 3), "seq")
    x = _leaf(rng, (5, 4), "x")
    w, bias = _leaf(rng, (4, 3), "w"), _leaf(rng, (3,), "bias")
    gamma, beta = _leaf(rng, (4,), "gamma", 0.5, 1.5), _leaf(rng, (4,), "beta")
    units, n_in = 3, 4
    gru_p = {
        "w_x": _leaf(rng, (n_in, 3 * units), "w_x"),
        "w_h": _leaf(rng, (units, 3 * units), "w_h"),
        "b_x": _leaf(rng, (3 * units,), "b_x"),
        "b_h": _leaf(rng, (3 * units,), "b_h"),
    }
    h0 = _leaf(rng, (2, units), "h0")
    xb = _leaf(rng, (2, n_in), "xb")
    xs, hs = _leaf(rng, (6, n_in), "xs"), _leaf(rng, (units,), "hs")
    audio = _leaf(rng, (300,), "audio")

    def proj(out):
        # fixed random projection to a scalar so every output entry matters
        wts = np.random.default_rng(seed + 1).standard_normal(out.shape)
        return ad.sum_all(ad.mul(out, wts))

    mel_cfg = MelConfig(fft_size=64, hop=16)
    return [
        ("add", lambda: proj(ad.add(a, b)), [a, b]),
        ("sub", lambda: proj(ad.sub(a, b)), [a, b]),
        ("mul", lambda: proj(ad.mul(a, b)), [a, b]),
        ("mul_scalar", lambda: proj(ad.mul(a, s)), [a, s]),
        ("sin", lambda: proj(ad.sin(a)), [a]),
        ("sigmoid", lambda: proj(ad.sigmoid(a)), [a]),
        ("tanh", lambda: proj(ad.tanh(a)), [a]),
        ("log", lambda: proj(ad.log(pos)), [pos]),
        ("pow_const", lambda: proj(ad.pow_const(pos, 2.302585)), [pos]),
        ("abs", lambda: proj(ad.abs_(nz)), [nz]),
        ("leaky_relu", lambda: proj(ad.leaky_relu(nz)), [nz]),
        ("sum_axis", lambda: proj(ad.sum_axis(a, 1)), [a]),
        ("concat", lambda: proj(ad.concat([a, b], axis=1)), [a, b]),
        ("columns", lambda: proj(ad.columns(a, 1, 4)), [a]),
        ("cumsum", lambda: proj(ad.cumsum(seq, 0)), [seq]),
        ("normalize_rows", lambda: proj(ad.normalize_rows(pos)), [pos]),
        ("linear_interp", lambda: proj(ad.linear_interp(seq, 17)), [seq]),
        ("dense", lambda: proj(ad.dense(x, w, bias)), [x, w, bias]),
        ("layer_norm", lambda: proj(ad.layer_norm(x, gamma, beta)), [x, gamma, beta]),
        ("gru_cell", lambda: proj(ad.gru_cell(xb, h0, gru_p)), [xb, h0, *gru_p.values()]),
        ("gru", lambda: proj(ad.gru(xs, gru_p, h0=hs)), [xs, hs, *gru_p.values()]),
        ("stft_magnitude", lambda: proj(stft_magnitude_t(audio, 64, 16)), [audio]),
        ("mel_spectrogram", lambda: proj(mel_spectrogram_t(audio, mel_cfg)), [audio]),
    ]


def synth_cases(seed: int):
    rng = np.random.default_rng(seed)
    n = 600
    f1 = 180.0 + 40.0 * np.sin(np.linspace(0.0, 3.0, n))
    amp = _leaf(rng, (n, 1), "amplitude", 0.1, 1.0)
    harm = _leaf(rng, (n, 67), "harmonics", 0.0, 1.0)
    mags = _leaf(rng, (12, 101), "noise_mags", 0.0, 1.0)
    weights = rng.standard_normal(n)

    def proj(out):
        return ad.sum_all(ad.mul(out, weights))

    return [
        ("harmonic_oscillator", lambda: proj(harmonic_oscillator(f1, amp, harm)), [amp, harm]),
        ("filtered_noise", lambda: proj(filtered_noise(mags, (n - 1) / 11, n, seed)), [mags]),
    ]


def kink_margin(mel, params) -> float:
    """Smallest distance of any decoder leaky-ReLU input from its kink at zero."""
    taps = []
    with ad.no_tape():
        forward(upsample_mel(mel, params.config.upsample), params, taps)
    return float(min(np.abs(t).min() for t in taps))


def _full_source(seed: int, params, n_samples: int, max_tries: int = 1000):
    # The chain is only piecewise smooth (leaky ReLU), so the input is drawn
    # from a seeded sequence until every activation clears the kink margin.
    t = np.arange(n_samples) / 22050.0
    for attempt in range(max_tries):
        rng = np.random.default_rng([seed, attempt])
        source = 0.1 * rng.standard_normal(n_samples) + 0.3 * np.sin(2 * np.pi * 220.0 * t)
        mel = mel_spectrogram(source)
        if kink_margin(mel, params) >= KINK_MARGIN:
            return mel
    raise RuntimeError(f"no input within {max_tries} draws keeps activations {KINK_MARGIN} from a kink")


def full_case(seed: int, width: int = FULL_WIDTH, n_samples: int = FULL_SAMPLES,
              resolutions=FULL_RESOLUTIONS, target_scale: float = 0.9):
    """Tiny decoder through the generators into the mel loss.

    The decoder reads the mel spectrogram of a noisy tone.  The target is the
    untrained model's own output scaled by ``target_scale``, so every target
    mel energy sits a fixed fraction below the prediction: the L1 terms are far
    from their kink and the loss stays small, which keeps central differences
    clear of cancellation error.
    """
    params = init(seed, DecoderConfig.tiny(width))
    mel = _full_source(seed, params, n_samples)
    f0 = np.full(mel.n_frames, 220.0)

    def predict():
        return synthesize(decode(mel, params, n_samples), f0, n_samples, rng_seed=seed)

    with ad.no_tape():
        target = target_scale * predict().data

    def loss():
        return multi_scale_mel_loss(target, predict(), 1.0, resolutions)

    return [("full_chain", loss, list(params.values()))]


SCOPES = {"primitive": primitive_cases, "synth": synth_cases, "full": full_case}


def run(scope: str, seed: int = 0, max_coords: int = 200) -> list[CheckResult]:
    if scope not in SCOPES:
        raise ValueError(f"unknown gradcheck scope {scope!r}; choose from {sorted(SCOPES)}")
    results = []
    with ad.precision(64):
        for case, f, leaves in SCOPES[scope](seed):
            for entry in ad.gradcheck_report(f, leaves, max_coords=max_coords, seed=seed):
                index, a, n = entry["worst"] if entry["worst"] else (None, None, None)
                results.append(CheckResult(case, entry["name"], entry["max_rel_error"], index, a, n))
    return results


def failures(results: list[CheckResult], scope: str) -> list[CheckResult]:
    return [r for r in results if not r.max_rel_error < THRESHOLDS[scope]]
