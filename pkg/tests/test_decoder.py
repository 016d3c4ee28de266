import math

import numpy as np
import pytest

from ddsp_vocoder import autodiff as ad
from ddsp_vocoder.decoder import (
    DecoderConfig,
    control_frames,
    decode,
    forward,
    init,
    load_params,
    param_count,
    save_params,
    scaled_sigmoid,
    upsample_mel,
)
from ddsp_vocoder.errors import DimensionError, InsufficientInputError, ManifestError
from ddsp_vocoder.spectral import mel_spectrogram

TINY = DecoderConfig.tiny(8)


def random_mel(frames, seed=0):
    return np.random.default_rng(seed).random((frames, 80)) + 1e-3


def test_upsample_frame_counts():
    assert control_frames(10) == 85 and control_frames(235) == 1998
    assert upsample_mel(random_mel(10)).shape == (85, 80)
    assert upsample_mel(np.ones((235, 80))).shape == (1998, 80)
    np.testing.assert_allclose(upsample_mel(np.full((6, 80), 0.3)), 0.3)
    with pytest.raises(InsufficientInputError):
        upsample_mel(np.ones((1, 80)))


def test_scaled_sigmoid_at_zero():
    value = scaled_sigmoid(np.zeros(1)).item()
    assert value == pytest.approx(2 * 0.5 ** math.log(10) + 1e-7, abs=1e-15)
    assert value == pytest.approx(0.40540, abs=1e-5)


def test_zero_weights_give_constant_amplitude():
    params = init(0, TINY)
    for t in params.values():
        t.data[...] = 0.0
    track = forward(np.ones((20, 80)), params)
    np.testing.assert_allclose(track.amplitude.data, 2 * 0.5 ** math.log(10) + 1e-7, rtol=1e-12)


def test_output_invariants():
    track = forward(random_mel(30), init(1, TINY))
    assert track.amplitude.shape == (30, 1)
    assert track.harmonics.shape == (30, 67)
    assert track.noise_mags.shape == (30, 101)
    np.testing.assert_allclose(track.harmonics.data.sum(axis=1), 1.0, atol=1e-6)
    for x in (track.amplitude, track.harmonics, track.noise_mags):
        assert np.all(x.data >= 1e-7 * 0.999)
    track.validate()


def test_decode_sets_length_metadata():
    mel = mel_spectrogram(np.random.default_rng(2).standard_normal(5000))
    track = decode(mel, init(0, TINY), 5000)
    assert track.n_frames == control_frames(mel.n_frames)
    assert track.audio_length == 5000 and track.mel_hop == 256


def test_forward_dimension_error():
    with pytest.raises(DimensionError):
        forward(np.ones((10, 40)), init(0, TINY))


def test_init_determinism_and_bounds():
    a, b, c = init(3, TINY), init(3, TINY), init(4, TINY)
    assert all(a[n].data.tobytes() == b[n].data.tobytes() for n in a.names())
    assert any(a[n].data.tobytes() != c[n].data.tobytes() for n in a.names())
    for name, t in a.items():
        if name.endswith(".w") or name in ("gru.w_x", "gru.w_h"):
            assert np.all(np.abs(t.data) <= math.sqrt(1.0 / t.shape[0]))
        elif name.endswith("ln_g"):
            assert np.all(t.data == 1.0)
        else:
            assert np.all(t.data == 0.0)


def test_param_count_bracket():
    default = param_count(DecoderConfig())
    assert 4.4e6 <= default <= 5.4e6
    assert param_count(DecoderConfig.small()) < default
    assert param_count(init(0, TINY)) == param_count(TINY)


def test_length_covariance_and_frame_independence():
    params = init(5, TINY)
    mel = random_mel(12)
    once = forward(mel, params)
    twice = forward(np.concatenate([mel, mel]), params)
    assert twice.n_frames == 2 * once.n_frames
    # the first half sees exactly the same history
    np.testing.assert_allclose(twice.amplitude.data[:12], once.amplitude.data, rtol=1e-12)
    taps_a, taps_b = [], []
    forward(np.tile(mel[:1], (4, 1)), params, taps_a)
    forward(mel[:1], params, taps_b)
    # identical frames give identical per-frame features (up to matmul blocking roundoff)
    np.testing.assert_allclose(taps_a[0][2], taps_b[0][0], rtol=1e-12, atol=1e-15)


def test_harmonic_normalization_is_scale_invariant():
    x = np.random.default_rng(6).random((4, 67)) + 0.1
    a = ad.normalize_rows(x).data
    b = ad.normalize_rows(7.5 * x).data
    np.testing.assert_allclose(a, b, rtol=1e-14)


def test_every_parameter_group_gets_gradient():
    params = init(7, TINY)
    with ad.Tape() as tape:
        track = forward(random_mel(6), params)
        loss = ad.add(ad.add(ad.sum_axis(ad.sum_axis(ad.mul(track.harmonics, np.tile(np.arange(67.0), (6, 1))), 1), 0),
                             ad.sum_axis(ad.sum_axis(track.amplitude, 1), 0)),
                      ad.sum_axis(ad.sum_axis(track.noise_mags, 1), 0))
    grads = tape.backward(loss)
    for name, t in params.items():
        assert np.any(grads[t] != 0.0), name


def test_checkpoint_round_trip(tmp_path):
    params = init(9, TINY)
    save_params(tmp_path / "ck", params)
    back = load_params(tmp_path / "ck")
    assert back.config == TINY
    assert all(back[n].data.tobytes() == params[n].data.tobytes() for n in params.names())


def test_corrupted_checkpoint(tmp_path):
    save_params(tmp_path / "ck", init(0, TINY))
    manifest = tmp_path / "ck" / "manifest.txt"
    text = manifest.read_text()
    manifest.write_text(text.replace("version=1", "version=7"))
    with pytest.raises(ManifestError):
        load_params(tmp_path / "ck")
    manifest.write_text(text)
    (tmp_path / "ck" / "param.gru.w_h.dtf").unlink()
    with pytest.raises(ManifestError):
        load_params(tmp_path / "ck")
    manifest.write_text("garbage\n")
    with pytest.raises(ManifestError):
        load_params(tmp_path / "ck")
