import numpy as np
import pytest

from ddsp_vocoder.errors import ContractError
from ddsp_vocoder.signals import tone
from ddsp_vocoder.spectral import mel_spectrogram
from ddsp_vocoder.yin import (
    PitchContour,
    cmnd,
    difference_function,
    fill_unvoiced,
    track,
    write_contour_csv,
    yin_frame,
)

SR = 22050


def test_difference_function_basics():
    frame = np.random.default_rng(0).standard_normal(1024)
    assert difference_function(frame, 300)[0] == 0.0
    constant = np.full(1024, 0.7)
    # zero up to roundoff relative to the frame energy
    np.testing.assert_allclose(difference_function(constant, 300), 0.0, atol=1e-12 * np.sum(constant**2))


def test_difference_function_periodic_zero():
    period = 90
    frame = np.tile(np.random.default_rng(1).standard_normal(period), 12)[:1024]
    d = difference_function(frame, 300)
    assert d[period] < 1e-6 * d.max()


def test_cmnd_starts_at_one():
    d = difference_function(np.random.default_rng(2).standard_normal(1024), 340)
    assert cmnd(d)[0] == 1.0


def test_cmnd_noise_stays_above_threshold():
    d = cmnd(difference_function(np.random.default_rng(3).standard_normal(1024), 340))
    assert d[10:].min() > 0.1


def test_cmnd_tone_dips_near_period():
    frame = tone(220.0, 1024 / SR, 1.0)
    d = cmnd(difference_function(frame, 340))
    dips = np.flatnonzero(d[10:] < 0.1) + 10
    assert dips.size and abs(dips[np.argmin(d[dips])] - SR / 220) < 1.0


def test_yin_frame_examples():
    assert yin_frame(tone(220.0, 1024 / SR, 0.8)) == pytest.approx(220.0, rel=0.01)
    assert yin_frame(np.zeros(1024)) == 0.0
    t = np.arange(1024) / SR
    two = np.sin(2 * np.pi * 220 * t) + 0.3 * np.sin(2 * np.pi * 440 * t)
    assert yin_frame(two) == pytest.approx(220.0, rel=0.01)


@pytest.mark.parametrize("freq", [110.0, 165.0, 220.0, 330.0, 440.0])
def test_tones_tracked_within_one_percent(freq):
    f0 = track(tone(freq, 1.0)).f0[3:-3]
    assert np.all(np.abs(f0 - freq) / freq < 0.01)


def test_amplitude_invariance():
    x = tone(190.0, 0.5, 0.3) + 0.05 * np.random.default_rng(4).standard_normal(11025)
    np.testing.assert_allclose(track(x).f0, track(2 * x).f0, rtol=1e-9)


def test_frame_count_matches_mel():
    x = tone(200.0, 0.7)
    assert len(track(x)) == mel_spectrogram(x).n_frames


def test_chirp_tracked():
    dur = 2.0
    t = np.arange(int(dur * SR)) / SR
    f = 180.0 + (260.0 - 180.0) * t / dur
    x = 0.5 * np.sin(2 * np.pi * np.cumsum(f) / SR)
    contour = track(x)
    centers = np.arange(len(contour)) * 256
    expected = np.interp(centers, np.arange(len(f)), f)
    interior = slice(4, -4)
    assert np.all(np.abs(contour.f0[interior] - expected[interior]) / expected[interior] < 0.02)


def test_noise_is_unvoiced():
    contour = track(0.5 * np.random.default_rng(5).standard_normal(SR))
    assert not contour.voiced.any()


def test_fill_unvoiced_examples():
    np.testing.assert_allclose(fill_unvoiced(PitchContour([200.0, 0.0, 220.0])).f0, [200, 210, 220])
    np.testing.assert_allclose(fill_unvoiced(PitchContour([0.0, 0.0, 150.0])).f0, [150, 150, 150])
    c = PitchContour([120.0, 130.0])
    np.testing.assert_array_equal(fill_unvoiced(c).f0, c.f0)
    with pytest.raises(ContractError):
        fill_unvoiced(PitchContour([0.0, 0.0]))


def test_fill_unvoiced_positive_and_keeps_voiced():
    rng = np.random.default_rng(6)
    f0 = np.where(rng.random(200) < 0.4, 0.0, rng.uniform(80, 400, 200))
    f0[17] = 150.0
    filled = fill_unvoiced(PitchContour(f0)).f0
    assert np.all(filled > 0)
    np.testing.assert_array_equal(filled[f0 > 0], f0[f0 > 0])


def test_contour_csv(tmp_path):
    c = PitchContour([0.0, 101.5, 0.0])
    write_contour_csv(tmp_path / "f0.csv", c)
    rows = np.loadtxt(tmp_path / "f0.csv", delimiter=",", skiprows=1)
    np.testing.assert_allclose(rows[:, -1], c.f0)
