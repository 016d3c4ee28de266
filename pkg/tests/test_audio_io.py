import wave

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ddsp_vocoder.audio import AudioBuffer, quantize, random_segment, read_wav, write_wav
from ddsp_vocoder.errors import ManifestError, RateMismatchError, UnsupportedFormatError
from ddsp_vocoder.tensorio import read_header, read_tensor, write_header, write_tensor


def raw_wav(path, ints, rate=22050, channels=1, width=2):
    with wave.open(str(path), "wb") as w:
        w.setnchannels(channels)
        w.setsampwidth(width)
        w.setframerate(rate)
        w.writeframes(np.asarray(ints, dtype="<i2" if width == 2 else "u1").tobytes())


def test_read_zeros(tmp_path):
    raw_wav(tmp_path / "z.wav", np.zeros(22050))
    buf = read_wav(tmp_path / "z.wav")
    assert len(buf) == 22050 and buf.sample_rate == 22050
    assert np.all(buf.samples == 0.0)


def test_read_full_scale(tmp_path):
    raw_wav(tmp_path / "m.wav", [32767, -32768])
    buf = read_wav(tmp_path / "m.wav")
    assert buf.samples[0] == 32767 / 32768
    assert buf.samples[1] == -1.0


def test_rate_mismatch(tmp_path):
    raw_wav(tmp_path / "hi.wav", np.zeros(10), rate=44100)
    with pytest.raises(RateMismatchError):
        read_wav(tmp_path / "hi.wav")


def test_non_pcm16_rejected(tmp_path):
    raw_wav(tmp_path / "u8.wav", np.full(10, 128), width=1)
    with pytest.raises(UnsupportedFormatError):
        read_wav(tmp_path / "u8.wav")
    (tmp_path / "junk.wav").write_bytes(b"not a wav file at all")
    with pytest.raises(UnsupportedFormatError):
        read_wav(tmp_path / "junk.wav")


def test_stereo_is_averaged(tmp_path):
    raw_wav(tmp_path / "st.wav", [100, 300, -200, 0], channels=2)
    np.testing.assert_allclose(read_wav(tmp_path / "st.wav").samples, [200 / 32768, -100 / 32768])


def test_write_clamps():
    np.testing.assert_array_equal(quantize([2.0, -1.0, -3.0, 0.5]), [32767, -32768, -32768, 16384])


def test_round_trip_within_quantization(tmp_path):
    x = np.random.default_rng(0).uniform(-1, 1, 5000)
    write_wav(AudioBuffer(x), tmp_path / "a.wav")
    y = read_wav(tmp_path / "a.wav").samples
    assert np.max(np.abs(x - y)) <= 1 / 32768


def test_second_round_trip_is_bit_exact(tmp_path):
    x = np.random.default_rng(1).uniform(-1.2, 1.2, 3000)
    write_wav(AudioBuffer(x), tmp_path / "a.wav")
    once = read_wav(tmp_path / "a.wav")
    write_wav(once, tmp_path / "b.wav")
    twice = read_wav(tmp_path / "b.wav")
    assert once.samples.tobytes() == twice.samples.tobytes()


def test_random_segment_examples():
    x = np.arange(60000, dtype=float)
    np.testing.assert_array_equal(random_segment(AudioBuffer(x), 60000, 3).samples, x)
    np.testing.assert_array_equal(random_segment(AudioBuffer(np.zeros(10)), 20, 3).samples, np.zeros(20))
    a = random_segment(AudioBuffer(x), 1000, 42).samples
    b = random_segment(AudioBuffer(x), 1000, 42).samples
    np.testing.assert_array_equal(a, b)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 500), st.integers(1, 700), st.integers(0, 2**32))
def test_random_segment_in_bounds(n, length, seed):
    x = np.arange(1, n + 1, dtype=float)
    seg = random_segment(AudioBuffer(x), length, seed).samples
    assert len(seg) == length
    body = seg[seg > 0]
    # contiguous slice of the source, then zero padding
    assert np.all(np.diff(body) == 1)
    if length <= n:
        assert len(body) == length


# ---------------------------------------------------------------- DTF1 and headers


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("shape", [(), (5,), (3, 4), (2, 3, 4)])
def test_tensor_round_trip(tmp_path, dtype, shape):
    x = np.random.default_rng(0).standard_normal(shape).astype(dtype)
    write_tensor(tmp_path / "t.dtf", x)
    y = read_tensor(tmp_path / "t.dtf")
    assert y.dtype == dtype and y.shape == shape
    assert y.tobytes() == x.tobytes()


def test_tensor_layout(tmp_path):
    write_tensor(tmp_path / "t.dtf", np.array([[1.0, 2.0]]))
    blob = (tmp_path / "t.dtf").read_bytes()
    assert blob[:4] == b"DTF1" and blob[4] == 1 and blob[5] == 2
    assert int.from_bytes(blob[6:14], "little") == 1 and int.from_bytes(blob[14:22], "little") == 2
    assert np.frombuffer(blob[22:], "<f8").tolist() == [1.0, 2.0]


def test_tensor_rejects_garbage(tmp_path):
    (tmp_path / "bad.dtf").write_bytes(b"XXXX\x01\x00")
    with pytest.raises(UnsupportedFormatError):
        read_tensor(tmp_path / "bad.dtf")
    write_tensor(tmp_path / "cut.dtf", np.ones(10))
    (tmp_path / "cut.dtf").write_bytes((tmp_path / "cut.dtf").read_bytes()[:-8])
    with pytest.raises(UnsupportedFormatError):
        read_tensor(tmp_path / "cut.dtf")


def test_header_round_trip(tmp_path):
    write_header(tmp_path / "h.txt", {"format": "x", "version": 1, "empty": ""})
    assert read_header(tmp_path / "h.txt") == {"format": "x", "version": "1", "empty": ""}
    with pytest.raises(ManifestError):
        read_header(tmp_path / "missing.txt")
    (tmp_path / "bad.txt").write_text("no equals sign\n")
    with pytest.raises(ManifestError):
        read_header(tmp_path / "bad.txt")
