import logging
import wave

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from xcrossnet import dsp
from xcrossnet.dsp import Waveform


def dft_stft_oracle(x, frame_len=128, hop=64):
    """Explicit-loop STFT with centred reflect padding, for cross-checking."""
    pad = frame_len // 2
    w = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(frame_len) / frame_len)
    t = 1 + int(np.ceil(len(x) / hop))
    need = (t - 1) * hop + frame_len
    xp = np.pad(x, (pad, need - len(x) - pad), mode="reflect")
    n = np.arange(frame_len)
    out = np.zeros((frame_len // 2 + 1, t), dtype=complex)
    for i in range(t):
        seg = xp[i * hop:i * hop + frame_len] * w
        for k in range(frame_len // 2 + 1):
            out[k, i] = np.sum(seg * np.exp(-2j * np.pi * k * n / frame_len))
    return out


def test_frame_count_formula():
    for n in (1, 63, 64, 65, 8000, 32000):
        assert dsp.n_frames(n) == 1 + -(-n // 64)
    assert dsp.n_frames(32000) == 501
    assert dsp.n_frames(8000) == 126


def test_window_is_periodic_hann_and_cola():
    w = dsp.get_window("hann_periodic", 128)
    assert w[0] == 0.0 and w[64] == 1.0
    # squared window at 50% overlap sums to a constant
    s = w[:64] ** 2 + w[64:] ** 2
    assert np.ptp(s) < 1 - 1e-9


def test_stft_matches_loop_oracle():
    x = np.random.default_rng(0).standard_normal(700)
    spec = dsp.stft(Waveform(x))
    np.testing.assert_allclose(spec.complex(), dft_stft_oracle(x), atol=1e-10)


@given(st.integers(1, 3000), st.integers(0, 2**31))
def test_roundtrip_any_length(n, seed):
    x = np.random.default_rng(seed).standard_normal(n)
    y = dsp.istft(dsp.stft(Waveform(x)), n).samples
    assert np.linalg.norm(y - x) <= 1e-10 * np.linalg.norm(x) + 1e-300


@given(st.integers(100, 2000), st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31))
def test_linearity(n, a, b, seed):
    rng = np.random.default_rng(seed)
    x1, x2 = rng.standard_normal(n), rng.standard_normal(n)
    lhs = dsp.stft(Waveform(a * x1 + b * x2)).complex()
    rhs = a * dsp.stft(Waveform(x1)).complex() + b * dsp.stft(Waveform(x2)).complex()
    assert np.max(np.abs(lhs - rhs)) <= 1e-10 * (1 + np.max(np.abs(rhs)))


def test_differentiable_route_agrees():
    x = np.random.default_rng(1).standard_normal((2, 999))
    packed = dsp.stft_diff(x).data
    for i in range(2):
        ref = dsp.stft(Waveform(x[i])).complex()
        np.testing.assert_allclose(packed[i, 0] + 1j * packed[i, 1], ref, atol=1e-10)
    back = dsp.istft_diff(packed, 999).data
    np.testing.assert_allclose(back, x, atol=1e-10)


def test_single_sample_signal():
    x = np.array([0.3])
    spec = dsp.stft(Waveform(x))
    assert spec.n_frames == 2
    np.testing.assert_allclose(dsp.istft(spec, 1).samples, x)


def test_istft_rejects_inconsistent_frequency_count():
    spec = dsp.stft(Waveform(np.ones(300)))
    bad = dsp.Spectrogram(spec.real[:-1], spec.imag[:-1])
    with pytest.raises(ValueError, match="F=64"):
        dsp.istft(bad, 300)


def test_unpack_requires_two_channels_and_zeroes_edge_imag():
    with pytest.raises(ValueError, match="extent 2"):
        dsp.unpack_ri(np.zeros((3, 65, 4)))
    arr = np.ones((2, 65, 4))
    spec = dsp.unpack_ri(arr)
    im = spec.imag.data
    assert np.all(im[0] == 0) and np.all(im[-1] == 0) and np.all(im[1:-1] == 1)


def test_pack_unpack_roundtrip():
    spec = dsp.stft(Waveform(np.random.default_rng(2).standard_normal(500)))
    back = dsp.unpack_ri(dsp.pack_ri(spec), spec.meta())
    np.testing.assert_array_equal(back.real.data, spec.real)


def test_waveform_validation():
    with pytest.raises(ValueError):
        Waveform(np.array([0.0, np.nan]))
    with pytest.raises(ValueError):
        Waveform(np.zeros(4), sample_rate=0)


def test_wav_roundtrip_within_quantisation(tmp_path):
    x = 0.5 * np.sin(np.arange(800) * 0.05)
    dsp.write_wav(tmp_path / "a.wav", Waveform(x))
    y = dsp.read_wav(tmp_path / "a.wav").samples
    assert np.max(np.abs(y - x)) <= 0.5 / 32768 + 1e-12


def test_wav_clipping_warns(tmp_path, caplog):
    with caplog.at_level(logging.WARNING):
        dsp.write_wav(tmp_path / "c.wav", Waveform(np.array([0.0, 1.5, -2.0])))
    assert "clipping 2 samples" in caplog.text
    y = dsp.read_wav(tmp_path / "c.wav").samples
    assert y[1] == 32767 / 32768 and y[2] == -1.0


def _raw_wav(path, channels=1, width=2, rate=8000):
    with wave.open(str(path), "wb") as f:
        f.setnchannels(channels)
        f.setsampwidth(width)
        f.setframerate(rate)
        f.writeframes(b"\0" * (channels * width * 10))


@pytest.mark.parametrize("kw,msg", [({"channels": 2}, "mono"), ({"width": 1}, "16-bit"), ({"rate": 16000}, "8000 Hz")])
def test_read_wav_rejects(tmp_path, kw, msg):
    _raw_wav(tmp_path / "x.wav", **kw)
    with pytest.raises(ValueError, match=msg):
        dsp.read_wav(tmp_path / "x.wav")


def test_read_wav_missing(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope.wav"):
        dsp.read_wav(tmp_path / "nope.wav")
