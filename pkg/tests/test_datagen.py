import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from xcrossnet import datagen as D
from xcrossnet.dsp import Waveform


def snr_oracle(a, b):
    return 10 * np.log10(np.sum(a**2) / np.sum(b**2))


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    cfg = D.DatagenConfig(seed=3, speakers=8, train=6, dev=2, test=3, duration=(0.5, 1.0), enroll_duration=0.5)
    return D.build_dataset(cfg, out), out


@given(st.floats(-10, 15), st.integers(0, 2**31), st.integers(200, 900), st.integers(200, 900))
def test_mix_at_snr_exact(snr, seed, n1, n2):
    rng = np.random.default_rng(seed)
    s1, s2 = Waveform(rng.standard_normal(n1)), Waveform(0.1 * rng.standard_normal(n2))
    y, a, b = D.mix_at_snr(s1, s2, snr)
    assert len(y) == max(n1, n2)
    assert abs(snr_oracle(a.samples, b.samples) - snr) < 1e-9
    np.testing.assert_array_equal(y.samples, a.samples + b.samples)


def test_mix_at_snr_examples():
    s = Waveform(np.array([1.0, -1.0, 1.0, -1.0]))
    y, a, b = D.mix_at_snr(s, Waveform(np.array([0.5, 0.5, -0.5, -0.5])), 0.0)
    np.testing.assert_allclose(np.sum(b.samples**2), 4.0)
    with pytest.raises(ValueError, match="silent"):
        D.mix_at_snr(s, Waveform(np.zeros(4)), 0.0)


def test_tile_pad():
    np.testing.assert_array_equal(D.tile_to(np.array([1.0, 2.0, 3.0]), 7), [1, 2, 3, 1, 2, 3, 1])


def test_rir_identity_when_tail_off():
    h = D.make_rir(0.3, seed=1, length_samples=100, tail_gain=0.0)
    assert h[0] == 1.0 and not np.any(h[1:])
    x = Waveform(np.random.default_rng(0).standard_normal(50))
    np.testing.assert_array_equal(D.apply_reverb(x, h).samples, x.samples)


@pytest.mark.parametrize("t60", [0.2, 0.5, 0.9])
def test_rir_decay_slope_matches_t60(t60):
    h = D.make_rir(t60, seed=11, length_samples=int(t60 * 8000))
    t = np.arange(1, h.size) / 8000
    # fit log-energy of the tail; expected slope -60 dB per t60
    slope = np.polyfit(t, 10 * np.log10(h[1:] ** 2 + 1e-300), 1)[0]
    assert abs(slope * t60 + 60) < 6


def test_rir_tail_energy_normalised():
    h = D.make_rir(0.4, seed=2, length_samples=3000, tail_gain=0.5)
    assert np.sum(h[1:] ** 2) == pytest.approx(0.25, rel=1e-12)
    with pytest.raises(ValueError):
        D.make_rir(0.05, 0, 10)


def test_apply_reverb_matches_nested_loop():
    # integer-valued inputs make every partial sum exact
    rng = np.random.default_rng(4)
    x = rng.integers(-5, 6, 16).astype(float)
    h = rng.integers(-3, 4, 5).astype(float)
    ref = np.zeros(16)
    for n in range(16):
        for k in range(5):
            if n - k >= 0:
                ref[n] += h[k] * x[n - k]
    np.testing.assert_array_equal(D.apply_reverb(Waveform(x), h).samples, ref)


@pytest.mark.parametrize("kind", ["white", "pink"])
def test_add_noise_snr(kind):
    x = Waveform(np.sin(np.arange(4000) * 0.1))
    noisy, n = D.add_noise(x, kind, 7.0, seed=5)
    assert abs(snr_oracle(x.samples, n) - 7.0) < 1e-9
    np.testing.assert_allclose(noisy.samples, x.samples + n)
    with pytest.raises(ValueError, match="noise kind"):
        D.add_noise(x, "brown", 0.0, 0)


def test_pink_noise_slope():
    n = D.make_noise("pink", 2**16, seed=1)
    p = np.abs(np.fft.rfft(n)) ** 2
    f = np.arange(p.size)
    lo, hi = p[(f > 100) & (f < 200)].mean(), p[(f > 1000) & (f < 2000)].mean()
    assert 5 < lo / hi < 20  # ~10x for 1/f


def test_utterance_is_deterministic_and_peak_normalised():
    spk = D.SyntheticSpeaker.create(2, global_seed=0)
    a = D.synth_utterance(spk, 99, 1.0)
    b = D.synth_utterance(spk, 99, 1.0)
    np.testing.assert_array_equal(a.samples, b.samples)
    assert np.max(np.abs(a.samples)) == pytest.approx(0.9)
    assert len(a) == 8000
    c = D.synth_utterance(spk, 100, 1.0)
    assert not np.array_equal(a.samples, c.samples)


def test_speakers_have_distinct_pitch():
    f0 = [s.f0 for s in D.speakers_for(8)]
    assert min(np.diff(sorted(f0))) > 10


def test_speaker_split_errors():
    with pytest.raises(ValueError, match="disjoint"):
        D.speaker_split(D.DatagenConfig(speakers=3))
    with pytest.raises(ValueError, match="at least 2"):
        D.speaker_split(D.DatagenConfig(speakers=1, test=0))


def test_dataset_layout(small_dataset):
    m, out = small_dataset
    assert len(m.entries) == 11
    assert len(list((out / "speakers").iterdir())) == 8
    train_spk = {e.speaker_id for e in m.split("train") + m.split("dev")} | {e.interferer_id for e in m.split("train")}
    test_spk = {e.speaker_id for e in m.split("test")} | {e.interferer_id for e in m.split("test")}
    assert not train_spk & test_spk
    for e in m.entries:
        assert e.enroll_seed != e.target_seed
        assert e.speaker_id != e.interferer_id
        assert 0.0 <= e.snr_db <= 5.0


def test_manifest_roundtrip_and_header(small_dataset):
    m, out = small_dataset
    first = json.loads((out / D.MANIFEST_NAME).read_text().splitlines()[0])
    assert first["kind"] == "header" and first["global_seed"] == 3
    back = D.DatasetManifest.read(out)
    assert back.digest() == m.digest()
    assert back.entries[0] == m.entries[0]


def test_stored_audio_mixes_at_manifest_snr(small_dataset):
    m, _ = small_dataset
    for e in m.entries:
        w = D.load_entry(m, e)
        assert abs(D.measured_snr_db(w["target"], w["interferer"]) - e.snr_db) < 0.01
        assert np.max(np.abs(w["mixture"].samples)) <= 0.9 + 1e-4


def test_missing_audio_names_row(small_dataset, tmp_path):
    m, out = small_dataset
    e = m.split("dev")[0]
    moved = D.DatasetManifest(m.global_seed, m.config, m.entries, tmp_path)
    with pytest.raises(FileNotFoundError, match=e.uid):
        D.load_entry(moved, e)


def test_same_seed_same_digest(tmp_path):
    cfg = D.DatagenConfig(seed=5, speakers=4, train=2, dev=1, test=1, duration=(0.5, 0.5), enroll_duration=0.5)
    a = D.build_dataset(cfg, tmp_path / "a").digest()
    b = D.build_dataset(cfg, tmp_path / "b").digest()
    c = D.build_dataset(D.DatagenConfig(**{**cfg.__dict__, "seed": 6}), tmp_path / "c").digest()
    assert a == b != c


def test_reverberant_noisy_variant(tmp_path):
    cfg = D.DatagenConfig(seed=1, speakers=4, train=2, dev=0, test=0, duration=(0.5, 0.5), whamr_style=True)
    m = D.build_dataset(cfg, tmp_path)
    for e in m.entries:
        assert e.rir_seed is not None and e.noise_snr_db is not None
        w = D.load_entry(m, e)
        resid = w["mixture"].samples - w["target"].samples - w["interferer"].samples
        assert np.sum(resid**2) > 1e-4  # reverb tails and noise present
