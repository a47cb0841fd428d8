import numpy as np
import pytest

from xcrossnet import tensor as T
from xcrossnet.dsp import Waveform
from xcrossnet.model import (CheckpointError, ModelConfig, ablate_cross_attention, desk_config, extract, forward,
                             init_params, load_checkpoint, full_config, param_count, param_ledger, randomize,
                             save_checkpoint, toy_config)
from xcrossnet.model import network as N

rng0 = np.random.default_rng


@pytest.fixture(scope="module")
def toy():
    cfg = toy_config()
    return cfg, randomize(init_params(cfg, 0, zero_residual=False), 1)


def test_toy_parameter_count_by_hand():
    # H=4 k=3 B=1 heads=2 d=8 B_spk=1 F=5 N_s=4 E=2 fb=2, kernels 3, 2 groups
    enc = 4 * 2 * 3 + 4
    rel = (4 * 8 + 8) + 2 * (4 * 4 * 3 + 4 + 4) + (4 * 8 * 3 + 4 + 4) + (4 * 8 * 3 + 4)
    spk_heads = (4 * 8 + 8) + (4 * 4 + 4)
    attn = (4 * 2 + 2) + (10 * 8 + 8) + 2 * (8 + 8 + 3 * 64 + 2 * 8) + (16 * 10 + 10) + (2 * 4 + 4)
    cross = 2 * (4 + 4 + 4 * 2 * 3 + 4 + 4) + (4 * 2 + 2) + (2 * 25 + 2 * 5) + (2 * 4 + 4)
    narrow = (4 + 4) + (4 * 8 + 8) + (8 * 3 + 8) + (8 * 4 + 4)
    dec = 4 * 2 + 2
    hand = enc + rel + spk_heads + attn + cross + narrow + dec
    assert param_count(toy_config()) == hand == 1460
    ledger = param_ledger(toy_config())
    assert ledger["ext.block0.attn"] == attn and ledger["ext.block0.cross"] == cross
    assert sum(ledger.values()) == hand


def test_full_config_in_target_band():
    n = param_count(full_config())
    assert 4.1e6 <= n <= 6.1e6


@pytest.mark.parametrize("kw,msg", [({"d_attn": 30}, "divisible"), ({"cross_groups": 5}, "divide"),
                                    ({"k": 4}, "odd"), ({"F": 64}, "frame_len")])
def test_config_validation(kw, msg):
    with pytest.raises(ValueError, match=msg):
        ModelConfig(**kw)


def test_config_dict_roundtrip_and_unknown_key():
    cfg = desk_config()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(KeyError, match="Hh"):
        ModelConfig.from_dict({"Hh": 3})
    assert desk_config().diff(desk_config(H=32)) == {"H": (16, 32)}


def test_forward_shapes_and_batch_consistency(toy):
    cfg, params = toy
    rng = rng0(0)
    y, a = rng.standard_normal((3, 37)), rng.standard_normal((3, 21))
    with T.no_grad():
        out = forward(y, a, params, cfg)
        assert out.waveform.shape == (3, 37)
        assert out.spec.shape == (3, 2, cfg.F, 11)
        assert out.logits.shape == (3, cfg.N_s)
        assert out.embedding.tokens.shape == (3, 7, cfg.d_attn)
        single = forward(y[1], a[1], params, cfg)
    np.testing.assert_allclose(single.waveform.data, out.waveform.data[1], atol=1e-12)
    assert np.all(out.spec.data[:, 1, 0] == 0) and np.all(out.spec.data[:, 1, -1] == 0)


def test_zero_initialised_blocks_are_identity():
    cfg = desk_config()
    params = init_params(cfg, 3)
    rng = rng0(1)
    x = T.DiffArray(rng.standard_normal((cfg.H, cfg.F, 9)))
    tok = T.DiffArray(rng.standard_normal((5, cfg.d_attn)))
    with T.no_grad():
        for b in range(cfg.B):
            p = f"ext.block{b}"
            assert np.array_equal(N.fused_gmhsa(x, tok, params, cfg, p + ".attn").data, x.data)
            assert np.array_equal(N.cross_band(x, params, cfg, p + ".cross").data, x.data)
            assert np.array_equal(N.narrow_band(x, params, cfg, p + ".narrow").data, x.data)
        for i in range(cfg.B_spk):
            assert np.array_equal(N.rel_block(x, params, cfg, f"spk.rel{i}").data, x.data)


def test_enrollment_invariance_iff_cross_attention_ablated(toy):
    cfg, params = toy
    params = randomize(init_params(cfg, 0, zero_residual=False), 2)
    rng = rng0(2)
    y = rng.standard_normal(40)
    a1, a2 = rng.standard_normal(24), rng.standard_normal(24)
    with T.no_grad():
        d = np.abs(forward(y, a1, params, cfg).waveform.data - forward(y, a2, params, cfg).waveform.data).max()
        assert d > 1e-8
        ablate_cross_attention(params, cfg)
        d = np.abs(forward(y, a1, params, cfg).waveform.data - forward(y, a2, params, cfg).waveform.data).max()
    assert d == 0.0


def test_pooled_embedding_ignores_frequency_order(toy):
    cfg, params = toy
    x = rng0(3).standard_normal((cfg.H, cfg.F, 8))
    perm = np.array([3, 0, 4, 1, 2])
    with T.no_grad():
        a = N.speaker_encode(T.DiffArray(x), params, cfg).pooled.data
        b = N.speaker_encode(T.DiffArray(x[:, perm]), params, cfg).pooled.data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_attention_maps_are_distributions(toy):
    cfg, params = toy
    maps = []
    with T.no_grad():
        forward(rng0(4).standard_normal(30), rng0(5).standard_normal(20), params, cfg, maps=maps)
    assert len(maps) == 2 * cfg.B
    for m in maps:
        np.testing.assert_allclose(m.sum(-1), 1.0, atol=1e-12)


def test_rcpe_offsets():
    cfg = toy_config(rcpe_max=20)
    x = T.DiffArray(np.zeros((cfg.H, cfg.F, 6)))
    table = N.positional_table(20, cfg.H)
    ev = N.rcpe(x, cfg, "eval").data
    np.testing.assert_array_equal(ev[:, 0, :], table[:6].T)
    tr = N.rcpe(x, cfg, "train", rng=rng0(0)).data
    hits = [o for o in range(15) if np.array_equal(tr[:, 0, :], table[o:o + 6].T)]
    assert len(hits) == 1
    with pytest.raises(ValueError, match="rcpe_max"):
        N.rcpe(T.DiffArray(np.zeros((cfg.H, cfg.F, 21))), cfg)
    with pytest.raises(ValueError, match="offset"):
        N.rcpe(x, cfg, offset=15)


def test_positional_table_layout():
    t = N.positional_table(10, 6)
    np.testing.assert_allclose(t[:, 0], np.sin(np.arange(10)))
    np.testing.assert_allclose(t[:, 1], np.cos(np.arange(10)))
    np.testing.assert_allclose(t[3, 4], np.sin(3 / 10000 ** (4 / 6)))


def test_block_input_errors(toy):
    cfg, params = toy
    with pytest.raises(ValueError, match="T >= 4"):
        N.rel_block(np.zeros((cfg.H, cfg.F, 3)), params, cfg, "spk.rel0")
    with pytest.raises(ValueError, match="d_attn"):
        N.fused_gmhsa(np.zeros((cfg.H, cfg.F, 4)), np.zeros((2, 5)), params, cfg, "ext.block0.attn")
    with pytest.raises(ValueError, match="F=7"):
        N.cross_band(np.zeros((cfg.H, 7, 4)), params, cfg, "ext.block0.cross")
    with pytest.raises(ValueError, match="sample rate"):
        forward(Waveform(np.zeros(40), 16000), np.zeros(20), params, cfg)


def test_checkpoint_roundtrip(tmp_path, toy):
    cfg, params = toy
    m = {k: np.full(v.shape, 0.5) for k, v in params.items()}
    save_checkpoint(tmp_path / "c.ckpt", cfg, {"param": params.state(), "m": m}, step=7, epoch=2, meta={"x": 1})
    ck = load_checkpoint(tmp_path / "c.ckpt", cfg)
    assert ck.step == 7 and ck.epoch == 2 and ck.meta == {"x": 1}
    for k, v in params.items():
        assert np.array_equal(ck.group("param")[k], v.data)
    assert np.array_equal(ck.group("m")["dec.bias"], m["dec.bias"])
    restored = ck.params()
    assert all(np.array_equal(restored[k].data, v.data) for k, v in params.items())


def test_checkpoint_rejects_mismatch_and_garbage(tmp_path, toy):
    cfg, params = toy
    save_checkpoint(tmp_path / "c.ckpt", cfg, {"param": params.state()})
    with pytest.raises(CheckpointError, match="H: checkpoint=4 expected=8"):
        load_checkpoint(tmp_path / "c.ckpt", toy_config(H=8))
    (tmp_path / "bad.ckpt").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_extract_is_deterministic_and_length_preserving():
    cfg = desk_config()
    params = init_params(cfg, 0)
    rng = rng0(6)
    y, a = Waveform(0.1 * rng.standard_normal(3001)), Waveform(0.1 * rng.standard_normal(2000))
    e1, e2 = extract(y, a, params, cfg), extract(y, a, params, cfg)
    assert len(e1) == 3001
    assert np.array_equal(e1.samples, e2.samples)
