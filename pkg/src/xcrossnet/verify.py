"""Self-check suites behind ``xcrossnet verify``.

Each suite returns a list of ``Check`` records (name, pass/fail, measured
value, threshold). The test-suite reuses them, and adds independent oracles.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import dsp
from . import tensor as T
from .gradcheck import gradcheck
from .losses import loss_ce, loss_mag, loss_sisdr, loss_total
from .metrics import si_sdr, si_sdri
from .model import network
from .model.config import desk_config, full_config, toy_config
from .model.params import init_params, param_count, param_ledger, randomize

PARAM_BAND = (4.1e6, 6.1e6)
PARAM_TARGET = 5.1e6
GRAD_TOL = 1e-4
DSP_TOL = 1e-10


@dataclass
class Check:
    name: str
    passed: bool
    value: float | None = None
    threshold: str = ""
    detail: str = ""

    def line(self) -> str:
        v = "" if self.value is None else f" value={self.value:.6g}"
        th = f" ({self.threshold})" if self.threshold else ""
        d = f" {self.detail}" if self.detail else ""
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}:{v}{th}{d}"


# -- params ------------------------------------------------------------------------------


def suite_params() -> list:
    cfg = full_config()
    n = param_count(cfg)
    ledger = param_ledger(cfg)
    lines = "\n".join(f"    {k:<28}{v:>10,}" for k, v in ledger.items())
    lo, hi = PARAM_BAND
    return [
        Check("param_count_full_config", lo <= n <= hi, float(n),
              f"band [{lo / 1e6:.1f}M, {hi / 1e6:.1f}M], target {PARAM_TARGET / 1e6:.1f}M",
              f"\n  ledger (H={cfg.H}, k={cfg.k}, B={cfg.B}, heads={cfg.heads}, N_s={cfg.N_s}):\n{lines}"),
        Check("ledger_sums_to_total", sum(ledger.values()) == n, float(sum(ledger.values()))),
    ]


# -- dsp ---------------------------------------------------------------------------------


def suite_dsp(n_signals: int = 100, seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    worst = 0.0
    lin = 0.0
    for _ in range(n_signals):
        n = int(rng.integers(1000, 40001))
        x = rng.standard_normal(n)
        spec = dsp.stft(dsp.Waveform(x))
        back = dsp.istft(spec, n).samples
        worst = max(worst, float(np.linalg.norm(back - x) / np.linalg.norm(x)))
    for _ in range(20):
        n = int(rng.integers(1000, 8001))
        x1, x2 = rng.standard_normal(n), rng.standard_normal(n)
        a, b = rng.standard_normal(2)
        lhs = dsp.stft(dsp.Waveform(a * x1 + b * x2)).complex()
        rhs = a * dsp.stft(dsp.Waveform(x1)).complex() + b * dsp.stft(dsp.Waveform(x2)).complex()
        lin = max(lin, float(np.linalg.norm(lhs - rhs) / np.linalg.norm(rhs)))
    x = rng.standard_normal(3001)
    ref = dsp.stft(dsp.Waveform(x))
    d = dsp.stft_diff(x).data
    route = float(max(np.max(np.abs(d[0] - ref.real)), np.max(np.abs(d[1] - ref.imag))))
    return [
        Check("stft_istft_roundtrip_rel_l2", worst < DSP_TOL, worst, f"< {DSP_TOL:g} over {n_signals} signals"),
        Check("stft_linearity_rel", lin < DSP_TOL, lin, f"< {DSP_TOL:g}"),
        Check("dft_route_matches_fft", route < 1e-10, route, "< 1e-10"),
    ]


# -- metrics -----------------------------------------------------------------------------


def _si_sdr_oracle(est, ref) -> float:
    # direct formula: project est onto ref, compare energies
    est, ref = np.asarray(est, float), np.asarray(ref, float)
    target = (np.dot(est, ref) / np.dot(ref, ref)) * ref
    noise = est - target
    return 10 * np.log10(np.sum(target**2) / np.sum(noise**2))


def suite_metrics(n_trials: int = 1000, seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    inv, orc = 0.0, 0.0
    for _ in range(n_trials):
        n = int(rng.integers(16, 512))
        s = rng.standard_normal(n)
        est = s + rng.uniform(0.05, 2.0) * rng.standard_normal(n)
        beta = float(np.exp(rng.uniform(-5, 5))) * rng.choice([-1.0, 1.0])
        base = si_sdr(est, s)
        inv = max(inv, abs(si_sdr(beta * est, s) - base))
        orc = max(orc, abs(base - _si_sdr_oracle(est, s)))
    hand = si_sdr(np.array([1.0, 1, 0, 0]), np.array([1.0, 0, 0, 0]))

    s = rng.standard_normal((2, 800))
    est = s + 0.3 * rng.standard_normal((2, 800))
    logits = rng.standard_normal((2, 4))
    lab = np.array([1, 3])
    lb = loss_total(est, s, logits, lab)
    parts = (lb.mag + lb.sisdr) + lb.ce
    add_err = abs(lb.total.item() - parts)
    y = s + rng.standard_normal((2, 800))
    ident = max(abs(si_sdri(y[i], s[i], y[i])) for i in range(2))
    return [
        Check("si_sdr_scale_invariance_db", inv < 1e-9, inv, f"< 1e-9 dB over {n_trials} triples"),
        Check("si_sdr_hand_example_db", hand == 0.0, hand, "== 0 exactly"),
        Check("si_sdr_vs_direct_oracle_db", orc < 1e-9, orc, "< 1e-9 dB"),
        Check("loss_total_additivity", add_err == 0.0, add_err, "== 0 exactly"),
        Check("identity_estimate_si_sdri", ident == 0.0, ident, "== 0 exactly"),
    ]


# -- shapes / structure ------------------------------------------------------------------


def suite_shapes(seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    out = []
    cfg = desk_config()
    params = init_params(cfg, seed)
    lens_ok = True
    for n in (997, 8000, 8063):
        y, a = rng.standard_normal((2, n)), rng.standard_normal((2, 4000))
        with T.no_grad():
            o = network.forward(y, a, params, cfg)
        lens_ok &= o.waveform.shape == (2, n) and o.logits.shape == (2, cfg.N_s)
    out.append(Check("forward_output_shapes", bool(lens_ok), detail="waveform [B, L], logits [B, N_s]"))

    # zero-initialised residual outputs make every extractor block an identity map
    r = T.DiffArray(rng.standard_normal((2, cfg.H, cfg.F, 20)))
    with T.no_grad():
        spk = network.speaker_encode(T.DiffArray(rng.standard_normal((2, cfg.H, cfg.F, 12))), params, cfg)
        err = 0.0
        x = r
        for b in range(cfg.B):
            for blk, fn in (("attn", lambda z, p: network.fused_gmhsa(z, spk.tokens, params, cfg, p)),
                            ("cross", lambda z, p: network.cross_band(z, params, cfg, p)),
                            ("narrow", lambda z, p: network.narrow_band(z, params, cfg, p))):
                err = max(err, float(np.max(np.abs(fn(x, f"ext.block{b}.{blk}").data - x.data))))
        ext = network.extractor(r, spk, params, cfg, "eval")
        pos = network.positional_table(cfg.rcpe_max, cfg.H)[:20].T[:, None, :]
        ext_err = float(np.max(np.abs(ext.data - (r.data + pos))))
    out.append(Check("zero_init_blocks_identity", err == 0.0, err, "== 0 exactly"))
    out.append(Check("zero_init_extractor_identity_after_rcpe", ext_err == 0.0, ext_err, "== 0 exactly"))

    # enrollment invariance iff the cross-attention half is zeroed
    p2 = randomize(init_params(cfg, seed + 1, zero_residual=False), seed + 2)
    y = rng.standard_normal(4000)
    a1, a2 = rng.standard_normal(3000), rng.standard_normal(3000)
    with T.no_grad():
        d_on = np.max(np.abs(network.forward(y, a1, p2, cfg).waveform.data - network.forward(y, a2, p2, cfg).waveform.data))
        network.ablate_cross_attention(p2, cfg)
        d_off = np.max(np.abs(network.forward(y, a1, p2, cfg).waveform.data - network.forward(y, a2, p2, cfg).waveform.data))
    out.append(Check("enrollment_sensitive_with_cross_attention", d_on > 1e-6, float(d_on), "> 1e-6"))
    out.append(Check("enrollment_invariant_without_cross_attention", d_off == 0.0, float(d_off), "== 0 exactly"))

    # 4 s input (501 frames) through a model built for 1 s
    y = rng.standard_normal(32000)
    with T.no_grad():
        o = network.forward(y, rng.standard_normal(16000), params, cfg)
    n_frames = dsp.n_frames(32000, cfg.hop)
    ok = o.waveform.shape == (32000,) and bool(np.all(np.isfinite(o.waveform.data)))
    out.append(Check("long_input_rcpe", ok, float(n_frames), "T=501 frames, finite output"))
    return out


# -- gradients ---------------------------------------------------------------------------


def _proj_loss(out, rng):
    w = rng.standard_normal(out.shape)
    return lambda o: T.sum_(o * w)


def _prim_cases(rng):
    def r(*s, lo=None):
        a = rng.standard_normal(s)
        if lo is not None:
            a = np.sign(a) * (np.abs(a) + lo)
        return T.DiffArray(a, requires_grad=True)

    pos = lambda *s: T.DiffArray(rng.uniform(0.5, 2.0, s), requires_grad=True)  # noqa: E731
    idx = np.array([2, 0, 2, 1, 3])
    return {
        "add": lambda: ((a := r(3, 4)), (b := r(4)), lambda: T.add(a, b)),
        "sub": lambda: ((a := r(3, 4)), (b := r(3, 1)), lambda: T.sub(a, b)),
        "mul": lambda: ((a := r(3, 4)), (b := r(3, 4)), lambda: T.mul(a, b)),
        "div": lambda: ((a := r(3, 4)), (b := pos(3, 4)), lambda: T.div(a, b)),
        "neg": lambda: ((a := r(5),), lambda: T.neg(a)),
        "power": lambda: ((a := pos(5),), lambda: T.power(a, 2.5)),
        "exp": lambda: ((a := r(5),), lambda: T.exp(a)),
        "log": lambda: ((a := pos(5),), lambda: T.log(a)),
        "sqrt": lambda: ((a := pos(5),), lambda: T.sqrt(a)),
        "abs": lambda: ((a := r(6, lo=0.1),), lambda: T.abs_(a)),
        "sigmoid": lambda: ((a := r(6),), lambda: T.sigmoid(a)),
        "relu": lambda: ((a := r(6, lo=0.1),), lambda: T.relu(a)),
        "silu": lambda: ((a := r(6),), lambda: T.silu(a)),
        "prelu": lambda: ((a := r(2, 3, 4, lo=0.1)), (s := r(3)), lambda: T.prelu(a, s, axis=1)),
        "glu": lambda: ((a := r(2, 6, 3),), lambda: T.glu(a, axis=1)),
        "sum": lambda: ((a := r(3, 4, 2),), lambda: T.sum_(a, axis=(0, 2), keepdims=True)),
        "mean": lambda: ((a := r(3, 4, 2),), lambda: T.mean(a, axis=1)),
        "softmax_lastdim": lambda: ((a := r(3, 5),), lambda: T.softmax(a)),
        "log_softmax_lastdim": lambda: ((a := r(3, 5),), lambda: T.log_softmax(a)),
        "reshape": lambda: ((a := r(3, 4),), lambda: T.reshape(a, (2, 6))),
        "transpose": lambda: ((a := r(2, 3, 4),), lambda: T.transpose(a, (2, 0, 1))),
        "concat": lambda: ((a := r(2, 3)), (b := r(2, 2)), lambda: T.concat([a, b], axis=1)),
        "slice": lambda: ((a := r(4, 5),), lambda: T.getitem(a, (slice(1, 3), slice(None, None, 2)))),
        "take": lambda: ((a := r(3, 4),), lambda: T.take(a, idx, axis=1)),
        "index_add": lambda: ((a := r(3, 5),), lambda: T.index_add(a, idx, 4, axis=1)),
        "embedding_add": lambda: ((x := r(2, 3, 4)), (tb := r(10, 3)),
                                  lambda: T.embedding_add(x, tb, np.arange(3, 7), channel_axis=1, position_axis=2)),
        "matmul": lambda: ((a := r(2, 3, 4)), (b := r(4, 5)), lambda: T.matmul(a, b)),
        "linear": lambda: ((x := r(2, 3, 4)), (w := r(3, 5)), (bb := r(5)),
                           lambda: T.linear(x, w, bb, axis=1)),
        "conv1d_grouped": lambda: ((x := r(2, 4, 9)), (w := r(6, 2, 3)), (bb := r(6)),
                                   lambda: T.conv1d(x, w, bb, axis=-1, channel_axis=1, stride=2, padding=(1, 2), groups=2)),
        "layer_norm": lambda: ((x := r(2, 3, 5)), (w := r(3, 1)), (bb := r(3, 1)),
                               lambda: T.layer_norm(x, w, bb, axes=(1,))),
    }


def _run(name, f, arrays) -> Check:
    rep = gradcheck(f, arrays)
    w = rep.worst()
    return Check(f"grad:{name}", rep.max_rel_err < GRAD_TOL, rep.max_rel_err, f"< {GRAD_TOL:g}",
                 f"worst={w.name}" if w else "")


def suite_gradcheck(seed: int = 0, include_model: bool = True) -> list:
    rng = np.random.default_rng(seed)
    out = []
    for name, make in _prim_cases(rng).items():
        *arrs, fn = make()
        arrs = [a for item in arrs for a in (item if isinstance(item, tuple) else (item,))]
        probe = fn()
        loss = _proj_loss(probe, rng)
        out.append(_run(name, lambda fn=fn, loss=loss: loss(fn()), {f"in{i}": a for i, a in enumerate(arrs)}))

    cfg = toy_config()
    params = randomize(init_params(cfg, seed, zero_residual=False), seed)
    H, F = cfg.H, cfg.F
    x = T.DiffArray(rng.standard_normal((1, H, F, 6)), requires_grad=True)
    xa = T.DiffArray(rng.standard_normal((1, H, F, 4)), requires_grad=True)
    tok = T.DiffArray(rng.standard_normal((1, 4, cfg.d_attn)), requires_grad=True)
    packed = T.DiffArray(rng.standard_normal((1, 2, F, 6)), requires_grad=True)

    def block(name, fn, inputs, prefix):
        probe = fn()
        w = rng.standard_normal(probe.shape)
        arrays = dict(inputs)
        arrays.update(params.subset(prefix))
        out.append(_run(f"block:{name}", lambda: T.sum_(fn() * w), arrays))

    block("speech_encoder", lambda: network.speech_encode(packed, params, cfg), {"x": packed}, "enc.")
    block("decoder", lambda: network.decode(x, params, cfg), {"x": x}, "dec.")
    block("rel_block", lambda: network.rel_block(xa, params, cfg, "spk.rel0"), {"x": xa}, "spk.rel0.")
    block("speaker_encoder", lambda: network.speaker_encode(xa, params, cfg).logits, {"x": xa}, "spk.")
    block("speaker_tokens", lambda: network.speaker_encode(xa, params, cfg).tokens, {"x": xa}, "spk.token.")
    block("rcpe", lambda: network.rcpe(x, cfg, offset=3), {"x": x}, "__none__")
    block("fused_gmhsa", lambda: network.fused_gmhsa(x, tok, params, cfg, "ext.block0.attn"),
          {"x": x, "tokens": tok}, "ext.block0.attn.")
    block("cross_band", lambda: network.cross_band(x, params, cfg, "ext.block0.cross"), {"x": x}, "ext.block0.cross.")
    block("narrow_band", lambda: network.narrow_band(x, params, cfg, "ext.block0.narrow"), {"x": x}, "ext.block0.narrow.")

    # losses
    s = rng.standard_normal((2, 24))
    est = T.DiffArray(s + 0.5 * rng.standard_normal((2, 24)), requires_grad=True)
    logits = T.DiffArray(rng.standard_normal((2, 4)), requires_grad=True)
    out.append(_run("loss:mag", lambda: loss_mag(est, s, 8, 4), {"est": est}))
    out.append(_run("loss:sisdr", lambda: loss_sisdr(est, s)[0], {"est": est}))
    out.append(_run("loss:ce", lambda: loss_ce(logits, np.array([1, 3])), {"logits": logits}))

    if include_model:
        # full model: T=6 mixture frames (L=20), T_a=4 enrollment frames (L=12)
        y = rng.standard_normal((1, 20))
        a = rng.standard_normal((1, 12))
        tgt = rng.standard_normal((1, 20))

        # The training loss alone is blind to spectra that are constant over (F, T): they
        # synthesise to an impulse on the zero of the periodic window. Random projections
        # of the spectrum, waveform and logits keep every parameter observable.
        o = network.forward(y, a, params, cfg, mode="eval")
        ws, ww, wl = (rng.standard_normal(v.shape) for v in (o.spec, o.waveform, o.logits))

        def full():
            o = network.forward(y, a, params, cfg, mode="train", rng=np.random.default_rng(5))
            lt = loss_total(o.waveform, tgt, o.logits, np.array([2]), cfg.frame_len, cfg.hop).total
            return lt + T.sum_(o.spec * ws) + T.sum_(o.waveform * ww) + T.sum_(o.logits * wl)

        out.append(_run("model:full_toy", full, dict(params.items())))
    return out


SUITES = {
    "params": suite_params,
    "dsp": suite_dsp,
    "metrics": suite_metrics,
    "shapes": suite_shapes,
    "gradcheck": suite_gradcheck,
}


def run_suite(name: str, printer=print) -> bool:
    names = list(SUITES) if name == "all" else [name]
    if any(n not in SUITES for n in names):
        raise ValueError(f"unknown suite {name!r}; choose from {sorted(SUITES) + ['all']}")
    ok = True
    for n in names:
        t0 = time.time()
        checks = SUITES[n]()
        for c in checks:
            printer(c.line())
            ok &= c.passed
        printer(f"-- suite {n}: {sum(c.passed for c in checks)}/{len(checks)} passed in {time.time() - t0:.1f}s")
    return ok
