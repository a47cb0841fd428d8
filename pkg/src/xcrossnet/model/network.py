"""Forward computation of the extraction network.

Feature maps are laid out [..., H, F, T] (channel, frequency, time) with an
optional leading batch axis; every block maps that shape to itself.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from .. import dsp
from .. import tensor as T
from ..dsp import Waveform
from ..tensor import DiffArray
from .config import ModelConfig
from .params import ModelParameters

CH, FQ, TM = -3, -2, -1


@dataclass
class SpeakerEmbedding:
    tokens: DiffArray  # [..., T_a, d_attn]
    pooled: DiffArray  # [..., H]
    logits: DiffArray  # [..., N_s]


@dataclass
class ForwardOutput:
    waveform: DiffArray  # [..., L]
    spec: DiffArray  # [..., 2, F, T], imag zeroed at DC/Nyquist
    logits: DiffArray
    embedding: SpeakerEmbedding


def _same(k: int) -> int:
    return (k - 1) // 2


# -- speech encoder / decoder ------------------------------------------------------


def speech_encode(packed, params: ModelParameters, cfg: ModelConfig) -> DiffArray:
    """[..., 2, F, T] -> [..., H, F, T]: a time conv whose weights are shared across frequency."""
    packed = T.as_diff(packed)
    if packed.ndim < 3 or packed.shape[CH] != 2:
        raise ValueError(f"speech_encode: expected [..., 2, F, T], got {packed.shape}")
    if packed.shape[TM] < 1:
        raise ValueError("speech_encode: need at least one frame")
    return T.conv1d(packed, params["enc.weight"], params["enc.bias"], axis=TM, channel_axis=CH, padding=_same(cfg.k))


def decode(e, params: ModelParameters, cfg: ModelConfig) -> DiffArray:
    """[..., H, F, T] -> [..., 2, F, T] real/imag estimate via a pointwise H->2 linear."""
    e = T.as_diff(e)
    if e.ndim < 3 or e.shape[CH] != cfg.H:
        raise ValueError(f"decode: expected [..., {cfg.H}, F, T], got {e.shape}")
    return T.linear(e, params["dec.weight"], params["dec.bias"], axis=CH)


# -- speaker encoder ---------------------------------------------------------------------


def rel_block(x, params: ModelParameters, cfg: ModelConfig, prefix: str) -> DiffArray:
    """GLU gate followed by a two-level U-Net over time, with a residual around both."""
    x = T.as_diff(x)
    t = x.shape[TM]
    if t < 4:
        raise ValueError(f"rel_block: need T >= 4 to downsample twice, got T={t}")
    p = lambda n: params[f"{prefix}.{n}"]  # noqa: E731
    pad = _same(cfg.rel_kernel)

    g = T.glu(T.linear(x, p("glu.weight"), p("glu.bias"), axis=CH), axis=CH)
    d1 = T.conv1d(g, p("down1.weight"), p("down1.bias"), axis=TM, channel_axis=CH, stride=2, padding=pad)
    d1 = T.prelu(d1, p("down1.slope"), axis=CH)
    d2 = T.conv1d(d1, p("down2.weight"), p("down2.bias"), axis=TM, channel_axis=CH, stride=2, padding=pad)
    d2 = T.prelu(d2, p("down2.slope"), axis=CH)

    u1 = T.take(d2, np.arange(d1.shape[TM]) // 2, axis=TM)
    u1 = T.conv1d(T.concat([u1, d1], axis=CH), p("up1.weight"), p("up1.bias"), axis=TM, channel_axis=CH, padding=pad)
    u1 = T.prelu(u1, p("up1.slope"), axis=CH)
    u0 = T.take(u1, np.arange(t) // 2, axis=TM)
    out = T.conv1d(T.concat([u0, g], axis=CH), p("out.weight"), p("out.bias"), axis=TM, channel_axis=CH, padding=pad)
    return x + out


def speaker_encode(r_a, params: ModelParameters, cfg: ModelConfig) -> SpeakerEmbedding:
    x = T.as_diff(r_a)
    if x.ndim < 3 or x.shape[CH] != cfg.H:
        raise ValueError(f"speaker_encode: expected [..., {cfg.H}, F, T_a], got {x.shape}")
    for i in range(cfg.B_spk):
        x = rel_block(x, params, cfg, f"spk.rel{i}")
    m = T.mean(x, axis=FQ)  # [..., H, T_a]
    nd = m.ndim
    mt = T.transpose(m, tuple(range(nd - 2)) + (nd - 1, nd - 2))  # [..., T_a, H]
    tokens = T.linear(mt, params["spk.token.weight"], params["spk.token.bias"])
    pooled = T.mean(m, axis=-1)
    logits = T.linear(pooled, params["spk.cls.weight"], params["spk.cls.bias"])
    return SpeakerEmbedding(tokens, pooled, logits)


# -- extractor ----------------------------------------------------------------------------


@functools.lru_cache(maxsize=8)
def positional_table(n_pos: int, dim: int) -> np.ndarray:
    """Sinusoidal [n_pos, dim] table: sin on even columns, cos on odd columns."""
    pos = np.arange(n_pos)[:, None]
    i = np.arange((dim + 1) // 2)[None, :]
    ang = pos / np.power(10000.0, 2.0 * i / dim)
    table = np.empty((n_pos, 2 * i.shape[1]))
    table[:, 0::2] = np.sin(ang)
    table[:, 1::2] = np.cos(ang)
    table = table[:, :dim].copy()
    table.setflags(write=False)
    return table


def rcpe(x, cfg: ModelConfig, mode: str = "eval", rng: np.random.Generator | None = None, offset: int | None = None) -> DiffArray:
    """Add a contiguous chunk of the positional table; random start in train mode, 0 in eval."""
    x = T.as_diff(x)
    t = x.shape[TM]
    if t > cfg.rcpe_max:
        raise ValueError(f"rcpe: T={t} exceeds rcpe_max={cfg.rcpe_max}; increase model.rcpe_max")
    if offset is None:
        if mode == "train":
            if rng is None:
                raise ValueError("rcpe: train mode needs an rng")
            offset = int(rng.integers(0, cfg.rcpe_max - t + 1))
        elif mode == "eval":
            offset = 0
        else:
            raise ValueError(f"rcpe: unknown mode {mode!r}")
    if not 0 <= offset <= cfg.rcpe_max - t:
        raise ValueError(f"rcpe: offset {offset} out of range for T={t}")
    table = positional_table(cfg.rcpe_max, cfg.H)
    return T.embedding_add(x, table, offset + np.arange(t), channel_axis=CH, position_axis=TM)


def _attention(q_in, kv_in, params, prefix: str, heads: int, maps: list | None):
    p = lambda n: params[f"{prefix}.{n}"]  # noqa: E731
    q = T.linear(q_in, p("q.weight"), p("q.bias"))
    k = T.linear(kv_in, p("k.weight"))
    v = T.linear(kv_in, p("v.weight"), p("v.bias"))
    d = q.shape[-1]
    dh = d // heads

    def split(z):
        z = T.reshape(z, z.shape[:-1] + (heads, dh))
        nd = z.ndim
        return T.transpose(z, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))  # [..., h, n, dh]

    qh, kh, vh = split(q), split(k), split(v)
    nd = kh.ndim
    scores = T.matmul(qh, T.transpose(kh, tuple(range(nd - 2)) + (nd - 1, nd - 2))) * (1.0 / np.sqrt(dh))
    attn = T.softmax(scores)
    if maps is not None:
        maps.append(attn.data)
    out = T.matmul(attn, vh)  # [..., h, n, dh]
    nd = out.ndim
    out = T.transpose(out, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))
    return T.reshape(out, out.shape[:-2] + (d,))


def fused_gmhsa(x, spk_tokens, params: ModelParameters, cfg: ModelConfig, prefix: str, maps: list | None = None) -> DiffArray:
    """Frame-token self-attention and cross-attention to speaker tokens, concatenated, residual.

    Each frame's [H, F] slice is squeezed per bin to ``attn_squeeze``
    channels, flattened and projected to ``d_attn``; the concatenated
    attention outputs are mapped back to [H, F] the same way.
    """
    x, spk_tokens = T.as_diff(x), T.as_diff(spk_tokens)
    if spk_tokens.shape[-1] != cfg.d_attn:
        raise ValueError(f"fused_gmhsa: speaker tokens have width {spk_tokens.shape[-1]}, expected d_attn={cfg.d_attn}")
    p = lambda n: params[f"{prefix}.{n}"]  # noqa: E731
    H, F, t = x.shape[CH], x.shape[FQ], x.shape[TM]
    E = cfg.attn_squeeze
    lead = x.shape[:-3]
    nl = len(lead)

    z = T.linear(x, p("squeeze.weight"), p("squeeze.bias"), axis=CH)  # [..., E, F, T]
    z = T.transpose(z, tuple(range(nl)) + (nl + 2, nl, nl + 1))  # [..., T, E, F]
    z = T.reshape(z, lead + (t, E * F))
    z = T.linear(z, p("proj.weight"), p("proj.bias"))  # [..., T, d]

    a = T.layer_norm(z, p("self.norm.weight"), p("self.norm.bias"), axes=(-1,), eps=cfg.ln_eps)
    sa = _attention(a, a, params, f"{prefix}.self", cfg.heads, maps)
    c = T.layer_norm(z, p("cross.norm.weight"), p("cross.norm.bias"), axes=(-1,), eps=cfg.ln_eps)
    ca = _attention(c, spk_tokens, params, f"{prefix}.cross", cfg.heads, maps)

    o = T.linear(T.concat([sa, ca], axis=-1), p("out.weight"), p("out.bias"))  # [..., T, E*F]
    o = T.reshape(o, lead + (t, E, F))
    o = T.transpose(o, tuple(range(nl)) + (nl + 1, nl + 2, nl))  # [..., E, F, T]
    o = T.linear(o, p("expand.weight"), p("expand.bias"), axis=CH)  # [..., H, F, T]
    return x + o


def _freq_conv(x, params, cfg: ModelConfig, prefix: str) -> DiffArray:
    p = lambda n: params[f"{prefix}.{n}"]  # noqa: E731
    h = T.layer_norm(x, p("norm.weight"), p("norm.bias"), axes=(CH,), eps=cfg.ln_eps)
    h = T.conv1d(h, p("conv.weight"), p("conv.bias"), axis=FQ, channel_axis=CH,
                 padding=_same(cfg.cross_kernel), groups=cfg.cross_groups)
    return T.prelu(h, p("slope"), axis=CH)


def cross_band(x, params: ModelParameters, cfg: ModelConfig, prefix: str) -> DiffArray:
    """Frequency conv -> full-band linear -> frequency conv, with a residual around the chain."""
    x = T.as_diff(x)
    p = lambda n: params[f"{prefix}.{n}"]  # noqa: E731
    F = x.shape[FQ]
    wf = p("fb.freq.weight")
    if wf.shape[-1] != F:
        raise ValueError(f"cross_band: full-band linear expects F={wf.shape[-1]}, input has F={F}")
    h = _freq_conv(x, params, cfg, f"{prefix}.conv1")
    u = T.silu(T.linear(h, p("fb.in.weight"), p("fb.in.bias"), axis=CH))  # [..., fb, F, T]
    u = T.matmul(wf, u) + p("fb.freq.bias")  # per hidden channel: [F, F] @ [F, T]
    h = T.linear(u, p("fb.out.weight"), p("fb.out.bias"), axis=CH)
    h = _freq_conv(h, params, cfg, f"{prefix}.conv2")
    return x + h


def narrow_band(x, params: ModelParameters, cfg: ModelConfig, prefix: str) -> DiffArray:
    """Per-bin convolution block: LN, H->2H, SiLU, depthwise time conv, 2H->H, residual."""
    x = T.as_diff(x)
    p = lambda n: params[f"{prefix}.{n}"]  # noqa: E731
    h = T.layer_norm(x, p("norm.weight"), p("norm.bias"), axes=(CH,), eps=cfg.ln_eps)
    h = T.silu(T.linear(h, p("in.weight"), p("in.bias"), axis=CH))
    h = T.conv1d(h, p("tconv.weight"), p("tconv.bias"), axis=TM, channel_axis=CH,
                 padding=_same(cfg.nb_kernel), groups=2 * cfg.H)
    h = T.linear(h, p("out.weight"), p("out.bias"), axis=CH)
    return x + h


def extractor(r_y, spk: SpeakerEmbedding, params: ModelParameters, cfg: ModelConfig, mode: str = "eval",
              rng: np.random.Generator | None = None, maps: list | None = None) -> DiffArray:
    x = rcpe(r_y, cfg, mode, rng)
    for b in range(cfg.B):
        prefix = f"ext.block{b}"
        x = fused_gmhsa(x, spk.tokens, params, cfg, f"{prefix}.attn", maps)
        x = cross_band(x, params, cfg, f"{prefix}.cross")
        x = narrow_band(x, params, cfg, f"{prefix}.narrow")
    return x


# -- full pipeline ----------------------------------------------------------------------------


def _samples(w, cfg: ModelConfig, what: str) -> np.ndarray:
    if isinstance(w, Waveform):
        if w.sample_rate != cfg.sample_rate:
            raise ValueError(f"{what}: sample rate {w.sample_rate} Hz, model expects {cfg.sample_rate} Hz")
        x = w.samples
    else:
        x = np.asarray(w.data if isinstance(w, DiffArray) else w, dtype=np.float64)
    if x.shape[-1] < 1:
        raise ValueError(f"{what}: empty waveform")
    return x


def input_scale(x: np.ndarray) -> np.ndarray:
    """Per-row RMS, floored so silence is not blown up. Shape [..., 1]."""
    return np.maximum(np.sqrt(np.mean(x * x, axis=-1, keepdims=True)), 1e-4)


def spectrum(x: np.ndarray, cfg: ModelConfig) -> DiffArray:
    with T.no_grad():
        return dsp.stft_diff(x, cfg.frame_len, cfg.hop)


def forward(y, a, params: ModelParameters, cfg: ModelConfig, mode: str = "eval",
            rng: np.random.Generator | None = None, maps: list | None = None) -> ForwardOutput:
    """Mixture ``y`` and enrollment ``a`` (Waveforms, or [L] / [B, L] arrays) -> estimate."""
    ys = _samples(y, cfg, "mixture")
    as_ = _samples(a, cfg, "enrollment")
    # the network sees unit-RMS inputs; the estimate is returned at the mixture's level
    g = input_scale(ys)
    r_y = speech_encode(spectrum(ys / g, cfg), params, cfg)
    r_a = speech_encode(spectrum(as_ / input_scale(as_), cfg), params, cfg)
    spk = speaker_encode(r_a, params, cfg)
    e_y = extractor(r_y, spk, params, cfg, mode, rng, maps)
    est = decode(e_y, params, cfg)
    mask = np.ones((2, cfg.F, 1))
    mask[1] = dsp.nyquist_dc_mask(cfg.F)
    est = est * (mask * g[..., None, None])
    wav = dsp.istft_diff(est, ys.shape[-1], cfg.frame_len, cfg.hop)
    return ForwardOutput(wav, est, spk.logits, spk)


def extract(y: Waveform, a: Waveform, params: ModelParameters, cfg: ModelConfig) -> Waveform:
    """Eval-mode inference without graph recording."""
    with T.no_grad():
        out = forward(y, a, params, cfg, mode="eval")
    return Waveform(out.waveform.data, cfg.sample_rate)


def ablate_cross_attention(params: ModelParameters, cfg: ModelConfig):
    """Zero the rows of every block's output map that read the cross-attention half."""
    for b in range(cfg.B):
        w = params[f"ext.block{b}.attn.out.weight"]
        w.data = w.data.copy()
        w.data[cfg.d_attn :] = 0.0
