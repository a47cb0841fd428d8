"""STFT analysis/synthesis, real/imag packing and 16-bit WAV I/O.

Framing: periodic Hann analysis window, reflect center padding, half-frame
hop by default. Synthesis is weighted overlap-add normalised by the summed
squared window, which inverts the analysis exactly wherever that sum is
nonzero. Two routes are provided: numpy ``rfft``/``irfft`` for plain arrays
and an explicit DFT-matrix route built from tensor ops, so gradients flow
through the transform during training.
"""

from __future__ import annotations

import functools
import logging
import math
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import DiffArray

log = logging.getLogger(__name__)

SAMPLE_RATE = 8000
FRAME_LEN = 128
HOP = 64
WINDOW = "hann_periodic"
WSS_FLOOR = 1e-12


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass
class Spectrogram:
    """One-sided complex spectrogram; ``real``/``imag`` are [F, T] arrays or DiffArrays."""

    real: object
    imag: object
    frame_len: int = FRAME_LEN
    hop: int = HOP
    window: str = WINDOW
    sample_rate: int = SAMPLE_RATE

    @property
    def shape(self) -> tuple:
        return tuple(self.real.shape)

    @property
    def n_freq(self) -> int:
        return self.real.shape[-2]

    @property
    def n_frames(self) -> int:
        return self.real.shape[-1]

    def complex(self) -> np.ndarray:
        re = self.real.data if isinstance(self.real, DiffArray) else self.real
        im = self.imag.data if isinstance(self.imag, DiffArray) else self.imag
        return re + 1j * im

    def meta(self) -> dict:
        return {"frame_len": self.frame_len, "hop": self.hop, "window": self.window, "sample_rate": self.sample_rate}


def get_window(name: str, frame_len: int) -> np.ndarray:
    if name != "hann_periodic":
        raise ValueError(f"unsupported window {name!r}; only 'hann_periodic' is implemented")
    n = np.arange(frame_len)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / frame_len)


def n_frames(num_samples: int, hop: int = HOP) -> int:
    return 1 + math.ceil(num_samples / hop)


def _check_frame(frame_len: int, hop: int):
    if frame_len <= 0 or frame_len % 2:
        raise ValueError(f"frame_len must be positive and even, got {frame_len}")
    if not 0 < hop <= frame_len:
        raise ValueError(f"hop must satisfy 0 < hop <= frame_len, got hop={hop}, frame_len={frame_len}")


def reflect_index(pos: np.ndarray, length: int) -> np.ndarray:
    """Map arbitrary integer positions into [0, length) by edge-exclusive reflection."""
    if length == 1:
        return np.zeros_like(pos)
    period = 2 * (length - 1)
    m = np.mod(pos, period)
    return np.where(m >= length, period - m, m)


@functools.lru_cache(maxsize=64)
def frame_indices(num_samples: int, frame_len: int = FRAME_LEN, hop: int = HOP) -> np.ndarray:
    """[T, frame_len] sample indices of each centred, reflect-padded frame."""
    t = n_frames(num_samples, hop)
    pos = np.arange(t)[:, None] * hop + np.arange(frame_len)[None, :] - frame_len // 2
    idx = reflect_index(pos, num_samples)
    idx.setflags(write=False)
    return idx


@functools.lru_cache(maxsize=64)
def _synthesis_norm(t: int, frame_len: int, hop: int, window: str) -> np.ndarray:
    w = get_window(window, frame_len)
    total = (t - 1) * hop + frame_len
    wss = np.zeros(total)
    for i in range(t):
        wss[i * hop : i * hop + frame_len] += w * w
    norm = 1.0 / np.maximum(wss, WSS_FLOOR)
    norm.setflags(write=False)
    return norm


def stft(w: Waveform, frame_len: int = FRAME_LEN, hop: int = HOP, window: str = WINDOW) -> Spectrogram:
    _check_frame(frame_len, hop)
    x = w.samples
    if x.size < 1:
        raise ValueError("stft: empty signal")
    frames = x[frame_indices(x.size, frame_len, hop)] * get_window(window, frame_len)
    spec = np.fft.rfft(frames, axis=-1).T  # [F, T]
    return Spectrogram(spec.real.copy(), spec.imag.copy(), frame_len, hop, window, w.sample_rate)


def istft(spec: Spectrogram, out_len: int) -> Waveform:
    frame_len, hop = spec.frame_len, spec.hop
    _check_frame(frame_len, hop)
    if spec.n_freq != frame_len // 2 + 1:
        raise ValueError(f"istft: F={spec.n_freq} inconsistent with frame_len={frame_len} (expected {frame_len // 2 + 1})")
    if out_len <= 0:
        raise ValueError("istft: out_len must be positive")
    t = spec.n_frames
    frames = np.fft.irfft(spec.complex().T, n=frame_len, axis=-1) * get_window(spec.window, frame_len)
    total = (t - 1) * hop + frame_len
    y = np.zeros(total)
    for i in range(t):
        y[i * hop : i * hop + frame_len] += frames[i]
    y *= _synthesis_norm(t, frame_len, hop, spec.window)
    start = frame_len // 2
    out = np.zeros(out_len)
    avail = min(out_len, total - start)
    out[:avail] = y[start : start + avail]
    return Waveform(out, spec.sample_rate)


# -- differentiable route ------------------------------------------------------


@functools.lru_cache(maxsize=16)
def _dft_matrices(frame_len: int, window: str) -> tuple:
    """Windowed forward DFT [N, 2F] and windowed inverse DFT [2F, N] as real matrices."""
    n = np.arange(frame_len)
    f = np.arange(frame_len // 2 + 1)
    ang = 2.0 * np.pi * np.outer(n, f) / frame_len  # [N, F]
    w = get_window(window, frame_len)
    fwd = np.concatenate([np.cos(ang), -np.sin(ang)], axis=1) * w[:, None]
    # irfft weights: DC and Nyquist once, interior bins twice
    c = np.full(f.size, 2.0)
    c[0] = c[-1] = 1.0
    inv = np.concatenate([c[:, None] * np.cos(ang.T), -c[:, None] * np.sin(ang.T)], axis=0) / frame_len
    inv = inv * w[None, :]
    for m in (fwd, inv):
        m.setflags(write=False)
    return fwd, inv


def stft_diff(x, frame_len: int = FRAME_LEN, hop: int = HOP, window: str = WINDOW) -> DiffArray:
    """[..., L] samples -> packed [..., 2, F, T] spectrum, differentiable."""
    _check_frame(frame_len, hop)
    x = T.as_diff(x)
    length = x.shape[-1]
    if length < 1:
        raise ValueError("stft: empty signal")
    fwd, _ = _dft_matrices(frame_len, window)
    frames = T.take(x, frame_indices(length, frame_len, hop), axis=-1)  # [..., T, N]
    spec = T.matmul(frames, fwd)  # [..., T, 2F]
    nf = frame_len // 2 + 1
    lead = spec.shape[:-2]
    spec = T.reshape(spec, lead + (spec.shape[-2], 2, nf))
    nd = spec.ndim
    return T.transpose(spec, tuple(range(nd - 3)) + (nd - 2, nd - 1, nd - 3))


def istft_diff(packed, out_len: int, frame_len: int = FRAME_LEN, hop: int = HOP, window: str = WINDOW) -> DiffArray:
    """Packed [..., 2, F, T] spectrum -> [..., out_len] samples, differentiable."""
    _check_frame(frame_len, hop)
    packed = T.as_diff(packed)
    nf = frame_len // 2 + 1
    if packed.ndim < 3 or packed.shape[-3] != 2 or packed.shape[-2] != nf:
        raise ValueError(f"istft: expected [..., 2, {nf}, T] for frame_len={frame_len}, got {packed.shape}")
    if out_len <= 0:
        raise ValueError("istft: out_len must be positive")
    _, inv = _dft_matrices(frame_len, window)
    nd = packed.ndim
    t = packed.shape[-1]
    z = T.transpose(packed, tuple(range(nd - 3)) + (nd - 1, nd - 3, nd - 2))  # [..., T, 2, F]
    z = T.reshape(z, z.shape[:-2] + (2 * nf,))
    frames = T.matmul(z, inv)  # [..., T, N], windowed
    total = (t - 1) * hop + frame_len
    pos = np.arange(t)[:, None] * hop + np.arange(frame_len)[None, :]
    y = T.index_add(frames, pos, total, axis=-2)  # [..., total]
    y = T.mul(y, _synthesis_norm(t, frame_len, hop, window))
    start = frame_len // 2
    avail = min(out_len, total - start)
    y = y[..., start : start + avail]
    if avail < out_len:
        pad = np.zeros(y.shape[:-1] + (out_len - avail,))
        y = T.concat([y, pad], axis=-1)
    return y


# -- packing ------------------------------------------------------------------------


def nyquist_dc_mask(n_freq: int) -> np.ndarray:
    m = np.ones((n_freq, 1))
    m[0] = m[-1] = 0.0
    return m


def pack_ri(spec: Spectrogram) -> DiffArray:
    """Spectrogram -> [2, F, T] with channel 0 real, channel 1 imag."""
    return T.stack([T.as_diff(spec.real), T.as_diff(spec.imag)], axis=-3)


def unpack_ri(arr, meta: dict | None = None) -> Spectrogram:
    """Inverse of ``pack_ri``; imaginary parts at DC and Nyquist are forced to zero."""
    arr = T.as_diff(arr)
    if arr.ndim < 3 or arr.shape[-3] != 2:
        raise ValueError(f"unpack_ri: expected first (channel) extent 2, got shape {arr.shape}")
    meta = meta or {}
    real = arr[..., 0, :, :]
    imag = T.mul(arr[..., 1, :, :], nyquist_dc_mask(arr.shape[-2]))
    return Spectrogram(real, imag, **meta)


# -- WAV I/O ------------------------------------------------------------------------


def read_wav(path, expected_rate: int = SAMPLE_RATE) -> Waveform:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such WAV file: {path}")
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono, got {f.getnchannels()} channels")
        if f.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit PCM, got {8 * f.getsampwidth()}-bit")
        if f.getframerate() != expected_rate:
            raise ValueError(f"{path}: expected {expected_rate} Hz, got {f.getframerate()} Hz")
        raw = f.readframes(f.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64)
    return Waveform(pcm / 32768.0, expected_rate)


def write_wav(path, w: Waveform):
    x = w.samples
    hi = 32767 / 32768
    if np.any(x < -1.0) or np.any(x > hi):
        log.warning("clipping %d samples to [-1, 1) while writing %s", int(np.sum((x < -1.0) | (x > hi))), path)
        x = np.clip(x, -1.0, hi)
    pcm = np.round(x * 32768.0).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate)
        f.writeframes(pcm.tobytes())
