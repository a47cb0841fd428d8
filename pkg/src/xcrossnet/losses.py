"""Training objective: STFT-magnitude L1 + negative SI-SDR + speaker cross-entropy.

All three terms accept an optional leading batch axis and average over it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dsp
from . import tensor as T
from .tensor import DiffArray

SISDR_EPS = 1e-8
MAG_EPS = 1e-8


def _magnitude(packed: DiffArray) -> DiffArray:
    # sqrt(|z|^2 + eps) - sqrt(eps): smooth at 0 and exactly 0 there
    re, im = packed[..., 0, :, :], packed[..., 1, :, :]
    return T.sqrt(re * re + im * im + MAG_EPS) - np.sqrt(MAG_EPS)


def loss_mag(est, target, frame_len: int = dsp.FRAME_LEN, hop: int = dsp.HOP) -> DiffArray:
    """sum | |STFT(est)| - |STFT(target)| | / sum |STFT(target)|, per item."""
    est = T.as_diff(est)
    target = np.asarray(target.data if isinstance(target, DiffArray) else target, dtype=np.float64)
    if est.shape != target.shape:
        raise ValueError(f"loss_mag: estimate {est.shape} and target {target.shape} lengths differ")
    with T.no_grad():
        tmag = _magnitude(dsp.stft_diff(target, frame_len, hop)).data
    denom = tmag.sum(axis=(-2, -1))
    if np.any(denom <= 0):
        raise ValueError("loss_mag: silent target (zero STFT magnitude)")
    emag = _magnitude(dsp.stft_diff(est, frame_len, hop))
    num = T.sum_(T.abs_(emag - tmag), axis=(-2, -1))
    return T.mean(num / denom)


def loss_sisdr(est, target, eps: float = SISDR_EPS) -> tuple:
    """Negative scale-invariant SDR in dB with an ``eps`` floor on the residual energy.

    Returns (loss averaged over the batch, alpha per item).
    """
    est = T.as_diff(est)
    s = np.asarray(target.data if isinstance(target, DiffArray) else target, dtype=np.float64)
    if est.shape != s.shape:
        raise ValueError(f"loss_sisdr: estimate {est.shape} and target {s.shape} lengths differ")
    ss = (s * s).sum(axis=-1, keepdims=True)
    if np.any(ss <= 0):
        raise ValueError("loss_sisdr: zero-energy target")
    alpha = T.sum_(est * s, axis=-1, keepdims=True) / ss
    proj = alpha * s
    resid = est - proj
    ratio = T.sum_(proj * proj, axis=-1) / (T.sum_(resid * resid, axis=-1) + eps)
    loss = T.mean(T.log(ratio) * (-10.0 / np.log(10.0)))
    return loss, alpha.data[..., 0]


def loss_ce(logits, label) -> DiffArray:
    """Softmax cross-entropy against integer labels, averaged over the batch."""
    logits = T.as_diff(logits)
    n_s = logits.shape[-1]
    lab = np.asarray(label, dtype=np.int64)
    if lab.shape != logits.shape[:-1]:
        raise ValueError(f"loss_ce: labels {lab.shape} do not match logits {logits.shape}")
    if np.any(lab < 0) or np.any(lab >= n_s):
        raise ValueError(f"loss_ce: label {lab.tolist()} out of range [0, {n_s})")
    onehot = np.eye(n_s)[lab]
    nll = -T.sum_(T.log_softmax(logits) * onehot, axis=-1)
    return T.mean(nll)


@dataclass
class LossBreakdown:
    total: DiffArray
    mag: float
    sisdr: float
    ce: float
    alpha: np.ndarray

    def as_dict(self) -> dict:
        return {"mag": self.mag, "sisdr": self.sisdr, "ce": self.ce, "total": float(self.total.item())}


def loss_total(est, target, logits, label, frame_len: int = dsp.FRAME_LEN, hop: int = dsp.HOP) -> LossBreakdown:
    """Unweighted sum mag + sisdr + ce (always accumulated in that order)."""
    mag = loss_mag(est, target, frame_len, hop)
    sisdr, alpha = loss_sisdr(est, target)
    ce = loss_ce(logits, label)
    total = (mag + sisdr) + ce
    return LossBreakdown(total, mag.item(), sisdr.item(), ce.item(), alpha)
