"""Central finite differences and analytic-vs-numeric gradient reports."""

from __future__ import annotations

import inspect
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import DiffArray, backward, no_grad


def _scalar(value) -> float:
    if isinstance(value, DiffArray):
        value = value.data
    arr = np.asarray(value, dtype=np.float64)
    if arr.size != 1:
        raise ValueError(f"finite_diff_grad: f must return a scalar, got shape {arr.shape}")
    return float(arr.reshape(-1)[0])


def finite_diff_grad(f: Callable, x, eps: float = 1e-5) -> np.ndarray:
    """Numeric gradient of scalar ``f`` at ``x`` by central differences.

    ``x`` is perturbed in place (a ``DiffArray`` or float ndarray) and
    restored afterwards; ``f`` is called with no arguments when ``x`` is a
    captured ``DiffArray``, otherwise with ``x``.
    """
    if eps <= 0:
        raise ValueError("finite_diff_grad: eps must be positive")
    target = x.data if isinstance(x, DiffArray) else x
    if not isinstance(target, np.ndarray) or target.dtype.kind != "f":
        raise TypeError("finite_diff_grad: x must be a float ndarray or DiffArray")
    call = (lambda: f(x)) if not _takes_no_args(f) else f
    flat = target.reshape(-1)
    if not np.shares_memory(flat, target):
        raise ValueError("finite_diff_grad: x must be contiguous")
    grad = np.zeros(target.size)
    for i in range(target.size):
        orig = flat[i]
        with no_grad():
            flat[i] = orig + eps
            fp = _scalar(call())
            flat[i] = orig - eps
            fm = _scalar(call())
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            idx = np.unravel_index(i, target.shape)
            raise FloatingPointError(f"finite_diff_grad: non-finite f at perturbed index {tuple(int(v) for v in idx)}")
        grad[i] = (fp - fm) / (2.0 * eps)
    return grad.reshape(target.shape)


def _takes_no_args(f: Callable) -> bool:
    try:
        sig = inspect.signature(f)
    except (TypeError, ValueError):
        return False
    required = [
        p for p in sig.parameters.values()
        if p.default is p.empty and p.kind in (p.POSITIONAL_ONLY, p.POSITIONAL_OR_KEYWORD)
    ]
    return not required


@dataclass
class GradEntry:
    name: str
    analytic: np.ndarray
    numeric: np.ndarray
    abs_err: float
    rel_err: float


@dataclass
class GradReport:
    """Per-parameter comparison; rel_err = max|a-n| / max(max|a|, max|n|, 1e-12)."""

    entries: list = field(default_factory=list)

    @property
    def max_abs_err(self) -> float:
        return max((e.abs_err for e in self.entries), default=0.0)

    @property
    def max_rel_err(self) -> float:
        return max((e.rel_err for e in self.entries), default=0.0)

    @property
    def per_parameter(self) -> list:
        return [(e.name, e.analytic, e.numeric, e.rel_err) for e in self.entries]

    def worst(self) -> GradEntry | None:
        return max(self.entries, key=lambda e: e.rel_err, default=None)

    def summary(self) -> str:
        w = self.worst()
        tail = f" (worst: {w.name})" if w else ""
        return f"max_abs_err={self.max_abs_err:.3e} max_rel_err={self.max_rel_err:.3e}{tail}"


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> tuple:
    diff = float(np.max(np.abs(analytic - numeric))) if analytic.size else 0.0
    denom = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)), 1e-12)
    return diff, diff / denom


def gradcheck(f: Callable[[], DiffArray], params: Mapping[str, DiffArray], eps: float = 1e-5) -> GradReport:
    """Compare reverse-mode gradients of ``f()`` against central differences for each named array."""
    for p in params.values():
        p.requires_grad = True
        p.grad = None
    loss = f()
    backward(loss)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in params.items()}
    report = GradReport()
    for name, p in params.items():
        numeric = finite_diff_grad(f, p, eps)
        abs_err, rel_err = relative_error(analytic[name], numeric)
        report.entries.append(GradEntry(name, analytic[name], numeric, abs_err, rel_err))
    return report
