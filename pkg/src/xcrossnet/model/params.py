"""Named parameter store and initialisation."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from ..tensor import DiffArray
from .config import ModelConfig


class ModelParameters:
    """Ordered mapping of hierarchical names to trainable DiffArrays."""

    def __init__(self, arrays: "OrderedDict[str, DiffArray] | None" = None):
        self._arrays: OrderedDict[str, DiffArray] = OrderedDict()
        for name, arr in (arrays or {}).items():
            self.add(name, arr)

    def add(self, name: str, value) -> DiffArray:
        if name in self._arrays:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = value if isinstance(value, DiffArray) else DiffArray(value)
        arr.requires_grad = True
        arr.name = name
        self._arrays[name] = arr
        return arr

    def __getitem__(self, name: str) -> DiffArray:
        try:
            return self._arrays[name]
        except KeyError:
            raise KeyError(f"no parameter named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def items(self):
        return self._arrays.items()

    def names(self) -> list:
        return list(self._arrays)

    def values(self):
        return self._arrays.values()

    def subset(self, prefix: str) -> "OrderedDict[str, DiffArray]":
        return OrderedDict((k, v) for k, v in self._arrays.items() if k.startswith(prefix))

    def count(self, prefix: str = "") -> int:
        return int(sum(v.size for k, v in self._arrays.items() if k.startswith(prefix)))

    def zero_grad(self):
        for v in self._arrays.values():
            v.grad = None

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self._arrays.items())

    def load_state(self, state: dict):
        missing = set(self._arrays) - set(state)
        extra = set(state) - set(self._arrays)
        if missing or extra:
            raise KeyError(f"parameter set mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, v in self._arrays.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != v.shape:
                raise ValueError(f"parameter {k!r}: shape {arr.shape} != expected {v.shape}")
            v.data = arr.copy()

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v.data)) for v in self._arrays.values())

    def ledger(self) -> "OrderedDict[str, int]":
        """Element counts grouped by submodule (name up to the second-to-last dot)."""
        out: OrderedDict[str, int] = OrderedDict()
        for k, v in self._arrays.items():
            group = k.rsplit(".", 1)[0]
            out[group] = out.get(group, 0) + v.size
        return out


# names of residual-branch output projections; zero-initialised so every block starts as identity
def is_residual_output(name: str) -> bool:
    return (
        ".attn.expand." in name
        or ".cross.conv2.conv." in name
        or ".narrow.out." in name
        or (name.startswith("spk.rel") and ".out." in name)
    )


def _uniform(rng, shape, fan_in):
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def parameter_shapes(cfg: ModelConfig) -> "OrderedDict[str, tuple]":
    """Every parameter name with its shape, in creation order."""
    H, F, d, E, fb = cfg.H, cfg.F, cfg.d_attn, cfg.attn_squeeze, cfg.fb_channels
    rk = cfg.rel_kernel
    s: OrderedDict[str, tuple] = OrderedDict()
    s["enc.weight"] = (H, 2, cfg.k)
    s["enc.bias"] = (H,)
    for i in range(cfg.B_spk):
        p = f"spk.rel{i}"
        s[f"{p}.glu.weight"] = (H, 2 * H)
        s[f"{p}.glu.bias"] = (2 * H,)
        for name in ("down1", "down2"):
            s[f"{p}.{name}.weight"] = (H, H, rk)
            s[f"{p}.{name}.bias"] = (H,)
            s[f"{p}.{name}.slope"] = (H,)
        s[f"{p}.up1.weight"] = (H, 2 * H, rk)
        s[f"{p}.up1.bias"] = (H,)
        s[f"{p}.up1.slope"] = (H,)
        s[f"{p}.out.weight"] = (H, 2 * H, rk)
        s[f"{p}.out.bias"] = (H,)
    s["spk.token.weight"] = (H, d)
    s["spk.token.bias"] = (d,)
    s["spk.cls.weight"] = (H, cfg.N_s)
    s["spk.cls.bias"] = (cfg.N_s,)
    for b in range(cfg.B):
        p = f"ext.block{b}"
        s[f"{p}.attn.squeeze.weight"] = (H, E)
        s[f"{p}.attn.squeeze.bias"] = (E,)
        s[f"{p}.attn.proj.weight"] = (E * F, d)
        s[f"{p}.attn.proj.bias"] = (d,)
        for branch in ("self", "cross"):
            s[f"{p}.attn.{branch}.norm.weight"] = (d,)
            s[f"{p}.attn.{branch}.norm.bias"] = (d,)
            for qkv in ("q", "k", "v"):
                s[f"{p}.attn.{branch}.{qkv}.weight"] = (d, d)
                if qkv != "k":  # a key bias shifts every score of a query equally; softmax ignores it
                    s[f"{p}.attn.{branch}.{qkv}.bias"] = (d,)
        s[f"{p}.attn.out.weight"] = (2 * d, E * F)
        s[f"{p}.attn.out.bias"] = (E * F,)
        s[f"{p}.attn.expand.weight"] = (E, H)
        s[f"{p}.attn.expand.bias"] = (H,)
        for conv in ("conv1", "conv2"):
            s[f"{p}.cross.{conv}.norm.weight"] = (H, 1, 1)
            s[f"{p}.cross.{conv}.norm.bias"] = (H, 1, 1)
            s[f"{p}.cross.{conv}.conv.weight"] = (H, H // cfg.cross_groups, cfg.cross_kernel)
            s[f"{p}.cross.{conv}.conv.bias"] = (H,)
            s[f"{p}.cross.{conv}.slope"] = (H,)
            if conv == "conv1":
                s[f"{p}.cross.fb.in.weight"] = (H, fb)
                s[f"{p}.cross.fb.in.bias"] = (fb,)
                s[f"{p}.cross.fb.freq.weight"] = (fb, F, F)
                s[f"{p}.cross.fb.freq.bias"] = (fb, F, 1)
                s[f"{p}.cross.fb.out.weight"] = (fb, H)
                s[f"{p}.cross.fb.out.bias"] = (H,)
        s[f"{p}.narrow.norm.weight"] = (H, 1, 1)
        s[f"{p}.narrow.norm.bias"] = (H, 1, 1)
        s[f"{p}.narrow.in.weight"] = (H, 2 * H)
        s[f"{p}.narrow.in.bias"] = (2 * H,)
        s[f"{p}.narrow.tconv.weight"] = (2 * H, 1, cfg.nb_kernel)
        s[f"{p}.narrow.tconv.bias"] = (2 * H,)
        s[f"{p}.narrow.out.weight"] = (2 * H, H)
        s[f"{p}.narrow.out.bias"] = (H,)
    s["dec.weight"] = (H, 2)
    s["dec.bias"] = (2,)
    return s


def _fan_in(name: str, shape: tuple) -> int:
    if len(shape) == 3 and name.endswith("freq.weight"):
        return shape[-1]
    if len(shape) == 3:  # conv [C_out, C_in/g, K]
        return shape[1] * shape[2]
    return shape[0]


def init_params(cfg: ModelConfig, seed: int = 0, zero_residual: bool = True) -> ModelParameters:
    """Uniform(+-sqrt(1/fan_in)) weights, zero biases, unit norms, 0.25 PReLU slopes.

    Residual-branch output projections start at zero unless ``zero_residual``
    is False (used for gradient checks and sensitivity tests).
    """
    rng = np.random.default_rng(seed)
    params = ModelParameters()
    shapes = parameter_shapes(cfg)
    for name, shape in shapes.items():
        if name.endswith(".slope"):
            val = np.full(shape, 0.25)
        elif ".norm.weight" in name:
            val = np.ones(shape)
        elif name.endswith("bias"):
            val = np.zeros(shape)
        else:
            val = _uniform(rng, shape, _fan_in(name, shape))
        if zero_residual and is_residual_output(name):
            val = np.zeros(shape)
        params.add(name, val)
    return params


def randomize(params: ModelParameters, seed: int = 0, scale: float = 0.5) -> ModelParameters:
    """Overwrite every entry with nonzero random values (biases, norms and slopes included)."""
    rng = np.random.default_rng(seed)
    for name, p in params.items():
        if ".norm.weight" in name:
            p.data = 1.0 + scale * rng.standard_normal(p.shape) * 0.2
        elif name.endswith(".slope"):
            p.data = 0.25 + 0.1 * rng.standard_normal(p.shape)
        else:
            fan = _fan_in(name, p.shape) if not name.endswith("bias") else 1
            p.data = scale * rng.standard_normal(p.shape) / np.sqrt(fan)
    return params


def param_count(cfg: ModelConfig) -> int:
    return int(sum(np.prod(s) for s in parameter_shapes(cfg).values()))


def param_ledger(cfg: ModelConfig) -> "OrderedDict[str, int]":
    """Element counts per top-level submodule: speech encoder, speaker encoder, extractor blocks, decoder."""
    out: OrderedDict[str, int] = OrderedDict()
    for name, shape in parameter_shapes(cfg).items():
        parts = name.split(".")
        if parts[0] == "ext":
            group = f"ext.{parts[1]}.{parts[2]}"
        elif parts[0] == "spk":
            group = f"spk.{parts[1]}"
        else:
            group = parts[0]
        out[group] = out.get(group, 0) + int(np.prod(shape))
    return out
