from __future__ import annotations

from dataclasses import asdict, dataclass, fields


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    The first block of fields follows the reference configuration; the
    second block fixes inner dimensions the reference description leaves open
    (token squeeze width, full-band hidden channels, REL conv kernel).
    """

    H: int = 96
    k: int = 5
    B: int = 12
    heads: int = 4
    d_attn: int = 64
    B_spk: int = 3
    F: int = 65
    N_s: int = 8
    rcpe_max: int = 2000
    cross_kernel: int = 3
    cross_groups: int = 8
    nb_kernel: int = 5

    attn_squeeze: int = 16
    fb_channels: int = 24
    rel_kernel: int = 3
    frame_len: int = 128
    hop: int = 64
    sample_rate: int = 8000
    ln_eps: float = 1e-5

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("H", "k", "heads", "d_attn", "F", "N_s", "rcpe_max", "cross_kernel", "cross_groups",
                     "nb_kernel", "attn_squeeze", "fb_channels", "rel_kernel", "frame_len", "hop"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelConfig.{name} must be >= 1, got {getattr(self, name)}")
        if self.B < 0 or self.B_spk < 0:
            raise ValueError("ModelConfig.B and B_spk must be >= 0")
        if self.d_attn % self.heads:
            raise ValueError(f"d_attn={self.d_attn} must be divisible by heads={self.heads}")
        if self.H % self.cross_groups:
            raise ValueError(f"cross_groups={self.cross_groups} must divide H={self.H}")
        for name in ("k", "cross_kernel", "nb_kernel", "rel_kernel"):
            if getattr(self, name) % 2 == 0:
                raise ValueError(f"ModelConfig.{name} must be odd for same-padding, got {getattr(self, name)}")
        if self.F != self.frame_len // 2 + 1:
            raise ValueError(f"F={self.F} must equal frame_len/2+1={self.frame_len // 2 + 1}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**d)

    def diff(self, other: "ModelConfig") -> dict:
        a, b = self.to_dict(), other.to_dict()
        return {k: (a[k], b[k]) for k in a if a[k] != b[k]}


def full_config(N_s: int = 101) -> ModelConfig:
    """Full-size configuration (101 training speakers as in the two-speaker corpus)."""
    return ModelConfig(N_s=N_s)


def toy_config(**overrides) -> ModelConfig:
    """Gradient-check scale: H=4, F=5 (frame 8), B=1, B_spk=1, 2 heads, d_attn=8, 4 speakers."""
    base = dict(H=4, k=3, B=1, heads=2, d_attn=8, B_spk=1, F=5, N_s=4, rcpe_max=64, cross_kernel=3,
                cross_groups=2, nb_kernel=3, attn_squeeze=2, fb_channels=2, rel_kernel=3, frame_len=8, hop=4)
    base.update(overrides)
    return ModelConfig(**base)


def desk_config(**overrides) -> ModelConfig:
    """CPU overfit scale used by the smoke recipe."""
    base = dict(H=16, B=2, B_spk=2, heads=2, d_attn=32, N_s=8, attn_squeeze=4, fb_channels=4)
    base.update(overrides)
    return ModelConfig(**base)
