"""Synthetic two-speaker mixtures.

Each "speaker" is a parametric voice: a harmonic complex at a speaker-specific
fundamental, a fixed formant-shaped harmonic amplitude profile, and a
syllable-rate amplitude envelope. Mixtures follow the usual recipe: pick two
speakers, scale the interferer to a random SNR in [0, 5] dB, and take a
second utterance of the target as enrollment. Everything is a pure function
of ``global_seed``; each manifest entry draws from its own seeded stream.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .dsp import SAMPLE_RATE, Waveform, read_wav, write_wav

log = logging.getLogger(__name__)

SPLITS = ("train", "dev", "test")
_SPLIT_CODE = {"train": 1, "dev": 2, "test": 3}
N_HARMONICS = 40
PEAK = 0.9
MANIFEST_NAME = "manifest.jsonl"


@dataclass(frozen=True)
class SyntheticSpeaker:
    speaker_id: int
    f0: float
    timbre: tuple  # amplitude per harmonic at the nominal f0
    am_rate: float
    tilt: float  # one-pole coefficient shaping the breath noise

    @classmethod
    def create(cls, speaker_id: int, global_seed: int = 0) -> "SyntheticSpeaker":
        rng = np.random.default_rng([global_seed, speaker_id, 7919])
        # golden-ratio spacing spreads fundamentals over 80-340 Hz whatever the speaker count
        u = (speaker_id * 0.6180339887 + rng.uniform(0, 0.05) + (global_seed % 97) * 0.01) % 1.0
        f0 = 80.0 + 260.0 * u
        v = (speaker_id * 0.7548776662 + rng.uniform(0, 0.05)) % 1.0
        w = (speaker_id * 0.5698402910 + rng.uniform(0, 0.05)) % 1.0
        formants = np.array([300.0 + 600.0 * v, 1000.0 + 1500.0 * w, rng.uniform(2600, 3500)])
        bws = rng.uniform(60, 120, size=3)
        gains = np.array([1.0, rng.uniform(0.5, 0.9), rng.uniform(0.1, 0.3)])
        h = np.arange(1, N_HARMONICS + 1) * f0
        env = sum(g * np.exp(-0.5 * ((h - fc) / bw) ** 2) for g, fc, bw in zip(gains, formants, bws))
        timbre = (0.01 + env) / (1.0 + 0.1 * np.arange(N_HARMONICS))
        return cls(speaker_id, float(f0), tuple(float(a) for a in timbre), float(rng.uniform(2.5, 6.0)),
                   float(rng.uniform(0.3, 0.9)))


def speakers_for(n: int, global_seed: int = 0) -> list:
    return [SyntheticSpeaker.create(i, global_seed) for i in range(n)]


def synth_utterance(speaker: SyntheticSpeaker, utt_seed: int, duration_s: float, sample_rate: int = SAMPLE_RATE) -> Waveform:
    if not 0.5 <= duration_s <= 10.0:
        raise ValueError(f"duration_s must lie in [0.5, 10], got {duration_s}")
    rng = np.random.default_rng([int(utt_seed) & 0xFFFFFFFF, speaker.speaker_id, 104729])
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate

    # intonation: utterance-level shift plus slow vibrato-like drift
    f0 = speaker.f0 * (1.0 + rng.uniform(-0.02, 0.02))
    contour = f0 * (1.0 + 0.01 * np.sin(2 * np.pi * rng.uniform(0.3, 1.2) * t + rng.uniform(0, 2 * np.pi)))
    phase = 2 * np.pi * np.cumsum(contour) / sample_rate
    timbre = np.asarray(speaker.timbre)
    voiced = np.zeros(n)
    nyq = sample_rate / 2 - 150.0
    for h in range(1, N_HARMONICS + 1):
        if h * f0 * 1.06 >= nyq:
            break
        voiced += timbre[h - 1] * np.sin(h * phase + rng.uniform(0, 2 * np.pi))

    # syllables: raised-sine bursts at the speaker's rate with random per-syllable loudness
    rate = speaker.am_rate * rng.uniform(0.9, 1.1)
    cyc = rate * t + rng.uniform(0, 1)
    syl = np.floor(cyc).astype(int)
    loud = rng.uniform(0.3, 1.0, size=syl.max() + 1)[syl]
    env = loud * np.sin(np.pi * (cyc - syl)) ** 2

    breath = lfilter([1.0], [1.0, -speaker.tilt], rng.standard_normal(n))
    breath *= 0.03 * np.sqrt(np.mean(voiced**2) / max(np.mean(breath**2), 1e-20))
    x = env * (voiced + breath)
    peak = np.max(np.abs(x))
    if peak > 0:
        x = x * (PEAK / peak)
    return Waveform(x, sample_rate)


def power(x) -> float:
    x = x.samples if isinstance(x, Waveform) else np.asarray(x)
    return float(np.mean(x * x))


def measured_snr_db(signal, interference) -> float:
    return 10.0 * np.log10(power(signal) / power(interference))


def tile_to(x: np.ndarray, n: int) -> np.ndarray:
    if x.size >= n:
        return x[:n]
    return np.tile(x, -(-n // x.size))[:n]


def mix_at_snr(s1: Waveform, s2: Waveform, snr_db: float) -> tuple:
    """Scale ``s2`` so that 10*log10(P1 / P(g*s2)) = snr_db; returns (y, s1, g*s2)."""
    n = max(len(s1), len(s2))
    a, b = tile_to(s1.samples, n), tile_to(s2.samples, n)
    p1, p2 = float(np.mean(a * a)), float(np.mean(b * b))
    if p1 <= 1e-10 or p2 <= 1e-10:
        raise ValueError(f"mix_at_snr: silent input (powers {p1:.3e}, {p2:.3e})")
    g = np.sqrt(p1 / (p2 * 10.0 ** (snr_db / 10.0)))
    interf = g * b
    return Waveform(a + interf, s1.sample_rate), Waveform(a, s1.sample_rate), Waveform(interf, s1.sample_rate)


def make_rir(t60_s: float, seed: int, length_samples: int, tail_gain: float = 0.5, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Unit direct path followed by an exponentially decaying noise tail of energy ``tail_gain**2``."""
    if not 0.1 <= t60_s <= 1.0:
        raise ValueError(f"t60_s must lie in [0.1, 1.0], got {t60_s}")
    if length_samples < 1:
        raise ValueError("length_samples must be >= 1")
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 3571])
    h = np.zeros(length_samples)
    h[0] = 1.0
    if length_samples > 1 and tail_gain > 0:
        t = np.arange(1, length_samples) / sample_rate
        tail = rng.standard_normal(length_samples - 1) * np.exp(-6.91 * t / t60_s)
        h[1:] = tail * (tail_gain / np.sqrt(np.sum(tail * tail)))
    return h


def apply_reverb(w: Waveform, rir: np.ndarray) -> Waveform:
    y = np.convolve(w.samples, np.asarray(rir, dtype=np.float64))[: len(w)]
    return Waveform(y, w.sample_rate)


def _pink(n: int, rng) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(spec.size)
    f[0] = 1
    return np.fft.irfft(spec / np.sqrt(f), n=n)


def make_noise(kind: str, n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 6151])
    if kind == "white":
        return rng.standard_normal(n)
    if kind == "pink":
        return _pink(n, rng)
    raise ValueError(f"unknown noise kind {kind!r}; expected 'white' or 'pink'")


def add_noise(w: Waveform, noise_kind: str, snr_db: float, seed: int) -> tuple:
    """Return (noisy waveform, the scaled noise that was added)."""
    noise = make_noise(noise_kind, len(w), seed)
    ps, pn = power(w), float(np.mean(noise * noise))
    if ps <= 1e-10:
        raise ValueError("add_noise: silent signal")
    noise = noise * np.sqrt(ps / (pn * 10.0 ** (snr_db / 10.0)))
    return Waveform(w.samples + noise, w.sample_rate), noise


# -- dataset -------------------------------------------------------------------------


@dataclass
class DatagenConfig:
    seed: int = 0
    speakers: int = 8
    train: int = 64
    dev: int = 16
    test: int = 16
    duration: tuple = (1.0, 4.0)
    enroll_duration: float = 2.0
    snr_lo: float = 0.0
    snr_hi: float = 5.0
    whamr_style: bool = False
    t60_range: tuple = (0.2, 0.6)
    noise_snr_range: tuple = (0.0, 10.0)
    sample_rate: int = SAMPLE_RATE

    def counts(self) -> dict:
        return {"train": self.train, "dev": self.dev, "test": self.test}


def speaker_split(cfg: DatagenConfig) -> dict:
    """Train/dev share one speaker pool; test draws from a disjoint pool."""
    n = cfg.speakers
    if cfg.test > 0:
        n_test = max(2, round(n / 4))
        if n - n_test < 2:
            raise ValueError(f"{n} speakers cannot form disjoint train/test pools of at least 2 speakers each")
        pools = {"train": list(range(n - n_test)), "test": list(range(n - n_test, n))}
    else:
        if n < 2:
            raise ValueError(f"need at least 2 speakers to form a mixture, got {n}")
        pools = {"train": list(range(n)), "test": []}
    pools["dev"] = pools["train"]
    return pools


@dataclass
class ManifestEntry:
    split: str
    index: int
    mixture: str
    target: str
    interferer: str
    enrollment: str
    speaker_id: int
    interferer_id: int
    snr_db: float
    duration_s: float
    target_seed: int
    interferer_seed: int
    enroll_seed: int
    rir_seed: int | None = None
    noise_snr_db: float | None = None
    noise_seed: int | None = None

    @property
    def uid(self) -> str:
        return f"{self.split}_{self.index:05d}"


@dataclass
class DatasetManifest:
    global_seed: int
    config: dict
    entries: list = field(default_factory=list)
    root: Path | None = None

    def split(self, name: str) -> list:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}; expected one of {SPLITS}")
        return [e for e in self.entries if e.split == name]

    def lines(self) -> list:
        head = {"kind": "header", "global_seed": self.global_seed, "config": self.config}
        return [json.dumps(head)] + [json.dumps({"kind": "entry", **asdict(e)}) for e in self.entries]

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.lines()).encode()).hexdigest()

    def write(self, path):
        Path(path).write_text("\n".join(self.lines()) + "\n")

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        if not path.exists():
            raise FileNotFoundError(f"manifest not found: {path}")
        lines = [json.loads(s) for s in path.read_text().splitlines() if s.strip()]
        if not lines or lines[0].get("kind") != "header":
            raise ValueError(f"{path}: first record must be the header")
        head = lines[0]
        entries = []
        for rec in lines[1:]:
            rec = dict(rec)
            rec.pop("kind", None)
            entries.append(ManifestEntry(**rec))
        return cls(head["global_seed"], head["config"], entries, path.parent)

    def resolve(self, rel: str) -> Path:
        return (self.root or Path(".")) / rel


def _entry_seed(rng) -> int:
    return int(rng.integers(0, 2**31 - 1))


def make_sample(cfg: DatagenConfig, split: str, index: int, speakers: list, pool: list) -> tuple:
    """Generate one mixture; returns (entry fields, dict of waveforms)."""
    rng = np.random.default_rng([cfg.seed, _SPLIT_CODE[split], index])
    tgt, itf = (int(v) for v in rng.choice(pool, size=2, replace=False))
    lo, hi = cfg.duration
    dur = float(round(rng.uniform(lo, hi) * cfg.sample_rate) / cfg.sample_rate)
    snr = float(rng.uniform(cfg.snr_lo, cfg.snr_hi))
    t_seed, i_seed = _entry_seed(rng), _entry_seed(rng)
    e_seed = _entry_seed(rng)
    while e_seed == t_seed:
        e_seed = _entry_seed(rng)

    s1 = synth_utterance(speakers[tgt], t_seed, dur, cfg.sample_rate)
    s2 = synth_utterance(speakers[itf], i_seed, dur, cfg.sample_rate)
    enroll = synth_utterance(speakers[tgt], e_seed, cfg.enroll_duration, cfg.sample_rate)
    _, src, interf = mix_at_snr(s1, s2, snr)
    fields = dict(speaker_id=tgt, interferer_id=itf, snr_db=snr, duration_s=dur,
                  target_seed=t_seed, interferer_seed=i_seed, enroll_seed=e_seed)

    wet_t, wet_i = src.samples, interf.samples
    noise = np.zeros_like(wet_t)
    if cfg.whamr_style:
        rir_seed = _entry_seed(rng)
        t60a, t60b = rng.uniform(*cfg.t60_range, size=2)
        rir_len = int(0.5 * cfg.sample_rate)
        wet_t = apply_reverb(src, make_rir(t60a, rir_seed, rir_len)).samples
        wet_i = apply_reverb(interf, make_rir(t60b, rir_seed + 1, rir_len)).samples
        noise_snr = float(rng.uniform(*cfg.noise_snr_range))
        noise_seed = _entry_seed(rng)
        _, noise = add_noise(Waveform(wet_t + wet_i, cfg.sample_rate), "pink", noise_snr, noise_seed)
        fields.update(rir_seed=rir_seed, noise_snr_db=noise_snr, noise_seed=noise_seed)

    # common gain keeps the mixture inside [-PEAK, PEAK]; mixture is re-summed after scaling
    peak = np.max(np.abs(wet_t + wet_i + noise))
    c = min(1.0, PEAK / peak) if peak > 0 else 1.0
    target = src.samples * c
    interferer = interf.samples * c
    if cfg.whamr_style:
        mixture = wet_t * c + wet_i * c + noise * c
    else:
        mixture = target + interferer
    sr = cfg.sample_rate
    waves = {"mixture": Waveform(mixture, sr), "target": Waveform(target, sr),
             "interferer": Waveform(interferer, sr), "enrollment": enroll}
    return fields, waves


def build_dataset(cfg: DatagenConfig, out_dir) -> DatasetManifest:
    """Write WAVs and ``manifest.jsonl`` under ``out_dir``."""
    out = Path(out_dir)
    pools = speaker_split(cfg)
    for split, n in cfg.counts().items():
        if n < 0:
            raise ValueError(f"negative count for split {split}")
        if n > 0 and len(pools[split]) < 2:
            raise ValueError(f"split {split!r} needs at least 2 speakers, pool has {len(pools[split])}")
    if not cfg.snr_lo <= cfg.snr_hi:
        raise ValueError("snr_lo must not exceed snr_hi")
    speakers = speakers_for(cfg.speakers, cfg.seed)
    for i in range(cfg.speakers):
        (out / "speakers" / f"spk{i:03d}").mkdir(parents=True, exist_ok=True)
    cfg_dict = asdict(cfg)
    manifest = DatasetManifest(cfg.seed, cfg_dict, [], out)
    for split in SPLITS:
        (out / split).mkdir(parents=True, exist_ok=True)
        for idx in range(cfg.counts()[split]):
            fields, waves = make_sample(cfg, split, idx, speakers, pools[split])
            uid = f"{split}_{idx:05d}"
            spk_dir = f"speakers/spk{fields['speaker_id']:03d}"
            paths = {
                "mixture": f"{split}/{uid}_mix.wav",
                "target": f"{split}/{uid}_target.wav",
                "interferer": f"{split}/{uid}_interf.wav",
                "enrollment": f"{spk_dir}/{uid}_enroll.wav",
            }
            for role, rel in paths.items():
                write_wav(out / rel, waves[role])
            manifest.entries.append(ManifestEntry(split=split, index=idx, **paths, **fields))
    manifest.write(out / MANIFEST_NAME)
    log.info("wrote %d entries to %s (digest %s)", len(manifest.entries), out, manifest.digest()[:12])
    return manifest


def load_entry(manifest: DatasetManifest, entry: ManifestEntry) -> dict:
    """Read an entry's WAVs; missing files raise naming the manifest row."""
    out = {}
    for role in ("mixture", "target", "interferer", "enrollment"):
        path = manifest.resolve(getattr(entry, role))
        if not path.exists():
            raise FileNotFoundError(f"manifest row {entry.uid}: missing {role} audio {path}")
        out[role] = read_wav(path)
    return out
