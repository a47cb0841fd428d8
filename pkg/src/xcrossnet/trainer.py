"""AdamW + warmup-cosine training loop, checkpointing and evaluation."""

from __future__ import annotations

import json
import logging
import math
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .datagen import DatasetManifest, load_entry, tile_to
from .losses import loss_total
from .metrics import MetricsReport
from .model import network
from .model.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .model.config import ModelConfig
from .model.params import ModelParameters, init_params

log = logging.getLogger(__name__)

LOG_NAME = "train_log.jsonl"


@dataclass
class TrainConfig:
    max_lr: float = 1e-3
    warmup_epochs: int = 10
    max_epochs: int = 110
    min_lr: float = 1e-5
    batch_size: int = 4
    weight_decay: float = 1e-2
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    grad_clip_norm: float = 5.0
    seed: int = 0
    init_seed: int = 0
    max_steps: int | None = None  # hard cap on optimizer steps (schedule still spans max_epochs)
    dev_limit: int | None = None  # evaluate at most this many dev rows per epoch
    keep_epoch_checkpoints: bool = False

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.validate()

    def validate(self):
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        if self.warmup_epochs < 0 or (self.max_epochs > 0 and self.warmup_epochs >= self.max_epochs):
            raise ValueError(f"need 0 <= warmup_epochs < max_epochs, got {self.warmup_epochs}, {self.max_epochs}")
        if not self.max_lr > self.min_lr > 0:
            raise ValueError(f"need max_lr > min_lr > 0, got {self.max_lr}, {self.min_lr}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)


def lr_schedule(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Linear 0 -> max_lr over the warmup epochs, then cosine down to min_lr at the last step."""
    if step < 0:
        raise ValueError("step must be >= 0")
    warm = cfg.warmup_epochs * steps_per_epoch
    if step < warm:
        return cfg.max_lr * step / warm
    last = max(cfg.max_epochs * steps_per_epoch - 1, warm + 1)
    p = min((step - warm) / (last - warm), 1.0)
    return cfg.min_lr + 0.5 * (cfg.max_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * p))


@dataclass
class AdamState:
    t: int = 0
    m: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    v: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)


def adamw_step(params: ModelParameters, grads: dict, state: AdamState, lr: float, cfg: TrainConfig):
    """In-place AdamW update with decoupled weight decay and bias-corrected moments."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter {params[name].shape}")
    b1, b2 = cfg.betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        data = p.data * (1.0 - lr * cfg.weight_decay)
        p.data = data - lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


def global_norm(grads: dict) -> float:
    return float(math.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_grad_norm(grads: dict, max_norm: float) -> tuple:
    """Rescale so the global L2 norm is at most ``max_norm``; returns (norm before, scale)."""
    norm = global_norm(grads)
    scale = 1.0
    if norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm, scale


# -- data --------------------------------------------------------------------------------------


@dataclass
class Example:
    uid: str
    mixture: np.ndarray
    target: np.ndarray
    enrollment: np.ndarray
    speaker_id: int


def load_split(manifest: DatasetManifest, split: str, limit: int | None = None) -> list:
    rows = manifest.split(split)
    if limit is not None:
        rows = rows[:limit]
    out = []
    for e in rows:
        w = load_entry(manifest, e)
        out.append(Example(e.uid, w["mixture"].samples, w["target"].samples, w["enrollment"].samples, e.speaker_id))
    return out


def collate(batch: list) -> tuple:
    """Tile-pad mixtures/targets and enrollments to the longest in the batch."""
    n = max(len(ex.mixture) for ex in batch)
    na = max(len(ex.enrollment) for ex in batch)
    y = np.stack([tile_to(ex.mixture, n) for ex in batch])
    s = np.stack([tile_to(ex.target, n) for ex in batch])
    a = np.stack([tile_to(ex.enrollment, na) for ex in batch])
    lab = np.array([ex.speaker_id for ex in batch], dtype=np.int64)
    return y, s, a, lab


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 1]).permutation(n)


def steps_per_epoch(n_train: int, batch_size: int) -> int:
    return max(1, n_train // batch_size)


# -- evaluation -------------------------------------------------------------------------------


def model_fn_for(params: ModelParameters, cfg: ModelConfig) -> Callable:
    def fn(y, a):
        with T.no_grad():
            out = network.forward(y, a, params, cfg, mode="eval")
        return out.waveform.data, out.logits.data

    return fn


def evaluate(model, manifest: DatasetManifest, split: str = "test", cfg: ModelConfig | None = None,
             limit: int | None = None, batch_size: int = 4, examples: list | None = None) -> MetricsReport:
    """Per-row SI-SDRi / SDRi for a split.

    ``model`` is a checkpoint path, a Checkpoint, a ModelParameters (with ``cfg``),
    or a stub callable ``fn(waves) -> estimate`` where ``waves`` is the dict
    returned by ``load_entry``. Batches of equal-length rows are run together.
    """
    report = MetricsReport()
    if callable(model) and not isinstance(model, ModelParameters):
        rows = manifest.split(split)[:limit]
        for e in rows:
            waves = load_entry(manifest, e)
            est = np.asarray(model(waves), dtype=np.float64)
            report.add(e.uid, est, waves["target"].samples, waves["mixture"].samples)
        return report
    if isinstance(model, (str, Path)):
        model = load_checkpoint(model, cfg)
    if isinstance(model, Checkpoint):
        cfg = model.config
        model = model.params()
    if cfg is None:
        raise ValueError("evaluate: cfg is required with a bare parameter set")
    fn = model_fn_for(model, cfg)
    exs = examples if examples is not None else load_split(manifest, split, limit)
    correct = 0
    i = 0
    while i < len(exs):
        j = i + 1
        while (j < len(exs) and j - i < batch_size and len(exs[j].mixture) == len(exs[i].mixture)
               and len(exs[j].enrollment) == len(exs[i].enrollment)):
            j += 1
        chunk = exs[i:j]
        y = np.stack([ex.mixture for ex in chunk])
        a = np.stack([ex.enrollment for ex in chunk])
        est, logits = fn(y, a)
        for k, ex in enumerate(chunk):
            report.add(ex.uid, est[k], ex.target, ex.mixture)
            correct += int(np.argmax(logits[k]) == ex.speaker_id)
        i = j
    report.extras["speaker_accuracy"] = correct / max(len(exs), 1)
    return report


# -- training loop ----------------------------------------------------------------------------


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    params: ModelParameters
    state: AdamState
    step: int
    epoch: int
    best_si_sdri: float
    run_dir: Path
    log_path: Path


def _ckpt_arrays(params: ModelParameters, opt: AdamState) -> dict:
    # moments default to zeros (Adam's initial state) so every group exists even before step 1
    state = params.state()
    m = OrderedDict((k, opt.m.get(k, np.zeros_like(p))) for k, p in state.items())
    v = OrderedDict((k, opt.v.get(k, np.zeros_like(p))) for k, p in state.items())
    return OrderedDict([("param", state), ("m", m), ("v", v)])


def _save(path, params, opt, model_cfg, train_cfg, step, epoch, best):
    meta = {"train_config": train_cfg.to_dict(), "adam_t": opt.t, "best_si_sdri": best,
            "rng": {"scheme": "default_rng([seed, epoch|step, stream])", "seed": train_cfg.seed}}
    save_checkpoint(path, model_cfg, _ckpt_arrays(params, opt), step=step, epoch=epoch, meta=meta)


def _crash_dump(run_dir: Path, params, opt, model_cfg, train_cfg, step, epoch, batch, reason: str) -> Path:
    y, s, a, lab = batch
    arrays = _ckpt_arrays(params, opt)
    arrays["input"] = OrderedDict([("mixture", y), ("target", s), ("enrollment", a), ("label", lab.astype(np.float64))])
    path = run_dir / f"crash_step{step:06d}.ckpt"
    meta = {"train_config": train_cfg.to_dict(), "adam_t": opt.t, "reason": reason}
    save_checkpoint(path, model_cfg, arrays, step=step, epoch=epoch, meta=meta)
    return path


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, manifest: DatasetManifest, run_dir,
          resume=None, on_step: Callable | None = None) -> TrainResult:
    """Train on the manifest's train split; log to ``run_dir/train_log.jsonl``.

    Checkpoints: ``last.ckpt`` after every epoch (and once before the first
    step), ``best.ckpt`` whenever dev SI-SDRi improves. Resuming from a
    checkpoint continues at the saved epoch boundary with identical batches,
    RCPE offsets and optimizer state.
    """
    run_dir = Path(run_dir)
    ckdir = run_dir / "checkpoints"
    ckdir.mkdir(parents=True, exist_ok=True)
    train_set = load_split(manifest, "train")
    if not train_set:
        raise ValueError("training split is empty")
    dev_set = load_split(manifest, "dev", train_cfg.dev_limit)
    spe = steps_per_epoch(len(train_set), train_cfg.batch_size)
    total_steps = train_cfg.max_epochs * spe
    if train_cfg.max_steps is not None:
        total_steps = min(total_steps, train_cfg.max_steps)

    params = init_params(model_cfg, seed=train_cfg.init_seed)
    opt = AdamState()
    step, epoch, best = 0, 0, -math.inf
    if resume is not None:
        ck = load_checkpoint(resume, model_cfg)
        params.load_state(ck.group("param"))
        opt = AdamState(int(ck.meta["adam_t"]), OrderedDict((k, v.copy()) for k, v in ck.group("m").items()),
                        OrderedDict((k, v.copy()) for k, v in ck.group("v").items()))
        step, epoch = ck.step, ck.epoch
        best = ck.meta.get("best_si_sdri", -math.inf)
        if best is None:
            best = -math.inf
        log.info("resumed from %s at epoch %d step %d", resume, epoch, step)
    else:
        _save(ckdir / "last.ckpt", params, opt, model_cfg, train_cfg, step, epoch, None)

    log_path = run_dir / LOG_NAME
    mode = "a" if resume is not None else "w"
    with open(log_path, mode) as logf:
        while epoch < train_cfg.max_epochs and step < total_steps:
            order = epoch_order(train_cfg.seed, epoch, len(train_set))
            t0 = time.time()
            for b in range(spe):
                if step >= total_steps:
                    break
                idx = order[b * train_cfg.batch_size:(b + 1) * train_cfg.batch_size]
                batch = collate([train_set[i] for i in idx])
                y, s, a, lab = batch
                lr = lr_schedule(step, spe, train_cfg)
                params.zero_grad()
                rng = np.random.default_rng([train_cfg.seed, step, 2])
                out = network.forward(y, a, params, model_cfg, mode="train", rng=rng)
                lb = loss_total(out.waveform, s, out.logits, lab, model_cfg.frame_len, model_cfg.hop)
                if not np.isfinite(lb.total.item()):
                    path = _crash_dump(run_dir, params, opt, model_cfg, train_cfg, step, epoch, batch, "non-finite loss")
                    raise TrainingDiverged(f"non-finite loss at step {step}; crash dump written to {path}")
                T.backward(lb.total)
                grads = OrderedDict((k, p.grad if p.grad is not None else np.zeros_like(p.data))
                                    for k, p in params.items())
                try:
                    norm, _ = clip_grad_norm(grads, train_cfg.grad_clip_norm)
                    adamw_step(params, grads, opt, lr, train_cfg)
                except FloatingPointError as exc:
                    path = _crash_dump(run_dir, params, opt, model_cfg, train_cfg, step, epoch, batch, str(exc))
                    raise TrainingDiverged(f"step {step}: {exc}; crash dump written to {path}") from exc
                rec = {"kind": "step", "step": step, "epoch": epoch, "lr": lr, **lb.as_dict(), "grad_norm": norm}
                logf.write(json.dumps(rec) + "\n")
                logf.flush()
                if on_step is not None:
                    on_step(rec)
                step += 1
            epoch += 1
            summary = {"kind": "dev", "epoch": epoch - 1, "step": step}
            if dev_set:
                rep = evaluate(params, manifest, "dev", model_cfg, examples=dev_set)
                agg = rep.aggregate()
                summary.update(si_sdri=agg["si_sdri"], sdri=agg["sdri"],
                               speaker_accuracy=rep.extras["speaker_accuracy"])
                if agg["si_sdri"] > best:
                    best = agg["si_sdri"]
                    _save(ckdir / "best.ckpt", params, opt, model_cfg, train_cfg, step, epoch, best)
            logf.write(json.dumps(summary) + "\n")
            logf.flush()
            _save(ckdir / "last.ckpt", params, opt, model_cfg, train_cfg, step, epoch, best if math.isfinite(best) else None)
            if train_cfg.keep_epoch_checkpoints:
                _save(ckdir / f"epoch_{epoch:04d}.ckpt", params, opt, model_cfg, train_cfg, step, epoch,
                      best if math.isfinite(best) else None)
            log.info("epoch %d done: step %d, %.1fs, dev %s", epoch - 1, step, time.time() - t0,
                     {k: round(v, 3) for k, v in summary.items() if isinstance(v, float)})
    return TrainResult(params, opt, step, epoch, best, run_dir, log_path)


def read_log(path) -> list:
    return [json.loads(s) for s in Path(path).read_text().splitlines() if s.strip()]
