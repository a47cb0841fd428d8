"""Command-line entry point: ``xcrossnet {datagen,train,eval,extract,verify}``.

Exit codes: 0 success, 1 precondition or usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import difflib
import json
import logging
import shutil
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import yaml

from . import dsp
from .datagen import DatagenConfig, DatasetManifest, build_dataset
from .metrics import si_sdr
from .model.checkpoint import CheckpointError, load_checkpoint
from .model.config import ModelConfig, desk_config
from .model.network import extract
from .trainer import TrainConfig, TrainingDiverged, evaluate, train
from .verify import SUITES, run_suite

log = logging.getLogger("xcrossnet")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- run config --------------------------------------------------------------------------


def default_run_config() -> dict:
    """Desk defaults: the small model, 30 epochs, 1 warmup epoch."""
    train_cfg = TrainConfig(max_epochs=30, warmup_epochs=1)
    return {"model": desk_config().to_dict(), "train": train_cfg.to_dict(), "data": {"manifest": ""}}


def _coerce(value, like, key):
    if isinstance(value, str):
        value = yaml.safe_load(value) if value.strip() else value
    if like is None or value is None:
        return value
    try:
        if isinstance(like, bool):
            if isinstance(value, str):
                raise ValueError
            return bool(value)
        if isinstance(like, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if isinstance(like, float):
            return float(value)
        if isinstance(like, (list, tuple)):
            return list(value)
        if isinstance(like, str):
            return str(value)
    except (TypeError, ValueError):
        raise UsageError(f"config key {key}: cannot interpret {value!r} as {type(like).__name__}") from None
    return value


def _all_keys(cfg: dict) -> list:
    return [f"{sec}.{k}" for sec, body in cfg.items() for k in body]


def set_key(cfg: dict, dotted: str, value):
    key = dotted.replace("-", "_")
    sec, _, name = key.partition(".")
    if sec not in cfg or name not in cfg[sec]:
        near = difflib.get_close_matches(key, _all_keys(cfg), n=1, cutoff=0.5)
        hint = f"; did you mean {near[0]!r}?" if near else ""
        raise UsageError(f"unknown config key {dotted!r}{hint}")
    cfg[sec][name] = _coerce(value, cfg[sec][name], key)


def merge(cfg: dict, updates: dict, prefix: str = ""):
    for sec, body in updates.items():
        if not isinstance(body, dict):
            raise UsageError(f"config section {sec!r} must be a mapping")
        for k, v in body.items():
            set_key(cfg, f"{sec}.{k}", v)


def parse_overrides(tokens: list) -> list:
    """``--a.b value`` / ``--a.b=value`` pairs -> [(key, value)]."""
    out = []
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or "." not in tok:
            raise UsageError(f"unrecognized argument {tok!r} (overrides look like --section.key value)")
        if "=" in tok:
            k, v = tok[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise UsageError(f"override {tok} is missing a value")
            k, v = tok[2:], tokens[i + 1]
            i += 2
        out.append((k, v))
    return out


def resolve_config(path: str | None, overrides: list) -> dict:
    cfg = default_run_config()
    if path:
        p = Path(path)
        if not p.exists():
            raise UsageError(f"config file not found: {p}")
        loaded = yaml.safe_load(p.read_text()) or {}
        if not isinstance(loaded, dict):
            raise UsageError(f"{p}: top level must be a mapping")
        merge(cfg, loaded)
    for k, v in overrides:
        set_key(cfg, k, v)
    return cfg


def build_configs(cfg: dict) -> tuple:
    try:
        model_cfg = ModelConfig.from_dict(cfg["model"])
        train_cfg = TrainConfig.from_dict(cfg["train"])
    except (TypeError, ValueError, KeyError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None
    return model_cfg, train_cfg


def _prepare_dir(path: Path, force: bool):
    if path.exists() and any(path.iterdir()):
        if not force:
            raise UsageError(f"{path} exists and is not empty; pass --force to overwrite")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


# -- subcommands -------------------------------------------------------------------------


def _duration(text: str) -> tuple:
    parts = text.split(":")
    try:
        vals = tuple(float(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"duration must be SECONDS or LO:HI, got {text!r}") from None
    if len(vals) == 1:
        return (vals[0], vals[0])
    if len(vals) == 2 and vals[0] <= vals[1]:
        return vals
    raise argparse.ArgumentTypeError(f"duration must be SECONDS or LO:HI, got {text!r}")


def cmd_datagen(args) -> int:
    out = Path(args.out)
    _prepare_dir(out, args.force)
    cfg = DatagenConfig(seed=args.seed, speakers=args.speakers, train=args.train, dev=args.dev, test=args.test,
                        duration=args.duration, enroll_duration=args.enroll_duration, snr_lo=args.snr_lo,
                        snr_hi=args.snr_hi, whamr_style=args.whamr_style)
    try:
        m = build_dataset(cfg, out)
    except ValueError as exc:
        shutil.rmtree(out, ignore_errors=True)
        raise UsageError(str(exc)) from None
    print(f"wrote {len(m.entries)} mixtures to {out}")
    print(f"manifest digest {m.digest()}")
    return EXIT_OK


def cmd_train(args, extra: list) -> int:
    cfg = resolve_config(args.config, parse_overrides(extra))
    if args.data:
        cfg["data"]["manifest"] = args.data
    if not cfg["data"]["manifest"]:
        raise UsageError("no dataset given: pass --data DIR or set data.manifest")
    model_cfg, train_cfg = build_configs(cfg)
    manifest = DatasetManifest.read(cfg["data"]["manifest"])
    n_spk = max(e.speaker_id for e in manifest.entries) + 1 if manifest.entries else 0
    if n_spk > model_cfg.N_s:
        raise UsageError(f"dataset has {n_spk} speakers but model.N_s={model_cfg.N_s}")
    run_dir = Path(args.run_dir)
    if args.resume:
        run_dir.mkdir(parents=True, exist_ok=True)
    else:
        _prepare_dir(run_dir, args.force)
    (run_dir / "config.yaml").write_text(yaml.safe_dump(cfg, sort_keys=False))

    def progress(rec):
        if rec["step"] % args.print_every == 0:
            print(f"step {rec['step']:5d} epoch {rec['epoch']:3d} lr {rec['lr']:.2e} total {rec['total']:.4f} "
                  f"(mag {rec['mag']:.4f} sisdr {rec['sisdr']:.3f} ce {rec['ce']:.4f})", flush=True)

    res = train(model_cfg, train_cfg, manifest, run_dir, resume=args.resume, on_step=progress)
    print(f"trained {res.step} steps over {res.epoch} epochs; checkpoints in {run_dir / 'checkpoints'}")
    if res.step > 0 and args.final_eval > 0:
        rep = evaluate(res.params, manifest, "train", model_cfg, limit=args.final_eval)
        agg = rep.aggregate()
        (run_dir / "train_eval.jsonl").write_text(rep.to_jsonl())
        print(f"final train SI-SDRi {agg['si_sdri']:.2f} dB, SDRi {agg['sdri']:.2f} dB, "
              f"speaker accuracy {rep.extras['speaker_accuracy']:.3f} (over {len(rep.rows)} mixtures)")
    return EXIT_OK


def cmd_eval(args) -> int:
    manifest = DatasetManifest.read(args.data)
    rep = evaluate(Path(args.checkpoint), manifest, args.split, limit=args.limit)
    print(rep.to_table())
    if "speaker_accuracy" in rep.extras:
        print(f"speaker accuracy {rep.extras['speaker_accuracy']:.3f}")
    if args.out:
        Path(args.out).write_text(rep.to_jsonl())
    return EXIT_OK


def cmd_extract(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    for p in (args.mixture, args.enrollment):
        if not Path(p).exists():
            raise UsageError(f"no such WAV file: {p}")
    rate = ck.config.sample_rate
    try:
        y = dsp.read_wav(args.mixture, rate)
        a = dsp.read_wav(args.enrollment, rate)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    est = extract(y, a, ck.params(), ck.config)
    dsp.write_wav(args.out, est)
    print(f"wrote {len(est)} samples to {args.out}")
    if args.ref:
        ref = dsp.read_wav(args.ref, rate)
        if len(ref) != len(est):
            raise UsageError(f"reference has {len(ref)} samples, mixture {len(est)}")
        print(f"SI-SDR vs reference: {si_sdr(est.samples, ref.samples):.2f} dB")
    return EXIT_OK


def cmd_verify(args) -> int:
    return EXIT_OK if run_suite(args.suite) else EXIT_RUNTIME


# -- parser ------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="xcrossnet", description="Target speaker extraction: data, training, evaluation, inference.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    d = sub.add_parser("datagen", help="generate a synthetic two-speaker dataset")
    d.add_argument("--out", required=True, help="output directory for WAVs and manifest.jsonl")
    d.add_argument("--seed", type=int, default=0, help="global seed; output is a pure function of it")
    d.add_argument("--speakers", type=int, default=8, help="number of synthetic speakers")
    d.add_argument("--train", type=int, default=64, help="training mixtures")
    d.add_argument("--dev", type=int, default=16, help="development mixtures")
    d.add_argument("--test", type=int, default=16, help="test mixtures (disjoint speakers)")
    d.add_argument("--duration", type=_duration, default=(1.0, 4.0), help="clip length in seconds, SECONDS or LO:HI")
    d.add_argument("--enroll-duration", type=float, default=2.0, help="enrollment length in seconds")
    d.add_argument("--snr-lo", type=float, default=0.0, help="lowest target-to-interferer SNR in dB")
    d.add_argument("--snr-hi", type=float, default=5.0, help="highest target-to-interferer SNR in dB")
    d.add_argument("--whamr-style", action="store_true", help="add synthetic reverberation and pink noise")
    d.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    t = sub.add_parser("train", help="train a model; extra --section.key value pairs override the config",
                       epilog="Overrides use dotted keys, e.g. --train.max-epochs 0 --model.H 32.")
    t.add_argument("--config", help="YAML config file (sections model, train, data)")
    t.add_argument("--data", help="dataset directory or manifest path (overrides data.manifest)")
    t.add_argument("--run-dir", required=True, help="output run directory")
    t.add_argument("--resume", help="checkpoint to resume from (appends to the run's log)")
    t.add_argument("--force", action="store_true", help="overwrite a non-empty run directory")
    t.add_argument("--print-every", type=int, default=10, help="print every N steps")
    t.add_argument("--final-eval", type=int, default=64, help="train mixtures to score after training (0 = skip)")

    e = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    e.add_argument("--checkpoint", required=True, help="checkpoint file")
    e.add_argument("--data", required=True, help="dataset directory or manifest path")
    e.add_argument("--split", default="test", choices=["train", "dev", "test"], help="split to score")
    e.add_argument("--limit", type=int, help="score at most this many rows")
    e.add_argument("--out", help="write per-row JSONL here")

    x = sub.add_parser("extract", help="extract the enrolled speaker from a mixture WAV")
    x.add_argument("checkpoint", help="checkpoint file")
    x.add_argument("mixture", help="mixture WAV (mono, 16-bit, model sample rate)")
    x.add_argument("enrollment", help="enrollment WAV of the target speaker")
    x.add_argument("out", help="output WAV path")
    x.add_argument("--ref", help="clean reference WAV; prints SI-SDR of the output against it")

    v = sub.add_parser("verify", help="run built-in verification suites")
    v.add_argument("suite", choices=sorted(SUITES) + ["all"], help="suite to run")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if extra and args.command != "train":
        parser.error(f"unrecognized arguments: {' '.join(extra)}")
    try:
        if args.command == "datagen":
            return cmd_datagen(args)
        if args.command == "train":
            return cmd_train(args, extra)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "extract":
            return cmd_extract(args)
        return cmd_verify(args)
    except (UsageError, FileNotFoundError, CheckpointError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        log.debug("unhandled", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
