import subprocess
import sys

import numpy as np
import pytest
import yaml

from xcrossnet import cli
from xcrossnet.dsp import Waveform, read_wav, write_wav


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert run("datagen", "--out", out, "--seed", 7, "--speakers", 4, "--train", 4, "--dev", 1, "--test", 1,
               "--duration", "0.5", "--enroll-duration", "0.5") == 0
    return out


def test_datagen_rerun_gives_same_digest(data_dir, tmp_path, capsys):
    capsys.readouterr()
    args = ["datagen", "--seed", 7, "--speakers", 4, "--train", 4, "--dev", 1, "--test", 1,
            "--duration", "0.5", "--enroll-duration", "0.5"]
    assert run(*args, "--out", tmp_path / "a") == 0
    first = capsys.readouterr().out.split("digest ")[1]
    assert run(*args, "--out", data_dir, "--force") == 0
    assert capsys.readouterr().out.split("digest ")[1] == first


def test_datagen_refuses_existing_dir(data_dir):
    assert run("datagen", "--out", data_dir, "--speakers", 4) == 1


def test_datagen_one_speaker_fails(tmp_path, capsys):
    assert run("datagen", "--out", tmp_path / "x", "--speakers", 1) == 1
    assert "disjoint" in capsys.readouterr().err


def test_bad_duration_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        run("datagen", "--out", tmp_path, "--duration", "abc")
    assert exc.value.code == 1


def test_unknown_override_suggests_nearest(data_dir, tmp_path, capsys):
    code = run("train", "--data", data_dir, "--run-dir", tmp_path / "r", "--modle.H", 8)
    assert code == 1
    assert "'model.H'" in capsys.readouterr().err


def test_override_type_error(data_dir, tmp_path, capsys):
    assert run("train", "--data", data_dir, "--run-dir", tmp_path / "r", "--model.H", "big") == 1
    assert "model.H" in capsys.readouterr().err


@pytest.fixture(scope="module")
def trained(data_dir, tmp_path_factory):
    run_dir = tmp_path_factory.mktemp("run") / "r"
    cfg = tmp_path_factory.mktemp("cfg") / "c.yaml"
    cfg.write_text(yaml.safe_dump({"model": {"N_s": 4}, "train": {"batch_size": 2, "max_epochs": 1,
                                                                   "warmup_epochs": 0}}))
    assert run("train", "--config", cfg, "--data", data_dir, "--run-dir", run_dir, "--train.max-lr", "2e-3") == 0
    return run_dir


def test_train_writes_resolved_config(trained):
    resolved = yaml.safe_load((trained / "config.yaml").read_text())
    assert resolved["model"]["N_s"] == 4
    assert resolved["train"]["max_lr"] == 2e-3
    assert resolved["train"]["batch_size"] == 2
    assert (trained / "checkpoints" / "last.ckpt").exists()


def test_train_zero_epochs(data_dir, tmp_path, capsys):
    code = run("train", "--data", data_dir, "--run-dir", tmp_path / "z", "--model.N_s", 4,
               "--train.max-epochs", 0, "--train.warmup-epochs", 0)
    assert code == 0
    assert (tmp_path / "z" / "checkpoints" / "last.ckpt").exists()
    assert "trained 0 steps" in capsys.readouterr().out


def test_train_refuses_existing_run_dir(data_dir, trained):
    assert run("train", "--data", data_dir, "--run-dir", trained, "--model.N_s", 4) == 1


def test_eval_prints_table(trained, data_dir, tmp_path, capsys):
    out = tmp_path / "rows.jsonl"
    assert run("eval", "--checkpoint", trained / "checkpoints" / "last.ckpt", "--data", data_dir,
               "--split", "test", "--out", out) == 0
    assert "si_sdri" in capsys.readouterr().out
    assert len(out.read_text().splitlines()) == 2


def test_extract_roundtrip(trained, data_dir, tmp_path, capsys):
    ck = trained / "checkpoints" / "last.ckpt"
    mix = data_dir / "test" / "test_00000_mix.wav"
    enr = next((data_dir / "speakers").rglob("test_00000_enroll.wav"))
    ref = data_dir / "test" / "test_00000_target.wav"
    assert run("extract", ck, mix, enr, tmp_path / "a.wav", "--ref", ref) == 0
    assert "SI-SDR vs reference" in capsys.readouterr().out
    assert run("extract", ck, mix, enr, tmp_path / "b.wav") == 0
    assert len(read_wav(tmp_path / "a.wav")) == len(read_wav(mix))
    assert (tmp_path / "a.wav").read_bytes() == (tmp_path / "b.wav").read_bytes()


def test_extract_missing_enrollment(trained, data_dir, tmp_path, capsys):
    ck = trained / "checkpoints" / "last.ckpt"
    code = run("extract", ck, data_dir / "test" / "test_00000_mix.wav", tmp_path / "nope.wav", tmp_path / "o.wav")
    assert code == 1
    assert "nope.wav" in capsys.readouterr().err


def test_extract_rate_mismatch(trained, tmp_path, capsys):
    ck = trained / "checkpoints" / "last.ckpt"
    write_wav(tmp_path / "m.wav", Waveform(np.zeros(800), 16000))
    write_wav(tmp_path / "e.wav", Waveform(np.zeros(800), 16000))
    assert run("extract", ck, tmp_path / "m.wav", tmp_path / "e.wav", tmp_path / "o.wav") == 1
    assert "16000 Hz" in capsys.readouterr().err


def test_verify_suites(capsys):
    assert run("verify", "params") == 0
    out = capsys.readouterr().out
    assert "5.1M" in out and "ext.block0.attn" in out
    assert run("verify", "dsp") == 0
    assert "stft_istft_roundtrip_rel_l2" in capsys.readouterr().out


def test_verify_unknown_suite():
    with pytest.raises(SystemExit) as exc:
        run("verify", "everything")
    assert exc.value.code == 1


def test_entry_point_help():
    res = subprocess.run([sys.executable, "-m", "xcrossnet.cli", "train", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "--run-dir" in res.stdout
