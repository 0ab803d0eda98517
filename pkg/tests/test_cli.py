import csv
import json
import subprocess
import sys
from pathlib import Path

import pytest
import yaml

from guided_spkemb.cli import main
from guided_spkemb.config import RunConfig, apply_env_overrides

SMALL_CONFIG = {
    "model": {"preset": "proposed", "channels": 16, "num_blocks": 1, "kernel_sizes": [3], "dilations": [2],
              "embedding_dim": 8, "attention_dim": 8},
    "data": {"n_eval_speakers": 8, "n_trials": 10, "n_conversations": 2, "conversation_s": 15.0},
    "training": {"n_speakers": 6, "epochs": 2, "iters_per_epoch": 2, "mixtures_per_batch": 2, "window_frames": 120,
                 "clip_frames": [50, 80], "shift_min_frames": 10, "cycle_epochs": 1, "warmup_iters": 1},
}


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "small.yaml"
    path.write_text(yaml.safe_dump(SMALL_CONFIG))
    return path


def run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr().out.strip().splitlines()
    return code, out


def run_dir(out_lines):
    return Path(out_lines[-1])


def test_selfcheck_passes(tmp_path, capsys):
    code, out = run(["selfcheck", "--cases", "10", "--out", str(tmp_path)], capsys)
    assert code == 0
    assert all(line.startswith("PASS") for line in out[:-1])
    manifest = json.loads((run_dir(out) / "manifest.json").read_text())
    assert manifest["exit_code"] == 0 and manifest["command"] == "selfcheck"
    assert {"seed", "threads", "version", "started_utc", "wall_time_s", "argv"} <= set(manifest)


def test_gradcheck_small(tmp_path, capsys):
    code, out = run(["gradcheck", "--cases", "2", "--out", str(tmp_path)], capsys)
    assert code == 0 and any("aam" in line for line in out)


def test_sweep_m_writes_five_rows(tmp_path, capsys, config_file):
    code, out = run(["sweep-m", "--m", "0,1,2,3,5", "--config", str(config_file), "--out", str(tmp_path)], capsys)
    assert code == 0
    with open(run_dir(out) / "results" / "sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["m"] for r in rows] == ["0", "1", "2", "3", "5"]


def test_train_twice_is_byte_identical(tmp_path, capsys, config_file):
    dirs = []
    for tag in ("a", "b"):
        code, out = run(["train", "--seed", "7", "--config", str(config_file), "--out", str(tmp_path), "--tag", tag],
                        capsys)
        assert code == 0
        dirs.append(run_dir(out))
    assert (dirs[0] / "metrics.log").read_bytes() == (dirs[1] / "metrics.log").read_bytes()
    ckpts = [sorted((d / "checkpoints").iterdir()) for d in dirs]
    assert [p.name for p in ckpts[0]] == [p.name for p in ckpts[1]] and ckpts[0]
    for a, b in zip(*ckpts):
        assert a.read_bytes() == b.read_bytes()
    assert (dirs[0] / "config.yaml").exists()


def test_synth_then_eval_verify(tmp_path, capsys, config_file):
    code, out = run(["synth", "--config", str(config_file), "--out", str(tmp_path)], capsys)
    assert code == 0
    data = run_dir(out) / "results" / "data"
    assert (data / "trials.txt").exists() and (data / "manifest.jsonl").exists()
    code, out = run(["eval-verify", "--data", str(data), "--config", str(config_file), "--out", str(tmp_path)], capsys)
    assert code == 0
    with open(run_dir(out) / "results" / "eer.csv") as fh:
        assert list(csv.DictReader(fh))[-1]["bucket"] == "all"


def test_eval_diar_writes_rttm(tmp_path, capsys, config_file):
    code, out = run(["eval-diar", "--config", str(config_file), "--out", str(tmp_path)], capsys)
    assert code == 0
    results = run_dir(out) / "results"
    assert len(list((results / "rttm").glob("*.rttm"))) == 2
    assert "der" in json.loads((results / "der.json").read_text())


def test_unknown_flag_exits_2():
    proc = subprocess.run([sys.executable, "-m", "guided_spkemb.cli", "train", "--bogus"], capture_output=True)
    assert proc.returncode == 2


def test_bad_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("training:\n  learning_rate: 3\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path)]) == 2


def test_env_overrides():
    d = apply_env_overrides({}, {"ME_TRAINING__EPOCHS": "3", "ME_MODEL__GUIDE_BN": "true", "HOME": "/x"})
    cfg = RunConfig.from_dict(d)
    assert cfg.training.epochs == 3 and cfg.model.guide_bn is True
    with pytest.raises(ValueError):
        apply_env_overrides({}, {"ME_NOPE__X": "1"})


def test_config_yaml_roundtrip():
    cfg = RunConfig.from_dict(SMALL_CONFIG)
    assert RunConfig.from_yaml(cfg.to_yaml()) == cfg
    assert cfg.model.guide_bn and cfg.model.channels == 16
    with pytest.raises(ValueError):
        RunConfig.from_dict({"model": {"n_mels": 80}})
