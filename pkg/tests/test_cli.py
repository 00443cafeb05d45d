import io

import numpy as np
import pytest

from avreason import checkpoint
from avreason.cli import run

SMALL = """\
world.T=8
world.visual_alphabet=4
world.audio_alphabet=4
world.feature_dim=4
budget.total=4
budget.visual=3
budget.audio=1
model.layers=1
model.heads=2
model.dim=16
model.max_sequence=96
train.grad_accumulation=2
train.total_steps=4
"""


def call(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = run(list(argv), out, err)
    return code, out.getvalue(), err.getvalue()


@pytest.fixture
def small(tmp_path):
    cfg = tmp_path / "small.cfg"
    cfg.write_text(SMALL)
    data = tmp_path / "d.jsonl"
    code, _, err = call("gen-data", "--seed", "3", "--episodes", "12", "--out", str(data), "--config", str(cfg))
    assert code == 0, err
    return tmp_path, cfg, data


def echoed(text):
    return dict(line.split("=", 1) for line in text.splitlines() if "=" in line and not line.startswith("#"))


def test_gen_data_byte_identical(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    for p in (a, b):
        code, out, _ = call("gen-data", "--seed", "7", "--episodes", "100", "--out", str(p))
        assert code == 0 and out.startswith("# gen-data")
    assert a.read_bytes() == b.read_bytes()
    assert len(a.read_text().splitlines()) == 100


def test_missing_data_is_usage_error():
    code, _, err = call("train", "--out", "x.ckpt")
    assert code == 1 and "--data" in err and "usage:" in err


def test_unknown_command_and_no_command():
    assert call("frobnicate")[0] == 1
    code, _, err = call()
    assert code == 1 and "usage:" in err


def test_missing_file_is_data_error(tmp_path):
    code, _, err = call("train", "--data", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path / "m.ckpt"))
    assert code == 2 and "nope.jsonl" in err


def test_corrupt_checkpoint_is_format_error(small):
    tmp, _, data = small
    bad = tmp / "bad.ckpt"
    bad.write_bytes(b"NOTACHECKPOINT")
    assert call("eval", "--ckpt", str(bad), "--data", str(data))[0] == 2


def test_gradcheck_ospe_suite():
    code, out, _ = call("gradcheck", "--suite", "ospe")
    assert code == 0
    assert "PASS ospe/identity at t=0" in out and "PASS ospe/isometry" in out and "relative shift" in out


def test_config_precedence(small):
    tmp, cfg, data = small
    code, out, _ = call("train", "--data", str(data), "--out", str(tmp / "m.ckpt"), "--stop-after", "0")
    assert code == 0 and echoed(out)["train.lambda1"] == "0.005"
    code, out, _ = call("train", "--data", str(data), "--out", str(tmp / "m.ckpt"), "--config", str(cfg),
                        "--stop-after", "0")
    assert echoed(out)["train.total_steps"] == "4" and echoed(out)["model.dim"] == "16"
    cfg2 = tmp / "c2.cfg"
    cfg2.write_text(SMALL + "train.lambda1=0.5\ntrain.base_lr=0.01\n")
    code, out, _ = call("train", "--data", str(data), "--out", str(tmp / "m.ckpt"), "--config", str(cfg2),
                        "--lambda1", "0.1", "--stop-after", "0")
    e = echoed(out)
    assert e["train.lambda1"] == "0.1" and e["train.base_lr"] == "0.01"
    code, out, _ = call("train", "--data", str(data), "--out", str(tmp / "m.ckpt"), "--config", str(cfg2),
                        "--paper-hparams", "--stop-after", "0")
    e = echoed(out)
    assert e["train.base_lr"] == "1e-05" and e["train.lambda1"] == "0.005" and e["train.grad_accumulation"] == "12"


def test_bad_config_line(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("lambda1=3\n")
    code, _, err = call("gen-data", "--seed", "1", "--episodes", "1", "--out", str(tmp_path / "x"), "--config",
                        str(cfg))
    assert code == 2 and "bad.cfg:1" in err


def test_train_eval_decode_and_rerun(small):
    tmp, cfg, data = small
    runs = []
    for name in ("a", "b"):
        ck = tmp / f"{name}.ckpt"
        code, out, err = call("train", "--data", str(data), "--out", str(ck), "--config", str(cfg))
        assert code == 0, err
        runs.append((ck.read_bytes(), (tmp / f"{name}.ckpt.metrics.csv").read_text()))
    assert runs[0] == runs[1]
    metrics = runs[0][1].splitlines()
    assert metrics[0] == "step,text,latent,sync,total,lr,tau" and len(metrics) == 5

    code, out, _ = call("eval", "--ckpt", str(tmp / "a.ckpt"), "--data", str(data), "--limit", "4")
    e = echoed(out)
    assert code == 0 and out.startswith("# eval")
    for key in ("accuracy", "av_ratio_latent", "av_ratio_text", "blind_floor", "audio_only_oracle"):
        assert key in e
    assert float(e["blind_floor"]) == 0.25

    att = tmp / "att.csv"
    code, out, _ = call("decode", "--ckpt", str(tmp / "a.ckpt"), "--data", str(data), "--index", "2",
                        "--dump-attention", str(att))
    assert code == 0 and "# answer=" in out
    rows = att.read_text().splitlines()
    assert rows[0] == "position,tag,av_ratio"
    for r in rows[1:]:
        pos, tag, ratio = r.split(",")
        assert 0.0 <= float(ratio) <= 1.0 and tag in ("text", "trigger", "latent-visual", "latent-audio", "stop")
    assert call("decode", "--ckpt", str(tmp / "a.ckpt"), "--data", str(data), "--index", "99")[0] == 2


def test_resume_matches_unbroken(small):
    tmp, cfg, data = small
    assert call("train", "--data", str(data), "--out", str(tmp / "full.ckpt"), "--config", str(cfg))[0] == 0
    assert call("train", "--data", str(data), "--out", str(tmp / "half.ckpt"), "--config", str(cfg),
                "--stop-after", "2")[0] == 0
    code, _, err = call("train", "--data", str(data), "--out", str(tmp / "half.ckpt"), "--config", str(cfg),
                        "--resume", str(tmp / "half.ckpt"))
    assert code == 0, err
    assert (tmp / "full.ckpt").read_bytes() == (tmp / "half.ckpt").read_bytes()
    assert (tmp / "full.ckpt.metrics.csv").read_text() == (tmp / "half.ckpt.metrics.csv").read_text()


def test_numeric_failure_exit_code(small, monkeypatch):
    tmp, cfg, data = small
    from avreason import trainer

    def boom(*a, **k):
        from avreason.errors import NumericError
        raise NumericError("episode 0: text loss is not finite")

    monkeypatch.setattr(trainer, "train_step", boom)
    code, _, err = call("train", "--data", str(data), "--out", str(tmp / "m.ckpt"), "--config", str(cfg))
    assert code == 3 and "episode 0" in err
