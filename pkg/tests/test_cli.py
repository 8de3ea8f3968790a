import json
import subprocess
import sys

import numpy as np
import pytest

from n2n import modelio
from n2n.cli import main
from n2n.train import read_metrics


@pytest.fixture
def mlp_model(tmp_path):
    path = tmp_path / "t.n2n"
    assert main(["init", "--arch", "mlp", "--input-shape", "12", "--hidden", "6", "--out", str(path)]) == 0
    return path


def test_verify_self_at_zero_tolerance(mlp_model, capsys):
    code = main(["verify", "--teacher", str(mlp_model), "--student", str(mlp_model),
                 "--samples", "16", "--tol", "0"])
    report = json.loads(capsys.readouterr().out)
    assert code == 0 and report["max_abs_diff"] == 0 and report["passed"]


def test_widen_then_verify(mlp_model, tmp_path):
    out, plan = tmp_path / "s.n2n", tmp_path / "plan.json"
    assert main(["widen", "--model", str(mlp_model), "--spec", "fc1=10", "--noise", "0", "--seed", "1",
                 "--out", str(out), "--plan", str(plan)]) == 0
    assert json.loads(plan.read_text())["units"]["fc1"]["q"] == 10
    assert modelio.load(out)[0].channels("fc1") == 10
    assert main(["verify", "--teacher", str(mlp_model), "--student", str(out), "--samples", "64",
                 "--tol", "1e-5"]) == 0


def test_noisy_widen_fails_tight_verify(mlp_model, tmp_path):
    out = tmp_path / "s.n2n"
    assert main(["widen", "--model", str(mlp_model), "--spec", "fc1=10", "--noise", "0.5", "--seed", "1",
                 "--out", str(out)]) == 0
    assert main(["verify", "--teacher", str(mlp_model), "--student", str(out), "--samples", "16",
                 "--tol", "0"]) == 3


def test_invalid_widen_exit_codes(mlp_model, tmp_path, capsys):
    out = str(tmp_path / "s.n2n")
    assert main(["widen", "--model", str(mlp_model), "--spec", "hidden=4", "--noise", "0", "--seed", "0",
                 "--out", out]) == 2
    assert "hidden" in capsys.readouterr().err
    assert main(["widen", "--model", str(mlp_model), "--spec", "fc1=3", "--noise", "0", "--seed", "0",
                 "--out", out]) == 2
    assert main(["widen", "--model", str(mlp_model), "--spec", "fc1", "--noise", "0", "--seed", "0",
                 "--out", out]) == 1


def test_usage_errors_exit_1(mlp_model):
    with pytest.raises(SystemExit) as info:
        main(["widen", "--model", str(mlp_model)])
    assert info.value.code == 1
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 1


def test_missing_and_corrupt_files_exit_2(tmp_path, mlp_model):
    assert main(["verify", "--teacher", str(tmp_path / "nope"), "--student", str(mlp_model),
                 "--samples", "4", "--tol", "0"]) == 2
    bad = tmp_path / "bad.n2n"
    data = bytearray(mlp_model.read_bytes())
    data[-1] ^= 1
    bad.write_bytes(bytes(data))
    assert main(["verify", "--teacher", str(bad), "--student", str(mlp_model),
                 "--samples", "4", "--tol", "0"]) == 2


def test_structure_mismatch_exit_2(tmp_path, mlp_model):
    other = tmp_path / "o.n2n"
    main(["init", "--arch", "mlp", "--input-shape", "12", "--classes", "3", "--out", str(other)])
    assert main(["verify", "--teacher", str(mlp_model), "--student", str(other),
                 "--samples", "4", "--tol", "0"]) == 2


def test_train_writes_metrics_and_resumes(mlp_model, tmp_path, monkeypatch):
    monkeypatch.setenv("N2N_TIMING", "off")
    m1, saved = tmp_path / "m1.csv", tmp_path / "trained.n2n"
    args = ["--data", "synth:1", "--lr", "0.01", "--optimizer", "sgd", "--batch", "16", "--seed", "0"]
    assert main(["train", "--model", str(mlp_model), "--steps", "30", "--metrics", str(m1),
                 "--save", str(saved)] + args) == 0
    rows = read_metrics(m1)
    assert rows[0].step == 0 and rows[-1].step == 30 and all(r.wall_ms == 0 for r in rows)
    assert modelio.load(saved)[2].step == 30
    # 30 + 30 resumed equals 60 straight
    assert main(["train", "--model", str(saved), "--steps", "30", "--metrics", str(tmp_path / "m2.csv"),
                 "--save", str(tmp_path / "resumed.n2n")] + args) == 0
    assert main(["train", "--model", str(mlp_model), "--steps", "60", "--metrics", str(tmp_path / "m3.csv"),
                 "--save", str(tmp_path / "straight.n2n")] + args) == 0
    a, b = modelio.load(tmp_path / "resumed.n2n")[1], modelio.load(tmp_path / "straight.n2n")[1]
    assert all(np.array_equal(a[n][k], b[n][k]) for n in a for k in a[n])


def test_bad_data_source_is_usage_error(mlp_model, tmp_path):
    assert main(["train", "--model", str(mlp_model), "--data", "mnist", "--steps", "1", "--lr", "0.1",
                 "--optimizer", "sgd", "--batch", "4", "--seed", "0", "--metrics", str(tmp_path / "m")]) == 1


def test_deepen_conv_model(tmp_path):
    model, out = tmp_path / "c.n2n", tmp_path / "d.n2n"
    assert main(["init", "--arch", "conv_stack", "--input-shape", "1,8,8", "--out", str(model)]) == 0
    assert main(["deepen", "--model", str(model), "--at", "conv1:3x1,conv2", "--calib", "synth:0",
                 "--noise", "0", "--out", str(out)]) == 0
    g = modelio.load(out)[0]
    assert g.kind("conv1_deep").geom.kernel_h == 3 and g.kind("conv1_deep").geom.kernel_w == 1
    assert main(["verify", "--teacher", str(model), "--student", str(out), "--samples", "64",
                 "--tol", "1e-4"]) == 0
    assert main(["deepen", "--model", str(model), "--at", "conv1:3x", "--calib", "synth:0",
                 "--noise", "0", "--out", str(out)]) == 1
    assert main(["deepen", "--model", str(model), "--at", "logits", "--calib", "synth:0",
                 "--noise", "0", "--out", str(out)]) == 2


def test_console_script_entry_point(tmp_path):
    out = tmp_path / "m.n2n"
    r = subprocess.run([sys.executable, "-m", "n2n", "init", "--arch", "mlp", "--input-shape", "4",
                        "--out", str(out)], capture_output=True, text=True)
    assert r.returncode == 0 and out.exists()
    r = subprocess.run([sys.executable, "-m", "n2n", "verify"], capture_output=True, text=True)
    assert r.returncode == 1 and "usage" in r.stderr
