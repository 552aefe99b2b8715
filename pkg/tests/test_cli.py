import subprocess
import sys

import pytest

from mmmna import cli
from mmmna.data import read_dataset
from mmmna.gradcheck import CheckResult
from mmmna.harness import read_predictions

TINY_CFG = "max_epochs=2\npatience=1\nbase_channels=4\naugment=false\nlr=0.001\n"


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["gen-data", "--out", str(root / "data"), "--subjects", "8",
                     "--shape", "16,16,16", "--seed", "3"]) == 0
    (root / "tiny.cfg").write_text(TINY_CFG)
    return root


def test_gen_data(workspace):
    subs = read_dataset(workspace / "data")
    assert len(subs) == 8 and subs[0].shape == (16, 16, 16)


def test_train_ablate_compare(workspace, capsys):
    out = workspace / "run"
    assert cli.main(["train", "--data", str(workspace / "data"), "--config", str(workspace / "tiny.cfg"),
                     "--out", str(out)]) == 0
    assert (out / "model" / "manifest.txt").exists() and (out / "history.csv").exists()
    preds = out / "val_predictions.csv"
    assert len(read_predictions(preds)) >= 1
    assert cli.main(["ablate", "--data", str(workspace / "data"), "--model", str(out / "model"),
                     "--out", str(workspace / "abl")]) == 0
    text = (workspace / "abl" / "summary.txt").read_text(encoding="utf-8")
    assert "FLAIR+T1+T1Ce+T2" in text and "FLAIR+T1Ce" in text
    capsys.readouterr()
    assert cli.main(["compare", "--preds-a", str(preds), "--preds-b", str(preds)]) == 0
    line = capsys.readouterr().out
    assert "b=0 c=0" in line and "p=1.000000" in line and "degenerate" in line


def test_cv(workspace):
    out = workspace / "cv"
    assert cli.main(["cv", "--data", str(workspace / "data"), "--config", str(workspace / "tiny.cfg"),
                     "--folds", "2", "--out", str(out)]) == 0
    assert len(list(out.glob("preds_fold*.csv"))) == 2
    assert (out / "summary.csv").exists() and (out / "ablation" / "summary.csv").exists()


def test_gradcheck_exit_codes(monkeypatch, capsys):
    assert cli.main(["gradcheck", "--only", "softmax"]) == 0
    assert "PASS" in capsys.readouterr().out
    from mmmna import gradcheck

    monkeypatch.setattr(gradcheck, "run_gradient_suite",
                        lambda only=None: [CheckResult("ok", 0.0, 0.0), CheckResult("bad", 1.0, 0.0)])
    assert cli.main(["gradcheck"]) == 1
    assert "FAIL  bad" in capsys.readouterr().out


def test_usage_errors_exit_1(capsys):
    assert cli.main(["frobnicate"]) == 1
    assert cli.main(["gen-data", "--out", "x", "--subjects", "2", "--shape", "4,4"]) == 1
    assert cli.main(["compare", "--preds-a", "a"]) == 1
    assert "usage:" in capsys.readouterr().err


def test_config_errors_exit_1(workspace, tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("learning_rate=0.1\n")
    assert cli.main(["train", "--data", str(workspace / "data"), "--config", str(bad),
                     "--out", str(tmp_path / "o")]) == 1
    bad.write_text("patience=300\n")
    assert cli.main(["cv", "--data", str(workspace / "data"), "--config", str(bad),
                     "--out", str(tmp_path / "o")]) == 1
    assert cli.main(["gen-data", "--out", str(tmp_path / "g"), "--subjects", "0"]) == 1


def test_io_errors_exit_2(workspace, tmp_path):
    assert cli.main(["train", "--data", str(tmp_path / "missing"), "--config", str(workspace / "tiny.cfg"),
                     "--out", str(tmp_path / "o")]) == 2
    assert cli.main(["train", "--data", str(workspace / "data"), "--config", str(tmp_path / "none.cfg"),
                     "--out", str(tmp_path / "o")]) == 2
    junk = tmp_path / "junk.csv"
    junk.write_text("a,b\n1,2\n")
    assert cli.main(["compare", "--preds-a", str(junk), "--preds-b", str(junk)]) == 2
    assert cli.main(["ablate", "--data", str(workspace / "data"), "--model", str(tmp_path / "nomodel"),
                     "--out", str(tmp_path / "o")]) == 2


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "mmmna", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "gen-data" in res.stdout
    res = subprocess.run([sys.executable, "-m", "mmmna", "nope"], capture_output=True, text=True)
    assert res.returncode == 1


def test_cv_ten_folds_on_237_subjects(tmp_path):
    data = tmp_path / "d237"
    assert cli.main(["gen-data", "--out", str(data), "--subjects", "237", "--shape", "16,16,16",
                     "--seed", "0"]) == 0
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text("max_epochs=2\npatience=1\nbase_channels=4\naugment=false\n")
    assert cli.main(["cv", "--data", str(data), "--config", str(cfg), "--folds", "10",
                     "--out", str(tmp_path / "cv")]) == 0
    files = sorted((tmp_path / "cv").glob("preds_fold*.csv"))
    assert len(files) == 10
    sizes = sorted({len(read_predictions(f)) for f in files})
    assert sizes == [23, 24]
