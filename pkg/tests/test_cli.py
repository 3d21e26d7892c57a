import numpy as np
import pytest

from idrnet import cli
from idrnet.autodiff import ReLU
from idrnet.scenes import load_split

TINY = ["--set", "height=16", "--set", "width=32", "--set", "train_size=8", "--set", "val_size=2",
        "--set", "channels=8", "--set", "widths=4,8,8", "--set", "batch_size=2", "--set", "iterations=3",
        "--set", "eval_every=0"]


def run(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_train_evaluate_inspect_roundtrip(tmp_path, capsys):
    out = tmp_path / "run"
    code, stdout, _ = run(["train", "--out", str(out), "--seed", "3", *TINY], capsys)
    assert code == 0, stdout
    for name in ("metrics.csv", "diagnostics.csv", "report.csv", "config.txt", "checkpoint/manifest.json",
                 "checkpoint/tensors.bin"):
        assert (out / name).exists(), name
    assert "seed = 3" in (out / "config.txt").read_text()

    code, first, _ = run(["evaluate", "--checkpoint", str(out / "checkpoint")], capsys)
    assert code == 0 and "mIoU" in first
    code, second, _ = run(["evaluate", "--checkpoint", str(out / "checkpoint")], capsys)
    assert first == second

    code, stdout, _ = run(["inspect-relations", "--checkpoint", str(out / "checkpoint"),
                           "--out", str(tmp_path / "rel")], capsys)
    assert code == 0
    assert "72 entries" in stdout
    assert stdout.count(" <- ") == 5
    assert (tmp_path / "rel" / "relation_var.csv").exists()


def test_evaluate_class_mismatch_is_usage_error(tmp_path, capsys):
    out = tmp_path / "run"
    assert cli.main(["train", "--out", str(out), *TINY]) == 0
    cfg = tmp_path / "k7.cfg"
    cfg.write_text("num_classes = 7\n")
    code, _, err = run(["evaluate", "--checkpoint", str(out / "checkpoint"), "--config", str(cfg)], capsys)
    assert code == 1 and "7 classes" in err


def test_ablate_command(tmp_path, capsys):
    code, stdout, _ = run(["ablate", "M_r_mean", "M_r_var", "--out", str(tmp_path), *TINY], capsys)
    assert code == 0
    assert stdout.splitlines()[0].startswith("baseline")
    assert len((tmp_path / "ablation.csv").read_text().splitlines()) == 5


def test_ablate_exclusive_ie_is_usage_error(tmp_path, capsys, monkeypatch):
    from idrnet import train

    monkeypatch.setattr(train, "ablation_rows", lambda toggles: [frozenset({"IE-DL", "IE-Orthogonal", "M_r_mean"})])
    code, _, err = run(["ablate", "IE-DL", "IE-Orthogonal", "--out", str(tmp_path), *TINY], capsys)
    assert code == 1 and "mutually exclusive" in err


def test_gradcheck_command(capsys):
    code, stdout, _ = run(["gradcheck"], capsys)
    assert code == 0
    assert "FAIL" not in stdout and "end_to_end_loss" in stdout


def test_gradcheck_reports_broken_operator(capsys, monkeypatch):
    monkeypatch.setattr(ReLU, "backward", lambda self, g: (np.zeros_like(g),))
    code, stdout, err = run(["gradcheck"], capsys)
    assert code == 2
    assert "FAIL  relu" in stdout and "relu" in err


def test_generate_data(tmp_path, capsys):
    code, _, _ = run(["generate-data", "--out", str(tmp_path), "--seed", "1", *TINY], capsys)
    assert code == 0
    train = load_split(tmp_path / "train")
    assert len(train) == 8 and train[0].image.shape == (3, 16, 32)
    assert len(load_split(tmp_path / "val")) == 2


@pytest.mark.parametrize("argv", [[], ["bogus"], ["train", "--seed", "x"], ["train", "--set", "nokey"],
                                  ["train", "--set", "unknown=1"], ["evaluate"], ["train", "--config", "/nope"]])
def test_usage_errors_exit_1(argv, capsys, tmp_path):
    assert cli.main(argv + ["--out", str(tmp_path)] if argv[:1] == ["train"] else argv) == 1


def test_nan_abort_exit_3(tmp_path, capsys, monkeypatch):
    from idrnet import train

    real = train.Trainer.step

    def poisoned(self):
        if self.iteration == 1:
            self.model.params["cls_o.b"].data[0] = np.nan
        return real(self)

    monkeypatch.setattr(train.Trainer, "step", poisoned)
    code, _, err = run(["train", "--out", str(tmp_path), *TINY], capsys)
    assert code == 3 and "non-finite" in err and "iteration 0" in err
    from idrnet.checkpoint import load

    tensors, meta = load(tmp_path / "checkpoint")
    assert meta["iteration"] == 0
    assert all(np.isfinite(v).all() for v in tensors.values())
