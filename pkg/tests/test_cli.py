import json

import pytest
import yaml

from cudgnet.cli import flatten_sections, load_config, main, UsageError


def _smoke_args(tmp_path, data_root, *extra):
    return ["train", "--profile", "smoke", "--subset-size", "100", "--data-root", str(data_root),
            "--runs-root", str(tmp_path / "runs"), *extra]


def test_nested_sections_are_flattened(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump({"optim": {"epochs": 3, "lr_M": 0.05}, "objective": {"beta": 2.0}, "seed": 4}))
    cfg = load_config(path, overrides={"seed": 9})
    assert (cfg.epochs, cfg.lr_M, cfg.beta, cfg.seed) == (3, 0.05, 2.0, 9)
    with pytest.raises(UsageError, match="twice"):
        flatten_sections({"a": {"epochs": 1}, "b": {"epochs": 2}})


def test_missing_config_names_path(tmp_path, capsys):
    code = main(["train", "--config", str(tmp_path / "nope.yaml"), "--runs-root", str(tmp_path)])
    assert code != 0
    assert "nope.yaml" in capsys.readouterr().err


def test_invalid_key_is_named(tmp_path, capsys):
    path = tmp_path / "cfg.yaml"
    path.write_text("model:\n  widen_factr: 2\n")
    assert main(["train", "--config", str(path), "--runs-root", str(tmp_path)]) != 0
    assert "widen_factr" in capsys.readouterr().err


def test_unknown_corruption_lists_valid_names(tmp_path, capsys):
    ckpt = tmp_path / "x.pt"
    code = main(["eval", str(ckpt), "--corruptions", "fogg", "--runs-root", str(tmp_path)])
    err = capsys.readouterr().err
    assert code != 0 and "fogg" in err and "gaussian_noise" in err


@pytest.mark.slow
def test_smoke_train_eval_uncertainty(tmp_path, fake_data_root, capsys):
    assert main(_smoke_args(tmp_path, fake_data_root, "--tag", "smoke", "--evaluate")) == 0
    run = next((tmp_path / "runs").iterdir())
    assert run.name.endswith("-smoke")
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["status"] == "ok" and manifest["seed"] == 0
    assert manifest["config"]["subset_size"] == 100 and manifest["command"] == "train"
    for key in ("checkpoint", "log", "config", "eval_csv", "eval_json"):
        assert key in manifest["outputs"]
    assert (run / "config.yaml").exists() and (run / "logs" / "metrics.jsonl").exists()
    ckpt = run / "checkpoints" / "last.pt"

    out = tmp_path / "eval"
    assert main(["eval", str(ckpt), "--corruptions", "fog,snow", "--severities", "1,5",
                 "--data-root", str(fake_data_root), "--run-dir", str(out)]) == 0
    report = json.loads((out / "reports" / "eval.json").read_text())
    assert len(report["rows"]) == 4

    # rerunning into the same directory is refused unless forced
    args = ["eval", str(ckpt), "--corruptions", "fog", "--severities", "1",
            "--data-root", str(fake_data_root), "--run-dir", str(out)]
    assert main(args) != 0
    assert "--force" in capsys.readouterr().err
    assert main(args + ["--force"]) == 0

    unc = tmp_path / "unc"
    assert main(["uncertainty", str(ckpt), "--domains", "gaussian_noise,fog", "--severities", "1,3,5",
                 "--mc-samples", "3", "--batch-size", "10", "--data-root", str(fake_data_root),
                 "--run-dir", str(unc)]) == 0
    summary = json.loads((unc / "reports" / "uncertainty_summary.json").read_text())
    assert summary["n_rows"] == 6 and summary["sigma_S_ref"] > 0
    assert (unc / "reports" / "uncertainty.png").exists()


def test_corrupt_checkpoint_exits_nonzero(tmp_path, capsys):
    bad = tmp_path / "bad.pt"
    bad.write_text("garbage")
    assert main(["eval", str(bad), "--runs-root", str(tmp_path / "r")]) != 0
    assert "bad.pt" in capsys.readouterr().err
