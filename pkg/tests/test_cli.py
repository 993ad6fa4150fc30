import pandas as pd
import pytest

import cli
from cli import build_parser, fold_config, fold_dir, main, resolve_config
from config import RunConfig
from utils import METRIC_COLUMNS, AugmentationError

TINY = [
    "--set", "network.channels=[4, 8]",
    "--set", "network.input_size=16",
    "--set", "network.decoder_channels=4",
    "--set", "distill.fine_iterations=2",
    "--set", "distill.coarse_iterations=2",
    "--set", "distill.batch_size=4",
    "--set", "tune.epochs=2",
    "--set", "tune.batch_size=8",
    "--set", "tune.tta_views=flip",
    "--set", "data.k_folds=2",
    "--threads", "1",
    "--quiet",
]


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["gen-synth", "--n", "16", "--classes", "2", "--seed", "1", "--out", str(out), "--quiet"]) == 0
    return out


def test_usage_error_exits_with_one(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["pretrain"])
    assert exc.value.code == 1
    assert "--seed" in capsys.readouterr().err


def test_unknown_subcommand_exits_with_one():
    with pytest.raises(SystemExit) as exc:
        main(["train-everything"])
    assert exc.value.code == 1


def test_help_lists_full_scale_defaults(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["run-all", "--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    assert "tune.start_dilations" in out and "15" in out


def test_bad_config_returns_one(tmp_path, capsys):
    code = main(["masks", "--set", "hpm.nope=1", "--out", str(tmp_path)])
    assert code == 1
    assert "ConfigError" in capsys.readouterr().err
    assert main(["masks", "--set", "tune.lam=2", "--out", str(tmp_path)]) == 1


def test_missing_data_returns_two(tmp_path, capsys):
    assert main(["masks", "--out", str(tmp_path / "run"), "--quiet"]) == 2
    assert main(["masks", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "run"), "--quiet"]) == 2
    assert "DataError" in capsys.readouterr().err


def test_invalid_value_returns_one_without_traceback(tmp_path, monkeypatch, capsys):
    def broken(args, cfg):
        raise AugmentationError("vflip kräver tillstånd")

    monkeypatch.setattr(cli, "cmd_masks", broken)
    assert main(["masks", "--out", str(tmp_path), "--quiet"]) == 1
    err = capsys.readouterr().err
    assert "AugmentationError" in err and "Traceback" not in err


def test_pretrain_without_masks_returns_two(synth_dir, tmp_path):
    args = ["pretrain", "--data", str(synth_dir), "--seed", "0", "--out", str(tmp_path)] + TINY
    assert main(args) == 2


def test_resolve_config_precedence(tmp_path):
    config = tmp_path / "c.yaml"
    config.write_text("seed: 3\ntune:\n  epochs: 7\n")
    args = build_parser().parse_args(["tune", "--config", str(config), "--set", "tune.epochs=9", "--seed", "5",
                                      "--fold", "2", "--data", "d", "--out", "o"])
    cfg = resolve_config(args)
    assert (cfg.seed, cfg.tune.epochs, cfg.data.fold, cfg.data.dataset_dir, cfg.out_dir) == (5, 9, 2, "d", "o")


def test_fold_config_derives_distinct_seeds():
    base = RunConfig()
    a = fold_config(base, 0, 7)
    b = fold_config(base, 1, 7)
    assert a.data.fold == 0 and b.data.fold == 1
    assert a.distill.seed != b.distill.seed
    assert a.distill.seed != a.tune.seed
    assert fold_config(base, 0, 7).tune.seed == a.tune.seed
    assert base.distill.seed == 0


def test_fold_dir_layout(tmp_path):
    assert fold_dir(tmp_path, 3) == tmp_path / "fold3"
    assert fold_dir(tmp_path, 3, run=1) == tmp_path / "run1" / "fold3"


def test_gen_synth_writes_corpus(synth_dir):
    votes = pd.read_csv(synth_dir / "votes.csv", header=None)
    assert len(votes) == 16
    assert len(list((synth_dir / "images").glob("*.png"))) == 16
    assert (synth_dir / "manifest.jsonl").exists()


@pytest.mark.slow
def test_run_all_writes_every_artifact(synth_dir, tmp_path):
    out = tmp_path / "run"
    args = ["run-all", "--data", str(synth_dir), "--seed", "0", "--out", str(out), "--overlays", "1"] + TINY
    assert main(args) == 0
    assert (out / "folds.csv").exists()
    assert (out / "masks" / "masks.jsonl").exists()
    for fold in range(2):
        fdir = out / f"fold{fold}"
        for rel in ("pretrain/teacher.npz", "pretrain/loss.csv", "pretrain/config.yaml", "pretrain/run.log",
                    "tune/classifier.npz", "tune/loss.csv", "eval/metrics.csv", "eval/predictions.csv"):
            assert (fdir / rel).exists(), rel
        assert len(list((fdir / "overlay").glob("*.png"))) == 1
        metrics = pd.read_csv(fdir / "eval" / "metrics.csv")
        assert list(metrics.columns) == METRIC_COLUMNS
        assert metrics["fold"].tolist() == [fold]
    summary = pd.read_csv(out / "summary" / "summary.csv")
    assert summary["metric"].tolist() == ["accuracy", "recall", "precision", "f1"]
    assert (summary["n"] == 2).all()
    assert (out / "summary" / "summary.xlsx").exists()


@pytest.mark.slow
def test_run_all_is_reproducible(synth_dir, tmp_path):
    outputs = []
    for name in ("a", "b"):
        out = tmp_path / name
        args = ["run-all", "--data", str(synth_dir), "--seed", "4", "--out", str(out), "--fold", "1",
                "--overlays", "0"] + TINY
        assert main(args) == 0
        outputs.append(out)
    for rel in ("fold1/pretrain/loss.csv", "fold1/tune/loss.csv", "fold1/eval/metrics.csv"):
        assert (outputs[0] / rel).read_bytes() == (outputs[1] / rel).read_bytes(), rel


@pytest.mark.slow
def test_skip_pretrain_with_repeated_runs(synth_dir, tmp_path):
    out = tmp_path / "ablation"
    args = ["run-all", "--data", str(synth_dir), "--seed", "0", "--out", str(out), "--fold", "0", "--runs", "2",
            "--skip-pretrain", "--overlays", "0"] + TINY
    assert main(args) == 0
    assert not (out / "run0" / "fold0" / "pretrain").exists()
    assert (out / "run1" / "fold0" / "eval" / "metrics.csv").exists()
    metrics = pd.read_csv(out / "summary" / "metrics_all.csv")
    assert metrics["run"].tolist() == [0, 1]


@pytest.mark.slow
def test_stages_one_by_one(synth_dir, tmp_path):
    common = ["--data", str(synth_dir), "--out", str(tmp_path), "--fold", "0"] + TINY
    assert main(["masks"] + common) == 0
    assert main(["pretrain", "--seed", "2"] + common) == 0
    assert main(["tune", "--seed", "2"] + common) == 0
    assert main(["eval"] + common) == 0
    assert main(["overlay", "--count", "2"] + common) == 0
    assert (tmp_path / "fold0" / "eval" / "metrics.csv").exists()
    assert len(list((tmp_path / "fold0" / "overlay").glob("*.png"))) == 2


@pytest.fixture(scope="module")
def desk_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk")
    assert main(["gen-synth", "--n", "250", "--classes", "4", "--seed", "7", "--out", str(out), "--quiet"]) == 0
    return out


@pytest.mark.slow
def test_desk_run_is_accurate_and_pretraining_helps(desk_dir, tmp_path):
    accuracy = {}
    for name, extra in (("pretrained", []), ("scratch", ["--skip-pretrain"])):
        out = tmp_path / name
        args = ["run-all", "--data", str(desk_dir), "--seed", "0", "--out", str(out), "--fold", "0",
                "--runs", "3", "--overlays", "0", "--threads", "1", "--quiet"] + extra
        assert main(args) == 0
        metrics = pd.read_csv(out / "summary" / "metrics_all.csv")
        assert metrics["run"].tolist() == [0, 1, 2]
        accuracy[name] = metrics["accuracy"].mean()
    assert accuracy["pretrained"] >= 0.85
    assert accuracy["pretrained"] > accuracy["scratch"]
