import io

import numpy as np
import openpyxl
import pandas as pd
import pytest

from hpm import build_hierarchy
from report import (
    SUMMARY_METRICS,
    collect_metrics,
    export_summary_excel,
    fold_metrics_figure,
    load_run,
    loss_curve_figure,
    mask_iou_figure,
    render_overlay,
    summarize_metrics,
    write_summary_csv,
)
from utils import DataError, export_metrics_csv


def _write_fold(root, fold, accuracy, run=None):
    base = root if run is None else root / f"run{run}"
    row = {"fold": fold, "accuracy": accuracy, "recall": accuracy - 0.1, "precision": accuracy - 0.05,
           "f1": accuracy - 0.08}
    export_metrics_csv([row], base / f"fold{fold}" / "eval" / "metrics.csv")


def test_summary_mean_and_population_std(tmp_path):
    for fold, acc in enumerate([0.8, 0.9, 1.0]):
        _write_fold(tmp_path, fold, acc)
    metrics = collect_metrics(tmp_path)
    assert metrics["fold"].tolist() == [0, 1, 2]
    assert (metrics["run"] == 0).all()
    summary = summarize_metrics(metrics).set_index("metric")
    assert list(summary.index) == SUMMARY_METRICS
    assert summary.loc["accuracy", "mean"] == pytest.approx(0.9)
    assert summary.loc["accuracy", "std"] == pytest.approx(np.std([0.8, 0.9, 1.0]))
    assert summary.loc["accuracy", "text"] == "0.900 ± 0.082"
    assert summary.loc["f1", "n"] == 3


def test_single_row_has_zero_std(tmp_path):
    _write_fold(tmp_path, 0, 0.7)
    summary = summarize_metrics(collect_metrics(tmp_path))
    assert (summary["std"] == 0).all()


def test_runs_are_collected_and_sorted(tmp_path):
    _write_fold(tmp_path, 1, 0.6, run=1)
    _write_fold(tmp_path, 0, 0.7, run=1)
    _write_fold(tmp_path, 0, 0.8, run=0)
    metrics = collect_metrics(tmp_path)
    assert list(zip(metrics["run"], metrics["fold"])) == [(0, 0), (1, 0), (1, 1)]


def test_empty_and_broken_inputs(tmp_path):
    assert len(collect_metrics(tmp_path)) == 0
    with pytest.raises(DataError):
        summarize_metrics(collect_metrics(tmp_path))
    path = tmp_path / "fold0" / "eval" / "metrics.csv"
    path.parent.mkdir(parents=True)
    path.write_text("fold,accuracy\n0,0.5\n")
    with pytest.raises(DataError, match="saknar kolumner"):
        collect_metrics(tmp_path)


def test_summary_files_and_excel(tmp_path):
    for fold, acc in enumerate([0.8, 0.9]):
        _write_fold(tmp_path, fold, acc)
    metrics = collect_metrics(tmp_path)
    summary = summarize_metrics(metrics)
    out = write_summary_csv(metrics, summary, tmp_path / "summary")
    assert pd.read_csv(out / "summary.csv")["metric"].tolist() == SUMMARY_METRICS
    assert len(pd.read_csv(out / "metrics_all.csv")) == 2

    export_summary_excel(metrics, summary, out / "summary.xlsx")
    book = openpyxl.load_workbook(out / "summary.xlsx")
    assert book.sheetnames == ["Sammanfattning", "Per del"]
    assert book["Sammanfattning"]["A2"].value == "accuracy"

    payload = export_summary_excel(metrics, summary)
    assert isinstance(payload, bytes)
    assert openpyxl.load_workbook(io.BytesIO(payload)).sheetnames == ["Sammanfattning", "Per del"]


def test_figures_use_dark_layout():
    log = pd.DataFrame({"iteration": [0, 1, 2], "seg": [1.0, 0.8, 0.5], "con": [0.1, 0.1, 0.05],
                        "rot": [np.nan] * 3, "run": 0, "fold": 0})
    fig = loss_curve_figure(log)
    assert len(fig.data) == 3
    assert fig.layout.plot_bgcolor == "#1a1a1a"
    assert loss_curve_figure(pd.DataFrame()) is None

    metrics = pd.DataFrame({"run": [0, 0], "fold": [0, 1], "accuracy": [0.8, 0.9], "recall": [0.7, 0.8],
                            "precision": [0.75, 0.85], "f1": [0.72, 0.82]})
    bars = fold_metrics_figure(metrics)
    assert [trace.name for trace in bars.data] == SUMMARY_METRICS
    assert list(bars.data[0].x) == ["Del 0", "Del 1"]
    assert fold_metrics_figure(None) is None


def test_render_overlay_panels(make_ellipse):
    core = make_ellipse((20, 20), (10, 10), 5, 3)
    hierarchy = build_hierarchy(core, np.ones((20, 20), dtype=bool), 2)
    image = np.full((20, 20, 1), 0.8, dtype=np.float32)
    out = render_overlay(image, hierarchy, teacher_mask=core)
    assert out.shape == (20, 60, 3)
    assert out.min() >= 0.0 and out.max() <= 1.0
    assert np.allclose(out[:, :20], 0.8)
    assert not np.allclose(out[:, 20:40], 0.8)
    assert render_overlay(image, hierarchy).shape == (20, 40, 3)


def test_load_run(tmp_path, masks_dir):
    _write_fold(tmp_path, 0, 0.9)
    (tmp_path / "fold0" / "tune").mkdir()
    (tmp_path / "fold0" / "tune" / "loss.csv").write_text("epoch,loss,dilations,lr,val_accuracy\n0,1.0,2,0.001,\n")
    (tmp_path / "fold0" / "config.yaml").write_text("seed: 3\n")
    run = load_run(tmp_path)
    assert run["summary"] is not None
    assert run["tune_loss"]["fold"].tolist() == [0]
    assert len(run["pretrain_loss"]) == 0
    assert run["config"] == {"seed": 3}
    assert run["masks"] is None
    assert load_run(masks_dir)["masks"] is not None
    with pytest.raises(DataError):
        load_run(tmp_path / "missing")


def test_mask_iou_histogram(masks_dir):
    masks = load_run(masks_dir)["masks"]
    fig = mask_iou_figure(masks)
    assert fig.data[0].type == "histogram"
    assert len(fig.data[0].x) == len(masks)
    assert mask_iou_figure(masks.drop(columns=["iou_head"])) is None
    assert mask_iou_figure(None) is None
