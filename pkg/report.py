"""
Run summaries and figures for the sperm-head pipeline.
Reads a run directory written by the CLI, aggregates fold metrics as mean ± std
and builds the plotly figures shown in the dashboard.
"""

import io
import logging
import re
from pathlib import Path

import numpy as np
import pandas as pd
import plotly.graph_objects as go
import yaml
from skimage.segmentation import find_boundaries

from utils import METRIC_COLUMNS, DataError

logger = logging.getLogger(__name__)

SUMMARY_METRICS = ["accuracy", "recall", "precision", "f1"]
RUN_PATTERN = re.compile(r"run(\d+)$")
FOLD_PATTERN = re.compile(r"fold(\d+)$")

# Färger för kurvorna; accentfärgen är densamma som i dashboardens CSS
CURVE_COLORS = ["#ff6b35", "lightblue", "#7bd389", "#f4d35e", "#c77dff"]


def _dark_layout(fig, title, xaxis_title, yaxis_title):
    fig.update_layout(
        title=title,
        xaxis_title=xaxis_title,
        yaxis_title=yaxis_title,
        plot_bgcolor='#1a1a1a',
        paper_bgcolor='#1a1a1a',
        font=dict(color='white'),
        xaxis=dict(gridcolor='#333333', color='white'),
        yaxis=dict(gridcolor='#333333', color='white')
    )
    return fig


def _index_from_path(path, pattern):
    for part in path.parts:
        match = pattern.match(part)
        if match:
            return int(match.group(1))
    return 0


def collect_metrics(run_dir):
    """
    Samla alla eval/metrics.csv under en körkatalog

    Returns:
        DataFrame med kolumnen run följd av fold, accuracy, recall, precision, f1
    """
    run_dir = Path(run_dir)
    frames = []
    for path in sorted(run_dir.rglob("eval/metrics.csv")):
        df = pd.read_csv(path)
        missing = [col for col in METRIC_COLUMNS if col not in df.columns]
        if missing:
            raise DataError(f"{path} saknar kolumner: {missing}")
        df.insert(0, "run", _index_from_path(path.relative_to(run_dir), RUN_PATTERN))
        frames.append(df)
    if not frames:
        return pd.DataFrame(columns=["run"] + METRIC_COLUMNS)
    return pd.concat(frames, ignore_index=True).sort_values(["run", "fold"], kind="stable").reset_index(drop=True)


def summarize_metrics(metrics):
    """
    Medel ± standardavvikelse per mått över alla (run, fold)-rader

    Standardavvikelsen är populationens (ddof=0), så en enda rad ger 0.

    Returns:
        DataFrame med metric, mean, std, n och text ("0.912 ± 0.013")

    How to modify:
    - Ändra ddof för stickprovets standardavvikelse
    - Lägg till mått i SUMMARY_METRICS
    """
    if metrics is None or len(metrics) == 0:
        raise DataError("Inga metrikrader att sammanfatta")
    rows = []
    for name in SUMMARY_METRICS:
        values = metrics[name].astype(float)
        mean, std = float(values.mean()), float(values.std(ddof=0))
        rows.append({"metric": name, "mean": mean, "std": std, "n": int(values.size),
                     "text": f"{mean:.3f} ± {std:.3f}"})
    return pd.DataFrame(rows)


def write_summary_csv(metrics, summary, out_dir):
    """Skriv summary/metrics_all.csv och summary/summary.csv med fast decimalformat."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics.to_csv(out_dir / "metrics_all.csv", index=False, float_format="%.6f", lineterminator="\n")
    summary.to_csv(out_dir / "summary.csv", index=False, float_format="%.6f", lineterminator="\n")
    return out_dir


def export_summary_excel(metrics, summary, path=None):
    """
    Excel-arbetsbok med flikarna Sammanfattning och Per del

    Args:
        metrics: Alla (run, fold)-rader
        summary: Resultat från summarize_metrics
        path: Målfil; None ger arbetsboken som bytes (för nedladdning)

    How to modify:
    - Lägg till fler flikar med ytterligare to_excel-anrop
    """
    target = io.BytesIO() if path is None else Path(path)
    if path is not None:
        target.parent.mkdir(parents=True, exist_ok=True)
    with pd.ExcelWriter(target, engine="openpyxl") as writer:
        summary.to_excel(writer, sheet_name="Sammanfattning", index=False)
        metrics.to_excel(writer, sheet_name="Per del", index=False)
        for sheet in writer.sheets.values():
            for column in sheet.columns:
                width = max(len(str(cell.value)) if cell.value is not None else 0 for cell in column)
                sheet.column_dimensions[column[0].column_letter].width = width + 2
    if path is None:
        return target.getvalue()
    logger.info("Sammanfattning exporterad till %s", path)
    return path


def _read_log(path, stage, run_dir):
    df = pd.read_csv(path)
    rel = path.relative_to(run_dir)
    df["run"] = _index_from_path(rel, RUN_PATTERN)
    df["fold"] = _index_from_path(rel, FOLD_PATTERN)
    df["stage"] = stage
    return df


def load_run(run_dir):
    """
    Läs en körkatalog för rapport och dashboard

    Returns:
        dict med metrics, summary (None utan metrik), pretrain_loss, tune_loss,
        masks (masks.jsonl som DataFrame eller None), overlays (sökvägar) och config

    How to modify:
    - Lägg till fler artefakter här när nya steg skriver filer
    """
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise DataError(f"Körkatalogen saknas: {run_dir}")
    metrics = collect_metrics(run_dir)
    pretrain = [_read_log(p, "pretrain", run_dir) for p in sorted(run_dir.rglob("pretrain/loss.csv"))]
    tune = [_read_log(p, "tune", run_dir) for p in sorted(run_dir.rglob("tune/loss.csv"))]

    masks = None
    mask_files = sorted(run_dir.rglob("masks.jsonl"))
    if mask_files:
        masks = pd.read_json(mask_files[0], orient="records", lines=True, dtype=False)

    config = None
    config_files = sorted(run_dir.rglob("config.yaml"))
    if config_files:
        config = yaml.safe_load(config_files[0].read_text(encoding="utf-8"))

    return {
        "metrics": metrics,
        "summary": summarize_metrics(metrics) if len(metrics) else None,
        "pretrain_loss": pd.concat(pretrain, ignore_index=True) if pretrain else pd.DataFrame(),
        "tune_loss": pd.concat(tune, ignore_index=True) if tune else pd.DataFrame(),
        "masks": masks,
        "overlays": sorted(run_dir.rglob("overlay/*.png")),
        "config": config,
    }


def loss_curve_figure(log, x="iteration", columns=("seg", "con", "rot"), title="Förlustkurvor"):
    """
    Linjediagram över förlustkolumner, en kurva per (kolumn, del)

    How to modify:
    - Byt CURVE_COLORS för andra färger
    - Sätt yaxis_type='log' i update_layout för logaritmisk skala
    """
    if log is None or len(log) == 0:
        return None
    fig = go.Figure()
    groups = log.groupby(["run", "fold"], sort=True) if {"run", "fold"} <= set(log.columns) else [((0, 0), log)]
    for i, ((run, fold), part) in enumerate(groups):
        for j, column in enumerate(c for c in columns if c in part.columns):
            fig.add_trace(go.Scatter(
                x=part[x], y=part[column], mode="lines",
                name=f"{column} (del {fold}, körning {run})",
                line=dict(color=CURVE_COLORS[j % len(CURVE_COLORS)], width=1 if i else 2),
                opacity=1.0 if i == 0 else 0.5,
            ))
    return _dark_layout(fig, title, "Epok" if x == "epoch" else "Iteration", "Förlust")


def fold_metrics_figure(metrics):
    """
    Grupperat stapeldiagram med mått per del (medel över körningar)

    How to modify:
    - Ändra barmode till 'stack' eller byt till go.Box för spridning per del
    """
    if metrics is None or len(metrics) == 0:
        return None
    per_fold = metrics.groupby("fold", sort=True)[SUMMARY_METRICS].mean()
    fig = go.Figure(data=[
        go.Bar(
            x=[f"Del {f}" for f in per_fold.index],
            y=per_fold[name],
            name=name,
            text=per_fold[name].round(3),
            textposition='auto',
            marker_color=CURVE_COLORS[i % len(CURVE_COLORS)]
        )
        for i, name in enumerate(SUMMARY_METRICS)
    ])
    fig.update_layout(barmode="group", yaxis_range=[0, 1])
    return _dark_layout(fig, "Mått per del", "Del", "Värde")


def mask_iou_figure(masks):
    """Histogram över IoU mellan M0 och det sanna huvudet (bara syntetiska data har facit)"""
    if masks is None or "iou_head" not in masks.columns:
        return None
    fig = go.Figure(data=[go.Histogram(x=masks["iou_head"], nbinsx=20, marker_color=CURVE_COLORS[0])])
    return _dark_layout(fig, "IoU(M0, sant huvud)", "IoU", "Antal")


def _tint(rgb, mask, color, alpha):
    out = rgb.copy()
    out[mask] = (1 - alpha) * out[mask] + alpha * np.asarray(color)
    return out


def render_overlay(image, hierarchy, teacher_mask=None):
    """
    Sida-vid-sida-bild: justerat utsnitt, pseudomasklager och lärarmaskens kontur

    Lagren färgas från kärnan (orange) utåt med avtagande täckning; gränsen B ritas grå.

    Returns:
        (H, 3W, 3) float-bild i [0, 1], eller (H, 2W, 3) utan lärarmask
    """
    image = np.asarray(image, dtype=np.float64)
    rgb = np.repeat(image, 3, axis=-1) if image.shape[-1] == 1 else image[..., :3].copy()
    panels = [rgb]

    layered = rgb.copy()
    layered = _tint(layered, find_boundaries(hierarchy.bound, mode="inner"), (0.5, 0.5, 0.5), 0.8)
    for i, layer in reversed(list(enumerate(hierarchy.layers))):
        layered = _tint(layered, layer, (1.0, 0.42, 0.21), 0.6 / (i + 1))
    panels.append(layered)

    if teacher_mask is not None:
        contour = find_boundaries(np.asarray(teacher_mask, dtype=bool), mode="inner")
        panels.append(_tint(rgb, contour, (0.2, 0.9, 1.0), 1.0))
    return np.clip(np.concatenate(panels, axis=1), 0.0, 1.0)
