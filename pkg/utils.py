"""
Utility functions for the sperm-head morphology pipeline.
These functions handle errors, logging, seeding and tabular file I/O shared by every stage.
"""

import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
METRIC_COLUMNS = ["fold", "accuracy", "recall", "precision", "f1"]


class SpermAidError(Exception):
    """Basklass för alla fel som pipelinen själv kastar."""

    exit_code = 1


class ConfigError(SpermAidError):
    """Ogiltig konfiguration eller felaktig kommandorad."""

    exit_code = 1


class DataError(SpermAidError):
    """Saknade eller felaktiga indata (bilder, röstfiler, masker)."""

    exit_code = 2


class EmptyMaskError(DataError):
    """En mask som måste ha förgrund var tom."""


class DegenerateMaskError(DataError):
    """Masken räcker inte för momentberäkning (för få pixlar eller noll varians)."""


class NumericalError(SpermAidError):
    """NaN eller Inf i förlust eller gradient."""

    exit_code = 3


class AugmentationError(ValueError):
    """En augmentationspost saknar tillstånd och kan inte inverteras."""


def setup_logging(level="INFO", log_file=None):
    """
    Konfigurera rotloggern: stderr alltid, fil om log_file anges

    Args:
        level: Loggnivå som text eller int
        log_file: Valfri sökväg till en loggfil i stegets katalog

    How to modify:
    - Ändra LOG_FORMAT för annat radformat
    - Lägg till fler handlers (t.ex. syslog) här
    """
    root = logging.getLogger()
    root.setLevel(level)
    for handler in list(root.handlers):
        if getattr(handler, "_spermaid", False):
            root.removeHandler(handler)
            handler.close()

    stream = logging.StreamHandler(sys.stderr)
    stream.setFormatter(logging.Formatter(LOG_FORMAT))
    stream._spermaid = True
    root.addHandler(stream)

    if log_file is not None:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(log_file, encoding="utf-8")
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
        file_handler._spermaid = True
        root.addHandler(file_handler)


def child_seed(seed, *keys):
    """
    Härled ett deterministiskt delfrö ur ett huvudfrö och nycklar

    Samma (seed, keys) ger alltid samma frö, oberoende av trådar eller ordning.
    """
    words = [int(seed)] + [int(k) for k in keys]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


def export_metrics_csv(metrics_rows, path):
    """
    Skriv metrik-rader (fold, accuracy, recall, precision, f1) till CSV

    Args:
        metrics_rows: Lista med dicts eller en DataFrame
        path: Målfil

    How to modify:
    - Ändra float_format för fler/färre decimaler
    - Lägg till kolumner i METRIC_COLUMNS (och i evaluate) för fler mått
    """
    df = pd.DataFrame(metrics_rows)
    missing = [col for col in METRIC_COLUMNS if col not in df.columns]
    if missing:
        raise DataError(f"Metrik saknar kolumner: {missing}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    # Fast decimalformat så att två identiska körningar ger identiska bytes
    df[METRIC_COLUMNS].to_csv(path, index=False, float_format="%.6f", lineterminator="\n")
    return path


def validate_vote_file(path, max_votes=3):
    """
    Läs och validera en röstfil (votes.csv eller votes.xlsx)

    Varje rad: crop_id följt av 1-3 klassindex. CSV-filen saknar rubrikrad.

    Returns:
        DataFrame med kolumnerna crop_id och votes (lista med int)

    How to modify:
    - Lägg till fler filformat genom att utöka if-satsen
    - Ändra max_votes om fler experter röstar
    """
    path = Path(path)
    names = ["crop_id"] + [f"vote{i + 1}" for i in range(max_votes)]
    try:
        if path.suffix == ".csv":
            raw = pd.read_csv(path, header=None, names=names, dtype=str,
                              keep_default_na=False, skip_blank_lines=True)
        elif path.suffix in (".xlsx", ".xls"):
            raw = pd.read_excel(path, header=None, names=names, dtype=str).fillna("")
        else:
            raise DataError(f"Okänt format för röstfil: {path.name}")
    except pd.errors.ParserError as exc:
        raise DataError(f"Felaktig röstfil {path}: {exc}") from exc

    rows = []
    for line_no, record in enumerate(raw.itertuples(index=False), start=1):
        crop_id = str(record[0]).strip()
        cells = [str(v).strip() for v in record[1:] if not pd.isna(v) and str(v).strip() != ""]
        if not crop_id or not cells:
            raise DataError(f"Felaktig rad {line_no} i {path.name}: '{crop_id}' saknar röster")
        try:
            votes = [int(float(v)) for v in cells]
        except ValueError as exc:
            raise DataError(f"Felaktig röst på rad {line_no} ({crop_id}) i {path.name}: {cells}") from exc
        if any(v < 0 for v in votes):
            raise DataError(f"Negativ klass på rad {line_no} ({crop_id}) i {path.name}")
        rows.append({"crop_id": crop_id, "votes": votes})

    df = pd.DataFrame(rows, columns=["crop_id", "votes"])
    duplicated = df["crop_id"][df["crop_id"].duplicated()].tolist()
    if duplicated:
        raise DataError(f"Dubbla crop_id i {path.name}: {duplicated[:5]}")
    return df


def write_jsonl(records, path):
    """Skriv poster som radavgränsad JSON (en post per rad)."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    df = pd.DataFrame(records)
    df.to_json(path, orient="records", lines=True, force_ascii=False)
    return path


def read_jsonl(path):
    """Läs radavgränsad JSON till en lista med dicts."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"Filen saknas: {path}")
    if path.stat().st_size == 0:
        return []
    return pd.read_json(path, orient="records", lines=True, dtype=False).to_dict("records")
