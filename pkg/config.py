"""
Run configuration for the sperm-head morphology pipeline.
Dataclass defaults are the desk-scale values; YAML files and --set overrides are merged on top.
"""

import copy
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from utils import ConfigError

# Fullskalevärden för metoden; visas i --help
FULL_SCALE_DEFAULTS = {
    "hpm.h": "2 för gråa 35x35-utsnitt, 1 för renare RGB-utsnitt",
    "distill.alpha": "1",
    "distill.beta": "1",
    "distill.milestones": "[12, 19] (förträning)",
    "distill.batch_size": "128 (fullskala), 16 (skrivbordsskala)",
    "distill.lr": "1e-4 (fullskala), 1e-3 (skrivbordsskala)",
    "tune.lam": "0.85",
    "tune.start_dilations": "15",
    "tune.end_dilations": "0",
    "tune.epochs": "30",
    "tune.milestones": "[14, 23]",
    "tune.lr": "1.5e-4 (fullskala), 1e-3 (skrivbordsskala)",
    "data.k_folds": "5",
}


@dataclass
class HpmConfig:
    h: int = 2
    tau_h: float = 0.15
    d_max_factor: float = 1.5
    kmeans_k: int = 3
    nlm_patch: int = 5
    nlm_search: int = 11
    nlm_strength: float = 0.08
    merge_dark_clusters: bool = True


@dataclass
class NetworkConfig:
    input_size: int = 64
    channels: list = field(default_factory=lambda: [16, 32, 64])
    decoder_channels: int = 16
    center_crop: float = 1.0

    @property
    def stages(self):
        return len(self.channels)


@dataclass
class DistillConfig:
    alpha: float = 1.0
    beta: float = 1.0
    ema_decay: float = 0.99
    lr: float = 1e-3
    milestones: list = field(default_factory=lambda: [12, 19])
    lr_factor: float = 0.1
    batch_size: int = 16
    fine_iterations: int = 300
    coarse_iterations: int = 200
    augmentation: str = "aid"
    mask_threshold: float = 0.5
    fine_enabled: bool = True
    coarse_enabled: bool = True
    seed: int = 0

    @property
    def weights(self):
        from losses import LossWeights

        return LossWeights(alpha=self.alpha, beta=self.beta)


@dataclass
class TuneConfig:
    lam: float = 0.85
    start_dilations: int = 15
    end_dilations: int = 0
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    milestones: list = field(default_factory=lambda: [14, 23])
    lr_factor: float = 0.1
    augmentation: str = "scian-mild"
    tta_views: str = "d4"
    tta: bool = True
    soft_labels: bool = True
    curriculum: bool = True
    seed: int = 0


@dataclass
class DataConfig:
    dataset_dir: str = ""
    k_folds: int = 5
    fold: int = 0
    fold_seed: int = 0


@dataclass
class RunConfig:
    hpm: HpmConfig = field(default_factory=HpmConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    tune: TuneConfig = field(default_factory=TuneConfig)
    data: DataConfig = field(default_factory=DataConfig)
    out_dir: str = "runs"
    seed: int = 0
    threads: int = 1

    def to_dict(self):
        return dataclasses.asdict(self)

    def validate(self):
        """
        Kontrollera alla deklarerade intervall innan något steg körs

        How to modify:
        - Lägg till nya kontroller här när nya fält införs
        """
        problems = []
        h = self.hpm
        if not 1 <= h.h <= 4:
            problems.append("hpm.h måste ligga i [1, 4] (PNG-kodningen rymmer fyra nivåer)")
        if h.tau_h < 0:
            problems.append("hpm.tau_h får inte vara negativ")
        if h.d_max_factor <= 0:
            problems.append("hpm.d_max_factor måste vara > 0")
        if h.kmeans_k < 2:
            problems.append("hpm.kmeans_k måste vara >= 2")
        if h.nlm_patch % 2 == 0 or h.nlm_search % 2 == 0:
            problems.append("hpm.nlm_patch och hpm.nlm_search måste vara udda")
        if h.nlm_strength <= 0:
            problems.append("hpm.nlm_strength måste vara > 0")

        n = self.network
        if not n.channels or any(int(c) < 1 for c in n.channels):
            problems.append("network.channels måste vara positiva heltal")
        elif n.input_size % (2 ** n.stages) != 0:
            problems.append(f"network.input_size måste vara delbar med {2 ** n.stages}")
        if n.decoder_channels < 1:
            problems.append("network.decoder_channels måste vara >= 1")
        if not 0 < n.center_crop <= 1:
            problems.append("network.center_crop måste ligga i (0, 1]")

        d = self.distill
        if d.alpha < 0 or d.beta < 0 or (d.alpha == 0 and d.beta == 0):
            problems.append("distill.alpha/beta måste vara >= 0 och inte båda noll")
        if not 0 <= d.ema_decay < 1:
            problems.append("distill.ema_decay måste ligga i [0, 1)")
        if d.lr <= 0:
            problems.append("distill.lr måste vara > 0")
        if d.batch_size < 1:
            problems.append("distill.batch_size måste vara >= 1")
        if d.fine_iterations < 0 or d.coarse_iterations < 0:
            problems.append("distill-iterationer får inte vara negativa")
        if not 0 < d.mask_threshold < 1:
            problems.append("distill.mask_threshold måste ligga i (0, 1)")

        t = self.tune
        if not 0 <= t.lam <= 1:
            problems.append("tune.lam måste ligga i [0, 1]")
        if not t.start_dilations >= t.end_dilations >= 0:
            problems.append("tune.start_dilations >= tune.end_dilations >= 0 krävs")
        if t.epochs < 1:
            problems.append("tune.epochs måste vara >= 1")
        if t.batch_size < 1:
            problems.append("tune.batch_size måste vara >= 1")
        if t.lr <= 0:
            problems.append("tune.lr måste vara > 0")

        for section in (d, t):
            if sorted(section.milestones) != list(section.milestones) or any(m < 0 for m in section.milestones):
                problems.append("milestones måste vara stigande och icke-negativa")
            if not 0 < section.lr_factor <= 1:
                problems.append("lr_factor måste ligga i (0, 1]")

        from imgcore import AUGMENTATION_PRESETS
        from tune import TTA_VIEW_SETS

        for name in (d.augmentation, t.augmentation):
            if name not in AUGMENTATION_PRESETS:
                problems.append(f"okänd augmentationsprofil: {name}")
        if t.tta_views not in TTA_VIEW_SETS:
            problems.append(f"okänd TTA-vyuppsättning: {t.tta_views}")

        if self.data.k_folds < 2:
            problems.append("data.k_folds måste vara >= 2")
        if not 0 <= self.data.fold < self.data.k_folds:
            problems.append("data.fold måste ligga i [0, k_folds)")
        if self.threads < 1:
            problems.append("threads måste vara >= 1")

        if problems:
            raise ConfigError("Ogiltig konfiguration: " + "; ".join(problems))
        return self


def _merge(target, values, prefix=""):
    for key, value in values.items():
        if not hasattr(target, key):
            raise ConfigError(f"Okänd konfigurationsnyckel: {prefix}{key}")
        current = getattr(target, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{prefix}{key} måste vara en sektion")
            _merge(current, value, prefix=f"{prefix}{key}.")
        else:
            setattr(target, key, _coerce(current, value, f"{prefix}{key}"))


def _coerce(current, value, name):
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name} måste vara true/false")
        return value
    if isinstance(current, int) and not isinstance(value, bool):
        if isinstance(value, float) and value.is_integer():
            return int(value)
        if not isinstance(value, int):
            raise ConfigError(f"{name} måste vara ett heltal")
        return value
    if isinstance(current, float):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"{name} måste vara ett tal")
        return float(value)
    if isinstance(current, list):
        if not isinstance(value, list):
            raise ConfigError(f"{name} måste vara en lista")
        return list(value)
    return value if value is None else str(value)


def parse_override(text):
    """
    Tolka en --set-sträng 'sektion.nyckel=värde' till ett nästlat dict

    Värdet tolkas som YAML, så '0.001', 'true' och '[14, 23]' får rätt typ.
    """
    if "=" not in text:
        raise ConfigError(f"--set kräver formen nyckel=värde, fick: {text}")
    key, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"Kan inte tolka värdet i --set {text}: {exc}") from exc
    nested = value
    for part in reversed(key.strip().split(".")):
        nested = {part: nested}
    return nested


def load_config(path=None, overrides=()):
    """
    Bygg en RunConfig ur standardvärden, valfri YAML-fil och --set-överskrivningar

    How to modify:
    - Lägg till nya sektioner som dataclasses ovan och i RunConfig
    - Byt YAML mot annat format genom att ersätta yaml.safe_load
    """
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Konfigurationsfilen saknas: {path}")
        try:
            values = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"Ogiltig YAML i {path}: {exc}") from exc
        if not isinstance(values, dict):
            raise ConfigError(f"{path} måste innehålla nyckel-värde-par")
        _merge(cfg, values)
    for text in overrides:
        _merge(cfg, parse_override(text))
    return cfg


def dump_config(cfg, path):
    """Skriv den fullständigt upplösta konfigurationen bredvid stegets artefakter."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True, allow_unicode=True), encoding="utf-8")
    return path


def clone(cfg):
    return copy.deepcopy(cfg)
