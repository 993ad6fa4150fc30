"""
Soft-tuning of a morphology classifier on top of the pretrained encoder.
Curriculum background masking, soft cross-entropy over expert votes, mild augmentation,
test-time augmentation and fold metrics.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.special import softmax
from sklearn.metrics import accuracy_score, f1_score, precision_score, recall_score
from tqdm import tqdm

from config import TuneConfig
from distill import to_batch
from imgcore import AUGMENTATION_PRESETS, apply_augmentation, dilate, network_view, read_png, rot90
from losses import onehot, soft_ce_logits, soft_target
from tinynn import OptimizerState, adam_step, add_class_head, backward, forward, save_checkpoint, scheduler_step
from utils import DataError, NumericalError, child_seed

logger = logging.getLogger(__name__)

# Vyer som (antal kvartsvarv moturs, vertikal vändning)
TTA_VIEW_SETS = {
    "identity": ((0, False),),
    "flip": ((0, False), (0, True)),
    "rot4": ((0, False), (1, False), (2, False), (3, False)),
    "d4": tuple((k, flip) for flip in (False, True) for k in range(4)),
}


@dataclass(frozen=True)
class CurriculumSchedule:
    start_dilations: int = 15
    end_dilations: int = 0
    total_epochs: int = 30

    def __post_init__(self):
        if not self.start_dilations >= self.end_dilations >= 0:
            raise ValueError("start_dilations >= end_dilations >= 0 krävs")
        if self.total_epochs < 1:
            raise ValueError("total_epochs måste vara >= 1")


@dataclass(frozen=True)
class TTAPolicy:
    views: tuple = ((0, False),)

    def __post_init__(self):
        if (0, False) not in self.views:
            raise ValueError("TTA-policyn måste innehålla identitetsvyn")

    @classmethod
    def named(cls, name):
        if name not in TTA_VIEW_SETS:
            raise ValueError(f"Okänd TTA-vyuppsättning: {name}")
        return cls(views=TTA_VIEW_SETS[name])


@dataclass
class Metrics:
    accuracy: float
    recall: float
    precision: float
    f1: float
    absent_classes: list = field(default_factory=list)

    def row(self, fold):
        return {"fold": fold, "accuracy": self.accuracy, "recall": self.recall,
                "precision": self.precision, "f1": self.f1}


@dataclass
class TuneSample:
    crop_id: str
    image: np.ndarray
    teacher_mask: np.ndarray
    soft_label: object


def dilations_at(schedule, epoch):
    """
    Antal förgrundsdilationer i en epok: linjärt från start till slut, avrundat

    total_epochs == 1 ger end_dilations.
    """
    if not 0 <= epoch < schedule.total_epochs:
        raise ValueError(f"epoch {epoch} ligger utanför [0, {schedule.total_epochs})")
    if schedule.total_epochs == 1:
        return schedule.end_dilations
    start, end = schedule.start_dilations, schedule.end_dilations
    value = start + (end - start) * epoch / (schedule.total_epochs - 1)
    return int(math.floor(value + 0.5))


def apply_curriculum_mask(img, teacher_mask, n_dilations):
    """
    Vita ut allt utanför den dilaterade lärarmasken

    Returns:
        (bild, flags); tom lärarmask ger omaskerad bild och flaggan empty_teacher_mask
    """
    teacher_mask = np.asarray(teacher_mask, dtype=bool)
    if teacher_mask.shape != img.shape[:2]:
        raise ValueError(f"Masken {teacher_mask.shape} matchar inte bilden {img.shape[:2]}")
    if not teacher_mask.any():
        logger.warning("Tom lärarmask, ingen maskning")
        return img.copy(), {"empty_teacher_mask"}
    foreground = dilate(teacher_mask, n_dilations)
    if foreground.all():
        return img.copy(), set()
    out = img.copy()
    out[~foreground] = 1.0
    return out, set()


def _view(img, view):
    k, flip = view
    if flip:
        img = img[::-1]
    return rot90(img, k)


def predict_proba(params, images):
    """Softmax över klasshuvudet för en lista med (H, W, C)-bilder."""
    out = forward(params, to_batch(images), decode=False, heads=("cls",))
    return softmax(out.cls_logits.astype(np.float64), axis=1)


def tta_predict(params, img, policy):
    """Medel av softmax över alla vyer i policyn."""
    views = [_view(img, v) for v in policy.views]
    return predict_proba(params, views).mean(axis=0)


def build_tune_samples(crops, masks_dir, store):
    """
    Para ihop justerade utsnitt, lärarmasker och mjuka etiketter

    Args:
        crops: LabeledCrop-lista
        masks_dir: masks-stegets katalog (aligned/<id>.png)
        store: TeacherMaskStore
    """
    masks_dir = Path(masks_dir)
    samples = []
    for crop in crops:
        image = read_png(masks_dir / "aligned" / f"{crop.crop_id}.png")
        samples.append(TuneSample(crop_id=crop.crop_id, image=image, teacher_mask=store.get(crop.crop_id),
                                  soft_label=crop.soft_label))
    return samples


def _network_input(sample, n_dilations, size, fraction):
    img = sample.image
    if n_dilations is not None:
        img, _ = apply_curriculum_mask(img, sample.teacher_mask, n_dilations)
    return network_view(img, size, fraction)


def _train_view(sample, n_dilations, policy, seed, size, fraction):
    img, _ = apply_augmentation(_network_input(sample, n_dilations, size, fraction), policy, seed)
    return img


def soft_tune(encoder_params, samples, n_classes, cfg=None, input_size=64, center_crop=1.0,
              val_samples=None, threads=1, out_dir=None, progress=False):
    """
    Finjustera kodaren med ett nytt klasshuvud

    Per epok: antal dilationer enligt läroplanen, maskning, mild augmentation T_c,
    mjuk korsentropi, Adam och stegvis avtagande inlärningstakt.

    Returns:
        (klassificerarparametrar, DataFrame med epoch, loss, dilations, lr, val_accuracy)

    How to modify:
    - Stäng av curriculum/soft_labels i TuneConfig för ablationer
    """
    cfg = cfg or TuneConfig()
    if not samples:
        raise DataError("Inga utsnitt för finjustering")
    params = add_class_head(encoder_params, n_classes, seed=child_seed(cfg.seed, 20))
    schedule = CurriculumSchedule(cfg.start_dilations, cfg.end_dilations, cfg.epochs)
    policy = AUGMENTATION_PRESETS[cfg.augmentation]
    opt = OptimizerState(lr=cfg.lr, milestones=list(cfg.milestones), factor=cfg.lr_factor)
    rng = np.random.default_rng(child_seed(cfg.seed, 21))
    if cfg.soft_labels:
        targets = np.stack([soft_target(s.soft_label, n_classes) for s in samples])
    else:
        targets = onehot([s.soft_label.c1 for s in samples], n_classes)

    rows = []
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        for epoch in tqdm(range(cfg.epochs), desc="finjustering", disable=not progress):
            scheduler_step(opt, epoch)
            n_dil = dilations_at(schedule, epoch) if cfg.curriculum else None
            order = rng.permutation(len(samples))
            epoch_loss = 0.0
            for start in range(0, len(samples), cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                batch_seed = int(rng.integers(0, 2**31 - 1))
                views = list(pool.map(
                    lambda j: _train_view(samples[idx[j]], n_dil, policy, child_seed(batch_seed, j),
                                          input_size, center_crop),
                    range(len(idx))))
                out = forward(params, to_batch(views), decode=False, heads=("cls",))
                loss, dlogits = soft_ce_logits(out.cls_logits, targets[idx])
                try:
                    if not np.isfinite(loss):
                        raise NumericalError(f"Icke-ändlig klassificeringsförlust i epok {epoch}")
                    grads = backward(params, out, dcls=dlogits)
                except NumericalError:
                    if out_dir is not None:
                        save_checkpoint(Path(out_dir) / "last_good.npz", params, meta={"epoch": epoch})
                    raise
                adam_step(params, grads, opt)
                epoch_loss += loss * len(idx)
            row = {"epoch": epoch, "loss": epoch_loss / len(samples), "dilations": -1 if n_dil is None else n_dil,
                   "lr": opt.lr, "val_accuracy": np.nan}
            if val_samples:
                pred = predict_dataset(params, val_samples, cfg, input_size, center_crop, use_tta=False)
                row["val_accuracy"] = float(np.mean(pred["pred"] == pred["label"]))
            rows.append(row)
            logger.debug("Epok %d: förlust %.4f, %s dilationer", epoch, row["loss"], row["dilations"])
    return params, pd.DataFrame(rows)


def predict_dataset(params, samples, cfg=None, input_size=64, center_crop=1.0, use_tta=None):
    """
    Prediktioner för en testdel

    Med läroplan maskas testindata med slutläget (end_dilations). Med TTA medelvärdesbildas
    softmax över cfg.tta_views.

    Returns:
        DataFrame med crop_id, label, pred och prob_0..prob_{K-1}
    """
    cfg = cfg or TuneConfig()
    use_tta = cfg.tta if use_tta is None else use_tta
    policy = TTAPolicy.named(cfg.tta_views) if use_tta else TTAPolicy()
    n_dil = cfg.end_dilations if cfg.curriculum else None
    rows = []
    for sample in samples:
        probs = tta_predict(params, _network_input(sample, n_dil, input_size, center_crop), policy)
        row = {"crop_id": sample.crop_id, "label": int(sample.soft_label.c1), "pred": int(np.argmax(probs))}
        row.update({f"prob_{k}": float(p) for k, p in enumerate(probs)})
        rows.append(row)
    return pd.DataFrame(rows)


def compute_metrics(y_true, y_pred, n_classes=None):
    """
    Noggrannhet samt makromedel av recall, precision och F1 över klasser som finns i y_true

    F1 är medlet av klassvisa F1. Klasser som bara förekommer i y_pred ingår inte.
    """
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.size == 0:
        raise DataError("Testdelen är tom")
    present = np.unique(y_true)
    known = set(np.unique(y_pred).tolist()) | set(range(n_classes or 0))
    absent = sorted(known - set(present.tolist()))
    if absent:
        logger.warning("Klasser saknas i testdelen och utesluts ur makromedel: %s", absent)
    return Metrics(
        accuracy=float(accuracy_score(y_true, y_pred)),
        recall=float(recall_score(y_true, y_pred, labels=present, average="macro", zero_division=0)),
        precision=float(precision_score(y_true, y_pred, labels=present, average="macro", zero_division=0)),
        f1=float(np.mean(f1_score(y_true, y_pred, labels=present, average=None, zero_division=0))),
        absent_classes=absent,
    )


def evaluate(params, samples, cfg=None, input_size=64, center_crop=1.0, n_classes=None):
    """Metrik och prediktioner för en testdel; returnerar (Metrics, DataFrame)."""
    predictions = predict_dataset(params, samples, cfg, input_size, center_crop)
    return compute_metrics(predictions["label"], predictions["pred"], n_classes), predictions


def write_predictions(predictions, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    predictions.to_csv(path, index=False, float_format="%.6f", lineterminator="\n")
    return path
