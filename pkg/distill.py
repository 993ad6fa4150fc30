"""
Anatomical information distillation (pretraining).
A student/teacher pair is trained on pseudo-mask hierarchies (segmentation + consistency),
then on right-angle rotation prediction of aligned crops; the EMA teacher's masks are exported
for the soft-tuning stage.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from tqdm import tqdm

from config import DistillConfig
from hpm import MaskHierarchy, load_masks
from imgcore import (
    AUGMENTATION_PRESETS,
    apply_augmentation,
    largest_component,
    native_view,
    network_view,
    read_mask,
    rot90,
    warp_geometric,
    write_png,
)
from losses import consistency, fine_total, onehot, seg_partial_ce, soft_ce_logits
from tinynn import (
    OptimizerState,
    adam_step,
    backward,
    copy_params,
    ema_update,
    forward,
    init_params,
    save_checkpoint,
    scheduler_step,
)
from utils import DataError, EmptyMaskError, NumericalError, child_seed, read_jsonl, write_jsonl

logger = logging.getLogger(__name__)

LOG_COLUMNS = ["iteration", "seg", "con", "rot", "lr"]


@dataclass
class StudentTeacherPair:
    student: dict
    teacher: dict
    ema_decay: float = 0.99

    @classmethod
    def from_params(cls, params, ema_decay=0.99):
        """Läraren startar som en kopia av eleven."""
        return cls(student=copy_params(params), teacher=copy_params(params), ema_decay=ema_decay)


@dataclass
class PretrainSample:
    crop_id: str
    image: np.ndarray
    hierarchy: MaskHierarchy
    native_shape: tuple
    native_core: np.ndarray
    rotation_applied: float = None


@dataclass
class TeacherMaskStore:
    masks: dict = field(default_factory=dict)
    threshold: float = 0.5
    flags: dict = field(default_factory=dict)

    def get(self, crop_id):
        if crop_id not in self.masks:
            raise DataError(f"Lärarmask saknas för {crop_id}")
        return self.masks[crop_id]


def to_batch(images):
    """Lista med (H, W, C)-bilder till nätets (N, C, H, W) float32."""
    return np.ascontiguousarray(np.stack(images).transpose(0, 3, 1, 2), dtype=np.float32)


def build_pretrain_samples(masks_dir, crop_ids=None, input_size=64, center_crop=1.0):
    """
    Läs ett masks-steg och skala justerade utsnitt och hierarkier till nätets storlek

    Args:
        masks_dir: Katalog som skrivits av hpm.generate_masks
        crop_ids: Delmängd att ta med (None = alla)
        input_size: Nätets sida
        center_crop: Andel av ramen som behålls före omskalning

    Returns:
        Lista med PretrainSample i masks.jsonl-ordning
    """
    loaded = load_masks(masks_dir)
    wanted = list(loaded) if crop_ids is None else list(crop_ids)
    samples = []
    for crop_id in wanted:
        if crop_id not in loaded:
            raise DataError(f"Pseudomask saknas för {crop_id} i {masks_dir}")
        image, hierarchy, record = loaded[crop_id]
        layers = [network_view(layer, input_size, center_crop) for layer in hierarchy.layers]
        bound = network_view(hierarchy.bound, input_size, center_crop)
        rotation = record.get("rotation_applied")
        samples.append(PretrainSample(
            crop_id=crop_id,
            image=network_view(image, input_size, center_crop),
            hierarchy=MaskHierarchy(layers=layers, bound=bound | layers[-1]),
            native_shape=image.shape[:2],
            native_core=hierarchy.core,
            rotation_applied=None if rotation is None or pd.isna(rotation) else float(rotation),
        ))
    return samples


def _fine_views(sample, policy, seed):
    # T1 för eleven (hierarkin följer T1), T2 för läraren
    img1, r1 = apply_augmentation(sample.image, policy, child_seed(seed, 0))
    img2, r2 = apply_augmentation(sample.image, policy, child_seed(seed, 1))
    layers = [warp_geometric(layer, r1, interp="nearest")[0] for layer in sample.hierarchy.layers]
    bound = warp_geometric(sample.hierarchy.bound, r1, interp="nearest")[0]
    return img1, img2, MaskHierarchy(layers=layers, bound=bound), r1, r2


def _rotation_view(sample, policy, seed, k):
    img, _ = apply_augmentation(sample.image, policy, seed)
    return rot90(img, k)


def _save_last_good(out_dir, pair, iteration, phase):
    if out_dir is None:
        return
    path = Path(out_dir) / "last_good.npz"
    save_checkpoint(path, pair.teacher, meta={"iteration": iteration, "phase": phase, "role": "teacher"})
    logger.error("Icke-ändlig förlust i iteration %d (%s), senaste goda lärare sparad i %s", iteration, phase, path)


def fine_distill(pair, samples, cfg=None, threads=1, out_dir=None, progress=False, callback=None):
    """
    Fin destillation: segmentering mot pseudomasker plus konsistens mellan elev och lärare

    Per iteration: slumpad batch, två augmentationer per utsnitt, alpha*seg + beta*con,
    bakåtpass endast genom eleven, Adam-steg och därefter EMA-uppdatering av läraren.

    Args:
        pair: StudentTeacherPair (uppdateras)
        samples: Lista med PretrainSample
        cfg: DistillConfig
        threads: Trådar för batchförberedelse
        out_dir: Katalog för last_good.npz vid NaN
        progress: Visa tqdm-stapel
        callback: Valfri funktion (iteration, pair) efter varje EMA-steg

    Returns:
        (pair, DataFrame med kolumnerna iteration, seg, con, rot, lr)

    How to modify:
    - Sätt beta=0 i konfigurationen för att stänga av konsistenstermen
    """
    cfg = cfg or DistillConfig()
    if not samples:
        raise DataError("Inga utsnitt för fin destillation")
    weights = cfg.weights
    policy = AUGMENTATION_PRESETS[cfg.augmentation]
    rng = np.random.default_rng(child_seed(cfg.seed, 11))
    opt = OptimizerState(lr=cfg.lr, milestones=list(cfg.milestones), factor=cfg.lr_factor)
    batch_size = min(cfg.batch_size, len(samples))
    per_epoch = max(1, math.ceil(len(samples) / batch_size))
    rows = []

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        for it in tqdm(range(cfg.fine_iterations), desc="fin destillation", disable=not progress):
            scheduler_step(opt, it // per_epoch)
            idx = rng.choice(len(samples), size=batch_size, replace=False)
            batch_seed = int(rng.integers(0, 2**31 - 1))
            views = list(pool.map(lambda j: _fine_views(samples[idx[j]], policy, child_seed(batch_seed, j)),
                                  range(batch_size)))
            x1 = to_batch([v[0] for v in views])
            x2 = to_batch([v[1] for v in views])
            student_out = forward(pair.student, x1, decode=True)
            teacher_out = forward(pair.teacher, x2, decode=True)

            seg_total, con_total = 0.0, 0.0
            dprob = np.zeros(student_out.prob.shape, dtype=np.float64)
            for j, (_, _, hierarchy, r1, r2) in enumerate(views):
                seg, g_seg = seg_partial_ce(student_out.prob[j], hierarchy)
                con, g_con = consistency(student_out.prob[j], teacher_out.prob[j], r1, r2)
                seg_total += seg / batch_size
                con_total += con / batch_size
                dprob[j] = (weights.alpha * g_seg + weights.beta * g_con) / batch_size
            total = fine_total(seg_total, con_total, weights)
            if not np.isfinite(total):
                _save_last_good(out_dir, pair, it, "fine")
                raise NumericalError(f"Icke-ändlig fin destillationsförlust i iteration {it}")

            try:
                grads = backward(pair.student, student_out, dprob=dprob)
            except NumericalError:
                _save_last_good(out_dir, pair, it, "fine")
                raise
            adam_step(pair.student, grads, opt)
            pair.teacher = ema_update(pair.teacher, pair.student, pair.ema_decay)
            rows.append({"iteration": it, "seg": seg_total, "con": con_total, "rot": np.nan, "lr": opt.lr})
            if callback is not None:
                callback(it, pair)
    return pair, pd.DataFrame(rows, columns=LOG_COLUMNS)


def rotation_labels(n, rng):
    """Balanserade rotationsetiketter för en epok: varje klass n/4 gånger (±1), slumpad ordning."""
    labels = np.tile(np.arange(4), math.ceil(n / 4))[:n]
    return rng.permutation(labels)


def coarse_distill(pair, samples, cfg=None, threads=1, out_dir=None, progress=False, start_iteration=0):
    """
    Grov destillation: rotationsprediktion (0, 90, 180, 270 grader) på justerade utsnitt

    Endast kodare och rotationshuvud tränas; avkodaren används inte. EMA fortsätter.

    Returns:
        (pair, DataFrame med loggkolumnerna)
    """
    cfg = cfg or DistillConfig()
    if not samples:
        raise DataError("Inga utsnitt för grov destillation")
    unaligned = [s.crop_id for s in samples if s.rotation_applied is None]
    if unaligned:
        raise DataError(f"Utsnitt saknar justeringsinformation: {unaligned[:5]}")
    policy = AUGMENTATION_PRESETS[cfg.augmentation]
    rng = np.random.default_rng(child_seed(cfg.seed, 12))
    opt = OptimizerState(lr=cfg.lr, milestones=list(cfg.milestones), factor=cfg.lr_factor)
    batch_size = min(cfg.batch_size, len(samples))
    per_epoch = max(1, math.ceil(len(samples) / batch_size))
    rows = []
    order, labels, cursor, epoch = None, None, len(samples), -1

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        for it in tqdm(range(cfg.coarse_iterations), desc="grov destillation", disable=not progress):
            if cursor + batch_size > len(samples):
                epoch += 1
                order = rng.permutation(len(samples))
                labels = rotation_labels(len(samples), rng)
                cursor = 0
            scheduler_step(opt, epoch)
            idx = order[cursor:cursor + batch_size]
            targets = labels[cursor:cursor + batch_size]
            cursor += batch_size
            batch_seed = int(rng.integers(0, 2**31 - 1))
            views = list(pool.map(
                lambda j: _rotation_view(samples[idx[j]], policy, child_seed(batch_seed, j), int(targets[j])),
                range(len(idx))))
            out = forward(pair.student, to_batch(views), decode=False, heads=("rot",))
            loss, dlogits = soft_ce_logits(out.rot_logits, onehot(targets, 4))
            if not np.isfinite(loss):
                _save_last_good(out_dir, pair, start_iteration + it, "coarse")
                raise NumericalError(f"Icke-ändlig rotationsförlust i iteration {start_iteration + it}")
            try:
                grads = backward(pair.student, out, drot=dlogits)
            except NumericalError:
                _save_last_good(out_dir, pair, start_iteration + it, "coarse")
                raise
            adam_step(pair.student, grads, opt)
            pair.teacher = ema_update(pair.teacher, pair.student, pair.ema_decay)
            rows.append({"iteration": start_iteration + it, "seg": np.nan, "con": np.nan, "rot": loss,
                         "lr": opt.lr})
    return pair, pd.DataFrame(rows, columns=LOG_COLUMNS)


def rotation_accuracy(params, samples, batch_size=32):
    """Andel rätt rotationsklass över alla fyra rätvinkliga rotationer av varje utsnitt."""
    correct, total = 0, 0
    views, targets = [], []
    for sample in samples:
        for k in range(4):
            views.append(rot90(sample.image, k))
            targets.append(k)
    for start in range(0, len(views), batch_size):
        out = forward(params, to_batch(views[start:start + batch_size]), decode=False, heads=("rot",))
        pred = out.rot_logits.argmax(axis=1)
        correct += int(np.sum(pred == np.asarray(targets[start:start + batch_size])))
        total += pred.size
    return correct / max(total, 1)


def binarize_prob(prob, threshold=0.5):
    """Tröskla en sannolikhetskarta och behåll största komponenten; tom karta kastar EmptyMaskError."""
    return largest_component(np.asarray(prob) > threshold)


def export_teacher_masks(pair, samples, threshold=0.5, center_crop=1.0, batch_size=32):
    """
    Lärarens förgrundsmasker för ej augmenterade justerade utsnitt

    Sannolikhetskartan skalas tillbaka till utsnittets egen storlek, trösklas och reduceras
    till största komponenten. En tom mask ersätts med utsnittets M0 och flaggas.

    Returns:
        TeacherMaskStore
    """
    params = pair.teacher if isinstance(pair, StudentTeacherPair) else pair
    store = TeacherMaskStore(threshold=threshold)
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        out = forward(params, to_batch([s.image for s in chunk]), decode=True)
        for sample, prob in zip(chunk, out.prob):
            native = native_view(prob.astype(np.float64), sample.native_shape, center_crop)
            try:
                store.masks[sample.crop_id] = binarize_prob(native, threshold)
                store.flags[sample.crop_id] = []
            except EmptyMaskError:
                logger.warning("Tom lärarmask för %s, M0 används", sample.crop_id)
                store.masks[sample.crop_id] = sample.native_core.copy()
                store.flags[sample.crop_id] = ["fallback_core"]
    return store


def save_store(store, out_dir):
    """Skriv teacher_masks/<id>.png och teacher_masks.jsonl."""
    out_dir = Path(out_dir)
    records = []
    for crop_id, mask in store.masks.items():
        write_png(out_dir / "teacher_masks" / f"{crop_id}.png", mask)
        records.append({"crop_id": crop_id, "threshold": store.threshold, "flags": store.flags.get(crop_id, [])})
    write_jsonl(records, out_dir / "teacher_masks.jsonl")
    return out_dir


def load_store(out_dir):
    out_dir = Path(out_dir)
    store = TeacherMaskStore()
    for record in read_jsonl(out_dir / "teacher_masks.jsonl"):
        crop_id = str(record["crop_id"])
        store.threshold = float(record["threshold"])
        store.masks[crop_id] = read_mask(out_dir / "teacher_masks" / f"{crop_id}.png")
        store.flags[crop_id] = list(record.get("flags") or [])
    return store


def store_from_cores(masks_dir):
    """Reservlager utan förträning: M0 från pseudomaskerna används som förgrund."""
    store = TeacherMaskStore()
    for crop_id, (_, hierarchy, _) in load_masks(masks_dir).items():
        store.masks[crop_id] = hierarchy.core.copy()
        store.flags[crop_id] = ["hpm_core"]
    return store


def run_pretrain(cfg, masks_dir, out_dir, train_ids, all_ids=None, threads=1, progress=False):
    """
    Hela förträningen för en del (fold): fin och grov destillation, kontrollpunkter och lärarmasker

    Endast train_ids tränas på; lärarmasker exporteras för all_ids (inferens, ingen träning).

    Args:
        cfg: RunConfig
        masks_dir: masks-stegets katalog
        out_dir: Stegets katalog
        train_ids: Utsnitt i träningsdelen
        all_ids: Utsnitt att exportera lärarmasker för (None = train_ids)

    Returns:
        (pair, loggtabell, TeacherMaskStore)
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    d, net = cfg.distill, cfg.network
    samples = build_pretrain_samples(masks_dir, train_ids, net.input_size, net.center_crop)
    in_channels = samples[0].image.shape[-1]
    params = init_params(net.channels, in_channels, net.decoder_channels, seed=child_seed(d.seed, 10))
    pair = StudentTeacherPair.from_params(params, d.ema_decay)

    logs = []
    if d.fine_enabled and d.fine_iterations > 0:
        pair, log = fine_distill(pair, samples, d, threads=threads, out_dir=out_dir, progress=progress)
        logs.append(log)
    if d.coarse_enabled and d.coarse_iterations > 0:
        start = d.fine_iterations if d.fine_enabled else 0
        pair, log = coarse_distill(pair, samples, d, threads=threads, out_dir=out_dir, progress=progress,
                                   start_iteration=start)
        logs.append(log)
    log = pd.concat(logs, ignore_index=True) if logs else pd.DataFrame(columns=LOG_COLUMNS)
    log.to_csv(out_dir / "loss.csv", index=False, float_format="%.8g", lineterminator="\n")

    meta = {"in_channels": int(in_channels), "channels": list(net.channels),
            "decoder_channels": net.decoder_channels, "input_size": net.input_size}
    save_checkpoint(out_dir / "student.npz", pair.student, meta={**meta, "role": "student"})
    save_checkpoint(out_dir / "teacher.npz", pair.teacher, meta={**meta, "role": "teacher"})

    export_ids = list(all_ids) if all_ids is not None else list(train_ids)
    export_samples = build_pretrain_samples(masks_dir, export_ids, net.input_size, net.center_crop)
    store = export_teacher_masks(pair, export_samples, d.mask_threshold, net.center_crop)
    save_store(store, out_dir)
    if d.coarse_enabled and d.coarse_iterations > 0:
        logger.info("Rotationsnoggrannhet (träning): %.3f", rotation_accuracy(pair.student, samples))
    return pair, log, store
