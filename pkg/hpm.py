"""
Hierarchical pseudo-masks for sperm-head crops.
Coarse foreground, nuclear extraction, right-facing alignment, acrosome fusion and the
concentric confidence hierarchy, plus the corpus-level `masks` stage that writes them to disk.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import ndimage

from config import HpmConfig
from imgcore import (
    as_crop,
    dilate,
    erode,
    fit_ellipse,
    iou,
    kmeans_intensity,
    largest_component,
    nlm_denoise,
    otsu_threshold,
    read_mask,
    read_png,
    rotate,
    to_gray,
    write_png,
)
from utils import DataError, DegenerateMaskError, EmptyMaskError, child_seed, read_jsonl, write_jsonl

logger = logging.getLogger(__name__)

MAX_LEVELS = 4
LEVEL_STEP = 64
TINY_NUCLEUS_PIXELS = 10


@dataclass
class MaskHierarchy:
    layers: list
    bound: np.ndarray
    flags: set = field(default_factory=set)

    @property
    def h(self):
        return len(self.layers)

    @property
    def core(self):
        return self.layers[0]

    @property
    def outer(self):
        return self.layers[-1]

    def is_nested(self):
        """Sant om M0 ⊆ M1 ⊆ ... ⊆ bound gäller för varje pixel."""
        chain = list(self.layers) + [self.bound]
        return all(not np.any(inner & ~outer) for inner, outer in zip(chain[:-1], chain[1:]))


@dataclass
class PseudoMaskResult:
    aligned_image: np.ndarray
    hierarchy: MaskHierarchy
    rotation_applied: float
    nuclear_mask: np.ndarray
    quality_flags: set = field(default_factory=set)
    head_direction: str = "right"
    theta: float = 0.0

    def record(self, crop_id):
        return {
            "crop_id": crop_id,
            "rotation_applied": round(float(self.rotation_applied), 6),
            "theta": round(float(self.theta), 6),
            "head_direction": self.head_direction,
            "h": self.hierarchy.h,
            "flags": sorted(self.quality_flags),
        }


def normalize_angle(angle):
    """Normalisera grader till (-180, 180]."""
    out = ((float(angle) + 180.0) % 360.0) - 180.0
    return 180.0 if out == -180.0 else out


def _height(mask):
    rows = np.flatnonzero(mask.any(axis=1))
    return 0 if rows.size == 0 else int(rows[-1] - rows[0] + 1)


def _centroid(mask):
    rows, cols = np.nonzero(mask)
    return float(cols.mean()), float(rows.mean())


def denoised_gray(img, cfg=None):
    """NLM-brusreducerad gråbild av utsnittet; delas av steg 1 och 2."""
    cfg = cfg or HpmConfig()
    return to_gray(nlm_denoise(as_crop(img), cfg.nlm_patch, cfg.nlm_search, cfg.nlm_strength))


def coarse_foreground(img, cfg=None, gray=None):
    """
    Steg 1: grov förgrundsmask och vitad bild

    Brusreducerar, Otsu-tröskelar (mörkare sida är förgrund) och behåller största
    komponenten. Förgrunden min-max-skalas till [0, 1] och bakgrunden sätts till 1.0.

    Args:
        img: Utsnitt (H, W, C)
        cfg: HpmConfig
        gray: Färdig denoised_gray(img); beräknas om den saknas

    Returns:
        (m1, I1, flags); en degenererad tröskel ger helbildsmask och flaggan degenerate_threshold
    """
    cfg = cfg or HpmConfig()
    img = as_crop(img)
    flags = set()
    if gray is None:
        gray = denoised_gray(img, cfg)

    otsu = otsu_threshold(gray)
    m1 = None
    if not otsu.degenerate:
        try:
            m1 = largest_component(gray <= otsu.threshold)
        except EmptyMaskError:
            m1 = None
    if m1 is None:
        flags.add("degenerate_threshold")
        logger.warning("Degenererad tröskel, hela ramen används som förgrund")
        m1 = np.ones(img.shape[:2], dtype=bool)

    i1 = np.ones_like(img)
    values = img[m1]
    lo, hi = float(values.min()), float(values.max())
    if hi - lo > 1e-12:
        i1[m1] = (values - lo) / (hi - lo)
    else:
        i1[m1] = values
    return m1, i1, flags


def _thicker_side(mask, theta, center):
    # Pixlar projicerade på storaxeln; positiv sida pekar åt +x efter rotation med -theta
    rows, cols = np.nonzero(mask)
    x = cols - center[0]
    y = center[1] - rows
    t = np.deg2rad(theta)
    s = x * np.cos(t) + y * np.sin(t)
    positive = int(np.sum(s > 1e-9))
    negative = int(np.sum(s < -1e-9))
    if positive == negative:
        return "right", True
    return ("right" if positive > negative else "left"), False


def _dark_segment(clusters, merge):
    # Nästa kluster räknas till kärnan så länge det ligger närmare föregående centroid än nästa ljusare
    c = clusters.centroids
    keep = 1
    while merge and keep < clusters.k_used - 1 and c[keep] - c[keep - 1] < c[keep + 1] - c[keep]:
        keep += 1
    if keep > 1:
        logger.debug("Kärnsegmentet slår ihop de %d mörkaste klustren (centroider %s)", keep,
                     np.round(c, 3).tolist())
    return (clusters.labels >= 0) & (clusters.labels < keep)


def nuclear_extract(i1, m1, seed, cfg=None, gray=None):
    """
    Steg 2: kärnmask, huvudriktning och vinkel

    Mörkaste k-means-segmentet inom m1. Klustras på den brusreducerade gråbilden från
    steg 1 när den ges, annars på en NLM-kopia av I1; inom m1 är I1 bara en min-max-skalning
    av utsnittet. Hål i segmentet fylls. Pixlar längre än d_max från den största
    komponentens centroid tas bort, där d_max är d_max_factor gånger den anpassade
    ellipsens halva storaxel.

    Args:
        i1: Vitad bild från coarse_foreground
        m1: Grov förgrundsmask (får inte vara tom)
        seed: Frö för k-means
        cfg: HpmConfig
        gray: Valfri denoised_gray av originalutsnittet

    Returns:
        (n1, head_direction, theta, flags)

    How to modify:
    - Ändra d_max_factor i konfigurationen för hårdare/mjukare avståndsfilter
    - Sätt merge_dark_clusters=false för att bara använda det allra mörkaste klustret
    """
    cfg = cfg or HpmConfig()
    m1 = np.asarray(m1, dtype=bool)
    if not m1.any():
        raise EmptyMaskError("Grov förgrundsmask är tom")
    flags = set()
    if gray is None:
        gray = denoised_gray(i1, cfg)
    clusters = kmeans_intensity(gray, cfg.kmeans_k, seed, m1)
    darkest = ndimage.binary_fill_holes(_dark_segment(clusters, cfg.merge_dark_clusters)) & m1

    component = largest_component(darkest)
    try:
        ellipse = fit_ellipse(component)
        center = ellipse.center
        d_max = cfg.d_max_factor * ellipse.major_axis / 2.0
    except DegenerateMaskError:
        center = _centroid(component)
        d_max = np.inf
    rows, cols = np.indices(m1.shape)
    near = np.hypot(cols - center[0], rows - center[1]) <= d_max
    n1 = largest_component(darkest & near)

    if n1.sum() < TINY_NUCLEUS_PIXELS:
        flags.add("tiny_nucleus")
    try:
        ellipse = fit_ellipse(n1)
        theta, center = ellipse.angle, ellipse.center
    except DegenerateMaskError:
        flags.add("tiny_nucleus")
        theta, center = 0.0, _centroid(n1)

    direction, tie = _thicker_side(n1, theta, center)
    if tie:
        flags.add("ambiguous_orientation")
        logger.warning("Lika många kärnpixlar på båda sidor, riktningen sätts till höger")
    return n1, direction, float(theta), flags


def align_right(i1, m1, n1, theta, head_direction):
    """
    Rotera bild och masker så att huvudets tjockare ände pekar åt höger

    Returns:
        (I2, m2, n2, rotation_applied) med rotation_applied i (-180, 180]
    """
    rotation = -theta if head_direction == "right" else -theta + 180.0
    rotation = normalize_angle(rotation)
    i2 = rotate(i1, rotation, interp="bilinear", fill=1.0)
    m2 = rotate(m1, rotation, interp="nearest")
    n2 = rotate(n1, rotation, interp="nearest")
    return i2, m2, n2, rotation


def fuse_acrosome(m2, n2, tau_h=0.15):
    """
    Steg 3: slå ihop kärnan med en eroderad akrosomdel

    Högra delen av m2 (x >= centroid) öppnas med ett 3x3-element, så att tunna utskott som
    svansrester försvinner. Sedan eroderas den ett steg i taget tills
    dess höjd är högst height(n2) * (1 + tau_h), eller tills högst tre erosioner återstår.

    Returns:
        (M0, flags)
    """
    m2 = np.asarray(m2, dtype=bool)
    n2 = np.asarray(n2, dtype=bool)
    flags = set()
    if not n2.any():
        raise EmptyMaskError("Kärnmasken är tom efter rotation")
    if m2.any():
        cx, _ = _centroid(m2)
        right = m2 & (np.arange(m2.shape[1])[None, :] >= cx)
        right = dilate(erode(right, 1), 1) & right
    else:
        right = m2.copy()
    target = _height(n2) * (1.0 + tau_h)
    while right.any() and _height(right) > target and erode(right, 3).any():
        right = erode(right, 1)

    if not right.any():
        flags.add("empty_acrosome")
        logger.warning("Akrosomdelen blev tom, M0 = kärnmasken")
        return largest_component(n2), flags
    return largest_component(n2 | right), flags


def build_hierarchy(core, bound, h):
    """
    Steg 4: koncentriska lager M_i = dilate(M0, i) ∩ bound för i = 0..h-1

    Om M0 sticker utanför bound klipps den och flaggan clipped_core sätts.
    """
    if h < 1:
        raise ValueError("h måste vara >= 1")
    core = np.asarray(core, dtype=bool)
    bound = np.asarray(bound, dtype=bool)
    flags = set()
    if np.any(core & ~bound):
        flags.add("clipped_core")
        logger.warning("M0 ligger delvis utanför gränsmasken och klipps")
        core = core & bound
    if not core.any():
        raise EmptyMaskError("M0 är tom")
    layers = [dilate(core, i) & bound for i in range(h)]
    return MaskHierarchy(layers=layers, bound=bound.copy(), flags=flags)


def _fallback(i1, m1, flags):
    # Grov mask som kärna, ingen rotation
    flags.add("fallback_core")
    core = largest_component(m1)
    return i1.copy(), m1.copy(), core, 0.0, "right", 0.0


def hpm_pipeline(img, h, seed, cfg=None):
    """
    Hela pseudomaskkedjan för ett utsnitt

    Avbryter aldrig på degenererade utsnitt; reservresultat flaggas i quality_flags.

    How to modify:
    - Byt ordningen på stegen här om en annan kedja önskas
    """
    cfg = cfg or HpmConfig()
    img = as_crop(img)
    gray = denoised_gray(img, cfg)
    m1, i1, flags = coarse_foreground(img, cfg, gray=gray)
    try:
        n1, direction, theta, extract_flags = nuclear_extract(i1, m1, seed, cfg, gray=gray)
        flags |= extract_flags
        i2, m2, n2, rotation = align_right(i1, m1, n1, theta, direction)
        if not n2.any():
            raise EmptyMaskError("Kärnan roterades ut ur ramen")
    except (EmptyMaskError, DegenerateMaskError) as exc:
        logger.warning("Kärnsteget misslyckades (%s), grov mask används", exc)
        i2, m2, n2, rotation, direction, theta = _fallback(i1, m1, flags)

    core, fuse_flags = fuse_acrosome(m2, n2, cfg.tau_h)
    flags |= fuse_flags
    hierarchy = build_hierarchy(core, m2, h)
    flags |= hierarchy.flags
    return PseudoMaskResult(aligned_image=i2, hierarchy=hierarchy, rotation_applied=rotation,
                            nuclear_mask=n2, quality_flags=flags, head_direction=direction, theta=theta)


def encode_hierarchy(hierarchy):
    """
    Koda lagren som en gråskalebild: nivå i = 255 - i*64, bakgrund 0

    How to modify:
    - Ändra LEVEL_STEP för annan gråskala (MAX_LEVELS måste rymmas i 8 bitar)
    """
    if hierarchy.h > MAX_LEVELS:
        raise ValueError(f"PNG-kodningen rymmer högst {MAX_LEVELS} nivåer")
    out = np.zeros(hierarchy.core.shape, dtype=np.uint8)
    for i in reversed(range(hierarchy.h)):
        out[hierarchy.layers[i]] = 255 - i * LEVEL_STEP
    return out


def decode_hierarchy(encoded, h, bound=None):
    """Avkoda en nivåbild till MaskHierarchy; utan bound används yttersta lagret."""
    encoded = np.asarray(encoded)
    if encoded.dtype != np.uint8:
        encoded = np.round(np.clip(encoded, 0.0, 1.0) * 255.0).astype(np.uint8)
    if encoded.ndim == 3:
        encoded = encoded[..., 0]
    layers = [(encoded > 0) & (encoded >= 255 - i * LEVEL_STEP) for i in range(h)]
    if not layers[0].any():
        raise DataError("Nivåbilden saknar M0-pixlar")
    if bound is None:
        bound = layers[-1].copy()
    return MaskHierarchy(layers=layers, bound=np.asarray(bound, dtype=bool))


def _process_one(args):
    crop_id, image_path, h, seed, cfg = args
    result = hpm_pipeline(read_png(image_path), h, seed, cfg)
    return crop_id, result


def generate_masks(crops, cfg, out_dir, seed, threads=1, truth_dir=None):
    """
    Kör pseudomaskkedjan över en korpus och skriv resultat till out_dir

    Skriver aligned/<id>.png, masks/<id>.png (nivåkodad), bounds/<id>.png och
    masks.jsonl. Om truth_dir finns läggs IoU mot sann huvudmask och svansläckage till.

    Args:
        crops: Lista med LabeledCrop
        cfg: HpmConfig
        out_dir: Stegets katalog
        seed: Huvudfrö; varje utsnitt får ett eget delfrö
        threads: Antal arbetstrådar

    Returns:
        DataFrame med en rad per utsnitt
    """
    out_dir = Path(out_dir)
    jobs = [(c.crop_id, c.image_path, cfg.h, child_seed(seed, i), cfg) for i, c in enumerate(crops)]
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(_process_one, jobs))

    records = []
    for crop_id, result in results:
        write_png(out_dir / "aligned" / f"{crop_id}.png", result.aligned_image)
        write_png(out_dir / "masks" / f"{crop_id}.png", encode_hierarchy(result.hierarchy))
        write_png(out_dir / "bounds" / f"{crop_id}.png", result.hierarchy.bound)
        record = result.record(crop_id)
        if truth_dir is not None and (Path(truth_dir) / f"{crop_id}_head.png").exists():
            record.update(_truth_scores(result, Path(truth_dir), crop_id))
        records.append(record)
    write_jsonl(records, out_dir / "masks.jsonl")

    table = pd.DataFrame(records)
    if "iou_head" in table.columns:
        logger.info("Medel-IoU(M0, sant huvud) = %.3f, medelläckage svans = %.3f",
                    table["iou_head"].mean(), table["tail_leakage"].mean())
    flagged = table["flags"].map(len).gt(0).sum()
    logger.info("%d utsnitt behandlade, %d flaggade", len(table), flagged)
    return table


def _truth_scores(result, truth_dir, crop_id):
    # Sanna masker roteras in i den justerade ramen
    rotation = result.rotation_applied
    head = rotate(read_mask(truth_dir / f"{crop_id}_head.png"), rotation, interp="nearest")
    tail = rotate(read_mask(truth_dir / f"{crop_id}_tail.png"), rotation, interp="nearest")
    core = result.hierarchy.core
    leakage = float((core & tail).sum() / tail.sum()) if tail.any() else 0.0
    return {"iou_head": iou(core, head), "tail_leakage": leakage}


def load_masks(masks_dir, h=None):
    """
    Läs tillbaka ett masks-steg: dict crop_id -> (aligned bild, MaskHierarchy, post)

    How to modify:
    - Ange h för att läsa färre lager än som skrevs
    """
    masks_dir = Path(masks_dir)
    records = read_jsonl(masks_dir / "masks.jsonl")
    loaded = {}
    for record in records:
        crop_id = str(record["crop_id"])
        levels = int(h or record["h"])
        bound = read_mask(masks_dir / "bounds" / f"{crop_id}.png")
        encoded = np.round(read_png(masks_dir / "masks" / f"{crop_id}.png")[..., 0] * 255).astype(np.uint8)
        hierarchy = decode_hierarchy(encoded, levels, bound=bound | (encoded > 0))
        image = read_png(masks_dir / "aligned" / f"{crop_id}.png")
        loaded[crop_id] = (image, hierarchy, record)
    return loaded
