"""
Datasets for the sperm-head pipeline.
Synthetic crops with exact ground truth, ingestion of labelled crop directories with
expert votes, soft-label derivation and stratified k-fold splitting.
"""

import dataclasses
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import ndimage
from sklearn.model_selection import StratifiedKFold

from imgcore import read_png, write_png
from losses import SoftLabel
from utils import DataError, child_seed, read_jsonl, validate_vote_file, write_jsonl

logger = logging.getLogger(__name__)

CLASS_NAMES = ["normal", "tapered", "pyriform", "amorphous", "small"]
REFERENCE_SIZE = 64

# Ramstorlek och kanaler per datamängdsprofil
PRESETS = {
    "desk": (64, 1),
    "scian": (35, 1),
    "hushem": (131, 3),
}

# Klassmix för en SCIAN-lik korpus (normal, tapered, pyriform, amorphous, small)
SCIAN_MIX = [100, 228, 76, 656, 72]

# Färgning per kanal för RGB-utsnitt: 1 - (1 - grå) * stain
STAIN = np.array([0.55, 0.8, 0.35])


@dataclass
class HeadSpec:
    semi_major: float = 14.0
    semi_minor: float = 8.5
    taper: float = 0.2
    acrosome_fraction: float = 0.2
    intensity: float = 0.18
    acrosome_intensity: float = 0.42
    roughness: float = 0.0


@dataclass
class MidpieceSpec:
    length: float = 10.0
    width: float = 4.0
    intensity: float = 0.35


@dataclass
class TailSpec:
    length: float = 40.0
    amplitude: float = 2.0
    period: float = 12.0
    width: float = 1.5
    intensity: float = 0.48


@dataclass
class SyntheticSpec:
    class_id: int = 0
    size: int = 64
    channels: int = 1
    head: HeadSpec = field(default_factory=HeadSpec)
    midpiece: MidpieceSpec = field(default_factory=MidpieceSpec)
    tail: TailSpec = field(default_factory=TailSpec)
    pose: float = 0.0
    noise: float = 0.05
    background: float = 0.85
    texture: float = 0.03
    include_midpiece: bool = True
    include_tail: bool = True
    seed: int = 0

    @classmethod
    def from_dict(cls, values):
        values = dict(values)
        values["head"] = HeadSpec(**values.get("head", {}))
        values["midpiece"] = MidpieceSpec(**values.get("midpiece", {}))
        values["tail"] = TailSpec(**values.get("tail", {}))
        return cls(**values)


@dataclass
class LabeledCrop:
    crop_id: str
    image_path: Path
    votes: list
    soft_label: SoftLabel
    mask_path: Path = None
    teacher_mask_path: Path = None

    @property
    def label(self):
        return self.soft_label.c1


@dataclass
class FoldSplit:
    k: int
    assignments: dict
    seed: int

    def test_ids(self, fold):
        return [cid for cid, f in self.assignments.items() if f == fold]

    def train_ids(self, fold):
        return [cid for cid, f in self.assignments.items() if f != fold]

    def to_frame(self):
        return pd.DataFrame({"crop_id": list(self.assignments), "fold": list(self.assignments.values())})


def _pixel_frame(size, pose):
    # Huvudets ram: u pekar framåt (akrosomen), v åt vänster om u
    c = (size - 1) / 2.0
    rows, cols = np.indices((size, size), dtype=np.float64)
    x = cols - c
    y = c - rows
    t = np.deg2rad(pose)
    u = x * np.cos(t) + y * np.sin(t)
    v = -x * np.sin(t) + y * np.cos(t)
    return u, v


def generate_crop(spec):
    """
    Rastrera ett syntetiskt spermieutsnitt med exakta sanningsmasker

    Huvudet är en avsmalnande ellips (bredast framtill) med ljusare akrosom på den
    främre andelen, mittstycket en rektangel bakom huvudet och svansen en sinuskurva.

    Returns:
        (bild (H, W, C) float32, sanning {head, midpiece, tail, class_id, pose})

    How to modify:
    - Ändra HeadSpec/MidpieceSpec/TailSpec för andra former
    - Ändra STAIN för annan färgning av RGB-utsnitt
    """
    rng = np.random.default_rng(spec.seed)
    scale = spec.size / REFERENCE_SIZE
    head = spec.head
    a = head.semi_major * scale
    b = head.semi_minor * scale
    half = spec.size / 2.0 - 1.0
    reach = max(a, b * (1.0 + head.taper)) * (1.0 + head.roughness)
    if reach > half:
        raise DataError(f"Huvudet ({reach:.1f} px) ryms inte i ramen ({spec.size} px)")
    if spec.noise < 0:
        raise DataError("Brusnivån måste vara >= 0")
    if not head.intensity < spec.background:
        raise DataError("Huvudet måste vara mörkare än bakgrunden")

    u, v = _pixel_frame(spec.size, spec.pose)
    un = u / a
    width = b * (1.0 + head.taper * np.clip(un, -1.0, 1.0))
    radius = np.sqrt(un ** 2 + (v / width) ** 2)
    if head.roughness > 0:
        phase = rng.uniform(0, 2 * np.pi, size=2)
        angle = np.arctan2(v / width, un)
        radius = radius / (1.0 + head.roughness * (np.sin(3 * angle + phase[0])
                                                   + 0.5 * np.sin(5 * angle + phase[1])) / 1.5)
    head_mask = radius <= 1.0
    acrosome = head_mask & (u > a * (1.0 - 2.0 * head.acrosome_fraction))

    mid_mask = np.zeros_like(head_mask)
    if spec.include_midpiece:
        mp = spec.midpiece
        length, mwidth = mp.length * scale, mp.width * scale
        mid_mask = (u >= -a - length) & (u <= -a + 1.0) & (np.abs(v) <= mwidth / 2.0) & ~head_mask
        tail_start = -a - length
    else:
        tail_start = -a

    tail_mask = np.zeros_like(head_mask)
    if spec.include_tail:
        tl = spec.tail
        t = tail_start - u
        curve = tl.amplitude * scale * np.sin(2 * np.pi * t / (tl.period * scale))
        tail_mask = (t >= 0) & (t <= tl.length * scale) & (np.abs(v - curve) <= max(tl.width * scale, 1.0) / 2.0)
        tail_mask &= ~head_mask & ~mid_mask

    texture = ndimage.gaussian_filter(rng.standard_normal((spec.size, spec.size)), sigma=4.0 * scale + 1.0)
    texture /= max(np.abs(texture).max(), 1e-12)
    gray = spec.background + spec.texture * texture
    gray[head_mask] = head.intensity
    gray[acrosome] = head.acrosome_intensity
    if spec.include_midpiece:
        gray[mid_mask] = spec.midpiece.intensity
    if spec.include_tail:
        gray[tail_mask] = spec.tail.intensity

    if spec.channels == 3:
        img = 1.0 - (1.0 - gray[..., None]) * STAIN[None, None, :]
    else:
        img = gray[..., None]
    if spec.noise > 0:
        img = img + rng.normal(0.0, spec.noise, size=img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    truth = {"head": head_mask, "midpiece": mid_mask, "tail": tail_mask,
             "class_id": spec.class_id, "pose": float(spec.pose)}
    return img, truth


def class_spec(class_id, seed, preset="desk", noise=0.05, pose=None):
    """
    Dra en SyntheticSpec för en morfologiklass med slumpad pose och små formvariationer

    Klasser: 0 normal, 1 tapered, 2 pyriform, 3 amorphous, 4 small.
    """
    size, channels = PRESETS[preset]
    rng = np.random.default_rng(seed)
    shapes = {
        0: dict(semi_major=14.0, semi_minor=8.5, taper=0.2),
        1: dict(semi_major=15.0, semi_minor=6.0, taper=0.15),
        2: dict(semi_major=14.0, semi_minor=8.5, taper=0.6),
        3: dict(semi_major=13.0, semi_minor=8.0, taper=0.2, roughness=0.18),
        4: dict(semi_major=8.4, semi_minor=5.1, taper=0.2),
    }
    if class_id not in shapes:
        raise DataError(f"Okänd syntetisk klass {class_id}")
    values = dict(shapes[class_id])
    jitter = rng.uniform(0.95, 1.05, size=2)
    values["semi_major"] *= jitter[0]
    values["semi_minor"] *= jitter[1]
    drawn_pose = float(rng.uniform(-180.0, 180.0))
    return SyntheticSpec(class_id=class_id, size=size, channels=channels, head=HeadSpec(**values),
                         tail=TailSpec(amplitude=float(rng.uniform(1.0, 3.0)), period=float(rng.uniform(10, 16))),
                         pose=drawn_pose if pose is None else float(pose), noise=noise,
                         seed=int(rng.integers(0, 2**31 - 1)))


def simulate_votes(class_id, n_classes, rng, partial_rate=0.2, disagreement_rate=0.03):
    """Tre expertröster: oftast enighet, ibland en avvikare, sällan tre olika."""
    draw = rng.random()
    others = [c for c in range(n_classes) if c != class_id]
    if draw < disagreement_rate and len(others) >= 2:
        pick = rng.choice(others, size=2, replace=False)
        return [class_id, int(pick[0]), int(pick[1])]
    if draw < disagreement_rate + partial_rate:
        return [class_id, class_id, int(rng.choice(others))]
    return [class_id] * 3


def generate_corpus(n, n_classes, seed, preset="desk", class_mix=None, noise=0.05):
    """
    Generera en syntetisk korpus

    Args:
        n: Antal utsnitt (ignoreras om class_mix anges)
        n_classes: Antal klasser (2-5)
        seed: Huvudfrö
        preset: "desk", "scian" eller "hushem"
        class_mix: Valfri lista med antal per klass
        noise: Gaussiskt brus sigma

    Returns:
        Lista med dicts {crop_id, spec, image, truth, votes}
    """
    if not 2 <= n_classes <= len(CLASS_NAMES):
        raise DataError(f"n_classes måste ligga i [2, {len(CLASS_NAMES)}]")
    if class_mix is None:
        class_mix = [n // n_classes + (1 if i < n % n_classes else 0) for i in range(n_classes)]
    if len(class_mix) != n_classes:
        raise DataError("class_mix måste ha en post per klass")
    labels = np.concatenate([np.full(count, c, dtype=np.int64) for c, count in enumerate(class_mix)])
    order = np.random.default_rng(seed).permutation(labels.size)
    vote_rng = np.random.default_rng(child_seed(seed, 1))

    corpus = []
    for i, idx in enumerate(order):
        class_id = int(labels[idx])
        spec = class_spec(class_id, child_seed(seed, 2, i), preset=preset, noise=noise)
        image, truth = generate_crop(spec)
        corpus.append({"crop_id": f"c{i:05d}", "spec": spec, "image": image, "truth": truth,
                       "votes": simulate_votes(class_id, n_classes, vote_rng)})
    return corpus


def write_corpus(corpus, out_dir):
    """
    Skriv en korpus: images/, truth/, votes.csv (utan rubrikrad) och manifest.jsonl

    How to modify:
    - Byt votes.csv mot votes.xlsx med DataFrame.to_excel om Excel önskas
    """
    out_dir = Path(out_dir)
    manifest, vote_rows = [], []
    for item in corpus:
        crop_id = item["crop_id"]
        write_png(out_dir / "images" / f"{crop_id}.png", item["image"])
        for part in ("head", "midpiece", "tail"):
            write_png(out_dir / "truth" / f"{crop_id}_{part}.png", item["truth"][part])
        vote_rows.append([crop_id] + [str(v) for v in item["votes"]])
        manifest.append({"crop_id": crop_id, "class_id": item["spec"].class_id,
                         "spec": dataclasses.asdict(item["spec"])})
    pd.DataFrame(vote_rows).to_csv(out_dir / "votes.csv", header=False, index=False, lineterminator="\n")
    write_jsonl(manifest, out_dir / "manifest.jsonl")
    logger.info("Skrev %d utsnitt till %s", len(corpus), out_dir)
    return out_dir


def read_manifest(dataset_dir):
    """Läs manifest.jsonl; spec-fälten återskapas som SyntheticSpec."""
    records = read_jsonl(Path(dataset_dir) / "manifest.jsonl")
    for record in records:
        record["crop_id"] = str(record["crop_id"])
        record["spec"] = SyntheticSpec.from_dict(record["spec"])
    return records


def derive_soft_label(votes, lam=0.85):
    """
    Mjuk etikett ur 1-3 expertröster

    Returns:
        SoftLabel, eller None när ingen majoritet finns (tre olika, eller två olika röster)
    """
    if not 1 <= len(votes) <= 3:
        raise DataError(f"1-3 röster krävs, fick {len(votes)}")
    counts = Counter(int(v) for v in votes).most_common()
    if len(counts) == 1:
        return SoftLabel.agreed(counts[0][0], lam=lam)
    if len(votes) == 3 and counts[0][1] == 2:
        return SoftLabel(c1=counts[0][0], c2=counts[1][0], consensus=False, lam=lam)
    return None


def _find_vote_file(dataset_dir):
    for name in ("votes.csv", "votes.xlsx"):
        if (dataset_dir / name).exists():
            return dataset_dir / name
    raise DataError(f"Röstfil saknas i {dataset_dir} (votes.csv eller votes.xlsx)")


def load_dataset(dataset_dir, lam=0.85):
    """
    Läs en datamängdskatalog: images/*.png, votes.csv|votes.xlsx, valfria masks/ och teacher_masks/

    Utsnitt med tre olika röster utesluts och loggas. Alla bilder måste ha samma form.

    How to modify:
    - Ändra lam för annan vikt på majoritetsklassen
    """
    dataset_dir = Path(dataset_dir)
    votes = validate_vote_file(_find_vote_file(dataset_dir))
    crops, excluded, shape = [], [], None
    for row in votes.itertuples(index=False):
        image_path = dataset_dir / "images" / f"{row.crop_id}.png"
        if not image_path.exists():
            raise DataError(f"Bild saknas för {row.crop_id}: {image_path}")
        label = derive_soft_label(row.votes, lam=lam)
        if label is None:
            excluded.append(row.crop_id)
            continue
        image_shape = read_png(image_path).shape
        if shape is None:
            shape = image_shape
        elif image_shape != shape:
            raise DataError(f"{row.crop_id} har formen {image_shape}, förväntade {shape}")
        mask_path = dataset_dir / "masks" / f"{row.crop_id}.png"
        teacher_path = dataset_dir / "teacher_masks" / f"{row.crop_id}.png"
        crops.append(LabeledCrop(crop_id=row.crop_id, image_path=image_path, votes=list(row.votes),
                                 soft_label=label,
                                 mask_path=mask_path if mask_path.exists() else None,
                                 teacher_mask_path=teacher_path if teacher_path.exists() else None))
    if excluded:
        logger.warning("%d utsnitt uteslutna (ingen majoritet): %s", len(excluded), excluded[:5])
    if not crops:
        raise DataError(f"Inga användbara utsnitt i {dataset_dir}")
    return crops


def make_folds(crops, k=5, seed=0):
    """
    Stratifierad k-delning på majoritetsklassen

    Returns:
        FoldSplit; antal per klass skiljer högst 1 mellan delarna
    """
    labels = np.array([c.label for c in crops])
    present = np.bincount(labels)
    smallest = int(present[present > 0].min()) if labels.size else 0
    if k > smallest:
        raise DataError(f"k={k} är större än minsta klassens antal ({smallest})")
    splitter = StratifiedKFold(n_splits=k, shuffle=True, random_state=seed)
    assignments = {}
    for fold, (_, test_idx) in enumerate(splitter.split(np.zeros(len(crops)), labels)):
        for i in test_idx:
            assignments[crops[i].crop_id] = fold
    ordered = {c.crop_id: assignments[c.crop_id] for c in crops}
    return FoldSplit(k=k, assignments=ordered, seed=seed)


def n_classes_of(crops):
    return int(max(max(c.soft_label.c1, c.soft_label.c2) for c in crops)) + 1
