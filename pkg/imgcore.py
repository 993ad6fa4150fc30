"""
Raster primitives for sperm-head crops.
Geometric warps, morphology, moment-based ellipse fitting, denoising, thresholding,
intensity clustering and the invertible augmentation records used by training.

Conventions: images are (H, W, C) float32 in [0, 1]; masks are (H, W) bool;
probability maps are (H, W) float. Angles are degrees, counterclockwise as displayed
(x to the right, y up), rotating about the frame centre ((W-1)/2, (H-1)/2).
"""

import logging
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import ndimage, sparse
from skimage import color, io, measure, transform
from skimage.filters import threshold_otsu
from skimage.restoration import denoise_nl_means
from sklearn.cluster import KMeans

from utils import AugmentationError, DataError, DegenerateMaskError, EmptyMaskError

logger = logging.getLogger(__name__)

STRUCTURE_8 = np.ones((3, 3), dtype=bool)
BACKGROUND_IMAGE = 1.0
BACKGROUND_MAP = 0.0


@dataclass(frozen=True)
class EllipseParams:
    center: tuple
    major_axis: float
    minor_axis: float
    angle: float


@dataclass(frozen=True)
class OtsuResult:
    threshold: float
    degenerate: bool = False


@dataclass(frozen=True)
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    k_used: int
    reduced: bool = False

    def cluster_mask(self, index):
        return self.labels == index


@dataclass(frozen=True)
class PhotometricParams:
    brightness: float = 0.0
    contrast: float = 0.0
    hue: float = 0.0
    saturation: float = 0.0
    grayscale: bool = False

    @property
    def is_identity(self):
        return (self.brightness == 0 and self.contrast == 0 and self.hue == 0
                and self.saturation == 0 and not self.grayscale)


@dataclass(frozen=True)
class AugmentationRecord:
    rotation: float = 0.0
    vflip: bool = False
    shift: tuple = (0.0, 0.0)
    scale: float = 1.0
    aspect: float = 1.0
    photometric: PhotometricParams = field(default_factory=PhotometricParams)
    rng_seed: int = None

    def check(self):
        values = [self.rotation, self.scale, self.aspect]
        if self.shift is None or len(self.shift) != 2 or self.vflip is None:
            raise AugmentationError("Augmentationsposten saknar förskjutning eller vändning")
        values.extend(self.shift)
        if any(v is None or not np.isfinite(v) for v in values):
            raise AugmentationError("Augmentationsposten saknar geometriskt tillstånd")
        if self.scale <= 0 or self.aspect <= 0:
            raise AugmentationError("Skala och bildförhållande måste vara > 0")
        return self

    @property
    def geometric_identity(self):
        return (self.rotation == 0 and not self.vflip and tuple(self.shift) == (0.0, 0.0)
                and self.scale == 1 and self.aspect == 1)

    @property
    def is_identity(self):
        return self.geometric_identity and self.photometric.is_identity


@dataclass(frozen=True)
class AugmentationPolicy:
    rotation: float = 0.0
    vflip_prob: float = 0.0
    shift: float = 0.0
    scale_range: tuple = (1.0, 1.0)
    aspect_range: tuple = (1.0, 1.0)
    brightness: float = 0.0
    contrast: float = 0.0
    hue: float = 0.0
    saturation: float = 0.0
    grayscale_prob: float = 0.0


# OpenCV-enheter: nyans 0-180 per varv, mättnad 0-255
OPENCV_HUE_RANGE = 180.0
OPENCV_SAT_RANGE = 255.0
HUE_SHIFT = 50.0 / OPENCV_HUE_RANGE
SAT_SHIFT = 30.0 / OPENCV_SAT_RANGE

AUGMENTATION_PRESETS = {
    "identity": AugmentationPolicy(),
    # Förträningens T1/T2
    "aid": AugmentationPolicy(rotation=10.0, vflip_prob=0.5, shift=0.10, scale_range=(0.6, 1.0),
                              aspect_range=(0.6, 1.5), brightness=0.5, contrast=0.2,
                              hue=HUE_SHIFT, saturation=SAT_SHIFT, grayscale_prob=0.2),
    # Mildare T_c för finjusteringen
    "scian-mild": AugmentationPolicy(rotation=10.0, vflip_prob=0.5, shift=0.06),
    "hushem-mild": AugmentationPolicy(rotation=0.0, vflip_prob=0.5, shift=0.10, brightness=0.5,
                                      contrast=0.2, hue=HUE_SHIFT, saturation=SAT_SHIFT, grayscale_prob=0.2),
}


def as_crop(arr):
    """
    Validera och normalisera en rasterbild till (H, W, C) float32 i [0, 1]

    How to modify:
    - Ändra toleransen om indata kommer från annan bitdjup
    """
    arr = np.asarray(arr)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3 or arr.shape[-1] not in (1, 3):
        raise DataError(f"Bild måste vara HxW, HxWx1 eller HxWx3, fick {arr.shape}")
    arr = arr.astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise DataError("Bilden innehåller NaN eller Inf")
    if arr.size and (arr.min() < -1e-6 or arr.max() > 1 + 1e-6):
        raise DataError("Bildintensiteter måste ligga i [0, 1]")
    return np.clip(arr, 0.0, 1.0)


def to_gray(img):
    """Returnera en tvådimensionell gråskalebild (H, W) ur en bild med 1 eller 3 kanaler."""
    img = np.asarray(img)
    if img.ndim == 2:
        return img.astype(np.float64)
    if img.shape[-1] == 1:
        return img[..., 0].astype(np.float64)
    return color.rgb2gray(img.astype(np.float64))


def resize(arr, size, interp="bilinear"):
    """Skala om en bild, karta eller mask till size x size."""
    arr = np.asarray(arr)
    if arr.shape[0] == size and arr.shape[1] == size:
        return arr.copy()
    out_shape = (size, size) + arr.shape[2:]
    if arr.dtype == bool:
        out = transform.resize(arr.astype(np.float64), out_shape, order=0, preserve_range=True,
                               anti_aliasing=False)
        return out > 0.5
    order = 0 if interp == "nearest" else 1
    downscale = size < arr.shape[0]
    out = transform.resize(arr.astype(np.float64), out_shape, order=order, preserve_range=True,
                           anti_aliasing=bool(order and downscale))
    return out.astype(arr.dtype if np.issubdtype(arr.dtype, np.floating) else np.float32)


def center_crop(arr, fraction):
    """Behåll den centrala andelen fraction av bilden i båda led."""
    if fraction >= 1.0:
        return arr
    h, w = arr.shape[:2]
    ch, cw = max(1, int(round(h * fraction))), max(1, int(round(w * fraction)))
    top, left = (h - ch) // 2, (w - cw) // 2
    return arr[top:top + ch, left:left + cw]


def _rotation_matrix(angle):
    theta = np.deg2rad(angle)
    c, s = np.cos(theta), np.sin(theta)
    # Rätvinkliga vinklar ska ge exakta permutationer
    c = float(np.round(c)) if abs(c - np.round(c)) < 1e-12 else c
    s = float(np.round(s)) if abs(s - np.round(s)) < 1e-12 else s
    return np.array([[c, -s], [s, c]])


@lru_cache(maxsize=64)
def _warp_operator(shape, a_key, b_key, order):
    """
    Bygg en gles samplingsoperator: ut(q) = in(A q + b) i displaykoordinater

    Returnerar (csr-matris HW x HW, giltighetsmask HxW). Rader för pixlar som samplar
    utanför ramen är tomma och markeras ogiltiga.
    """
    h, w = shape
    a = np.asarray(a_key, dtype=np.float64).reshape(2, 2)
    b = np.asarray(b_key, dtype=np.float64)
    cr, cc = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = np.mgrid[0:h, 0:w]
    x = cols - cc
    y = cr - rows
    xs = a[0, 0] * x + a[0, 1] * y + b[0]
    ys = a[1, 0] * x + a[1, 1] * y + b[1]
    src_c = (xs + cc).ravel()
    src_r = (cr - ys).ravel()

    eps = 1e-6
    valid = (src_r >= -eps) & (src_r <= h - 1 + eps) & (src_c >= -eps) & (src_c <= w - 1 + eps)
    out_idx = np.flatnonzero(valid)
    src_r = np.clip(src_r[valid], 0, h - 1)
    src_c = np.clip(src_c[valid], 0, w - 1)

    if order == 0:
        ri = np.clip(np.floor(src_r + 0.5), 0, h - 1).astype(np.int64)
        ci = np.clip(np.floor(src_c + 0.5), 0, w - 1).astype(np.int64)
        data = np.ones(out_idx.size)
        op = sparse.csr_matrix((data, (out_idx, ri * w + ci)), shape=(h * w, h * w))
    else:
        r0 = np.floor(src_r).astype(np.int64)
        c0 = np.floor(src_c).astype(np.int64)
        fr = src_r - r0
        fc = src_c - c0
        r1 = np.minimum(r0 + 1, h - 1)
        c1 = np.minimum(c0 + 1, w - 1)
        row_idx = np.concatenate([out_idx] * 4)
        col_idx = np.concatenate([r0 * w + c0, r0 * w + c1, r1 * w + c0, r1 * w + c1])
        data = np.concatenate([(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc])
        op = sparse.csr_matrix((data, (row_idx, col_idx)), shape=(h * w, h * w))
    op.sum_duplicates()
    return op, valid.reshape(h, w)


def _order(interp):
    if interp not in ("nearest", "bilinear"):
        raise ValueError(f"Okänd interpolation: {interp}")
    return 0 if interp == "nearest" else 1


def _default_fill(arr):
    if arr.dtype == bool:
        return False
    return BACKGROUND_IMAGE if arr.ndim == 3 else BACKGROUND_MAP


def _apply_operator(arr, op, valid, fill):
    h, w = arr.shape[:2]
    flat = arr.reshape(h * w, -1).astype(np.float64)
    out = op @ flat
    if arr.dtype == bool:
        out = out > 0.5
    else:
        out = out.astype(arr.dtype)
    out = out.reshape(arr.shape)
    out[~valid] = fill
    return out


def _affine(arr, a, b, interp, fill):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    op, valid = _warp_operator(arr.shape[:2], tuple(a.ravel()), tuple(b.ravel()), _order(interp))
    if fill is None:
        fill = _default_fill(arr)
    return _apply_operator(arr, op, valid, fill), valid


def rotate(img, angle, interp="bilinear", fill=None):
    """
    Rotera en bild, karta eller mask kring ramens mitt

    Args:
        img: (H, W, C) bild, (H, W) karta eller bool-mask
        angle: Grader moturs som bilden visas
        interp: "nearest" eller "bilinear"
        fill: Utfyllnad utanför ramen; standard 1.0 (vit) för bilder, 0 för kartor och masker

    How to modify:
    - Ändra BACKGROUND_IMAGE om bakgrunden inte vitas
    """
    if not np.isfinite(angle):
        raise ValueError("Vinkeln måste vara ändlig")
    arr = np.asarray(img)
    if angle == 0:
        return arr.copy()
    out, _ = _affine(arr, _rotation_matrix(-angle), (0.0, 0.0), interp, fill)
    return out


def rot90(img, k):
    """Exakt rotation med k*90 grader moturs; samma resultat som rotate(img, 90*k) för kvadratiska ramar."""
    return np.ascontiguousarray(np.rot90(np.asarray(img), k=k % 4, axes=(0, 1)))


def dilate(mask, n):
    """Dilatera n gånger med 3x3-element (8-grannskap); dilate(m, 0) == m."""
    if n < 0:
        raise ValueError("n måste vara >= 0")
    mask = np.asarray(mask, dtype=bool)
    if n == 0:
        return mask.copy()
    # iterations=0 betyder "tills konvergens" i scipy, därav specialfallet ovan
    return ndimage.binary_dilation(mask, structure=STRUCTURE_8, iterations=int(n))


def erode(mask, n):
    """Erodera n gånger med 3x3-element; utanför ramen räknas som förgrund."""
    if n < 0:
        raise ValueError("n måste vara >= 0")
    mask = np.asarray(mask, dtype=bool)
    if n == 0:
        return mask.copy()
    return ndimage.binary_erosion(mask, structure=STRUCTURE_8, iterations=int(n), border_value=1)


def connected_components(mask):
    """
    Dela upp en mask i 8-sammanhängande komponenter

    Returns:
        Lista med bool-masker i etikettordning; tom lista för tom mask
    """
    mask = np.asarray(mask, dtype=bool)
    labels, count = ndimage.label(mask, structure=STRUCTURE_8)
    return [labels == i for i in range(1, count + 1)]


def largest_component(mask):
    """Största 8-sammanhängande komponenten; lika stora ger lägsta etikett. Tom mask kastar EmptyMaskError."""
    mask = np.asarray(mask, dtype=bool)
    labels, count = ndimage.label(mask, structure=STRUCTURE_8)
    if count == 0:
        raise EmptyMaskError("Masken är tom, ingen komponent finns")
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(sizes)) + 1)


def fit_ellipse(mask):
    """
    Anpassa en ellips via andra ordningens centrala moment

    Axlarna är hela axellängder 4*sqrt(lambda), exakt för en fylld ellips och samma
    som axis_major_length/axis_minor_length i skimage.measure.regionprops. Halvaxeln
    är alltså 2*sqrt(lambda).
    Vinkeln mäts moturs från +x och normaliseras till (-90, 90].

    How to modify:
    - Byt skalfaktorn 4.0 om halvaxlar önskas
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.sum() < 5:
        raise DegenerateMaskError(f"Ellipsanpassning kräver minst 5 pixlar, fick {int(mask.sum())}")
    image = mask.astype(np.float64)
    raw = measure.moments(image, order=1)
    m00 = raw[0, 0]
    cr, cc = raw[1, 0] / m00, raw[0, 1] / m00
    mu = measure.moments_central(image, center=(cr, cc), order=2)
    var_r = mu[2, 0] / m00
    var_c = mu[0, 2] / m00
    cov_rc = mu[1, 1] / m00
    # Displaykoordinater: x = kolumn, y = -rad
    cov = np.array([[var_c, -cov_rc], [-cov_rc, var_r]])
    evals, evecs = np.linalg.eigh(cov)
    lam_minor, lam_major = evals
    if lam_minor <= 1e-12 * max(lam_major, 1.0):
        raise DegenerateMaskError("Masken har noll varians i en riktning")
    vx, vy = evecs[:, 1]
    angle = float(np.degrees(np.arctan2(vy, vx)))
    while angle <= -90.0:
        angle += 180.0
    while angle > 90.0:
        angle -= 180.0
    return EllipseParams(center=(float(cc), float(cr)), major_axis=float(4.0 * np.sqrt(lam_major)),
                         minor_axis=float(4.0 * np.sqrt(lam_minor)), angle=angle)


def nlm_denoise(img, patch=5, search=11, strength=0.08):
    """
    Icke-lokal medelvärdesbrusreducering (patch-baserad)

    Args:
        img: (H, W), (H, W, 1) eller (H, W, 3)
        patch: Udda patchstorlek
        search: Udda sökfönster; motsvarar patch_distance = search // 2
        strength: Filterstyrka h (> 0)

    How to modify:
    - Ändra fast_mode till False för den långsammare exakta varianten
    """
    if patch % 2 == 0 or search % 2 == 0:
        raise ValueError("patch och search måste vara udda")
    if strength <= 0:
        raise ValueError("strength måste vara > 0")
    arr = np.asarray(img, dtype=np.float64)
    squeeze = arr.ndim == 3 and arr.shape[-1] == 1
    work = arr[..., 0] if squeeze else arr
    channel_axis = -1 if work.ndim == 3 else None
    out = denoise_nl_means(work, patch_size=patch, patch_distance=search // 2, h=strength,
                           fast_mode=True, channel_axis=channel_axis, preserve_range=True)
    out = np.clip(out, 0.0, 1.0)
    if squeeze:
        out = out[..., None]
    return out.astype(np.float32) if np.asarray(img).dtype == np.float32 else out


def otsu_threshold(img):
    """
    Otsu-tröskel över ett 256-fackshistogram

    Returns:
        OtsuResult; en konstant bild ger tröskeln = konstanten och degenerate=True
    """
    gray = to_gray(img)
    lo, hi = float(gray.min()), float(gray.max())
    if hi - lo <= 1e-12:
        logger.warning("Konstant bild, Otsu-tröskeln är degenererad (%.4f)", lo)
        return OtsuResult(threshold=lo, degenerate=True)
    return OtsuResult(threshold=float(threshold_otsu(gray, nbins=256)), degenerate=False)


def kmeans_intensity(img, k, seed, region):
    """
    Lloyds k-means på skalära intensiteter inom region

    Startcentroider i kvantilerna (2i+1)/2k. Centroiderna returneras stigande, så
    index 0 är det mörkaste segmentet. Etiketter utanför region är -1.

    How to modify:
    - Ändra max_iter/tol för annan konvergens
    """
    if k < 2:
        raise ValueError("k måste vara >= 2")
    gray = to_gray(img)
    region = np.asarray(region, dtype=bool)
    values = gray[region]
    labels = np.full(gray.shape, -1, dtype=np.int64)
    if values.size == 0:
        raise EmptyMaskError("k-means-regionen är tom")

    distinct = np.unique(values)
    k_used, reduced = k, False
    if distinct.size < k:
        k_used, reduced = int(distinct.size), True
        logger.warning("Endast %d distinkta intensiteter, k minskas från %d", distinct.size, k)
    if k_used == 1:
        labels[region] = 0
        return KMeansResult(labels=labels, centroids=distinct[:1].copy(), k_used=1, reduced=True)

    positions = (2 * np.arange(k_used) + 1) / (2.0 * k_used)
    init = np.quantile(values, positions)
    if np.unique(init).size < k_used:
        init = np.quantile(distinct, positions)
    model = KMeans(n_clusters=k_used, init=init.reshape(-1, 1), n_init=1, max_iter=100, tol=1e-6,
                   random_state=seed)
    raw_labels = model.fit_predict(values.reshape(-1, 1))
    centers = model.cluster_centers_.ravel()
    order = np.argsort(centers, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(k_used)
    labels[region] = rank[raw_labels]
    return KMeansResult(labels=labels, centroids=centers[order], k_used=k_used, reduced=reduced)


def _geometric_matrix(record):
    scale_x = record.scale * np.sqrt(record.aspect)
    scale_y = record.scale / np.sqrt(record.aspect)
    flip = np.diag([1.0, -1.0 if record.vflip else 1.0])
    return np.diag([scale_x, scale_y]) @ _rotation_matrix(record.rotation) @ flip


def geometric_operator(shape, record, inverse=False, interp="bilinear"):
    """
    Sampling-operatorn för en posts geometri

    inverse=False: originalram -> augmenterad ram. inverse=True: tillbaka till originalramen.
    Returnerar (csr-matris, giltighetsmask) så att anroparen kan använda adjunkten.
    """
    record.check()
    h, w = shape
    m = _geometric_matrix(record)
    t = np.array([record.shift[0] * w, -record.shift[1] * h])
    if inverse:
        a, b = m, t
    else:
        a = np.linalg.inv(m)
        b = -a @ t
    op, valid = _warp_operator((h, w), tuple(a.ravel()), tuple(b.ravel()), _order(interp))
    return op, valid.copy()


def warp_geometric(arr, record, interp="bilinear", fill=None):
    """Applicera postens framåtgeometri på en bild, karta eller mask. Returnerar (ut, giltighet)."""
    arr = np.asarray(arr)
    if arr.dtype == bool:
        interp = "nearest"
    if record.check().geometric_identity:
        return arr.copy(), np.ones(arr.shape[:2], dtype=bool)
    op, valid = geometric_operator(arr.shape[:2], record, inverse=False, interp=interp)
    return _apply_operator(arr, op, valid, _default_fill(arr) if fill is None else fill), valid


def invert_geometric(arr, record, interp="bilinear"):
    """
    Ta en karta från augmenterad ram tillbaka till originalramen

    Inversen tar bort förskjutning/skala/rotation och därefter vändningen.
    Returns:
        (karta i originalram, giltighetsmask för pixlar som stannade i ramen)
    """
    arr = np.asarray(arr)
    if arr.dtype == bool:
        interp = "nearest"
    if record.check().geometric_identity:
        return arr.copy(), np.ones(arr.shape[:2], dtype=bool)
    op, valid = geometric_operator(arr.shape[:2], record, inverse=True, interp=interp)
    fill = False if arr.dtype == bool else BACKGROUND_MAP
    return _apply_operator(arr, op, valid, fill), valid


def apply_photometric(img, params):
    """
    Ljusstyrka, kontrast, nyans, mättnad och gråskala; färgoperationerna påverkar bara RGB

    Nyans och mättnad är additiva förskjutningar i HSV med kanalerna skalade till [0, 1].
    """
    if params.is_identity:
        return img.copy()
    out = img.astype(np.float64)
    if params.brightness:
        out = out * (1.0 + params.brightness)
    if params.contrast:
        mean = out.mean()
        out = (out - mean) * (1.0 + params.contrast) + mean
    out = np.clip(out, 0.0, 1.0)
    if out.shape[-1] == 3:
        if params.hue or params.saturation:
            hsv = color.rgb2hsv(out)
            hsv[..., 0] = np.mod(hsv[..., 0] + params.hue, 1.0)
            hsv[..., 1] = np.clip(hsv[..., 1] + params.saturation, 0.0, 1.0)
            out = color.hsv2rgb(hsv)
        if params.grayscale:
            out = np.repeat(color.rgb2gray(out)[..., None], 3, axis=-1)
    return np.clip(out, 0.0, 1.0).astype(img.dtype)


def draw_record(policy, rng):
    """
    Dra en AugmentationRecord ur en policy

    Alla slumptal dras i fast ordning så att samma frö alltid ger samma post.
    """
    if isinstance(rng, np.random.Generator):
        seed = int(rng.integers(0, 2**31 - 1))
    else:
        seed = int(rng)
    gen = np.random.default_rng(seed)
    rotation = float(gen.uniform(-policy.rotation, policy.rotation))
    vflip = bool(gen.random() < policy.vflip_prob)
    dx, dy = (float(v) for v in gen.uniform(-policy.shift, policy.shift, size=2))
    scale = float(gen.uniform(*policy.scale_range))
    lo, hi = policy.aspect_range
    aspect = float(np.exp(gen.uniform(np.log(lo), np.log(hi))))
    photometric = PhotometricParams(
        brightness=float(gen.uniform(-policy.brightness, policy.brightness)),
        contrast=float(gen.uniform(-policy.contrast, policy.contrast)),
        hue=float(gen.uniform(-policy.hue, policy.hue)),
        saturation=float(gen.uniform(-policy.saturation, policy.saturation)),
        grayscale=bool(gen.random() < policy.grayscale_prob),
    )
    return AugmentationRecord(rotation=rotation, vflip=vflip, shift=(dx, dy), scale=scale, aspect=aspect,
                              photometric=photometric, rng_seed=seed)


def apply_augmentation(img, policy, rng):
    """
    Augmentera en bild och returnera (bild, AugmentationRecord)

    Args:
        img: (H, W, C) bild
        policy: AugmentationPolicy eller namn på en profil i AUGMENTATION_PRESETS
        rng: np.random.Generator eller heltalsfrö

    How to modify:
    - Lägg till nya profiler i AUGMENTATION_PRESETS
    """
    if isinstance(policy, str):
        policy = AUGMENTATION_PRESETS[policy]
    record = draw_record(policy, rng)
    out, _ = warp_geometric(img, record, interp="bilinear")
    return apply_photometric(out, record.photometric), record


def without_photometric(record):
    return replace(record, photometric=PhotometricParams())


def iou(a, b):
    """Jaccard-index mellan två masker; två tomma masker ger 1.0."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def read_png(path):
    """Läs en 8-bitars grå- eller RGB-PNG som (H, W, C) float32 i [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"Bilden saknas: {path}")
    arr = io.imread(path)
    if arr.ndim == 3 and arr.shape[-1] == 4:
        arr = arr[..., :3]
    if arr.dtype == bool:
        arr = arr.astype(np.uint8) * 255
    return as_crop(arr.astype(np.float32) / 255.0)


def read_mask(path):
    """Läs en mask-PNG (0 = bakgrund, 255 = förgrund)."""
    return read_png(path)[..., 0] > 0.5


def write_png(path, arr):
    """Skriv bild eller mask som 8-bitars PNG; masker kodas 0/255."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(arr)
    if arr.dtype == bool:
        out = arr.astype(np.uint8) * 255
    elif arr.dtype == np.uint8:
        out = arr
    else:
        out = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    if out.ndim == 3 and out.shape[-1] == 1:
        out = out[..., 0]
    io.imsave(path, out, check_contrast=False)
    return path


def network_view(arr, size, fraction=1.0):
    """Centrerad beskärning följd av omskalning till nätets indatastorlek."""
    return resize(center_crop(np.asarray(arr), fraction), size)


def native_view(arr, native_shape, fraction=1.0):
    """
    Inversen till network_view för kartor och masker

    Skalar tillbaka till den beskurna regionen och klistrar in den i en nollad ram av native_shape.
    """
    h, w = native_shape[:2]
    if fraction >= 1.0:
        return resize(arr, h) if h == w else _resize_rect(arr, (h, w))
    ch, cw = max(1, int(round(h * fraction))), max(1, int(round(w * fraction)))
    top, left = (h - ch) // 2, (w - cw) // 2
    out = np.zeros((h, w) + np.asarray(arr).shape[2:], dtype=np.asarray(arr).dtype)
    out[top:top + ch, left:left + cw] = _resize_rect(arr, (ch, cw))
    return out


def _resize_rect(arr, shape):
    arr = np.asarray(arr)
    if arr.dtype == bool:
        return transform.resize(arr.astype(np.float64), shape + arr.shape[2:], order=0,
                                preserve_range=True, anti_aliasing=False) > 0.5
    out = transform.resize(arr.astype(np.float64), shape + arr.shape[2:], order=1, preserve_range=True,
                           anti_aliasing=False)
    return out.astype(arr.dtype)
