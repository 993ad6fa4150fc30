"""
Small numpy network: convolutional encoder, bilinear-upsampling decoder with additive
fusion, linear rotation/class heads, explicit backward pass, Adam and step decay.
Parameters live in an ordered dict of named float32 arrays.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from utils import DataError, NumericalError

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
ROTATION_CLASSES = 4


# Lager


def conv2d(x, w, b, pad):
    """Korskorrelation (N, C, H, W) * (O, C, k, k) med nollutfyllnad pad."""
    k = w.shape[-1]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))
    out = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    return out + b[None, :, None, None], windows


def conv2d_backward(dout, windows, w, pad, need_dx=True):
    k = w.shape[-1]
    db = dout.sum(axis=(0, 2, 3))
    dw = np.tensordot(dout, windows, axes=([0, 2, 3], [0, 2, 3]))
    if not need_dx:
        return None, dw, db
    full = k - 1 - pad
    dpad = np.pad(dout, ((0, 0), (0, 0), (full, full), (full, full))) if full else dout
    dwin = sliding_window_view(dpad, (k, k), axis=(2, 3))
    dx = np.tensordot(dwin, w[:, :, ::-1, ::-1], axes=([1, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2)
    return dx, dw, db


def avgpool2(x):
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def avgpool2_backward(dout):
    return np.repeat(np.repeat(dout, 2, axis=2), 2, axis=3) / 4.0


def upsample_matrix(n, dtype=np.float32):
    """Bilinjär 2x-uppsampling i en dimension (align_corners=False) som (2n, n)-matris."""
    src = np.clip((np.arange(2 * n) + 0.5) / 2.0 - 0.5, 0.0, n - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n - 1)
    frac = src - lo
    u = np.zeros((2 * n, n))
    rows = np.arange(2 * n)
    np.add.at(u, (rows, lo), 1.0 - frac)
    np.add.at(u, (rows, hi), frac)
    return u.astype(dtype)


def upsample2(x):
    uh = upsample_matrix(x.shape[2], x.dtype)
    uw = upsample_matrix(x.shape[3], x.dtype)
    return np.einsum("ah,nchw,bw->ncab", uh, x, uw, optimize=True)


def upsample2_backward(dout):
    uh = upsample_matrix(dout.shape[2] // 2, dout.dtype)
    uw = upsample_matrix(dout.shape[3] // 2, dout.dtype)
    return np.einsum("ah,ncab,bw->nchw", uh, dout, uw, optimize=True)


def relu(x):
    return np.maximum(x, 0)


def sigmoid(x):
    return expit(x)


def linear(x, w, b):
    return x @ w.T + b


# Nätet


@dataclass
class ForwardResult:
    prob: np.ndarray = None
    rot_logits: np.ndarray = None
    cls_logits: np.ndarray = None
    pyramid: list = field(default_factory=list)
    lowest: np.ndarray = None
    trace: dict = field(default_factory=dict)


def stage_count(params):
    return sum(1 for name in params if name.endswith(".conv_a.w"))


def param_count(params):
    return int(sum(arr.size for arr in params.values()))


def init_params(channels, in_channels, decoder_channels, seed, n_classes=None, rotation_head=True):
    """
    Kaiming-initierade parametrar (fan-in), nollade bias

    Args:
        channels: Kanaler per kodarsteg, t.ex. [16, 32, 64]
        in_channels: 1 för gråa utsnitt, 3 för RGB
        decoder_channels: Avkodarens kanalbredd D
        seed: Frö
        n_classes: Antal klasser för klasshuvudet, None = inget klasshuvud
        rotation_head: Om rotationshuvudet ska skapas

    How to modify:
    - Lägg till fler steg genom att förlänga channels (indata måste vara delbar med 2**steg)
    """
    rng = np.random.default_rng(seed)
    params = {}

    def kaiming(shape, fan_in):
        return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)

    prev = in_channels
    for s, c in enumerate(channels):
        params[f"enc.{s}.conv_a.w"] = kaiming((c, prev, 3, 3), prev * 9)
        params[f"enc.{s}.conv_a.b"] = np.zeros(c, dtype=np.float32)
        params[f"enc.{s}.conv_b.w"] = kaiming((c, c, 3, 3), c * 9)
        params[f"enc.{s}.conv_b.b"] = np.zeros(c, dtype=np.float32)
        prev = c
    d = decoder_channels
    params["dec.lowest.w"] = kaiming((d, prev, 1, 1), prev)
    params["dec.lowest.b"] = np.zeros(d, dtype=np.float32)
    for s, c in enumerate(channels):
        params[f"dec.proj.{s}.w"] = kaiming((d, c, 1, 1), c)
        params[f"dec.proj.{s}.b"] = np.zeros(d, dtype=np.float32)
    params["dec.out.w"] = kaiming((1, d, 1, 1), d)
    params["dec.out.b"] = np.zeros(1, dtype=np.float32)
    if rotation_head:
        params["rot.w"] = kaiming((ROTATION_CLASSES, prev), prev)
        params["rot.b"] = np.zeros(ROTATION_CLASSES, dtype=np.float32)
    if n_classes:
        params["cls.w"] = kaiming((n_classes, prev), prev)
        params["cls.b"] = np.zeros(n_classes, dtype=np.float32)
    return params


def add_class_head(params, n_classes, seed):
    """Ny linjär klassificerare ovanpå en förtränad kodare (avkodare och rotationshuvud tas bort)."""
    out = {k: v.copy() for k, v in params.items() if k.startswith("enc.")}
    feat = params[f"enc.{stage_count(params) - 1}.conv_b.w"].shape[0]
    rng = np.random.default_rng(seed)
    out["cls.w"] = (rng.standard_normal((n_classes, feat)) * np.sqrt(2.0 / feat)).astype(np.float32)
    out["cls.b"] = np.zeros(n_classes, dtype=np.float32)
    return out


def encoder_forward(params, x, trace=None):
    """
    Kodaren: per steg conv3x3+ReLU, conv3x3+ReLU (ger F_s), sedan 2x medelpoolning

    Returns:
        (pyramid [F_0 .. F_{S-1}], lowest) där lowest har upplösningen H / 2**S
    """
    stages = stage_count(params)
    if x.ndim != 4:
        raise ValueError(f"Indata måste vara (N, C, H, W), fick {x.shape}")
    if x.shape[2] % (2 ** stages) or x.shape[3] % (2 ** stages):
        raise ValueError(f"H och W måste vara delbara med {2 ** stages}, fick {x.shape[2:]}")
    if x.shape[1] != params["enc.0.conv_a.w"].shape[1]:
        raise ValueError(f"Kodaren väntar {params['enc.0.conv_a.w'].shape[1]} kanaler, fick {x.shape[1]}")
    trace = trace if trace is not None else {}
    pyramid = []
    h = x
    for s in range(stages):
        a, win_a = conv2d(h, params[f"enc.{s}.conv_a.w"], params[f"enc.{s}.conv_a.b"], 1)
        ra = relu(a)
        b, win_b = conv2d(ra, params[f"enc.{s}.conv_b.w"], params[f"enc.{s}.conv_b.b"], 1)
        f = relu(b)
        trace[f"enc.{s}"] = (win_a, a, win_b, b)
        pyramid.append(f)
        h = avgpool2(f)
    return pyramid, h


def decoder_forward(params, pyramid, lowest, trace=None):
    """Avkodaren: 1x1 på lägsta nivån, sedan uppsampling + projicerad F_s + ReLU per steg, sist 1x1 + sigmoid."""
    trace = trace if trace is not None else {}
    d, win = conv2d(lowest, params["dec.lowest.w"], params["dec.lowest.b"], 0)
    trace["dec.lowest"] = win
    for s in reversed(range(len(pyramid))):
        up = upsample2(d)
        proj, win = conv2d(pyramid[s], params[f"dec.proj.{s}.w"], params[f"dec.proj.{s}.b"], 0)
        fused = up + proj
        d = relu(fused)
        trace[f"dec.proj.{s}"] = (win, fused)
    z, win = conv2d(d, params["dec.out.w"], params["dec.out.b"], 0)
    prob = sigmoid(z[:, 0])
    trace["dec.out"] = win
    return prob


def head_forward(params, lowest, name):
    pooled = lowest.mean(axis=(2, 3))
    return linear(pooled, params[f"{name}.w"], params[f"{name}.b"]), pooled


def forward(params, x, decode=True, heads=()):
    """
    Framåtpass med spår för backward

    Args:
        params: Parameterdict
        x: (N, C, H, W)
        decode: Om segmenteringskartan ska beräknas
        heads: Delmängd av ("rot", "cls")

    Returns:
        ForwardResult
    """
    trace = {"x_shape": x.shape}
    pyramid, lowest = encoder_forward(params, x, trace)
    result = ForwardResult(pyramid=pyramid, lowest=lowest, trace=trace)
    if decode:
        result.prob = decoder_forward(params, pyramid, lowest, trace)
    for name in heads:
        logits, pooled = head_forward(params, lowest, name)
        trace[f"{name}.pooled"] = pooled
        setattr(result, f"{name}_logits", logits)
    return result


def _check(name, arr):
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"Icke-ändlig gradient i {name}")
    return arr


def backward(params, result, dprob=None, drot=None, dcls=None):
    """
    Exakt bakåtpass genom de delar av nätet som framåtpasset använde

    Args:
        params: Samma parametrar som i framåtpasset
        result: ForwardResult från forward
        dprob: dL/dprob (N, H, W) eller None
        drot, dcls: dL/dlogits (N, 4) resp. (N, K) eller None

    Returns:
        dict namn -> gradient, endast för berörda parametrar

    How to modify:
    - Nya lager kräver en motsvarande gren här i omvänd ordning
    """
    trace = result.trace
    grads = {}
    stages = len(result.pyramid)
    dlowest = np.zeros_like(result.lowest)
    dpyramid = [np.zeros_like(f) for f in result.pyramid]
    hp, wp = result.lowest.shape[2:]

    for name, dlogits in (("rot", drot), ("cls", dcls)):
        if dlogits is None:
            continue
        dlogits = np.asarray(dlogits, dtype=result.lowest.dtype)
        pooled = trace[f"{name}.pooled"]
        grads[f"{name}.w"] = _check(f"{name}.w", dlogits.T @ pooled)
        grads[f"{name}.b"] = _check(f"{name}.b", dlogits.sum(axis=0))
        dpooled = dlogits @ params[f"{name}.w"]
        dlowest += dpooled[:, :, None, None] / (hp * wp)

    if dprob is not None:
        prob = result.prob
        dz = (np.asarray(dprob, dtype=prob.dtype) * prob * (1.0 - prob))[:, None]
        dd, dw, db = conv2d_backward(dz, trace["dec.out"], params["dec.out.w"], 0)
        grads["dec.out.w"], grads["dec.out.b"] = _check("dec.out.w", dw), _check("dec.out.b", db)
        for s in range(stages):
            win, fused = trace[f"dec.proj.{s}"]
            dfused = dd * (fused > 0)
            dproj_in, dw, db = conv2d_backward(dfused, win, params[f"dec.proj.{s}.w"], 0)
            grads[f"dec.proj.{s}.w"] = _check(f"dec.proj.{s}.w", dw)
            grads[f"dec.proj.{s}.b"] = _check(f"dec.proj.{s}.b", db)
            dpyramid[s] += dproj_in
            dd = upsample2_backward(dfused)
        dlow, dw, db = conv2d_backward(dd, trace["dec.lowest"], params["dec.lowest.w"], 0)
        grads["dec.lowest.w"], grads["dec.lowest.b"] = _check("dec.lowest.w", dw), _check("dec.lowest.b", db)
        dlowest += dlow

    dh = dlowest
    for s in reversed(range(stages)):
        win_a, a, win_b, b = trace[f"enc.{s}"]
        df = avgpool2_backward(dh) + dpyramid[s]
        db_pre = df * (b > 0)
        dra, dw, dbias = conv2d_backward(db_pre, win_b, params[f"enc.{s}.conv_b.w"], 1)
        grads[f"enc.{s}.conv_b.w"] = _check(f"enc.{s}.conv_b.w", dw)
        grads[f"enc.{s}.conv_b.b"] = _check(f"enc.{s}.conv_b.b", dbias)
        da = dra * (a > 0)
        dh, dw, dbias = conv2d_backward(da, win_a, params[f"enc.{s}.conv_a.w"], 1, need_dx=s > 0)
        grads[f"enc.{s}.conv_a.w"] = _check(f"enc.{s}.conv_a.w", dw)
        grads[f"enc.{s}.conv_a.b"] = _check(f"enc.{s}.conv_a.b", dbias)
    return {name: grads[name].astype(params[name].dtype) for name in params if name in grads}


# Optimering


@dataclass
class OptimizerState:
    lr: float
    base_lr: float = None
    milestones: list = field(default_factory=list)
    factor: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.base_lr is None:
            self.base_lr = self.lr


def adam_step(params, grads, state):
    """
    Ett Adam-steg för parametrarna som har en gradient; övriga lämnas orörda

    Returns:
        Samma dict med nya arrayer för de uppdaterade nycklarna
    """
    state.step += 1
    t = state.step
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"Gradient för okänd parameter {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        state.m[name] = state.beta1 * state.m[name] + (1 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1 - state.beta2) * g * g
        m_hat = state.m[name] / (1 - state.beta1 ** t)
        v_hat = state.v[name] / (1 - state.beta2 ** t)
        update = state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        params[name] = (params[name] - update).astype(params[name].dtype)
    return params


def scheduler_step(state, epoch):
    """Stegvis avtagande: lr = base_lr * factor ** (antal milstolpar <= epoch)."""
    passed = sum(1 for m in state.milestones if m <= epoch)
    state.lr = state.base_lr * state.factor ** passed
    return state


def ema_update(teacher, student, decay):
    """t <- decay * t + (1 - decay) * s, elementvis; kastar ValueError vid olika arkitektur."""
    if set(teacher) != set(student):
        raise ValueError("Lärare och elev har olika parametrar")
    out = {}
    for name, t in teacher.items():
        s = student[name]
        if t.shape != s.shape:
            raise ValueError(f"Formen skiljer sig för {name}: {t.shape} mot {s.shape}")
        out[name] = (t + (1.0 - decay) * (s - t)).astype(t.dtype)
    return out


def copy_params(params):
    return {name: arr.copy() for name, arr in params.items()}


def check_finite(params, what="parametrar"):
    for name, arr in params.items():
        if not np.all(np.isfinite(arr)):
            raise NumericalError(f"Icke-ändliga {what} i {name}")


# Kontrollpunkter


def save_checkpoint(path, params, meta=None):
    """
    Spara namngivna tensorer som npz med formatversion och metadata (JSON)

    How to modify:
    - Höj CHECKPOINT_VERSION och hantera den gamla i load_checkpoint vid formatbyte
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"__version__": np.array(CHECKPOINT_VERSION),
               "__meta__": np.array(json.dumps(meta or {}, sort_keys=True))}
    for name, arr in params.items():
        payload[name] = arr
    with open(path, "wb") as fh:
        np.savez(fh, **payload)
    return path


def load_checkpoint(path):
    """Läs en kontrollpunkt; returnerar (params, meta)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"Kontrollpunkten saknas: {path}")
    with np.load(path, allow_pickle=False) as data:
        version = int(data["__version__"]) if "__version__" in data.files else None
        if version != CHECKPOINT_VERSION:
            raise DataError(f"Okänd kontrollpunktsversion {version} i {path}")
        meta = json.loads(str(data["__meta__"]))
        params = {name: data[name] for name in data.files if not name.startswith("__")}
    return params, meta
