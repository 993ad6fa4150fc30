"""
Training losses for pseudo-mask distillation and soft-label tuning.
Every loss returns (value, gradient) with the gradient taken analytically with respect
to the probabilities or logits it is given.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.special import log_softmax, softmax

from imgcore import geometric_operator

logger = logging.getLogger(__name__)

EPS = 1e-7


@dataclass(frozen=True)
class SoftLabel:
    c1: int
    c2: int
    consensus: bool
    lam: float = 0.85

    def __post_init__(self):
        if self.consensus != (self.c1 == self.c2):
            raise ValueError(f"Inkonsekvent mjuk etikett: c1={self.c1}, c2={self.c2}, consensus={self.consensus}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda måste ligga i [0, 1]")

    @classmethod
    def agreed(cls, c, lam=0.85):
        return cls(c1=int(c), c2=int(c), consensus=True, lam=lam)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or (self.alpha == 0 and self.beta == 0):
            raise ValueError("alpha och beta måste vara >= 0 och inte båda noll")


def clamp(p):
    return np.clip(p, EPS, 1.0 - EPS)


def seg_partial_ce(pred, hierarchy):
    """
    Partiell korsentropi mot en maskhierarki

    Säkra pixlar är M0 (förgrund) och komplementet till yttersta lagret (bakgrund);
    ringpixlarna däremellan ignoreras. Normeras med totala antalet pixlar.

    Returns:
        (förlust, gradient med samma form som pred)
    """
    pred = np.asarray(pred, dtype=np.float64)
    core = hierarchy.core
    if pred.shape != core.shape:
        raise ValueError(f"Formerna skiljer sig: {pred.shape} mot {core.shape}")
    background = ~hierarchy.outer
    grad = np.zeros_like(pred)
    if not (core.any() or background.any()):
        logger.warning("Inga säkra pixlar, segmenteringsförlusten sätts till 0")
        return 0.0, grad
    n = pred.size
    p = clamp(pred)
    loss = -(np.log(p[core]).sum() + np.log1p(-p[background]).sum()) / n
    grad[core] = -1.0 / (p[core] * n)
    grad[background] = 1.0 / ((1.0 - p[background]) * n)
    return float(loss), grad


def _inverse_operator(shape, record):
    if record.check().geometric_identity:
        size = shape[0] * shape[1]
        return sparse.identity(size, format="csr"), np.ones(shape, dtype=bool)
    return geometric_operator(shape, record, inverse=True, interp="bilinear")


def consistency(student, teacher, r1, r2):
    """
    Medelkvadratfel mellan elevens och lärarens kartor efter invertering till originalramen

    Medel tas över snittet av giltighetsmaskerna. Gradienten går bara till eleven och
    förs tillbaka genom inversens adjunkt.

    Returns:
        (förlust, gradient med avseende på student)
    """
    student = np.asarray(student, dtype=np.float64)
    teacher = np.asarray(teacher, dtype=np.float64)
    shape = student.shape
    op1, valid1 = _inverse_operator(shape, r1)
    op2, valid2 = _inverse_operator(shape, r2)
    valid = (valid1 & valid2).ravel()
    n = int(valid.sum())
    if n == 0:
        logger.warning("Tomt giltighetssnitt, konsistensförlusten sätts till 0")
        return 0.0, np.zeros(shape)
    diff = (op1 @ student.ravel() - op2 @ teacher.ravel()) * valid
    loss = float(np.dot(diff, diff) / n)
    grad = op1.T @ (2.0 * diff / n)
    return loss, np.asarray(grad).reshape(shape)


def rotation_ce(logits, target):
    """Softmax-korsentropi över fyra rotationsklasser; gradient = softmax - onehot."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape != (4,) or target not in (0, 1, 2, 3):
        raise ValueError("rotation_ce kräver 4 logits och mål i {0, 1, 2, 3}")
    logp = log_softmax(logits)
    grad = np.exp(logp)
    grad[target] -= 1.0
    return float(-logp[target]), grad


def soft_ce(probs, label):
    """
    Mjuk korsentropi för majoritets- och minoritetsklass

    L = -(lam * log p_c1 + (1 - lam) * log p_c2); vid konsensus L = -log p_c1.
    """
    probs = np.asarray(probs, dtype=np.float64)
    p = clamp(probs)
    grad = np.zeros_like(p)
    if label.consensus:
        grad[label.c1] = -1.0 / p[label.c1]
        return float(-np.log(p[label.c1])), grad
    lam = label.lam
    loss = -(lam * np.log(p[label.c1]) + (1.0 - lam) * np.log(p[label.c2]))
    grad[label.c1] = -lam / p[label.c1]
    grad[label.c2] = -(1.0 - lam) / p[label.c2]
    return float(loss), grad


def soft_target(label, n_classes):
    """Målfördelning q för en mjuk etikett: onehot vid konsensus, annars lam/(1-lam)."""
    q = np.zeros(n_classes)
    if label.consensus:
        q[label.c1] = 1.0
    else:
        q[label.c1] = label.lam
        q[label.c2] = 1.0 - label.lam
    return q


def soft_ce_logits(logits, targets):
    """
    Batchad mjuk korsentropi direkt på logits

    Args:
        logits: (N, K)
        targets: (N, K) målfördelningar (rader summerar till 1)

    Returns:
        (medelförlust, gradient (N, K) = (softmax - q) / N)
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if logits.shape != targets.shape:
        raise ValueError(f"Formerna skiljer sig: {logits.shape} mot {targets.shape}")
    n = logits.shape[0]
    logp = log_softmax(logits, axis=1)
    loss = -np.sum(targets * logp) / n
    grad = (softmax(logits, axis=1) - targets) / n
    return float(loss), grad


def onehot(indices, n_classes):
    out = np.zeros((len(indices), n_classes))
    out[np.arange(len(indices)), np.asarray(indices, dtype=np.int64)] = 1.0
    return out


def fine_total(seg, con, weights):
    return weights.alpha * seg + weights.beta * con
