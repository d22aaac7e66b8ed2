"""Region-to-region contrastive, area-adaptive BCE and confidence losses.

Values are computed in float64. Functions with a ``_grad`` suffix also
return the derivative with respect to their network-facing input.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit, logsumexp

from . import kernels
from .core import K

TAU = 0.1
C_AASS = 10.0
LAMBDA_CONF = 0.1


@dataclass(frozen=True)
class LossSpec:
    mode: str = "train"  # "pretrain" | "train" | "plain"
    tau: float = TAU
    c_max: float = C_AASS
    lambda_conf: float = LAMBDA_CONF
    normalize_embeddings: bool = True


def info_nce(q, p, negatives, tau: float = TAU) -> float:
    """-log(exp(q.p/tau) / (exp(q.p/tau) + sum_n exp(q.n/tau)))."""
    negatives = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
    if negatives.size == 0:
        raise ValueError("info_nce needs at least one negative")
    if tau <= 0:
        raise ValueError("tau must be positive")
    q = np.asarray(q, dtype=np.float64)
    pos = float(q @ np.asarray(p, dtype=np.float64)) / tau
    logits = np.concatenate([[pos], negatives @ q / tau])
    return float(logsumexp(logits) - pos)


def downsample_partition(part: np.ndarray, k: int = K) -> np.ndarray:
    """Majority label of every k x k cell; ties go to the smaller label."""
    part = np.ascontiguousarray(part, dtype=np.int32)
    h, w = part.shape
    if h % k or w % k:
        raise ValueError(f"partition {h}x{w} not divisible by {k}")
    return kernels.majority_downsample(part, k, int(part.max()) + 1)


def _normalize(e: np.ndarray):
    norm = np.sqrt(np.sum(e * e, axis=1, keepdims=True))
    return e / norm, norm


def r2r_loss_grad(emb: np.ndarray, cell_labels: np.ndarray, tau: float = TAU,
                  normalize: bool = True):
    """Region-to-region InfoNCE over cells and its gradient.

    ``emb`` is ``(n_cells, V)``. Every cell whose region holds at least two
    cells is an anchor; its positive is the mean of the other cells of its
    region and its negatives are all cells of other regions. Returns
    ``(loss, d_emb)`` or ``None`` when fewer than two regions are present.
    """
    emb = np.asarray(emb, dtype=np.float64)
    labels = np.asarray(cell_labels).ravel()
    uniq, inv, counts = np.unique(labels, return_inverse=True, return_counts=True)
    if uniq.size < 2:
        return None
    u, norm = _normalize(emb) if normalize else (emb, None)
    out = kernels.r2r_anchor_loss(np.ascontiguousarray(u @ u.T), np.ascontiguousarray(inv, dtype=np.intp),
                                  np.ascontiguousarray(counts[inv], dtype=np.intp), float(tau))
    if out is None:
        return None
    loss, d_sim = out
    d_u = (d_sim + d_sim.T) @ u
    if normalize:
        d_emb = (d_u - u * np.sum(u * d_u, axis=1, keepdims=True)) / norm
    else:
        d_emb = d_u
    return float(loss), d_emb


def r2r_loss(emb: np.ndarray, cell_labels: np.ndarray, tau: float = TAU,
             normalize: bool = True):
    """Loss value only; ``None`` signals a single-region batch (skip)."""
    out = r2r_loss_grad(emb, cell_labels, tau, normalize)
    return None if out is None else out[0]


def bin_map(x: np.ndarray) -> np.ndarray:
    return (np.asarray(x) > 0).astype(np.uint8)


def aass_weights(yp: np.ndarray, c_max: float = C_AASS) -> tuple[float, float]:
    """``(w1, w0)``; a class absent from ``yp`` gets weight 0."""
    yp = np.asarray(yp)
    n1 = int(np.count_nonzero(yp == 1))
    n0 = int(np.count_nonzero(yp == 0))
    valid = n0 + n1
    if valid == 0:
        raise ValueError("point mask has no valid pixels")
    w1 = min(valid / n1, c_max) if n1 else 0.0
    w0 = min(valid / n0, c_max) if n0 else 0.0
    return w1, w0


def aass_terms(x: np.ndarray, yp: np.ndarray, c_max: float = C_AASS):
    """``(loss, d_loss/d_x, accuracy)`` of the area-adaptive BCE in one pass."""
    if c_max < 1:
        raise ValueError("c_max must be >= 1")
    shape = np.shape(x)
    yp = np.ascontiguousarray(yp, dtype=np.int8).reshape(-1, shape[-1] if shape else 1)
    w1, w0 = aass_weights(yp, c_max)
    total, grad, correct, valid = kernels.aass_fused(
        np.ascontiguousarray(x, dtype=np.float64).reshape(yp.shape), yp, w1, w0)
    grad /= valid
    return total / valid, grad.reshape(shape), correct / valid


def aass_loss_grad(x: np.ndarray, yp: np.ndarray, c_max: float = C_AASS):
    """Area-adaptive weighted BCE over non-ignored pixels and d/dx."""
    loss, grad, _ = aass_terms(x, yp, c_max)
    return loss, grad


def aass_loss(x, yp, c_max: float = C_AASS) -> float:
    return aass_loss_grad(x, yp, c_max)[0]


def pixel_accuracy(x: np.ndarray, yp: np.ndarray) -> float:
    yp = np.asarray(yp)
    valid = yp >= 0
    n = int(valid.sum())
    if n == 0:
        raise ValueError("point mask has no valid pixels")
    return float(np.count_nonzero(bin_map(x)[valid] == yp[valid]) / n)


def confidence_loss(x, yp, s: float, acc: float | None = None) -> float:
    """Squared gap between predicted confidence and actual valid-pixel accuracy."""
    if acc is None:
        acc = pixel_accuracy(x, yp)
    return float((acc - s) ** 2)


def total_loss(x, yp, s: float, lambda_conf: float = LAMBDA_CONF, c_max: float = C_AASS) -> float:
    return aass_loss(x, yp, c_max) + lambda_conf * confidence_loss(x, yp, s)


def bce_loss_grad(x: np.ndarray, y: np.ndarray):
    """Plain mean binary cross-entropy (baseline segmenter)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    loss = -np.mean(y * log_expit(x) + (1 - y) * log_expit(-x))
    return float(loss), (expit(x) - y) / x.size
