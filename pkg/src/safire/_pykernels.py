"""Vectorised numpy/scipy versions of the hot kernels.

Used when the compiled extension is unavailable. Output is identical to
``safire._ckernels``.
"""
import numpy as np
from scipy import ndimage
from scipy.special import expit, log_expit, logsumexp

_FOUR = ndimage.generate_binary_structure(2, 1)


def label_components(mask):
    mask = np.asarray(mask, dtype=np.uint8)
    ones, n1 = ndimage.label(mask == 1, structure=_FOUR)
    zeros, n0 = ndimage.label(mask == 0, structure=_FOUR)
    # zero components take ids n1+1..n1+n0; background of each labelling is 0
    raw = np.where(mask == 1, ones, zeros + n1).ravel() - 1
    count = n0 + n1
    first = np.full(count, raw.size, dtype=np.int64)
    np.minimum.at(first, raw, np.arange(raw.size))
    order = np.argsort(first, kind="stable")
    remap = np.empty(count, dtype=np.int32)
    remap[order] = np.arange(count, dtype=np.int32)
    labels = remap[raw].reshape(mask.shape)
    values = mask.ravel()[first[order]].astype(np.uint8)
    return labels, int(count), values


def adjacency_pairs(labels):
    labels = np.asarray(labels, dtype=np.int32)
    pieces = [
        (labels[:, :-1], labels[:, 1:]),
        (labels[:-1, 1:], labels[1:, :-1]),
        (labels[:-1, :], labels[1:, :]),
        (labels[:-1, :-1], labels[1:, 1:]),
    ]
    a = np.concatenate([p[0].ravel() for p in pieces])
    b = np.concatenate([p[1].ravel() for p in pieces])
    keep = a != b
    if not keep.any():
        return np.empty((0, 2), dtype=np.int32)
    lo = np.minimum(a[keep], b[keep]).astype(np.int64)
    hi = np.maximum(a[keep], b[keep]).astype(np.int64)
    n = int(hi.max()) + 1
    keys = np.unique(lo * n + hi)
    return np.stack([keys // n, keys % n], axis=1).astype(np.int32)


def majority_downsample(labels, k, n_labels):
    labels = np.asarray(labels)
    h, w = labels.shape[0] // k, labels.shape[1] // k
    cells = labels[: h * k, : w * k].reshape(h, k, w, k).transpose(0, 2, 1, 3).reshape(h * w, k * k)
    counts = np.zeros((h * w, n_labels), dtype=np.int64)
    np.add.at(counts, (np.repeat(np.arange(h * w), k * k), cells.ravel()), 1)
    # argmax returns the first maximum, i.e. the smaller label on ties
    return counts.argmax(axis=1).astype(np.int32).reshape(h, w)


def r2r_anchor_loss(sim, region, size, tau):
    sim = np.asarray(sim, dtype=np.float64)
    region = np.asarray(region)
    size = np.asarray(size, dtype=np.float64)
    anchors = size >= 2
    n_anchor = int(anchors.sum())
    if n_anchor == 0:
        return None
    same = region[:, None] == region[None, :]
    pos = (np.where(same, sim, 0.0).sum(1) - np.diag(sim)) / np.maximum(size - 1, 1) / tau
    logits = np.concatenate([pos[:, None], np.where(same, -np.inf, sim / tau)], axis=1)
    lse = logsumexp(logits, axis=1)
    loss = float((lse - pos)[anchors].sum() / n_anchor)
    soft = np.exp(logits - lse[:, None])  # column 0 is the positive
    d_sim = np.where(same, ((soft[:, 0] - 1.0) / (tau * np.maximum(size - 1, 1)))[:, None], 0.0)
    np.fill_diagonal(d_sim, 0.0)
    d_sim += np.where(same, 0.0, soft[:, 1:] / tau)
    d_sim *= (anchors / n_anchor)[:, None]
    return loss, d_sim


def aass_fused(x, yp, w1, w0):
    x = np.asarray(x, dtype=np.float64)
    yp = np.asarray(yp)
    pos = yp == 1
    neg = yp == 0
    total = -(w1 * log_expit(x[pos]).sum() + w0 * log_expit(-x[neg]).sum())
    sig = expit(x)
    grad = np.zeros_like(x)
    grad[pos] = -w1 * (1.0 - sig[pos])
    grad[neg] = w0 * sig[neg]
    correct = int(np.count_nonzero(x[pos] > 0) + np.count_nonzero(x[neg] <= 0))
    return float(total), grad, correct, int(pos.sum() + neg.sum())
