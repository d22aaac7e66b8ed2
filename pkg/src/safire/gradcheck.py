"""Central finite-difference check of the analytic training gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import PointPrompt, rng
from .losses import LossSpec
from .maskops import point_mask
from .net import (TRAINABLE, ModelParams, PlainItem, PretrainItem, PromptItem, init_params,
                  loss_and_gradients, loss_value)


@dataclass
class GradcheckResult:
    mode: str
    loss: float
    max_rel_error: float
    n_coords: int
    inert_max_abs: float = 0.0  # largest analytic gradient on INERT parameters


# per-image centring of the embedding grid cancels any constant added after
# the last convolution, so this bias has an identically zero gradient and a
# relative error against finite-difference noise is meaningless
INERT = ("enc.conv3.b",)


def toy_sample(seed: int, size: int = 32):
    """Smooth image with one noisier rectangle, plus its partition."""
    g = rng(seed, 0x6C)
    yy, xx = np.mgrid[0:size, 0:size] / size
    base = np.stack([0.3 + 0.3 * xx, 0.4 + 0.2 * yy, 0.5 + 0.1 * xx * yy], -1)
    part = np.zeros((size, size), np.int32)
    q = size // 4
    part[q:3 * q, q // 2:q // 2 + 2 * q] = 1
    img = np.clip(base + (part[..., None] == 1) * g.normal(0, 0.06, base.shape), 0, 1)
    return img, part


def check_batch(params: ModelParams, batch, spec: LossSpec, n_coords: int = 100,
                eps: float = 1e-4, seed: int = 0) -> GradcheckResult:
    loss, grads, accs = loss_and_gradients(params, batch, spec, return_accs=True)
    accs = accs or None  # the accuracy target is held fixed while probing
    trainable = params.group_mask(TRAINABLE[spec.mode])
    inert = np.zeros(params.size, dtype=bool)
    for name in INERT:
        start, shape, _ = params.index[name]
        inert[start:start + int(np.prod(shape))] = True
    idx = np.flatnonzero(trainable & ~inert)
    sel = rng(seed, 0x6D).choice(idx, min(n_coords, idx.size), replace=False)
    # rounding in a central difference is about eps_mach * |loss| / eps; below
    # a generous multiple of that the relative error measures noise, not the
    # gradient, so the denominator never drops under it
    floor = 1e5 * np.finfo(float).eps * max(abs(loss), 1.0) / eps
    worst = 0.0
    for i in sel:
        q = params.copy()
        q.values[i] += eps
        lp = loss_value(q, batch, spec, accs)
        q.values[i] -= 2 * eps
        lm = loss_value(q, batch, spec, accs)
        fd = (lp - lm) / (2 * eps)
        worst = max(worst, abs(fd - grads[i]) / max(abs(fd), abs(grads[i]), floor))
    inert_max = float(np.max(np.abs(grads[trainable & inert]), initial=0.0))
    return GradcheckResult(spec.mode, float(loss), float(worst), int(sel.size), inert_max)


def run(seed: int = 0, n_coords: int = 100, eps: float = 1e-4, size: int = 32) -> list[GradcheckResult]:
    """Check pretraining, prompted training and the plain baseline on a toy sample."""
    params = init_params(seed)
    img, part = toy_sample(seed, size)
    mask = (part > 0).astype(np.uint8)
    pts = [PointPrompt(3, 3), PointPrompt(size * 3 // 8, size * 5 // 16)]
    batches = [
        ([PretrainItem(img, part)], LossSpec(mode="pretrain")),
        ([PromptItem(pts, [point_mask(mask, p) for p in pts], image=img)], LossSpec(mode="train")),
        ([PlainItem(mask, image=img)], LossSpec(mode="plain")),
    ]
    return [check_batch(params, b, s, n_coords, eps, seed) for b, s in batches]
