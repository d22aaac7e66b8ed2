"""Orientation-free localization metrics and the robustness harness.

Scores that involve ratios of pixel counts are accumulated as exact
fractions so that the assignment solver and the exhaustive oracle agree
to the last bit.
"""
from __future__ import annotations

import itertools
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from math import comb
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import synth
from .core import derive_seed, read_image_png, read_mask_png, rng

THRESHOLDS = np.arange(1, 256) / 256.0


def _check_pair(y: np.ndarray, x: np.ndarray) -> None:
    if y.shape != x.shape:
        raise ValueError(f"shape mismatch: ground truth {y.shape} vs prediction {x.shape}")


def _f1_counts(tp: int, fp: int, fn: int) -> float:
    if tp + fp + fn == 0:
        return 1.0
    return 2.0 * tp / (2 * tp + fp + fn)


def f1(y, x, t: float = 0.5) -> float:
    """F1 of the positive class after thresholding ``x > t``."""
    y = np.asarray(y).astype(bool)
    x = np.asarray(x, dtype=np.float64)
    _check_pair(y, x)
    pred = x > t
    tp = int(np.count_nonzero(pred & y))
    fp = int(np.count_nonzero(pred & ~y))
    fn = int(np.count_nonzero(~pred & y))
    return _f1_counts(tp, fp, fn)


def permuted_f1(y, x, t: float = 0.5) -> float:
    x = np.asarray(x, dtype=np.float64)
    return max(f1(y, x, t), f1(y, 1.0 - x, t))


def permuted_f1_fixed(y, x) -> float:
    return permuted_f1(y, x, 0.5)


def permuted_f1_best(y, x, thresholds=THRESHOLDS) -> float:
    """Best permuted F1 over a threshold sweep.

    Counts for every threshold come from one sort of the scores, so the
    sweep is O(n log n) rather than O(n * thresholds).
    """
    y = np.asarray(y).astype(bool).ravel()
    x = np.asarray(x, dtype=np.float64).ravel()
    _check_pair(y, x)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    n_pos = int(y.sum())
    best = 0.0
    for scores in (x, 1.0 - x):
        order = np.argsort(scores, kind="stable")
        s = scores[order]
        pos_cum = np.concatenate([[0], np.cumsum(y[order])])
        # pixels with score <= t are predicted negative
        k = np.searchsorted(s, thresholds, side="right")
        fn = pos_cum[k]
        tp = n_pos - fn
        fp = (s.size - k) - tp
        for a, b, c in zip(tp.tolist(), fp.tolist(), fn.tolist()):
            best = max(best, _f1_counts(a, b, c))
    return best


def _contingency(y: np.ndarray, x: np.ndarray):
    _, yi = np.unique(y.ravel(), return_inverse=True)
    _, xi = np.unique(x.ravel(), return_inverse=True)
    n, m = int(yi.max()) + 1, int(xi.max()) + 1
    table = np.zeros((n, m), dtype=np.int64)
    np.add.at(table, (yi, xi), 1)
    return table


def _kept_columns(table: np.ndarray) -> np.ndarray:
    """Predicted labels eligible for matching: the N largest when there are too many."""
    n, m = table.shape
    if m <= n:
        return np.arange(m)
    sizes = table.sum(axis=0)
    order = np.lexsort((np.arange(m), -sizes))  # larger first, then lower label
    return np.sort(order[:n])


def _iou_fractions(table: np.ndarray, cols: np.ndarray):
    gt = table.sum(axis=1)
    pred = table.sum(axis=0)
    return [[Fraction(int(table[i, j]), int(gt[i] + pred[j] - table[i, j])) for j in cols]
            for i in range(table.shape[0])]


def permuted_miou(y, x) -> float:
    """Mean IoU over ground-truth classes under the best injective relabelling."""
    y = np.asarray(y)
    x = np.asarray(x)
    _check_pair(y, x)
    table = _contingency(y, x)
    cols = _kept_columns(table)
    iou = _iou_fractions(table, cols)
    approx = np.array([[float(v) for v in row] for row in iou])
    rows, assigned = linear_sum_assignment(approx, maximize=True)
    total = sum((iou[r][c] for r, c in zip(rows, assigned)), Fraction(0))
    return float(total / table.shape[0])


def brute_force_pmiou(y, x) -> float:
    """Exhaustive maximum over injective assignments (small label counts only)."""
    y = np.asarray(y)
    x = np.asarray(x)
    _check_pair(y, x)
    table = _contingency(y, x)
    n = table.shape[0]
    cols = _kept_columns(table)
    if max(n, cols.size) > 6:
        raise ValueError("brute force limited to 6 labels")
    iou = _iou_fractions(table, cols)
    best = Fraction(0)
    if cols.size >= n:
        for perm in itertools.permutations(range(cols.size), n):
            best = max(best, sum((iou[i][perm[i]] for i in range(n)), Fraction(0)))
    else:
        for perm in itertools.permutations(range(n), cols.size):
            best = max(best, sum((iou[perm[j]][j] for j in range(cols.size)), Fraction(0)))
    return float(best / n)


def ari(y, x) -> float:
    """Adjusted Rand index between two pixel partitions.

    Two single-cluster partitions count as perfect agreement (1.0).
    """
    y = np.asarray(y)
    x = np.asarray(x)
    _check_pair(y, x)
    table = _contingency(y, x)
    n = int(table.sum())
    index = sum(comb(int(v), 2) for v in table.ravel())
    a = sum(comb(int(v), 2) for v in table.sum(axis=1))
    b = sum(comb(int(v), 2) for v in table.sum(axis=0))
    total = comb(n, 2)
    if total == 0:
        return 1.0
    expected = Fraction(a * b, total)
    maximum = Fraction(a + b, 2)
    if maximum == expected:
        return 1.0
    return float((index - expected) / (maximum - expected))


# -- robustness ------------------------------------------------------------------

TRANSFORMS = ("blur", "noise", "jpeg", "gamma")


def apply_transform(img: np.ndarray, transform: str, level: float, seed: int = 0) -> np.ndarray:
    if transform == "blur":
        return synth.gaussian_blur(img, float(level))
    if transform == "noise":
        return synth.add_noise(img, float(level), rng(seed, 0x4E))
    if transform == "jpeg":
        return synth.jpeg_roundtrip(img, int(level))
    if transform == "gamma":
        return synth.adjust_gamma(img, float(level))
    raise ValueError(f"unknown transform {transform!r}; choose from {TRANSFORMS}")


@dataclass
class RobustnessRow:
    transform: str
    level: float
    score: float
    n_images: int


def _robust_one(args):
    from .inference import InferOptions, infer

    params, img_path, mask_path, transform, level, seed, opts = args
    img = read_image_png(img_path)
    y = read_mask_png(mask_path)
    if transform is not None:
        img = apply_transform(img, transform, level, seed)
    return permuted_f1_fixed(y, infer(params, img, opts).heatmap)


def _pairs(data_dir):
    root = Path(data_dir)
    imgs = sorted((root / "images").glob("*.png"))
    if not imgs:
        raise FileNotFoundError(f"{root}: no images found")
    return [(p, root / "binary" / p.name) for p in imgs]


def robustness_report(params, data_dir, transform: str, levels, seed: int = 0, jobs: int = 1,
                      opts=None) -> list[RobustnessRow]:
    """Mean permuted F1 (fixed) of binary inference under each perturbation level."""
    from .inference import InferOptions

    if transform not in TRANSFORMS:
        raise ValueError(f"unknown transform {transform!r}; choose from {TRANSFORMS}")
    opts = opts or InferOptions(mode="binary", seed=seed)
    pairs = _pairs(data_dir)
    rows = []
    for level in levels:
        tasks = [(params, ip, mp, transform, level, derive_seed(seed, i), opts)
                 for i, (ip, mp) in enumerate(pairs)]
        scores = _map(_robust_one, tasks, jobs)
        rows.append(RobustnessRow(transform, level, float(np.mean(scores)), len(scores)))
    return rows


def unperturbed_score(params, data_dir, seed: int = 0, jobs: int = 1, opts=None) -> float:
    from .inference import InferOptions

    opts = opts or InferOptions(mode="binary", seed=seed)
    tasks = [(params, ip, mp, None, None, 0, opts) for ip, mp in _pairs(data_dir)]
    return float(np.mean(_map(_robust_one, tasks, jobs)))


def _map(fn, tasks, jobs: int):
    if jobs <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, tasks))


def write_report_csv(path, rows: list[RobustnessRow]) -> None:
    lines = ["transform,level,score,n_images"]
    lines += [f"{r.transform},{r.level},{r.score!r},{r.n_images}" for r in rows]
    Path(path).write_text("\n".join(lines) + "\n")
