"""Grid-prompt inference and clustering-based aggregation."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .core import K, PointPrompt, check_image, relabel_partition, rng
from .net import ModelParams, decode, decode_plain, downsample_matrix, encode_image, encode_prompt

DBSCAN_EPS = 0.3
DBSCAN_MIN_PTS = 3
KMEANS_RESTARTS = 10
KMEANS_ITERS = 100


@dataclass(frozen=True)
class ClusterAssignment:
    labels: np.ndarray  # per-prompt cluster index 0..M-1
    m: int
    method: str

    def sizes(self) -> list[int]:
        return np.bincount(self.labels, minlength=self.m).tolist()


@dataclass
class InferOptions:
    grid: int = 16
    mode: str = "binary"  # "binary" | "multi"
    m: int | None = None
    cluster: str = "kmeans"  # "kmeans" | "dbscan"
    eps: float = DBSCAN_EPS
    min_pts: int = DBSCAN_MIN_PTS
    seed: int = 0


@dataclass
class InferResult:
    heatmap: np.ndarray | None
    partition: np.ndarray | None
    soft: np.ndarray | None
    m: int
    confidences: list[float]
    selected: list[int]
    fallback: list[bool]
    cluster_sizes: list[int]
    labels: np.ndarray = field(repr=False, default=None)

    def sidecar(self) -> dict:
        return {"M": self.m, "confidences": self.confidences, "selected": self.selected,
                "fallback": self.fallback, "cluster_sizes": self.cluster_sizes,
                "cluster_labels": None if self.labels is None else self.labels.tolist()}


def grid_prompts(h: int, w: int, g: int = 16) -> list[PointPrompt]:
    """``g x g`` cell-centre points in raster order."""
    if g < 1:
        raise ValueError("grid side must be >= 1")
    rows = [int(np.floor((i + 0.5) * h / g)) for i in range(g)]
    cols = [int(np.floor((j + 0.5) * w / g)) for j in range(g)]
    return [PointPrompt(r, c) for r in rows for c in cols]


def downsample_logits(x: np.ndarray, hc: int, wc: int) -> np.ndarray:
    return downsample_matrix(hc, x.shape[0] // hc) @ x @ downsample_matrix(wc, x.shape[1] // wc).T


def representative_feature(grid: np.ndarray, x: np.ndarray, prompt: PointPrompt | None = None):
    """Mean embedding over the cells a prediction selects.

    Returns ``(feature, fallback)``. When no cell is selected the feature is
    the embedding of the prompt's own cell and ``fallback`` is True.
    """
    v, hc, wc = grid.shape
    if x.shape != (hc * K, wc * K):
        raise ValueError(f"prediction {x.shape} does not match grid {grid.shape}")
    sel = downsample_logits(np.asarray(x, dtype=np.float64), hc, wc) > 0
    cells = grid.reshape(v, -1)
    if sel.any():
        return cells[:, sel.ravel()].mean(axis=1), False
    if prompt is None:
        raise ValueError("prediction selects no cell and no prompt was given for the fallback")
    return grid[:, prompt.row // K, prompt.col // K].copy(), True


def _compact(labels: np.ndarray) -> tuple[np.ndarray, int]:
    lab = relabel_partition(labels.reshape(1, -1)).ravel()
    return lab, int(lab.max()) + 1 if lab.size else 0


def _kmeans_pp(x: np.ndarray, m: int, g: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[g.integers(n)]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, m):
        total = d2.sum()
        idx = g.integers(n) if total <= 0 else g.choice(n, p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centers)


def _lloyd(x: np.ndarray, centers: np.ndarray):
    for _ in range(KMEANS_ITERS):
        dist = ((x[:, None, :] - centers[None]) ** 2).sum(-1)
        labels = dist.argmin(axis=1)
        new = centers.copy()
        for k in range(centers.shape[0]):
            members = labels == k
            if members.any():
                new[k] = x[members].mean(axis=0)
            else:
                # re-seed an empty cluster at the point worst served by its centre
                far = dist[np.arange(x.shape[0]), labels].argmax()
                new[k] = x[far]
        if np.array_equal(new, centers):
            break
        centers = new
    dist = ((x[:, None, :] - centers[None]) ** 2).sum(-1)
    labels = dist.argmin(axis=1)
    return labels, float(dist[np.arange(x.shape[0]), labels].sum())


def kmeans(features, m: int, seed: int = 0) -> ClusterAssignment:
    """k-means++ with fixed restarts and iteration cap; lowest inertia wins."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("kmeans needs a non-empty (n, d) feature array")
    if m < 1:
        raise ValueError("m must be >= 1")
    if x.shape[0] < m:
        raise ValueError(f"{x.shape[0]} features cannot form {m} clusters")
    distinct = np.unique(x, axis=0).shape[0]
    if distinct < m:
        warnings.warn(f"only {distinct} distinct features; reducing clusters from {m}", RuntimeWarning)
        m = distinct
    if m == 1:
        return ClusterAssignment(np.zeros(x.shape[0], dtype=np.int64), 1, "kmeans")
    best = None
    for restart in range(KMEANS_RESTARTS):
        g = rng(seed, 0x4B4D, restart)
        labels, inertia = _lloyd(x, _kmeans_pp(x, m, g))
        if best is None or inertia < best[1]:
            best = (labels, inertia)
    labels, count = _compact(best[0])
    return ClusterAssignment(labels, count, "kmeans")


def dbscan(features, eps: float = DBSCAN_EPS, min_pts: int = DBSCAN_MIN_PTS) -> ClusterAssignment:
    """Density clustering on L2-normalised features.

    Noise points join the cluster of their nearest core point; if there is
    no core point at all everything forms one cluster.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("dbscan needs a non-empty (n, d) feature array")
    x = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
    n = x.shape[0]
    dist = np.sqrt(np.maximum(((x[:, None, :] - x[None]) ** 2).sum(-1), 0.0))
    near = dist <= eps
    core = near.sum(axis=1) >= min_pts
    labels = np.full(n, -1, dtype=np.int64)
    if not core.any():
        return ClusterAssignment(np.zeros(n, dtype=np.int64), 1, "dbscan")
    cur = 0
    for i in range(n):
        if not core[i] or labels[i] >= 0:
            continue
        labels[i] = cur
        stack = [i]
        while stack:
            p = stack.pop()
            for q in np.flatnonzero(near[p]):
                if labels[q] < 0:
                    labels[q] = cur
                    if core[q]:
                        stack.append(q)
        cur += 1
    noise = np.flatnonzero(labels < 0)
    if noise.size:
        core_idx = np.flatnonzero(core)
        nearest = core_idx[dist[np.ix_(noise, core_idx)].argmin(axis=1)]
        labels[noise] = labels[nearest]
    labels, count = _compact(labels)
    return ClusterAssignment(labels, count, "dbscan")


def select_confident(assign: ClusterAssignment, confidences) -> list[int]:
    """Index of the most confident prompt in every cluster (ties: lowest index)."""
    conf = np.asarray(confidences, dtype=np.float64)
    out = []
    for k in range(assign.m):
        members = np.flatnonzero(assign.labels == k)
        out.append(int(members[np.argmax(conf[members])]))
    return out


def combine_binary(x_a: np.ndarray, x_b: np.ndarray) -> np.ndarray:
    """Average of one map's sigmoid and the complement of the other's."""
    # sigma(-x) in place of 1 - sigma(x): exact when x_b = -x_a, no cancellation
    return 0.5 * (expit(x_a) + expit(-np.asarray(x_b)))


def combine_softmax(maps) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel softmax across maps; hard labels by argmax (ties: lowest index)."""
    stack = np.asarray(maps, dtype=np.float64)
    if stack.ndim != 3 or stack.shape[0] < 2:
        raise ValueError("combine_softmax needs at least two maps")
    shifted = np.exp(stack - stack.max(axis=0, keepdims=True))
    soft = shifted / shifted.sum(axis=0, keepdims=True)
    return np.argmax(stack, axis=0).astype(np.int32), soft


def _two_largest(assign: ClusterAssignment) -> ClusterAssignment:
    sizes = np.bincount(assign.labels, minlength=assign.m)
    keep = np.argsort(-sizes, kind="stable")[:2]
    # members of the other clusters join the kept cluster with the nearer id order
    labels = np.where(assign.labels == keep[1], 1, 0)
    return ClusterAssignment(labels, 2, assign.method)


def infer(params: ModelParams, img: np.ndarray, opts: InferOptions | None = None) -> InferResult:
    opts = opts or InferOptions()
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] % K or img.shape[1] % K:
        raise ValueError(f"image dims {img.shape[:2]} must be multiples of {K}; pad before inference")
    img = check_image(img)
    h, w = img.shape[:2]
    grid = encode_image(params, img)
    prompts = grid_prompts(h, w, opts.grid)
    outs = decode(params, grid, [encode_prompt(params, p, h, w) for p in prompts])
    maps = [o[0] for o in outs]
    confs = [float(o[1]) for o in outs]
    feats, flags = zip(*(representative_feature(grid, x, p) for x, p in zip(maps, prompts)))
    feats = np.array(feats)

    if opts.cluster == "kmeans":
        m = opts.m if opts.m is not None else 2
        if opts.mode == "binary":
            m = 2
        m = min(m, len(prompts))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            assign = kmeans(feats, m, opts.seed)
    elif opts.cluster == "dbscan":
        assign = dbscan(feats, opts.eps, opts.min_pts)
        if opts.mode == "binary" and assign.m > 2:
            assign = _two_largest(assign)
    else:
        raise ValueError(f"unknown clustering method {opts.cluster!r}")

    selected = select_confident(assign, confs)
    heatmap = partition = soft = None
    if opts.mode == "binary":
        if assign.m == 1:
            heatmap = expit(maps[selected[0]])
        else:
            a, b = selected
            if np.count_nonzero(maps[b] > 0) < np.count_nonzero(maps[a] > 0):
                a, b = b, a
            heatmap = combine_binary(maps[a], maps[b])
    elif opts.mode == "multi":
        if assign.m == 1:
            partition = np.zeros((h, w), dtype=np.int32)
            soft = np.ones((1, h, w))
        else:
            hard, soft = combine_softmax([maps[i] for i in selected])
            partition = relabel_partition(hard).astype(np.int32)
    else:
        raise ValueError(f"unknown mode {opts.mode!r}")
    return InferResult(heatmap, partition, soft, assign.m, confs, selected,
                       [bool(f) for f in flags], assign.sizes(), assign.labels)


def infer_plain(params: ModelParams, img: np.ndarray) -> np.ndarray:
    """Heatmap of the unprompted baseline segmenter."""
    img = check_image(np.asarray(img))
    return expit(decode_plain(params, encode_image(params, img)))
