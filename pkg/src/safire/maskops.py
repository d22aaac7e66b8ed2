"""Connected components, point masks and paired prompt sampling.

Components are maximal 4-connected sets of equal mask value. Two
components are neighbours when any of their pixels touch under
8-adjacency (diagonal contact counts). Neighbours are taken regardless of
mask value, so a diagonally touching same-value blob is labelled 0 in a
point mask rather than ignored.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .core import PointPrompt, check_binary, check_point, rng


@dataclass(frozen=True)
class ComponentPartition:
    label_map: np.ndarray  # (H, W) int32 component ids 0..c-1
    c: int
    component_value: np.ndarray  # (c,) original mask value of each component
    adjacency: tuple[frozenset, ...]

    def neighbors(self, comp: int) -> frozenset:
        return self.adjacency[comp]


def connected_components(mask: np.ndarray) -> ComponentPartition:
    mask = np.ascontiguousarray(check_binary(mask), dtype=np.uint8)
    labels, count, values = kernels.label_components(mask)
    pairs = kernels.adjacency_pairs(np.ascontiguousarray(labels, dtype=np.int32))
    adj: list[set] = [set() for _ in range(count)]
    for a, b in pairs.tolist():
        adj[a].add(b)
        adj[b].add(a)
    labels.setflags(write=False)
    values.setflags(write=False)
    return ComponentPartition(labels, int(count), values, tuple(frozenset(s) for s in adj))


def point_mask(mask: np.ndarray, p: PointPrompt, parts: ComponentPartition | None = None) -> np.ndarray:
    """Point mask for prompt ``p``: 1 on its component, 0 on neighbours, -1 elsewhere.

    ``parts`` may be passed to reuse a precomputed labelling of ``mask``.
    """
    mask = check_binary(mask)
    p = check_point(p, *mask.shape)
    if parts is None:
        parts = connected_components(mask)
    comp = int(parts.label_map[p.row, p.col])
    lut = np.full(parts.c, -1, dtype=np.int8)
    lut[list(parts.adjacency[comp])] = 0
    lut[comp] = 1
    return lut[parts.label_map]


def sample_point_pairs(mask: np.ndarray, pairs: int, seed: int) -> list[tuple[PointPrompt, PointPrompt]]:
    """Draw ``pairs`` (authentic-side, forged-side) prompt pairs.

    The first point of each pair is uniform over pixels with value 0 and the
    second over pixels with value 1. When only one value is present both
    points come from it.
    """
    if pairs < 1:
        raise ValueError("pairs must be >= 1")
    mask = check_binary(mask)
    w = mask.shape[1]
    flat = mask.ravel()
    zeros = np.flatnonzero(flat == 0)
    ones = np.flatnonzero(flat == 1)
    if zeros.size == 0:
        zeros = ones
    elif ones.size == 0:
        ones = zeros
    g = rng(seed)
    a = zeros[g.integers(0, zeros.size, size=pairs)]
    b = ones[g.integers(0, ones.size, size=pairs)]
    return [(PointPrompt(int(i // w), int(i % w)), PointPrompt(int(j // w), int(j % w)))
            for i, j in zip(a, b)]
