"""Shared domain types, seeded RNG and the on-disk formats.

Arrays are plain numpy arrays; the validators below enforce the
invariants each type carries. Images are ``(H, W, 3)`` floats in [0, 1],
masks and partitions are 2-D integer arrays.

Randomness comes from numpy's Philox counter-based generator keyed by a
``SeedSequence`` built from the 64-bit seed plus any number of integer
stream keys, so independent streams (per sample, per epoch, ...) never
depend on call order.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import NamedTuple

import numpy as np
from PIL import Image as PILImage

K = 8  # encoder downsampling ratio

SAFR_MAGIC = b"SAFR"
SAFR_VERSION = 1
_DTYPE_F32 = 0

_U64 = (1 << 64) - 1


class FormatError(ValueError):
    """Malformed or unsupported file contents."""


class PointPrompt(NamedTuple):
    row: int
    col: int


def rng(seed: int, *keys: int) -> np.random.Generator:
    """Philox generator for the stream ``(seed, *keys)``."""
    ss = np.random.SeedSequence([int(seed) & _U64, *(int(k) & _U64 for k in keys)])
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *keys: int) -> int:
    """Child 64-bit seed, e.g. the per-sample seed ``hash(master, index)``."""
    ss = np.random.SeedSequence([int(seed) & _U64, *(int(k) & _U64 for k in keys)])
    return int(ss.generate_state(1, np.uint64)[0])


# -- validators ---------------------------------------------------------------

def check_image(img: np.ndarray, k: int = K) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"image must be (H, W, 3), got {img.shape}")
    h, w = img.shape[:2]
    if h == 0 or w == 0 or h % k or w % k:
        raise ValueError(f"image dims {h}x{w} must be positive multiples of {k}")
    if not np.all(np.isfinite(img)) or img.min() < 0 or img.max() > 1:
        raise ValueError("image values must be finite and in [0, 1]")
    return img


def check_binary(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got {mask.shape}")
    if not np.all((mask == 0) | (mask == 1)):
        bad = np.setdiff1d(np.unique(mask), [0, 1])
        raise ValueError(f"binary mask contains values {bad.tolist()}")
    return mask.astype(np.uint8, copy=False)


def check_partition(part: np.ndarray) -> np.ndarray:
    """Validate a source partition: labels 0..r-1, each present."""
    part = np.asarray(part)
    if part.ndim != 2:
        raise ValueError(f"partition must be 2-D, got {part.shape}")
    labels = np.unique(part)
    if labels[0] != 0 or labels[-1] != labels.size - 1:
        raise ValueError(f"partition labels must be 0..r-1 without gaps, got {labels.tolist()}")
    return part


def relabel_partition(part: np.ndarray) -> np.ndarray:
    """Map arbitrary labels onto 0..r-1 by order of first raster occurrence."""
    flat = np.asarray(part).ravel()
    uniq, first, inv = np.unique(flat, return_index=True, return_inverse=True)
    order = np.argsort(first, kind="stable")
    remap = np.empty(uniq.size, dtype=np.int32)
    remap[order] = np.arange(uniq.size, dtype=np.int32)
    return remap[inv].reshape(np.shape(part))


def check_point(pt: PointPrompt, h: int, w: int) -> PointPrompt:
    r, c = int(pt[0]), int(pt[1])
    if not (0 <= r < h and 0 <= c < w):
        raise ValueError(f"point {(r, c)} outside {h}x{w} grid")
    return PointPrompt(r, c)


# -- SAFR prediction maps -----------------------------------------------------

def _safr_header(shape: tuple[int, ...]) -> bytes:
    return (SAFR_MAGIC + struct.pack("<HBB", SAFR_VERSION, _DTYPE_F32, len(shape))
            + struct.pack(f"<{len(shape)}I", *shape))


def write_prediction(pred: np.ndarray, path) -> None:
    """Write a float map as SAFR: magic, u16 version, dtype byte, ndims, u32 dims, f32 data."""
    arr = np.asarray(pred)
    if not np.all(np.isfinite(arr)):
        raise ValueError("prediction map must be finite")
    data = np.ascontiguousarray(arr, dtype="<f4")
    try:
        with open(path, "wb") as fh:
            fh.write(_safr_header(data.shape))
            fh.write(data.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write prediction {path}: {exc}") from exc


def read_prediction(path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read prediction {path}: {exc}") from exc
    if len(raw) < 8 or raw[:4] != SAFR_MAGIC:
        raise FormatError(f"{path}: not a SAFR file")
    version, dtype, ndims = struct.unpack_from("<HBB", raw, 4)
    if version != SAFR_VERSION:
        raise FormatError(f"{path}: unsupported SAFR version {version}")
    if dtype != _DTYPE_F32:
        raise FormatError(f"{path}: unsupported dtype code {dtype}")
    off = 8 + 4 * ndims
    if len(raw) < off:
        raise FormatError(f"{path}: truncated header")
    shape = struct.unpack_from(f"<{ndims}I", raw, 8)
    n = int(np.prod(shape, dtype=np.int64))
    if len(raw) != off + 4 * n:
        raise FormatError(f"{path}: expected {off + 4 * n} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(shape).copy()


# -- PNG masks and images -----------------------------------------------------

def _palette() -> list[int]:
    base = [(0, 0, 0), (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
            (245, 130, 48), (145, 30, 180), (70, 240, 240)]
    pal = []
    for i in range(256):
        pal.extend(base[i % len(base)])
    return pal


def read_mask_png(path, kind: str = "binary") -> np.ndarray:
    """Read an 8-bit grayscale or indexed PNG as a binary mask or a partition.

    ``kind="binary"``: pixel 0 -> 0, 255 -> 1, anything else is rejected.
    ``kind="partition"``: pixel value is the source index; 255 is reserved.
    """
    try:
        im = PILImage.open(path)
        im.load()
    except OSError as exc:
        raise FormatError(f"cannot read PNG {path}: {exc}") from exc
    if im.mode not in ("L", "P"):
        raise FormatError(f"{path}: expected 8-bit grayscale or indexed PNG, got mode {im.mode}")
    arr = np.asarray(im, dtype=np.uint8)
    values = np.unique(arr)
    if kind == "binary":
        bad = np.setdiff1d(values, [0, 255])
        if bad.size:
            raise FormatError(f"{path}: pixel value {int(bad[0])} not allowed in a binary mask")
        return (arr == 255).astype(np.uint8)
    if kind == "partition":
        if values[-1] == 255:
            raise FormatError(f"{path}: pixel value 255 is reserved in a partition")
        return check_partition(arr.astype(np.int32))
    raise ValueError(f"unknown mask kind {kind!r}")


def write_mask_png(mask: np.ndarray, path, kind: str = "binary") -> None:
    mask = np.asarray(mask)
    if kind == "binary":
        PILImage.fromarray((check_binary(mask) * 255).astype(np.uint8), mode="L").save(path)
    elif kind == "partition":
        if mask.max() >= 255 or mask.min() < 0:
            raise ValueError("partition labels must lie in 0..254")
        im = PILImage.fromarray(mask.astype(np.uint8), mode="P")
        im.putpalette(_palette())
        im.save(path)
    else:
        raise ValueError(f"unknown mask kind {kind!r}")


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def write_image_png(img: np.ndarray, path) -> None:
    PILImage.fromarray(to_uint8(img), mode="RGB").save(path)


def read_image_png(path) -> np.ndarray:
    try:
        im = PILImage.open(path)
        im.load()
    except OSError as exc:
        raise FormatError(f"cannot read PNG {path}: {exc}") from exc
    return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
