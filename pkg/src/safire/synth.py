"""Procedural multi-source images with exact source partitions.

Every source (the background included) renders a procedural texture
through its own signature: blur, per-channel gain, additive Gaussian
noise and value quantisation. Foreground sources are irregular blobs cut
from thresholded smooth noise. Half of the samples reuse the background
texture for the pasted regions (copy-move style), the rest draw a fresh
texture per source (splice style).
"""
from __future__ import annotations

import io
import json
from functools import lru_cache
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from .core import K, derive_seed, rng, write_image_png, write_mask_png

QUANT_STEPS = (0.0, 1 / 64, 1 / 32)
_RANGES = {"noise_sigma": (0.0, 0.08), "color_gain": (0.85, 1.15),
           "quant_step": (0.0, 1 / 32), "blur_sigma": (0.0, 1.2)}


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SourceSignature:
    noise_sigma: float
    color_gain: tuple[float, float, float]
    quant_step: float
    blur_sigma: float

    def distance(self, other: "SourceSignature", names=tuple(_RANGES)) -> float:
        """Largest per-field difference, each field normalised by its range."""
        best = 0.0
        for name in names:
            lo, hi = _RANGES[name]
            a = np.atleast_1d(getattr(self, name))
            b = np.atleast_1d(getattr(other, name))
            best = max(best, float(np.max(np.abs(a - b))) / (hi - lo))
        return best


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for ``generate_sample``.

    ``margin`` is the minimum normalised difference two signatures in one
    image must show in at least one of ``margin_fields``.
    """
    margin: float = 0.25
    margin_fields: tuple[str, ...] = tuple(_RANGES)
    min_area: float = 0.02
    blob_area: tuple[float, float] = (0.12, 0.35)
    max_retries: int = 50

    @classmethod
    def strong(cls) -> "SynthConfig":
        # sources always separable by their noise level alone
        return cls(margin=0.4, margin_fields=("noise_sigma",))


@dataclass(frozen=True)
class PostProcessConfig:
    p_blur: float = 0.3
    p_noise: float = 0.3
    p_contrast: float = 0.3
    p_gamma: float = 0.3
    p_jpeg: float = 0.3
    blur_sigma: tuple[float, float] = (0.3, 1.0)
    noise_sigma: tuple[float, float] = (0.005, 0.02)
    contrast: tuple[float, float] = (0.8, 1.2)
    gamma: tuple[float, float] = (0.8, 1.25)
    jpeg_quality: tuple[int, int] = (70, 95)

    def __post_init__(self):
        for f in fields(self):
            if f.name.startswith("p_") and not 0.0 <= getattr(self, f.name) <= 1.0:
                raise ValueError(f"{f.name} must be a probability")

    @classmethod
    def disabled(cls) -> "PostProcessConfig":
        return cls(p_blur=0, p_noise=0, p_contrast=0, p_gamma=0, p_jpeg=0)


# -- procedural primitives ----------------------------------------------------

@lru_cache(maxsize=64)
def _cubic_weights(size: int, cells: int) -> np.ndarray:
    """(size, cells + 3) Catmull-Rom interpolation matrix over a padded lattice."""
    t = (np.arange(size) + 0.5) * cells / size
    i = np.floor(t).astype(int)
    f = t - i
    taps = np.stack([
        ((-f + 2) * f - 1) * f / 2,
        ((3 * f - 5) * f * f + 2) / 2,
        ((-3 * f + 4) * f + 1) * f / 2,
        (f - 1) * f * f / 2,
    ], axis=1)
    w = np.zeros((size, cells + 3))
    for k in range(4):
        w[np.arange(size), i + k] = taps[:, k]
    w.setflags(write=False)
    return w


def smooth_noise(g: np.random.Generator, size: int, cells: int) -> np.ndarray:
    """Cubic-interpolated value noise with ``cells`` lattice cells per side, in [0, 1]."""
    lattice = g.random((cells + 3, cells + 3))
    w = _cubic_weights(size, cells)
    out = w @ lattice @ w.T
    out = out - out.min()
    return out / max(out.max(), 1e-12)


def texture(g: np.random.Generator, size: int) -> np.ndarray:
    """Multi-octave colour value noise plus a linear gradient, in [0, 1]."""
    octaves = [(4, 0.5), (8, 0.25), (16, 0.15), (32, 0.1)]
    lum = sum(a * smooth_noise(g, size, c) for c, a in octaves)
    chans = []
    for _ in range(3):
        tint = 0.6 * lum + 0.4 * smooth_noise(g, size, 4)
        chans.append(tint)
    img = np.stack(chans, axis=-1)
    yy, xx = np.mgrid[0:size, 0:size] / size
    theta = g.uniform(0, 2 * np.pi)
    grad = np.cos(theta) * xx + np.sin(theta) * yy
    img = img + 0.3 * grad[..., None] * g.uniform(-1, 1, 3)
    img -= img.min()
    img /= max(img.max(), 1e-12)
    return 0.15 + 0.7 * img


def sample_signature(g: np.random.Generator) -> SourceSignature:
    return SourceSignature(
        noise_sigma=float(g.uniform(*_RANGES["noise_sigma"])),
        color_gain=tuple(float(v) for v in g.uniform(0.85, 1.15, 3)),
        quant_step=float(QUANT_STEPS[g.integers(len(QUANT_STEPS))]),
        blur_sigma=float(g.uniform(*_RANGES["blur_sigma"])),
    )


def sample_signatures(g: np.random.Generator, n: int, cfg: SynthConfig) -> list[SourceSignature]:
    for _ in range(2000):
        sigs = [sample_signature(g) for _ in range(n)]
        if all(a.distance(b, cfg.margin_fields) >= cfg.margin
               for i, a in enumerate(sigs) for b in sigs[i + 1:]):
            return sigs
    raise GenerationError(f"could not draw {n} signatures with margin {cfg.margin}")


def render(tex: np.ndarray, sig: SourceSignature, g: np.random.Generator) -> np.ndarray:
    out = tex
    if sig.blur_sigma > 0:
        out = ndimage.gaussian_filter(out, sigma=(sig.blur_sigma, sig.blur_sigma, 0))
    out = out * np.asarray(sig.color_gain)
    out = out + g.normal(0.0, sig.noise_sigma, out.shape)
    if sig.quant_step > 0:
        out = np.round(out / sig.quant_step) * sig.quant_step
    return np.clip(out, 0.0, 1.0)


def blob(g: np.random.Generator, size: int, area: float) -> np.ndarray:
    field_ = smooth_noise(g, size, int(g.integers(3, 6)))
    return field_ > np.quantile(field_, 1.0 - area)


# -- operations ---------------------------------------------------------------

def generate_sample(seed: int, size: int = 256, n_sources: int = 2,
                    cfg: SynthConfig | None = None, return_signatures: bool = False):
    """One synthetic image and its source partition (label 0 = background)."""
    if not 1 <= n_sources <= 6:
        raise ValueError("n_sources must be in [1, 6]")
    if size <= 0 or size % K:
        raise ValueError(f"size must be a positive multiple of {K}")
    cfg = cfg or SynthConfig()
    g = rng(seed)
    for _ in range(cfg.max_retries):
        part = np.zeros((size, size), dtype=np.int32)
        for src in range(1, n_sources):
            part[blob(g, size, g.uniform(*cfg.blob_area))] = src
        counts = np.bincount(part.ravel(), minlength=n_sources)
        if counts.min() >= cfg.min_area * part.size:
            break
    else:
        raise GenerationError(f"no layout with every region >= {cfg.min_area:.0%} "
                              f"after {cfg.max_retries} tries")
    sigs = sample_signatures(g, n_sources, cfg)
    base = texture(g, size)
    copy_move = g.random() < 0.5
    img = np.empty((size, size, 3))
    for src, sig in enumerate(sigs):
        tex = base if (src == 0 or copy_move) else texture(g, size)
        sel = part == src
        img[sel] = render(tex, sig, g)[sel]
    if return_signatures:
        return img, part, sigs
    return img, part


def partition_to_binary(part: np.ndarray) -> np.ndarray:
    return (np.asarray(part) != 0).astype(np.uint8)


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return img.copy()
    return ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0))


def add_noise(img: np.ndarray, sigma: float, g: np.random.Generator) -> np.ndarray:
    if sigma <= 0:
        return img.copy()
    return np.clip(img + g.normal(0.0, sigma, img.shape), 0.0, 1.0)


def adjust_gamma(img: np.ndarray, gamma: float) -> np.ndarray:
    if gamma == 1.0:
        return img.copy()
    return np.clip(img, 0.0, 1.0) ** gamma


def adjust_contrast(img: np.ndarray, factor: float) -> np.ndarray:
    if factor == 1.0:
        return img.copy()
    return np.clip(0.5 + factor * (img - 0.5), 0.0, 1.0)


def jpeg_roundtrip(img: np.ndarray, quality: int) -> np.ndarray:
    """Real JPEG encode/decode; quality >= 100 is treated as the identity."""
    if quality >= 100:
        return img.copy()
    buf = io.BytesIO()
    PILImage.fromarray(np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)).save(
        buf, format="JPEG", quality=int(quality))
    buf.seek(0)
    return np.asarray(PILImage.open(buf).convert("RGB"), dtype=np.float64) / 255.0


def postprocess(img: np.ndarray, cfg: PostProcessConfig, seed: int) -> np.ndarray:
    g = rng(seed)
    out = np.asarray(img, dtype=np.float64)
    # draw every decision up front so the stream layout is fixed
    draws = g.random(5)
    if draws[0] < cfg.p_blur:
        out = gaussian_blur(out, g.uniform(*cfg.blur_sigma))
    if draws[1] < cfg.p_noise:
        out = add_noise(out, g.uniform(*cfg.noise_sigma), g)
    if draws[2] < cfg.p_contrast:
        out = adjust_contrast(out, g.uniform(*cfg.contrast))
    if draws[3] < cfg.p_gamma:
        out = adjust_gamma(out, g.uniform(*cfg.gamma))
    if draws[4] < cfg.p_jpeg:
        out = jpeg_roundtrip(out, int(g.integers(cfg.jpeg_quality[0], cfg.jpeg_quality[1] + 1)))
    return np.clip(out, 0.0, 1.0)


def generate_dataset(out_dir, n: int, master_seed: int, size: int = 256,
                     n_sources=2, cfg: SynthConfig | None = None) -> dict:
    """Write ``images/``, ``partitions/``, ``binary/`` PNGs and ``manifest.json``.

    ``n_sources`` is an int or an inclusive ``(lo, hi)`` range sampled per image.
    """
    out = Path(out_dir)
    for sub in ("images", "partitions", "binary"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    cfg = cfg or SynthConfig()
    records = []
    for i in range(n):
        seed = derive_seed(master_seed, i)
        if isinstance(n_sources, int):
            ns = n_sources
        else:
            ns = int(rng(seed, 1).integers(n_sources[0], n_sources[1] + 1))
        img, part, sigs = generate_sample(seed, size, ns, cfg, return_signatures=True)
        name = f"{i:05d}.png"
        write_image_png(img, out / "images" / name)
        write_mask_png(part, out / "partitions" / name, kind="partition")
        write_mask_png(partition_to_binary(part), out / "binary" / name)
        records.append({"file": name, "seed": seed, "n_sources": ns,
                        "signatures": [asdict(s) for s in sigs]})
    manifest = {"master_seed": master_seed, "size": size, "config": asdict(cfg),
                "samples": records}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest
