"""Toy promptable segmenter: image encoder, prompt encoder, mask decoder.

Encoder: luminance high-pass channel stacked on RGB, then three stride-2
3x3 convolutions (4 -> 16 -> 24 -> 16 channels, tanh between), giving a
16 x H/8 x W/8 embedding grid. The grid is centred per image (mean cell
embedding subtracted), which stops the contrastive objective from
collapsing every cell onto one shared direction.

Prompt encoder: random Fourier features of the normalised point, frozen
after initialisation.

Decoder: the prompt embedding attends over the grid through the same
Fourier features evaluated at cell centres, which gathers a prompt token
(the embedding around the prompt). A two-layer perceptron scores every
cell from ``[cell embedding, token, cosine(cell, token)]``; cell logits
are bilinearly upsampled x8. The confidence head is a sigmoid over an
affine map of the mean hidden activation.

Parameters live in one flat float64 vector whose values are kept exactly
representable in float32, so checkpoints round-trip bit-exactly.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.special import expit

from .core import K, FormatError, PointPrompt, check_image, check_point, rng
from .losses import LossSpec, aass_terms, bce_loss_grad, downsample_partition, r2r_loss_grad

V = 16
HIDDEN = 32
N_FREQ = V // 2
FOURIER_SCALE = 3.0
ATTN_SHARPNESS = 30.0
HP_CUTOFF = 0.25
HP_GAIN = 16.0

LAYOUT = (
    ("enc.conv1.w", (16, 4, 3, 3), "encoder"),
    ("enc.conv1.b", (16,), "encoder"),
    ("enc.conv2.w", (24, 16, 3, 3), "encoder"),
    ("enc.conv2.b", (24,), "encoder"),
    ("enc.conv3.w", (V, 24, 3, 3), "encoder"),
    ("enc.conv3.b", (V,), "encoder"),
    ("prompt.freq", (2, N_FREQ), "prompt"),
    ("dec.w1", (HIDDEN, 2 * V + 1), "decoder"),
    ("dec.b1", (HIDDEN,), "decoder"),
    ("dec.w2", (HIDDEN,), "decoder"),
    ("dec.b2", (1,), "decoder"),
    ("conf.w", (HIDDEN,), "confidence"),
    ("conf.b", (1,), "confidence"),
)
GROUPS = ("encoder", "prompt", "decoder", "confidence")
TRAINABLE = {
    "pretrain": ("encoder",),
    "train": ("decoder", "confidence"),
    "plain": ("decoder",),
}

CKPT_MAGIC = b"SAFC"
CKPT_VERSION = 1


class NumericalError(FloatingPointError):
    pass


def _f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


class ModelParams:
    """Flat parameter vector with a named index."""

    def __init__(self, values: np.ndarray | None = None):
        self.index: dict[str, tuple[int, tuple[int, ...], str]] = {}
        off = 0
        for name, shape, group in LAYOUT:
            self.index[name] = (off, shape, group)
            off += int(np.prod(shape))
        self.size = off
        if values is None:
            values = np.zeros(off)
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (off,):
            raise ValueError(f"expected {off} parameters, got {values.shape}")
        self.values = values

    def __getitem__(self, name: str) -> np.ndarray:
        off, shape, _ = self.index[name]
        return self.values[off:off + int(np.prod(shape))].reshape(shape)

    def __setitem__(self, name: str, arr) -> None:
        self[name][...] = arr

    def round_f32(self) -> "ModelParams":
        """Round every value to float32 precision in place."""
        self.values[...] = _f32(self.values)
        return self

    def copy(self) -> "ModelParams":
        return ModelParams(self.values.copy())

    def group_mask(self, groups) -> np.ndarray:
        mask = np.zeros(self.size, dtype=bool)
        for name, (off, shape, group) in self.index.items():
            if group in groups:
                mask[off:off + int(np.prod(shape))] = True
        return mask

    def names(self, group: str | None = None) -> list[str]:
        return [n for n, (_, _, g) in self.index.items() if group is None or g == group]

    def __eq__(self, other) -> bool:
        return isinstance(other, ModelParams) and np.array_equal(self.values, other.values)


def init_params(seed: int) -> ModelParams:
    g = rng(seed, 0xE0C)
    p = ModelParams()
    for name, shape, _ in LAYOUT:
        if name.endswith(".w") and name.startswith("enc"):
            fan_in = shape[1] * 9
            p[name] = g.normal(0.0, 1.0 / np.sqrt(fan_in), shape)
    p["prompt.freq"] = g.normal(0.0, FOURIER_SCALE, (2, N_FREQ))
    p["dec.w1"] = g.normal(0.0, 1.0 / np.sqrt(2 * V + 1), (HIDDEN, 2 * V + 1))
    p["dec.w2"] = g.normal(0.0, 1.0 / np.sqrt(HIDDEN), HIDDEN)
    return p.round_f32()


# -- checkpoint I/O -------------------------------------------------------------

def write_checkpoint(path, params: ModelParams, extra: dict[str, np.ndarray] | None = None) -> None:
    """Named float32 blocks: magic, u16 version, u32 block count, then per block
    u16 name length, name, u8 ndims, u32 dims, f32 data."""
    blocks = [(n, params[n]) for n in params.index]
    for n, arr in (extra or {}).items():
        blocks.append((n, np.asarray(arr)))
    out = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(blocks))]
    for name, arr in blocks:
        raw = name.encode()
        data = np.ascontiguousarray(arr, dtype="<f4")
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", data.ndim)
                   + struct.pack(f"<{data.ndim}I", *data.shape) + data.tobytes())
    try:
        Path(path).write_bytes(b"".join(out))
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc


def read_checkpoint(path) -> tuple[ModelParams, dict[str, np.ndarray]]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint")
    try:
        version, count = struct.unpack_from("<HI", raw, 4)
        if version != CKPT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        pos = 10
        blocks = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + nlen].decode()
            pos += nlen
            (ndim,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            n = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * n > len(raw):
                raise FormatError(f"{path}: truncated block {name}")
            blocks[name] = np.frombuffer(raw, "<f4", n, pos).reshape(shape).astype(np.float64)
            pos += 4 * n
    except struct.error as exc:
        raise FormatError(f"{path}: truncated checkpoint") from exc
    params = ModelParams()
    for name, (_, shape, _) in params.index.items():
        if name not in blocks:
            raise FormatError(f"{path}: missing parameter block {name}")
        if blocks[name].shape != shape:
            raise FormatError(f"{path}: block {name} has shape {blocks[name].shape}, want {shape}")
        params[name] = blocks.pop(name)
    return params, blocks


# -- image encoder ----------------------------------------------------------------

def highpass(img: np.ndarray, cutoff: float = HP_CUTOFF) -> np.ndarray:
    """Remove spatial frequencies below ``cutoff`` x Nyquist, channel by channel."""
    if not 0 < cutoff < 1:
        raise ValueError("cutoff must be in (0, 1)")
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    keep = np.sqrt(fx * fx + fy * fy) >= cutoff * 0.5
    if img.ndim == 3:
        keep = keep[..., None]
    spec = np.fft.fft2(img, axes=(0, 1))
    return np.real(np.fft.ifft2(spec * keep, axes=(0, 1)))


def encoder_input(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    lum = img @ np.array([0.299, 0.587, 0.114])
    hp = highpass(lum) * HP_GAIN
    return np.concatenate([(img - 0.5).transpose(2, 0, 1), hp[None]], axis=0)


def _im2col(x: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    sc, sh, sw = xp.strides
    ho, wo = h // 2, w // 2
    cols = np.lib.stride_tricks.as_strided(
        xp, (c, 3, 3, ho, wo), (sc, sh, sw, 2 * sh, 2 * sw), writeable=False)
    return cols.reshape(c * 9, ho * wo)


def _col2im(dcols: np.ndarray, shape) -> np.ndarray:
    c, h, w = shape
    ho, wo = h // 2, w // 2
    dcols = dcols.reshape(c, 3, 3, ho, wo)
    dxp = np.zeros((c, h + 2, w + 2))
    for ki in range(3):
        for kj in range(3):
            dxp[:, ki:ki + 2 * ho:2, kj:kj + 2 * wo:2] += dcols[:, ki, kj]
    return dxp[:, 1:-1, 1:-1]


def conv_features(params: ModelParams, img: np.ndarray):
    """Uncentred output of the convolution stack plus its backprop cache."""
    img = check_image(img)
    x = encoder_input(img)
    cache = []
    for i, act in ((1, True), (2, True), (3, False)):
        w = params[f"enc.conv{i}.w"]
        b = params[f"enc.conv{i}.b"]
        cols = _im2col(x)
        z = (w.reshape(w.shape[0], -1) @ cols + b[:, None]).reshape(
            w.shape[0], x.shape[1] // 2, x.shape[2] // 2)
        out = np.tanh(z) if act else z
        cache.append((x.shape, cols, out if act else None))
        x = out
    return x, cache


def encode_forward(params: ModelParams, img: np.ndarray):
    """Embedding grid ``(V, H/8, W/8)`` plus the cache needed for backprop."""
    x, cache = conv_features(params, img)
    return x - x.mean(axis=(1, 2), keepdims=True), cache


def encode_image(params: ModelParams, img: np.ndarray) -> np.ndarray:
    return encode_forward(params, img)[0]


def encode_backward(params: ModelParams, cache, d_emb: np.ndarray) -> dict[str, np.ndarray]:
    grads = {}
    d = d_emb - d_emb.mean(axis=(1, 2), keepdims=True)
    for i in (3, 2, 1):
        in_shape, cols, act_out = cache[i - 1]
        if act_out is not None:
            d = d * (1.0 - act_out * act_out)
        w = params[f"enc.conv{i}.w"]
        d2 = d.reshape(d.shape[0], -1)
        grads[f"enc.conv{i}.w"] = (d2 @ cols.T).reshape(w.shape)
        grads[f"enc.conv{i}.b"] = d2.sum(axis=1)
        if i > 1:
            d = _col2im(w.reshape(w.shape[0], -1).T @ d2, in_shape)
    return grads


# -- prompt encoder ---------------------------------------------------------------

def _fourier(params: ModelParams, coords: np.ndarray) -> np.ndarray:
    z = 2.0 * np.pi * (coords @ params["prompt.freq"])
    return np.concatenate([np.sin(z), np.cos(z)], axis=-1)


def encode_prompt(params: ModelParams, pt: PointPrompt, h: int, w: int) -> np.ndarray:
    pt = check_point(pt, h, w)
    coords = np.array([2.0 * (pt.col + 0.5) / w - 1.0, 2.0 * (pt.row + 0.5) / h - 1.0])
    return _fourier(params, coords)


def cell_positional(params: ModelParams, hc: int, wc: int) -> np.ndarray:
    rows = 2.0 * (np.arange(hc) + 0.5) / hc - 1.0
    cols = 2.0 * (np.arange(wc) + 0.5) / wc - 1.0
    yy, xx = np.meshgrid(rows, cols, indexing="ij")
    return _fourier(params, np.stack([xx.ravel(), yy.ravel()], axis=1))


# -- decoder -----------------------------------------------------------------------

@lru_cache(maxsize=16)
def upsample_matrix(n: int, k: int = K) -> np.ndarray:
    """``(n*k, n)`` bilinear x k upsampling (half-pixel centres, edge clamp)."""
    src = np.clip((np.arange(n * k) + 0.5) / k - 0.5, 0, n - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    f = src - i0
    m = np.zeros((n * k, n))
    np.add.at(m, (np.arange(n * k), i0), 1 - f)
    np.add.at(m, (np.arange(n * k), i1), f)
    m.setflags(write=False)
    return m


@lru_cache(maxsize=16)
def downsample_matrix(n: int, k: int = K) -> np.ndarray:
    """``(n, n*k)`` bilinear /k downsampling (half-pixel centres)."""
    src = np.clip((np.arange(n) + 0.5) * k - 0.5, 0, n * k - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n * k - 1)
    f = src - i0
    m = np.zeros((n, n * k))
    np.add.at(m, (np.arange(n), i0), 1 - f)
    np.add.at(m, (np.arange(n), i1), f)
    m.setflags(write=False)
    return m


@dataclass
class DecoderContext:
    """Prompt-independent decoder state, computed once per embedding grid."""
    cells: np.ndarray  # (N, V)
    unit: np.ndarray  # (N, V) L2-normalised cells
    pos: np.ndarray  # (N, V) positional features of cell centres
    hc: int
    wc: int


def decoder_context(params: ModelParams, grid: np.ndarray) -> DecoderContext:
    grid = np.asarray(grid, dtype=np.float64)
    v, hc, wc = grid.shape
    cells = grid.reshape(v, -1).T
    unit = cells / np.maximum(np.linalg.norm(cells, axis=1, keepdims=True), 1e-12)
    return DecoderContext(cells, unit, cell_positional(params, hc, wc), hc, wc)


def decoder_features(ctx: DecoderContext, prompt: np.ndarray | None) -> np.ndarray:
    """``(N, 2V+1)`` scorer input; ``prompt=None`` gives the unprompted variant."""
    n = ctx.cells.shape[0]
    if prompt is None:
        return np.concatenate([ctx.cells, np.zeros((n, V + 1))], axis=1)
    att = ATTN_SHARPNESS * (ctx.pos @ prompt) / N_FREQ
    att = np.exp(att - att.max())
    att /= att.sum()
    token = att @ ctx.cells
    cos = ctx.unit @ (token / max(np.linalg.norm(token), 1e-12))
    return np.concatenate([ctx.cells, np.broadcast_to(token, (n, V)), cos[:, None]], axis=1)


def _score(params: ModelParams, ctx: DecoderContext, feats: np.ndarray):
    hidden = np.tanh(feats @ params["dec.w1"].T + params["dec.b1"])
    cell_logits = (hidden @ params["dec.w2"] + params["dec.b2"][0]).reshape(ctx.hc, ctx.wc)
    uh, uw = upsample_matrix(ctx.hc), upsample_matrix(ctx.wc)
    logits = uh @ cell_logits @ uw.T
    conf = float(expit(params["conf.w"] @ hidden.mean(axis=0) + params["conf.b"][0]))
    return logits, conf, hidden


def decode(params: ModelParams, grid: np.ndarray, prompts) -> list[tuple[np.ndarray, float]]:
    """One ``(prediction map, confidence)`` per prompt embedding, in order.

    The grid-dependent work is shared; each prompt is then scored by the
    same per-prompt routine, so a batch equals the single-prompt calls.
    """
    prompts = list(prompts)
    if not prompts:
        raise ValueError("decode needs at least one prompt")
    ctx = decoder_context(params, grid)
    return [_score(params, ctx, decoder_features(ctx, np.asarray(f)))[:2] for f in prompts]


def decode_plain(params: ModelParams, grid: np.ndarray) -> np.ndarray:
    """Unprompted logits from the same scorer (baseline segmenter)."""
    ctx = decoder_context(params, grid)
    return _score(params, ctx, decoder_features(ctx, None))[0]


# -- losses and gradients ----------------------------------------------------------

@dataclass
class PretrainItem:
    image: np.ndarray
    partition: np.ndarray


@dataclass
class PromptItem:
    """Prompted training example. ``grid`` may be given instead of ``image``."""
    points: list
    point_masks: list
    image: np.ndarray | None = None
    grid: np.ndarray | None = None

    def embedding(self, params: ModelParams) -> np.ndarray:
        return self.grid if self.grid is not None else encode_image(params, self.image)


@dataclass
class PlainItem:
    mask: np.ndarray
    image: np.ndarray | None = None
    grid: np.ndarray | None = None

    def embedding(self, params: ModelParams) -> np.ndarray:
        return self.grid if self.grid is not None else encode_image(params, self.image)


def _backprop_scorer(params, ctx, feats, hidden, d_logits, d_conf_pre, g):
    uh, uw = upsample_matrix(ctx.hc), upsample_matrix(ctx.wc)
    d_cell = (uh.T @ d_logits @ uw).ravel()
    g["dec.w2"] += hidden.T @ d_cell
    g["dec.b2"] += d_cell.sum()
    d_hidden = np.outer(d_cell, params["dec.w2"])
    if d_conf_pre:
        g["conf.w"] += d_conf_pre * hidden.mean(axis=0)
        g["conf.b"] += d_conf_pre
        d_hidden += d_conf_pre * params["conf.w"] / hidden.shape[0]
    d_pre = d_hidden * (1.0 - hidden * hidden)
    g["dec.w1"] += d_pre.T @ feats
    g["dec.b1"] += d_pre.sum(axis=0)


def _check_finite(params: ModelParams, loss: float, grads: np.ndarray) -> None:
    if np.isfinite(loss) and np.all(np.isfinite(grads)):
        return
    report = []
    for group in GROUPS:
        m = params.group_mask([group])
        report.append(f"{group}: params finite={bool(np.all(np.isfinite(params.values[m])))}, "
                      f"grads finite={bool(np.all(np.isfinite(grads[m])))}")
    raise NumericalError(f"non-finite loss {loss}; " + "; ".join(report))


def loss_and_gradients(params: ModelParams, batch, spec: LossSpec = LossSpec(), accs=None,
                       return_accs: bool = False):
    """Mean loss over the batch and its gradient as a flat vector.

    ``spec.mode`` selects the objective: ``pretrain`` (region-to-region
    contrastive loss on :class:`PretrainItem`), ``train`` (area-adaptive BCE
    plus confidence loss on :class:`PromptItem`) or ``plain`` (unprompted
    BCE on :class:`PlainItem`). Frozen groups get exactly zero gradient.

    The confidence target (pixel accuracy of the binarised map) is
    piecewise constant in the parameters and treated as a fixed target.
    Pass ``accs`` (as returned with ``return_accs=True``) to pin it, which
    is what a finite-difference check needs.
    """
    if spec.mode not in TRAINABLE:
        raise ValueError(f"unknown loss mode {spec.mode!r}")
    g = ModelParams()
    total = 0.0
    count = 0
    used_accs = []
    if spec.mode == "pretrain":
        for item in batch:
            emb, cache = encode_forward(params, item.image)
            labels = downsample_partition(item.partition)
            out = r2r_loss_grad(emb.reshape(V, -1).T, labels, spec.tau, spec.normalize_embeddings)
            if out is None:
                continue
            loss, d_cells = out
            total += loss
            count += 1
            for name, arr in encode_backward(params, cache, d_cells.T.reshape(emb.shape)).items():
                g[name] += arr
    elif spec.mode == "train":
        acc_iter = iter(accs) if accs is not None else None
        for item in batch:
            ctx = decoder_context(params, item.embedding(params))
            h, w = ctx.hc * K, ctx.wc * K
            for pt, yp in zip(item.points, item.point_masks):
                feats = decoder_features(ctx, encode_prompt(params, pt, h, w))
                logits, conf, hidden = _score(params, ctx, feats)
                l_aass, d_logits, acc = aass_terms(logits, yp, spec.c_max)
                if acc_iter is not None:
                    acc = next(acc_iter)
                used_accs.append(acc)
                total += l_aass + spec.lambda_conf * (acc - conf) ** 2
                count += 1
                d_conf_pre = -2.0 * spec.lambda_conf * (acc - conf) * conf * (1.0 - conf)
                _backprop_scorer(params, ctx, feats, hidden, d_logits, d_conf_pre, g)
    else:
        for item in batch:
            ctx = decoder_context(params, item.embedding(params))
            feats = decoder_features(ctx, None)
            logits, _, hidden = _score(params, ctx, feats)
            loss, d_logits = bce_loss_grad(logits, item.mask)
            total += loss
            count += 1
            _backprop_scorer(params, ctx, feats, hidden, d_logits, 0.0, g)
    grads = g.values
    if count:
        total /= count
        grads /= count
    grads[~params.group_mask(TRAINABLE[spec.mode])] = 0.0
    _check_finite(params, total, grads)
    if return_accs:
        return total, grads, used_accs
    return total, grads


def loss_value(params: ModelParams, batch, spec: LossSpec = LossSpec(), accs=None) -> float:
    return loss_and_gradients(params, batch, spec, accs)[0]
