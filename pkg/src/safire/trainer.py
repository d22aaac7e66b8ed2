"""Pretraining, prompted training and the unprompted baseline.

All three loops share one SGD-with-momentum stepper. Parameters and the
velocity buffer are rounded to float32 after every step so a checkpoint
written between epochs resumes bit-identically. Randomness is keyed by
``(seed, purpose, epoch, sample index)``, never by iteration order.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .core import derive_seed, read_image_png, read_mask_png, rng, to_uint8
from .losses import LossSpec, downsample_partition
from .maskops import connected_components, point_mask, sample_point_pairs
from .net import (TRAINABLE, ModelParams, PlainItem, PretrainItem, PromptItem, encode_image,
                  init_params, loss_and_gradients, read_checkpoint, write_checkpoint)
from .synth import PostProcessConfig, postprocess

log = logging.getLogger(__name__)

_PURPOSE_ORDER, _PURPOSE_AUG, _PURPOSE_PAIRS = 1, 2, 3


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 8
    pairs_per_image: int = 4
    tau: float = 0.1
    c_max: float = 10.0
    lambda_conf: float = 0.1
    normalize_embeddings: bool = True
    augment: PostProcessConfig = field(default_factory=PostProcessConfig)

    @classmethod
    def from_dict(cls, d: dict | None, **defaults) -> "TrainConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "augment" in d and isinstance(d["augment"], dict):
            aug = {k: tuple(v) if isinstance(v, list) else v for k, v in d["augment"].items()}
            d["augment"] = PostProcessConfig(**aug)
        return cls(**{**defaults, **d})

    def loss_spec(self, mode: str) -> LossSpec:
        return LossSpec(mode=mode, tau=self.tau, c_max=self.c_max,
                        lambda_conf=self.lambda_conf,
                        normalize_embeddings=self.normalize_embeddings)


PRETRAIN_DEFAULTS = {"epochs": 20, "lr": 0.05}
TRAIN_DEFAULTS = {"epochs": 30, "lr": 0.02}


@dataclass
class EpochLog:
    epoch: int
    loss: float
    acc: float | None = None


class SGD:
    def __init__(self, params: ModelParams, mode: str, lr: float, momentum: float,
                 velocity: np.ndarray | None = None):
        self.params = params
        self.mask = params.group_mask(TRAINABLE[mode])
        self.lr = lr
        self.momentum = momentum
        self.velocity = np.zeros(params.size) if velocity is None else velocity.copy()

    def step(self, grads: np.ndarray) -> None:
        m = self.mask
        v = self.momentum * self.velocity[m] + grads[m]
        self.velocity[m] = np.asarray(v, dtype=np.float32)
        self.params.values[m] -= self.lr * self.velocity[m]
        self.params.round_f32()


# -- data ------------------------------------------------------------------------

@dataclass
class Sample:
    name: str
    image: np.ndarray  # uint8 (H, W, 3)
    partition: np.ndarray | None
    binary: np.ndarray | None

    def float_image(self) -> np.ndarray:
        return self.image.astype(np.float64) / 255.0


def load_dataset(data_dir, need: str = "binary") -> list[Sample]:
    """Samples from a ``gen`` directory. ``need`` is ``"binary"`` or ``"partition"``."""
    root = Path(data_dir)
    img_dir = root / "images"
    if not img_dir.is_dir():
        raise ConfigError(f"{root}: no images/ directory")
    samples = []
    for path in sorted(img_dir.glob("*.png")):
        part = binary = None
        if need == "partition":
            part = read_mask_png(root / "partitions" / path.name, kind="partition")
        else:
            bpath = root / "binary" / path.name
            if bpath.exists():
                binary = read_mask_png(bpath)
            else:
                part = read_mask_png(root / "partitions" / path.name, kind="partition")
                binary = (part != 0).astype(np.uint8)
        samples.append(Sample(path.stem, to_uint8(read_image_png(path)), part, binary))
    if not samples:
        raise ConfigError(f"{root}: dataset is empty")
    return samples


def _batches(n: int, batch_size: int, seed: int, epoch: int):
    order = rng(seed, _PURPOSE_ORDER, epoch).permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _resume_state(resume, mode: str):
    params, extra = read_checkpoint(resume)
    vel = extra.get(f"opt.{mode}.velocity")
    epoch = int(extra.get(f"opt.{mode}.epoch", np.zeros(1))[0])
    return params, (None if vel is None else vel.ravel()), epoch


def save_state(path, opt: SGD, mode: str, epoch: int) -> None:
    write_checkpoint(path, opt.params, {f"opt.{mode}.velocity": opt.velocity,
                                        f"opt.{mode}.epoch": np.array([epoch])})


# -- loops -----------------------------------------------------------------------

def pretrain(cfg: TrainConfig, data_dir, seed: int, params: ModelParams | None = None,
             resume=None, state_path=None,
             on_epoch: Callable[[EpochLog], None] | None = None):
    """Train the encoder with the region-to-region loss.

    Returns ``(params, logs)``. ``state_path``, when given, receives a
    resumable checkpoint after every epoch.
    """
    samples = [s for s in load_dataset(data_dir, need="partition")
               if np.unique(downsample_partition(s.partition)).size >= 2]
    if not samples:
        raise ConfigError("pretraining needs images with at least two source regions")
    start = 0
    velocity = None
    if resume is not None:
        params, velocity, start = _resume_state(resume, "pretrain")
    elif params is None:
        params = init_params(seed)
    else:
        params = params.copy()
    opt = SGD(params, "pretrain", cfg.lr, cfg.momentum, velocity)
    spec = cfg.loss_spec("pretrain")
    logs = []
    for epoch in range(start, cfg.epochs):
        losses = []
        for idx in _batches(len(samples), cfg.batch_size, seed, epoch):
            batch = [PretrainItem(postprocess(samples[i].float_image(), cfg.augment,
                                              derive_seed(seed, _PURPOSE_AUG, epoch, int(i))),
                                  samples[i].partition) for i in idx]
            loss, grads = loss_and_gradients(params, batch, spec)
            opt.step(grads)
            losses.append(loss)
        entry = EpochLog(epoch, float(np.mean(losses)))
        logs.append(entry)
        log.info("pretrain epoch %d loss %.5f", epoch, entry.loss)
        if state_path is not None:
            save_state(state_path, opt, "pretrain", epoch + 1)
        if on_epoch:
            on_epoch(entry)
    return params, logs


def _prompt_batch(samples, grids, comps, idx, cfg: TrainConfig, seed: int, epoch: int):
    batch = []
    for i in idx:
        s = samples[i]
        pairs = sample_point_pairs(s.binary, cfg.pairs_per_image,
                                   derive_seed(seed, _PURPOSE_PAIRS, epoch, int(i)))
        pts = [p for pair in pairs for p in pair]
        masks = [point_mask(s.binary, p, comps[i]) for p in pts]
        batch.append(PromptItem(pts, masks, grid=grids[i]))
    return batch


def train(cfg: TrainConfig, data_dir, pretrained: ModelParams | None, seed: int,
          resume=None, state_path=None,
          on_epoch: Callable[[EpochLog], None] | None = None):
    """Train decoder and confidence head on point masks; encoder stays frozen."""
    if pretrained is None and resume is None:
        raise ConfigError("training needs a pretrained checkpoint")
    samples = load_dataset(data_dir, need="binary")
    start = 0
    velocity = None
    if resume is not None:
        params, velocity, start = _resume_state(resume, "train")
    else:
        params = pretrained.copy()
    grids = [encode_image(params, s.float_image()) for s in samples]
    comps = [connected_components(s.binary) for s in samples]
    opt = SGD(params, "train", cfg.lr, cfg.momentum, velocity)
    spec = cfg.loss_spec("train")
    logs = []
    for epoch in range(start, cfg.epochs):
        losses, accs = [], []
        for idx in _batches(len(samples), cfg.batch_size, seed, epoch):
            batch = _prompt_batch(samples, grids, comps, idx, cfg, seed, epoch)
            loss, grads, batch_accs = loss_and_gradients(params, batch, spec, return_accs=True)
            opt.step(grads)
            losses.append(loss)
            accs.extend(batch_accs)
        entry = EpochLog(epoch, float(np.mean(losses)), float(np.mean(accs)))
        logs.append(entry)
        log.info("train epoch %d loss %.5f acc %.4f", epoch, entry.loss, entry.acc)
        if state_path is not None:
            save_state(state_path, opt, "train", epoch + 1)
        if on_epoch:
            on_epoch(entry)
    return params, logs


def train_plain(cfg: TrainConfig, data_dir, pretrained: ModelParams, seed: int):
    """Baseline: the same scorer with no prompt, fit with plain BCE on the binary mask."""
    samples = load_dataset(data_dir, need="binary")
    params = pretrained.copy()
    grids = [encode_image(params, s.float_image()) for s in samples]
    opt = SGD(params, "plain", cfg.lr, cfg.momentum)
    spec = cfg.loss_spec("plain")
    logs = []
    for epoch in range(cfg.epochs):
        losses = []
        for idx in _batches(len(samples), cfg.batch_size, seed, epoch):
            batch = [PlainItem(samples[i].binary, grid=grids[i]) for i in idx]
            loss, grads = loss_and_gradients(params, batch, spec)
            opt.step(grads)
            losses.append(loss)
        logs.append(EpochLog(epoch, float(np.mean(losses))))
    return params, logs


def write_log_csv(path, logs: list[EpochLog]) -> None:
    lines = ["epoch,loss,acc"]
    for e in logs:
        acc = "" if e.acc is None else repr(e.acc)
        lines.append(f"{e.epoch},{e.loss!r},{acc}")
    Path(path).write_text("\n".join(lines) + "\n")


def config_json(cfg: TrainConfig) -> str:
    return json.dumps(asdict(cfg), indent=1)
