"""Optimizer, learning-rate schedule, two-stage training, and augmentation.

Stage 1 trains every parameter (including the learned loss weights) against
the combined uncertainty-weighted loss. Stage 2 fine-tunes one regression
head with its own loss while every other parameter stays bitwise frozen.

All randomness is derived from (seed, epoch, sample index), so runs are
reproducible sample-for-sample regardless of batch assembly.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import PoseDataset
from .geometry import LossWeights, combined_loss, orientation_loss, position_loss
from .imageops import bilinear_resize
from .model import TransPoseNet
from .tensor import Tensor

__all__ = [
    "TrainConfig",
    "AugmentConfig",
    "TrainingDiverged",
    "Adam",
    "lr_at",
    "train_stage1",
    "train_stage2",
    "augment",
    "write_loss_csv",
    "write_manifest",
]


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-10
    lr: float = 1e-4
    lr_decay: float = 0.1
    lr_decay_every: int = 200
    epochs: int = 600
    weight_decay: float = 1e-4
    stage2_lr: float | None = None
    stage2_weight_decay: float | None = None
    stage2_orientation_prior: bool = False
    s_x_init: float = 0.0
    s_q_init: float = -3.0
    seed: int = 0
    decoupled_weight_decay: bool = True

    @classmethod
    def indoor(cls, **overrides) -> "TrainConfig":
        base = dict(lr_decay_every=100, epochs=300, stage2_lr=1e-3, stage2_weight_decay=1e-2,
                    stage2_orientation_prior=False)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def outdoor(cls, **overrides) -> "TrainConfig":
        base = dict(lr_decay_every=200, epochs=600, stage2_orientation_prior=True)
        base.update(overrides)
        return cls(**base)


@dataclass
class AugmentConfig:
    resize_to: int = 256
    crop: int = 224
    jitter: float = 0.1
    enabled: bool = True


def lr_at(epoch: int, config: TrainConfig, base: float | None = None) -> float:
    """Step schedule: base * decay^floor(epoch / period)."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    if base is None:
        base = config.lr
    return base * config.lr_decay ** (epoch // config.lr_decay_every)


class Adam:
    """Standard Adam with bias correction; weight decay is decoupled by
    default (applied straight to the parameter) and switchable to classic L2."""

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-10):
        self.params = dict(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float, weight_decay: float = 0.0, decoupled: bool = True) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if weight_decay and not decoupled:
                g = g + weight_decay * p.data
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if weight_decay and decoupled:
                update = update + weight_decay * p.data
            p.data -= lr * update


# ---- training loops ------------------------------------------------------------


@dataclass
class EpochStats:
    epoch: int
    l_x: float
    l_q: float
    l_p: float
    s_x: float
    s_q: float
    lr: float


@dataclass
class TrainResult:
    loss_curve: list[EpochStats] = field(default_factory=list)
    steps: int = 0
    weights: LossWeights | None = None


def _epoch_batches(n: int, batch_size: int, seed: int, epoch: int):
    order = np.random.default_rng([seed, epoch]).permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _batch_losses(model: TransPoseNet, dataset: PoseDataset, batch, cfg: TrainConfig,
                  epoch: int, transform, stream_tag: int):
    """Mean position and orientation losses over one batch, as tensors."""
    l_x_sum = Tensor(0.0)
    l_q_sum = Tensor(0.0)
    for idx in batch:
        idx = int(idx)
        rec = dataset[idx]
        img = dataset.image(idx)
        if transform is not None:
            img = transform(img, np.random.default_rng([cfg.seed, epoch, idx, stream_tag]))
        rng = np.random.default_rng([cfg.seed, epoch, idx, stream_tag + 1])
        x_hat, q_hat, _, _ = model.forward(img, train=True, rng=rng)
        l_x_sum = l_x_sum + position_loss(x_hat[0], rec.pose.x)
        l_q_sum = l_q_sum + orientation_loss(q_hat[0], rec.pose.q)
    inv = Tensor(1.0 / len(batch))
    return l_x_sum * inv, l_q_sum * inv


def train_stage1(model: TransPoseNet, dataset: PoseDataset, cfg: TrainConfig,
                 weights: LossWeights | None = None, transform=None, log=None) -> TrainResult:
    """Minimize the combined loss over all parameters, loss weights included."""
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if weights is None:
        weights = LossWeights.from_values(cfg.s_x_init, cfg.s_q_init)
    params = dict(model.named_parameters())
    params["loss.s_x"] = weights.s_x
    params["loss.s_q"] = weights.s_q
    opt = Adam(params, cfg.beta1, cfg.beta2, cfg.eps)
    result = TrainResult(weights=weights)
    n = len(dataset)
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        acc = np.zeros(3)
        for batch in _epoch_batches(n, cfg.batch_size, cfg.seed, epoch):
            opt.zero_grad()
            l_x, l_q = _batch_losses(model, dataset, batch, cfg, epoch, transform, stream_tag=1)
            loss = combined_loss(l_x, l_q, weights)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(f"loss is not finite at epoch {epoch}, step {result.steps}")
            loss.backward()
            opt.step(lr, cfg.weight_decay, cfg.decoupled_weight_decay)
            result.steps += 1
            acc += np.array([l_x.item(), l_q.item(), value]) * (len(batch) / n)
        stats = EpochStats(epoch, acc[0], acc[1], acc[2], weights.s_x.item(), weights.s_q.item(), lr)
        result.loss_curve.append(stats)
        if log is not None:
            log(stats)
    return result


def train_stage2(model: TransPoseNet, dataset: PoseDataset, cfg: TrainConfig, head: str,
                 transform=None, log=None) -> TrainResult:
    """Fine-tune one regression head with its own loss; everything else frozen.

    For the orientation head with the outdoor profile, the latent position
    prior is enabled first, widening the head input to twice the embed dim.
    """
    if head not in ("position", "orientation"):
        raise ValueError(f"head must be position or orientation, got {head!r}")
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if head == "orientation" and cfg.stage2_orientation_prior:
        model.enable_orientation_prior()
    all_params = model.named_parameters()
    head_params = {n: all_params[n] for n in model.head_parameter_names(head)}
    opt = Adam(head_params, cfg.beta1, cfg.beta2, cfg.eps)
    base_lr = cfg.stage2_lr if cfg.stage2_lr is not None else cfg.lr
    wd = cfg.stage2_weight_decay if cfg.stage2_weight_decay is not None else cfg.weight_decay
    result = TrainResult()
    n = len(dataset)
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg, base=base_lr)
        acc = np.zeros(3)
        for batch in _epoch_batches(n, cfg.batch_size, cfg.seed, epoch):
            for p in all_params.values():
                p.zero_grad()
            l_x, l_q = _batch_losses(model, dataset, batch, cfg, epoch, transform, stream_tag=3)
            loss = l_x if head == "position" else l_q
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(f"loss is not finite at epoch {epoch}, step {result.steps}")
            loss.backward()
            opt.step(lr, wd, cfg.decoupled_weight_decay)
            result.steps += 1
            acc += np.array([l_x.item(), l_q.item(), value]) * (len(batch) / n)
        stats = EpochStats(epoch, acc[0], acc[1], acc[2], float("nan"), float("nan"), lr)
        result.loss_curve.append(stats)
        if log is not None:
            log(stats)
    return result


# ---- augmentation ------------------------------------------------------------------


_LUMA = np.array([0.299, 0.587, 0.114])


def augment(image: np.ndarray, mode: str, rng: np.random.Generator | None = None,
            cfg: AugmentConfig | None = None) -> np.ndarray:
    """Resize the smaller edge, crop (random at train, center at test), and
    on the train path jitter brightness/contrast/saturation. Output clamped
    to [0, 1]."""
    if cfg is None:
        cfg = AugmentConfig()
    if mode not in ("train", "test"):
        raise ValueError(f"mode must be train or test, got {mode!r}")
    if cfg.resize_to < cfg.crop:
        raise ValueError(f"resize target {cfg.resize_to} smaller than crop {cfg.crop}")
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or min(img.shape[1:]) < 1:
        raise ValueError(f"degenerate image of shape {img.shape}")
    c, h, w = img.shape
    if h <= w:
        nh, nw = cfg.resize_to, max(cfg.crop, round(w * cfg.resize_to / h))
    else:
        nh, nw = max(cfg.crop, round(h * cfg.resize_to / w)), cfg.resize_to
    img = bilinear_resize(img, nh, nw)
    if mode == "train":
        if rng is None:
            raise ValueError("train-mode augmentation needs an rng")
        top = int(rng.integers(0, nh - cfg.crop + 1))
        left = int(rng.integers(0, nw - cfg.crop + 1))
    else:
        top, left = (nh - cfg.crop) // 2, (nw - cfg.crop) // 2
    out = img[:, top : top + cfg.crop, left : left + cfg.crop]
    if mode == "train" and cfg.jitter > 0.0:
        b, ct, sat = rng.uniform(1.0 - cfg.jitter, 1.0 + cfg.jitter, size=3)
        out = out * b
        mean = out.mean()
        out = mean + (out - mean) * ct
        gray = np.tensordot(_LUMA, out, axes=(0, 0))[None]
        out = gray + (out - gray) * sat
    return np.clip(out, 0.0, 1.0)


# ---- run artifacts --------------------------------------------------------------------


def write_loss_csv(path, curve: list[EpochStats]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "l_x", "l_q", "l_p", "s_x", "s_q", "lr"])
        for row in curve:
            writer.writerow([row.epoch, row.l_x, row.l_q, row.l_p, row.s_x, row.s_q, row.lr])


def dataset_fingerprint(dataset: PoseDataset) -> str:
    digest = hashlib.sha256()
    for rec in dataset.records:
        digest.update(rec.image_id.encode())
        digest.update(rec.pose.x.tobytes())
        digest.update(rec.pose.q.tobytes())
    return digest.hexdigest()


def write_manifest(path, config_echo: dict, seed: int, dataset: PoseDataset) -> None:
    payload = {
        "config": config_echo,
        "seed": seed,
        "dataset_records": len(dataset),
        "dataset_sha256": dataset_fingerprint(dataset),
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
