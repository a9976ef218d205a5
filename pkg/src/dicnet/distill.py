"""Teacher training, student distillation and estimation of the per-channel
discrepancy means used by the scoring rule."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch.nn import functional as F

from .data import ConfigError, DatasetError, DatasetSpec, ImageSample
from .model import (
    BackboneConfig,
    Branch,
    NormalizedFeatureMap,
    RoleError,
    channel_normalize_t,
    to_tensor,
)

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 20
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    lr_schedule: dict | None = None  # {"epoch": int, "factor": float}: lr *= factor from that epoch on
    hflip: bool = False
    deterministic: bool = True
    seed: int = 0
    # epochs at which the distillation log keeps a discrepancy snapshot (0 = before training)
    snapshot_epochs: list[int] | None = None
    snapshot_images: int = 16

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.optimizer not in ("sgd-momentum", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


# Settings for full-size street-scene datasets; the toy defaults above
# are what the desk-scale benchmark uses.
FULL_SCALE_TEACHER = TrainConfig(
    batch_size=2, epochs=23, optimizer="sgd-momentum", learning_rate=2e-2, momentum=0.9, weight_decay=1e-4
)
FULL_SCALE_STUDENT = TrainConfig(
    batch_size=4, epochs=110, optimizer="adam", learning_rate=1e-4, betas=(0.9, 0.999), weight_decay=1e-5
)
FULL_SCALE_BDD_TEACHER = TrainConfig(
    batch_size=2, epochs=19, optimizer="sgd-momentum", learning_rate=2e-2, momentum=0.9, weight_decay=1e-4
)
FULL_SCALE_BDD_STUDENT = TrainConfig(
    batch_size=4, epochs=160, optimizer="adam", learning_rate=1e-4, betas=(0.9, 0.999), weight_decay=1e-5,
    lr_schedule={"epoch": 65, "factor": 0.1},
)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_metric: float | None
    wall_time: float


@dataclass
class Snapshot:
    """Discrepancy distribution at one epoch: channel stats plus a pooled sample of d values."""

    epoch: int
    mu: np.ndarray
    sigma: np.ndarray
    values: np.ndarray


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    snapshots: list[Snapshot] = field(default_factory=list)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in self.records)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl())

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.records]


# ---------------------------------------------------------------------------
# discrepancy and loss

def discrepancy(ft, fs) -> np.ndarray:
    """Elementwise teacher - student difference of normalized feature maps."""
    ft = ft.values if isinstance(ft, NormalizedFeatureMap) else np.asarray(ft)
    fs = fs.values if isinstance(fs, NormalizedFeatureMap) else np.asarray(fs)
    if ft.shape != fs.shape:
        raise ValueError(f"shape mismatch: teacher {ft.shape} vs student {fs.shape}")
    return ft - fs


def distillation_loss(d) -> float:
    """Mean of squared discrepancies over batch, channels and positions."""
    d = np.asarray(d, dtype=np.float64)
    return float(np.mean(d * d)) if d.size else 0.0


def discrepancy_t(teacher: Branch, student: Branch, x: torch.Tensor) -> torch.Tensor:
    """NCHW discrepancy; the teacher side never tracks gradients."""
    with torch.no_grad():
        ft = channel_normalize_t(teacher(x))
    return ft - channel_normalize_t(student(x))


def distillation_loss_t(d: torch.Tensor) -> torch.Tensor:
    return d.pow(2).mean()


# ---------------------------------------------------------------------------
# helpers

def set_determinism(cfg: TrainConfig) -> None:
    torch.manual_seed(cfg.seed)
    torch.use_deterministic_algorithms(cfg.deterministic)


def _stack(samples: Sequence[ImageSample], dtype=torch.float32):
    images = np.stack([s.image for s in samples])
    labels = np.stack([s.label for s in samples])
    return to_tensor(images, dtype), torch.from_numpy(labels.astype(np.int64))


def _optimizer(params, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.learning_rate, betas=cfg.betas, weight_decay=cfg.weight_decay)
    return torch.optim.SGD(params, lr=cfg.learning_rate, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def _set_lr(opt, cfg: TrainConfig, epoch: int) -> None:
    lr = cfg.learning_rate
    if cfg.lr_schedule and epoch >= cfg.lr_schedule["epoch"]:
        lr *= cfg.lr_schedule["factor"]
    for g in opt.param_groups:
        g["lr"] = lr


def _batches(n: int, cfg: TrainConfig, epoch: int):
    order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
    for i in range(0, n, cfg.batch_size):
        yield torch.from_numpy(order[i : i + cfg.batch_size])


def _maybe_flip(x, y, cfg: TrainConfig, epoch: int, step: int):
    if not cfg.hflip:
        return x, y
    flip = torch.from_numpy(np.random.default_rng([cfg.seed, epoch, step, 1]).random(x.shape[0]) < 0.5)
    x = torch.where(flip.view(-1, 1, 1, 1), x.flip(-1), x)
    if y is not None:
        y = torch.where(flip.view(-1, 1, 1), y.flip(-1), y)
    return x, y


def check_no_anomaly(samples: Sequence[ImageSample], anomaly_id: int) -> None:
    for s in samples:
        if np.any(s.label == anomaly_id):
            raise DatasetError(f"{s.split}/{s.id} contains anomaly pixels; training splits must not")


# ---------------------------------------------------------------------------
# teacher

def confusion_matrix(pred: np.ndarray, label: np.ndarray, num_classes: int, ignore_id: int) -> np.ndarray:
    keep = (label != ignore_id) & (label < num_classes)
    idx = label[keep].astype(np.int64) * num_classes + pred[keep].astype(np.int64)
    return np.bincount(idx, minlength=num_classes**2).reshape(num_classes, num_classes)


def miou(conf: np.ndarray) -> float:
    inter = np.diag(conf).astype(np.float64)
    union = conf.sum(0) + conf.sum(1) - inter
    present = union > 0
    return float((inter[present] / union[present]).mean()) if present.any() else 0.0


@torch.no_grad()
def evaluate_miou(teacher: Branch, samples: Sequence[ImageSample], ignore_id: int, batch_size: int = 32) -> float:
    teacher.eval()
    z = teacher.num_classes
    conf = np.zeros((z, z), dtype=np.int64)
    dtype = next(teacher.parameters()).dtype
    for i in range(0, len(samples), batch_size):
        x, y = _stack(samples[i : i + batch_size], dtype)
        pred = teacher.logits(x).argmax(1).numpy()
        conf += confusion_matrix(pred, y.numpy(), z, ignore_id)
    return miou(conf)


def train_teacher(
    train: Sequence[ImageSample],
    spec: DatasetSpec,
    model_config: BackboneConfig,
    train_config: TrainConfig,
    val: Sequence[ImageSample] = (),
) -> tuple[Branch, TrainLog]:
    """Per-pixel cross-entropy on the known classes, ``ignore_id`` masked."""
    check_no_anomaly(train, spec.anomaly_id)
    set_determinism(train_config)
    teacher = Branch(model_config, "teacher", spec.num_known_classes)
    x_all, y_all = _stack(train)
    opt = _optimizer(teacher.parameters(), train_config)
    log = TrainLog()
    start = time.perf_counter()
    for epoch in range(1, train_config.epochs + 1):
        _set_lr(opt, train_config, epoch)
        teacher.train()
        total, count = 0.0, 0
        for step, idx in enumerate(_batches(len(train), train_config, epoch)):
            x, y = _maybe_flip(x_all[idx], y_all[idx], train_config, epoch, step)
            loss = F.cross_entropy(teacher.logits(x), y, ignore_index=spec.ignore_id)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        teacher.epoch = epoch
        val_metric = evaluate_miou(teacher, val, spec.ignore_id) if len(val) else None
        log.records.append(EpochRecord(epoch, total / count, val_metric, time.perf_counter() - start))
        logger.info("teacher epoch %d loss %.4f val mIoU %s", epoch, total / count, val_metric)
    opt.zero_grad(set_to_none=True)
    return teacher.eval(), log


# ---------------------------------------------------------------------------
# student

@torch.no_grad()
def _eval_distill_loss(teacher, student, x_all, batch_size=64) -> float:
    total = 0.0
    for i in range(0, x_all.shape[0], batch_size):
        d = discrepancy_t(teacher, student, x_all[i : i + batch_size])
        total += d.pow(2).mean(dim=(1, 2, 3)).sum().item()
    return total / x_all.shape[0]


@torch.no_grad()
def _snapshot(teacher, student, x_all, epoch, n_images) -> Snapshot:
    acc = ChannelStatsAccumulator()
    for i in range(0, x_all.shape[0], 64):
        acc.update(discrepancy_t(teacher, student, x_all[i : i + 64]).permute(0, 2, 3, 1).numpy())
    stats = acc.finalize()
    sample = discrepancy_t(teacher, student, x_all[:n_images]).numpy().ravel()
    return Snapshot(epoch=epoch, mu=stats.mu, sigma=stats.sigma, values=sample)


def distill_student(
    teacher: Branch,
    train: Sequence[ImageSample],
    student_config: BackboneConfig,
    train_config: TrainConfig,
    val: Sequence[ImageSample] = (),
    student: Branch | None = None,
    anomaly_id: int | None = None,
    on_epoch: Callable[[Branch, int], None] | None = None,
) -> tuple[Branch, TrainLog]:
    """Fit a student's normalized features to the frozen teacher's.

    The log holds one record per epoch (epoch 0 is the untrained student) and
    snapshots at ``train_config.snapshot_epochs``. ``on_epoch`` is called with
    the student after every epoch (used by the size study).
    """
    if teacher.role != "teacher":
        raise RoleError("distill_student needs teacher params")
    if student_config.feature_channels != teacher.config.feature_channels:
        raise ConfigError(
            f"student C={student_config.feature_channels} != teacher C={teacher.config.feature_channels}"
        )
    if anomaly_id is not None:
        check_no_anomaly(train, anomaly_id)
    set_determinism(train_config)
    dtype = next(teacher.parameters()).dtype
    if student is None:
        student = Branch(student_config, "student").to(dtype)
    teacher.eval()
    x_all, _ = _stack(train, dtype)
    x_val = _stack(val, dtype)[0] if len(val) else None
    opt = _optimizer(student.parameters(), train_config)
    snap_epochs = set(train_config.snapshot_epochs or [])
    log = TrainLog()
    start = time.perf_counter()

    def record(epoch, loss):
        v = _eval_distill_loss(teacher, student, x_val) if x_val is not None else None
        log.records.append(EpochRecord(epoch, loss, v, time.perf_counter() - start))
        if epoch in snap_epochs:
            log.snapshots.append(_snapshot(teacher, student, x_all, epoch, train_config.snapshot_images))
        logger.info("student epoch %d loss %.5f val %s", epoch, loss, v)

    record(0, _eval_distill_loss(teacher, student, x_all))
    for epoch in range(1, train_config.epochs + 1):
        _set_lr(opt, train_config, epoch)
        student.train()
        total = 0.0
        for step, idx in enumerate(_batches(len(train), train_config, epoch)):
            x, _ = _maybe_flip(x_all[idx], None, train_config, epoch, step)
            loss = distillation_loss_t(discrepancy_t(teacher, student, x))
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        student.epoch = epoch
        student.eval()
        record(epoch, total / len(train))
        if on_epoch is not None:
            on_epoch(student, epoch)
    return student.eval(), log


# ---------------------------------------------------------------------------
# per-channel discrepancy statistics

@dataclass
class ChannelStats:
    mu: np.ndarray
    sigma: np.ndarray
    pixel_count: int

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.pixel_count <= 0:
            raise ValueError("ChannelStats needs pixel_count > 0")
        if np.any(self.sigma < 0):
            raise ValueError("sigma must be non-negative")

    def to_json(self) -> str:
        return json.dumps(
            {"mu": self.mu.tolist(), "sigma": self.sigma.tolist(), "pixel_count": int(self.pixel_count)},
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "ChannelStats":
        d = json.loads(text)
        return cls(np.array(d["mu"]), np.array(d["sigma"]), int(d["pixel_count"]))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "ChannelStats":
        return cls.from_json(Path(path).read_text())

    @classmethod
    def zeros(cls, channels: int) -> "ChannelStats":
        return cls(np.zeros(channels), np.zeros(channels), 1)


class ChannelStatsAccumulator:
    """Streaming per-channel count/mean/M2 with an associative ``merge``."""

    def __init__(self):
        self.count = 0
        self.mean = None
        self.m2 = None

    def update(self, d: np.ndarray) -> "ChannelStatsAccumulator":
        """``d`` is ``(..., C)``; every leading position counts as one sample."""
        d = np.asarray(d, dtype=np.float64)
        flat = d.reshape(-1, d.shape[-1])
        if flat.shape[0] == 0:
            return self
        other = ChannelStatsAccumulator()
        other.count = flat.shape[0]
        other.mean = flat.mean(axis=0)
        other.m2 = ((flat - other.mean) ** 2).sum(axis=0)
        return self.merge(other)

    def merge(self, other: "ChannelStatsAccumulator") -> "ChannelStatsAccumulator":
        if other.count == 0:
            return self
        if self.count == 0:
            self.count, self.mean, self.m2 = other.count, other.mean.copy(), other.m2.copy()
            return self
        n = self.count + other.count
        delta = other.mean - self.mean
        self.mean = self.mean + delta * (other.count / n)
        self.m2 = self.m2 + other.m2 + delta**2 * (self.count * other.count / n)
        self.count = n
        return self

    def finalize(self) -> ChannelStats:
        if self.count == 0:
            raise ValueError("no discrepancy values accumulated")
        return ChannelStats(self.mean.copy(), np.sqrt(np.maximum(self.m2 / self.count, 0.0)), self.count)


@torch.no_grad()
def discrepancy_maps(teacher: Branch, student: Branch, samples: Sequence[ImageSample], batch_size: int = 64):
    """Yield ``(h, w, C)`` discrepancy arrays, one per sample, in order."""
    teacher.eval()
    student.eval()
    dtype = next(teacher.parameters()).dtype
    for i in range(0, len(samples), batch_size):
        x, _ = _stack(samples[i : i + batch_size], dtype)
        d = discrepancy_t(teacher, student, x).permute(0, 2, 3, 1).numpy()
        yield from d


def estimate_channel_stats(
    teacher: Branch, student: Branch, samples: Sequence[ImageSample], anomaly_id: int | None = None
) -> ChannelStats:
    """One streaming pass: mean and population std of every channel of D."""
    if not len(samples):
        raise DatasetError("cannot estimate channel stats from an empty split")
    if anomaly_id is not None:
        check_no_anomaly(samples, anomaly_id)
    acc = ChannelStatsAccumulator()
    for d in discrepancy_maps(teacher, student, samples):
        acc.update(d)
    return acc.finalize()
