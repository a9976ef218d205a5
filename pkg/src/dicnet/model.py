"""Backbone, channel-wise normalization, classification head and the MSP baseline.

Public functions take and return numpy arrays in HWC layout; the ``*_t``
variants work on NCHW torch tensors and are what the training loops use.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .data import ConfigError

EPS = 1e-6
OUTPUT_STRIDE = 8
# per-channel RGB standardization applied after scaling to [0, 1]
PIXEL_MEAN = (0.485, 0.456, 0.406)
PIXEL_STD = (0.229, 0.224, 0.225)

# (width, stride) per conv block; strides multiply to 8
FAMILIES = {
    "tiny": [(32, 2), (48, 2), (64, 2)],
    "small": [(32, 2), (32, 1), (48, 2), (64, 1), (64, 2)],
    "medium": [(32, 2), (32, 1), (48, 2), (48, 1), (64, 1), (96, 2), (96, 1)],
}


class RoleError(RuntimeError):
    pass


@dataclass
class BackboneConfig:
    family: str = "small"
    feature_channels: int = 64
    output_stride: int = OUTPUT_STRIDE
    pyramid_pooling: bool = False
    width_mult: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown backbone family {self.family!r}")
        if self.feature_channels < 1:
            raise ConfigError("feature_channels must be >= 1")
        if self.output_stride != OUTPUT_STRIDE:
            raise ConfigError("output_stride is fixed at 8")


class PyramidPooling(nn.Module):
    """Lightweight PSP block: pooled context at several grid sizes, upsampled and concatenated."""

    def __init__(self, in_ch: int, sizes=(1, 2, 4)):
        super().__init__()
        branch_ch = max(in_ch // len(sizes), 1)
        self.stages = nn.ModuleList(
            nn.Sequential(nn.AdaptiveAvgPool2d(s), nn.Conv2d(in_ch, branch_ch, 1, bias=False), nn.ReLU())
            for s in sizes
        )
        self.out_channels = in_ch + branch_ch * len(sizes)

    def forward(self, x):
        h, w = x.shape[2:]
        outs = [x]
        for stage in self.stages:
            outs.append(F.interpolate(stage(x), size=(h, w), mode="bilinear", align_corners=False))
        return torch.cat(outs, dim=1)


def _block(in_ch, out_ch, stride):
    # GroupNorm keeps train/eval forward identical and per-image independent
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False),
        nn.GroupNorm(math.gcd(8, out_ch), out_ch),
        nn.ReLU(inplace=True),
    )


class Backbone(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        layers = []
        in_ch = 3
        for width, stride in FAMILIES[config.family]:
            width = max(int(round(width * config.width_mult)), 1)
            layers.append(_block(in_ch, width, stride))
            in_ch = width
        self.blocks = nn.Sequential(*layers)
        self.ppm = PyramidPooling(in_ch) if config.pyramid_pooling else None
        if self.ppm is not None:
            in_ch = self.ppm.out_channels
        self.proj = nn.Conv2d(in_ch, config.feature_channels, 1)

    def forward(self, x):
        x = self.blocks(x)
        if self.ppm is not None:
            x = self.ppm(x)
        return self.proj(x)


class Branch(nn.Module):
    """One DiCNet branch: a backbone plus, for the teacher, a 1x1 classifier.

    ``role`` is ``"teacher"`` or ``"student"``. The classifier is only used to
    train the teacher and to produce semantic predictions for MSP and the
    E-/C-FPR decomposition; anomaly scoring never touches it.
    """

    def __init__(self, config: BackboneConfig, role: str, num_classes: int | None = None):
        super().__init__()
        if role not in ("teacher", "student"):
            raise RoleError(f"unknown role {role!r}")
        if role == "teacher" and not num_classes:
            raise ConfigError("a teacher needs num_classes for its head")
        self.config = config
        self.role = role
        self.num_classes = num_classes if role == "teacher" else None
        torch.manual_seed(config.seed)
        self.backbone = Backbone(config)
        self.head = nn.Conv2d(config.feature_channels, num_classes, 1) if role == "teacher" else None
        self.epoch = 0

    def forward(self, x):
        return self.backbone(x)

    def logits(self, x, upsample: bool = True):
        if self.role != "teacher":
            raise RoleError("forward_logits requires teacher params")
        out = self.head(self.backbone(x))
        if upsample:
            out = F.interpolate(out, scale_factor=OUTPUT_STRIDE, mode="bilinear", align_corners=False)
        return out

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_branch(config: BackboneConfig, role: str, num_classes: int | None = None) -> Branch:
    return Branch(config, role, num_classes).float().eval()


def copy_as_student(teacher: Branch) -> Branch:
    """A student with the teacher's exact backbone weights (fixed point of distillation)."""
    student = Branch(teacher.config, "student")
    student.backbone.load_state_dict(teacher.backbone.state_dict())
    return student.to(next(teacher.parameters()).dtype).eval()


# ---------------------------------------------------------------------------
# tensor-level ops

def to_tensor(images: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """uint8 (N)HWC RGB -> standardized NCHW tensor."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4 or images.shape[-1] != 3:
        raise ValueError(f"expected (N,)HxWx3 images, got {images.shape}")
    h, w = images.shape[1:3]
    if h % OUTPUT_STRIDE or w % OUTPUT_STRIDE:
        raise ValueError(f"image dims {(h, w)} not divisible by {OUTPUT_STRIDE}")
    x = torch.from_numpy(np.ascontiguousarray(images)).to(dtype).permute(0, 3, 1, 2) / 255.0
    mean = torch.tensor(PIXEL_MEAN, dtype=dtype).view(1, 3, 1, 1)
    std = torch.tensor(PIXEL_STD, dtype=dtype).view(1, 3, 1, 1)
    return (x - mean) / std


def channel_normalize_t(f: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Per-image, per-channel standardization over spatial positions of an NCHW tensor."""
    m = f.mean(dim=(2, 3), keepdim=True)
    b = (f - m).pow(2).mean(dim=(2, 3), keepdim=True).sqrt()
    return (f - m) / (b + eps)


def _dtype_of(params: Branch):
    return next(params.parameters()).dtype


# ---------------------------------------------------------------------------
# array-level API (HWC)

@dataclass
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray


@dataclass
class NormalizedFeatureMap:
    values: np.ndarray  # (H/8, W/8, C)
    stats: NormalizationStats


@torch.no_grad()
def forward_features(params: Branch, image: np.ndarray) -> np.ndarray:
    """Raw stride-8 features, shape ``(H/8, W/8, C)``."""
    params.eval()
    x = to_tensor(image, _dtype_of(params))
    return params(x)[0].permute(1, 2, 0).numpy()


def channel_normalize(f: np.ndarray, eps: float = EPS) -> NormalizedFeatureMap:
    """Standardize each channel of an ``(h, w, C)`` map by its own spatial mean
    and population standard deviation; ``eps`` guards constant channels."""
    f = np.asarray(f, dtype=np.float64)
    m = f.mean(axis=(0, 1))
    b = f.std(axis=(0, 1))
    return NormalizedFeatureMap(values=(f - m) / (b + eps), stats=NormalizationStats(mean=m, std=b))


@torch.no_grad()
def forward_logits(teacher: Branch, image: np.ndarray) -> np.ndarray:
    """Per-pixel class scores ``(H, W, Z)`` from the teacher's head."""
    if teacher.role != "teacher":
        raise RoleError("forward_logits requires teacher params")
    teacher.eval()
    x = to_tensor(image, _dtype_of(teacher))
    return teacher.logits(x)[0].permute(1, 2, 0).numpy()


def predict_labels(teacher: Branch, image: np.ndarray) -> np.ndarray:
    return forward_logits(teacher, image).argmax(axis=-1).astype(np.uint8)


def msp_score(logits: np.ndarray) -> np.ndarray:
    """``1 - max softmax``; higher means more anomalous."""
    logits = np.asarray(logits, dtype=np.float64)
    z = logits - logits.max(axis=-1, keepdims=True)
    p = np.exp(z)
    return 1.0 - 1.0 / p.sum(axis=-1)


# ---------------------------------------------------------------------------
# checkpoints: <stem>.npz (parameter archive) + <stem>.json (manifest)

def save_checkpoint(params: Branch, path: str | Path, dataset_hash: str = "", extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().cpu().numpy() for k, v in params.state_dict().items()}
    with open(path.with_suffix(".npz"), "wb") as fh:
        np.savez(fh, **state)
    manifest = {
        "config": asdict(params.config),
        "role": params.role,
        "num_classes": params.num_classes,
        "epoch": params.epoch,
        "dataset_hash": dataset_hash,
        "dtype": str(_dtype_of(params)).replace("torch.", ""),
    }
    if extra:
        manifest.update(extra)
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(path: str | Path) -> Branch:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    config = BackboneConfig(**manifest["config"])
    branch = Branch(config, manifest["role"], manifest.get("num_classes"))
    branch = branch.to(getattr(torch, manifest.get("dtype", "float32")))
    with np.load(path.with_suffix(".npz")) as arc:
        state = {k: torch.from_numpy(arc[k]) for k in arc.files}
    branch.load_state_dict(state)
    branch.epoch = manifest.get("epoch", 0)
    return branch.eval()


def params_digest(params: nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in sorted(params.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()
