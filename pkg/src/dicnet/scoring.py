"""Anomaly scores from the teacher/student discrepancy."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch.nn import functional as F

from .distill import ChannelStats, discrepancy_maps
from .model import OUTPUT_STRIDE, Branch

UPSAMPLE_MODES = ("bilinear", "nearest")
COLORMAP = "inferno"


@dataclass
class AnomalyScoreMap:
    values: np.ndarray  # H x W, non-negative
    source_id: str = ""


def anomaly_score(
    d: np.ndarray,
    stats: ChannelStats,
    channels: np.ndarray | None = None,
    mahalanobis: bool = False,
    eps: float = 1e-6,
) -> np.ndarray:
    """Mean over channels of ``(d - mu)^2`` at every cell of an ``(h, w, C)`` map.

    ``channels`` restricts the average to a subset. ``mahalanobis`` divides each
    term by ``sigma^2 + eps``; that variant is an extension and off by default.
    """
    d = np.asarray(d, dtype=np.float64)
    if d.shape[-1] != stats.mu.shape[0]:
        raise ValueError(f"D has {d.shape[-1]} channels, stats have {stats.mu.shape[0]}")
    mu, sigma = stats.mu, stats.sigma
    if channels is not None:
        d, mu, sigma = d[..., channels], mu[channels], sigma[channels]
    sq = (d - mu) ** 2
    if mahalanobis:
        sq = sq / (sigma**2 + eps)
    return sq.mean(axis=-1)


def upsample_scores(coarse: np.ndarray, height: int, width: int, mode: str = "bilinear") -> np.ndarray:
    """x8 upsampling (``align_corners=False`` for bilinear)."""
    coarse = np.asarray(coarse, dtype=np.float64)
    h, w = coarse.shape
    if (height, width) != (h * OUTPUT_STRIDE, w * OUTPUT_STRIDE):
        raise ValueError(f"cannot upsample {coarse.shape} to {(height, width)}")
    if mode not in UPSAMPLE_MODES:
        raise ValueError(f"unknown upsampling mode {mode!r}")
    t = torch.from_numpy(coarse)[None, None]
    kw = {"align_corners": False} if mode == "bilinear" else {}
    out = F.interpolate(t, size=(height, width), mode=mode, **kw)[0, 0].numpy()
    # convex weights keep the coarse range; clamp float round-off below zero
    return np.maximum(out, 0.0)


def score_image(
    teacher: Branch,
    student: Branch,
    stats: ChannelStats,
    image: np.ndarray,
    source_id: str = "",
    mode: str = "bilinear",
) -> AnomalyScoreMap:
    from .data import ImageSample

    h, w = image.shape[:2]
    sample = ImageSample(image=image, label=np.zeros((h, w), np.uint8), id=source_id or "image", split="test")
    (d,) = list(discrepancy_maps(teacher, student, [sample]))
    return AnomalyScoreMap(upsample_scores(anomaly_score(d, stats), h, w, mode), source_id)


def score_samples(teacher, student, stats, samples, mode: str = "bilinear"):
    """Score maps for many samples, batched through both branches."""
    for s, d in zip(samples, discrepancy_maps(teacher, student, samples)):
        h, w = s.label.shape
        yield AnomalyScoreMap(upsample_scores(anomaly_score(d, stats), h, w, mode), s.id)


# ---------------------------------------------------------------------------
# export

def stats_hash(stats: ChannelStats) -> str:
    return hashlib.sha256(stats.to_json().encode()).hexdigest()[:16]


def write_score_map(score: AnomalyScoreMap, path: str | Path, stats: ChannelStats | None = None,
                    mode: str = "bilinear") -> None:
    """Raw little-endian float32 raster plus a JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w = score.values.shape
    score.values.astype("<f4").tofile(path.with_suffix(".f32"))
    sidecar = {
        "height": h,
        "width": w,
        "source_id": score.source_id,
        "stats_hash": stats_hash(stats) if stats is not None else None,
        "upsampling": {"mode": mode, "align_corners": False, "factor": OUTPUT_STRIDE},
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def read_score_map(path: str | Path) -> AnomalyScoreMap:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    values = np.fromfile(path.with_suffix(".f32"), dtype="<f4").reshape(meta["height"], meta["width"])
    return AnomalyScoreMap(values, meta["source_id"])


def write_score_png(score: AnomalyScoreMap, path: str | Path) -> None:
    """Min-max normalized to [0, 1], mapped through matplotlib's ``inferno``."""
    from matplotlib import colormaps
    from PIL import Image

    v = score.values.astype(np.float64)
    lo, hi = v.min(), v.max()
    v = (v - lo) / (hi - lo) if hi > lo else np.zeros_like(v)
    rgb = (colormaps[COLORMAP](v)[..., :3] * 255).round().astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(rgb).save(path)
