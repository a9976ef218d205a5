"""Distribution diagnostics: per-class teacher feature histograms, discrepancy
histograms across distillation epochs, and score separability vs channel count."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from scipy import stats as sps

from .data import ImageSample
from .distill import ChannelStats, Snapshot, _stack, discrepancy_maps
from .metrics import ScoreLabelAccumulator, auroc
from .model import OUTPUT_STRIDE, Branch, channel_normalize_t
from .scoring import anomaly_score, upsample_scores


@dataclass
class HistogramSeries:
    name: str
    bin_edges: np.ndarray
    counts: dict[str, np.ndarray] = field(default_factory=dict)
    # descriptive moments per group: mean, std, skewness, excess kurtosis
    moments: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "bin_edges": self.bin_edges.tolist(),
            "counts": {k: v.tolist() for k, v in self.counts.items()},
            "moments": self.moments,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _moments(values: np.ndarray) -> dict[str, float]:
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2 or np.ptp(values) == 0:
        return {"mean": float(values.mean()) if values.size else 0.0, "std": 0.0,
                "skewness": 0.0, "kurtosis": 0.0, "n": int(values.size)}
    return {
        "mean": float(values.mean()),
        "std": float(values.std()),
        "skewness": float(sps.skew(values)),
        "kurtosis": float(sps.kurtosis(values)),
        "n": int(values.size),
    }


def _histograms(name, groups: dict[str, np.ndarray], bins: int) -> HistogramSeries:
    pooled = np.concatenate([v for v in groups.values() if v.size] or [np.zeros(1)])
    lo, hi = float(pooled.min()), float(pooled.max())
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    series = HistogramSeries(name=name, bin_edges=edges)
    for key, vals in groups.items():
        series.counts[key] = np.histogram(vals, bins=edges)[0]
        series.moments[key] = _moments(vals)
    return series


def downsample_labels(label: np.ndarray, ignore_id: int | None = None) -> np.ndarray:
    """Nearest-neighbour x8 downsampling: the label at each cell's centre pixel."""
    off = OUTPUT_STRIDE // 2
    return label[off::OUTPUT_STRIDE, off::OUTPUT_STRIDE]


@torch.no_grad()
def normalized_teacher_features(teacher: Branch, samples: Sequence[ImageSample], batch_size: int = 64):
    teacher.eval()
    dtype = next(teacher.parameters()).dtype
    for i in range(0, len(samples), batch_size):
        x, _ = _stack(samples[i : i + batch_size], dtype)
        yield from channel_normalize_t(teacher(x)).permute(0, 2, 3, 1).numpy()


def feature_class_histogram(
    teacher: Branch,
    samples: Sequence[ImageSample],
    channel: int,
    num_classes: int,
    ignore_id: int = 255,
    bins: int = 64,
) -> HistogramSeries:
    """Histogram of one normalized teacher channel, grouped by the known class of
    each stride-8 cell. Classes with no cells get no group."""
    c_total = teacher.config.feature_channels
    if not 0 <= channel < c_total:
        raise IndexError(f"channel {channel} out of range for C={c_total}")
    per_class: dict[int, list[np.ndarray]] = {}
    for s, f in zip(samples, normalized_teacher_features(teacher, samples)):
        lab = downsample_labels(s.label)
        vals = f[..., channel]
        for z in np.unique(lab):
            if z == ignore_id or z >= num_classes:
                continue
            per_class.setdefault(int(z), []).append(vals[lab == z])
    groups = {str(z): np.concatenate(v) for z, v in sorted(per_class.items())}
    return _histograms(f"teacher_channel_{channel}", groups, bins)


def class_separation(teacher: Branch, samples, num_classes: int, ignore_id: int = 255) -> np.ndarray:
    """Per channel: max gap between per-class means divided by the pooled std."""
    sums = None
    for s, f in zip(samples, normalized_teacher_features(teacher, samples)):
        lab = downsample_labels(s.label)
        if sums is None:
            c = f.shape[-1]
            sums = np.zeros((num_classes, c))
            counts = np.zeros(num_classes)
            all_vals = []
        for z in range(num_classes):
            m = lab == z
            sums[z] += f[m].sum(axis=0)
            counts[z] += m.sum()
        all_vals.append(f[(lab != ignore_id) & (lab < num_classes)])
    present = counts > 0
    means = sums[present] / counts[present, None]
    pooled_std = np.concatenate(all_vals).std(axis=0)
    return (means.max(axis=0) - means.min(axis=0)) / np.maximum(pooled_std, 1e-12)


def discrepancy_epoch_histogram(snapshots: Sequence[Snapshot], bins: int = 64) -> HistogramSeries:
    """Pooled d-value histograms, one group per snapshot epoch, shared edges."""
    if not snapshots:
        raise ValueError("distillation log has no snapshots")
    groups = {str(s.epoch): np.asarray(s.values, dtype=np.float64) for s in snapshots}
    series = _histograms("discrepancy_by_epoch", groups, bins)
    for s in snapshots:
        series.moments[str(s.epoch)].update(
            mean_abs_mu=float(np.abs(s.mu).mean()), mean_sigma=float(s.sigma.mean())
        )
    return series


@dataclass
class SeparabilityRow:
    k: int
    mean_auroc: float
    std_auroc: float
    aurocs: list[float]


def subset_auroc(d_maps, samples, stats: ChannelStats, channels, anomaly_id, ignore_id) -> float:
    acc = ScoreLabelAccumulator(anomaly_id, ignore_id, exact=True)
    for s, d in zip(samples, d_maps):
        h, w = s.label.shape
        acc.add(upsample_scores(anomaly_score(d, stats, channels), h, w), s.label)
    return auroc(acc)


def separability_vs_channels(
    teacher: Branch,
    student: Branch,
    stats: ChannelStats,
    samples: Sequence[ImageSample],
    k_list: Sequence[int],
    anomaly_id: int,
    ignore_id: int = 255,
    n_subsets: int = 10,
    seed: int = 0,
) -> list[SeparabilityRow]:
    """AUROC when the score averages only a random subset of k channels.

    For k = C there is one subset, the identity, so the result equals the full
    scoring path bit for bit.
    """
    c = stats.mu.shape[0]
    for k in k_list:
        if not 1 <= k <= c:
            raise ValueError(f"k={k} outside [1, C={c}]")
    d_maps = list(discrepancy_maps(teacher, student, samples))
    rng = np.random.default_rng(seed)
    rows = []
    for k in k_list:
        if k == c:
            subsets = [None]
        else:
            subsets = [np.sort(rng.choice(c, size=k, replace=False)) for _ in range(n_subsets)]
        aucs = [subset_auroc(d_maps, samples, stats, sub, anomaly_id, ignore_id) for sub in subsets]
        rows.append(SeparabilityRow(k, float(np.mean(aucs)), float(np.std(aucs)), aucs))
    return rows
