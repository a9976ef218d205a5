"""Run configuration and the on-disk pipeline stages behind the CLI.

Artifacts live under ``<output_dir>/{checkpoints,stats,scores,reports,plots}``.
Every stage records the hash of the configuration it was produced from and is
skipped when that hash is unchanged.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import __version__
from .data import ConfigError, DatasetSpec, ImageSample, export_split, get_split
from .diagnostics import (
    class_separation,
    discrepancy_epoch_histogram,
    feature_class_histogram,
    separability_vs_channels,
)
from .distill import (
    ChannelStats,
    Snapshot,
    TrainConfig,
    _stack,
    distill_student,
    estimate_channel_stats,
    train_teacher,
)
from .metrics import (
    DEFAULT_RECALLS,
    MetricsReport,
    ScoreLabelAccumulator,
    per_image_report,
    report,
)
from .model import BackboneConfig, Branch, load_checkpoint, msp_score, save_checkpoint
from .scoring import score_samples, write_score_map, write_score_png

logger = logging.getLogger(__name__)

EXACT_PIXEL_LIMIT = 10**6
SUBDIRS = ("checkpoints", "stats", "scores", "reports", "plots")


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


@dataclass
class RunConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    teacher_model: BackboneConfig = field(default_factory=lambda: BackboneConfig(family="small", seed=1))
    teacher_train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=20, learning_rate=1e-3, seed=1))
    student_model: BackboneConfig = field(default_factory=lambda: BackboneConfig(family="small", seed=2))
    student_train: TrainConfig = field(
        default_factory=lambda: TrainConfig(epochs=40, learning_rate=1e-3, seed=2, snapshot_epochs=[0, 5, 10, 20, 40])
    )
    stats_split: str = "train"
    recall_levels: list[float] = field(default_factory=lambda: list(DEFAULT_RECALLS))
    upsample_mode: str = "bilinear"
    per_image_metrics: bool = False
    histogram_bins: int = 4096
    output_dir: str = "runs/toy"

    def __post_init__(self):
        if isinstance(self.dataset, dict):
            self.dataset = DatasetSpec.from_dict(self.dataset)
        for name, cls in (("teacher_model", BackboneConfig), ("student_model", BackboneConfig),
                          ("teacher_train", TrainConfig), ("student_train", TrainConfig)):
            if isinstance(getattr(self, name), dict):
                setattr(self, name, cls(**getattr(self, name)))
        if any(not 0 < r <= 1 for r in self.recall_levels):
            raise ConfigError("recall levels must lie in (0, 1]")
        if self.teacher_model.feature_channels != self.student_model.feature_channels:
            raise ConfigError("teacher and student must share feature_channels")
        if self.stats_split not in ("train", "val"):
            raise ConfigError("stats_split must be train or val")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dataset"] = self.dataset.to_dict()
        return d

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls(**json.loads(text))

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_json(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        return _hash(d)

    # per-stage hashes: each covers exactly the inputs of that stage
    def teacher_hash(self) -> str:
        return _hash([self.dataset.to_dict(), asdict(self.teacher_model), asdict(self.teacher_train)])

    def student_hash(self) -> str:
        return _hash([self.teacher_hash(), asdict(self.student_model), asdict(self.student_train)])

    def stats_hash(self) -> str:
        return _hash([self.student_hash(), self.stats_split])


class Pipeline:
    """Lazily builds (or reloads) every artifact of one :class:`RunConfig`."""

    def __init__(self, config: RunConfig, reuse: bool = True):
        self.cfg = config
        self.reuse = reuse
        self.out = Path(config.output_dir)
        for sub in SUBDIRS:
            (self.out / sub).mkdir(parents=True, exist_ok=True)
        self._splits: dict[str, list[ImageSample]] = {}
        self._teacher = self._student = self._stats = None
        self.teacher_log = self.student_log = None

    # -- provenance ---------------------------------------------------------

    def meta(self, **extra) -> dict:
        return {"config_hash": self.cfg.hash(), "code_version": __version__, **extra}

    def _fresh(self, manifest: Path, key: str) -> bool:
        if not (self.reuse and manifest.exists()):
            return False
        return json.loads(manifest.read_text()).get("stage_hash") == key

    # -- data ---------------------------------------------------------------

    def split(self, name: str) -> list[ImageSample]:
        if name not in self._splits:
            self._splits[name] = get_split(self.cfg.dataset, name)
        return self._splits[name]

    def synth_data(self, out_root) -> None:
        for name in ("train", "val", "test"):
            export_split(self.split(name), out_root, name)
        spec = DatasetSpec.from_dict({**self.cfg.dataset.to_dict(), "source": "disk", "root_path": str(out_root)})
        Path(out_root, "dataset.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True))

    # -- training -----------------------------------------------------------

    @property
    def teacher(self) -> Branch:
        if self._teacher is None:
            ckpt = self.out / "checkpoints" / "teacher"
            key = self.cfg.teacher_hash()
            if self._fresh(ckpt.with_suffix(".json"), key):
                self._teacher = load_checkpoint(ckpt)
            else:
                report_ = verify_dataset_splits(self.cfg.dataset, self.split("train"), self.split("val"))
                if report_:
                    raise ConfigError("; ".join(report_))
                self._teacher, self.teacher_log = train_teacher(
                    self.split("train"), self.cfg.dataset, self.cfg.teacher_model,
                    self.cfg.teacher_train, self.split("val"),
                )
                save_checkpoint(self._teacher, ckpt, self.cfg.dataset.hash(), {"stage_hash": key})
                self.teacher_log.write(self.out / "reports" / "teacher_log.jsonl")
        return self._teacher

    @property
    def student(self) -> Branch:
        if self._student is None:
            ckpt = self.out / "checkpoints" / "student"
            key = self.cfg.student_hash()
            if self._fresh(ckpt.with_suffix(".json"), key):
                self._student = load_checkpoint(ckpt)
            else:
                self._student, self.student_log = distill_student(
                    self.teacher, self.split("train"), self.cfg.student_model, self.cfg.student_train,
                    self.split("val"), anomaly_id=self.cfg.dataset.anomaly_id,
                )
                save_checkpoint(self._student, ckpt, self.cfg.dataset.hash(), {"stage_hash": key})
                self.student_log.write(self.out / "reports" / "student_log.jsonl")
                save_snapshots(self.student_log.snapshots, self.out / "reports" / "snapshots.npz")
        return self._student

    @property
    def stats(self) -> ChannelStats:
        if self._stats is None:
            path = self.out / "stats" / "channel_stats.json"
            manifest = self.out / "stats" / "manifest.json"
            key = self.cfg.stats_hash()
            if self._fresh(manifest, key):
                self._stats = ChannelStats.load(path)
            else:
                self._stats = estimate_channel_stats(
                    self.teacher, self.student, self.split(self.cfg.stats_split), self.cfg.dataset.anomaly_id
                )
                self._stats.save(path)
                manifest.write_text(json.dumps({"stage_hash": key, "split": self.cfg.stats_split}))
        return self._stats

    def snapshots(self) -> list[Snapshot]:
        self.student  # noqa: B018 - make sure distillation ran
        if self.student_log is not None:
            return self.student_log.snapshots
        return load_snapshots(self.out / "reports" / "snapshots.npz")

    # -- scoring / evaluation ----------------------------------------------

    def score_maps(self, samples: Sequence[ImageSample], method: str):
        if method == "dicnet":
            for m in score_samples(self.teacher, self.student, self.stats, samples, self.cfg.upsample_mode):
                yield m.values
        elif method == "msp":
            for logits in teacher_logits(self.teacher, samples):
                yield msp_score(logits)
        else:
            raise ConfigError(f"unknown method {method!r}")

    def evaluate(self, split: str = "test", method: str = "dicnet", write: bool = True) -> MetricsReport:
        """Pooled pixel metrics; both methods go through the same accumulator path."""
        samples = self.split(split)
        spec = self.cfg.dataset
        predicted = [lg.argmax(-1) for lg in teacher_logits(self.teacher, samples)]
        n_pixels = sum(s.label.size for s in samples)
        exact = n_pixels <= EXACT_PIXEL_LIMIT
        score_range = None
        if not exact:
            lo, hi = np.inf, -np.inf
            for m in self.score_maps(samples, method):
                lo, hi = min(lo, float(m.min())), max(hi, float(m.max()))
            score_range = (lo, hi)

        def new_acc():
            return ScoreLabelAccumulator(spec.anomaly_id, spec.ignore_id, exact=exact,
                                         bins=self.cfg.histogram_bins, score_range=score_range)

        if self.cfg.per_image_metrics:
            accs = [new_acc().add(m, s.label, p)
                    for s, m, p in zip(samples, self.score_maps(samples, method), predicted)]
            rep = per_image_report(accs, self.cfg.recall_levels)
        else:
            acc = new_acc()
            for s, m, p in zip(samples, self.score_maps(samples, method), predicted):
                acc.add(m, s.label, p)
            rep = report(acc, self.cfg.recall_levels)
        rep.meta = self.meta(method=method, split=split, mode="exact" if exact else "histogram")
        if write:
            (self.out / "reports" / f"metrics_{method}_{split}.json").write_text(rep.to_json())
        return rep

    def score(self, samples: Sequence[ImageSample]) -> list[Path]:
        paths = []
        for s, m in zip(samples, score_samples(self.teacher, self.student, self.stats, samples,
                                                self.cfg.upsample_mode)):
            base = self.out / "scores" / s.id
            write_score_map(m, base, self.stats, self.cfg.upsample_mode)
            write_score_png(m, (self.out / "plots" / s.id).with_suffix(".png"))
            paths.append(base.with_suffix(".f32"))
        return paths

    # -- diagnostics ----------------------------------------------------------

    def diagnose(self, figure: int, channel: int = 0, k_list: Sequence[int] | None = None,
                 plot: bool = True) -> dict:
        spec = self.cfg.dataset
        if figure == 3:
            series = feature_class_histogram(self.teacher, self.split("train"), channel,
                                             spec.num_known_classes, spec.ignore_id)
            sep = class_separation(self.teacher, self.split("train"), spec.num_known_classes, spec.ignore_id)
            out = {"histogram": series.to_dict(), "class_separation": sep.tolist()}
        elif figure == 4:
            series = discrepancy_epoch_histogram(self.snapshots())
            out = {"histogram": series.to_dict()}
        elif figure == 5:
            c = self.cfg.student_model.feature_channels
            k_list = list(k_list or sorted({1, min(8, c), max(c // 2, 1), c}))
            rows = separability_vs_channels(self.teacher, self.student, self.stats, self.split("test"),
                                            k_list, spec.anomaly_id, spec.ignore_id)
            out = {"rows": [asdict(r) for r in rows]}
        else:
            raise ConfigError(f"no diagnostic for figure {figure}")
        out["meta"] = self.meta(figure=figure)
        (self.out / "reports" / f"figure{figure}.json").write_text(json.dumps(out, indent=2, sort_keys=True))
        if plot:
            from .plots import plot_figure

            plot_figure(figure, out, self.out / "plots" / f"figure{figure}.png")
        return out

    # -- backbone size study -------------------------------------------------

    def size_study(self, families: Sequence[str], eval_epochs: Sequence[int] | None = None) -> list[dict]:
        """Distill one student per family from the shared teacher and evaluate it
        at ``eval_epochs``; rows mirror a backbone / epoch / metrics / time table."""
        spec = self.cfg.dataset
        train, val, test = self.split("train"), self.split("val"), self.split("test")
        stats_samples = self.split(self.cfg.stats_split)
        epochs = self.cfg.student_train.epochs
        eval_epochs = sorted(set(eval_epochs or [e for e in (1, 2, 5, 10, 20, 30, 50, epochs) if e <= epochs]))
        rows = []
        for family in families:
            model_cfg = BackboneConfig(**{**asdict(self.cfg.student_model), "family": family})
            fam_rows = []

            def on_epoch(student, epoch, family=family, fam_rows=fam_rows):
                if epoch not in eval_epochs:
                    return
                stats = estimate_channel_stats(self.teacher, student, stats_samples)
                acc = ScoreLabelAccumulator(spec.anomaly_id, spec.ignore_id, exact=True)
                t0 = time.perf_counter()
                for s, m in zip(test, score_samples(self.teacher, student, stats, test)):
                    acc.add(m.values, s.label)
                ms = 1000 * (time.perf_counter() - t0) / len(test)
                rep = report(acc, self.cfg.recall_levels)
                fam_rows.append({
                    "backbone": family, "epoch": epoch, "aupr": rep.aupr,
                    "fpr95": rep.fpr_at.get("0.95"), "auroc": rep.auroc,
                    "time_ms": ms, "params": student.num_parameters(),
                })

            distill_student(self.teacher, train, model_cfg, self.cfg.student_train, val, on_epoch=on_epoch)
            best = max(fam_rows, key=lambda r: r["auroc"])
            for r in fam_rows:
                r["epochs_to_best"] = best["epoch"]
            rows.extend(fam_rows)
        out = {"rows": rows, "meta": self.meta(study="size")}
        (self.out / "reports" / "size_study.json").write_text(json.dumps(out, indent=2, sort_keys=True))
        return rows


def verify_dataset_splits(spec: DatasetSpec, train, val) -> list[str]:
    from .data import summarize_split

    return summarize_split(spec, list(train))[1] + summarize_split(spec, list(val))[1]


@torch.no_grad()
def teacher_logits(teacher: Branch, samples: Sequence[ImageSample], batch_size: int = 32):
    teacher.eval()
    dtype = next(teacher.parameters()).dtype
    for i in range(0, len(samples), batch_size):
        x, _ = _stack(samples[i : i + batch_size], dtype)
        yield from teacher.logits(x).permute(0, 2, 3, 1).numpy()


def save_snapshots(snapshots: Sequence[Snapshot], path) -> None:
    arrays = {}
    for s in snapshots:
        arrays[f"mu_{s.epoch}"] = s.mu
        arrays[f"sigma_{s.epoch}"] = s.sigma
        arrays[f"values_{s.epoch}"] = s.values
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_snapshots(path) -> list[Snapshot]:
    path = Path(path)
    if not path.exists():
        return []
    with np.load(path) as arc:
        epochs = sorted(int(k.split("_")[1]) for k in arc.files if k.startswith("mu_"))
        return [Snapshot(e, arc[f"mu_{e}"], arc[f"sigma_{e}"], arc[f"values_{e}"]) for e in epochs]


def size_table(rows: Sequence[dict]) -> str:
    lines = [f"{'Backbone':<9}|{'Epoch':>6} |{'AUPR↑':>7} |{'FPR95↓':>7} |{'AUROC↑':>7} |{'Time':>9}"]
    for r in rows:
        lines.append(
            f"{r['backbone']:<9}|{r['epoch']:>6} |{100 * r['aupr']:7.1f} |{100 * r['fpr95']:7.1f} |"
            f"{100 * r['auroc']:7.1f} |{r['time_ms']:7.1f}ms"
        )
    return "\n".join(lines)
