"""Datasets: a procedural synthetic benchmark with a held-out anomaly class and
a loader for StreetHazards-style directory layouts.

Known classes are ``0..Z-1``. The anomaly class only ever appears in the test
split and carries ``anomaly_id``; ``ignore_id`` pixels are skipped by every loss
and metric.
"""

from __future__ import annotations

import colorsys
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

SPLITS = ("train", "val", "test")


class ConfigError(ValueError):
    """Invalid dataset or model configuration."""


class DatasetError(ValueError):
    """Malformed dataset on disk or a broken train/test class contract."""


@dataclass
class SynthParams:
    cell_count: tuple[int, int] = (4, 9)
    texture_noise: float = 0.06
    # anomaly pixel fraction band enforced per test image
    anomaly_fraction: tuple[float, float] = (0.01, 0.20)
    split_sizes: dict[str, int] = field(
        default_factory=lambda: {"train": 512, "val": 64, "test": 64}
    )


@dataclass
class DatasetSpec:
    num_known_classes: int = 4
    anomaly_id: int | None = None
    ignore_id: int = 255
    resolution: tuple[int, int] = (64, 64)
    source: str = "synthetic"
    synth: SynthParams = field(default_factory=SynthParams)
    seed: int = 0
    root_path: str | None = None

    def __post_init__(self):
        if self.anomaly_id is None:
            self.anomaly_id = self.num_known_classes
        self.resolution = tuple(int(v) for v in self.resolution)
        if isinstance(self.synth, dict):
            self.synth = SynthParams(**self.synth)
        self.synth.cell_count = tuple(self.synth.cell_count)
        self.synth.anomaly_fraction = tuple(self.synth.anomaly_fraction)
        self.validate()

    def validate(self) -> None:
        z = self.num_known_classes
        if z < 2:
            raise ConfigError(f"need at least 2 known classes, got {z}")
        known = set(range(z))
        if self.anomaly_id in known:
            raise ConfigError(f"anomaly_id {self.anomaly_id} collides with a known class")
        if self.ignore_id in known or self.ignore_id == self.anomaly_id:
            raise ConfigError(f"ignore_id {self.ignore_id} collides with another label")
        if not 0 <= self.anomaly_id <= 255 or not 0 <= self.ignore_id <= 255:
            raise ConfigError("label ids must fit in 8 bits")
        h, w = self.resolution
        if h <= 0 or w <= 0 or h % 8 or w % 8:
            raise ConfigError(f"resolution {self.resolution} must be positive multiples of 8")
        if self.source not in ("synthetic", "disk"):
            raise ConfigError(f"unknown source {self.source!r}")
        if self.source == "disk" and not self.root_path:
            raise ConfigError("disk datasets need root_path")

    @property
    def valid_labels(self) -> set[int]:
        return set(range(self.num_known_classes)) | {self.anomaly_id, self.ignore_id}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resolution"] = list(self.resolution)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        d = dict(d)
        if "synth" in d and isinstance(d["synth"], dict):
            d["synth"] = SynthParams(**d["synth"])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetSpec":
        return cls.from_dict(json.loads(text))

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


@dataclass
class ImageSample:
    image: np.ndarray  # H x W x 3 uint8
    label: np.ndarray  # H x W uint8
    id: str
    split: str

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise DatasetError(f"{self.id}: image must be HxWx3, got {self.image.shape}")
        if self.image.shape[:2] != self.label.shape:
            raise DatasetError(
                f"{self.id}: image {self.image.shape[:2]} and label {self.label.shape} differ"
            )
        if self.split not in SPLITS:
            raise DatasetError(f"{self.id}: unknown split {self.split!r}")


# ---------------------------------------------------------------------------
# synthetic scenes
#
# A scene is a mosaic of convex cells (a Voronoi partition of random sites),
# each painted with one appearance class: a base colour modulated by sinusoidal
# stripes at a class-specific orientation. Known classes take hues 0.5*z/Z and
# angles pi*z/Z. The anomaly class takes a hue halfway between two neighbouring
# known hues and an angle halfway between their angles, so neither its colour
# nor its orientation matches any known palette entry.

def _known_appearance(z: int, num_known: int) -> tuple[np.ndarray, float]:
    hue = 0.5 * z / num_known
    sat = 0.55 if z % 2 == 0 else 0.8
    val = 0.75 if z % 3 else 0.55
    return np.array(colorsys.hsv_to_rgb(hue, sat, val)), math.pi * z / num_known


def _anomaly_appearance(k: int, num_known: int) -> tuple[np.ndarray, float]:
    hue = 0.5 * (k + 0.5) / num_known
    return np.array(colorsys.hsv_to_rgb(hue, 0.65, 0.65)), math.pi * (k + 0.5) / num_known


def _texture(rng, h, w, rgb, angle, noise, contrast=0.25):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    period = rng.uniform(5.0, 7.0)
    phase = rng.uniform(0, 2 * math.pi)
    wave = np.sin(2 * math.pi * (xx * math.cos(angle) + yy * math.sin(angle)) / period + phase)
    base = np.clip(rgb * rng.uniform(0.85, 1.15), 0, 1)
    tex = base[None, None, :] * (1.0 + contrast * wave[..., None])
    return tex + rng.normal(0, noise, size=(h, w, 3))


def _mosaic(rng, h, w, count_range) -> np.ndarray:
    n = int(rng.integers(count_range[0], count_range[1] + 1))
    sites = rng.uniform(0, 1, size=(n, 2)) * [h, w]
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    d2 = (yy[..., None] - sites[:, 0]) ** 2 + (xx[..., None] - sites[:, 1]) ** 2
    return np.argmin(d2, axis=-1)


def generate_synthetic_scene(spec: DatasetSpec, index: int, allow_anomaly: bool) -> ImageSample:
    """Render one scene; a pure function of ``(spec.seed, index, allow_anomaly)``.

    With ``allow_anomaly`` one mosaic cell whose area lies inside
    ``synth.anomaly_fraction`` is repainted with the anomaly appearance; the
    mosaic is redrawn until such a cell exists.
    """
    if spec.source != "synthetic":
        raise ConfigError("generate_synthetic_scene needs a synthetic DatasetSpec")
    spec.validate()
    h, w = spec.resolution
    sp = spec.synth
    z = spec.num_known_classes
    rng = np.random.default_rng([spec.seed, index, int(allow_anomaly)])
    lo, hi = sp.anomaly_fraction

    for _ in range(1000):
        cells = _mosaic(rng, h, w, sp.cell_count)
        n = cells.max() + 1
        area = np.bincount(cells.ravel(), minlength=n) / cells.size
        eligible = np.flatnonzero((area >= lo) & (area <= hi))
        if not allow_anomaly or eligible.size:
            break
    else:  # pragma: no cover
        raise ConfigError(f"cannot place an anomaly within fraction band {sp.anomaly_fraction}")

    classes = rng.integers(z, size=n)
    anomaly_cell = rng.choice(eligible) if allow_anomaly else -1
    label = classes[cells].astype(np.uint8)
    image = np.zeros((h, w, 3))
    for c in range(n):
        mask = cells == c
        if c == anomaly_cell:
            rgb, angle = _anomaly_appearance(int(rng.integers(z)), z)
            label[mask] = spec.anomaly_id
        else:
            rgb, angle = _known_appearance(int(classes[c]), z)
        image[mask] = _texture(rng, h, w, rgb, angle, sp.texture_noise)[mask]

    image = np.clip(np.round(image * 255), 0, 255).astype(np.uint8)
    split = "test" if allow_anomaly else "train"
    return ImageSample(image=image, label=label, id=f"synth_{spec.seed}_{index:06d}", split=split)


def _split_offset(spec: DatasetSpec, split: str) -> int:
    sizes = spec.synth.split_sizes
    off = 0
    for s in SPLITS:
        if s == split:
            return off
        off += sizes.get(s, 0)
    raise DatasetError(f"unknown split {split!r}")


def synthetic_split(spec: DatasetSpec, split: str) -> list[ImageSample]:
    n = spec.synth.split_sizes.get(split, 0)
    off = _split_offset(spec, split)
    out = []
    for i in range(n):
        s = generate_synthetic_scene(spec, off + i, allow_anomaly=(split == "test"))
        s.split = split
        out.append(s)
    return out


# ---------------------------------------------------------------------------
# disk layout: <root>/images/<split>/*.png, <root>/annotations/<split>/*.png

def load_split(spec: DatasetSpec, split: str) -> list[ImageSample]:
    """Load one split from disk, sorted by filename.

    Raises :class:`DatasetError` for orphan files or labels outside the
    declared value set.
    """
    if spec.source != "disk":
        raise ConfigError("load_split needs a disk DatasetSpec")
    if split not in SPLITS:
        raise DatasetError(f"unknown split {split!r}")
    root = Path(spec.root_path)
    img_dir, ann_dir = root / "images" / split, root / "annotations" / split
    if not img_dir.is_dir() or not ann_dir.is_dir():
        raise DatasetError(f"missing split directory under {root} for {split!r}")
    images = {p.name for p in img_dir.glob("*.png")}
    labels = {p.name for p in ann_dir.glob("*.png")}
    for orphan in sorted(images ^ labels):
        where = img_dir if orphan in images else ann_dir
        raise DatasetError(f"no matching pair for {where / orphan}")

    valid = np.array(sorted(spec.valid_labels))
    out = []
    for name in sorted(images):
        image = np.asarray(Image.open(img_dir / name).convert("RGB"), dtype=np.uint8)
        lab_img = Image.open(ann_dir / name)
        if lab_img.mode not in ("L", "P", "I", "I;16"):
            raise DatasetError(f"{ann_dir / name}: label must be single-channel, got mode {lab_img.mode}")
        label = np.asarray(lab_img)
        if label.max(initial=0) > 255:
            raise DatasetError(f"{ann_dir / name}: label value exceeds 255")
        label = label.astype(np.uint8)
        bad = np.setdiff1d(np.unique(label), valid)
        if bad.size:
            raise DatasetError(f"{ann_dir / name}: label values {bad.tolist()} outside declared set")
        out.append(ImageSample(image=image, label=label, id=Path(name).stem, split=split))
    return out


def export_split(samples: list[ImageSample], root: str | Path, split: str) -> None:
    root = Path(root)
    img_dir, ann_dir = root / "images" / split, root / "annotations" / split
    img_dir.mkdir(parents=True, exist_ok=True)
    ann_dir.mkdir(parents=True, exist_ok=True)
    for s in samples:
        Image.fromarray(s.image, mode="RGB").save(img_dir / f"{s.id}.png")
        Image.fromarray(s.label, mode="L").save(ann_dir / f"{s.id}.png")


def get_split(spec: DatasetSpec, split: str) -> list[ImageSample]:
    if spec.source == "synthetic":
        return synthetic_split(spec, split)
    return load_split(spec, split)


# ---------------------------------------------------------------------------

@dataclass
class SplitSummary:
    num_images: int
    class_histogram: dict[int, int]
    anomaly_pixels: int
    anomaly_prevalence: float  # among non-ignore pixels


@dataclass
class ValidationReport:
    splits: dict[str, SplitSummary] = field(default_factory=dict)
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return asdict(self)


def summarize_split(spec: DatasetSpec, samples: list[ImageSample]) -> tuple[SplitSummary, list[str]]:
    hist: dict[int, int] = {}
    violations = []
    anomaly = valid = 0
    for s in samples:
        vals, counts = np.unique(s.label, return_counts=True)
        for v, c in zip(vals.tolist(), counts.tolist()):
            hist[v] = hist.get(v, 0) + c
        n_anom = int((s.label == spec.anomaly_id).sum())
        anomaly += n_anom
        valid += int((s.label != spec.ignore_id).sum())
        if n_anom and s.split in ("train", "val"):
            violations.append(f"{s.split}/{s.id}: {n_anom} anomaly pixels in a {s.split} label")
    summary = SplitSummary(
        num_images=len(samples),
        class_histogram=dict(sorted(hist.items())),
        anomaly_pixels=anomaly,
        anomaly_prevalence=anomaly / valid if valid else 0.0,
    )
    return summary, violations


def verify_dataset(spec: DatasetSpec) -> ValidationReport:
    """Per-split class histograms; anomaly pixels in train/val become violations."""
    report = ValidationReport()
    for split in SPLITS:
        if spec.source == "disk" and not (Path(spec.root_path) / "images" / split).is_dir():
            continue
        try:
            samples = get_split(spec, split)
        except DatasetError as e:
            report.violations.append(str(e))
            continue
        summary, violations = summarize_split(spec, samples)
        report.splits[split] = summary
        report.violations.extend(violations)
    return report


def hflip(sample: ImageSample) -> ImageSample:
    return ImageSample(
        image=np.ascontiguousarray(sample.image[:, ::-1]),
        label=np.ascontiguousarray(sample.label[:, ::-1]),
        id=sample.id + "_flip",
        split=sample.split,
    )
