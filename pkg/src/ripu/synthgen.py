"""Synthetic domain-shifted segmentation data for the desk-scale benchmark.

Label maps combine two regimes: the most frequent classes partition a
smoothed random field (large organic areas), while the remaining tail
classes appear as small geometric objects painted over that background,
rarest class last.  Objects only paint over background pixels, so each
tail class's pixel share tracks its prior closely.

Features are the class-conditional mean vector plus isotropic Gaussian
noise.  Head classes get orthogonal means; each tail class sits near one
head mean, offset by a configurable margin along its own axis, which makes
the tail boundaries genuinely sample-hungry.  The target domain applies an
affine transform (coordinate-pair rotations plus a constant offset) to all
class means, so a source-trained classifier degrades on target until
adaptation fixes it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ripu import _kernels
from ripu.errors import ValidationError
from ripu.tensors import (
    DatasetManifest,
    FeatureMap,
    LabelMap,
    ManifestEntry,
    load_manifest,
    save_manifest,
    write_tensor,
)

SOURCE = "source"
TARGET = "target"


def geometric_priors(classes, decay=0.5):
    raw = decay ** np.arange(classes)
    return tuple(raw / raw.sum())


@dataclass(frozen=True)
class SceneConfig:
    """Everything that determines a generated scene distribution."""

    height: int = 64
    width: int = 64
    classes: int = 6
    priors: tuple = None  # long-tail class priors; default geometric decay 0.5
    smoothness: int = 6  # blur half-width of the background field
    head_classes: int = 2  # classes drawn as background areas; the rest are objects
    object_count_range: tuple = (1, 40)  # per tail class per image, clamp only
    object_size_range: tuple = (3, 9)
    feature_dims: int = 0  # 0 means one dim per class
    feature_scale: float = 2.0
    tail_margin: float = 1.1  # offset of a tail mean from its head partner
    shift_rotation: float = 0.55  # radians mixed into target means
    shift_offset: float = 0.35
    noise: float = 0.75
    seed: int = 0

    def __post_init__(self):
        if self.priors is None:
            object.__setattr__(self, "priors", geometric_priors(self.classes))
        priors = np.asarray(self.priors, dtype=np.float64)
        if priors.shape != (self.classes,):
            raise ValidationError(
                f"need {self.classes} priors, got shape {priors.shape}"
            )
        if (priors <= 0).any():
            raise ValidationError("class priors must be positive")
        if abs(float(priors.sum()) - 1.0) > 1e-9:
            raise ValidationError(f"class priors must sum to 1, got {priors.sum():.6f}")
        if (np.diff(priors) >= 0).any():
            raise ValidationError("class priors must be strictly decreasing")
        if not 1 <= self.head_classes < self.classes:
            raise ValidationError(
                f"head_classes must be in [1, classes), got {self.head_classes}"
            )
        lo, hi = self.object_size_range
        if not 1 <= lo <= hi:
            raise ValidationError(f"bad object size range {self.object_size_range}")
        if hi >= min(self.height, self.width) / 4:
            raise ValidationError(
                f"object size bound {hi} must stay below min(H, W)/4"
            )
        clo, chi = self.object_count_range
        if not 0 <= clo <= chi:
            raise ValidationError(f"bad object count range {self.object_count_range}")
        object.__setattr__(self, "priors", tuple(float(p) for p in priors))

    @property
    def dims(self):
        return self.feature_dims if self.feature_dims else self.classes


def class_means(config, domain):
    """Class-conditional feature means for one domain, shape (C, D)."""
    classes, dims = config.classes, config.dims
    if dims < classes:
        raise ValidationError(f"feature_dims {dims} must be >= classes {classes}")
    means = np.zeros((classes, dims))
    for c in range(classes):
        if c < config.head_classes:
            means[c, c] = config.feature_scale
        else:
            partner = c % config.head_classes
            means[c, partner] = config.feature_scale
            means[c, c] = config.tail_margin
    if domain == SOURCE:
        return means
    if domain != TARGET:
        raise ValidationError(f"domain must be {SOURCE!r} or {TARGET!r}, got {domain!r}")
    # affine shift: Givens rotations over coordinate pairs, then a translation
    theta = config.shift_rotation
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    rot = np.eye(dims)
    for a in range(0, dims - 1, 2):
        b = a + 1
        g = np.eye(dims)
        g[a, a] = cos_t
        g[a, b] = -sin_t
        g[b, a] = sin_t
        g[b, b] = cos_t
        rot = g @ rot
    offset = config.shift_offset / math.sqrt(dims)
    return means @ rot.T + offset


def _smooth_field(rng, height, width, half_width):
    field = rng.standard_normal((height, width))
    for _ in range(2):
        sizes = _kernels.region_sizes(height, width, half_width)
        field = _kernels.window_sums(field, half_width) / sizes
    return field


def _paint_objects(rng, labels, background, klass, target_area, config):
    """Paint random shapes of one tail class over background-only pixels."""
    height, width = labels.shape
    lo, hi = config.object_size_range
    clo, chi = config.object_count_range
    area = 0
    placed = 0
    while area < target_area and placed < chi:
        remaining = target_area - area
        if remaining < lo * lo:  # a minimal object would overshoot worse
            break
        size = int(rng.integers(lo, hi + 1))
        if size * size > remaining:
            size = max(lo, int(math.sqrt(remaining)))
        r = int(rng.integers(0, max(1, height - size)))
        c = int(rng.integers(0, max(1, width - size)))
        shape_kind = int(rng.integers(0, 3))
        rows = np.arange(r, min(r + size, height))
        cols = np.arange(c, min(c + size, width))
        block = np.zeros((len(rows), len(cols)), dtype=bool)
        if shape_kind == 0:  # rectangle
            block[:] = True
        elif shape_kind == 1:  # disk
            cy, cx = (len(rows) - 1) / 2.0, (len(cols) - 1) / 2.0
            yy, xx = np.mgrid[0: len(rows), 0: len(cols)]
            block = (yy - cy) ** 2 + (xx - cx) ** 2 <= (size / 2.0) ** 2
        else:  # plus sign
            third = max(1, len(rows) // 3)
            block[third: 2 * third, :] = True
            block[:, third: 2 * third] = True
        region = np.ix_(rows, cols)
        paintable = block & background[region]
        labels[region] = np.where(paintable, klass, labels[region])
        background[region] &= ~paintable
        area += int(paintable.sum())
        placed += 1
    return area, placed >= clo


def _generate_labels(rng, config):
    height, width, classes = config.height, config.width, config.classes
    priors = np.asarray(config.priors)
    labels = np.zeros((height, width), dtype=np.uint16)
    background = np.ones((height, width), dtype=bool)

    # tail objects first claim their share, most common tail class first so
    # the rarest class paints last and keeps its full area
    for klass in range(config.head_classes, classes):
        target_area = int(round(priors[klass] * height * width))
        _paint_objects(rng, labels, background, klass, target_area, config)

    # the remaining background splits between head classes by prior quantiles
    field = _smooth_field(rng, height, width, config.smoothness)
    bg_values = field[background]
    head_priors = priors[: config.head_classes]
    shares = np.cumsum(head_priors / head_priors.sum())[:-1]
    cuts = np.quantile(bg_values, shares) if bg_values.size else []
    head_ids = np.digitize(field, cuts).astype(np.uint16)
    labels[background] = head_ids[background]
    return labels


def generate_domain(config: SceneConfig, domain, count):
    """Deterministically generate `count` (FeatureMap, LabelMap) pairs."""
    if count < 1:
        raise ValidationError(f"image count must be >= 1, got {count}")
    means = class_means(config, domain)
    domain_code = 0 if domain == SOURCE else 1
    out = []
    for index in range(count):
        labels = None
        for attempt in range(10):
            rng = np.random.default_rng(
                (config.seed, domain_code, index, attempt)
            )
            candidate = _generate_labels(rng, config)
            if len(np.unique(candidate)) >= 2:
                labels = candidate
                break
        if labels is None:
            raise ValidationError(
                "config cannot produce images with two distinct classes"
            )
        noise = rng.standard_normal((config.height, config.width, config.dims))
        feats = means[labels.astype(np.int64)] + config.noise * noise
        out.append((FeatureMap(feats.astype(np.float32)), LabelMap(labels)))
    return out


DEFAULT_CLASS_NAMES = (
    "plain", "field", "marker", "crate", "beacon", "flare",
    "spool", "vane", "prism", "gnomon",
)

PRESETS = {
    "desk-v1": {
        "config": SceneConfig(),
        "source_train": 100,
        "target_train": 100,
        "target_val": 20,
    },
    "desk-mini": {
        "config": SceneConfig(height=32, width=32, smoothness=4, object_size_range=(2, 6)),
        "source_train": 12,
        "target_train": 12,
        "target_val": 6,
    },
}


def emit_dataset(out_dir, config, source_train, target_train, target_val):
    """Write a dataset (RPTF tensors + manifest.json) and return the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    batches = (
        (SOURCE, "train", source_train, 0),
        (TARGET, "train", target_train, 0),
        (TARGET, "val", target_val, target_train),
    )
    entries = {SOURCE: [], TARGET: []}
    for domain, split, count, offset in batches:
        # one deterministic stream per domain; val continues after train
        images = generate_domain(config, domain, offset + count)[offset:]
        for idx, (feats, labels) in enumerate(images):
            stem = f"{domain}_{split}_{idx:03d}"
            write_tensor(out_dir / f"{stem}.feat.rptf", feats)
            write_tensor(out_dir / f"{stem}.lab.rptf", labels)
            entries[domain].append(
                ManifestEntry(f"{stem}.feat.rptf", f"{stem}.lab.rptf", split)
            )

    manifest = DatasetManifest(
        classes=config.classes,
        class_names=DEFAULT_CLASS_NAMES[: config.classes],
        source=tuple(entries[SOURCE]),
        target=tuple(entries[TARGET]),
    )
    save_manifest(out_dir / "manifest.json", manifest)
    return load_manifest(out_dir / "manifest.json")


def emit_benchmark(out_dir, preset="desk-v1", seed=None, config=None):
    """Write a preset benchmark; `config` overrides the preset's SceneConfig."""
    if preset not in PRESETS:
        raise ValidationError(
            f"unknown preset {preset!r}; available: {', '.join(sorted(PRESETS))}"
        )
    spec = PRESETS[preset]
    if config is None:
        config = spec["config"]
    if seed is not None:
        config = SceneConfig(**{**vars(config), "seed": int(seed)})
    return emit_dataset(
        out_dir, config, spec["source_train"], spec["target_train"], spec["target_val"]
    )
