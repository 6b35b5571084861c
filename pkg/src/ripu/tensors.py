"""In-memory grid/tensor types, the RPTF binary file format and dataset manifests.

RPTF layout (all multi-byte fields little-endian, independent of host):

    bytes 0-3   magic, ASCII "RPTF"
    byte  4     format version, currently 1
    byte  5     dtype code: 0 = f32, 1 = u8, 2 = u16, 3 = u32
    byte  6     rank, 2 or 3
    byte  7     reserved, must be 0
    next        rank x u32 dims, order H, W [, C or D]
    rest        payload, row-major, channel-last, exactly prod(dims) elements

Labels are stored as u16 with the sentinel 0xFFFF reserved for "not yet
annotated"; probabilities and features are stored as f32.  In memory,
prediction probabilities are kept in float64 so downstream loss gradients
are not polluted by storage rounding; values read from disk are exactly
representable in f32 either way, which keeps write/read round trips
bit-identical.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ripu.errors import FormatError, TensorIOError, ValidationError

MAGIC = b"RPTF"
FORMAT_VERSION = 1
HEADER_FIXED = 8  # magic + version + dtype + rank + reserved

DTYPE_F32, DTYPE_U8, DTYPE_U16, DTYPE_U32 = 0, 1, 2, 3
_CODE_TO_DTYPE = {
    DTYPE_F32: np.dtype("<f4"),
    DTYPE_U8: np.dtype("u1"),
    DTYPE_U16: np.dtype("<u2"),
    DTYPE_U32: np.dtype("<u4"),
}

UNLABELED = np.uint16(0xFFFF)

ROW_SUM_TOL = 1e-4


def _freeze(arr):
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class PredictionMap:
    """Per-pixel class probabilities, shape (H, W, C), channel-last.

    Every pixel's probability vector must be nonnegative and sum to one
    within ROW_SUM_TOL.
    """

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 3:
            raise ValidationError(f"PredictionMap needs a rank-3 array, got rank {p.ndim}")
        if min(p.shape) < 1:
            raise ValidationError(f"PredictionMap dims must be >= 1, got {p.shape}")
        if not np.isfinite(p).all():
            raise ValidationError("PredictionMap contains non-finite probabilities")
        if (p < 0).any():
            raise ValidationError("PredictionMap contains negative probabilities")
        sums = p.sum(axis=2, dtype=np.float64)
        bad = np.abs(sums - 1.0) > ROW_SUM_TOL
        if bad.any():
            i, j = np.argwhere(bad)[0]
            raise ValidationError(
                f"pixel probabilities must sum to 1 +- {ROW_SUM_TOL}: "
                f"got {sums[i, j]:.6f} at pixel ({i}, {j})"
            )
        object.__setattr__(self, "probs", _freeze(p))

    @property
    def height(self):
        return self.probs.shape[0]

    @property
    def width(self):
        return self.probs.shape[1]

    @property
    def classes(self):
        return self.probs.shape[2]

    def __eq__(self, other):
        return (
            isinstance(other, PredictionMap)
            and self.probs.shape == other.probs.shape
            and np.array_equal(self.probs, other.probs)
        )


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Per-pixel class ids, shape (H, W), u16, with UNLABELED = 0xFFFF."""

    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise ValidationError(f"LabelMap needs a rank-2 array, got rank {lab.ndim}")
        if min(lab.shape) < 1:
            raise ValidationError(f"LabelMap dims must be >= 1, got {lab.shape}")
        if lab.dtype != np.uint16:
            if not np.issubdtype(lab.dtype, np.integer):
                raise ValidationError(f"LabelMap needs integer class ids, got {lab.dtype}")
            if (np.asarray(lab, dtype=np.int64) < 0).any() or (
                np.asarray(lab, dtype=np.int64) > 0xFFFF
            ).any():
                raise ValidationError("LabelMap class ids out of u16 range")
            lab = lab.astype(np.uint16)
        object.__setattr__(self, "labels", _freeze(lab))

    @property
    def height(self):
        return self.labels.shape[0]

    @property
    def width(self):
        return self.labels.shape[1]

    def is_dense(self):
        """True when no pixel carries the UNLABELED sentinel."""
        return not (self.labels == UNLABELED).any()

    def annotated_count(self):
        return int((self.labels != UNLABELED).sum())

    def __eq__(self, other):
        return (
            isinstance(other, LabelMap)
            and self.labels.shape == other.labels.shape
            and np.array_equal(self.labels, other.labels)
        )

    @classmethod
    def empty(cls, height, width):
        """An all-UNLABELED map, the initial state of active annotation."""
        return cls(np.full((height, width), UNLABELED, dtype=np.uint16))


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Per-pixel input features, shape (H, W, D), float32, channel-last."""

    feats: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.feats, dtype=np.float32)
        if f.ndim != 3:
            raise ValidationError(f"FeatureMap needs a rank-3 array, got rank {f.ndim}")
        if min(f.shape) < 1:
            raise ValidationError(f"FeatureMap dims must be >= 1, got {f.shape}")
        if not np.isfinite(f).all():
            raise ValidationError("FeatureMap contains non-finite values")
        object.__setattr__(self, "feats", _freeze(f))

    @property
    def height(self):
        return self.feats.shape[0]

    @property
    def width(self):
        return self.feats.shape[1]

    @property
    def dims(self):
        return self.feats.shape[2]

    def __eq__(self, other):
        return (
            isinstance(other, FeatureMap)
            and self.feats.shape == other.feats.shape
            and np.array_equal(self.feats, other.feats)
        )


def _payload_and_code(tensor):
    """Map a domain tensor (or a raw rank-2 float plane) to payload + dtype code."""
    if isinstance(tensor, PredictionMap):
        return tensor.probs.astype("<f4"), DTYPE_F32
    if isinstance(tensor, FeatureMap):
        return tensor.feats.astype("<f4"), DTYPE_F32
    if isinstance(tensor, LabelMap):
        return tensor.labels.astype("<u2"), DTYPE_U16
    arr = np.asarray(tensor)
    if arr.ndim == 2 and np.issubdtype(arr.dtype, np.floating):
        if not np.isfinite(arr).all():
            raise ValidationError("plane contains non-finite values")
        return arr.astype("<f4"), DTYPE_F32
    raise ValidationError(
        f"cannot serialize object of type {type(tensor).__name__} with shape "
        f"{getattr(arr, 'shape', None)}"
    )


def write_tensor(path, tensor):
    """Serialize a tensor to `path` in the RPTF format.

    Accepts PredictionMap / LabelMap / FeatureMap, plus bare rank-2 float
    arrays, which are written as f32 planes (used for score maps).
    """
    payload, code = _payload_and_code(tensor)
    header = MAGIC + bytes([FORMAT_VERSION, code, payload.ndim, 0])
    dims = struct.pack(f"<{payload.ndim}I", *payload.shape)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(dims)
            fh.write(payload.tobytes())
    except OSError as exc:
        raise TensorIOError(f"cannot write tensor to {path}: {exc}") from exc


def read_tensor(path, expect=None):
    """Parse an RPTF file and return the matching tensor type.

    Rank/dtype dispatch is driven by the header.  Rank-3 f32 files are
    ambiguous between probabilities and features, so the caller states its
    expectation: expect="prediction" or expect="features" (the default).
    Rank-2 u16 yields a LabelMap; rank-2 f32 yields a bare float array.
    """
    if expect not in (None, "prediction", "features"):
        raise ValidationError(f"unknown expectation tag {expect!r}")
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise TensorIOError(f"cannot read tensor from {path}: {exc}") from exc

    if len(blob) < HEADER_FIXED:
        raise FormatError(f"{path}: file too short for an RPTF header", offset=len(blob))
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}", offset=0)
    if blob[4] != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {blob[4]}", offset=4)
    code = blob[5]
    if code not in _CODE_TO_DTYPE:
        raise FormatError(f"{path}: unknown dtype code {code}", offset=5)
    rank = blob[6]
    if rank not in (2, 3):
        raise FormatError(f"{path}: rank must be 2 or 3, got {rank}", offset=6)
    if blob[7] != 0:
        raise FormatError(f"{path}: reserved byte must be 0, got {blob[7]}", offset=7)

    dims_end = HEADER_FIXED + 4 * rank
    if len(blob) < dims_end:
        raise FormatError(f"{path}: truncated dims field", offset=len(blob))
    dims = struct.unpack(f"<{rank}I", blob[HEADER_FIXED:dims_end])
    for axis, d in enumerate(dims):
        if d == 0:
            raise FormatError(f"{path}: dim {axis} is zero", offset=HEADER_FIXED + 4 * axis)

    dtype = _CODE_TO_DTYPE[code]
    count = int(np.prod(dims, dtype=np.int64))
    expected_bytes = count * dtype.itemsize
    have = len(blob) - dims_end
    if have < expected_bytes:
        raise FormatError(
            f"{path}: payload truncated, expected {expected_bytes} bytes, got {have}",
            offset=len(blob),
        )
    if have > expected_bytes:
        raise FormatError(
            f"{path}: {have - expected_bytes} trailing bytes after payload",
            offset=dims_end + expected_bytes,
        )

    arr = np.frombuffer(blob, dtype=dtype, count=count, offset=dims_end).reshape(dims)
    if rank == 2 and code == DTYPE_U16:
        return LabelMap(arr)
    if rank == 3 and code == DTYPE_F32:
        if expect == "prediction":
            return PredictionMap(arr)
        return FeatureMap(arr)
    # rank-2 planes and exotic-but-legal dtype combinations come back raw
    return _freeze(arr.astype(np.float64) if code == DTYPE_F32 else arr.copy())


@dataclass(frozen=True)
class ManifestEntry:
    features: str
    labels: str
    split: str  # "train" or "val"


@dataclass(frozen=True)
class DatasetManifest:
    classes: int
    class_names: tuple
    source: tuple = field(default_factory=tuple)
    target: tuple = field(default_factory=tuple)

    def entries(self, domain, split=None):
        pool = self.source if domain == "source" else self.target
        if split is None:
            return list(pool)
        return [e for e in pool if e.split == split]


def _validate_entry(entry, classes, manifest_dir, seen):
    key = (entry.features, entry.labels)
    if key in seen:
        raise ValidationError(f"duplicate manifest entry {key}")
    seen.add(key)
    if entry.split not in ("train", "val"):
        raise ValidationError(f"bad split {entry.split!r}, want 'train' or 'val'")

    feats = read_tensor(Path(manifest_dir, entry.features), expect="features")
    labels = read_tensor(Path(manifest_dir, entry.labels))
    if not isinstance(labels, LabelMap):
        raise ValidationError(f"{entry.labels} is not a label tensor")
    if (feats.height, feats.width) != (labels.height, labels.width):
        raise ValidationError(
            f"entry {key}: feature grid {feats.height}x{feats.width} does not match "
            f"label grid {labels.height}x{labels.width}"
        )
    lab = labels.labels
    real = lab[lab != UNLABELED]
    if real.size and int(real.max()) >= classes:
        raise ValidationError(
            f"{entry.labels}: class id {int(real.max())} inconsistent with classes={classes}"
        )
    return feats.dims


def load_manifest(path):
    """Load and fully validate a dataset manifest JSON file.

    Every referenced tensor file is opened and parsed; class-id consistency
    with the declared class count and feature-dimension agreement across
    entries are enforced here so downstream code can trust the manifest.
    """
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise TensorIOError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise TensorIOError(f"manifest {path} is not valid JSON: {exc}") from exc

    for fieldname in ("classes", "class_names", "source", "target"):
        if fieldname not in doc:
            raise ValidationError(f"manifest {path} missing field {fieldname!r}")
    classes = doc["classes"]
    names = doc["class_names"]
    if not isinstance(classes, int) or classes < 1:
        raise ValidationError(f"manifest classes must be a positive integer, got {classes!r}")
    if len(names) != classes:
        raise ValidationError(
            f"manifest has {len(names)} class_names for classes={classes}"
        )

    def build(raw):
        if not isinstance(raw, dict):
            raise ValidationError(f"manifest entry must be an object, got {raw!r}")
        try:
            return ManifestEntry(raw["features"], raw["labels"], raw["split"])
        except KeyError as exc:
            raise ValidationError(f"manifest entry missing field {exc}") from exc

    source = tuple(build(e) for e in doc["source"])
    target = tuple(build(e) for e in doc["target"])

    seen = set()
    dims = {
        _validate_entry(e, classes, path.parent, seen)
        for e in source + target
    }
    if len(dims) > 1:
        raise ValidationError(f"feature dims differ across entries: {sorted(dims)}")

    return DatasetManifest(classes=classes, class_names=tuple(names), source=source, target=target)


def save_manifest(path, manifest):
    """Write a manifest as JSON; entry paths are kept as given (relative)."""
    doc = {
        "classes": manifest.classes,
        "class_names": list(manifest.class_names),
        "source": [vars(e) for e in manifest.source],
        "target": [vars(e) for e in manifest.target],
    }
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2)
            fh.write("\n")
    except OSError as exc:
        raise TensorIOError(f"cannot write manifest {path}: {exc}") from exc
