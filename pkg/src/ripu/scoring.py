"""Acquisition scoring for one image.

Pipeline: model probabilities -> pseudo-labels -> per-class window
histograms (one summed-area table per class, so cost is O(H*W*C) no matter
how large the window is) -> region impurity; in parallel, per-pixel
entropy -> window-mean uncertainty; the acquisition score is their
element-wise product.

Windows are the (2k+1) x (2k+1) squares centered on each pixel, clipped at
the image border; clipped windows use their true pixel count, so the class
fractions always form a proper distribution.  Natural logarithm
throughout, with the 0 ln 0 = 0 convention; the log base only rescales
scores and can never change which pixel ranks first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ripu import _kernels
from ripu.errors import ValidationError
from ripu.tensors import LabelMap, PredictionMap, UNLABELED

RA = "ra"  # region-based annotating: label whole selected windows
PA = "pa"  # pixel-based annotating: label selected centers only

SQUARE = "square-neighbor"
RECTANGLE = "fixed-rectangle"

SCORE_PRODUCT_TOL = 1e-12


def _check_mode(mode):
    if mode not in (RA, PA):
        raise ValidationError(f"mode must be {RA!r} or {PA!r}, got {mode!r}")


@dataclass(frozen=True)
class RegionSpec:
    """Region family: k-square windows around every pixel, or a fixed tiling."""

    kind: str
    k: int = 0
    rect_h: int = 0
    rect_w: int = 0

    def __post_init__(self):
        if self.kind == SQUARE:
            if self.k < 0:
                raise ValidationError(f"square-neighbor half-width k must be >= 0, got {self.k}")
        elif self.kind == RECTANGLE:
            if self.rect_h < 1 or self.rect_w < 1:
                raise ValidationError(
                    f"rectangle tiles need positive dims, got {self.rect_h}x{self.rect_w}"
                )
        else:
            raise ValidationError(f"unknown region kind {self.kind!r}")

    @classmethod
    def square(cls, k):
        return cls(kind=SQUARE, k=int(k))

    @classmethod
    def rectangle(cls, rect_h, rect_w):
        return cls(kind=RECTANGLE, rect_h=int(rect_h), rect_w=int(rect_w))

    def require_square(self):
        if self.kind != SQUARE:
            raise ValidationError(f"operation needs square-neighbor regions, got {self.kind!r}")


@dataclass(frozen=True, eq=False)
class ClassHistogramField:
    """Per-pixel class composition of the clipped window around each pixel.

    counts[i, j, c] is how many window members carry pseudo-label c;
    region_size[i, j] is the clipped window's pixel count, so the class
    counts at every pixel sum to exactly region_size.
    """

    counts: np.ndarray  # (H, W, C) int32
    region_size: np.ndarray  # (H, W) int32

    def __post_init__(self):
        object.__setattr__(self, "counts", _freeze_int(self.counts))
        object.__setattr__(self, "region_size", _freeze_int(self.region_size))

    @property
    def classes(self):
        return self.counts.shape[2]


def _freeze_int(arr):
    arr = np.ascontiguousarray(arr, dtype=np.int32)
    arr.flags.writeable = False
    return arr


def _freeze_f64(arr):
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class AcquisitionMaps:
    """The four per-pixel planes: impurity, entropy, uncertainty, score."""

    impurity: np.ndarray
    entropy: np.ndarray
    uncertainty: np.ndarray
    score: np.ndarray

    def __post_init__(self):
        planes = {}
        shape = None
        for name in ("impurity", "entropy", "uncertainty", "score"):
            arr = _freeze_f64(getattr(self, name))
            if not np.isfinite(arr).all():
                raise ValidationError(f"acquisition plane {name!r} has non-finite entries")
            if shape is None:
                shape = arr.shape
            elif arr.shape != shape:
                raise ValidationError("acquisition planes disagree in shape")
            planes[name] = arr
            object.__setattr__(self, name, arr)
        resid = np.abs(planes["score"] - planes["uncertainty"] * planes["impurity"]).max()
        if resid > SCORE_PRODUCT_TOL:
            raise ValidationError(
                f"score plane is not uncertainty * impurity (max residual {resid:.3e})"
            )

    @property
    def height(self):
        return self.score.shape[0]

    @property
    def width(self):
        return self.score.shape[1]


def pseudo_labels(pred: PredictionMap) -> LabelMap:
    """Per-pixel argmax class; ties go to the lowest class index."""
    if pred.classes > int(UNLABELED):
        raise ValidationError(f"class count {pred.classes} exceeds the u16 label range")
    return LabelMap(np.argmax(pred.probs, axis=2).astype(np.uint16))


def class_histogram_field(labels: LabelMap, spec: RegionSpec, classes=None) -> ClassHistogramField:
    """Window class histograms for a dense label map.

    `classes` defaults to max label + 1; passing it explicitly keeps empty
    trailing classes in the field (they never change the impurity).
    """
    spec.require_square()
    if not labels.is_dense():
        raise ValidationError("class_histogram_field needs a dense label map, found UNLABELED")
    lab = labels.labels
    if classes is None:
        classes = int(lab.max()) + 1
    elif int(lab.max()) >= classes:
        raise ValidationError(
            f"label {int(lab.max())} out of range for classes={classes}"
        )
    counts, region_size = _kernels.label_window_counts(lab, spec.k, int(classes))
    return ClassHistogramField(counts=counts, region_size=region_size)


def region_impurity(hist: ClassHistogramField) -> np.ndarray:
    """Entropy of each window's class fractions; 0 for single-class windows."""
    return _kernels.impurity_map(hist.counts, hist.region_size)


def pixel_entropy(pred: PredictionMap) -> np.ndarray:
    """Predictive entropy -sum_c P ln P per pixel, natural log."""
    return _kernels.entropy_map(pred.probs)


def region_uncertainty(entropy: np.ndarray, spec: RegionSpec, mode: str) -> np.ndarray:
    """Window-mean of the entropy plane (RA) or the entropy plane itself (PA)."""
    _check_mode(mode)
    entropy = np.asarray(entropy, dtype=np.float64)
    if not np.isfinite(entropy).all():
        raise ValidationError("entropy plane has non-finite entries")
    if mode == PA:
        return entropy.copy()
    spec.require_square()
    sizes = _kernels.region_sizes(entropy.shape[0], entropy.shape[1], spec.k)
    return _kernels.window_sums(entropy, spec.k) / sizes


def acquisition_map(pred: PredictionMap, spec: RegionSpec, mode: str) -> AcquisitionMaps:
    """All four planes for one image under the given region family and mode."""
    _check_mode(mode)
    spec.require_square()
    labels = pseudo_labels(pred)
    hist = class_histogram_field(labels, spec, classes=pred.classes)
    impurity = region_impurity(hist)
    entropy = pixel_entropy(pred)
    uncertainty = region_uncertainty(entropy, spec, mode)
    return AcquisitionMaps(
        impurity=impurity,
        entropy=entropy,
        uncertainty=uncertainty,
        score=uncertainty * impurity,
    )
