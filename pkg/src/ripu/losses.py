"""Training losses for the desk-scale linear pixel classifier.

The classifier maps per-pixel features x to class probabilities via
softmax(W x + b).  Each loss returns its value together with the gradient
with respect to the pre-softmax logits; `grad_from_logits` contracts a
logit gradient with the features to obtain the parameter gradient (the
logit map is linear in the parameters, so the chain rule is a single
matrix product).  `total_objective` assembles the full objective over a
mini-batch and returns the parameter-space gradient directly.

All arithmetic is float64.  Sparse label maps contribute only their
labeled pixels, and the cross-entropy normalizer is the count of labeled
pixels in the image, so gradient magnitudes do not depend on how much of
the image has been annotated so far.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ripu import _kernels
from ripu.errors import NumericalError, ValidationError
from ripu.tensors import FeatureMap, LabelMap, PredictionMap, UNLABELED

DEFAULT_ALPHA_CONSISTENCY = 0.1
DEFAULT_ALPHA_NEGATIVE = 1.0
DEFAULT_NEGATIVE_THRESHOLD = 0.05

_ONE_MINUS_P_FLOOR = 1e-7  # cap on P inside ln(1 - P)
_LOG_FLOOR = 1e-300  # keeps ln() finite; never active at desk scale


def _freeze(arr, dtype=np.float64):
    arr = np.ascontiguousarray(arr, dtype=dtype)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class ClassifierParams:
    """Weights (C, D) and bias (C,) of the linear pixel classifier."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
            raise ValidationError(
                f"classifier params need weights (C, D) and bias (C,), got {w.shape}, {b.shape}"
            )
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise ValidationError("classifier params contain non-finite values")
        object.__setattr__(self, "weights", _freeze(w))
        object.__setattr__(self, "bias", _freeze(b))

    @property
    def classes(self):
        return self.weights.shape[0]

    @property
    def dims(self):
        return self.weights.shape[1]

    @classmethod
    def zeros(cls, classes, dims):
        return cls(np.zeros((classes, dims)), np.zeros(classes))

    def step(self, grad, lr):
        """One gradient-descent step; returns new params."""
        return ClassifierParams(
            self.weights - lr * grad.weights, self.bias - lr * grad.bias
        )

    def __eq__(self, other):
        return (
            isinstance(other, ClassifierParams)
            and np.array_equal(self.weights, other.weights)
            and np.array_equal(self.bias, other.bias)
        )


@dataclass(frozen=True)
class Gradient:
    """Parameter-space gradient, same shapes as ClassifierParams."""

    weights: np.ndarray
    bias: np.ndarray

    def __add__(self, other):
        return Gradient(self.weights + other.weights, self.bias + other.bias)

    def scaled(self, factor):
        return Gradient(factor * self.weights, factor * self.bias)

    @classmethod
    def zeros_like(cls, params):
        return cls(np.zeros_like(params.weights), np.zeros_like(params.bias))

    def max_abs_diff(self, other):
        return max(
            float(np.abs(self.weights - other.weights).max()),
            float(np.abs(self.bias - other.bias).max()),
        )


@dataclass(frozen=True)
class LossReport:
    """Per-term values of the total objective and the counts behind them."""

    sup_source: float
    sup_target: float
    consistency: float
    negative: float
    total: float
    labeled_source: int
    labeled_target: int
    negative_count: int


def forward(params: ClassifierParams, feats: FeatureMap) -> PredictionMap:
    """Per-pixel softmax probabilities for one image."""
    if feats.dims != params.dims:
        raise ValidationError(
            f"feature dims {feats.dims} do not match classifier dims {params.dims}"
        )
    x = feats.feats.astype(np.float64)
    with np.errstate(over="ignore", invalid="ignore"):  # detected just below
        logits = x @ params.weights.T + params.bias
    if not np.isfinite(logits).all():
        raise NumericalError("non-finite logits; training has diverged")
    logits -= logits.max(axis=2, keepdims=True)
    np.exp(logits, out=logits)
    logits /= logits.sum(axis=2, keepdims=True)
    return PredictionMap(logits)


def grad_from_logits(dlogits, feats: FeatureMap) -> Gradient:
    """Contract a (H, W, C) logit gradient with features into parameter space."""
    h, w, classes = dlogits.shape
    flat_g = dlogits.reshape(h * w, classes)
    flat_x = feats.feats.reshape(h * w, feats.dims).astype(np.float64)
    return Gradient(weights=flat_g.T @ flat_x, bias=flat_g.sum(axis=0))


def _softmax_chain(probs, dprobs):
    # dz_c = P_c * (g_c - sum_k g_k P_k)
    inner = (dprobs * probs).sum(axis=2, keepdims=True)
    return probs * (dprobs - inner)


def ce_loss(pred: PredictionMap, labels: LabelMap):
    """Sparse categorical cross-entropy, averaged over labeled pixels.

    Returns (value, dlogits).  With no labeled pixel the loss and gradient
    are defined as zero.
    """
    if (pred.height, pred.width) != (labels.height, labels.width):
        raise ValidationError("prediction and label grids disagree in shape")
    lab = labels.labels
    mask = lab != UNLABELED
    n_labeled = int(mask.sum())
    dlogits = np.zeros_like(pred.probs)
    if n_labeled == 0:
        return 0.0, dlogits
    if int(lab[mask].max()) >= pred.classes:
        raise ValidationError(
            f"label {int(lab[mask].max())} out of range for {pred.classes} classes"
        )
    ii, jj = np.nonzero(mask)
    cc = lab[ii, jj].astype(np.int64)
    picked = pred.probs[ii, jj, cc]
    value = -float(np.log(np.maximum(picked, _LOG_FLOOR)).sum()) / n_labeled
    # d/dz of -ln softmax_y = P - onehot(y), per labeled pixel
    dlogits[ii, jj, :] = pred.probs[ii, jj, :]
    dlogits[ii, jj, cc] -= 1.0
    dlogits /= n_labeled
    return value, dlogits


def consistency_loss(pred: PredictionMap):
    """L1 gap between each pixel's probabilities and its 3x3 window mean.

    Normalized by H*W.  Subgradient convention sign(0) = 0.  Returns
    (value, dlogits).
    """
    probs = pred.probs
    h, w, classes = probs.shape
    sizes = _kernels.region_sizes(h, w, 1).astype(np.float64)
    diff = np.empty_like(probs)
    for c in range(classes):
        mean_c = _kernels.window_sums(probs[:, :, c], 1) / sizes
        diff[:, :, c] = probs[:, :, c] - mean_c
    value = float(np.abs(diff).sum()) / (h * w)

    sign = np.sign(diff)
    dprobs = np.empty_like(probs)
    for c in range(classes):
        back = _kernels.window_sums(sign[:, :, c] / sizes, 1)
        dprobs[:, :, c] = sign[:, :, c] - back
    dprobs /= h * w
    return value, _softmax_chain(probs, dprobs)


def negative_mask(pred: PredictionMap, tau):
    """Binary indicator P < tau (strict) per pixel and class, plus its count."""
    if not 0.0 < tau < 1.0:
        raise ValidationError(f"negative threshold must be in (0, 1), got {tau}")
    mask = pred.probs < tau
    return mask, int(mask.sum())


def negative_loss(pred: PredictionMap, tau):
    """Push masked (confidently-absent) class probabilities further down.

    -(1/count) * sum of ln(1 - P) over masked entries; the mask is a
    constant (no gradient through the threshold).  Returns (value, dlogits).
    """
    mask, count = negative_mask(pred, tau)
    if count == 0:
        return 0.0, np.zeros_like(pred.probs)
    capped = np.minimum(pred.probs, 1.0 - _ONE_MINUS_P_FLOOR)
    value = -float(np.log1p(-capped[mask]).sum()) / count
    dprobs = np.zeros_like(pred.probs)
    dprobs[mask] = 1.0 / (1.0 - capped[mask]) / count
    return value, _softmax_chain(pred.probs, dprobs)


def total_objective(
    params: ClassifierParams,
    source_batch,
    target_batch,
    annotations,
    alpha1=DEFAULT_ALPHA_CONSISTENCY,
    alpha2=DEFAULT_ALPHA_NEGATIVE,
    tau=DEFAULT_NEGATIVE_THRESHOLD,
    source_free=False,
):
    """Full objective over a mini-batch; returns (LossReport, Gradient).

    source_batch: [(FeatureMap, LabelMap)] with dense labels.
    target_batch: [FeatureMap]; annotations: matching sparse [LabelMap].
    Each term is the mean of its per-image value so batch size does not
    change gradient scale.  source_free drops the source supervision and
    consistency terms entirely.
    """
    if source_free:
        source_batch = []
    elif not source_batch:
        raise ValidationError("source batch is empty but source_free is not set")
    if not source_batch and not target_batch:
        raise ValidationError("nothing to optimize: both batches empty")
    if len(target_batch) != len(annotations):
        raise ValidationError("target batch and annotations differ in length")

    grad = Gradient.zeros_like(params)
    sup_source = consistency = 0.0
    sup_target = negative = 0.0
    labeled_source = labeled_target = negative_count = 0

    for feats, labels in source_batch:
        pred = forward(params, feats)
        ce_val, ce_dl = ce_loss(pred, labels)
        cr_val, cr_dl = consistency_loss(pred)
        sup_source += ce_val
        consistency += cr_val
        labeled_source += labels.annotated_count()
        scale = 1.0 / len(source_batch)
        grad = grad + grad_from_logits((ce_dl + alpha1 * cr_dl) * scale, feats)

    for feats, labels in zip(target_batch, annotations):
        pred = forward(params, feats)
        ce_val, ce_dl = ce_loss(pred, labels)
        nl_val, nl_dl = negative_loss(pred, tau)
        sup_target += ce_val
        negative += nl_val
        labeled_target += labels.annotated_count()
        negative_count += negative_mask(pred, tau)[1]
        scale = 1.0 / len(target_batch)
        grad = grad + grad_from_logits((ce_dl + alpha2 * nl_dl) * scale, feats)

    if source_batch:
        sup_source /= len(source_batch)
        consistency /= len(source_batch)
    if target_batch:
        sup_target /= len(target_batch)
        negative /= len(target_batch)

    total = sup_source + sup_target + alpha1 * consistency + alpha2 * negative
    report = LossReport(
        sup_source=sup_source,
        sup_target=sup_target,
        consistency=consistency,
        negative=negative,
        total=total,
        labeled_source=labeled_source,
        labeled_target=labeled_target,
        negative_count=negative_count,
    )
    return report, grad
