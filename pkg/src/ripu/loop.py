"""Active-learning loop: pretrain on source, then alternate gradient steps
with budgeted selection rounds, annotating selected pixels from ground
truth and finally evaluating on the target validation split.

Determinism: every random draw comes from child generators spawned off the
config seed, so identical (manifest, config) inputs give bit-identical
parameters, traces and reports.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ripu.errors import NumericalError, ValidationError
from ripu.losses import (
    ClassifierParams,
    ce_loss,
    forward,
    grad_from_logits,
    total_objective,
)
from ripu.scoring import PA, RA, RegionSpec, acquisition_map
from ripu.selection import BudgetLedger, SelectionResult, resolve_budget, run_strategy
from ripu.tensors import FeatureMap, LabelMap, UNLABELED, read_tensor

DEFAULT_K = {RA: 1, PA: 32}


@dataclass(frozen=True)
class LoopConfig:
    """Knobs of the training-plus-selection loop.

    `rounds` is the number of selection rounds; they run at the first
    `rounds` multiples of ceil(iterations/5) (the classic five-round grid),
    unless `round_iters` pins explicit iteration indices.  `k` defaults to
    1 in RA mode and 32 in PA mode.
    """

    iterations: int = 500
    rounds: int = 5
    round_iters: tuple = None
    budget: object = "2.2%"
    mode: str = RA
    strategy: str = "ripu"
    k: int = None
    tau: float = 0.05
    alpha1: float = 0.1
    alpha2: float = 1.0
    lr: float = 0.1
    lr_power: float = 0.9
    batch_size: int = 2
    seed: int = 0
    source_free: bool = False
    pretrain_iters: int = 150
    hidden_dim: int = 0  # optional frozen random-feature expansion

    def __post_init__(self):
        if self.mode not in (RA, PA):
            raise ValidationError(f"mode must be {RA!r} or {PA!r}, got {self.mode!r}")
        if self.k is None:
            object.__setattr__(self, "k", DEFAULT_K[self.mode])
        if self.iterations < 0 or self.pretrain_iters < 0:
            raise ValidationError("iteration counts must be nonnegative")
        if self.rounds < 1:
            raise ValidationError(f"rounds must be >= 1, got {self.rounds}")
        if self.round_iters is not None:
            iters = tuple(sorted(int(i) for i in self.round_iters))
            if len(iters) != self.rounds:
                raise ValidationError(
                    f"{len(iters)} round_iters given for rounds={self.rounds}"
                )
            if iters and not (1 <= iters[0] and iters[-1] <= self.iterations):
                raise ValidationError("round_iters must lie in [1, iterations]")
            object.__setattr__(self, "round_iters", iters)

    def selection_iterations(self):
        """Iteration indices at which selection rounds fire."""
        if self.round_iters is not None:
            return self.round_iters
        stride = math.ceil(self.iterations / 5)
        if self.rounds <= 5:
            iters = [min(stride * j, self.iterations) for j in range(1, self.rounds + 1)]
        else:
            stride = math.ceil(self.iterations / self.rounds)
            iters = [min(stride * j, self.iterations) for j in range(1, self.rounds + 1)]
        if len(set(iters)) != len(iters):
            raise ValidationError(
                f"iterations={self.iterations} too small for {self.rounds} rounds"
            )
        return tuple(iters)

    def region_spec(self):
        return RegionSpec.square(self.k)


@dataclass(frozen=True)
class MetricsReport:
    """Per-class IoU and class-frequency accounting.

    Classes absent from both prediction and ground truth carry NaN IoU and
    are excluded from the mean.  Frequencies are distributions over classes;
    enrichment is selected-frequency / dataset-frequency (NaN where the
    dataset frequency is zero).
    """

    per_class_iou: np.ndarray
    miou: float
    selected_freq: np.ndarray = None
    dataset_freq: np.ndarray = None
    enrichment: np.ndarray = None


@dataclass
class TraceRow:
    round: int
    iteration: int
    sup_source: float
    sup_target: float
    consistency: float
    negative: float
    total: float
    spent_total: int
    shortfalls: int
    miou: float


@dataclass
class Trace:
    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)


class _Loader:
    """Reads manifest tensors on demand, recording (phase, domain, path)."""

    def __init__(self, manifest_path):
        self.base = Path(manifest_path).parent
        self.phase = "setup"
        self.reads = []
        self._cache = {}

    def image(self, entry, domain):
        key = (entry.features, entry.labels)
        if key not in self._cache:
            self.reads.append((self.phase, domain, entry.features))
            feats = read_tensor(self.base / entry.features, expect="features")
            labels = read_tensor(self.base / entry.labels)
            self._cache[key] = (feats, labels)
        return self._cache[key]

    def reads_after(self, phase_names, domain):
        return sum(
            1 for phase, dom, _ in self.reads if dom == domain and phase in phase_names
        )


def _poly_lr(base, power, step, horizon):
    return base * (1.0 - step / max(1, horizon)) ** power


@dataclass(frozen=True)
class _FeatureExpander:
    """Frozen random tanh layer, an optional nonlinearity for the toy model."""

    projection: np.ndarray
    offset: np.ndarray

    @classmethod
    def create(cls, in_dims, out_dims, seed):
        rng = np.random.default_rng(seed)
        scale = 1.0 / math.sqrt(in_dims)
        return cls(
            projection=rng.standard_normal((in_dims, out_dims)) * scale,
            offset=rng.standard_normal(out_dims) * 0.1,
        )

    def apply(self, feats):
        hidden = np.tanh(feats.feats.astype(np.float64) @ self.projection + self.offset)
        return FeatureMap(hidden.astype(np.float32))


def pretrain(source_data, config: LoopConfig, classes=None) -> ClassifierParams:
    """Source-only supervised training of the linear classifier."""
    if not source_data:
        raise ValidationError("pretraining needs a nonempty source split")
    dims = source_data[0][0].dims
    if classes is None:
        classes = _class_count(source_data)
    params = ClassifierParams.zeros(classes, dims)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(1)[0])
    for step in range(config.pretrain_iters):
        feats, labels = source_data[int(rng.integers(len(source_data)))]
        pred = forward(params, feats)
        value, dlogits = ce_loss(pred, labels)
        if not np.isfinite(value):
            raise NumericalError(f"pretraining diverged at step {step}: loss={value}")
        grad = grad_from_logits(dlogits, feats)
        params = params.step(grad, _poly_lr(config.lr, config.lr_power, step, config.pretrain_iters))
    return params


def _class_count(pairs):
    top = 0
    for _, labels in pairs:
        lab = labels.labels
        real = lab[lab != UNLABELED]
        if real.size:
            top = max(top, int(real.max()) + 1)
    if top == 0:
        raise ValidationError("no labeled pixels in any image")
    return top


def oracle_annotate(ground_truth: LabelMap, picks: SelectionResult, state: LabelMap) -> LabelMap:
    """Copy ground-truth classes at exactly the newly selected coordinates."""
    gt = ground_truth.labels
    out = np.array(state.labels)
    for i, j in picks.annotated:
        if not (0 <= i < gt.shape[0] and 0 <= j < gt.shape[1]):
            raise ValidationError(f"annotation coordinate ({i}, {j}) out of bounds")
        if out[i, j] != UNLABELED:
            raise ValidationError(f"pixel ({i}, {j}) was already annotated")
        out[i, j] = gt[i, j]
    return LabelMap(out)


def evaluate(params: ClassifierParams, val_data) -> MetricsReport:
    """Confusion-matrix IoU over every validation pixel."""
    if not val_data:
        raise ValidationError("evaluation needs a nonempty validation split")
    classes = params.classes
    confusion = np.zeros((classes, classes), dtype=np.int64)
    for feats, labels in val_data:
        pred = np.argmax(forward(params, feats).probs, axis=2)
        truth = labels.labels.astype(np.int64)
        keep = truth != int(UNLABELED)
        if keep.any() and truth[keep].max() >= classes:
            raise ValidationError(
                f"label {int(truth[keep].max())} out of range for {classes} classes"
            )
        pair = classes * truth[keep] + pred.astype(np.int64)[keep]
        confusion += np.bincount(pair, minlength=classes * classes).reshape(
            classes, classes
        )
    tp = np.diag(confusion).astype(np.float64)
    union = confusion.sum(axis=0) + confusion.sum(axis=1) - np.diag(confusion)
    iou = np.where(union > 0, tp / np.maximum(union, 1), np.nan)
    miou = float(np.nanmean(iou)) if np.isfinite(iou).any() else float("nan")
    return MetricsReport(per_class_iou=iou, miou=miou)


def class_frequency_report(states, ground_truths, classes):
    """Selected vs dataset class frequencies and per-class enrichment."""
    selected = np.zeros(classes, dtype=np.int64)
    dataset = np.zeros(classes, dtype=np.int64)
    for state, truth in zip(states, ground_truths):
        lab = state.labels
        chosen = truth.labels[lab != UNLABELED].astype(np.int64)
        selected += np.bincount(chosen, minlength=classes)[:classes]
        dataset += np.bincount(
            truth.labels.ravel().astype(np.int64), minlength=classes
        )[:classes]
    if selected.sum() == 0:
        raise ValidationError("class_frequency_report needs at least one annotated pixel")
    sel = selected / selected.sum()
    dat = dataset / max(1, dataset.sum())
    enrichment = np.where(dat > 0, sel / np.maximum(dat, 1e-300), np.nan)
    return sel, dat, enrichment


def _load_split(loader, manifest, domain, split, expander):
    pairs = []
    for entry in manifest.entries(domain, split):
        feats, labels = loader.image(entry, domain)
        if expander is not None:
            feats = expander.apply(feats)
        pairs.append((feats, labels))
    return pairs


def run_active_loop(manifest, config: LoopConfig, manifest_path="."):
    """Run the full pipeline; returns (params, MetricsReport, Trace)."""
    loader = _Loader(manifest_path)
    expander = None

    loader.phase = "pretrain"
    source_train = _load_split(loader, manifest, "source", "train", None)
    if config.hidden_dim:
        in_dims = source_train[0][0].dims if source_train else manifest.classes
        expander = _FeatureExpander.create(
            in_dims, config.hidden_dim, np.random.SeedSequence(config.seed).spawn(4)[3]
        )
        source_train = [(expander.apply(f), lab) for f, lab in source_train]
    params = pretrain(source_train, config, classes=manifest.classes)

    loader.phase = "train"
    target_pairs = _load_split(loader, manifest, "target", "train", expander)
    if not target_pairs:
        raise ValidationError("active loop needs a nonempty target train split")
    target_feats = [f for f, _ in target_pairs]
    target_truth = [lab for _, lab in target_pairs]
    if config.source_free:
        source_train = []

    states = [LabelMap.empty(f.height, f.width) for f in target_feats]
    ledgers = [
        BudgetLedger(resolve_budget(config.budget, f.height, f.width), config.rounds)
        for f in target_feats
    ]

    seeds = np.random.SeedSequence(config.seed).spawn(4)
    train_rng = np.random.default_rng(seeds[1])
    spec = config.region_spec()
    round_iters = config.selection_iterations()
    n_iters = config.iterations
    trace = Trace()
    shortfalls = 0
    last_report = None

    loader.phase = "eval"
    val_pairs = _load_split(loader, manifest, "target", "val", expander)
    loader.phase = "train"

    per_domain = max(1, config.batch_size // 2)
    round_id = 0
    for n in range(1, n_iters + 1):
        if config.source_free or not source_train:
            src_batch = []
        else:
            src_batch = [
                source_train[int(train_rng.integers(len(source_train)))]
                for _ in range(per_domain)
            ]
        tgt_idx = [
            int(train_rng.integers(len(target_feats))) for _ in range(per_domain)
        ]
        tgt_batch = [target_feats[i] for i in tgt_idx]
        tgt_annot = [states[i] for i in tgt_idx]

        report, grad = total_objective(
            params,
            src_batch,
            tgt_batch,
            tgt_annot,
            alpha1=config.alpha1,
            alpha2=config.alpha2,
            tau=config.tau,
            source_free=config.source_free,
        )
        if not np.isfinite(report.total):
            raise NumericalError(f"training diverged at iteration {n}: loss={report.total}")
        params = params.step(grad, _poly_lr(config.lr, config.lr_power, n - 1, n_iters))
        last_report = report

        if n in round_iters:
            round_id += 1
            selection_seq = np.random.SeedSequence((config.seed, round_id))
            image_seeds = selection_seq.spawn(len(target_feats))
            for idx, feats in enumerate(target_feats):
                allowance = ledgers[idx].allowance(round_id)
                if allowance < 1:
                    ledgers[idx].record(0)
                    continue
                pred = forward(params, feats)
                maps = None
                if config.strategy in ("ripu", "ent", "rect"):
                    maps = acquisition_map(pred, spec, config.mode)
                result = run_strategy(
                    config.strategy,
                    pred=pred,
                    maps=maps,
                    state=states[idx],
                    spec=spec if config.strategy != "rect"
                    else RegionSpec.rectangle(2 * config.k + 1, 2 * config.k + 1),
                    mode=config.mode,
                    budget=allowance,
                    seed=image_seeds[idx],
                )
                states[idx] = oracle_annotate(target_truth[idx], result, states[idx])
                ledgers[idx].record(result.pixels_spent)
                shortfalls += int(result.shortfall)

            val_report = evaluate(params, val_pairs)
            trace.rows.append(
                TraceRow(
                    round=round_id,
                    iteration=n,
                    sup_source=last_report.sup_source,
                    sup_target=last_report.sup_target,
                    consistency=last_report.consistency,
                    negative=last_report.negative,
                    total=last_report.total,
                    spent_total=sum(l.spent for l in ledgers),
                    shortfalls=shortfalls,
                    miou=val_report.miou,
                )
            )

    final = evaluate(params, val_pairs)
    if any((s.labels != UNLABELED).any() for s in states):
        sel, dat, enrich = class_frequency_report(states, target_truth, params.classes)
    else:
        sel = dat = enrich = np.full(params.classes, np.nan)
    final = replace(final, selected_freq=sel, dataset_freq=dat, enrichment=enrich)

    trace.rows.append(
        TraceRow(
            round=round_id,
            iteration=n_iters,
            sup_source=last_report.sup_source if last_report else 0.0,
            sup_target=last_report.sup_target if last_report else 0.0,
            consistency=last_report.consistency if last_report else 0.0,
            negative=last_report.negative if last_report else 0.0,
            total=last_report.total if last_report else 0.0,
            spent_total=sum(l.spent for l in ledgers),
            shortfalls=shortfalls,
            miou=final.miou,
        )
    )
    trace.meta.update(
        {
            "source_reads_after_pretrain": loader.reads_after(("train",), "source"),
            "budget_per_image": [l.total_budget for l in ledgers],
            "spent_per_image": [l.spent for l in ledgers],
            "annotation_states": states,
        }
    )
    return params, final, trace


def run_dense_supervision(manifest, config: LoopConfig, manifest_path="."):
    """Same loop and seeds, but target labels are fully dense from the start.

    The comparison arm for budget-saturation checks: no selection rounds
    fire, every other draw stays identical.
    """
    dense = replace(config, budget=1.0, rounds=1, round_iters=None)
    loader = _Loader(manifest_path)
    expander = None

    loader.phase = "pretrain"
    source_train = _load_split(loader, manifest, "source", "train", None)
    if config.hidden_dim:
        in_dims = source_train[0][0].dims if source_train else manifest.classes
        expander = _FeatureExpander.create(
            in_dims, config.hidden_dim, np.random.SeedSequence(config.seed).spawn(4)[3]
        )
        source_train = [(expander.apply(f), lab) for f, lab in source_train]
    params = pretrain(source_train, dense, classes=manifest.classes)

    loader.phase = "train"
    target_pairs = _load_split(loader, manifest, "target", "train", expander)
    if config.source_free:
        source_train = []
    seeds = np.random.SeedSequence(config.seed).spawn(4)
    train_rng = np.random.default_rng(seeds[1])
    per_domain = max(1, config.batch_size // 2)

    loader.phase = "eval"
    val_pairs = _load_split(loader, manifest, "target", "val", expander)

    for n in range(1, config.iterations + 1):
        if config.source_free or not source_train:
            src_batch = []
        else:
            src_batch = [
                source_train[int(train_rng.integers(len(source_train)))]
                for _ in range(per_domain)
            ]
        tgt_idx = [
            int(train_rng.integers(len(target_pairs))) for _ in range(per_domain)
        ]
        report, grad = total_objective(
            params,
            src_batch,
            [target_pairs[i][0] for i in tgt_idx],
            [target_pairs[i][1] for i in tgt_idx],
            alpha1=config.alpha1,
            alpha2=config.alpha2,
            tau=config.tau,
            source_free=config.source_free,
        )
        if not np.isfinite(report.total):
            raise NumericalError(f"training diverged at iteration {n}: loss={report.total}")
        params = params.step(grad, _poly_lr(config.lr, config.lr_power, n - 1, config.iterations))

    return params, evaluate(params, val_pairs)
