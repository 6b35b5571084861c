"""Budgeted selection of regions (RA) or pixels (PA) from score planes.

All strategies share one greedy engine: repeatedly take the best-scoring
still-valid center whose annotation cost fits the remaining budget, then
invalidate every center within Chebyshev distance 2k so no two selected
windows intersect.  Scores are frozen for the whole round; only validity
masks change.  Costs are counted in pixels actually annotated: clipped
windows charge their true size, and pixels annotated in earlier rounds are
never re-annotated or re-charged.

If at some point no candidate fits the remaining budget, the best-scoring
candidate is taken anyway, overshooting by at most (2k+1)^2 - 1 pixels,
and the round ends; the budget ledger absorbs overshoot into the next
round's allowance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ripu import _kernels
from ripu.errors import ValidationError
from ripu.scoring import (
    PA,
    RA,
    RECTANGLE,
    AcquisitionMaps,
    RegionSpec,
    region_uncertainty,
    _check_mode,
)
from ripu.tensors import LabelMap, PredictionMap, UNLABELED


def resolve_budget(value, height, width):
    """Total per-image budget in pixels from a count, fraction, or '2.2%' string."""
    if isinstance(value, str):
        text = value.strip()
        if text.endswith("%"):
            try:
                pct = float(text[:-1])
            except ValueError as exc:
                raise ValidationError(f"cannot parse budget {value!r}") from exc
            frac = pct / 100.0
            if not 0.0 < frac <= 1.0:
                raise ValidationError(f"percent budget must be in (0, 100], got {value!r}")
            return int(np.floor(frac * height * width))
        try:
            value = int(text)
        except ValueError as exc:
            raise ValidationError(
                f"budget {value!r} must be a pixel count or carry a '%' suffix"
            ) from exc
    if isinstance(value, (bool, np.bool_)):
        raise ValidationError(f"budget must be a number, got {value!r}")
    if isinstance(value, (float, np.floating)):
        if not 0.0 < value <= 1.0:
            raise ValidationError(f"fractional budget must be in (0, 1], got {value}")
        return int(np.floor(value * height * width))
    if isinstance(value, (int, np.integer)):
        if value < 1:
            raise ValidationError(f"pixel budget must be >= 1, got {value}")
        return int(value)
    raise ValidationError(f"cannot interpret budget {value!r}")


@dataclass
class BudgetLedger:
    """Per-image annotation accounting across selection rounds.

    The total budget splits into rounds of floor(total/rounds) pixels with
    the remainder granted to the final round; any overshoot in one round is
    deducted from the next round's allowance, so total spend can exceed the
    budget only by the final round's documented overshoot bound.
    """

    total_budget: int
    rounds: int
    spent: int = 0
    round_spend: list = field(default_factory=list)

    def __post_init__(self):
        if self.total_budget < 1:
            raise ValidationError(f"total budget must be >= 1, got {self.total_budget}")
        if self.rounds < 1:
            raise ValidationError(f"round count must be >= 1, got {self.rounds}")

    @property
    def per_round(self):
        return self.total_budget // self.rounds

    def planned_through(self, round_idx):
        """Cumulative budget available through 1-based round `round_idx`."""
        if not 1 <= round_idx <= self.rounds:
            raise ValidationError(
                f"round index {round_idx} out of range 1..{self.rounds}"
            )
        if round_idx == self.rounds:
            return self.total_budget
        return self.per_round * round_idx

    def allowance(self, round_idx):
        """Pixels this round may annotate, after absorbing any prior overshoot."""
        return max(0, self.planned_through(round_idx) - self.spent)

    def record(self, pixels_spent):
        self.spent += int(pixels_spent)
        self.round_spend.append(int(pixels_spent))


@dataclass(frozen=True)
class SelectionResult:
    """Ordered picks plus the exact set of newly annotated pixels.

    pick_costs[n] is how many pixels pick n newly annotated, so cumulative
    spend per pick is reconstructible; their sum equals pixels_spent.
    """

    picks: tuple
    annotated: tuple
    pixels_spent: int
    shortfall: bool = False
    pick_costs: tuple = ()


def _validate_inputs(score, state, budget):
    if score.shape != state.labels.shape:
        raise ValidationError(
            f"score plane {score.shape} and annotation state "
            f"{state.labels.shape} disagree in shape"
        )
    if budget < 1:
        raise ValidationError(f"round budget must be >= 1, got {budget}")


def _window_new_costs(unannotated, k):
    # exact small-integer arithmetic survives the float summed-area table
    sums = _kernels.window_sums(unannotated.astype(np.float64), k)
    return np.rint(sums).astype(np.int64)


def _annotated_for_picks(picks, unannotated, k, height, width):
    coords = []
    for i, j in picks:
        r0, r1 = max(0, i - k), min(height - 1, i + k)
        c0, c1 = max(0, j - k), min(width - 1, j + k)
        block = unannotated[r0: r1 + 1, c0: c1 + 1]
        rows, cols = np.nonzero(block)
        coords.extend((r0 + int(r), c0 + int(c)) for r, c in zip(rows, cols))
    return coords


def _run_square_greedy(score, state, spec, mode, budget):
    spec.require_square()
    _check_mode(mode)
    score = np.asarray(score, dtype=np.float64)
    _validate_inputs(score, state, budget)
    height, width = score.shape

    unannotated = state.labels == UNLABELED
    if mode == RA:
        cost = _window_new_costs(unannotated, spec.k)
    else:
        cost = np.ones((height, width), dtype=np.int64)

    picks, spent, shortfall = _kernels.greedy_select(
        score, unannotated, cost, spec.k, int(budget)
    )
    if mode == RA:
        annotated = _annotated_for_picks(picks, unannotated, spec.k, height, width)
    else:
        annotated = list(picks)
    assert len(annotated) == spent
    return SelectionResult(
        picks=tuple(picks),
        annotated=tuple(annotated),
        pixels_spent=spent,
        shortfall=shortfall,
        pick_costs=tuple(int(cost[i, j]) for i, j in picks),
    )


def select_ripu(maps: AcquisitionMaps, state: LabelMap, spec: RegionSpec, mode, budget):
    """Greedy selection on the impurity-times-uncertainty score plane."""
    return _run_square_greedy(maps.score, state, spec, mode, budget)


def select_entropy(maps: AcquisitionMaps, state: LabelMap, spec: RegionSpec, mode, budget):
    """Baseline: rank by predictive entropy (window-mean of it in RA mode)."""
    score = region_uncertainty(maps.entropy, spec, mode)
    return _run_square_greedy(score, state, spec, mode, budget)


def select_sconf(pred: PredictionMap, state: LabelMap, spec: RegionSpec, mode, budget):
    """Baseline: rank by softmax confidence deficit 1 - max_c P."""
    deficit = 1.0 - pred.probs.max(axis=2)
    score = region_uncertainty(deficit, spec, mode)
    return _run_square_greedy(score, state, spec, mode, budget)


def select_random(rng_seed, state: LabelMap, spec: RegionSpec, mode, budget):
    """Baseline: uniform random valid candidates, same constraints and costs.

    Implemented by running the shared greedy on an i.i.d. uniform score
    plane, which picks uniformly among valid candidates at every step.
    """
    rng = np.random.default_rng(rng_seed)
    score = rng.random((state.height, state.width))
    return _run_square_greedy(score, state, spec, mode, budget)


def _tile_grid(height, width, rect_h, rect_w):
    rows = [(r, min(r + rect_h, height)) for r in range(0, height, rect_h)]
    cols = [(c, min(c + rect_w, width)) for c in range(0, width, rect_w)]
    return [(r0, r1, c0, c1) for r0, r1 in rows for c0, c1 in cols]


def select_fixed_rectangles(maps: AcquisitionMaps, state: LabelMap, spec: RegionSpec, budget):
    """Tile-based variant: rank non-overlapping tiles by mean score.

    The image is tiled by rect_h x rect_w rectangles (edge tiles smaller);
    tiles are annotated whole, in descending mean-score order (ties
    row-major), under the same fit-or-overshoot budget policy.
    """
    if spec.kind != RECTANGLE:
        raise ValidationError(f"select_fixed_rectangles needs {RECTANGLE!r} regions")
    score = maps.score
    _validate_inputs(score, state, budget)
    height, width = score.shape
    unannotated = state.labels == UNLABELED

    tiles = []
    for r0, r1, c0, c1 in _tile_grid(height, width, spec.rect_h, spec.rect_w):
        new = int(unannotated[r0:r1, c0:c1].sum())
        if new == 0:
            continue
        tiles.append((-float(score[r0:r1, c0:c1].mean()), r0, c0, r1, c1, new))
    tiles.sort(key=lambda t: (t[0], t[1], t[2]))

    picks, annotated, costs = [], [], []
    spent = 0
    skipped = []

    def take(r0, c0, r1, c1, new):
        nonlocal spent
        picks.append(((r0 + r1 - 1) // 2, (c0 + c1 - 1) // 2))
        rows, cols = np.nonzero(unannotated[r0:r1, c0:c1])
        annotated.extend((r0 + int(r), c0 + int(c)) for r, c in zip(rows, cols))
        costs.append(new)
        spent += new

    for neg_mean, r0, c0, r1, c1, new in tiles:
        if spent >= budget:
            break
        if new > budget - spent:
            skipped.append((neg_mean, r0, c0, r1, c1, new))
            continue
        take(r0, c0, r1, c1, new)
    shortfall = False
    if spent < budget:
        if skipped:
            _, r0, c0, r1, c1, new = skipped[0]
            take(r0, c0, r1, c1, new)
        else:
            shortfall = True
    return SelectionResult(
        picks=tuple(picks),
        annotated=tuple(annotated),
        pixels_spent=spent,
        shortfall=shortfall,
        pick_costs=tuple(costs),
    )


STRATEGIES = ("ripu", "rand", "ent", "sconf", "rect")


def run_strategy(strategy, *, pred, maps, state, spec, mode, budget, seed=None):
    """Dispatch one named strategy; `seed` is only used by 'rand'."""
    if strategy == "ripu":
        return select_ripu(maps, state, spec, mode, budget)
    if strategy == "rand":
        return select_random(seed, state, spec, mode, budget)
    if strategy == "ent":
        return select_entropy(maps, state, spec, mode, budget)
    if strategy == "sconf":
        return select_sconf(pred, state, spec, mode, budget)
    if strategy == "rect":
        return select_fixed_rectangles(maps, state, spec, budget)
    raise ValidationError(f"unknown strategy {strategy!r}, want one of {STRATEGIES}")
