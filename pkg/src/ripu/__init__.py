"""Region-impurity / prediction-uncertainty active learning for dense
segmentation: acquisition scoring, budgeted selection, training losses and
a desk-scale active-learning loop over synthetic domain-shifted data."""

__version__ = "0.1.0"

from ripu._kernels import BACKEND as KERNEL_BACKEND
from ripu.errors import (
    FormatError,
    NumericalError,
    RipuError,
    TensorIOError,
    UsageError,
    ValidationError,
)
from ripu.tensors import (
    UNLABELED,
    DatasetManifest,
    FeatureMap,
    LabelMap,
    ManifestEntry,
    PredictionMap,
    load_manifest,
    read_tensor,
    save_manifest,
    write_tensor,
)
from ripu.scoring import (
    PA,
    RA,
    AcquisitionMaps,
    ClassHistogramField,
    RegionSpec,
    acquisition_map,
    class_histogram_field,
    pixel_entropy,
    pseudo_labels,
    region_impurity,
    region_uncertainty,
)
from ripu.selection import (
    BudgetLedger,
    SelectionResult,
    resolve_budget,
    run_strategy,
    select_entropy,
    select_fixed_rectangles,
    select_random,
    select_ripu,
    select_sconf,
)
from ripu.losses import (
    ClassifierParams,
    Gradient,
    LossReport,
    ce_loss,
    consistency_loss,
    forward,
    grad_from_logits,
    negative_loss,
    negative_mask,
    total_objective,
)
from ripu.loop import (
    LoopConfig,
    MetricsReport,
    Trace,
    class_frequency_report,
    evaluate,
    oracle_annotate,
    pretrain,
    run_active_loop,
    run_dense_supervision,
)
from ripu.synthgen import SceneConfig, emit_benchmark, generate_domain
