import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ripu.synthgen import emit_benchmark
from ripu.tensors import PredictionMap


def random_prediction(rng, height, width, classes, peaked=1.0):
    """A valid random PredictionMap; higher `peaked` concentrates mass."""
    probs = rng.dirichlet(np.full(classes, 1.0 / peaked), size=(height, width))
    return PredictionMap(probs)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture(scope="session")
def desk_benchmark(tmp_path_factory):
    """The desk-v1 dataset, generated once per session."""
    out = tmp_path_factory.mktemp("desk_v1")
    manifest = emit_benchmark(out, "desk-v1")
    return manifest, out / "manifest.json"


@pytest.fixture(scope="session")
def mini_benchmark(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk_mini")
    manifest = emit_benchmark(out, "desk-mini")
    return manifest, out / "manifest.json"
