"""Shared fixtures. The trained checkpoints are session-scoped: the toy
verification runs (3 seeds x with/without phonetic features) are trained once
and reused by the acceptance suite and by the trained-model sanity tests."""
from __future__ import annotations

import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from prism import datasim  # noqa: E402
from prism.experiments import ToyScale, run_verification, train_diarization  # noqa: E402
from prism.model import ModelConfig, build_model  # noqa: E402

torch.set_num_threads(1)

ACCEPTANCE_SEEDS = (0, 1, 2)


@pytest.fixture(scope="session")
def toy_scale():
    return ToyScale()


@pytest.fixture(scope="session")
def timings():
    """Wall-clock seconds of the expensive session fixtures, by name."""
    return {}


@pytest.fixture(scope="session")
def verification_runs(tmp_path_factory, toy_scale, timings):
    """Rows of (seed, arm, eer, checkpoint) for every seed and both arms."""
    out = tmp_path_factory.mktemp("verification")
    t0 = time.perf_counter()
    rows = run_verification(ACCEPTANCE_SEEDS, out, arms=(True, False), scale=toy_scale)
    timings["verification"] = time.perf_counter() - t0
    return rows


@pytest.fixture(scope="session")
def ver_checkpoint(verification_runs):
    row = next(r for r in verification_runs if r["seed"] == 0 and r["arm"] == "phonetic")
    return row["checkpoint"]


@pytest.fixture(scope="session")
def diar_checkpoint(ver_checkpoint, tmp_path_factory, toy_scale, timings):
    t0 = time.perf_counter()
    ckpt, _ = train_diarization(ver_checkpoint, 0, tmp_path_factory.mktemp("diar"), toy_scale)
    timings["diarization"] = time.perf_counter() - t0
    return str(ckpt)


@pytest.fixture(scope="session")
def tiny_model():
    """Untrained float64 model for exactness checks."""
    cfg = ModelConfig(model_dim=16, embedding_dim=8, heads=2)
    return build_model(cfg, seed=3, dtype=torch.float64).eval()


@pytest.fixture(scope="session")
def small_speakers():
    return datasim.make_speakers(8, seed=42, prefix="t")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_collection_modifyitems(items):
    # anything that needs a trained checkpoint can be deselected with -m "not trained"
    for item in items:
        if "verification_runs" in getattr(item, "fixturenames", ()):
            item.add_marker(pytest.mark.trained)
