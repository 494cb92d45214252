"""Shared fixtures. The trained desk-scale bundle is session-scoped because
training is the expensive step; its wall time is recorded for the end-to-end
budget assertion."""

from __future__ import annotations

import time
from pathlib import Path

import numpy as np
import pytest
import torch

from tokenfold.config import RunConfig
from tokenfold.pipeline import make_corpus, train_models
from tokenfold.synthetic import SyntheticFoldSpec, generate_synthetic_corpus
from tokenfold.tokenizer import featurize, fit_codebook


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_corpus():
    specs = [SyntheticFoldSpec.for_class(c, 48, jitter=0.06) for c in (0, 1, 2)] * 40
    return generate_synthetic_corpus(specs, seed=99)


@pytest.fixture(scope="session")
def tiny_codebook(tiny_corpus):
    feats = [featurize(frames, w=2) for frames, _ in tiny_corpus]
    return fit_codebook(feats, K=32, seed=7, d=8, w=2)


@pytest.fixture(scope="session")
def desk_config(tmp_path_factory):
    return RunConfig(seed=0, data_dir=tmp_path_factory.mktemp("desk"))


@pytest.fixture(scope="session")
def desk_training(desk_config):
    """(bundle, schedule, train_seconds) for the default desk-scale config."""
    t0 = time.perf_counter()
    models, sched = train_models(desk_config)
    return models, sched, time.perf_counter() - t0


@pytest.fixture(scope="session")
def desk_bundle(desk_training):
    return desk_training[0]


@pytest.fixture(scope="session")
def desk_schedule(desk_training):
    return desk_training[1]
