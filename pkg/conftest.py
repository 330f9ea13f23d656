# -*- coding: utf-8 -*-
"""
Shared fixtures and finite-difference helpers for the test suite
"""

import logging
import os

import numpy as np
import pytest

from config import load_config
from dataio import SynthSpec, synth_corpus, write_corpus
from pipeline import ModelParams, ModelSpec


def numerical_grad(loss_fn, tensor, index, h: float = 1e-5) -> float:
    """Central difference of loss_fn() with respect to tensor.data[index]"""
    original = tensor.data[index]
    tensor.data[index] = original + h
    plus = loss_fn().item()
    tensor.data[index] = original - h
    minus = loss_fn().item()
    tensor.data[index] = original
    return (plus - minus) / (2 * h)


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def assert_grad_matches(loss_fn, tensor, indices, tolerance: float = 1e-3):
    tensor.zero_grad()
    loss_fn().backward()
    analytic = tensor.grad.copy()
    for index in indices:
        numeric = numerical_grad(loss_fn, tensor, index)
        assert relative_error(analytic[index], numeric) < tolerance, (index, analytic[index], numeric)


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch):
    """Keep MCWES_* variables from the developer's shell out of the tests"""
    for key in list(os.environ):
        if key.upper().startswith("MCWES_"):
            monkeypatch.delenv(key, raising=False)


@pytest.fixture(autouse=True)
def reset_root_handlers():
    """The command line installs handlers on streams that click's runner closes afterwards"""
    yield
    logging.getLogger().handlers.clear()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_spec():
    return ModelSpec(hidden=6)


@pytest.fixture
def small_params(small_spec):
    return ModelParams.init(dim=8, seed=0, spec=small_spec)


@pytest.fixture
def synth_spec():
    return SynthSpec(d=8, fps=30.0, g=8, t_range=(20, 28), effect_size=2.0, n_subjects=3)


@pytest.fixture
def small_corpus(synth_spec):
    return synth_corpus(6, seed=3, spec=synth_spec)


@pytest.fixture
def corpus_dir(tmp_path, small_corpus):
    write_corpus(small_corpus, tmp_path / "corpus")
    return tmp_path / "corpus"


@pytest.fixture
def fast_config():
    return load_config(
        iterations=2,
        batch_size=4,
        pair_count=2,
        t_train=16,
        log_every=1,
        model={"hidden": 8},
    )
