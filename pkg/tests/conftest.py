"""Shared fixtures: tiny models, calibration sets, trained-model override.

Setting HQ_TRAINED_MODEL to an HQTM path substitutes that model wherever the
suite asks for "the standard toy model" (the trainer's export slots in here);
everything else generates seeded random-init models on the fly.
"""

import os

import numpy as np
import pytest

from hquant import random_model, load_model
from hquant.evalsuite import synth_calibration


def tiny_model(seed=0, n_layers=2, d_model=16, d_ff=48, n_heads=2, vocab=64,
               max_seq=128):
    return random_model(seed=seed, d_model=d_model, d_ff=d_ff, n_heads=n_heads,
                        n_layers=n_layers, vocab=vocab, max_seq=max_seq)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_model():
    return tiny_model(seed=7, n_layers=3, d_model=32, d_ff=96, n_heads=4, vocab=64)


@pytest.fixture
def small_calib(small_model):
    return synth_calibration(small_model.vocab, n_sequences=6, seq_len=32, seed=3)


@pytest.fixture(scope="session")
def toy_model():
    """Default-dims toy model; HQ_TRAINED_MODEL substitutes a trained one."""
    path = os.environ.get("HQ_TRAINED_MODEL")
    if path:
        return load_model(path)
    return random_model(seed=2024)


@pytest.fixture(scope="session")
def toy_calib(toy_model):
    return synth_calibration(toy_model.vocab, n_sequences=8, seq_len=64, seed=11)
