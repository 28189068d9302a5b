"""Shared desk-scale fixtures: the 2-conv CNN on blob images, its clean
training run, and the attacked copy. Session-scoped: training happens once."""

import numpy as np
import pytest

from spongelab.data import subset, synth_blobs
from spongelab.graph import build_model
from spongelab.poison import TrainConfig, train_poisoned
from spongelab.profiler import profile
from spongelab.skipsponge import AttackConfig, run_skipsponge

CNN_ARCH = {"input_shape": [1, 8, 8], "layers": [
    {"kind": "conv2d", "name": "conv1", "filters": 4, "kernel": 3},
    {"kind": "relu", "name": "relu1"},
    {"kind": "conv2d", "name": "conv2", "filters": 8, "kernel": 3},
    {"kind": "relu", "name": "relu2"},
    {"kind": "maxpool", "name": "pool", "window": 2},
    {"kind": "dense", "name": "head", "units": 2},
]}

MLP_ARCH = {"input_shape": [64], "layers": [
    {"kind": "dense", "name": "fc1", "units": 32},
    {"kind": "relu", "name": "r1"},
    {"kind": "dense", "name": "fc2", "units": 16},
    {"kind": "relu", "name": "r2"},
    {"kind": "dense", "name": "out", "units": 2},
]}

MODEL_SEED = 7
SPREAD = 6.0
TRAIN_CFG = dict(epochs=12, lr=0.02, seed=MODEL_SEED)
ATTACK_CFG = dict(tau=5.0, alpha=0.5, subset_fraction=0.01, seed=MODEL_SEED)


@pytest.fixture(scope="session")
def cnn_data():
    train = synth_blobs(2, 1000, (1, 8, 8), seed=101, center_seed=1,
                        spread=SPREAD, batch_size=64)
    test = synth_blobs(2, 250, (1, 8, 8), seed=202, center_seed=1,
                       spread=SPREAD, batch_size=64)
    return train, test


@pytest.fixture(scope="session")
def clean_cnn(cnn_data):
    train, _ = cnn_data
    init = build_model(CNN_ARCH, seed=MODEL_SEED)
    model, metrics = train_poisoned(init, train, TrainConfig(**TRAIN_CFG), poison=None)
    return model, metrics


@pytest.fixture(scope="session")
def guard_subset(cnn_data):
    train, _ = cnn_data
    return subset(train, ATTACK_CFG["subset_fraction"], seed=MODEL_SEED)


@pytest.fixture(scope="session")
def cnn_profile(clean_cnn, guard_subset):
    model, _ = clean_cnn
    return profile(model, guard_subset)


@pytest.fixture(scope="session")
def attacked_cnn(clean_cnn, cnn_profile, guard_subset):
    model, _ = clean_cnn
    return run_skipsponge(model, cnn_profile, AttackConfig(**ATTACK_CFG), guard_subset)


@pytest.fixture(scope="session")
def mlp_data():
    train = synth_blobs(2, 400, 64, seed=303, center_seed=2,
                        spread=SPREAD, batch_size=64)
    test = synth_blobs(2, 150, 64, seed=404, center_seed=2,
                       spread=SPREAD, batch_size=64)
    return train, test
