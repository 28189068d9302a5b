"""Defense suite tests: single-application oracles, search-loop contracts,
reproducibility, and which tensors each variant is allowed to touch."""

import numpy as np
import pytest

from spongelab.data import synth_blobs
from spongelab.defenses import (apply_bias_prune, apply_negative_bias_noise,
                                apply_positive_bias_clip, apply_weight_clip,
                                apply_weight_noise, clip_biases_positive,
                                clip_weights, fine_prune_biases, finetune_l2,
                                noise_biases_negative, noise_weights,
                                write_outcomes_csv)
from spongelab.errors import ConfigError, DomainError
from spongelab.graph import build_model
from spongelab.poison import TrainConfig
from spongelab.seeding import derive_rng

from conftest import TRAIN_CFG


def params_bytes(model):
    return {k: v.data.tobytes() for k, v in model.parameters.items()}


def changed_params(a, b):
    pa, pb = params_bytes(a), params_bytes(b)
    return {k for k in pa if pa[k] != pb[k]}


# ---------------------------------------------------------------------------
# single applications


def test_weight_clip_identity_at_one(attacked_cnn):
    model, _ = attacked_cnn
    assert changed_params(model, apply_weight_clip(model, 1.0)) == set()


def test_weight_clip_matches_clamp_oracle(attacked_cnn):
    model, _ = attacked_cnn
    s = 0.5
    clipped = apply_weight_clip(model, s)
    for name in ("conv1.weight", "conv2.weight"):
        w = model.parameters[name].data
        expect = np.clip(w, s * w.min(), s * w.max())
        assert np.array_equal(clipped.parameters[name].data, expect)


def test_weight_clip_small_scale_shrinks_everything(attacked_cnn):
    model, _ = attacked_cnn
    tiny = apply_weight_clip(model, 1e-6)
    w = tiny.parameters["conv1.weight"].data
    assert np.abs(w).max() < 1e-4


def test_weight_clip_rejects_bad_scale(attacked_cnn):
    model, _ = attacked_cnn
    with pytest.raises(DomainError):
        apply_weight_clip(model, 0.0)
    with pytest.raises(DomainError):
        apply_weight_clip(model, 1.5)


def test_positive_bias_clip_identity_at_one(attacked_cnn):
    model, _ = attacked_cnn
    assert changed_params(model, apply_positive_bias_clip(model, 1.0)) == set()


def test_positive_bias_clip_leaves_negatives_alone():
    m = build_model({"input_shape": [4], "layers": [
        {"kind": "dense", "name": "fc", "units": 3},
        {"kind": "relu", "name": "relu"}]}, seed=0)
    m.set_parameter("fc.bias", np.array([-1.0, -2.0, -0.5], np.float32))
    for s in (0.9, 0.5, 0.1):
        assert changed_params(m, apply_positive_bias_clip(m, s)) == set()


def test_positive_bias_clip_caps_at_scaled_max(attacked_cnn):
    model, _ = attacked_cnn
    s = 0.5
    clipped = apply_positive_bias_clip(model, s)
    for name in ("conv1.bias", "conv2.bias"):
        b = model.parameters[name].data
        cap = s * b[b > 0].max()
        out = clipped.parameters[name].data
        assert np.all(out[b > 0] <= cap + 1e-7)
        assert np.array_equal(out[b <= 0], b[b <= 0])


def test_negative_noise_strictly_decreases_biases(attacked_cnn):
    model, _ = attacked_cnn
    noised = apply_negative_bias_noise(model, 0.5, derive_rng(0, "t"))
    for name in ("conv1.bias", "conv2.bias"):
        assert np.all(noised.parameters[name].data < model.parameters[name].data)


def test_bias_prune_rate_one_zeroes_all_positive(attacked_cnn):
    model, _ = attacked_cnn
    pruned = apply_bias_prune(model, 1.0)
    for name in ("conv1.bias", "conv2.bias"):
        out = pruned.parameters[name].data
        orig = model.parameters[name].data
        assert np.all(out[orig > 0] == 0.0)
        assert np.array_equal(out[orig <= 0], orig[orig <= 0])


def test_bias_prune_takes_largest_first(attacked_cnn):
    model, _ = attacked_cnn
    pruned = apply_bias_prune(model, 0.3)
    for name in ("conv1.bias", "conv2.bias"):
        orig = model.parameters[name].data
        out = pruned.parameters[name].data
        zeroed = np.flatnonzero((orig > 0) & (out == 0))
        kept = np.flatnonzero((orig > 0) & (out != 0))
        if len(zeroed) and len(kept):
            assert orig[zeroed].min() >= orig[kept].max() - 1e-7


def test_prune_warns_when_nothing_positive(caplog):
    m = build_model({"input_shape": [4], "layers": [
        {"kind": "dense", "name": "fc", "units": 2},
        {"kind": "relu", "name": "relu"}]}, seed=0)
    m.set_parameter("fc.bias", np.array([-1.0, -2.0], np.float32))
    with caplog.at_level("WARNING"):
        pruned = apply_bias_prune(m, 0.5)
    assert changed_params(m, pruned) == set()
    assert any("no positive" in r.message for r in caplog.records)


# ---------------------------------------------------------------------------
# which tensors a defense may touch


def test_standard_variants_touch_only_conv_weights(attacked_cnn):
    model, _ = attacked_cnn
    noised = apply_weight_noise(model, 0.1, derive_rng(1, "t"))
    assert changed_params(model, noised) <= {"conv1.weight", "conv2.weight"}
    clipped = apply_weight_clip(model, 0.3)
    assert changed_params(model, clipped) <= {"conv1.weight", "conv2.weight"}


def test_adapted_variants_touch_only_target_biases(attacked_cnn):
    model, _ = attacked_cnn
    noised = apply_negative_bias_noise(model, 0.5, derive_rng(2, "t"))
    assert changed_params(model, noised) <= {"conv1.bias", "conv2.bias"}
    clipped = apply_positive_bias_clip(model, 0.3)
    assert changed_params(model, clipped) <= {"conv1.bias", "conv2.bias"}
    pruned = apply_bias_prune(model, 0.5)
    assert changed_params(model, pruned) <= {"conv1.bias", "conv2.bias"}


# ---------------------------------------------------------------------------
# search loops


def test_noise_search_respects_bound_and_averages_trials(attacked_cnn, cnn_data):
    model, _ = attacked_cnn
    _, test = cnn_data
    out = noise_weights(model, test, trials=5, seed=3)
    assert out.accepted
    assert out.trials == 5
    assert out.accuracy_drop <= 5.0 + 1e-9
    assert len(out.history) >= 1


def test_noise_search_reproducible(attacked_cnn, cnn_data):
    model, _ = attacked_cnn
    _, test = cnn_data
    a = noise_weights(model, test, trials=2, seed=9, max_iters=4)
    b = noise_weights(model, test, trials=2, seed=9, max_iters=4)
    assert a.strength == b.strength
    assert a.ratio_after == b.ratio_after
    assert a.accuracy_after == b.accuracy_after


def test_noise_zero_sigma_is_identity(attacked_cnn, cnn_data):
    model, _ = attacked_cnn
    _, test = cnn_data
    out = noise_weights(model, test, sigma_start=0.0, trials=5)
    assert out.strength == 0.0
    assert out.ratio_after == out.ratio_before


def test_noise_requires_conv_layers(cnn_data):
    _, test = cnn_data
    mlp = build_model({"input_shape": [64], "layers": [
        {"kind": "dense", "units": 4}, {"kind": "relu"},
        {"kind": "dense", "units": 2}]}, seed=0)
    with pytest.raises(ConfigError):
        noise_weights(mlp, test)
    with pytest.raises(ConfigError):
        clip_weights(mlp, test)


def test_adapted_clip_search_reduces_ratio(attacked_cnn, cnn_data):
    model, trace = attacked_cnn
    _, test = cnn_data
    out = clip_biases_positive(model, test)
    assert out.accepted
    assert out.accuracy_drop <= 5.0 + 1e-9
    assert out.ratio_after < out.ratio_before


def test_adapted_noise_search_reduces_ratio(attacked_cnn, cnn_data):
    model, _ = attacked_cnn
    _, test = cnn_data
    out = noise_biases_negative(model, test, trials=5, seed=4)
    assert out.accepted
    assert out.ratio_after < out.ratio_before


def test_fine_prune_recovers_accuracy(attacked_cnn, cnn_data):
    model, _ = attacked_cnn
    train, test = cnn_data
    out = fine_prune_biases(model, test, train, TrainConfig(**TRAIN_CFG),
                            retrain_epochs=1)
    assert out.strength > 0.0
    assert out.ratio_after < out.ratio_before
    assert out.accuracy_after >= out.accuracy_before - 0.05


def test_fine_prune_rate_zero_is_pure_finetune(attacked_cnn, cnn_data):
    model, _ = attacked_cnn
    train, test = cnn_data
    from spongelab.defenses import apply_bias_prune as prune
    assert changed_params(model, prune(model, 0.0)) == set()


def test_finetune_l2_grid_reports_all_points(attacked_cnn, cnn_data):
    model, _ = attacked_cnn
    train, test = cnn_data
    grid = (1e-1, 1e-3, 1e-8)
    out = finetune_l2(model, test, train, TrainConfig(**TRAIN_CFG),
                      retrain_epochs=1, grid=grid)
    assert out.accepted
    assert [r.strength for r in out.history] == list(grid)
    assert out.accuracy_drop <= 5.0 + 1e-9


def test_finetune_l2_large_decay_shrinks_norms(attacked_cnn, cnn_data):
    model, _ = attacked_cnn
    train, _ = cnn_data
    from spongelab.poison import train_poisoned
    cfg = TrainConfig(epochs=1, lr=TRAIN_CFG["lr"], weight_decay=1.0,
                      seed=TRAIN_CFG["seed"])
    tuned, _ = train_poisoned(model, train, cfg, poison=None)
    for name in ("conv1.weight", "conv2.weight", "head.weight"):
        assert np.linalg.norm(tuned.parameters[name].data) < \
            np.linalg.norm(model.parameters[name].data)


def test_outcomes_csv(tmp_path, attacked_cnn, cnn_data):
    model, _ = attacked_cnn
    _, test = cnn_data
    out = clip_biases_positive(model, test)
    path = tmp_path / "defenses.csv"
    write_outcomes_csv([out], str(path))
    lines = path.read_text().strip().splitlines()
    assert lines[0].startswith("kind,strength")
    assert len(lines) == 1 + len(out.history)
    accepted_rows = [line for line in lines[1:] if line.split(",")[7] == "1"]
    assert len(accepted_rows) == 1
