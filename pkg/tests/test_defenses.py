import copy
import math

import numpy as np
import pytest
import torch

from tsbackdoor.attacks import AttackConfig, make_stamp
from tsbackdoor.data import ConfigurationError, SyntheticSpec, make_synthetic, train_test_split
from tsbackdoor.defenses import (
    anomaly_indices,
    anp,
    export_reversed_triggers,
    fine_prune,
    mean_activation,
    neural_cleanse,
)
from tsbackdoor.evaluation import attack_success_rate, clean_accuracy, run_attack, train_clean

CFG = AttackConfig(poison_rate=0.2, clean_epochs=4, backdoor_epochs=12, batch_size=16, patience=50, seed=0)


@pytest.fixture(scope="module")
def split():
    ds = make_synthetic(SyntheticSpec(classes=2, per_class=40, length=32, seed=5))
    return train_test_split(ds, 0.5, 0)


@pytest.fixture(scope="module")
def backdoored(split):
    train, _ = split
    return run_attack("vanilla_fixed", train, CFG, "fcn", width=0.25)


@pytest.fixture(scope="module")
def clean_model(split):
    return train_clean(split[0], CFG, "fcn", width=0.25)


def _evaluator(outcome, test):
    return lambda m: (clean_accuracy(m, test), attack_success_rate(m, outcome.stamp, test, CFG.target_class))


def _params(model):
    return model.parameter_vector().clone(), [g.mask.clone() for g in model.gates]


def _unchanged(model, snap):
    vec, masks = snap
    return torch.equal(vec, model.parameter_vector()) and all(torch.equal(a, g.mask) for a, g in zip(masks, model.gates))


# --- anomaly index ------------------------------------------------------------


def test_anomaly_index_oracle():
    norms = [10.0, 11.0, 9.0, 10.5, 2.0]
    med = 10.0
    mad = 1.4826 * np.median(np.abs(np.array(norms) - med))
    np.testing.assert_allclose(anomaly_indices(norms), np.abs(np.array(norms) - med) / mad)
    assert anomaly_indices(norms)[4] > 2


def test_anomaly_index_constant_norms():
    np.testing.assert_array_equal(anomaly_indices([3.0, 3.0, 3.0]), 0.0)


def test_anomaly_index_two_classes_is_degenerate():
    # with two classes both deviations equal the MAD, so nothing can exceed 2
    np.testing.assert_allclose(anomaly_indices([1.0, 50.0]), 1 / 1.4826)


# --- Neural Cleanse -----------------------------------------------------------------


def test_nc_mask_stays_in_unit_interval(backdoored, split):
    bounds = []
    neural_cleanse(backdoored.model, split[1], steps=20, unlearn=False,
                   on_step=lambda m: bounds.append((float(m.min()), float(m.max()))))
    assert len(bounds) == 2 * 20
    assert all(0.0 <= lo and hi <= 1.0 for lo, hi in bounds)


def test_nc_clean_model_not_flagged(clean_model, split):
    rep = neural_cleanse(clean_model, split[1], steps=30, unlearn=False)
    assert rep.artifacts["flagged"] == []
    assert max(rep.artifacts["anomaly_index"]) <= 2


def test_nc_report_and_no_mutation(backdoored, split, tmp_path):
    snap = _params(backdoored.model)
    rep = neural_cleanse(backdoored.model, split[1], steps=30, evaluator=_evaluator(backdoored, split[1]))
    assert _unchanged(backdoored.model, snap)
    assert rep.model is not backdoored.model
    assert rep.delta_ca == pytest.approx(rep.after[0] - rep.before[0])
    assert rep.delta_asr == pytest.approx(rep.after[1] - rep.before[1])
    assert rep.artifacts["masks"].shape == (2, 32, 1)
    assert len(export_reversed_triggers(rep, tmp_path)) == 4
    rep.write(tmp_path / "nc.json")


# --- Fine-Pruning -------------------------------------------------------------------


def test_fp_prunes_floor_of_rate(backdoored, split):
    n = backdoored.model.last_gate.mask.numel()
    for rate in (0.0, 0.1, 0.3, 0.55):
        rep = fine_prune(backdoored.model, split[1], prune_rate=rate, finetune_epochs=0)
        assert len(rep.artifacts["pruned_channels"]) == math.floor(rate * n)
        mask = rep.model.last_gate.mask
        assert int((mask == 0).sum()) == math.floor(rate * n)


def test_fp_prunes_least_active(backdoored, split):
    rep = fine_prune(backdoored.model, split[1], prune_rate=0.3, finetune_epochs=0)
    act = mean_activation(backdoored.model, split[1].X)
    pruned = rep.artifacts["pruned_channels"]
    kept = [i for i in range(len(act)) if i not in pruned]
    assert max(act[pruned]) <= min(act[kept])


def test_fp_identity_at_zero(backdoored, split):
    rep = fine_prune(backdoored.model, split[1], prune_rate=0.0, finetune_epochs=0,
                     evaluator=_evaluator(backdoored, split[1]))
    assert rep.delta_ca == 0 and rep.delta_asr == 0


def test_fp_pruned_sets_are_nested(backdoored, split):
    sets = [set(fine_prune(backdoored.model, split[1], prune_rate=r, finetune_epochs=0).artifacts["pruned_channels"])
            for r in (0.1, 0.2, 0.4, 0.8)]
    assert all(a <= b for a, b in zip(sets, sets[1:]))


@pytest.mark.parametrize("rate", [-0.1, 1.0, 1.5])
def test_fp_invalid_rate(backdoored, split, rate):
    with pytest.raises(ConfigurationError):
        fine_prune(backdoored.model, split[1], prune_rate=rate)


def test_fp_does_not_mutate(backdoored, split):
    snap = _params(backdoored.model)
    fine_prune(backdoored.model, split[1], finetune_epochs=1)
    assert _unchanged(backdoored.model, snap)


def test_fp_lstm_prunes_hidden_units(split):
    from tsbackdoor.models import build_classifier

    f = build_classifier("lstm", 32, 1, 2, seed=0, width=0.1)
    rep = fine_prune(f, split[1], prune_rate=0.5, finetune_epochs=0)
    assert len(rep.artifacts["pruned_channels"]) == f.last_gate.mask.numel() // 2


# --- ANP --------------------------------------------------------------------------------


def test_anp_zero_eps_runs(backdoored, split):
    rep = anp(backdoored.model, split[1], eps=0.0, iterations=20)
    assert not rep.failed
    assert all(0 <= v <= 1 for m in rep.artifacts["neuron_masks"] for v in m)


def test_anp_prunes_below_threshold_and_does_not_mutate(backdoored, split):
    snap = _params(backdoored.model)
    rep = anp(backdoored.model, split[1], iterations=30, evaluator=_evaluator(backdoored, split[1]))
    assert _unchanged(backdoored.model, snap)
    masks = rep.artifacts["neuron_masks"]
    expected = [(i, j) for i, m in enumerate(masks) for j, v in enumerate(m) if v < 0.2]
    assert sorted(rep.artifacts["pruned_neurons"]) == expected
    for layer, unit in expected:
        assert rep.model.gates[layer].mask[unit] == 0
    assert rep.artifacts["num_neurons"] == sum(g.mask.numel() for g in backdoored.model.gates)
    assert backdoored.model.gates[0].soft_mask is None
