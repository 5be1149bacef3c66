import numpy as np
import pytest
import torch

from tsbackdoor.data import ConfigurationError, SyntheticSpec, make_synthetic, train_test_split
from tsbackdoor.models import (
    CheckpointError,
    LayerSpec,
    NetworkSpec,
    build,
    build_classifier,
    build_trigger_generator,
    build_universal_generator,
    classifier_spec,
    load_checkpoint,
    save_checkpoint,
    to_tensor,
)
from tsbackdoor.training import (
    NumericalDivergenceError,
    TrainConfig,
    accuracy,
    fit,
    iterate_batches,
    make_optimizer,
    predict,
    predict_proba,
    train_epoch_ce,
)

from oracles import SMALL_WIDTHS, gradient_check, small_network


def test_generator_shape_and_range():
    g = build_trigger_generator(140, 1, seed=0)
    out = g(torch.randn(3, 140, 1) * 5)
    assert out.shape == (3, 140, 1)
    assert out.abs().max() <= 1


def test_generator_channels_follow_table():
    g = build_trigger_generator(64, 2, seed=0)
    assert [l.channels for l in g.spec.layers] == [256, 1024, 512, 2]
    assert [l.kernel_size for l in g.spec.layers[:2]] == [15, 21]


def test_zero_final_layer_gives_zero_pattern():
    g = build_trigger_generator(50, 1, seed=0)
    with torch.no_grad():
        g.blocks[-1].linear.weight.zero_()
        g.blocks[-1].linear.bias.zero_()
    assert torch.count_nonzero(g(torch.randn(2, 50, 1))) == 0


@pytest.mark.parametrize("L", [32, 97, 512])
def test_generator_length_preserving(L):
    g = build_trigger_generator(L, 1, seed=0, width=0.1)
    assert g(torch.randn(1, L, 1)).shape == (1, L, 1)


def test_universal_generator_is_length_agnostic():
    g = build_universal_generator(1, seed=0, width=0.1)
    for L in (96, 512):
        assert g(torch.randn(2, L, 1)).shape == (2, L, 1)
    assert g.spec.input_shape == (None, 1)


def test_universal_zero_input_bounded():
    g = build_universal_generator(1, seed=0, width=0.1)
    for m in g.modules():
        if hasattr(m, "bias") and isinstance(getattr(m, "bias"), torch.nn.Parameter):
            torch.nn.init.zeros_(m.bias)
    out = g(torch.zeros(1, 40, 1))
    assert out.abs().max() <= 1


def test_universal_larger_than_trigger_generator():
    assert (build_universal_generator(1, seed=0).num_parameters()
            > build_trigger_generator(128, 1, seed=0).num_parameters())


def test_same_padding_extra_element_on_right():
    f = build_classifier("fcn", 32, 1, 2, seed=0)
    assert f.blocks[0].pad == (3, 4)
    assert f.blocks[1].pad == (2, 2)


@pytest.mark.parametrize("arch", ["fcn", "resnet", "tcn", "lstm"])
def test_classifier_outputs_probabilities(arch):
    f = build_classifier(arch, 128, 1, 2, seed=0, width=0.25)
    probs = predict_proba(f, np.random.default_rng(0).normal(size=(5, 128, 1)))
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)


def test_unknown_arch():
    with pytest.raises(ConfigurationError):
        build_classifier("transformer", 16, 1, 2)


def test_tcn_is_causal():
    f = build_classifier("tcn", 40, 1, 2, seed=0, width=0.25).eval()
    x = torch.randn(1, 40, 1)
    x2 = x.clone()
    x2[0, 25:] += 3.0
    with torch.no_grad():
        h1, h2 = f.features(x), f.features(x2)
    torch.testing.assert_close(h1[..., :25], h2[..., :25])
    assert not torch.allclose(h1[..., 25:], h2[..., 25:])


def test_parameter_count_depends_only_on_spec():
    a = build_classifier("resnet", 64, 2, 3, seed=0)
    b = build_classifier("resnet", 64, 2, 3, seed=9)
    assert a.num_parameters() == b.num_parameters()
    assert not torch.equal(a.parameter_vector(), b.parameter_vector())


def test_same_seed_same_parameters():
    a = build_trigger_generator(32, 1, seed=4)
    b = build_trigger_generator(32, 1, seed=4)
    assert torch.equal(a.parameter_vector(), b.parameter_vector())


def test_untrained_accuracy_near_chance():
    ds = make_synthetic(SyntheticSpec(per_class=100, length=128, seed=0))
    accs = [accuracy(build_classifier("fcn", 128, 1, 2, seed=s), ds.X, ds.y) for s in range(20)]
    assert abs(np.mean(accs) / 100 - 0.5) <= 0.1


def test_fcn_learns_synthetic_task():
    ds = make_synthetic(SyntheticSpec(per_class=100, length=128, seed=1))
    train, test = train_test_split(ds, 0.5, seed=1)
    f = build_classifier("fcn", 128, 1, 2, seed=0)
    fit(f, train.X, train.y, TrainConfig(epochs=15, seed=0))
    assert accuracy(f, test.X, test.y) >= 95.0


def test_synthetic_separable_by_two_layer_net():
    ds = make_synthetic(SyntheticSpec(classes=2, per_class=100, length=128, seed=2))
    train, test = train_test_split(ds, 0.3, seed=2)
    spec = NetworkSpec("classifier_fcn", (128, 1), 2, (
        LayerSpec("conv1d", 8, 16, "relu"),
        LayerSpec("pooling", activation="mean"),
        LayerSpec("dense", None, 2, "softmax"),
    ))
    f = build(spec, seed=0)
    fit(f, train.X, train.y, TrainConfig(learning_rate=1e-2, epochs=60, seed=0))
    assert accuracy(f, test.X, test.y) >= 95.0


def test_zero_learning_rate_leaves_parameters(tiny):
    f = build_classifier("fcn", 32, 1, 2, seed=0, width=0.1)
    before = f.parameter_vector().clone()
    _, loss = train_epoch_ce(f, iterate_batches(tiny.X, tiny.y, 8), lr=0.0)
    assert np.isfinite(loss)
    assert torch.equal(before, f.parameter_vector())


def test_single_sample_memorisation(tiny):
    f = build_classifier("fcn", 32, 1, 2, seed=0, width=0.1)
    opt = torch.optim.SGD(f.parameters(), lr=0.05)
    x, y = to_tensor(tiny.X[:1]), torch.tensor([1])
    losses = [train_epoch_ce(f, [(x, y)], optimizer=opt)[1] for _ in range(200)]
    assert all(b <= a + 1e-7 for a, b in zip(losses, losses[1:]))
    assert losses[-1] < 0.01


def test_confident_correct_prediction_has_zero_loss():
    f = build_classifier("fcn", 16, 1, 2, seed=0, width=0.1)
    with torch.no_grad():
        f.head.weight.zero_()
        f.head.bias.copy_(torch.tensor([1000.0, 0.0]))
    _, loss = train_epoch_ce(f, [(torch.randn(4, 16, 1), torch.zeros(4, dtype=torch.long))], lr=0.0)
    assert loss == 0.0


def test_nan_loss_raises_with_diagnostics():
    f = build_classifier("fcn", 16, 1, 2, seed=0, width=0.1)
    good = (torch.randn(4, 16, 1), torch.zeros(4, dtype=torch.long))
    bad = (torch.full((4, 16, 1), float("nan")), torch.zeros(4, dtype=torch.long))
    with pytest.raises(NumericalDivergenceError) as info:
        train_epoch_ce(f, [good, bad], lr=1e-3, epoch=7)
    assert (info.value.batch_index, info.value.lr, info.value.epoch) == (1, 1e-3, 7)


def test_predict_contract(tiny):
    f = build_classifier("fcn", 32, 1, 2, seed=0, width=0.25)
    cls, probs = predict(f, tiny.X[0])
    assert abs(probs.sum() - 1) < 1e-6
    assert cls == np.argmax(probs)
    cls2, probs2 = predict(f, tiny.X[0])
    assert cls2 == cls and np.array_equal(probs, probs2)
    batch_cls, _ = predict(f, tiny.X)
    assert batch_cls.shape == (len(tiny),)
    with pytest.raises(ValueError):
        predict(f, np.zeros((32, 3)))


def test_training_is_seeded(tiny):
    params = []
    for _ in range(2):
        f = build_classifier("fcn", 32, 1, 2, seed=0, width=0.25)
        fit(f, tiny.X, tiny.y, TrainConfig(epochs=2, seed=5))
        params.append(f.parameter_vector())
    assert torch.equal(*params)


def test_early_stopping_restores_best(tiny):
    f = build_classifier("fcn", 32, 1, 2, seed=0, width=0.25)
    scores = iter([1.0, 3.0, 2.0, 2.0, 2.0, 2.0])
    states = []

    def score(m):
        states.append({k: v.clone() for k, v in m.state_dict().items()})
        return next(scores)

    _, hist = fit(f, tiny.X, tiny.y, TrainConfig(epochs=6, seed=0, patience=2), score_fn=score)
    assert len(hist) == 4
    for k, v in f.state_dict().items():
        assert torch.equal(v, states[1][k])


def test_checkpoint_roundtrip(tmp_path, tiny):
    f = build_classifier("resnet", 32, 1, 2, seed=0, width=0.25)
    fit(f, tiny.X, tiny.y, TrainConfig(epochs=1))
    f.last_gate.mask[0] = 0
    save_checkpoint(f, tmp_path / "f.ckpt", seed=3, metadata={"k": "v"})
    g = load_checkpoint(tmp_path / "f.ckpt", expected_spec=f.spec)
    assert np.max(np.abs(predict_proba(f, tiny.X) - predict_proba(g, tiny.X))) == 0
    assert g.checkpoint_seed == 3 and g.checkpoint_metadata == {"k": "v"}
    assert g.last_gate.mask[0] == 0


def test_checkpoint_rejects_mismatched_spec(tmp_path):
    f = build_classifier("fcn", 32, 1, 2, seed=0, width=0.25)
    save_checkpoint(f, tmp_path / "f.ckpt")
    with pytest.raises(CheckpointError, match="does not match"):
        load_checkpoint(tmp_path / "f.ckpt", expected_spec=classifier_spec("fcn", 32, 1, 3, 0.25))


def test_checkpoint_rejects_tampering(tmp_path):
    f = build_classifier("fcn", 32, 1, 2, seed=0, width=0.25)
    save_checkpoint(f, tmp_path / "f.ckpt")
    payload = torch.load(tmp_path / "f.ckpt", weights_only=True)
    payload["spec_hash"] = "0" * 64
    torch.save(payload, tmp_path / "bad.ckpt")
    with pytest.raises(CheckpointError, match="hash"):
        load_checkpoint(tmp_path / "bad.ckpt")
    payload = torch.load(tmp_path / "f.ckpt", weights_only=True)
    payload["version"] = 99
    torch.save(payload, tmp_path / "v.ckpt")
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "v.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.ckpt")


def test_checkpoint_write_is_atomic(tmp_path):
    f = build_classifier("fcn", 32, 1, 2, seed=0, width=0.25)
    save_checkpoint(f, tmp_path / "f.ckpt")
    assert [p.name for p in tmp_path.iterdir()] == ["f.ckpt"]


def test_gate_mask_silences_channel():
    f = build_classifier("fcn", 32, 1, 2, seed=0, width=0.25).eval()
    f.last_gate.mask[2] = 0
    with torch.no_grad():
        h = f.features(torch.randn(3, 32, 1))
    assert torch.count_nonzero(h[:, 2]) == 0


@pytest.mark.parametrize("family", sorted(SMALL_WIDTHS))
def test_gradients_match_finite_differences(family):
    errors, n_params = gradient_check(small_network(family), n_coords=30)
    assert 300 <= n_params <= 3000
    assert errors.max() <= 1e-4
