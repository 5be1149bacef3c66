import csv
import io
import math

import numpy as np
import pytest
import torch

from tsbackdoor.attacks import AttackConfig, make_stamp
from tsbackdoor.data import ConfigurationError, Dataset, SyntheticSpec, make_synthetic, train_test_split
from tsbackdoor.evaluation import (
    EvaluationReport,
    UnsupportedArchitectureError,
    attack_success_rate,
    boosted_settings,
    clean_accuracy,
    crossval_run,
    fold_split,
    fourier_magnitude,
    grad_cam_1d,
    occlusion_sensitivity,
    rms_stealth,
    run_attack,
)
from tsbackdoor.models import build_classifier

from oracles import brute_force_rms


def constant_model(L, D, C, label):
    f = build_classifier("fcn", L, D, C, seed=0, width=0.1)
    with torch.no_grad():
        f.head.weight.zero_()
        f.head.bias.zero_()
        f.head.bias[label] = 5.0
    return f


def balanced(L=16, n=10):
    X = np.random.default_rng(0).normal(size=(2 * n, L, 1))
    return Dataset("bal", X, np.repeat([0, 1], n), 2)


# --- CA / ASR -----------------------------------------------------------------


def test_constant_predictor_metrics():
    ds = balanced()
    f = constant_model(16, 1, 2, 0)
    assert clean_accuracy(f, ds) == 50.0
    assert attack_success_rate(f, lambda x: x, ds, 0) == 100.0
    assert attack_success_rate(f, lambda x: x, ds, 1) == 0.0


def test_asr_excludes_target_class():
    ds = balanced()
    seen = []
    f = constant_model(16, 1, 2, 1)

    def stamp(x):
        seen.append(len(x))
        return x

    attack_success_rate(f, stamp, ds, 0)
    assert seen == [10]


def test_asr_undefined_when_only_target():
    ds = balanced().subset(np.arange(10))
    with pytest.raises(ValueError):
        attack_success_rate(constant_model(16, 1, 2, 0), lambda x: x, ds, 0)


def test_ca_empty_test_set():
    with pytest.raises(ValueError):
        clean_accuracy(constant_model(16, 1, 2, 0), balanced().subset([]))


# --- RMS stealthiness -------------------------------------------------------------


def test_rms_zero_trigger(rng):
    x = rng.normal(size=(5, 40, 2))
    assert rms_stealth((x, x.copy())) == (0.0, 0.0)


def test_rms_constant_offset(rng):
    x = rng.normal(size=(1, 64, 1))
    amp = np.ptp(x)
    rms_all, rms_top = rms_stealth((x, x + 0.1 * amp))
    assert rms_all == pytest.approx(0.1, abs=1e-12)
    assert rms_top == pytest.approx(0.1, abs=1e-12)


def test_rms_matches_brute_force(rng):
    for _ in range(20):
        L, D = rng.integers(10, 200), rng.integers(1, 4)
        x = rng.normal(size=(L, D)) * rng.uniform(0.1, 5, size=D)
        xp = x + rng.normal(size=(L, D)) * 0.05
        ours = rms_stealth([(x, xp)])
        ref = brute_force_rms(x, xp)
        assert ours[0] == pytest.approx(ref[0], rel=1e-9)
        assert ours[1] == pytest.approx(ref[1], rel=1e-9)


def test_rms_zero_amplitude_variable_warns(rng):
    x = np.concatenate([rng.normal(size=(30, 1)), np.ones((30, 1))], axis=1)
    with pytest.warns(UserWarning):
        rms_stealth([(x, x + 0.01)])


def test_rms_zero_amplitude_sample_errors():
    x = np.ones((30, 2))
    with pytest.raises(ValueError):
        rms_stealth([(x, x + 0.01)])


# --- spectra ----------------------------------------------------------------------------


def test_fourier_constant_series():
    spec = fourier_magnitude(np.full(64, 2.0))
    assert spec.shape == (33, 1)
    assert spec[0, 0] == pytest.approx(128.0)
    np.testing.assert_allclose(spec[1:, 0], 0.0, atol=1e-10)


def test_fourier_single_tone():
    L = 128
    spec = fourier_magnitude(np.sin(2 * np.pi * np.arange(L) / (L / 8)))
    assert int(np.argmax(spec[:, 0])) == 8


@pytest.mark.parametrize("L", [63, 64])
def test_fourier_parseval(rng, L):
    x = rng.normal(size=(L, 3))
    s = fourier_magnitude(x) ** 2
    full = s[0] + 2 * s[1:].sum(axis=0)
    if L % 2 == 0:
        full -= s[-1]
    np.testing.assert_allclose(full / L, (x**2).sum(axis=0), rtol=1e-9)


def test_fourier_too_short():
    with pytest.raises(ValueError):
        fourier_magnitude(np.ones((1, 1)))


# --- Grad-CAM ------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def vanilla_model():
    ds = make_synthetic(SyntheticSpec(classes=2, per_class=40, length=48, seed=2))
    train, test = train_test_split(ds, 0.5, 0)
    cfg = AttackConfig(poison_rate=0.2, clean_epochs=4, backdoor_epochs=15, batch_size=16, patience=50)
    return run_attack("vanilla_fixed", train, cfg, "fcn", width=0.25), test


def test_gradcam_shape_range_determinism(vanilla_model):
    out, test = vanilla_model
    x = test.X[0]
    cam = grad_cam_1d(out.model, x)
    assert cam.shape == (48,)
    assert cam.min() >= 0 and cam.max() <= 1
    np.testing.assert_array_equal(cam, grad_cam_1d(out.model, x))


@pytest.mark.parametrize("arch", ["resnet", "tcn"])
def test_gradcam_other_conv_families(arch):
    f = build_classifier(arch, 40, 2, 3, seed=0, width=0.1)
    cam = grad_cam_1d(f, np.random.default_rng(0).normal(size=(40, 2)), 1)
    assert cam.shape == (40,) and 0 <= cam.min() and cam.max() <= 1


def test_gradcam_agrees_with_occlusion(vanilla_model):
    out, test = vanilla_model
    corrs = []
    for x in out.stamp(test.X[test.y != 0][:10]):
        cam = grad_cam_1d(out.model, x, 0)
        occ = occlusion_sensitivity(out.model, x, 0)
        if cam.std() > 0 and occ.std() > 0:
            corrs.append(np.corrcoef(cam, occ)[0, 1])
    assert corrs and np.mean(corrs) > 0


def test_gradcam_rejects_recurrent():
    f = build_classifier("lstm", 20, 1, 2, seed=0, width=0.1)
    with pytest.raises(UnsupportedArchitectureError):
        grad_cam_1d(f, np.zeros((20, 1)))


# --- reports and cross-validation ---------------------------------------------------------


def _report(rows):
    return EvaluationReport("d", "fcn", "tsba_a", 0, [dict(r) for r in rows])


def test_report_mean_row():
    rows = [
        {"fold": 0, "clean_ca": 90.0, "ca": 80.0, "asr": 100.0, "rms_all": 0.1, "rms_top1": 0.2},
        {"fold": 1, "clean_ca": 70.0, "ca": 60.0, "asr": 50.0, "rms_all": 0.3, "rms_top1": 0.4},
    ]
    table = list(csv.DictReader(io.StringIO(_report(rows).to_csv())))
    assert [r["fold"] for r in table] == ["0", "1", "mean"]
    assert float(table[-1]["ca"]) == 70.0 and float(table[-1]["asr"]) == 75.0
    assert float(table[-1]["rms_all"]) == pytest.approx(0.2)


def test_report_mean_permutation_invariant(rng):
    rows = [{"fold": i, "clean_ca": None, "ca": float(rng.uniform(0, 100)), "asr": float(rng.uniform(0, 100)),
             "rms_all": float(rng.uniform()), "rms_top1": float(rng.uniform())} for i in range(10)]
    a = _report(rows).summary()
    b = _report(list(reversed(rows))).summary()
    for key in ("ca", "asr", "rms_all", "rms_top1"):
        assert a[key] == pytest.approx(b[key], abs=1e-12)
    assert a["clean_ca"] is None


def test_fold_split_partitions(tiny):
    seen = []
    for fold in range(4):
        train, val, test = fold_split(tiny, 4, fold, seed=0, validation_fraction=0.2)
        assert not set(train.ids) & set(test.ids)
        assert not set(val.ids) & (set(train.ids) | set(test.ids))
        assert len(train) + len(val) + len(test) == len(tiny)
        seen.extend(test.ids)
    assert sorted(seen) == sorted(tiny.ids)


def test_crossval_two_folds(tiny):
    cfg = AttackConfig(poison_rate=0.2, clean_epochs=1, backdoor_epochs=2, batch_size=8)
    folds = []
    rep = crossval_run(tiny, "fcn", "vanilla_fixed", cfg, k=2, width=0.1,
                       on_fold=lambda i, out, clean, splits: folds.append((i, len(splits["test"]))))
    assert rep.k == 2 and [f[0] for f in folds] == [0, 1]
    assert sum(n for _, n in folds) == len(tiny)
    lines = rep.to_csv().strip().splitlines()
    assert len(lines) == 1 + 2 + 1 and lines[-1].split(",")[4] == "mean"
    for row in rep.folds:
        assert 0 <= row["ca"] <= 100 and 0 <= row["asr"] <= 100


def test_crossval_rejects_bad_config(tiny):
    with pytest.raises(ConfigurationError):
        crossval_run(tiny, "fcn", "tsba_a", AttackConfig(target_class=7), k=2)


def test_boosted_settings():
    cfg = AttackConfig()
    assert boosted_settings("vanilla_fixed", cfg)["boosted"] == {"frac": 0.10}
    assert boosted_settings("static_noise", cfg)["boosted"] == {"amp_frac": 0.20}
    assert boosted_settings("tsba_a", cfg)["boosted"] == {"clip_fraction": 0.2}
    with pytest.raises(ConfigurationError):
        boosted_settings("universal", cfg)


def test_boosted_static_noise_doubles_amplitude(rng):
    x = rng.normal(size=(3, 100, 1))
    base = make_stamp("static_noise", amp_frac=0.1)(x) - x
    boosted = make_stamp("static_noise", amp_frac=0.2)(x) - x
    np.testing.assert_allclose(boosted, 2 * base, atol=1e-12)
