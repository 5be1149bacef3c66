"""Metrics and experiment drivers: CA, ASR, RMS stealthiness, Grad-CAM,
spectra, boosted-trigger comparisons and k-fold evaluation runs."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from . import attacks
from .attacks import AttackConfig, BackdoorScorer
from .data import ConfigurationError, Dataset, amplitude, stratified_kfold, train_test_split
from .models import Network, build_classifier, build_trigger_generator, to_tensor
from .training import TrainConfig, fit, predict

logger = logging.getLogger(__name__)


class UnsupportedArchitectureError(ValueError):
    pass


def clean_accuracy(model: Network, test: Dataset) -> float:
    """Percentage of test samples classified correctly."""
    if len(test) == 0:
        raise ValueError("clean accuracy of an empty test set is undefined")
    pred, _ = predict(model, test.X)
    return 100.0 * float(np.mean(pred == test.y))


def attack_success_rate(model: Network, stamp: Callable, test: Dataset, target: int) -> float:
    """Percentage of stamped non-target test samples predicted as ``target``."""
    victims = test.y != target
    if not victims.any():
        raise ValueError("ASR undefined: every test sample already belongs to the target class")
    pred, _ = predict(model, stamp(test.X[victims]))
    return 100.0 * float(np.mean(pred == target))


def _sample_rms(x: np.ndarray, xp: np.ndarray) -> tuple[float, float]:
    amp = amplitude(x)
    keep = amp > 0
    if not keep.any():
        raise ValueError("RMS undefined: sample has zero amplitude in every variable")
    if not keep.all():
        warnings.warn(f"excluding {int((~keep).sum())} zero-amplitude variable(s) from RMS", stacklevel=3)
    p = (xp - x)[:, keep]
    scale = amp[keep].mean()
    flat = np.abs(p).ravel()
    k = max(1, math.ceil(0.01 * flat.size))
    top = np.partition(flat, flat.size - k)[flat.size - k :]
    return float(np.sqrt(np.mean(flat**2)) / scale), float(np.sqrt(np.mean(top**2)) / scale)


def rms_stealth(pairs) -> tuple[float, float]:
    """``(rms_all, rms_top1)``: trigger RMS relative to the sample amplitude
    (mean over variables), averaged over samples; ``rms_top1`` only uses the
    largest 1% of ``|x' - x|`` entries of each sample.

    ``pairs`` is an iterable of ``(x, x')`` or a tuple of two stacked arrays.
    """
    if isinstance(pairs, tuple) and len(pairs) == 2 and np.ndim(pairs[0]) == 3:
        pairs = zip(pairs[0], pairs[1])
    values = [_sample_rms(np.asarray(x, float).reshape(len(x), -1), np.asarray(xp, float).reshape(len(x), -1))
              for x, xp in pairs]
    if not values:
        raise ValueError("no pairs given")
    arr = np.array(values)
    return float(arr[:, 0].mean()), float(arr[:, 1].mean())


def grad_cam_1d(model: Network, x, target_class: int | None = None) -> np.ndarray:
    """Grad-CAM over time for one ``(L, D)`` sample, normalised to ``[0, 1]``."""
    if model.spec.kind == "classifier_lstm" or model.spec.is_generator:
        raise UnsupportedArchitectureError(f"Grad-CAM needs convolutional features, got {model.spec.kind}")
    model.eval()
    xt = to_tensor(x).to(next(model.parameters()).dtype)
    feats = model.features(xt)
    feats.retain_grad()
    logits = model.classify(feats)
    c = int(logits.argmax(1)) if target_class is None else int(target_class)
    model.zero_grad()
    logits[0, c].backward()
    weights = feats.grad[0].mean(dim=1)
    cam = torch.relu((weights[:, None] * feats[0]).sum(dim=0)).detach().double().numpy()
    L = np.asarray(x).shape[0]
    if len(cam) != L:
        cam = np.interp(np.linspace(0, len(cam) - 1, L), np.arange(len(cam)), cam)
    peak = cam.max()
    return cam / peak if peak > 0 else cam


def occlusion_sensitivity(model: Network, x, target_class: int, window: int = 8) -> np.ndarray:
    """Drop in class score when a zeroed window is centred at each timestep."""
    x = np.asarray(x, dtype=np.float64)
    L = x.shape[0]
    variants = []
    for t in range(L):
        occluded = x.copy()
        lo, hi = max(0, t - window // 2), min(L, t + window - window // 2)
        occluded[lo:hi] = 0.0
        variants.append(occluded)
    model.eval()
    with torch.no_grad():
        base = model(to_tensor(x))[0, target_class].item()
        scores = model(to_tensor(np.stack(variants)))[:, target_class].double().numpy()
    return base - scores


def fourier_magnitude(x) -> np.ndarray:
    """Magnitude spectrum per variable, shape ``(L // 2 + 1, D)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 2:
        raise ValueError("spectrum needs at least 2 timesteps")
    return np.abs(np.fft.rfft(x, axis=0))


# --- attack runs --------------------------------------------------------------


@dataclass
class AttackOutcome:
    """Result of one attack run on one split."""

    attack: str
    model: Network
    stamp: Callable
    generator: Network | None = None
    poisoned: attacks.PoisonedDataset | None = None
    history: list = field(default_factory=list)


def run_attack(
    attack: str,
    train: Dataset,
    cfg: AttackConfig,
    arch: str = "fcn",
    validation: Dataset | None = None,
    generator: Network | None = None,
    frac: float = 0.05,
    amp_frac: float = 0.10,
    template=None,
    audit=None,
    width: float = 1.0,
) -> AttackOutcome:
    """Produce a backdoored classifier under the requested attack.

    ``tsba_a`` co-trains classifier and generator. ``tsba_b`` uses ``generator``
    (training one with ``tsba_a`` on ``train`` if absent) to poison the data, then a
    fresh classifier is trained on it; ``universal`` requires ``generator``.
    Fixed-pattern attacks poison the data and train a fresh classifier.
    """
    L, D = train.shape
    C = train.num_classes
    f = build_classifier(arch, L, D, C, seed=cfg.seed, width=width)
    if attack == "tsba_a":
        g = generator or build_trigger_generator(L, D, seed=cfg.seed + 1)
        f, g, hist = attacks.train_tsba(f, g, train, cfg, validation=validation, audit=audit)
        pd = attacks.poison_dataset(train, g, cfg)
        return AttackOutcome(attack, f, attacks.generator_stamp(g, cfg.clip_fraction), g, pd, hist)
    if attack in ("tsba_b", "universal"):
        if generator is None:
            if attack == "universal":
                raise ConfigurationError("the universal attack needs a trained universal generator")
            adversary = build_classifier(arch, L, D, C, seed=cfg.seed + 2, width=width)
            g = build_trigger_generator(L, D, seed=cfg.seed + 1)
            _, generator, _ = attacks.train_tsba(adversary, g, train, cfg, validation=validation, audit=audit)
        pd = attacks.poison_dataset(train, generator, cfg)
        if audit is not None:
            audit(np.stack([train.X[train.ids.index(r.sample_id)] for r in pd.records]),
                  np.stack([r.poisoned_values for r in pd.records]))
        stamp = attacks.generator_stamp(generator, cfg.clip_fraction)
        f, hist = attacks.train_poisoned_classifier(f, pd.training_set("replace"), cfg, stamp, validation)
        return AttackOutcome(attack, f, stamp, generator, pd, hist)
    if attack in ("vanilla_fixed", "vanilla_random", "static_noise"):
        stamp = attacks.make_stamp(attack, frac=frac, amp_frac=amp_frac, seed=cfg.seed, template=template)
        pd = attacks.poison_with_stamp(train, stamp, cfg, attack)
        f, hist = attacks.train_poisoned_classifier(
            f, pd.training_set("replace"), cfg, stamp, validation, warm_start_set=train
        )
        return AttackOutcome(attack, f, stamp, None, pd, hist)
    raise ConfigurationError(f"unknown attack {attack!r}; expected one of {attacks.ATTACKS}")


def train_clean(train: Dataset, cfg: AttackConfig, arch: str = "fcn", validation: Dataset | None = None,
                width: float = 1.0) -> Network:
    """Reference classifier without any poisoning, early-stopped on validation CA."""
    L, D = train.shape
    f = build_classifier(arch, L, D, train.num_classes, seed=cfg.seed, width=width)
    tc = TrainConfig(cfg.classifier_lr, cfg.batch_size, cfg.clean_epochs + cfg.backdoor_epochs, cfg.seed, cfg.patience)
    score = None if validation is None else (lambda m: clean_accuracy(m, validation))
    f, _ = fit(f, train.X, train.y, tc, score_fn=score)
    return f


# --- reports ---------------------------------------------------------------------

FOLD_FIELDS = ("fold", "clean_ca", "ca", "asr", "rms_all", "rms_top1")


@dataclass
class EvaluationReport:
    dataset: str
    classifier: str
    attack: str
    seed: int
    folds: list = field(default_factory=list)

    def _mean(self, key) -> float | None:
        vals = [f[key] for f in self.folds if f.get(key) is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def k(self) -> int:
        return len(self.folds)

    @property
    def ca(self):
        return self._mean("ca")

    @property
    def asr(self):
        return self._mean("asr")

    @property
    def clean_ca(self):
        return self._mean("clean_ca")

    @property
    def rms_all(self):
        return self._mean("rms_all")

    @property
    def rms_top1(self):
        return self._mean("rms_top1")

    def summary(self) -> dict:
        return {
            "dataset": self.dataset,
            "classifier": self.classifier,
            "attack": self.attack,
            "seed": self.seed,
            "folds": self.k,
            **{key: self._mean(key) for key in FOLD_FIELDS[1:]},
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("dataset", "classifier", "attack", "seed") + FOLD_FIELDS)
        head = (self.dataset, self.classifier, self.attack, self.seed)
        for row in self.folds:
            w.writerow(head + tuple(_fmt(row.get(k)) for k in FOLD_FIELDS))
        summary = self.summary()
        w.writerow(head + ("mean",) + tuple(_fmt(summary[k]) for k in FOLD_FIELDS[1:]))
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())

    def write_summary(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{float(value):.6f}"


def evaluate_fold(outcome: AttackOutcome, test: Dataset, target: int, clean_ca: float | None = None,
                  fold: int = 0) -> dict:
    victims = test.X[test.y != target]
    stamped = outcome.stamp(victims)
    rms = rms_stealth((victims, stamped))
    return {
        "fold": fold,
        "clean_ca": clean_ca,
        "ca": clean_accuracy(outcome.model, test),
        "asr": attack_success_rate(outcome.model, outcome.stamp, test, target),
        "rms_all": rms[0],
        "rms_top1": rms[1],
    }


def fold_split(dataset: Dataset, k: int, fold: int, seed: int, validation_fraction: float = 0.1):
    """``(train, validation, test)`` for one fold of the seeded stratified split.
    ``validation`` is a stratified slice of the training folds, or None."""
    split = stratified_kfold(dataset, k, seed)
    tr_idx, te_idx = split.fold_indices(dataset, fold)
    train, test = dataset.subset(tr_idx), dataset.subset(te_idx)
    validation = None
    if validation_fraction > 0:
        train, validation = train_test_split(train, validation_fraction, seed + fold)
    return train, validation, test


def crossval_run(
    dataset: Dataset,
    arch: str,
    attack: str,
    cfg: AttackConfig,
    k: int = 10,
    validation_fraction: float = 0.1,
    generator: Network | None = None,
    with_clean: bool = True,
    on_fold: Callable[[int, AttackOutcome, Network | None, dict], None] | None = None,
    width: float = 1.0,
    folds: Sequence[int] | None = None,
) -> EvaluationReport:
    """k-fold evaluation of one attack: per fold, train on k-1 folds (minus a
    stratified validation slice used for early stopping) and test on the held-out
    fold. Fold rows and their means go into the report.

    ``on_fold(fold, outcome, clean_model, splits)`` is called after each fold.
    ``folds`` restricts the run to some of the k folds.
    """
    cfg.validate_for(dataset)
    report = EvaluationReport(dataset.name, arch, attack, cfg.seed)
    for fold in range(k) if folds is None else folds:
        train, validation, test = fold_split(dataset, k, fold, cfg.seed, validation_fraction)
        clean_model = train_clean(train, cfg, arch, validation, width) if with_clean else None
        clean_ca = clean_accuracy(clean_model, test) if clean_model is not None else None
        outcome = run_attack(attack, train, cfg, arch, validation, generator=generator, width=width)
        report.folds.append(evaluate_fold(outcome, test, cfg.target_class, clean_ca, fold))
        if on_fold is not None:
            on_fold(fold, outcome, clean_model, {"train": train, "validation": validation, "test": test})
        logger.info("fold %d: %s", fold, report.folds[-1])
    return report


# --- boosted triggers ------------------------------------------------------------


def boosted_settings(attack: str, cfg: AttackConfig, frac: float = 0.05, amp_frac: float = 0.10) -> dict:
    """Base and boosted trigger strengths: vanilla patterns double their width,
    static noise doubles its amplitude, generator attacks double the clip budget."""
    if attack in ("vanilla_fixed", "vanilla_random"):
        return {"base": {"frac": frac}, "boosted": {"frac": 2 * frac}}
    if attack == "static_noise":
        return {"base": {"amp_frac": amp_frac}, "boosted": {"amp_frac": 2 * amp_frac}}
    if attack in ("tsba_a", "tsba_b"):
        return {"base": {"clip_fraction": cfg.clip_fraction}, "boosted": {"clip_fraction": 2 * cfg.clip_fraction}}
    raise ConfigurationError(f"no boosted variant defined for {attack!r}")


def boosted_trigger_protocol(
    attack: str,
    train: Dataset,
    x,
    cfg: AttackConfig,
    arch: str = "fcn",
    validation: Dataset | None = None,
    outcomes: dict | None = None,
) -> dict:
    """Train (or reuse) the base and boosted backdoored models for ``attack`` and
    compare them on sample ``x``: predictions and Grad-CAM maps of the clean and
    stamped sample under each model."""
    settings = boosted_settings(attack, cfg)
    outcomes = dict(outcomes or {})
    bundle = {"attack": attack, "settings": settings}
    for variant in ("base", "boosted"):
        params = settings[variant]
        vcfg = AttackConfig(**{**asdict(cfg), **{k: v for k, v in params.items() if k == "clip_fraction"}})
        audit_violations = []

        def audit(clean, poisoned, _c=vcfg.clip_fraction):
            audit_violations.append(attacks.budget_violations(clean, poisoned, _c))

        if variant not in outcomes:
            extra = {k: v for k, v in params.items() if k in ("frac", "amp_frac")}
            outcomes[variant] = run_attack(attack, train, vcfg, arch, validation, audit=audit, **extra)
        out = outcomes[variant]
        xp = out.stamp(np.asarray(x)[None])[0]
        pred_clean, _ = predict(out.model, x)
        pred_poison, _ = predict(out.model, xp)
        entry = {
            "params": params,
            "poisoned": xp,
            "pred_clean": int(pred_clean),
            "pred_poisoned": int(pred_poison),
            "model": out.model,
        }
        if arch != "lstm":
            entry["cam_clean"] = grad_cam_1d(out.model, x, int(pred_clean))
            entry["cam_poisoned"] = grad_cam_1d(out.model, xp, int(pred_poison))
        if attack.startswith("tsba"):
            entry["budget_violations"] = int(sum(audit_violations)) + attacks.budget_violations(
                x, xp, vcfg.clip_fraction
            )
        bundle[variant] = entry
    return bundle
