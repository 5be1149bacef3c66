"""Backdoor defenses: Neural Cleanse, Fine-Pruning and Adversarial Neuron Pruning.

Each defense works on a deep copy of the given model and returns a
:class:`DefenseReport` holding the defended model, the defense artifacts and,
when an evaluator is supplied, the CA/ASR deltas in percentage points.
"""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .data import ConfigurationError, Dataset
from .models import Network, to_tensor
from .training import TrainConfig, fit, iterate_batches

logger = logging.getLogger(__name__)

Evaluator = Callable[[Network], tuple]


@dataclass
class DefenseReport:
    defense: str
    delta_ca: float | None = None
    delta_asr: float | None = None
    before: tuple | None = None
    after: tuple | None = None
    artifacts: dict = field(default_factory=dict)
    failed: bool = False
    model: Network | None = field(default=None, repr=False)

    def summary(self) -> dict:
        out = {
            "defense": self.defense,
            "delta_ca": self.delta_ca,
            "delta_asr": self.delta_asr,
            "failed": self.failed,
        }
        if self.before is not None:
            out["before"] = {"ca": self.before[0], "asr": self.before[1]}
            out["after"] = {"ca": self.after[0], "asr": self.after[1]}
        for key, value in self.artifacts.items():
            if isinstance(value, np.ndarray):
                continue
            out[key] = value
        return out

    def write(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(_jsonable(self.summary()), fh, indent=2, sort_keys=True)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _finish(report: DefenseReport, original: Network, defended: Network, evaluator: Evaluator | None) -> DefenseReport:
    report.model = defended
    defended.eval()
    if evaluator is not None:
        report.before = tuple(float(v) for v in evaluator(original))
        report.after = tuple(float(v) for v in evaluator(defended))
        report.delta_ca = report.after[0] - report.before[0]
        report.delta_asr = report.after[1] - report.before[1]
    return report


def _finetune(model: Network, X, y, lr: float, epochs: int, seed: int, optimizer: str = "sgd") -> None:
    """Clean fine-tuning used by NC unlearning and FP: plain SGD with momentum
    by default, or Adam."""
    if optimizer == "sgd":
        opt = torch.optim.SGD(model.parameters(), lr=lr, momentum=0.9)
    elif optimizer == "adam":
        opt = torch.optim.Adam(model.parameters(), lr=lr)
    else:
        raise ConfigurationError(f"unknown fine-tuning optimizer {optimizer!r}")
    fit(model, X, y, TrainConfig(learning_rate=lr, epochs=epochs, seed=seed, batch_size=16), optimizer=opt)


def _frozen_copy(model: Network) -> Network:
    clone = copy.deepcopy(model)
    clone.eval()
    for p in clone.parameters():
        p.requires_grad_(False)
    return clone


# --- Neural Cleanse -------------------------------------------------------------


def anomaly_indices(norms) -> np.ndarray:
    """MAD-normalised deviation of each class's mask norm from the median."""
    norms = np.asarray(norms, dtype=np.float64)
    med = np.median(norms)
    mad = 1.4826 * np.median(np.abs(norms - med))
    if mad == 0:
        return np.zeros_like(norms)
    return np.abs(norms - med) / mad


def reverse_engineer_trigger(
    model: Network,
    X: np.ndarray,
    target: int,
    lam: float = 1e-2,
    steps: int = 300,
    lr: float = 0.1,
    batch_size: int = 32,
    seed: int = 0,
    on_step: Callable[[torch.Tensor], None] | None = None,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Smallest mask/pattern pair sending clean inputs to ``target``.

    Minimises ``CE(f((1 - m) * x + m * p), target) + lam * |m|_1`` with the mask
    projected onto ``[0, 1]`` after every step. Returns ``(mask, pattern, final_loss)``.
    """
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    L, D = X.shape[1:]
    lo, hi = float(X.min()), float(X.max())
    mask = torch.full((L, D), 0.5, requires_grad=True)
    pattern = torch.empty(L, D).uniform_(lo, hi).requires_grad_(True)
    opt = torch.optim.Adam([mask, pattern], lr=lr, betas=(0.5, 0.9))
    Xt = to_tensor(X)
    loss = torch.tensor(float("nan"))
    for step in range(steps):
        idx = torch.from_numpy(rng.choice(len(X), size=min(batch_size, len(X)), replace=False))
        xb = Xt[idx]
        stamped = (1 - mask) * xb + mask * pattern
        ce = F.cross_entropy(model(stamped), torch.full((len(idx),), target, dtype=torch.long))
        loss = ce + lam * mask.abs().sum()
        opt.zero_grad()
        loss.backward()
        opt.step()
        with torch.no_grad():
            mask.clamp_(0.0, 1.0)
            pattern.clamp_(lo, hi)
        if on_step is not None:
            on_step(mask.detach())
        if not torch.isfinite(loss):
            break
    return mask.detach().double().numpy(), pattern.detach().double().numpy(), float(loss.item())


def neural_cleanse(
    model: Network,
    clean: Dataset,
    lam: float = 1e-2,
    unlearn: bool = True,
    evaluator: Evaluator | None = None,
    steps: int = 300,
    threshold: float = 2.0,
    unlearn_epochs: int = 1,
    unlearn_fraction: float = 0.2,
    lr: float = 0.01,
    optimizer: str = "sgd",
    seed: int = 0,
    on_step: Callable[[torch.Tensor], None] | None = None,
) -> DefenseReport:
    """Reverse-engineer a trigger per class, flag outliers, optionally unlearn.

    A class is flagged when its mask norm is below the median and its anomaly
    index exceeds ``threshold``. Unlearning fine-tunes on the clean set with
    ``unlearn_fraction`` of the samples stamped by the reversed trigger of the
    flagged classes (or, if none is flagged, the smallest-norm class), keeping
    their true labels.
    """
    frozen = _frozen_copy(model)
    masks, patterns, norms = [], [], []
    for c in range(model.spec.output_dim):
        m, p, loss = reverse_engineer_trigger(frozen, clean.X, c, lam=lam, steps=steps, seed=seed + c, on_step=on_step)
        if not math.isfinite(loss):
            report = DefenseReport("NC", failed=True, artifacts={"failed_class": c})
            report.model = copy.deepcopy(model)
            return report
        masks.append(m)
        patterns.append(p)
        norms.append(float(np.abs(m).sum()))
    index = anomaly_indices(norms)
    med = np.median(norms)
    flagged = [c for c in range(len(norms)) if norms[c] < med and index[c] > threshold]
    suspects = flagged or [int(np.argmin(norms))]
    artifacts = {
        "mask_norms": norms,
        "anomaly_index": index.tolist(),
        "flagged": flagged,
        "unlearned_classes": suspects if unlearn else [],
        "masks": np.stack(masks),
        "patterns": np.stack(patterns),
    }
    defended = copy.deepcopy(model)
    if unlearn:
        rng = np.random.default_rng(seed)
        X = clean.X.copy()
        chosen = rng.choice(len(X), size=max(1, int(round(unlearn_fraction * len(X)))), replace=False)
        for j, i in enumerate(chosen):
            c = suspects[j % len(suspects)]
            X[i] = (1 - masks[c]) * X[i] + masks[c] * patterns[c]
        if unlearn_epochs > 0:
            _finetune(defended, X, clean.y, lr, unlearn_epochs, seed, optimizer)
    return _finish(DefenseReport("NC", artifacts=artifacts), model, defended, evaluator)


def export_reversed_triggers(report: DefenseReport, directory) -> list[str]:
    """Write each class's reversed mask and pattern as CSV matrices."""
    import os

    os.makedirs(directory, exist_ok=True)
    paths = []
    for c, (m, p) in enumerate(zip(report.artifacts["masks"], report.artifacts["patterns"])):
        for kind, arr in (("mask", m), ("pattern", p)):
            path = os.path.join(directory, f"class{c}_{kind}.csv")
            np.savetxt(path, arr, delimiter=",")
            paths.append(path)
    return paths


# --- Fine-Pruning -----------------------------------------------------------------


@torch.no_grad()
def mean_activation(model: Network, X: np.ndarray, batch_size: int = 128) -> np.ndarray:
    """Mean post-activation magnitude of each channel in the last temporal layer."""
    model.eval()
    total = None
    for i in range(0, len(X), batch_size):
        h = model.features(to_tensor(X[i : i + batch_size])).abs().sum(dim=(0, 2))
        total = h if total is None else total + h
    return (total / (len(X) * X.shape[1])).double().numpy()


def fine_prune(
    model: Network,
    clean: Dataset,
    prune_rate: float = 0.30,
    finetune_epochs: int = 10,
    evaluator: Evaluator | None = None,
    lr: float = 0.01,
    optimizer: str = "sgd",
    seed: int = 0,
) -> DefenseReport:
    """Zero the ``floor(prune_rate * channels)`` least active channels of the last
    layer (conv channels, or LSTM hidden units), then fine-tune on clean data."""
    if not 0 <= prune_rate < 1:
        raise ConfigurationError("prune_rate must lie in [0, 1)")
    defended = copy.deepcopy(model)
    activity = mean_activation(defended, clean.X)
    n_prune = int(math.floor(prune_rate * len(activity)))
    # stable sort keeps the choice deterministic under ties
    pruned = np.argsort(activity, kind="stable")[:n_prune]
    gate = defended.last_gate
    gate.mask[torch.from_numpy(pruned)] = 0.0
    if finetune_epochs > 0:
        _finetune(defended, clean.X, clean.y, lr, finetune_epochs, seed, optimizer)
    artifacts = {"pruned_channels": sorted(int(i) for i in pruned), "num_channels": len(activity)}
    return _finish(DefenseReport("FP", artifacts=artifacts), model, defended, evaluator)


# --- Adversarial Neuron Pruning ------------------------------------------------------


def anp(
    model: Network,
    clean: Dataset,
    eps: float = 0.4,
    alpha: float = 0.2,
    lr: float = 0.2,
    prune_threshold: float = 0.2,
    iterations: int = 300,
    batch_size: int = 64,
    anp_steps: int = 1,
    evaluator: Evaluator | None = None,
    seed: int = 0,
) -> DefenseReport:
    """Learn per-neuron masks robust to multiplicative neuron perturbations, then
    prune neurons whose mask ends below ``prune_threshold``.

    Neurons are the channels behind every :class:`ChannelGate`. Each iteration
    first moves the perturbations (inside ``[-eps, eps]``) by signed gradient
    ascent on the loss, then takes a plain gradient step of size ``lr`` on the
    masks for ``alpha * natural_loss + (1 - alpha) * perturbed_loss`` and clips
    them to ``[0, 1]``.
    """
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    work = _frozen_copy(model)
    gates = work.gates
    masks = [torch.ones_like(gt.mask, requires_grad=True) for gt in gates]
    noise = [torch.zeros_like(gt.mask, requires_grad=True) for gt in gates]
    mask_opt = torch.optim.SGD(masks, lr=lr, momentum=0.9)
    noise_opt = torch.optim.SGD(noise, lr=eps / max(anp_steps, 1))
    Xt, yt = to_tensor(clean.X), torch.as_tensor(clean.y, dtype=torch.long)
    failed = False

    def set_state(with_noise: bool):
        for gt, m, z in zip(gates, masks, noise):
            gt.soft_mask = m
            gt.perturbation = z if with_noise else None

    for it in range(iterations):
        idx = torch.from_numpy(rng.choice(len(Xt), size=min(batch_size, len(Xt)), replace=False))
        xb, yb = Xt[idx], yt[idx]
        if eps > 0:
            with torch.no_grad():
                for z in noise:
                    z.uniform_(-eps, eps)
            for _ in range(anp_steps):
                set_state(True)
                noise_opt.zero_grad()
                (-F.cross_entropy(work(xb), yb)).backward()
                with torch.no_grad():
                    for z in noise:
                        z.grad = torch.sign(z.grad)
                noise_opt.step()
                with torch.no_grad():
                    for z in noise:
                        z.clamp_(-eps, eps)
        mask_opt.zero_grad()
        if eps > 0:
            set_state(True)
            robust = (1 - alpha) * F.cross_entropy(work(xb), yb)
        else:
            robust = 0.0
        set_state(False)
        natural = F.cross_entropy(work(xb), yb)
        loss = alpha * natural + robust if eps > 0 else natural
        if not torch.isfinite(loss):
            failed = True
            break
        loss.backward()
        mask_opt.step()
        with torch.no_grad():
            for m in masks:
                m.clamp_(0.0, 1.0)

    for gt in gates:
        gt.soft_mask = None
        gt.perturbation = None
    learned = [m.detach().clone() for m in masks]
    defended = copy.deepcopy(model)
    pruned = []
    if not failed:
        for layer, (gt, m) in enumerate(zip(defended.gates, learned)):
            drop = m < prune_threshold
            gt.mask[drop] = 0.0
            pruned.extend((layer, int(i)) for i in torch.nonzero(drop).flatten())
    artifacts = {
        "neuron_masks": [m.numpy().tolist() for m in learned],
        "pruned_neurons": pruned,
        "num_neurons": int(sum(len(m) for m in learned)),
    }
    report = DefenseReport("ANP", artifacts=artifacts, failed=failed)
    return _finish(report, model, defended, evaluator)
