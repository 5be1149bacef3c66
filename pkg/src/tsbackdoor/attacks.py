"""Backdoor attacks on time-series classifiers.

Three fixed-pattern baselines (vanilla fixed / vanilla random / static noise),
the generator-based attack with its classifier co-training loop, dataset
poisoning with a trained generator, and the cross-dataset universal generator.

All stamping functions accept one ``(L, D)`` sample or an ``(N, L, D)`` batch
and return float64 arrays of the same shape.
"""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import ConfigurationError, Dataset, amplitude, batch_amplitude, merge_datasets
from .models import Network, build_classifier, to_tensor
from .training import (
    NumericalDivergenceError,
    TrainConfig,
    fit,
    iterate_batches,
    make_optimizer,
    predict,
    train_epoch_ce,
)

logger = logging.getLogger(__name__)

ATTACKS = ("vanilla_fixed", "vanilla_random", "static_noise", "tsba_a", "tsba_b", "universal")


@dataclass
class AttackConfig:
    poison_rate: float = 0.10
    clip_fraction: float = 0.10
    target_class: int = 0
    clean_epochs: int = 20
    backdoor_epochs: int = 500
    patience: int = 50
    batch_size: int = 16
    classifier_lr: float = 1e-3
    generator_lr: float = 3e-4
    generator_optimizer: str = "sgd"
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.poison_rate <= 1:
            raise ConfigurationError("poison_rate must lie in (0, 1]")
        if not 0 <= self.clip_fraction <= 1:
            raise ConfigurationError("clip_fraction must lie in [0, 1]")
        if self.target_class < 0:
            raise ConfigurationError("target_class must be a class index")

    def validate_for(self, dataset: Dataset) -> int:
        """Check the config against a dataset; returns the poison count."""
        if self.target_class >= dataset.num_classes:
            raise ConfigurationError(
                f"target class {self.target_class} outside [0, {dataset.num_classes})"
            )
        n = poison_count(len(dataset), self.poison_rate)
        if n < 1:
            raise ConfigurationError(
                f"poison rate {self.poison_rate} selects no samples out of {len(dataset)}"
            )
        return n


def poison_count(n: int, rate: float) -> int:
    # round half up, so 0.1 * 25 -> 3 rather than banker's 2
    return int(math.floor(rate * n + 0.5))


@dataclass
class TriggerPattern:
    delta: np.ndarray
    source: str


@dataclass
class PoisonRecord:
    sample_id: str
    original_label: int
    poisoned_values: np.ndarray
    assigned_label: int


@dataclass
class PoisonedDataset:
    base: Dataset
    records: list
    clean_ids: list
    config: dict = field(default_factory=dict)

    def training_set(self, mode: str = "replace") -> Dataset:
        """Materialise D'. ``replace`` swaps poisoned samples in place (data
        poisoning); ``append`` keeps the clean originals and adds the poisoned
        copies (the co-training union)."""
        index = {sid: i for i, sid in enumerate(self.base.ids)}
        if mode == "replace":
            X, y = self.base.X.copy(), self.base.y.copy()
            for r in self.records:
                X[index[r.sample_id]] = r.poisoned_values
                y[index[r.sample_id]] = r.assigned_label
            return self.base.with_values(X, y, name=f"{self.base.name}-poisoned")
        if mode == "append":
            X = np.concatenate([self.base.X, np.stack([r.poisoned_values for r in self.records])])
            y = np.concatenate([self.base.y, [r.assigned_label for r in self.records]])
            ids = list(self.base.ids) + [f"{r.sample_id}#poison" for r in self.records]
            lengths = None
            if self.base.lengths is not None:
                lengths = np.concatenate(
                    [self.base.lengths, [self.base.lengths[index[r.sample_id]] for r in self.records]]
                )
            return Dataset(f"{self.base.name}-poisoned", X, y, self.base.num_classes, ids=ids, lengths=lengths)
        raise ValueError(f"unknown mode {mode!r}")

    def manifest(self) -> dict:
        index = {sid: i for i, sid in enumerate(self.base.ids)}
        entries = []
        for r in self.records:
            diff = np.abs(r.poisoned_values - self.base.X[index[r.sample_id]]).max(axis=0)
            entries.append(
                {
                    "sample_id": r.sample_id,
                    "original_label": int(r.original_label),
                    "assigned_label": int(r.assigned_label),
                    "max_perturbation": [float(v) for v in diff],
                }
            )
        return {**self.config, "num_poisoned": len(entries), "records": entries}

    def write_manifest(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.manifest(), fh, indent=2, sort_keys=True)


# --- stamping operators -------------------------------------------------------


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    return (x[None] if single else x), single


def clip_to_budget(candidate, anchor, clip_fraction: float, lengths=None) -> np.ndarray:
    """Clamp ``candidate`` elementwise into ``anchor +/- clip_fraction * amplitude(anchor)``.

    The budget is per variable: ``xi_d = clip_fraction * (max_d - min_d)``.
    """
    cand, single = _as_batch(candidate)
    anc, _ = _as_batch(anchor)
    if cand.shape != anc.shape:
        raise ValueError(f"shape mismatch: {cand.shape} vs {anc.shape}")
    xi = clip_fraction * batch_amplitude(anc, lengths)[:, None, :]
    out = np.clip(cand, anc - xi, anc + xi)
    return out[0] if single else out


def budget_violations(x, x_poisoned, clip_fraction: float, tol: float = 1e-9, lengths=None) -> int:
    """Number of (sample, variable) pairs whose max deviation exceeds the budget."""
    xb, _ = _as_batch(x)
    pb, _ = _as_batch(x_poisoned)
    limit = clip_fraction * batch_amplitude(xb, lengths) + tol
    return int(np.sum(np.abs(pb - xb).max(axis=1) > limit))


def generator_pattern(g: Network, x, batch_size: int = 256) -> np.ndarray:
    """Raw generator output ``g(x)`` as float64.

    A univariate generator applied to multivariate input runs on each variable
    separately.
    """
    xb, single = _as_batch(x)
    n, L, D = xb.shape
    g_dim = g.spec.input_shape[1]
    per_variable = g_dim == 1 and D > 1
    if per_variable:
        xb = xb.transpose(0, 2, 1).reshape(n * D, L, 1)
    elif g_dim != D or (g.spec.input_shape[0] is not None and g.spec.input_shape[0] != L):
        raise ValueError(f"generator expects {g.spec.input_shape}, got {(L, D)}")
    g.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(xb), batch_size):
            out.append(g(to_tensor(xb[i : i + batch_size])).double().numpy())
    p = np.concatenate(out)
    if per_variable:
        p = p.reshape(n, D, L).transpose(0, 2, 1)
    return p[0] if single else p


def apply_generator(g: Network, x, clip_fraction: float, lengths=None) -> np.ndarray:
    """Poisoned values ``clip(x + g(x))`` within the per-variable budget."""
    xb, single = _as_batch(x)
    p = generator_pattern(g, xb)
    if lengths is not None:
        for i, n in enumerate(lengths):
            p[i, int(n):] = 0.0
    out = clip_to_budget(xb + p, xb, clip_fraction, lengths)
    return out[0] if single else out


def generator_stamp_torch(g: Network, xb: torch.Tensor, xi: torch.Tensor) -> torch.Tensor:
    """Differentiable ``clip_xi(x + g(x))`` for generator updates; ``xi`` is ``(B, 1, D)``."""
    return torch.clamp(xb + g(xb), xb - xi, xb + xi)


def _alternating(x_max, x_min, k):
    pattern = np.empty((len(x_max), k, x_max.shape[-1]))
    pattern[:, 0::2] = x_max[:, None, :]
    pattern[:, 1::2] = x_min[:, None, :]
    return pattern


def vanilla_fixed(x, frac: float = 0.05) -> np.ndarray:
    """Overwrite the first ``ceil(frac * L)`` steps with alternating per-variable max/min."""
    xb, single = _as_batch(x)
    L = xb.shape[1]
    k = math.ceil(frac * L - 1e-9)
    if k < 1:
        raise ConfigurationError(f"frac={frac} modifies no timesteps for L={L}")
    out = xb.copy()
    out[:, :k] = _alternating(xb.max(axis=1), xb.min(axis=1), k)
    return out[0] if single else out


def _local_extrema(series: np.ndarray, peaks: bool) -> np.ndarray:
    s = np.convolve(np.pad(series, 1, mode="edge"), np.ones(3) / 3.0, mode="valid")
    if not peaks:
        s = -s
    left = np.concatenate([[-np.inf], s[:-1]])
    right = np.concatenate([s[1:], [-np.inf]])
    idx = np.flatnonzero((s >= left) & (s >= right) & ((s > left) | (s > right)))
    return idx if len(idx) else np.array([int(np.argmax(s))])


def vanilla_random(x, frac: float = 0.05, seed: int | np.random.Generator = 0, branch: str | None = None) -> np.ndarray:
    """Cover a randomly chosen local peak (or trough) with the alternating max/min block.

    The window of ``ceil(frac * L)`` steps is centred on the extremum and shifted to
    stay inside the series. Extrema are found on the 3-point-smoothed mean over
    variables; ``branch`` forces ``"peak"`` or ``"trough"`` instead of a coin flip.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    xb, single = _as_batch(x)
    L = xb.shape[1]
    k = math.ceil(frac * L - 1e-9)
    if k < 1:
        raise ConfigurationError(f"frac={frac} modifies no timesteps for L={L}")
    out = xb.copy()
    blocks = _alternating(xb.max(axis=1), xb.min(axis=1), k)
    for i, sample in enumerate(xb):
        peaks = (rng.random() < 0.5) if branch is None else branch == "peak"
        candidates = _local_extrema(sample.mean(axis=1), peaks)
        centre = int(rng.choice(candidates))
        start = min(max(centre - k // 2, 0), L - k)
        out[i, start : start + k] = blocks[i]
    return out[0] if single else out


def sine_template(period: int = 20) -> np.ndarray:
    return np.sin(2 * np.pi * np.arange(period) / period)


def static_noise(x, template: np.ndarray | None = None, amp_frac: float = 0.10) -> np.ndarray:
    """Add a tiled periodic template, scaled to ``amp_frac`` of each variable's
    amplitude peak-to-peak, to every variable."""
    template = sine_template() if template is None else np.asarray(template, dtype=np.float64)
    if len(template) < 2:
        raise ConfigurationError("noise template needs at least 2 samples")
    xb, single = _as_batch(x)
    L = xb.shape[1]
    tiled = np.resize(template, L)
    span = template.max() - template.min()
    unit = (tiled - template.min()) / span - 0.5 if span > 0 else np.zeros(L)
    out = xb + unit[None, :, None] * (amp_frac * amplitude(xb))[:, None, :]
    return out[0] if single else out


def make_stamp(name: str, frac: float = 0.05, amp_frac: float = 0.10, seed: int = 0,
               template=None) -> Callable[[np.ndarray], np.ndarray]:
    """A batch stamping function for one of the baseline attacks."""
    if name == "vanilla_fixed":
        return lambda X: vanilla_fixed(X, frac)
    if name == "vanilla_random":
        return lambda X: vanilla_random(X, frac, seed=np.random.default_rng(seed))
    if name == "static_noise":
        return lambda X: static_noise(X, template, amp_frac)
    raise ConfigurationError(f"{name!r} is not a fixed-pattern attack")


def generator_stamp(g: Network, clip_fraction: float) -> Callable[[np.ndarray], np.ndarray]:
    return lambda X: apply_generator(g, X, clip_fraction)


# --- poisoning ------------------------------------------------------------------


def select_poison_indices(n: int, rate: float, seed: int) -> np.ndarray:
    count = poison_count(n, rate)
    if count < 1:
        raise ConfigurationError(f"poison rate {rate} selects no samples out of {n}")
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=count, replace=False))


def poison_with_stamp(dataset: Dataset, stamp: Callable, cfg: AttackConfig, source: str) -> PoisonedDataset:
    cfg.validate_for(dataset)
    chosen = select_poison_indices(len(dataset), cfg.poison_rate, cfg.seed)
    poisoned = stamp(dataset.X[chosen])
    records = [
        PoisonRecord(dataset.ids[i], int(dataset.y[i]), poisoned[j], cfg.target_class)
        for j, i in enumerate(chosen)
    ]
    chosen_ids = {dataset.ids[i] for i in chosen}
    clean = [sid for sid in dataset.ids if sid not in chosen_ids]
    meta = {
        "source": source,
        "seed": cfg.seed,
        "poison_rate": cfg.poison_rate,
        "clip_fraction": cfg.clip_fraction,
        "target_class": cfg.target_class,
    }
    return PoisonedDataset(dataset, records, clean, meta)


def poison_dataset(dataset: Dataset, g: Network, cfg: AttackConfig) -> PoisonedDataset:
    """Stamp a seeded random ``poison_rate`` fraction with the generator and relabel
    them to the target class."""
    if dataset.lengths is None:
        return poison_with_stamp(dataset, generator_stamp(g, cfg.clip_fraction), cfg, "generator")
    # padded samples: the stamp needs each row's valid length
    pd = poison_with_stamp(dataset, lambda X: X, cfg, "generator")
    index = {sid: i for i, sid in enumerate(dataset.ids)}
    rows = np.array([index[r.sample_id] for r in pd.records])
    values = apply_generator(g, dataset.X[rows], cfg.clip_fraction, dataset.lengths[rows])
    for r, v in zip(pd.records, values):
        r.poisoned_values = v
    return pd


# --- generator co-training --------------------------------------------------------


class BackdoorScorer:
    """Validation CA/ASR of a model, for early stopping on ``(CA + ASR) / 2``."""

    def __init__(self, validation: Dataset, stamp: Callable, target: int):
        self.validation = validation
        self.stamp = stamp
        self.target = target
        self.victims = validation.y != target

    def __call__(self, model) -> float:
        ca, asr = self.measure(model)
        return (ca + asr) / 2.0

    def measure(self, model) -> tuple[float, float]:
        X, y = self.validation.X, self.validation.y
        pred, _ = predict(model, X)
        ca = 100.0 * float(np.mean(pred == y))
        if not self.victims.any():
            return ca, 0.0
        pred_p, _ = predict(model, self.stamp(X[self.victims]))
        return ca, 100.0 * float(np.mean(pred_p == self.target))


def _generator_optimizer(g: Network, cfg: AttackConfig) -> torch.optim.Optimizer:
    if cfg.generator_optimizer == "adam":
        return torch.optim.Adam(g.parameters(), lr=cfg.generator_lr)
    if cfg.generator_optimizer == "sgd":
        return torch.optim.SGD(g.parameters(), lr=cfg.generator_lr)
    raise ConfigurationError(f"unknown generator optimizer {cfg.generator_optimizer!r}")


def train_tsba(
    f: Network,
    g: Network,
    dataset: Dataset,
    cfg: AttackConfig,
    validation: Dataset | None = None,
    audit: Callable[[np.ndarray, np.ndarray], None] | None = None,
    warm_start: bool = True,
) -> tuple[Network, Network, list[dict]]:
    """Co-train classifier ``f`` and trigger generator ``g``.

    1. warm start ``f`` on clean data for ``cfg.clean_epochs`` epochs;
    2. fix a random poison subset of ``round(poison_rate * N)`` samples;
    3. each backdoor epoch: update ``g`` so that ``f`` sends the stamped subset to the
       target class, regenerate the poisoned copies with the new ``g``, then train
       ``f`` for one epoch on the clean data plus the relabelled poisoned copies.

    With ``validation`` the loop early-stops on ``(CA + ASR) / 2`` (patience
    ``cfg.patience``) and restores the best pair. ``audit(clean, poisoned)`` is
    called with every regenerated poisoned batch.
    """
    n_poison = cfg.validate_for(dataset)
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    X, y = dataset.X, dataset.y
    opt_f = make_optimizer(f, cfg.classifier_lr)
    opt_g = _generator_optimizer(g, cfg)
    history: list[dict] = []

    if warm_start:
        for epoch in range(cfg.clean_epochs):
            _, loss = train_epoch_ce(f, iterate_batches(X, y, cfg.batch_size, rng), optimizer=opt_f, epoch=epoch)
            history.append({"phase": "clean", "epoch": epoch, "f_loss": loss})

    chosen = select_poison_indices(len(dataset), cfg.poison_rate, cfg.seed)
    assert len(chosen) == n_poison
    Xp = X[chosen]
    lengths_p = None if dataset.lengths is None else dataset.lengths[chosen]
    xi = torch.from_numpy(
        (cfg.clip_fraction * batch_amplitude(Xp, lengths_p))[:, None, :].astype(np.float32)
    )
    Xp_t = to_tensor(Xp)
    target = torch.full((n_poison,), cfg.target_class, dtype=torch.long)

    scorer = None
    if validation is not None:
        scorer = BackdoorScorer(validation, generator_stamp(g, cfg.clip_fraction), cfg.target_class)
    best, best_states, stale = -math.inf, None, 0

    for epoch in range(cfg.backdoor_epochs):
        # generator step on the fixed poison subset
        f.eval()
        g.train()
        g_loss_total = 0.0
        for b, i in enumerate(range(0, n_poison, cfg.batch_size)):
            sl = slice(i, i + cfg.batch_size)
            opt_g.zero_grad()
            logits = f(generator_stamp_torch(g, Xp_t[sl], xi[sl]))
            g_loss = F.cross_entropy(logits, target[sl])
            if not torch.isfinite(g_loss):
                raise NumericalDivergenceError(cfg.generator_lr, b, epoch)
            g_loss.backward()
            opt_g.step()
            g_loss_total += g_loss.item() * len(target[sl])
        f.zero_grad(set_to_none=True)

        # refresh the poisoned copies
        poisoned = apply_generator(g, Xp, cfg.clip_fraction, lengths_p)
        if audit is not None:
            audit(Xp, poisoned)

        # classifier step on D u {(G(D_p), y_t)}
        X_union = np.concatenate([X, poisoned])
        y_union = np.concatenate([y, np.full(n_poison, cfg.target_class)])
        _, f_loss = train_epoch_ce(
            f, iterate_batches(X_union, y_union, cfg.batch_size, rng), optimizer=opt_f, epoch=epoch
        )
        record = {"phase": "backdoor", "epoch": epoch, "f_loss": f_loss, "g_loss": g_loss_total / n_poison}

        if scorer is not None:
            ca, asr = scorer.measure(f)
            score = (ca + asr) / 2.0
            record.update(val_ca=ca, val_asr=asr)
            if score > best:
                best, stale = score, 0
                best_states = (copy.deepcopy(f.state_dict()), copy.deepcopy(g.state_dict()))
            else:
                stale += 1
        history.append(record)
        logger.debug("tsba epoch %d: %s", epoch, record)
        if scorer is not None and stale >= cfg.patience:
            break

    if best_states is not None:
        f.load_state_dict(best_states[0])
        g.load_state_dict(best_states[1])
    f.eval()
    g.eval()
    return f, g, history


def train_poisoned_classifier(
    f: Network,
    training_set: Dataset,
    cfg: AttackConfig,
    stamp: Callable | None = None,
    validation: Dataset | None = None,
    warm_start_set: Dataset | None = None,
) -> tuple[Network, list[dict]]:
    """Train on an (already poisoned) dataset: ``cfg.clean_epochs`` warm-start
    epochs (on ``warm_start_set`` if given, else on the training set itself), then
    up to ``cfg.backdoor_epochs`` epochs early-stopped on validation
    ``(CA + ASR) / 2`` when a stamp is given, else on CA."""
    optimizer = make_optimizer(f, cfg.classifier_lr)
    history = []
    if warm_start_set is not None and cfg.clean_epochs > 0:
        warm = TrainConfig(cfg.classifier_lr, cfg.batch_size, cfg.clean_epochs, cfg.seed)
        _, history = fit(f, warm_start_set.X, warm_start_set.y, warm, optimizer=optimizer)
        epochs, monitor_from = cfg.backdoor_epochs, 0
    else:
        epochs, monitor_from = cfg.clean_epochs + cfg.backdoor_epochs, cfg.clean_epochs
    if epochs < 1:
        return f, history
    tc = TrainConfig(cfg.classifier_lr, cfg.batch_size, epochs, cfg.seed + 1, cfg.patience)
    score_fn = None
    if validation is not None:
        scorer = BackdoorScorer(validation, stamp or (lambda X: X), cfg.target_class)
        score_fn = scorer if stamp is not None else (lambda m: scorer.measure(m)[0])
    f, more = fit(f, training_set.X, training_set.y, tc, score_fn=score_fn, optimizer=optimizer,
                  monitor_from=monitor_from)
    return f, history + more


def train_universal(
    g: Network,
    datasets: Sequence[Dataset],
    T_u: int,
    cfg: AttackConfig,
    arch: str = "fcn",
    classifier_width: float = 1.0,
    callback: Callable[[int, dict], None] | None = None,
) -> Network:
    """Train one generator across several datasets.

    The datasets are merged into a global label space. Each iteration draws a
    dataset and a target class uniformly at random, builds a fresh classifier
    with a head over all merged classes, and runs one co-training round on the
    drawn dataset.
    """
    if T_u <= 0:
        return g
    if not datasets:
        raise ConfigurationError("universal training needs at least one dataset")
    merged, total = merge_datasets(datasets)
    g_dim = g.spec.input_shape[1]
    if merged[0].num_variables != g_dim:
        raise ConfigurationError(
            f"universal generator is built for D={g_dim}, datasets have D={merged[0].num_variables}"
        )
    rng = np.random.default_rng(cfg.seed)
    for it in range(T_u):
        j = int(rng.integers(len(merged)))
        target = int(rng.integers(total))
        ds = merged[j]
        inner = AttackConfig(**{**asdict(cfg), "target_class": target, "seed": int(rng.integers(2**31))})
        f = build_classifier(arch, ds.length, ds.num_variables, total, seed=inner.seed, width=classifier_width)
        _, g, hist = train_tsba(f, g, ds, inner)
        if callback is not None:
            callback(it, {"dataset": ds.name, "target": target, "history": hist})
        logger.info("universal iteration %d: dataset=%s target=%d", it, ds.name, target)
    g.eval()
    return g
