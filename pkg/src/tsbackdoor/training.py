"""Cross-entropy training, early stopping, and inference for classifiers."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn.functional as F

from .models import Network, to_tensor

logger = logging.getLogger(__name__)


class NumericalDivergenceError(FloatingPointError):
    def __init__(self, lr, batch_index, epoch=None):
        self.lr, self.batch_index, self.epoch = lr, batch_index, epoch
        where = f"batch {batch_index}" + ("" if epoch is None else f" of epoch {epoch}")
        super().__init__(f"loss became NaN/Inf at {where} (lr={lr})")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    epochs: int = 100
    seed: int = 0
    patience: int = 50

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")


def make_optimizer(model: Network, lr: float) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=lr)


def iterate_batches(X, y, batch_size: int, rng: np.random.Generator | None = None):
    n = len(y)
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for i in range(0, n, batch_size):
        idx = order[i : i + batch_size]
        yield to_tensor(X[idx]), torch.as_tensor(np.asarray(y)[idx], dtype=torch.long)


def train_epoch_ce(
    model: Network,
    batches: Iterable,
    lr: float | None = None,
    optimizer: torch.optim.Optimizer | None = None,
    epoch: int | None = None,
) -> tuple[Network, float]:
    """One pass of mean cross-entropy descent over ``batches`` of (values, labels).

    Either pass a persistent ``optimizer`` or a learning rate (a fresh Adam is
    created). Returns the model and the sample-weighted mean loss.
    """
    if optimizer is None:
        optimizer = make_optimizer(model, 1e-3 if lr is None else lr)
    lr = optimizer.param_groups[0]["lr"]
    model.train()
    total, count = 0.0, 0
    for b, (xb, yb) in enumerate(batches):
        xb = torch.as_tensor(xb, dtype=next(model.parameters()).dtype)
        yb = torch.as_tensor(yb, dtype=torch.long)
        if xb.shape[0] == 1 and _has_batchnorm(model):
            # batch statistics are undefined for one sample
            model.eval()
        optimizer.zero_grad()
        loss = F.cross_entropy(model(xb), yb)
        if not torch.isfinite(loss):
            raise NumericalDivergenceError(lr, b, epoch)
        loss.backward()
        optimizer.step()
        model.train()
        total += loss.item() * len(yb)
        count += len(yb)
    return model, total / max(count, 1)


def _has_batchnorm(model) -> bool:
    return any(isinstance(m, torch.nn.BatchNorm1d) for m in model.modules())


@torch.no_grad()
def predict_proba(model: Network, X, batch_size: int = 256) -> np.ndarray:
    model.eval()
    X = np.asarray(X)
    single = X.ndim == 2
    if single:
        X = X[None]
    out = []
    for i in range(0, len(X), batch_size):
        logits = model(to_tensor(X[i : i + batch_size]).to(next(model.parameters()).dtype))
        out.append(torch.softmax(logits, dim=1).double().numpy())
    probs = np.concatenate(out) if out else np.empty((0, model.spec.output_dim))
    return probs[0] if single else probs


def predict(model: Network, X):
    """Returns ``(class, probabilities)`` for one ``(L, D)`` sample, or arrays for a batch."""
    X = np.asarray(X)
    expected = model.spec.input_shape
    if X.shape[-1] != expected[1] or (expected[0] is not None and X.shape[-2] != expected[0]):
        raise ValueError(f"input shape {X.shape[-2:]} incompatible with model input {expected}")
    probs = predict_proba(model, X)
    return np.argmax(probs, axis=-1), probs


def fit(
    model: Network,
    X,
    y,
    config: TrainConfig,
    score_fn: Callable[[Network], float] | None = None,
    optimizer: torch.optim.Optimizer | None = None,
    monitor_from: int = 0,
) -> tuple[Network, list[dict]]:
    """Train for up to ``config.epochs`` epochs.

    With ``score_fn`` (higher is better, evaluated after each epoch from epoch
    ``monitor_from`` on) training stops after ``config.patience`` epochs without
    improvement and the best weights are restored.
    """
    rng = np.random.default_rng(config.seed)
    torch.manual_seed(config.seed)
    optimizer = optimizer or make_optimizer(model, config.learning_rate)
    history = []
    best, best_state, stale = -math.inf, None, 0
    for epoch in range(config.epochs):
        _, loss = train_epoch_ce(
            model, iterate_batches(X, y, config.batch_size, rng), optimizer=optimizer, epoch=epoch
        )
        record = {"epoch": epoch, "loss": loss}
        if score_fn is not None and epoch >= monitor_from:
            score = score_fn(model)
            record["score"] = score
            if score > best:
                best, best_state, stale = score, copy.deepcopy(model.state_dict()), 0
            else:
                stale += 1
        history.append(record)
        if best_state is not None and stale >= config.patience:
            logger.debug("early stop at epoch %d (best score %.4f)", epoch, best)
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model, history


def accuracy(model: Network, X, y) -> float:
    if len(y) == 0:
        raise ValueError("accuracy of an empty set is undefined")
    pred, _ = predict(model, X)
    return 100.0 * float(np.mean(pred == np.asarray(y)))
