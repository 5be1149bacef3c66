"""Network architectures: time-series classifiers and trigger generators.

Every network is described by a :class:`NetworkSpec` (a plain, hashable layer
list) and instantiated by :class:`Network`. Inputs and outputs use the
``(batch, L, D)`` layout of the datasets; convolutions run on ``(batch, D, L)``
internally.
"""
from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import os
import tempfile
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import ConfigurationError

CHECKPOINT_FORMAT = "tsbackdoor-checkpoint"
CHECKPOINT_VERSION = 1

CLASSIFIERS = ("fcn", "resnet", "tcn", "lstm")
KINDS = (
    "classifier_fcn",
    "classifier_tcn",
    "classifier_resnet",
    "classifier_lstm",
    "trigger_generator",
    "universal_generator",
)


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    op: str
    kernel_size: int | tuple | None = None
    channels: int | tuple | None = None
    activation: str | None = None
    dilation: int = 1
    causal: bool = False
    batchnorm: bool = False


@dataclass(frozen=True)
class NetworkSpec:
    kind: str
    input_shape: tuple  # (L or None, D); None means length-agnostic
    output_dim: int
    layers: tuple

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        layers = tuple(
            LayerSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in layer.items()})
            for layer in d["layers"]
        )
        return cls(d["kind"], tuple(d["input_shape"]), int(d["output_dim"]), layers)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()

    @property
    def is_generator(self) -> bool:
        return self.kind.endswith("generator")


def _activation(name: str | None):
    return {
        None: nn.Identity(),
        "relu": nn.ReLU(),
        "tanh": nn.Tanh(),
    }[name]


class ChannelGate(nn.Module):
    """Per-channel multiplier on a feature map; all ones unless a defense edits it.

    ``mask`` persists in checkpoints so pruned channels stay pruned.
    ``perturbation`` is a transient multiplicative offset used by adversarial
    neuron pruning.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.register_buffer("mask", torch.ones(channels))
        self.perturbation: torch.Tensor | None = None
        self.soft_mask: torch.Tensor | None = None

    def forward(self, h):
        scale = self.mask if self.soft_mask is None else self.soft_mask
        if self.perturbation is not None:
            scale = scale + self.perturbation
        return h * scale.view(1, -1, 1)


class ConvBlock(nn.Module):
    def __init__(self, in_ch, layer: LayerSpec):
        super().__init__()
        k, d = layer.kernel_size, layer.dilation
        span = (k - 1) * d
        # causal: all padding on the left; same: extra element on the right for even kernels
        self.pad = (span, 0) if layer.causal else (span // 2, span - span // 2)
        self.conv = nn.Conv1d(in_ch, layer.channels, k, dilation=d)
        self.bn = nn.BatchNorm1d(layer.channels) if layer.batchnorm else None
        self.gate = ChannelGate(layer.channels) if layer.batchnorm else None
        self.act = _activation(layer.activation)

    def forward(self, h):
        h = self.conv(F.pad(h, self.pad))
        if self.bn is not None:
            h = self.gate(self.bn(h))
        return self.act(h)


class ResidualBlock(nn.Module):
    def __init__(self, in_ch, layer: LayerSpec):
        super().__init__()
        ch = layer.channels
        convs = []
        for i, k in enumerate(layer.kernel_size):
            last = i == len(layer.kernel_size) - 1
            convs.append(
                ConvBlock(in_ch if i == 0 else ch,
                          LayerSpec("conv1d", k, ch, None if last else "relu", batchnorm=True))
            )
        self.convs = nn.Sequential(*convs)
        self.shortcut = (
            nn.Identity() if in_ch == ch
            else nn.Sequential(nn.Conv1d(in_ch, ch, 1), nn.BatchNorm1d(ch))
        )
        self.gate = ChannelGate(ch)

    def forward(self, h):
        return torch.relu(self.gate(self.convs(h) + self.shortcut(h)))


class RecurrentBlock(nn.Module):
    def __init__(self, in_ch, layer: LayerSpec):
        super().__init__()
        self.lstm = nn.LSTM(in_ch, layer.channels, batch_first=True)
        self.gate = ChannelGate(layer.channels)

    def forward(self, h):
        out, _ = self.lstm(h.transpose(1, 2))
        return self.gate(out.transpose(1, 2))


class TimeDense(nn.Module):
    """Dense layer applied independently at every timestep."""

    def __init__(self, in_ch, layer: LayerSpec):
        super().__init__()
        self.linear = nn.Linear(in_ch, layer.channels)
        self.act = _activation(layer.activation)

    def forward(self, h):
        return self.act(self.linear(h.transpose(1, 2))).transpose(1, 2)


_BLOCKS = {
    "conv1d": ConvBlock,
    "residual_block": ResidualBlock,
    "recurrent": RecurrentBlock,
    "dense_per_timestep": TimeDense,
}


class Network(nn.Module):
    """A classifier (returns logits) or a generator (returns an ``(L, D)`` pattern)."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        channels = spec.input_shape[1]
        blocks = []
        self.pooling = None
        self.head = None
        for layer in spec.layers:
            if layer.op == "pooling":
                self.pooling = layer.activation
            elif layer.op == "dense":
                self.head = nn.Linear(channels, layer.channels)
            else:
                blocks.append(_BLOCKS[layer.op](channels, layer))
                channels = layer.channels
        self.blocks = nn.ModuleList(blocks)
        self.feature_channels = channels

    def features(self, x):
        """Output of the last temporal block, shape ``(batch, channels, L)``."""
        h = x.transpose(1, 2)
        for block in self.blocks:
            h = block(h)
        return h

    def classify(self, h):
        pooled = h[:, :, -1] if self.pooling == "last" else h.mean(dim=2)
        return self.head(pooled)

    def forward(self, x):
        h = self.features(x)
        if self.spec.is_generator:
            return h.transpose(1, 2)
        return self.classify(h)

    @property
    def gates(self) -> list[ChannelGate]:
        return [m for m in self.modules() if isinstance(m, ChannelGate)]

    @property
    def last_gate(self) -> ChannelGate:
        block = self.blocks[-1]
        return block.gate

    def parameter_vector(self) -> torch.Tensor:
        return nn.utils.parameters_to_vector(self.parameters()).detach()

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def _scaled(n, width):
    return max(1, int(round(n * width)))


def generator_spec(L: int | None, D: int, width: float = 1.0) -> NetworkSpec:
    if D < 1 or (L is not None and L < 1):
        raise ConfigurationError("generator needs L, D >= 1")
    layers = (
        LayerSpec("conv1d", 15, _scaled(128 * D, width), "relu"),
        LayerSpec("conv1d", 21, _scaled(512 * D, width), "relu"),
        LayerSpec("dense_per_timestep", None, _scaled(256 * D, width), "relu"),
        LayerSpec("dense_per_timestep", None, D, "tanh"),
    )
    return NetworkSpec("trigger_generator", (L, D), D, layers)


def universal_generator_spec(D: int, width: float = 1.0) -> NetworkSpec:
    if D < 1:
        raise ConfigurationError("generator needs D >= 1")
    layers = (
        LayerSpec("conv1d", 15, _scaled(128 * D, width), "relu"),
        LayerSpec("conv1d", 21, _scaled(512 * D, width), "relu"),
        LayerSpec("conv1d", 8, _scaled(1024 * D, width), "relu"),
        LayerSpec("dense_per_timestep", None, _scaled(512 * D, width), "relu"),
        LayerSpec("dense_per_timestep", None, D, "tanh"),
    )
    return NetworkSpec("universal_generator", (None, D), D, layers)


def classifier_spec(arch: str, L: int, D: int, C: int, width: float = 1.0) -> NetworkSpec:
    if C < 2:
        raise ConfigurationError("a classifier needs at least 2 classes")
    w = lambda n: _scaled(n, width)  # noqa: E731
    if arch == "fcn":
        body = tuple(
            LayerSpec("conv1d", k, w(ch), "relu", batchnorm=True)
            for k, ch in ((8, 128), (5, 256), (3, 128))
        )
        pool = "mean"
    elif arch == "resnet":
        body = tuple(LayerSpec("residual_block", (8, 5, 3), w(ch)) for ch in (64, 128, 128))
        pool = "mean"
    elif arch == "tcn":
        body = tuple(
            LayerSpec("conv1d", 5, w(64), "relu", dilation=d, causal=True, batchnorm=True)
            for d in (1, 2, 4, 8)
        )
        pool = "mean"
    elif arch == "lstm":
        body = (LayerSpec("recurrent", None, w(128)),)
        pool = "last"
    else:
        raise ConfigurationError(f"unknown classifier architecture {arch!r}; expected one of {CLASSIFIERS}")
    layers = body + (LayerSpec("pooling", activation=pool), LayerSpec("dense", None, C, "softmax"))
    return NetworkSpec(f"classifier_{arch}", (L, D), C, layers)


def build(spec: NetworkSpec, seed: int | None = None) -> Network:
    if seed is None:
        return Network(spec)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return Network(spec)


def build_trigger_generator(L: int, D: int, seed: int | None = None, width: float = 1.0) -> Network:
    return build(generator_spec(L, D, width), seed)


def build_universal_generator(D: int, seed: int | None = None, width: float = 1.0) -> Network:
    return build(universal_generator_spec(D, width), seed)


def build_classifier(arch: str, L: int, D: int, C: int, seed: int | None = None, width: float = 1.0) -> Network:
    return build(classifier_spec(arch, L, D, C, width), seed)


def save_checkpoint(model: Network, path, seed: int | None = None, metadata: dict | None = None) -> None:
    """Write spec, weights and metadata atomically (temp file, then rename)."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "spec": model.spec.to_dict(),
        "spec_hash": model.spec.digest(),
        "state": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "seed": seed,
        "metadata": metadata or {},
    }
    # serialise in memory: torch names the archive after the target file, and a
    # random temp name would make identical runs differ byte for byte
    buf = io.BytesIO()
    torch.save(payload, buf)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(buf.getvalue())
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def load_checkpoint(path, expected_spec: NetworkSpec | None = None) -> Network:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from None
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    spec = NetworkSpec.from_dict(payload["spec"])
    if spec.digest() != payload["spec_hash"]:
        raise CheckpointError(f"{path}: spec hash mismatch (corrupt or tampered checkpoint)")
    if expected_spec is not None and expected_spec.digest() != payload["spec_hash"]:
        raise CheckpointError(f"{path}: checkpoint spec {spec.kind} does not match the expected spec")
    model = Network(spec)
    try:
        model.load_state_dict(payload["state"])
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: weights incompatible with spec ({exc})") from None
    model.eval()
    model.checkpoint_seed = payload.get("seed")
    model.checkpoint_metadata = payload.get("metadata", {})
    return model


def to_tensor(X) -> torch.Tensor:
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 2:
        X = X[None]
    return torch.from_numpy(X)
