"""Time-series classification datasets: loading, writing, splitting and synthesis.

Samples are stored as ``(L, D)`` float64 matrices (timesteps by variables).
A :class:`Dataset` keeps them stacked in a single ``(N, L, D)`` array, with a
per-sample valid length for variable-length sources that were tail-padded.
"""
from __future__ import annotations

import hashlib
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
import yaml

logger = logging.getLogger(__name__)


class DatasetError(ValueError):
    """Raised for malformed or inconsistent dataset input."""


class ConfigurationError(ValueError):
    """Raised when a requested operation is impossible for the given settings."""


@dataclass(frozen=True)
class TimeSeriesSample:
    values: np.ndarray
    label: int
    sample_id: str
    length: int | None = None

    @property
    def valid(self) -> np.ndarray:
        return self.values[: self.length] if self.length is not None else self.values


@dataclass
class Dataset:
    name: str
    X: np.ndarray
    y: np.ndarray
    num_classes: int
    ids: list[str] = field(default_factory=list)
    lengths: np.ndarray | None = None
    original_labels: list = field(default_factory=list)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim == 2:
            self.X = self.X[:, :, None]
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 3:
            raise DatasetError(f"expected (N, L, D) values, got shape {self.X.shape}")
        if len(self.X) != len(self.y):
            raise DatasetError("values and labels differ in length")
        if not self.ids:
            self.ids = [f"{self.name}-{i}" for i in range(len(self.y))]
        if len(set(self.ids)) != len(self.ids):
            raise DatasetError("sample ids must be unique")
        if not np.all(np.isfinite(self.X)):
            raise DatasetError("values contain NaN or Inf")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise DatasetError("label outside [0, num_classes)")
        if self.lengths is not None:
            self.lengths = np.asarray(self.lengths, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.y)

    def __getitem__(self, i: int) -> TimeSeriesSample:
        length = None if self.lengths is None else int(self.lengths[i])
        return TimeSeriesSample(self.X[i], int(self.y[i]), self.ids[i], length)

    def __iter__(self) -> Iterator[TimeSeriesSample]:
        return (self[i] for i in range(len(self)))

    @property
    def length(self) -> int:
        return self.X.shape[1]

    @property
    def num_variables(self) -> int:
        return self.X.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.X.shape[1], self.X.shape[2]

    def subset(self, index, name: str | None = None) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(
            name or self.name,
            self.X[index],
            self.y[index],
            self.num_classes,
            ids=[self.ids[i] for i in index],
            lengths=None if self.lengths is None else self.lengths[index],
            original_labels=self.original_labels,
        )

    def with_values(self, X: np.ndarray, y: np.ndarray | None = None, name: str | None = None) -> "Dataset":
        return Dataset(
            name or self.name,
            X,
            self.y if y is None else y,
            self.num_classes,
            ids=list(self.ids),
            lengths=self.lengths,
            original_labels=self.original_labels,
        )

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.X).tobytes())
        h.update(np.ascontiguousarray(self.y).tobytes())
        return h.hexdigest()


def amplitude(sample, length: int | None = None) -> np.ndarray:
    """Per-variable ``max - min`` over the valid timesteps.

    Accepts a :class:`TimeSeriesSample`, an ``(L, D)`` matrix, or a stacked
    ``(N, L, D)`` batch (returns ``(N, D)``). A 1-D array is one variable.
    """
    if isinstance(sample, TimeSeriesSample):
        values, length = sample.values, sample.length
    else:
        values = np.asarray(sample, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    if length is not None:
        values = values[..., :length, :]
    return values.max(axis=-2) - values.min(axis=-2)


def batch_amplitude(X: np.ndarray, lengths: np.ndarray | None = None) -> np.ndarray:
    if lengths is None:
        return amplitude(X)
    return np.stack([amplitude(x, int(n)) for x, n in zip(X, lengths)])


def _remap_labels(raw: Sequence) -> tuple[np.ndarray, list]:
    originals = sorted(set(raw))
    lookup = {lab: i for i, lab in enumerate(originals)}
    return np.array([lookup[lab] for lab in raw], dtype=np.int64), originals


def _parse_label(token: str):
    value = float(token)
    return int(value) if value.is_integer() else value


def load_univariate_tsv(path, name: str | None = None) -> Dataset:
    """Read a UCR-style file: one sample per line, ``label<TAB>v1<TAB>...``."""
    rows, labels = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            fields = line.split("\t") if "\t" in line else line.split(",")
            try:
                labels.append(_parse_label(fields[0]))
                rows.append([float(v) for v in fields[1:]])
            except ValueError as exc:
                raise DatasetError(f"{path}: line {lineno}: cannot parse row ({exc})") from None
            if rows and len(rows[-1]) != len(rows[0]):
                raise DatasetError(
                    f"{path}: line {lineno}: length {len(rows[-1])} differs from {len(rows[0])}"
                )
    if not rows:
        raise DatasetError(f"{path}: empty dataset")
    if len(rows[0]) < 2:
        raise DatasetError(f"{path}: series must have at least 2 timesteps")
    y, originals = _remap_labels(labels)
    name = name or os.path.splitext(os.path.basename(str(path)))[0]
    return Dataset(name, np.array(rows)[:, :, None], y, len(originals), original_labels=originals)


def write_univariate_tsv(dataset: Dataset, path) -> None:
    if dataset.num_variables != 1:
        raise DatasetError("univariate TSV requires D == 1")
    labels = dataset.original_labels or list(range(dataset.num_classes))
    with open(path, "w") as fh:
        for x, lab in zip(dataset.X[:, :, 0], dataset.y):
            fh.write("\t".join([str(labels[lab])] + [repr(float(v)) for v in x]) + "\n")


def load_multivariate(manifest_path, name: str | None = None) -> Dataset:
    """Read a manifest (YAML/JSON) listing per-sample CSV value files.

    Manifest keys: ``name``, ``num_classes`` (optional), ``samples`` as a list of
    ``{label, values_file}``. Each CSV has one row per timestep and one column per
    variable. Shorter samples are zero-padded at the tail.
    """
    base = os.path.dirname(os.path.abspath(manifest_path))
    with open(manifest_path) as fh:
        manifest = yaml.safe_load(fh)
    entries = manifest.get("samples") or []
    if not entries:
        raise DatasetError(f"{manifest_path}: empty dataset")
    series, labels, ids = [], [], []
    for i, entry in enumerate(entries):
        fname = os.path.join(base, entry["values_file"])
        if not os.path.exists(fname):
            raise DatasetError(f"{manifest_path}: missing values file {entry['values_file']}")
        values = np.loadtxt(fname, delimiter=",", ndmin=2)
        if series and values.shape[1] != series[0].shape[1]:
            raise DatasetError(
                f"{fname}: {values.shape[1]} variables, expected {series[0].shape[1]}"
            )
        series.append(values)
        labels.append(entry["label"])
        ids.append(str(entry.get("sample_id", os.path.splitext(entry["values_file"])[0])))
    lengths = np.array([len(s) for s in series])
    if lengths.min() < 2:
        raise DatasetError(f"{manifest_path}: series must have at least 2 timesteps")
    X = np.zeros((len(series), lengths.max(), series[0].shape[1]))
    for i, s in enumerate(series):
        X[i, : len(s)] = s
    y, originals = _remap_labels(labels)
    num_classes = int(manifest.get("num_classes") or len(originals))
    return Dataset(
        name or manifest.get("name", "mts"),
        X,
        y,
        max(num_classes, len(originals)),
        ids=ids,
        lengths=lengths,
        original_labels=originals,
    )


def write_multivariate(dataset: Dataset, directory) -> str:
    """Write a dataset as manifest plus per-sample CSV files; returns the manifest path."""
    os.makedirs(directory, exist_ok=True)
    labels = dataset.original_labels or list(range(dataset.num_classes))
    samples = []
    for i, sample in enumerate(dataset):
        fname = f"{sample.sample_id}.csv"
        np.savetxt(os.path.join(directory, fname), sample.valid, delimiter=",", fmt="%.17g")
        samples.append({"label": labels[sample.label], "values_file": fname, "sample_id": sample.sample_id})
    manifest = {"name": dataset.name, "num_classes": dataset.num_classes, "samples": samples}
    path = os.path.join(directory, "manifest.yaml")
    with open(path, "w") as fh:
        yaml.safe_dump(manifest, fh, sort_keys=False)
    return path


def crop(dataset: Dataset) -> list[np.ndarray]:
    """Undo tail padding: one ``(length_i, D)`` array per sample."""
    return [s.valid for s in dataset]


def znormalize(dataset: Dataset) -> Dataset:
    """Per-sample, per-variable z-normalization over the valid region."""
    X = dataset.X.copy()
    for i, s in enumerate(dataset):
        v = s.valid
        std = v.std(axis=0)
        std[std == 0] = 1.0
        n = len(v)
        X[i, :n] = (v - v.mean(axis=0)) / std
    return dataset.with_values(X)


@dataclass(frozen=True)
class FoldSplit:
    k: int
    assignments: dict
    seed: int

    def fold_indices(self, dataset: Dataset, fold: int) -> tuple[np.ndarray, np.ndarray]:
        """(train, test) positional indices for one fold."""
        fold_of = np.array([self.assignments[i] for i in dataset.ids])
        return np.flatnonzero(fold_of != fold), np.flatnonzero(fold_of == fold)


def stratified_kfold(dataset: Dataset, k: int, seed: int = 0) -> FoldSplit:
    """Assign every sample to one of ``k`` folds, stratified by class.

    Within each class the (shuffled) samples are dealt round-robin, and the
    starting fold rotates between classes so that small classes do not all pile
    into fold 0.
    """
    if k < 2:
        raise ConfigurationError("k must be at least 2")
    if k > len(dataset):
        raise ConfigurationError(f"k={k} exceeds the number of samples ({len(dataset)})")
    rng = np.random.default_rng(seed)
    assignments = {}
    offset = 0
    for c in range(dataset.num_classes):
        members = np.flatnonzero(dataset.y == c)
        rng.shuffle(members)
        for j, idx in enumerate(members):
            assignments[dataset.ids[idx]] = (offset + j) % k
        offset += len(members)
    return FoldSplit(k, assignments, seed)


def train_test_split(dataset: Dataset, test_fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Stratified holdout split."""
    rng = np.random.default_rng(seed)
    test = []
    for c in range(dataset.num_classes):
        members = np.flatnonzero(dataset.y == c)
        rng.shuffle(members)
        n_test = int(round(test_fraction * len(members)))
        if len(members) > 1:
            n_test = min(max(n_test, 1), len(members) - 1)
        test.extend(members[:n_test])
    test = np.sort(np.array(test, dtype=np.int64))
    train = np.setdiff1d(np.arange(len(dataset)), test)
    return dataset.subset(train), dataset.subset(test)


WAVEFORMS = ("sine", "square", "sawtooth", "triangle", "chirp")


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int = 2
    per_class: int = 100
    length: int = 128
    vars: int = 1
    seed: int = 0
    waveform: str = "sine"
    noise: float = 0.1
    name: str | None = None


def _wave(kind: str, phase: np.ndarray) -> np.ndarray:
    if kind == "sine":
        return np.sin(phase)
    if kind == "square":
        return np.tanh(4.0 * np.sin(phase))
    if kind == "sawtooth":
        return 2.0 * ((phase / (2 * np.pi)) % 1.0) - 1.0
    if kind == "triangle":
        return 2.0 * np.abs(2.0 * ((phase / (2 * np.pi)) % 1.0) - 1.0) - 1.0
    raise ConfigurationError(f"unknown waveform {kind!r}")


def make_synthetic(spec: SyntheticSpec | None = None, **kwargs) -> Dataset:
    """Separable synthetic dataset: class ``c`` oscillates at ``c + 2`` cycles per
    series with a class-dependent offset, plus uniform noise bounded by ``spec.noise``.
    """
    spec = spec or SyntheticSpec(**kwargs)
    if spec.classes < 2:
        raise ConfigurationError("synthetic data needs at least 2 classes")
    rng = np.random.default_rng(spec.seed)
    t = np.arange(spec.length) / spec.length
    X = np.empty((spec.classes * spec.per_class, spec.length, spec.vars))
    y = np.repeat(np.arange(spec.classes), spec.per_class)
    for i, c in enumerate(y):
        cycles = c + 2.0
        for d in range(spec.vars):
            start = rng.uniform(0, 2 * np.pi)
            scale = rng.uniform(0.8, 1.2)
            if spec.waveform == "chirp":
                phase = start + 2 * np.pi * cycles * t * (1.0 + t)
                base = np.sin(phase)
            else:
                base = _wave(spec.waveform, start + 2 * np.pi * cycles * t)
            X[i, :, d] = scale * base + 0.25 * c + rng.uniform(-spec.noise, spec.noise, spec.length)
    name = spec.name or f"synthetic-{spec.waveform}"
    order = rng.permutation(len(y))
    return Dataset(name, X[order], y[order], spec.classes, ids=[f"{name}-{i}" for i in range(len(y))])


def merge_datasets(datasets: Sequence[Dataset], name: str = "merged") -> tuple[list[Dataset], int]:
    """Relabel datasets into one global class index space.

    Returns the relabelled datasets (class ``c`` of dataset ``j`` becomes
    ``offset_j + c``) and the total number of merged classes.
    """
    dims = {d.num_variables for d in datasets}
    if len(dims) > 1:
        raise ConfigurationError(f"datasets disagree on the number of variables: {sorted(dims)}")
    total = sum(d.num_classes for d in datasets)
    out, offset = [], 0
    for d in datasets:
        out.append(Dataset(d.name, d.X, d.y + offset, total, ids=list(d.ids), lengths=d.lengths))
        offset += d.num_classes
    return out, total


def load_dataset(source) -> Dataset:
    """Dispatch on a path (``.tsv``/``.txt`` univariate, ``.yaml``/``.json`` manifest)
    or a mapping of :class:`SyntheticSpec` fields."""
    if isinstance(source, dict):
        return make_synthetic(SyntheticSpec(**source))
    path = str(source)
    if path.endswith((".yaml", ".yml", ".json")):
        return load_multivariate(path)
    return load_univariate_tsv(path)


def batches(n: int, batch_size: int, rng: np.random.Generator | None = None) -> list[np.ndarray]:
    order = rng.permutation(n) if rng is not None else np.arange(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def fold_count_bounds(n_class: int, k: int) -> tuple[int, int]:
    return math.floor(n_class / k), math.ceil(n_class / k)
