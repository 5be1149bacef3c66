"""Command line entry point: ``tsbackdoor <verb> --config FILE [--seed N] [--out DIR]``.

Verbs: run, universal-train, defend, eval, plot, report. Configs are YAML (or
JSON) whose keys mirror :class:`ExperimentConfig`.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import platform
import sys
import tempfile
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
import yaml

from . import __version__, attacks, defenses, evaluation
from .attacks import ATTACKS, AttackConfig
from .data import ConfigurationError, Dataset, DatasetError, SyntheticSpec, load_dataset, znormalize
from .models import CheckpointError, Network, build_universal_generator, load_checkpoint, save_checkpoint
from .training import NumericalDivergenceError

logger = logging.getLogger("tsbackdoor")

DEFENSES = ("none", "nc", "fp", "anp")
CLASSIFIERS = ("fcn", "resnet", "tcn", "lstm")
# keys of AttackConfig that the ``train`` section owns
TRAIN_KEYS = {"learning_rate": "classifier_lr", "batch_size": "batch_size", "patience": "patience"}
ATTACK_KEYS = ("poison_rate", "clip_fraction", "target_class", "clean_epochs", "backdoor_epochs",
               "generator_lr", "generator_optimizer")


@dataclass
class ExperimentConfig:
    dataset: dict
    classifier: str = "fcn"
    attack: str = "tsba_a"
    attack_config: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    defense: str = "none"
    defense_params: dict = field(default_factory=dict)
    out: str = "runs/experiment"
    seed: int = 0
    folds: int = 10
    run_folds: list | None = None
    validation_fraction: float = 0.1
    generator: str | None = None
    width: float = 1.0
    plots: int = 2
    # universal-train only
    datasets: list = field(default_factory=list)
    iterations: int = 0

    @classmethod
    def from_dict(cls, raw: dict, base_dir: str = ".") -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigurationError("config must be a mapping")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {unknown}")
        raw = dict(raw)
        raw.setdefault("dataset", {})
        cfg = cls(**raw)
        cfg._resolve_paths(base_dir)
        return cfg

    def _resolve_paths(self, base_dir):
        def fix(p):
            return p if p is None or os.path.isabs(p) else os.path.normpath(os.path.join(base_dir, p))

        for spec in [self.dataset, *self.datasets]:
            if isinstance(spec, dict) and "path" in spec:
                spec["path"] = fix(spec["path"])
        self.generator = fix(self.generator)

    def attack_settings(self) -> AttackConfig:
        bad = sorted(set(self.attack_config) - set(ATTACK_KEYS))
        if bad:
            raise ConfigurationError(f"unknown attack_config keys: {bad}")
        bad = sorted(set(self.train) - set(TRAIN_KEYS))
        if bad:
            raise ConfigurationError(f"unknown train keys: {bad}")
        values = dict(self.attack_config)
        values.update({TRAIN_KEYS[k]: v for k, v in self.train.items()})
        return AttackConfig(**values, seed=int(self.seed))

    def validate(self, verb: str = "run") -> None:
        """Check everything that can be checked before any training starts."""
        if verb == "universal-train":
            if len(self.datasets) < 2:
                raise ConfigurationError("universal-train needs at least 2 datasets")
            for spec in self.datasets:
                _check_dataset_spec(spec)
            if int(self.iterations) < 0:
                raise ConfigurationError("iterations must be >= 0")
        else:
            _check_dataset_spec(self.dataset)
        if self.classifier not in CLASSIFIERS:
            raise ConfigurationError(f"classifier must be one of {CLASSIFIERS}, got {self.classifier!r}")
        if self.attack not in ATTACKS:
            raise ConfigurationError(f"attack must be one of {ATTACKS}, got {self.attack!r}")
        if self.defense not in DEFENSES:
            raise ConfigurationError(f"defense must be one of {DEFENSES}, got {self.defense!r}")
        if verb == "defend" and self.defense == "none":
            raise ConfigurationError("defend needs defense to be one of nc, fp, anp")
        if int(self.folds) < 2:
            raise ConfigurationError("folds must be >= 2")
        if self.run_folds is not None and any(not 0 <= int(f) < int(self.folds) for f in self.run_folds):
            raise ConfigurationError(f"run_folds must lie in [0, {self.folds})")
        if not 0 <= float(self.validation_fraction) < 1:
            raise ConfigurationError("validation_fraction must lie in [0, 1)")
        if self.attack == "universal" and verb == "run" and not self.generator:
            raise ConfigurationError("attack 'universal' needs a generator checkpoint path")
        if self.generator and verb != "universal-train" and not os.path.exists(self.generator):
            raise ConfigurationError(f"generator checkpoint not found: {self.generator}")
        if self.generator and self.attack not in ("tsba_b", "universal"):
            raise ConfigurationError("a generator checkpoint is only used by tsba_b and universal")
        if int(self.plots) < 0:
            raise ConfigurationError("plots must be >= 0")
        self.attack_settings()

    def resolved(self) -> dict:
        d = asdict(self)
        d["attack_config"] = asdict(self.attack_settings())
        return d


def _check_dataset_spec(spec):
    if not isinstance(spec, dict) or not spec:
        raise ConfigurationError("dataset must be a mapping with 'path' or 'synthetic'")
    extra = sorted(set(spec) - {"path", "synthetic", "znormalize", "name"})
    if extra:
        raise ConfigurationError(f"unknown dataset keys: {extra}")
    if ("path" in spec) == ("synthetic" in spec):
        raise ConfigurationError("dataset needs exactly one of 'path' or 'synthetic'")
    if "path" in spec and not os.path.exists(spec["path"]):
        raise ConfigurationError(f"dataset path not found: {spec['path']}")
    if "synthetic" in spec:
        try:
            SyntheticSpec(**spec["synthetic"])
        except TypeError as exc:
            raise ConfigurationError(f"bad synthetic spec: {exc}") from None


def load_config(path, seed: int | None = None, out: str | None = None) -> ExperimentConfig:
    if not os.path.exists(path):
        raise ConfigurationError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            raw = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"{path}: not valid YAML ({exc})") from None
    cfg = ExperimentConfig.from_dict(raw, base_dir=os.path.dirname(os.path.abspath(path)))
    if seed is not None:
        cfg.seed = seed
    if out is not None:
        cfg.out = out
    return cfg


def build_dataset(spec: dict) -> Dataset:
    if "synthetic" in spec:
        ds = load_dataset(dict(spec["synthetic"], **({"name": spec["name"]} if "name" in spec else {})))
    else:
        ds = load_dataset(spec["path"])
    return znormalize(ds) if spec.get("znormalize") else ds


# --- artifact helpers --------------------------------------------------------------


def atomic_write(path, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def write_json(path, obj) -> None:
    atomic_write(path, json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n")


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def run_key(cfg: ExperimentConfig, data_hash: str) -> str:
    """Content address of a run: resolved config (minus output location) + data."""
    resolved = cfg.resolved()
    resolved.pop("out")
    blob = json.dumps(_plain(resolved), sort_keys=True) + data_hash
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def write_record(cfg: ExperimentConfig, out: str, verb: str, data_hashes: dict, artifacts: list) -> None:
    write_json(
        os.path.join(out, "record.json"),
        {
            "verb": verb,
            "config": cfg.resolved(),
            "seed": cfg.seed,
            "version": __version__,
            "torch": torch.__version__,
            "python": platform.python_version(),
            "dataset_hash": data_hashes,
            "artifacts": {os.path.relpath(a, out): file_sha256(a) for a in sorted(artifacts)},
        },
    )


def read_record(out: str) -> dict:
    path = os.path.join(out, "record.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"{path} missing: run `tsbackdoor run` with this --out first")
    with open(path) as fh:
        return json.load(fh)


def seed_everything(seed: int) -> None:
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def attack_stamp(cfg: ExperimentConfig, generator: Network | None):
    ac = cfg.attack_settings()
    if cfg.attack in ("vanilla_fixed", "vanilla_random", "static_noise"):
        return attacks.make_stamp(cfg.attack, seed=ac.seed)
    if generator is None:
        raise CheckpointError(f"attack {cfg.attack} needs its generator checkpoint")
    return attacks.generator_stamp(generator, ac.clip_fraction)


def defender_split(test: Dataset, seed: int) -> tuple[Dataset, Dataset]:
    """Half of the held-out fold goes to the defender, the rest measures the effect."""
    from .data import train_test_split

    return train_test_split(test, 0.5, seed)


def apply_defense(name: str, model: Network, clean: Dataset, evaluator, params: dict, seed: int):
    if name == "nc":
        return defenses.neural_cleanse(model, clean, evaluator=evaluator, seed=seed, **params)
    if name == "fp":
        return defenses.fine_prune(model, clean, evaluator=evaluator, seed=seed, **params)
    if name == "anp":
        return defenses.anp(model, clean, evaluator=evaluator, seed=seed, **params)
    raise ConfigurationError(f"unknown defense {name!r}")


def _evaluator(stamp, test: Dataset, target: int):
    def evaluate(model):
        return (evaluation.clean_accuracy(model, test),
                evaluation.attack_success_rate(model, stamp, test, target))

    return evaluate


def _run_defense(cfg, model, stamp, test, out, ckpt_dir, artifacts):
    ac = cfg.attack_settings()
    defender_data, eval_data = defender_split(test, cfg.seed)
    report = apply_defense(cfg.defense, model, defender_data, _evaluator(stamp, eval_data, ac.target_class),
                           dict(cfg.defense_params), cfg.seed)
    path = os.path.join(out, "defense.json")
    write_json(path, defenses._jsonable(report.summary()))
    artifacts.append(path)
    ckpt = os.path.join(ckpt_dir, "defended.ckpt")
    save_checkpoint(report.model, ckpt, cfg.seed, {"defense": cfg.defense})
    artifacts.append(ckpt)
    if cfg.defense == "nc":
        artifacts.extend(defenses.export_reversed_triggers(report, os.path.join(out, "nc_triggers")))
    return report


def _plot_records(cfg, model, stamp, dataset: Dataset, ids, out) -> list:
    from .plotting import plot_sample

    clip = cfg.attack_settings().clip_fraction if cfg.attack in ("tsba_a", "tsba_b", "universal") else None
    index = {sid: i for i, sid in enumerate(dataset.ids)}
    paths = []
    for sid in ids:
        if sid not in index:
            raise DatasetError(f"sample id {sid!r} not in dataset {dataset.name}")
        x = dataset.X[index[sid]]
        written = plot_sample(x, stamp(x), sid, os.path.join(out, "plots"), model=model, clip_fraction=clip)
        paths.extend(written[k] for k in sorted(written))
    return paths


# --- verbs -------------------------------------------------------------------------


def cmd_run(cfg: ExperimentConfig) -> int:
    cfg.validate("run")
    ac = cfg.attack_settings()
    dataset = build_dataset(cfg.dataset)
    ac.validate_for(dataset)
    generator = None
    if cfg.generator:
        generator = load_checkpoint(cfg.generator)
        if not generator.spec.is_generator:
            raise CheckpointError(f"{cfg.generator} holds a {generator.spec.kind}, not a generator")
    seed_everything(cfg.seed)
    out = cfg.out
    os.makedirs(out, exist_ok=True)
    data_hash = dataset.content_hash()
    ckpt_dir = os.path.join(out, "checkpoints", run_key(cfg, data_hash))
    artifacts = []
    first = {}

    def keep_first(fold, outcome, clean_model, splits):
        if not first:
            first.update(fold=fold, outcome=outcome, clean=clean_model, **splits)

    report = evaluation.crossval_run(
        dataset, cfg.classifier, cfg.attack, ac, k=int(cfg.folds),
        validation_fraction=float(cfg.validation_fraction), generator=generator,
        on_fold=keep_first, width=float(cfg.width),
        folds=None if cfg.run_folds is None else [int(f) for f in cfg.run_folds],
    )
    path = os.path.join(out, "report.csv")
    atomic_write(path, report.to_csv())
    artifacts.append(path)
    path = os.path.join(out, "summary.json")
    write_json(path, report.summary())
    artifacts.append(path)

    outcome = first["outcome"]
    meta = {"fold": first["fold"], "attack": cfg.attack, "dataset": dataset.name}
    for name, model in (("clean.ckpt", first["clean"]), ("backdoored.ckpt", outcome.model),
                        ("generator.ckpt", outcome.generator)):
        if model is not None:
            path = os.path.join(ckpt_dir, name)
            save_checkpoint(model, path, cfg.seed, meta)
            artifacts.append(path)
    path = os.path.join(out, "manifest.json")
    write_json(path, outcome.poisoned.manifest())
    artifacts.append(path)

    if cfg.defense != "none":
        _run_defense(cfg, outcome.model, outcome.stamp, first["test"], out, ckpt_dir, artifacts)
    if cfg.plots:
        ids = [r.sample_id for r in outcome.poisoned.records[: int(cfg.plots)]]
        artifacts.extend(_plot_records(cfg, outcome.model, outcome.stamp, first["train"], ids, out))
    write_record(cfg, out, "run", {dataset.name: data_hash}, artifacts)
    print(json.dumps(_plain(report.summary()), sort_keys=True))
    return 0


def cmd_universal_train(cfg: ExperimentConfig) -> int:
    cfg.validate("universal-train")
    ac = cfg.attack_settings()
    datasets = [build_dataset(spec) for spec in cfg.datasets]
    dims = {ds.num_variables for ds in datasets}
    if len(dims) > 1:
        raise ConfigurationError(f"datasets have incompatible variable counts {sorted(dims)}")
    seed_everything(cfg.seed)
    D = dims.pop()
    g = build_universal_generator(D, seed=cfg.seed, width=float(cfg.width))
    g = attacks.train_universal(g, datasets, int(cfg.iterations), ac, arch=cfg.classifier,
                                classifier_width=float(cfg.width))
    out = cfg.out
    path = os.path.join(out, "generator.ckpt")
    save_checkpoint(g, path, cfg.seed, {"datasets": [ds.name for ds in datasets], "iterations": cfg.iterations})
    write_record(cfg, out, "universal-train", {ds.name: ds.content_hash() for ds in datasets}, [path])
    print(json.dumps({"generator": path, "iterations": int(cfg.iterations)}))
    return 0


def _load_run(cfg: ExperimentConfig):
    """Reload what ``run`` left in ``cfg.out``: dataset, fold-0 splits and models."""
    record = read_record(cfg.out)
    dataset = build_dataset(cfg.dataset)
    recorded = record["dataset_hash"].get(dataset.name)
    if recorded is not None and recorded != dataset.content_hash():
        raise DatasetError(f"dataset {dataset.name} changed since the run (content hash mismatch)")
    ckpts = {os.path.basename(k): os.path.join(cfg.out, k) for k in record["artifacts"] if k.endswith(".ckpt")}
    if "backdoored.ckpt" not in ckpts:
        raise FileNotFoundError(f"no backdoored.ckpt recorded in {cfg.out}")
    model = load_checkpoint(ckpts["backdoored.ckpt"])
    generator = load_checkpoint(ckpts["generator.ckpt"]) if "generator.ckpt" in ckpts else None
    fold = model.checkpoint_metadata.get("fold", 0)
    train, _, test = evaluation.fold_split(dataset, int(cfg.folds), fold, cfg.seed, float(cfg.validation_fraction))
    ckpt_dir = os.path.dirname(ckpts["backdoored.ckpt"])
    return record, dataset, train, test, model, generator, ckpt_dir


def cmd_defend(cfg: ExperimentConfig) -> int:
    cfg.validate("defend")
    seed_everything(cfg.seed)
    record, dataset, _, test, model, generator, ckpt_dir = _load_run(cfg)
    artifacts = [os.path.join(cfg.out, k) for k in record["artifacts"]]
    stamp = attack_stamp(cfg, generator)
    report = _run_defense(cfg, model, stamp, test, cfg.out, ckpt_dir, artifacts)
    write_record(cfg, cfg.out, "defend", record["dataset_hash"], [a for a in artifacts if os.path.exists(a)])
    print(json.dumps(_plain(report.summary()), sort_keys=True))
    return 0


def cmd_eval(cfg: ExperimentConfig) -> int:
    cfg.validate("eval")
    seed_everything(cfg.seed)
    _, dataset, _, test, model, generator, _ = _load_run(cfg)
    stamp = attack_stamp(cfg, generator)
    outcome = evaluation.AttackOutcome(cfg.attack, model, stamp, generator)
    row = evaluation.evaluate_fold(outcome, test, cfg.attack_settings().target_class,
                                   fold=model.checkpoint_metadata.get("fold", 0))
    report = evaluation.EvaluationReport(dataset.name, cfg.classifier, cfg.attack, cfg.seed, [row])
    atomic_write(os.path.join(cfg.out, "eval.csv"), report.to_csv())
    print(json.dumps(_plain(report.summary()), sort_keys=True))
    return 0


def cmd_plot(cfg: ExperimentConfig, sample_ids=None) -> int:
    cfg.validate("plot")
    _, dataset, train, _, model, generator, _ = _load_run(cfg)
    stamp = attack_stamp(cfg, generator)
    if not sample_ids:
        manifest_path = os.path.join(cfg.out, "manifest.json")
        if not os.path.exists(manifest_path):
            raise FileNotFoundError(f"{manifest_path} missing")
        with open(manifest_path) as fh:
            sample_ids = [r["sample_id"] for r in json.load(fh)["records"][: max(1, int(cfg.plots))]]
    paths = _plot_records(cfg, model, stamp, dataset, sample_ids, cfg.out)
    print(json.dumps({"plots": paths}))
    return 0


REPORT_FIELDS = ("dataset", "classifier", "attack", "seed", "folds", "clean_ca", "ca", "asr", "rms_all", "rms_top1")


def collect_summaries(root: str) -> list[dict]:
    rows = []
    for dirpath, _, files in sorted(os.walk(root)):
        if "summary.json" in files and "report.csv" in files:
            with open(os.path.join(dirpath, "summary.json")) as fh:
                rows.append(json.load(fh))
    rows.sort(key=lambda r: (str(r["dataset"]), str(r["classifier"]), str(r["attack"]), r["seed"]))
    return rows


def cmd_report(cfg: ExperimentConfig) -> int:
    rows = collect_summaries(cfg.out)
    if not rows:
        raise FileNotFoundError(f"no run summaries found under {cfg.out}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_FIELDS)
    for r in rows:
        w.writerow([evaluation._fmt(r.get(k)) if k not in ("dataset", "classifier", "attack") else r[k]
                    for k in REPORT_FIELDS])
    atomic_write(os.path.join(cfg.out, "table.csv"), buf.getvalue())
    sys.stdout.write(buf.getvalue())
    return 0


VERBS = {
    "run": cmd_run,
    "universal-train": cmd_universal_train,
    "defend": cmd_defend,
    "eval": cmd_eval,
    "plot": cmd_plot,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tsbackdoor", description="Backdoor attack lab for time-series classifiers")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in VERBS:
        p = sub.add_parser(verb)
        p.add_argument("--config", required=verb != "report", help="YAML/JSON experiment config")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="override the output directory")
        if verb == "plot":
            p.add_argument("--sample", action="append", default=[], help="sample id to plot (repeatable)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config is None:
            cfg = ExperimentConfig(dataset={}, out=args.out or ".")
        else:
            cfg = load_config(args.config, args.seed, args.out)
        if args.verb == "plot":
            return cmd_plot(cfg, args.sample)
        return VERBS[args.verb](cfg)
    except (ConfigurationError, DatasetError, CheckpointError, FileNotFoundError,
            NumericalDivergenceError, ValueError) as exc:
        error = {"error": type(exc).__name__, "message": str(exc), "verb": args.verb}
        if isinstance(exc, NumericalDivergenceError):
            error.update(lr=exc.lr, batch_index=exc.batch_index, epoch=exc.epoch)
        print(json.dumps(error, sort_keys=True), file=sys.stderr)
        return 2 if isinstance(exc, ConfigurationError) else 1


if __name__ == "__main__":
    sys.exit(main())
