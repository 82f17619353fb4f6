"""Config-driven experiment runs, method comparisons and head-count sweeps."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .data import Dataset, gen_gaussian_blobs, load_cifar10_binary, load_idx, subsample
from .losses import LossKind
from .metrics import EQ4_MODES, EvaluationReport, evaluate, ece_bins, parse_csv, rows_to_csv
from .model import ModelSpec
from .nn import ARCHITECTURES, reference_architecture
from .plots import Series, emit_plots
from .strategies import STRATEGIES, TrainConfig, train_strategy

logger = logging.getLogger(__name__)

PRESETS = ("paper-mini", "paper-mnist")
PAPER_CIFAR10_ORDER = ("relaxed_softmax", "evidential", "mse", "mae")


class ConfigError(ValueError):
    """One or more config fields are invalid; ``problems`` lists (field, message)."""

    def __init__(self, problems: Sequence[Tuple[str, str]]):
        self.problems = list(problems)
        super().__init__("; ".join(f"{f}: {m}" for f, m in self.problems))


class RunError(RuntimeError):
    pass


DATASET_KEYS = {
    "blobs": {"kind", "num_classes", "n_per_class", "n_test_per_class", "dim", "spread", "label_noise_frac", "seed"},
    "idx": {"kind", "train_images", "train_labels", "test_images", "test_labels", "num_classes",
            "train_subsample", "test_subsample"},
    "cifar10": {"kind", "train_files", "test_files", "train_subsample", "test_subsample"},
}
TOP_KEYS = {"strategy", "arch", "split", "M", "losses", "seed", "out", "dataset", "train", "loss", "eval"}
TRAIN_KEYS = {f for f in TrainConfig.__dataclass_fields__ if f not in ("seed", "M")}
LOSS_KEYS = {"evidential_anneal_epochs", "ldmi_det_floor"}
EVAL_KEYS = {"ece_bins", "eq4_mode"}


@dataclass
class ExperimentConfig:
    strategy: str = "ours"
    arch: str = "small-mlp"
    split: Union[int, str] = "last_block"
    M: int = 4
    losses: List[str] = field(default_factory=lambda: list(PAPER_CIFAR10_ORDER))
    seed: int = 0
    out: Optional[str] = None
    dataset: Dict[str, object] = field(default_factory=lambda: {"kind": "blobs"})
    train: Dict[str, object] = field(default_factory=dict)
    loss: Dict[str, object] = field(default_factory=dict)
    eval: Dict[str, object] = field(default_factory=dict)

    # -- construction -----------------------------------------------------
    @classmethod
    def from_dict(cls, raw: dict, base_dir: Optional[Path] = None) -> "ExperimentConfig":
        problems: List[Tuple[str, str]] = []
        for key in raw:
            if key not in TOP_KEYS:
                problems.append((key, "unknown field"))
        cfg = cls(**{k: copy.deepcopy(v) for k, v in raw.items() if k in TOP_KEYS})
        if base_dir is not None:
            cfg._resolve_paths(Path(base_dir))
        cfg.validate(problems)
        return cfg

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "ExperimentConfig":
        path = Path(path)
        try:
            raw = tomllib.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError([("config", f"file not found: {path}")]) from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError([("config", f"{path}: {exc}")]) from None
        return cls.from_dict(raw, base_dir=path.parent)

    @classmethod
    def preset(cls, name: str) -> "ExperimentConfig":
        if name not in PRESETS:
            raise ConfigError([("config", f"unknown preset {name!r}; expected one of {PRESETS}")])
        text = resources.files("multiloss").joinpath(f"presets/{name}.toml").read_text()
        return cls.from_dict(tomllib.loads(text), base_dir=Path.cwd())

    def _resolve_paths(self, base: Path) -> None:
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if isinstance(self.dataset.get(key), str):
                self.dataset[key] = str((base / self.dataset[key]).resolve())
        for key in ("train_files", "test_files"):
            files = self.dataset.get(key)
            if isinstance(files, str):
                files = [files]
            if isinstance(files, list):
                self.dataset[key] = [str((base / f).resolve()) if isinstance(f, str) else f for f in files]

    def with_overrides(self, **changes) -> "ExperimentConfig":
        new = replace(self, **{k: copy.deepcopy(v) for k, v in changes.items()})
        new.validate()
        return new

    # -- validation -------------------------------------------------------
    def validate(self, problems: Optional[List[Tuple[str, str]]] = None) -> None:
        """Check every field up front; raise ConfigError listing all problems."""
        problems = [] if problems is None else problems

        def bad(f, m):
            problems.append((f, m))

        if self.strategy not in STRATEGIES:
            bad("strategy", f"must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.arch not in ARCHITECTURES:
            bad("arch", f"must be one of {ARCHITECTURES}, got {self.arch!r}")
        if not _is_int(self.M) or self.M < 1:
            bad("M", f"must be an integer >= 1, got {self.M!r}")
        if not _is_int(self.seed) or self.seed < 0:
            bad("seed", f"must be a non-negative integer, got {self.seed!r}")
        if not isinstance(self.losses, list) or not self.losses:
            bad("losses", "must be a non-empty list of loss names")
        else:
            if self.strategy == "ours" and _is_int(self.M) and len(self.losses) != self.M:
                msg = f"strategy 'ours' needs one loss per head: {len(self.losses)} losses but M={self.M}"
                bad("losses", msg)
                bad("M", msg)
            if self.strategy == "dse" and len(self.losses) != 1:
                bad("losses", f"strategy 'dse' needs exactly one loss, got {len(self.losses)}")
        if not (isinstance(self.split, str) or _is_int(self.split)):
            bad("split", f"must be a layer index or preset name, got {self.split!r}")

        for key in self.train:
            if key not in TRAIN_KEYS:
                bad(f"train.{key}", "unknown field")
        try:
            tc = TrainConfig(seed=self.seed, M=self.M, **{k: v for k, v in self.train.items() if k in TRAIN_KEYS})
        except (ValueError, TypeError) as exc:
            bad("train", str(exc))
            tc = None
        if tc is not None and self.strategy == "swa" and tc.swa_snapshot_epochs > tc.epochs:
            bad("train.swa_snapshot_epochs", f"must not exceed train.epochs ({tc.epochs})")
        if tc is not None and self.strategy == "mc_dropout" and not tc.dropout_p > 0:
            bad("train.dropout_p", "strategy 'mc_dropout' needs dropout_p > 0")
        if tc is not None and tc.loss_weights is not None and self.strategy == "ours" and len(tc.loss_weights) != self.M:
            bad("train.loss_weights", f"needs {self.M} entries, got {len(tc.loss_weights)}")

        for key in self.loss:
            if key not in LOSS_KEYS:
                bad(f"loss.{key}", "unknown field")
        try:
            self.loss_kinds()
        except (ValueError, TypeError) as exc:
            bad("losses" if "unknown loss" in str(exc) else "loss", str(exc))

        for key in self.eval:
            if key not in EVAL_KEYS:
                bad(f"eval.{key}", "unknown field")
        if not _is_int(self.ece_bins) or self.ece_bins < 1:
            bad("eval.ece_bins", f"must be an integer >= 1, got {self.ece_bins!r}")
        if self.eq4_mode not in EQ4_MODES:
            bad("eval.eq4_mode", f"must be one of {EQ4_MODES}, got {self.eq4_mode!r}")

        self._validate_dataset(bad)
        if not problems and self.dataset.get("kind") == "blobs":
            # structural check of the split against the architecture
            try:
                reference_architecture(self.arch, (int(self.dataset.get("dim", self.num_classes)),),
                                       self.num_classes).resolve_split(self.split)
            except ValueError as exc:
                bad("split", str(exc))
        if problems:
            raise ConfigError(problems)

    def _validate_dataset(self, bad) -> None:
        kind = self.dataset.get("kind")
        if kind not in DATASET_KEYS:
            bad("dataset.kind", f"must be one of {sorted(DATASET_KEYS)}, got {kind!r}")
            return
        for key in self.dataset:
            if key not in DATASET_KEYS[kind]:
                bad(f"dataset.{key}", f"unknown field for dataset kind {kind!r}")
        d = self.dataset
        if kind == "blobs":
            if not 0.0 <= float(d.get("label_noise_frac", 0.0)) < 0.5:
                bad("dataset.label_noise_frac", "must lie in [0, 0.5)")
            if not float(d.get("spread", 0.5)) > 0:
                bad("dataset.spread", "must be positive")
            if int(d.get("dim", self.num_classes)) < self.num_classes:
                bad("dataset.dim", "must be at least num_classes")
            if self.num_classes < 2:
                bad("dataset.num_classes", "must be >= 2")
        elif kind == "idx":
            for key in ("train_images", "train_labels", "test_images", "test_labels"):
                if key not in d:
                    bad(f"dataset.{key}", "required for idx datasets")
                elif not Path(str(d[key])).is_file():
                    bad(f"dataset.{key}", f"file not found: {d[key]}")
        elif kind == "cifar10":
            for key in ("train_files", "test_files"):
                files = d.get(key)
                if not files:
                    bad(f"dataset.{key}", "required for cifar10 datasets")
                    continue
                for f in files:
                    if not Path(str(f)).is_file():
                        bad(f"dataset.{key}", f"file not found: {f}")
        for key in ("train_subsample", "test_subsample"):
            if key in d and (not _is_int(d[key]) or d[key] < 1):
                bad(f"dataset.{key}", "must be a positive integer")
        if self.arch == "small-cnn" and kind == "blobs":
            bad("arch", "small-cnn needs image data (idx or cifar10)")

    # -- derived views ----------------------------------------------------
    @property
    def num_classes(self) -> int:
        kind = self.dataset.get("kind")
        if kind == "cifar10":
            return 10
        return int(self.dataset.get("num_classes", 3 if kind == "blobs" else 10))

    @property
    def ece_bins(self):
        return self.eval.get("ece_bins", 15)

    @property
    def eq4_mode(self):
        return self.eval.get("eq4_mode", "population")

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, M=self.M, **self.train)

    def loss_kinds(self) -> List[LossKind]:
        anneal = self.loss.get("evidential_anneal_epochs", 10)
        floor = self.loss.get("ldmi_det_floor", 1e-8)
        return [LossKind(n, anneal_epochs=anneal, det_floor=floor) for n in self.losses]

    def head_losses(self) -> List[LossKind]:
        """Loss per head for this strategy; baselines use the first (base) loss."""
        kinds = self.loss_kinds()
        if self.strategy == "ours":
            return kinds
        if self.strategy == "dse":
            return kinds[:1] * self.M
        return kinds[:1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("out")
        return d

    def digest(self) -> str:
        """SHA-256 over every experiment field (the output location excluded)."""
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def method_name(self) -> str:
        return self.strategy


def _is_int(v) -> bool:
    return isinstance(v, (int, np.integer)) and not isinstance(v, bool)


def derive_config(base: ExperimentConfig, strategy: str) -> ExperimentConfig:
    """Same data, seed, M and schedule under another strategy (parity across methods)."""
    losses = list(base.losses) if strategy == "ours" else [base.losses[0]]
    train = dict(base.train)
    if strategy == "mc_dropout" and not float(train.get("dropout_p", 0.5)) > 0:
        train["dropout_p"] = 0.5
    return base.with_overrides(strategy=strategy, losses=losses, train=train)


# -- data -----------------------------------------------------------------

def load_data(cfg: ExperimentConfig) -> Tuple[Dataset, Dataset]:
    d = cfg.dataset
    kind = d["kind"]
    if kind == "blobs":
        train, test = gen_gaussian_blobs(
            num_classes=cfg.num_classes,
            n_per_class=int(d.get("n_per_class", 200)),
            dim=int(d.get("dim", cfg.num_classes)),
            spread=float(d.get("spread", 0.5)),
            label_noise_frac=float(d.get("label_noise_frac", 0.0)),
            seed=int(d.get("seed", cfg.seed)),
            n_test_per_class=d.get("n_test_per_class"),
        )
    elif kind == "idx":
        train = load_idx(d["train_images"], d["train_labels"], cfg.num_classes, "train")
        test = load_idx(d["test_images"], d["test_labels"], cfg.num_classes, "test")
    else:
        train = load_cifar10_binary(d["train_files"], "train")
        test = load_cifar10_binary(d["test_files"], "test")
    if "train_subsample" in d:
        train = subsample(train, min(int(d["train_subsample"]), len(train)), True, cfg.seed)
    if "test_subsample" in d:
        test = subsample(test, min(int(d["test_subsample"]), len(test)), True, cfg.seed)
    return train, test


# -- running --------------------------------------------------------------

@dataclass
class RunRecord:
    method: str
    config_digest: str
    seed: int
    wall_clock_s: float
    report: EvaluationReport
    out_dir: Optional[str] = None
    log_path: Optional[str] = None
    checkpoint_paths: List[str] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "method": self.method,
            "config_digest": self.config_digest,
            "seed": self.seed,
            "wall_clock_s": self.wall_clock_s,
            "out_dir": self.out_dir,
            "log_path": self.log_path,
            "checkpoint_paths": self.checkpoint_paths,
            "report": self.report.to_dict(include_records=False),
        }


def atomic_write(path: Path, data: Union[str, bytes]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    if isinstance(data, bytes):
        tmp.write_bytes(data)
    else:
        tmp.write_text(data)
    tmp.replace(path)


def report_json(cfg: ExperimentConfig, report: EvaluationReport) -> str:
    payload = {
        "method": cfg.method_name(),
        "config_digest": cfg.digest(),
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "report": report.to_dict(),
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def run(cfg: ExperimentConfig, out_dir: Optional[Union[str, Path]] = None) -> RunRecord:
    """Train per the configured strategy, evaluate on the test split and write artifacts.

    Writes ``report.json``, ``report.csv``, ``train_log.jsonl``, checkpoints and
    ``run.json`` (the only file holding wall-clock time) when an output
    directory is given.
    """
    cfg.validate()
    out = Path(out_dir) if out_dir is not None else (Path(cfg.out) if cfg.out else None)
    train, test = load_data(cfg)
    spec = ModelSpec(
        arch=cfg.arch,
        input_shape=train.feature_shape,
        num_classes=cfg.num_classes,
        losses=cfg.head_losses(),
        split=cfg.split,
        dropout_p=cfg.train_config().dropout_p if cfg.strategy == "mc_dropout" else 0.0,
    )
    t0 = time.perf_counter()
    try:
        predictor = train_strategy(cfg.strategy, spec, train, test, cfg.train_config())
    except ValueError as exc:
        raise RunError(f"{cfg.strategy} run (seed {cfg.seed}, config {cfg.digest()[:12]}) failed: {exc}") from exc
    preds = predictor.predict(test.x)
    report = evaluate(preds.per_head, test.labels, cfg.ece_bins, cfg.eq4_mode, predictor.single_model)
    wall = time.perf_counter() - t0

    record = RunRecord(cfg.method_name(), cfg.digest(), cfg.seed, wall, report)
    if out is None:
        return record
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "report.json", report_json(cfg, report))
    atomic_write(out / "report.csv", rows_to_csv([report.csv_row(cfg.method_name())]))
    atomic_write(out / "reliability.json", json.dumps(
        ece_bins(preds.averaged.max(axis=1), preds.averaged.argmax(axis=1) == test.labels, cfg.ece_bins),
        indent=2) + "\n")
    atomic_write(out / "train_log.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n" for r in predictor.log))
    ckpts = []
    for i, model in enumerate(predictor.models):
        path = out / (f"member{i}.selb" if len(predictor.models) > 1 else "model.selb")
        model.save(path)
        ckpts.append(str(path))
    record.out_dir = str(out)
    record.log_path = str(out / "train_log.jsonl")
    record.checkpoint_paths = ckpts
    atomic_write(out / "run.json", json.dumps(record.summary(), indent=2, sort_keys=True) + "\n")
    return record


def _run_job(args):
    cfg, out = args
    return run(cfg, out)


def run_many(jobs: Sequence[Tuple[ExperimentConfig, Optional[Path]]], workers: int = 1) -> List[RunRecord]:
    """Independent runs, optionally in worker processes; results keep input order."""
    if workers <= 1 or len(jobs) <= 1:
        return [run(cfg, out) for cfg, out in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_job, jobs))


# -- comparison -----------------------------------------------------------

def _parity_key(cfg: ExperimentConfig):
    return json.dumps(cfg.dataset, sort_keys=True), cfg.M


def compare(configs: Sequence[ExperimentConfig], out_dir: Optional[Union[str, Path]] = None, workers: int = 1):
    """Run every config and tabulate them with the fixed report column layout.

    All configs must share the dataset and M. Returns (rows, records) and
    writes ``comparison.csv`` plus one sub-directory per method.
    """
    if not configs:
        raise ConfigError([("configs", "nothing to compare")])
    keys = {_parity_key(c) for c in configs}
    if len(keys) > 1:
        datasets = {k[0] for k in keys}
        ms = {k[1] for k in keys}
        which = [name for name, vals in (("dataset", datasets), ("M", ms)) if len(vals) > 1]
        raise ConfigError([(w, "configs to compare must share the same value") for w in which])
    out = Path(out_dir) if out_dir is not None else None
    names, seen = [], {}
    for cfg in configs:
        name = cfg.method_name()
        seen[name] = seen.get(name, 0) + 1
        names.append(name if seen[name] == 1 else f"{name}_{seen[name]}")
    jobs = [(cfg, out / name if out else None) for cfg, name in zip(configs, names)]
    records = run_many(jobs, workers)
    rows = [rec.report.csv_row(name) for rec, name in zip(records, names)]
    if out is not None:
        atomic_write(out / "comparison.csv", rows_to_csv(rows))
    return rows, records


# -- head-count sweep -----------------------------------------------------

@dataclass
class SweepPoint:
    heads: int
    losses: List[str]
    accuracies: List[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies))


def heads_sweep(
    base: ExperimentConfig,
    head_counts: Sequence[int],
    ordered_losses: Optional[Sequence[str]] = None,
    seeds: Sequence[int] = (0,),
    out_dir: Optional[Union[str, Path]] = None,
    workers: int = 1,
) -> List[SweepPoint]:
    """Multi-loss accuracy for each head count M, using the first M losses in order."""
    ordered = list(ordered_losses if ordered_losses is not None else base.losses)
    if not head_counts:
        raise ConfigError([("heads", "empty head-count list")])
    if max(head_counts) > len(ordered):
        raise ConfigError([("heads", f"max head count {max(head_counts)} exceeds the {len(ordered)} ordered losses")])
    if min(head_counts) < 1:
        raise ConfigError([("heads", "head counts must be >= 1")])
    out = Path(out_dir) if out_dir is not None else None
    jobs = []
    for m in head_counts:
        for seed in seeds:
            cfg = base.with_overrides(strategy="ours", M=m, losses=ordered[:m], seed=seed)
            jobs.append((cfg, out / f"M{m}_seed{seed}" if out else None))
    records = run_many(jobs, workers)
    points = []
    for i, m in enumerate(head_counts):
        accs = [r.report.accuracy for r in records[i * len(seeds):(i + 1) * len(seeds)]]
        points.append(SweepPoint(m, ordered[:m], accs))
    if out is not None:
        write_sweep(points, out)
    return points


def sweep_csv(points: Sequence[SweepPoint]) -> str:
    lines = ["heads,losses,mean_accuracy,std_accuracy,n_seeds,accuracies"]
    for p in points:
        lines.append(
            f"{p.heads},{'+'.join(p.losses)},{p.mean!r},{p.std!r},{len(p.accuracies)},"
            f"{' '.join(repr(a) for a in p.accuracies)}"
        )
    return "\n".join(lines) + "\n"


def write_sweep(points: Sequence[SweepPoint], out: Path) -> None:
    atomic_write(out / "sweep.csv", sweep_csv(points))
    series = Series("multi-loss", [p.heads for p in points], [p.mean for p in points], [p.std for p in points])
    out.mkdir(parents=True, exist_ok=True)
    emit_plots([series], out / "sweep.svg", title="Accuracy vs. number of heads",
               xlabel="number of heads", ylabel="test accuracy")


# -- reporting over an existing directory ---------------------------------

def collect_reports(directory: Union[str, Path]) -> List[Tuple[str, EvaluationReport]]:
    found = []
    for path in sorted(Path(directory).rglob("report.json")):
        payload = json.loads(path.read_text())
        found.append((payload["method"], EvaluationReport.from_dict(payload["report"])))
    return found


def report_dir(directory: Union[str, Path]) -> str:
    """Rebuild the comparison table from every report.json under ``directory``."""
    reports = collect_reports(directory)
    if not reports:
        raise RunError(f"no report.json files under {directory}")
    text = rows_to_csv([rep.csv_row(method) for method, rep in reports])
    atomic_write(Path(directory) / "table.csv", text)
    return text


__all__ = [
    "ConfigError", "ExperimentConfig", "RunError", "RunRecord", "SweepPoint", "collect_reports", "compare",
    "derive_config", "heads_sweep", "load_data", "parse_csv", "report_dir", "run", "run_many", "sweep_csv",
]
