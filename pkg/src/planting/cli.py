"""Command-line experiment runner.

Subcommands::

    planting train-teacher   --config cifar10 --dataset-dir DATA --out runs/c10
    planting train-initial   --config cifar10 --dataset-dir DATA --out runs/c10
    planting train-baseline  --config cifar10 --dataset-dir DATA --out runs/c10 --channels 16 --loss kd
    planting plant           --config cifar10 --dataset-dir DATA --out runs/c10
    planting report          --out runs/c10
    planting show-config     --config cifar10 --scale 0.1

``--config`` takes a preset name or a JSON file. A JSON file may name a
preset under ``"preset"`` and override any field. The resolved configuration
is written to ``OUT/config.json`` on every run.

Output layout, one directory per trial and phase::

    OUT/trial{t}/{teacher,initial,baseline_*,plant}/model.plnt
                                                   /epochs.csv  (train phases)
                                                   /row.json
    OUT/trial{t}/plant/search/                     per-step search state
    OUT/report.csv, OUT/report.txt
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import atomic_write_text, load_network, save_network
from .data import (
    CIFAR10_SPLIT,
    CIFAR100_SPLIT,
    STL10_SPLIT,
    LabeledDataset,
    SplitSpec,
    load_cifar10,
    load_cifar100,
    load_stl10,
    make_synthetic,
    split_holdout,
    standardize,
)
from .model import ArchitectureSpec, ChannelConfig, PlantableNetwork, build_network, param_count
from .search import SearchConfig, derive_seed, run_planting
from .trainer import TrainConfig, evaluate, stl_milestones, train

logger = logging.getLogger("planting")

DATASETS = ("cifar10", "cifar100", "stl10", "synthetic")
PHASE_CODES = {"teacher": 0, "initial": 1, "baseline": 2, "plant": 3}
LOSSES = {"ce": 1.0, "kd": 0.0}


class ExperimentError(Exception):
    """Bad configuration, a missing prerequisite, or unreportable results."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    classes: int = 2
    per_class: int = 64
    dims: tuple[int, int, int] = (3, 8, 8)
    separation: float = 0.3
    val_count: int = 24
    test_count: int = 48


@dataclass(frozen=True)
class SearchSettings:
    """Every SearchConfig field except the per-step training config and seed."""

    lambda_select: float
    groups: int = 5
    n: int = 4
    candidate_mode: str = "brute_force"
    random_k: Optional[int] = None
    max_steps: int = 50
    init: str = "zero"
    workers: int = 1


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str
    teacher_channels: tuple[int, ...]
    initial_channels: tuple[int, ...]
    baseline_channels: tuple[tuple[int, ...], ...]
    teacher_train: TrainConfig
    initial_train: TrainConfig
    baseline_train: TrainConfig
    planting_train: TrainConfig
    search: SearchSettings
    trials: int = 3
    seed: int = 0
    scale: float = 1.0
    split: Optional[SplitSpec] = None
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)

    def __post_init__(self):
        if self.dataset not in DATASETS:
            raise ExperimentError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        if self.trials < 1:
            raise ExperimentError("trials must be >= 1")
        if not 0 < self.scale <= 1:
            raise ExperimentError("scale must lie in (0, 1]")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        for k in ("teacher_train", "initial_train", "baseline_train", "planting_train"):
            d[k] = d[k].to_dict()
        d["search"] = asdict(self.search)
        d["split"] = None if self.split is None else asdict(self.split)
        d["synthetic"] = asdict(self.synthetic)
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ExperimentError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        for k in ("teacher_train", "initial_train", "baseline_train", "planting_train"):
            d[k] = TrainConfig.from_dict(d[k])
        d["search"] = SearchSettings(**d["search"])
        d["split"] = None if d.get("split") is None else SplitSpec(**d["split"])
        syn = dict(d.get("synthetic") or {})
        if "dims" in syn:
            syn["dims"] = tuple(syn["dims"])
        d["synthetic"] = SyntheticSpec(**syn)
        d["teacher_channels"] = tuple(d["teacher_channels"])
        d["initial_channels"] = tuple(d["initial_channels"])
        d["baseline_channels"] = tuple(tuple(c) for c in d["baseline_channels"])
        return cls(**d)


def _uniform(w: int) -> tuple[int, ...]:
    return (w,) * 5


def preset(name: str) -> ExperimentConfig:
    """Protocol constants for each experiment family."""
    widths = [_uniform(w) for w in (8, 16, 32, 64, 128)]
    if name in ("cifar10", "cifar100"):
        base = TrainConfig(learning_rate=0.01, momentum=0.9, weight_decay=5e-4, batch_size=128, epochs=150,
                           milestones=(40, 80, 120), lr_factor=0.2)
        return ExperimentConfig(
            dataset=name, teacher_channels=_uniform(128), initial_channels=_uniform(8), baseline_channels=tuple(widths),
            teacher_train=base, initial_train=base, baseline_train=base,
            planting_train=base.with_(weight_decay=5e-5, lam=0.0),
            search=SearchSettings(lambda_select=1.0 if name == "cifar10" else 0.0, groups=5, n=4),
        )
    if name == "stl10":
        base = TrainConfig(learning_rate=0.01, momentum=0.9, weight_decay=5e-4, batch_size=128, epochs=100,
                           milestones=stl_milestones(100), lr_factor=0.1)
        return ExperimentConfig(
            dataset=name, teacher_channels=_uniform(128), initial_channels=_uniform(8), baseline_channels=tuple(widths),
            teacher_train=base, initial_train=base, baseline_train=base,
            planting_train=base.with_(lam=0.0),
            search=SearchSettings(lambda_select=0.0, groups=5, n=4),
        )
    if name == "synthetic":
        base = TrainConfig(learning_rate=0.01, momentum=0.9, weight_decay=5e-4, batch_size=16, epochs=10,
                           milestones=(), lr_factor=0.2)
        return ExperimentConfig(
            dataset=name, teacher_channels=_uniform(16), initial_channels=_uniform(2),
            baseline_channels=(_uniform(2), _uniform(4)),
            teacher_train=base.with_(epochs=20), initial_train=base, baseline_train=base,
            planting_train=base.with_(epochs=5, weight_decay=5e-5, lam=0.0),
            search=SearchSettings(lambda_select=0.0, groups=5, n=2, max_steps=10),
            trials=1,
        )
    raise ExperimentError(f"unknown preset {name!r}; choose from {DATASETS}")


def load_config(source: str) -> ExperimentConfig:
    """A preset name, or a JSON file (optionally ``{"preset": name, ...overrides}``)."""
    if source in DATASETS:
        return preset(source)
    path = Path(source)
    if not path.is_file():
        raise ExperimentError(f"{source!r} is neither a preset ({', '.join(DATASETS)}) nor a file")
    raw = json.loads(path.read_text())
    name = raw.pop("preset", None)
    if name is None:
        return ExperimentConfig.from_dict(raw)
    merged = preset(name).to_dict()
    for key, value in raw.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = {**merged[key], **value}
        else:
            merged[key] = value
    return ExperimentConfig.from_dict(merged)


def _scale_train(cfg: TrainConfig, scale: float) -> TrainConfig:
    if scale == 1.0:
        return cfg
    epochs = max(1, round(cfg.epochs * scale))
    milestones = sorted({round(m * scale) for m in cfg.milestones} & set(range(1, epochs)))
    return cfg.with_(epochs=epochs, milestones=tuple(milestones))


def _scale_count(n: int, scale: float) -> int:
    return max(1, round(n * scale))


def default_split(dataset: str) -> SplitSpec:
    return {"cifar10": CIFAR10_SPLIT, "cifar100": CIFAR100_SPLIT, "stl10": STL10_SPLIT}[dataset]


def resolve(cfg: ExperimentConfig) -> ExperimentConfig:
    """Apply ``scale`` to epochs, milestones and dataset sizes; the result has scale 1."""
    s = cfg.scale
    changes: dict = {"scale": 1.0}
    for k in ("teacher_train", "initial_train", "baseline_train", "planting_train"):
        changes[k] = _scale_train(getattr(cfg, k), s)
    if cfg.dataset == "synthetic":
        syn = cfg.synthetic
        changes["synthetic"] = replace(syn, per_class=_scale_count(syn.per_class, s),
                                       val_count=_scale_count(syn.val_count, s),
                                       test_count=_scale_count(syn.test_count, s))
    else:
        split = cfg.split or default_split(cfg.dataset)
        changes["split"] = SplitSpec(_scale_count(split.train_count, s), _scale_count(split.val_count, s),
                                     _scale_count(split.test_count, s), split.split_seed)
    return replace(cfg, **changes)


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode("utf-8")).hexdigest()[:16]


def data_hash(cfg: ExperimentConfig) -> str:
    """Identity of the dataset, split and normalization; rows must agree on it to be reported together."""
    d = cfg.to_dict()
    ident = {"dataset": cfg.dataset, "seed": cfg.seed, "normalization": "per-channel, train split stats"}
    ident["synthetic" if cfg.dataset == "synthetic" else "split"] = d["synthetic" if cfg.dataset == "synthetic" else "split"]
    return _hash(ident)


# ---------------------------------------------------------------------------
# data and architecture
# ---------------------------------------------------------------------------

def architecture(cfg: ExperimentConfig) -> ArchitectureSpec:
    if cfg.dataset == "cifar10":
        return ArchitectureSpec.cifar(10)
    if cfg.dataset == "cifar100":
        return ArchitectureSpec.cifar(100)
    if cfg.dataset == "stl10":
        return ArchitectureSpec.stl(10)
    syn = cfg.synthetic
    if syn.dims[0] != 3:
        raise ExperimentError("synthetic images must have 3 channels")
    return ArchitectureSpec.cifar(syn.classes, input_hw=tuple(syn.dims[1:]))


def load_data(cfg: ExperimentConfig, dataset_dir: Optional[str]) -> tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """(train, val, test) for a resolved config. Splits use ``cfg.seed`` and are shared by all trials."""
    if cfg.dataset == "synthetic":
        syn = cfg.synthetic
        pool = make_synthetic(syn.classes, syn.per_class + -(-(syn.val_count + syn.test_count) // syn.classes),
                              syn.dims, cfg.seed, syn.separation)
        rest, test = split_holdout(pool, syn.test_count, derive_seed(cfg.seed, 1))
        train_set, val = split_holdout(rest, syn.val_count, derive_seed(cfg.seed, 2))
        return tuple(standardize(train_set, val, test))
    if dataset_dir is None:
        raise ExperimentError(f"--dataset-dir is required for {cfg.dataset}")
    loader = {"cifar10": load_cifar10, "cifar100": load_cifar100, "stl10": load_stl10}[cfg.dataset]
    return loader(dataset_dir, split_seed=cfg.seed, split=cfg.split)


# ---------------------------------------------------------------------------
# result rows and artifacts
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ResultRow:
    label: str
    params: int
    test_loss: float
    test_acc: float  # percent
    loss_func: str
    trial: int
    data_hash: str

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ResultRow":
        missing = [f.name for f in fields(cls) if d.get(f.name) in (None, "")]
        if missing:
            raise ExperimentError(f"result row is missing {', '.join(missing)}")
        row = cls(str(d["label"]), int(d["params"]), float(d["test_loss"]), float(d["test_acc"]),
                  str(d["loss_func"]), int(d["trial"]), str(d["data_hash"]))
        if not (math.isfinite(row.test_loss) and math.isfinite(row.test_acc)):
            raise ExperimentError(f"result row {row.label!r} has a non-finite metric")
        return row


def _width_label(channels: Sequence[int]) -> str:
    return str(channels[0]) if len(set(channels)) == 1 else "-".join(map(str, channels))


def _trial_dir(out: Path, trial: int) -> Path:
    return out / f"trial{trial}"


def _read_json(path: Path) -> Optional[dict]:
    return json.loads(path.read_text()) if path.is_file() else None


def _up_to_date(phase_dir: Path, phase_hash: str) -> bool:
    row = _read_json(phase_dir / "row.json")
    return row is not None and row.get("phase_hash") == phase_hash and (phase_dir / "model.plnt").is_file()


def _write_row(phase_dir: Path, row: ResultRow, phase_hash: str) -> None:
    atomic_write_text(phase_dir / "row.json", json.dumps({**row.to_dict(), "phase_hash": phase_hash},
                                                         indent=2, sort_keys=True) + "\n")


def _test_row(net: PlantableNetwork, test: LabeledDataset, label: str, loss_func: str, trial: int,
              dhash: str) -> ResultRow:
    # test loss is cross-entropy for every row so rows stay comparable
    loss, acc = evaluate(net, test)
    return ResultRow(label, param_count(net), loss, 100.0 * acc, loss_func, trial, dhash)


def _load_checkpoint(path: Path, what: str, command: str) -> PlantableNetwork:
    if not path.is_file():
        raise ExperimentError(f"missing {what} checkpoint {path}; run `planting {command}` first")
    return load_network(path)[0]


class Runner:
    """Runs phases for a resolved config against one output directory."""

    def __init__(self, cfg: ExperimentConfig, out, dataset_dir: Optional[str] = None, force: bool = False):
        self.cfg = resolve(cfg)
        self.out = Path(out)
        self.dataset_dir = dataset_dir
        self.force = force
        self.spec = architecture(self.cfg)
        self.dhash = data_hash(self.cfg)
        self._data = None

    @property
    def data(self):
        if self._data is None:
            self._data = load_data(self.cfg, self.dataset_dir)
        return self._data

    def write_config(self) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        atomic_write_text(self.out / "config.json", json.dumps(self.cfg.to_dict(), indent=2, sort_keys=True) + "\n")

    def _train_phase(self, trial: int, phase: str, name: str, label: str, channels: Sequence[int],
                     tcfg: TrainConfig, teacher_path: Optional[Path] = None) -> ResultRow:
        phase_dir = _trial_dir(self.out, trial) / name
        code = PHASE_CODES[phase]
        build_seed = derive_seed(self.cfg.seed, trial, code, *channels, 0)
        tcfg = tcfg.with_(seed=derive_seed(self.cfg.seed, trial, code, *channels, 1))
        teacher = None
        teacher_id = None
        if tcfg.lam < 1:
            teacher = _load_checkpoint(teacher_path, "teacher", "train-teacher")
            teacher_id = hashlib.sha256(teacher_path.read_bytes()).hexdigest()[:16]
        phase_hash = _hash({"data": self.dhash, "channels": list(channels), "train": tcfg.to_dict(),
                            "build_seed": build_seed, "teacher": teacher_id, "label": label})
        if not self.force and _up_to_date(phase_dir, phase_hash):
            logger.info("%s: up to date", phase_dir)
            return ResultRow.from_dict(_read_json(phase_dir / "row.json"))
        train_set, val, test = self.data
        net = build_network(self.spec, ChannelConfig(tuple(channels)), build_seed)
        logger.info("%s: training %s (%d params, %d epochs)", phase_dir, list(channels), param_count(net), tcfg.epochs)
        trained, log = train(net, train_set, tcfg, teacher=teacher, val=val)
        row = _test_row(trained, test, label, tcfg.loss_name, trial, self.dhash)
        phase_dir.mkdir(parents=True, exist_ok=True)
        save_network(trained, phase_dir / "model.plnt",
                     meta={"label": label, "trial": trial, "data_hash": self.dhash, "phase_hash": phase_hash})
        atomic_write_text(phase_dir / "epochs.csv", log.to_csv())
        _write_row(phase_dir, row, phase_hash)
        return row

    def _trials(self, trials: Optional[int]) -> range:
        return range(trials if trials is not None else self.cfg.trials)

    def train_teacher(self, trials: Optional[int] = None) -> list[ResultRow]:
        return [self._train_phase(t, "teacher", "teacher", "Teacher", self.cfg.teacher_channels,
                                  self.cfg.teacher_train.with_(lam=1.0)) for t in self._trials(trials)]

    def train_initial(self, trials: Optional[int] = None) -> list[ResultRow]:
        return [self._train_phase(t, "initial", "initial", "Initial", self.cfg.initial_channels,
                                  self.cfg.initial_train.with_(lam=1.0)) for t in self._trials(trials)]

    def train_baseline(self, channels: Sequence[int], loss: str, trials: Optional[int] = None) -> list[ResultRow]:
        if loss not in LOSSES:
            raise ExperimentError(f"loss must be one of {sorted(LOSSES)}")
        width = _width_label(channels)
        tcfg = self.cfg.baseline_train.with_(lam=LOSSES[loss])
        return [self._train_phase(t, "baseline", f"baseline_{width}_{loss}", f"Baseline {width} ({tcfg.loss_name})",
                                  channels, tcfg, teacher_path=_trial_dir(self.out, t) / "teacher" / "model.plnt")
                for t in self._trials(trials)]

    def plant(self, trials: Optional[int] = None) -> list[ResultRow]:
        rows = []
        for trial in self._trials(trials):
            tdir = _trial_dir(self.out, trial)
            teacher = _load_checkpoint(tdir / "teacher" / "model.plnt", "teacher", "train-teacher")
            initial = _load_checkpoint(tdir / "initial" / "model.plnt", "initial", "train-initial")
            s = self.cfg.search
            search_cfg = SearchConfig(train=self.cfg.planting_train, lambda_select=s.lambda_select, groups=s.groups,
                                      n=s.n, candidate_mode=s.candidate_mode, random_k=s.random_k,
                                      max_steps=s.max_steps, seed=derive_seed(self.cfg.seed, trial, PHASE_CODES["plant"]),
                                      init=s.init, workers=s.workers)
            phase_dir = tdir / "plant"
            search_dir = phase_dir / "search"
            search_dir.mkdir(parents=True, exist_ok=True)
            train_set, val, test = self.data
            final, state = run_planting(initial, teacher, train_set, val, search_cfg,
                                        checkpoint_dir=search_dir, resume=not self.force)
            row = _test_row(final, test, "Ours", self.cfg.planting_train.loss_name, trial, self.dhash)
            save_network(final, phase_dir / "model.plnt",
                         meta={"label": "Ours", "trial": trial, "data_hash": self.dhash,
                               "channels": list(final.channels.conv_channels)})
            # the worker count does not change results, so it stays out of the hash
            search_id = {k: v for k, v in search_cfg.to_dict().items() if k != "workers"}
            _write_row(phase_dir, row, _hash({"data": self.dhash, "search": search_id}))
            logger.info("trial %d: planted %s -> %s (%d params)", trial, list(initial.channels.conv_channels),
                        list(final.channels.conv_channels), row.params)
            rows.append(row)
        return rows


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReportLine:
    label: str
    params: float
    test_loss: float
    test_acc: float
    loss_func: str
    trials: int


def format_params(p: float) -> str:
    return f"{p / 1e6:.1f}M" if p >= 1e6 else f"{p / 1e3:.1f}K"


def collect_rows(out) -> list[ResultRow]:
    out = Path(out)
    rows = []
    for path in sorted(out.glob("trial*/*/row.json")):
        row = ResultRow.from_dict(json.loads(path.read_text()))
        model = path.parent / "model.plnt"
        if model.is_file() and param_count(load_network(model)[0]) != row.params:
            raise ExperimentError(f"{path}: params disagree with the checkpoint next to it")
        rows.append(row)
    return rows


def aggregate(rows: Sequence[ResultRow]) -> list[ReportLine]:
    """Mean over trials per label, ordered by mean params."""
    if not rows:
        raise ExperimentError("no result rows to report")
    hashes = {r.data_hash for r in rows}
    if len(hashes) > 1:
        raise ExperimentError(f"rows come from different data configurations: {sorted(hashes)}")
    groups: dict[str, list[ResultRow]] = {}
    for r in rows:
        groups.setdefault(r.label, []).append(r)
    lines = []
    for label, rs in groups.items():
        funcs = {r.loss_func for r in rs}
        if len(funcs) > 1:
            raise ExperimentError(f"label {label!r} mixes loss functions {sorted(funcs)}")
        lines.append(ReportLine(label, float(np.mean([r.params for r in rs])), float(np.mean([r.test_loss for r in rs])),
                                float(np.mean([r.test_acc for r in rs])), funcs.pop(), len(rs)))
    return sorted(lines, key=lambda l: (l.params, l.label))


REPORT_FIELDS = ("network", "params", "params_mean", "test_loss", "test_acc", "loss_func", "trials")


def report_csv(lines: Sequence[ReportLine]) -> str:
    out = [",".join(REPORT_FIELDS)]
    for l in lines:
        out.append(",".join([l.label, format_params(l.params), repr(l.params), f"{l.test_loss:.4f}",
                             f"{l.test_acc:.2f}", l.loss_func, str(l.trials)]))
    return "\n".join(out) + "\n"


def report_text(lines: Sequence[ReportLine]) -> str:
    header = ("Network", "Params", "Test loss", "Test acc (%)", "Loss func", "Trials")
    body = [(l.label, format_params(l.params), f"{l.test_loss:.4f}", f"{l.test_acc:.2f}", l.loss_func, str(l.trials))
            for l in lines]
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
    fmt = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
    return "\n".join([fmt(header), "  ".join("-" * w for w in widths), *map(fmt, body)]) + "\n"


def write_report(out) -> str:
    out = Path(out)
    lines = aggregate(collect_rows(out))
    text = report_text(lines)
    atomic_write_text(out / "report.csv", report_csv(lines))
    atomic_write_text(out / "report.txt", text)
    return text


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _parse_channels(text: str) -> tuple[int, ...]:
    parts = [int(p) for p in text.replace(",", " ").split()]
    if len(parts) == 1:
        return _uniform(parts[0])
    if len(parts) != 5:
        raise argparse.ArgumentTypeError("channels must be one width or five comma-separated widths")
    return tuple(parts)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="planting", description="Grow small CNNs by planting channels.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out=True):
        p.add_argument("--config", default="synthetic", help="preset name or JSON file (default: synthetic)")
        p.add_argument("--dataset-dir", default=None, help="directory holding the dataset binaries")
        if needs_out:
            p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the experiment seed")
        p.add_argument("--trials", type=int, default=None, help="override the trial count")
        p.add_argument("--scale", type=float, default=None, help="shrink epochs and dataset sizes by this factor")
        p.add_argument("--workers", type=int, default=None, help="parallel candidate evaluations (plant)")
        p.add_argument("--force", action="store_true", help="recompute even when artifacts are up to date")

    common(sub.add_parser("train-teacher", help="train the teacher network"))
    common(sub.add_parser("train-initial", help="train the small initial network"))
    p = sub.add_parser("train-baseline", help="train fixed-width baselines")
    common(p)
    p.add_argument("--channels", type=_parse_channels, action="append", default=None,
                   help="width or five widths; repeatable (default: every preset baseline)")
    p.add_argument("--loss", choices=sorted(LOSSES), default="ce")
    common(sub.add_parser("plant", help="grow the initial network by planting"))
    p = sub.add_parser("report", help="aggregate result rows into CSV and a text table")
    p.add_argument("--out", required=True)
    common(sub.add_parser("show-config", help="print the resolved configuration"), needs_out=False)
    return parser


def config_from_args(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    changes = {k: getattr(args, k) for k in ("seed", "trials", "scale") if getattr(args, k) is not None}
    if args.workers is not None:
        changes["search"] = replace(cfg.search, workers=args.workers)
    return replace(cfg, **changes)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2) if args.verbose else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            print(write_report(args.out), end="")
            return 0
        cfg = config_from_args(args)
        if args.command == "show-config":
            print(json.dumps(resolve(cfg).to_dict(), indent=2, sort_keys=True))
            return 0
        runner = Runner(cfg, args.out, args.dataset_dir, force=args.force)
        runner.write_config()
        if args.command == "train-teacher":
            rows = runner.train_teacher()
        elif args.command == "train-initial":
            rows = runner.train_initial()
        elif args.command == "train-baseline":
            rows = []
            for channels in args.channels or runner.cfg.baseline_channels:
                rows += runner.train_baseline(channels, args.loss)
        else:
            rows = runner.plant()
        for r in rows:
            print(f"trial {r.trial}  {r.label:<24} params {r.params:>9,}  test_loss {r.test_loss:.4f}  "
                  f"test_acc {r.test_acc:.2f}%")
    except ExperimentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
