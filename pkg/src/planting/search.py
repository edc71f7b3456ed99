"""The planting loop.

Each step plants ``n`` channels on every candidate group of conv layers,
trains only the new slices against the teacher, scores every candidate on
the validation split, and keeps the best one if it beats the current network.
The loop stops at the first step where no candidate improves.
"""
from __future__ import annotations

import json
import logging
import math
import multiprocessing as mp
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .checkpoint import atomic_write_bytes, atomic_write_text, load_network, save_network
from .data import LabeledDataset
from .gradcore import NonFiniteError
from .model import N_CONV, PlantableNetwork, param_count, plant_channels
from .trainer import TrainConfig, evaluate, predict_logits, train

logger = logging.getLogger(__name__)

__all__ = [
    "SearchConfig",
    "SearchState",
    "StepRecord",
    "derive_seed",
    "group_partition",
    "run_planting",
    "select_candidates",
    "selection_loss",
]


def group_partition(n_layers: int, groups: int) -> list[list[int]]:
    """Contiguous groups of 1-based layer indices.

    Layer ``l`` belongs to group ``g`` (0-based) when
    ``g * L / G <= l - 1 < (g + 1) * L / G``; compared in integers.
    """
    if not 1 <= groups <= n_layers:
        raise ValueError(f"group count must lie in [1, {n_layers}], got {groups}")
    out = []
    for g in range(groups):
        out.append([l for l in range(1, n_layers + 1) if g * n_layers <= (l - 1) * groups < (g + 1) * n_layers])
    return out


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


CANDIDATE_MODES = ("brute_force", "random")


def select_candidates(groups: int, mode: str, seed: int, step: int, k: Optional[int] = None) -> list[int]:
    if mode == "brute_force":
        return list(range(groups))
    if mode != "random":
        raise ValueError(f"candidate mode must be one of {CANDIDATE_MODES}")
    if k is None or not 1 <= k <= groups:
        raise ValueError(f"random mode needs 1 <= k <= {groups}, got {k}")
    rng = np.random.default_rng([seed, step])
    return sorted(int(g) for g in rng.choice(groups, size=k, replace=False))


@dataclass(frozen=True)
class SearchConfig:
    train: TrainConfig
    lambda_select: float
    groups: int = 5
    n: int = 4
    candidate_mode: str = "brute_force"
    random_k: Optional[int] = None
    max_steps: int = 50
    seed: int = 0
    init: str = "zero"
    workers: int = 1

    def __post_init__(self):
        if not 1 <= self.groups <= N_CONV:
            raise ValueError(f"groups must lie in [1, {N_CONV}]")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.candidate_mode not in CANDIDATE_MODES:
            raise ValueError(f"candidate_mode must be one of {CANDIDATE_MODES}")
        if self.candidate_mode == "random" and (self.random_k is None or not 1 <= self.random_k <= self.groups):
            raise ValueError("random candidate mode needs 1 <= random_k <= groups")
        if not 0 <= self.lambda_select <= 1:
            raise ValueError("lambda_select must lie in [0, 1]")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = self.train.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SearchConfig":
        d = dict(d)
        d["train"] = TrainConfig.from_dict(d["train"])
        return cls(**d)


@dataclass
class StepRecord:
    step: int
    groups: list[int]
    val_losses: dict[int, float]
    chosen: Optional[int]
    accepted: bool
    channels: list[int]
    param_count: int
    val_loss: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["val_losses"] = {str(g): _json_float(v) for g, v in self.val_losses.items()}
        d["val_loss"] = _json_float(self.val_loss)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StepRecord":
        d = dict(d)
        d["val_losses"] = {int(g): float(v) for g, v in d["val_losses"].items()}
        d["val_loss"] = float(d["val_loss"])
        return cls(**d)


def _json_float(x: float):
    return x if math.isfinite(x) else str(x)


@dataclass
class SearchState:
    current: PlantableNetwork
    current_loss: float
    initial_loss: float
    step_log: list[StepRecord] = field(default_factory=list)
    finished: bool = False

    @property
    def accepted_losses(self) -> list[float]:
        return [self.initial_loss] + [r.val_loss for r in self.step_log if r.accepted]

    def log_rows(self) -> list[dict]:
        return [r.to_dict() for r in self.step_log]

    def to_csv(self) -> str:
        lines = ["step,groups,val_losses,chosen,accepted,channels,param_count,val_loss"]
        for r in self.step_log:
            losses = " ".join(f"{g}:{v!r}" for g, v in r.val_losses.items())
            lines.append(",".join([
                str(r.step), " ".join(map(str, r.groups)), losses,
                "" if r.chosen is None else str(r.chosen), str(int(r.accepted)),
                " ".join(map(str, r.channels)), str(r.param_count), repr(r.val_loss),
            ]))
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------

def selection_loss(net: PlantableNetwork, val: LabeledDataset, lambda_select: float,
                   teacher: Optional[PlantableNetwork] = None,
                   teacher_logits: Optional[np.ndarray] = None, batch_size: int = 256) -> float:
    """Sample-weighted mean combined loss on the validation split."""
    if len(val) == 0:
        raise ValueError("validation split is empty")
    if lambda_select < 1 and teacher_logits is None:
        if teacher is None:
            raise ValueError("a teacher is needed when lambda_select < 1")
        teacher_logits = predict_logits(teacher, val.images)
    loss, _ = evaluate(net, val, lambda_select, teacher_logits if lambda_select < 1 else None, batch_size)
    return loss


@dataclass
class _Job:
    group_index: int
    layers: list[int]
    plant_seed: int
    train_seed: int


# shared with forked workers; read-only once the pool starts
_CONTEXT: dict = {}


def _evaluate_candidate(job: _Job) -> tuple[int, float, Optional[PlantableNetwork]]:
    ctx = _CONTEXT
    config: SearchConfig = ctx["config"]
    candidate = plant_channels(ctx["current"], job.layers, config.n, job.plant_seed, init=config.init)
    try:
        trained, _ = train(candidate, ctx["train"], config.train.with_(seed=job.train_seed),
                           teacher_logits=ctx["train_logits"])
        loss = selection_loss(trained, ctx["val"], config.lambda_select, teacher_logits=ctx["val_logits"])
    except NonFiniteError as exc:
        logger.warning("candidate group %d diverged: %s", job.group_index, exc)
        return job.group_index, math.inf, None
    if not math.isfinite(loss):
        return job.group_index, math.inf, None
    return job.group_index, loss, trained


def _run_jobs(jobs: list[_Job], workers: int):
    if workers <= 1 or len(jobs) <= 1:
        return [_evaluate_candidate(j) for j in jobs]
    ctx = mp.get_context("fork")
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs)), mp_context=ctx) as pool:
        return list(pool.map(_evaluate_candidate, jobs))


STATE_MAGIC = b"PLSS"
STATE_VERSION = 1


def save_state(state: SearchState, directory, config: SearchConfig) -> Path:
    """Write ``state.bin`` (magic, version, JSON body) plus CSV/JSON step logs.

    The current network is stored separately as ``net_step{k}.plnt`` and
    referenced from the state by file name.
    """
    directory = Path(directory)
    step = len(state.step_log)
    net_name = f"net_step{step:03d}.plnt"
    save_network(state.current, directory / net_name)
    body = json.dumps({
        "current": net_name,
        "current_loss": state.current_loss,
        "initial_loss": state.initial_loss,
        "finished": state.finished,
        "config": config.to_dict(),
        "step_log": state.log_rows(),
    }, sort_keys=True).encode("utf-8")
    atomic_write_bytes(directory / "state.bin", STATE_MAGIC + struct.pack("<II", STATE_VERSION, len(body)) + body)
    atomic_write_text(directory / "steps.json", json.dumps(state.log_rows(), indent=2, sort_keys=True) + "\n")
    atomic_write_text(directory / "steps.csv", state.to_csv())
    return directory / "state.bin"


def load_state(directory) -> tuple[SearchState, dict]:
    directory = Path(directory)
    raw = (directory / "state.bin").read_bytes()
    if raw[:4] != STATE_MAGIC:
        raise ValueError("not a search state file")
    version, length = struct.unpack("<II", raw[4:12])
    if version != STATE_VERSION:
        raise ValueError(f"unsupported search state version {version}")
    body = json.loads(raw[12:12 + length].decode("utf-8"))
    net, _ = load_network(directory / body["current"])
    state = SearchState(net, float(body["current_loss"]), float(body["initial_loss"]),
                        [StepRecord.from_dict(r) for r in body["step_log"]], bool(body["finished"]))
    return state, body["config"]


def run_planting(initial: PlantableNetwork, teacher: PlantableNetwork, train_data: LabeledDataset,
                 val_data: LabeledDataset, config: SearchConfig, checkpoint_dir=None,
                 resume: bool = False, stop_after: Optional[int] = None) -> tuple[PlantableNetwork, SearchState]:
    """Grow ``initial`` by planting until no candidate lowers the selection loss.

    ``checkpoint_dir`` enables per-step state checkpoints; with ``resume`` an
    existing state there is picked up. ``stop_after`` ends this call after
    that many steps without marking the search finished (used to simulate an
    interruption).
    """
    if teacher.spec.input_shape != initial.spec.input_shape:
        raise ValueError("teacher and initial network input dims differ")
    if teacher.spec.num_classes != initial.spec.num_classes:
        raise ValueError("teacher and initial network class counts differ")

    need_logits = config.train.lam < 1 or config.lambda_select < 1
    train_logits = predict_logits(teacher, train_data.images) if config.train.lam < 1 else None
    val_logits = predict_logits(teacher, val_data.images) if need_logits else None

    state = None
    if checkpoint_dir is not None and resume and (Path(checkpoint_dir) / "state.bin").exists():
        state, saved = load_state(checkpoint_dir)
        ignore = {"workers"}
        if {k: v for k, v in saved.items() if k not in ignore} != \
                {k: v for k, v in config.to_dict().items() if k not in ignore}:
            raise ValueError("checkpointed search was run with a different configuration")
    if state is None:
        loss0 = selection_loss(initial, val_data, config.lambda_select, teacher_logits=val_logits)
        state = SearchState(initial.copy(), loss0, loss0)
        if checkpoint_dir is not None:
            save_state(state, checkpoint_dir, config)

    partition = group_partition(N_CONV, config.groups)
    steps_this_call = 0
    while not state.finished:
        step = len(state.step_log)
        if step >= config.max_steps:
            state.finished = True
            break
        if stop_after is not None and steps_this_call >= stop_after:
            break
        chosen_groups = select_candidates(config.groups, config.candidate_mode, config.seed, step, config.random_k)
        jobs = [_Job(g, partition[g], derive_seed(config.seed, step, g, 0), derive_seed(config.seed, step, g, 1))
                for g in chosen_groups]
        _CONTEXT.update(config=config, current=state.current, train=train_data, val=val_data,
                        train_logits=train_logits, val_logits=val_logits)
        try:
            results = _run_jobs(jobs, config.workers)
        finally:
            _CONTEXT.clear()

        losses = {g: loss for g, loss, _ in results}
        best_g, best_loss, best_net = min(results, key=lambda r: (r[1], r[0]))
        accepted = best_net is not None and best_loss < state.current_loss
        if accepted:
            state.current = best_net
            state.current_loss = best_loss
        state.step_log.append(StepRecord(
            step=step, groups=chosen_groups, val_losses=losses,
            chosen=best_g if best_net is not None else None, accepted=accepted,
            channels=list(state.current.channels.conv_channels), param_count=param_count(state.current),
            val_loss=best_loss,
        ))
        logger.info("step %d: losses %s -> %s", step, losses, "accept g=%d" % best_g if accepted else "stop")
        if not accepted:
            state.finished = True
        steps_this_call += 1
        if checkpoint_dir is not None:
            save_state(state, checkpoint_dir, config)
    if checkpoint_dir is not None:
        save_state(state, checkpoint_dir, config)
    return state.current, state
