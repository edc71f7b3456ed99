"""Minibatch SGD with momentum, coupled weight decay and step LR schedules.

Frozen entries (see ``PlantableNetwork.frozen``) are never written: the
update is computed for the whole tensor and then merged back with
``np.where(frozen, old, new)``, so frozen values stay bitwise identical.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .data import LabeledDataset, batches
from .distill import KL_FORMS, combined_loss
from .gradcore import GradTape, NonFiniteError
from .model import PlantableNetwork, forward

logger = logging.getLogger(__name__)

__all__ = [
    "EpochLog",
    "EpochRecord",
    "OptimizerState",
    "TrainConfig",
    "evaluate",
    "lr_at_epoch",
    "predict_logits",
    "sgd_step",
    "stl_milestones",
    "train",
]


def stl_milestones(epochs: int) -> tuple[int, ...]:
    """Decay points for the "x0.1 every epochs/3" schedule: floor(E/3) and 2*floor(E/3)."""
    third = epochs // 3
    return tuple(m for m in (third, 2 * third) if 0 < m < epochs)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    epochs: int = 150
    milestones: tuple[int, ...] = (40, 80, 120)
    lr_factor: float = 0.2
    seed: int = 0
    # 1.0 = plain cross-entropy; < 1 mixes in KL against a teacher
    lam: float = 1.0
    kl_form: str = "standard"

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not 0 < self.lr_factor <= 1:
            raise ValueError("lr_factor must lie in (0, 1]")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if not 0 <= self.lam <= 1:
            raise ValueError("lam must lie in [0, 1]")
        if self.kl_form not in KL_FORMS:
            raise ValueError(f"kl_form must be one of {KL_FORMS}")

    @property
    def loss_name(self) -> str:
        return "CELoss" if self.lam == 1.0 else "KLLoss"

    def with_(self, **changes) -> "TrainConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: (tuple(v) if k == "milestones" else v) for k, v in d.items()})


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    """``base_lr * factor ** (number of milestones <= epoch)``."""
    passed = sum(1 for m in config.milestones if m <= epoch)
    return config.learning_rate * config.lr_factor ** passed


@dataclass
class OptimizerState:
    """Momentum buffers, one per parameter tensor that has any trainable entry."""

    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_network(cls, net: PlantableNetwork) -> "OptimizerState":
        return cls({k: np.zeros(p.shape) for k, p in net.params.items() if not net.frozen[k].all()})


def sgd_step(net: PlantableNetwork, grads: dict[str, np.ndarray], state: OptimizerState, lr: float,
             config: TrainConfig) -> None:
    """In-place classical-momentum step on the trainable entries of ``net``.

    ``g' = g + wd * w``; ``v = mu * v + g'``; ``w = w - lr * v``.
    """
    for name, v in state.buffers.items():
        p = net.params[name]
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        frozen = net.frozen[name]
        g_total = np.where(frozen, 0.0, g + config.weight_decay * p.value)
        v *= config.momentum
        v += g_total
        p.value = np.where(frozen, p.value, p.value - lr * v)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


class EpochLog(list):
    FIELDS = ("epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.FIELDS)
        for r in self:
            writer.writerow([r.epoch, repr(r.lr), repr(r.train_loss), repr(r.train_acc),
                             repr(r.val_loss), repr(r.val_acc)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "EpochLog":
        rows = csv.DictReader(io.StringIO(text))
        return cls(EpochRecord(int(r["epoch"]), *(float(r[k]) for k in cls.FIELDS[1:])) for r in rows)


def predict_logits(net: PlantableNetwork, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Forward-only logits for a whole array, evaluated in fixed-size chunks."""
    out = [forward(net, images[i:i + batch_size]).value for i in range(0, len(images), batch_size)]
    return np.concatenate(out, axis=0)


def evaluate(net: PlantableNetwork, data: LabeledDataset, lam: float = 1.0,
             teacher_logits: Optional[np.ndarray] = None, batch_size: int = 256,
             kl_form: str = "standard") -> tuple[float, float]:
    """Sample-weighted mean loss and accuracy (fraction) over ``data``."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    total_loss = 0.0
    correct = 0
    for i in range(0, len(data), batch_size):
        x = data.images[i:i + batch_size]
        y = data.labels[i:i + batch_size]
        logits = forward(net, x)
        t = None if teacher_logits is None else teacher_logits[i:i + batch_size]
        loss = combined_loss(logits, t, y, lam, kl_form)
        total_loss += loss.item() * len(y)
        correct += int((logits.value.argmax(axis=1) == y).sum())
    return total_loss / len(data), correct / len(data)


def train(net: PlantableNetwork, data: LabeledDataset, config: TrainConfig,
          teacher: Optional[PlantableNetwork] = None, val: Optional[LabeledDataset] = None,
          teacher_logits: Optional[np.ndarray] = None,
          val_teacher_logits: Optional[np.ndarray] = None) -> tuple[PlantableNetwork, EpochLog]:
    """Train a private copy of ``net``; the input network is left untouched.

    The teacher, when needed (``config.lam < 1``), is only ever run forward;
    its logits can be passed precomputed to avoid re-evaluating it.
    """
    if len(data) == 0:
        raise ValueError("training set is empty")
    needs_teacher = config.lam < 1.0
    if needs_teacher:
        if teacher is None and teacher_logits is None:
            raise ValueError("a teacher is required for distillation (lam < 1)")
        if teacher is not None and teacher.spec.input_shape != net.spec.input_shape:
            raise ValueError("teacher and student input dims differ")
        if teacher_logits is None:
            teacher_logits = predict_logits(teacher, data.images)
        if val is not None and val_teacher_logits is None:
            if teacher is None:
                raise ValueError("validation teacher logits are required without a teacher network")
            val_teacher_logits = predict_logits(teacher, val.images)
    else:
        teacher_logits = val_teacher_logits = None

    net = net.copy()
    state = OptimizerState.for_network(net)
    params = net.params
    log = EpochLog()
    epoch_rng = np.random.SeedSequence(config.seed)
    epoch_seeds = epoch_rng.generate_state(max(config.epochs, 1))
    for epoch in range(config.epochs):
        lr = lr_at_epoch(config, epoch)
        loss_sum = 0.0
        correct = 0
        for idx in batches(len(data), config.batch_size, int(epoch_seeds[epoch])):
            x = data.images[idx]
            y = data.labels[idx]
            t = None if teacher_logits is None else teacher_logits[idx]
            net.zero_grad()
            with GradTape() as tape:
                logits = forward(net, x)
                loss = combined_loss(logits, t, y, config.lam, config.kl_form)
            tape.backward(loss)
            sgd_step(net, {k: p.grad for k, p in params.items()}, state, lr, config)
            loss_sum += loss.item() * len(idx)
            correct += int((logits.value.argmax(axis=1) == y).sum())
        train_loss = loss_sum / len(data)
        if not np.isfinite(train_loss):
            raise NonFiniteError(f"training loss diverged at epoch {epoch}")
        if val is not None and len(val):
            val_loss, val_acc = evaluate(net, val, config.lam, val_teacher_logits, kl_form=config.kl_form)
        else:
            val_loss = val_acc = float("nan")
        log.append(EpochRecord(epoch, lr, train_loss, correct / len(data), val_loss, val_acc))
        logger.debug("epoch %d lr %.3g train %.4f/%.3f val %.4f/%.3f",
                     epoch, lr, train_loss, correct / len(data), val_loss, val_acc)
    return net, log
