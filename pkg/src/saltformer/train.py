"""Phased-batch training loop with per-phase early stopping."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, NonFiniteError, TrainingError
from .jets import Dataset
from .model import Model, forward, logits_to_scores, loss_fn

log = logging.getLogger(__name__)

DEFAULT_PHASES = ((128, 200), (256, 200), (512, 200), (1024, 200), (2048, 200), (4096, 400))


@dataclass
class TrainSchedule:
    phases: tuple[tuple[int, int], ...] = DEFAULT_PHASES
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 40
    eval_batch: int = 2048

    def __post_init__(self):
        self.phases = tuple((int(b), int(e)) for b, e in self.phases)
        self.validate()

    def validate(self) -> None:
        sizes = [b for b, _ in self.phases]
        if any(b < 1 for b in sizes):
            raise ConfigError(f"batch sizes must be positive, got {sizes}")
        if any(b2 < b1 for b1, b2 in zip(sizes, sizes[1:])):
            raise ConfigError(f"batch sizes must be non-decreasing, got {sizes}")
        if any(e < 0 for _, e in self.phases):
            raise ConfigError("epoch counts must be non-negative")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")

    @property
    def total_epochs(self) -> int:
        return sum(e for _, e in self.phases)


@dataclass
class EpochRecord:
    epoch: int
    phase: int
    batch_size: int
    train_loss: float
    val_loss: float
    val_acc: float


@dataclass
class History:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    best_val_loss: float = float("inf")

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.records]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "phase", "batch_size", "train_loss", "val_loss", "val_acc"])
            for r in self.records:
                row = asdict(r)
                w.writerow([r.epoch, r.phase, r.batch_size] + [repr(row[k]) for k in ("train_loss", "val_loss", "val_acc")])


def evaluate_loss(model: Model, data: Dataset, batch: int = 2048) -> tuple[float, float]:
    """Mean loss and accuracy over ``data`` without recording a tape."""
    cfg = model.config
    total = 0.0
    correct = 0
    with T.no_grad():
        for i in range(0, len(data), batch):
            xb, yb = data.x[i:i + batch], data.y[i:i + batch]
            logits = forward(model, xb)
            total += loss_fn(cfg, logits, yb).item() * len(yb)
            correct += int((logits_to_scores(cfg, logits.data).argmax(axis=1) == yb).sum())
    return total / len(data), correct / len(data)


def train(model: Model, train_set: Dataset, val_set: Dataset, schedule: TrainSchedule | None = None,
          seed: int = 0) -> tuple[Model, History]:
    """Minibatch Adam over the phased schedule; the best-validation weights are restored at the end."""
    schedule = schedule or TrainSchedule()
    if len(train_set) == 0 or len(val_set) == 0:
        raise ConfigError("training and validation sets must be non-empty")
    cfg = model.config
    rng = np.random.default_rng(seed)
    params = model.parameters()
    opt = T.AdamState(lr=schedule.lr, beta1=schedule.beta1, beta2=schedule.beta2, eps=schedule.eps)
    history = History()
    best_state = None
    x_all = train_set.x.astype(cfg.np_dtype, copy=False)
    epoch = 0
    for phase, (batch_size, max_epochs) in enumerate(schedule.phases):
        phase_best = float("inf")
        stale = 0
        for _ in range(max_epochs):
            order = rng.permutation(len(train_set))
            running = 0.0
            try:
                for start in range(0, len(order), batch_size):
                    idx = order[start:start + batch_size]
                    model.zero_grad()
                    loss = loss_fn(cfg, forward(model, x_all[idx]), train_set.y[idx])
                    T.backward(loss)
                    T.adam_step(params, [p.grad for p in params], opt)
                    running += loss.item() * len(idx)
                val_loss, val_acc = evaluate_loss(model, val_set, schedule.eval_batch)
            except NonFiniteError as exc:
                raise TrainingError(f"non-finite values at epoch {epoch}: {exc}") from None
            train_loss = running / len(order)
            if not np.isfinite(train_loss) or not np.isfinite(val_loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            history.records.append(EpochRecord(epoch, phase, batch_size, train_loss, val_loss, val_acc))
            log.info("epoch %d phase %d bs %d train %.4f val %.4f acc %.4f",
                     epoch, phase, batch_size, train_loss, val_loss, val_acc)
            if val_loss < history.best_val_loss:
                history.best_val_loss = val_loss
                history.best_epoch = epoch
                best_state = model.state()
            epoch += 1
            if val_loss < phase_best:
                phase_best = val_loss
                stale = 0
            else:
                stale += 1
                if stale >= schedule.patience:
                    break
    if best_state is not None:
        model.load_state(best_state)
    return model, history
