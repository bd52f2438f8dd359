"""SGD with momentum and weight decay, label-smoothed cross-entropy, step LR decay."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .errors import NumericError, TrainingError
from .losses import LossSpec, label_smoothed_ce, label_smoothed_ce_grad  # noqa: F401  (re-export)
from .modelgraph import ModelGraph, ParamStore, loss_and_grads, predict

log = logging.getLogger(__name__)

Transform = Callable[[np.ndarray, int], np.ndarray]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 3e-5
    epsilon: float = 0.1
    epochs: int = 10
    batch_size: int = 64
    milestones: tuple[float, ...] = (0.5, 0.75)
    lr_factor: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if not 0 <= self.epsilon < 1:
            raise ValueError("epsilon must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        object.__setattr__(self, "milestones", tuple(float(m) for m in self.milestones))


@dataclass
class TrainReport:
    final_train_loss: float = float("nan")
    best_val_accuracy: float = float("nan")
    epoch_log: list[dict] = field(default_factory=list)


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    """lr0 * factor**(number of milestones reached); epochs are 0-based."""
    passed = sum(1 for m in config.milestones if epoch >= int(m * config.epochs))
    return config.lr * config.lr_factor ** passed


def sgd_step(params: ParamStore, grads: dict[str, np.ndarray], velocity: dict[str, np.ndarray],
             config: TrainConfig, lr: float | None = None) -> tuple[ParamStore, dict[str, np.ndarray]]:
    """Heavy-ball update, in place: v <- m*v + (g + wd*theta); theta <- theta - lr*v."""
    lr = config.lr if lr is None else lr
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name}; step refused")
    for name, g in grads.items():
        theta = params.tensors[name]
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(theta)
        v *= config.momentum
        v += g + config.weight_decay * theta
        theta -= (lr * v).astype(theta.dtype, copy=False)
    return params, velocity


def _xy(dataset) -> tuple[np.ndarray, np.ndarray]:
    if hasattr(dataset, "features"):
        return dataset.features(), dataset.labels
    x, y = dataset
    return np.asarray(x), np.asarray(y)


def accuracy_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("empty dataset")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def evaluate(graph: ModelGraph, params: ParamStore, dataset, transform: Transform | None = None,
             seed: int = 0, batch_size: int = 512) -> float:
    """Top-1 accuracy in eval mode."""
    x, y = _xy(dataset)
    if len(y) == 0:
        raise ValueError("empty dataset")
    if transform is not None:
        x = transform(x, seed)
    return accuracy_from_logits(predict(graph, params, x, batch_size), y)


def train(graph: ModelGraph, params: ParamStore, dataset, config: TrainConfig,
          trainable_mask: Iterable[str] | None = None, val_set=None,
          transform: Transform | None = None) -> TrainReport:
    """Train in place and keep the parameters from the best validation epoch.

    ``transform(x_batch, seed)`` is applied to every training batch (and to
    the validation inputs with a fixed seed); the joint-model attack uses it
    to inject fresh defense noise.
    """
    mask = set(graph.trainable_names() if trainable_mask is None else trainable_mask)
    x, y = _xy(dataset)
    report = TrainReport()
    if config.epochs == 0:
        return report
    if val_set is not None:
        xv, yv = _xy(val_set)
        if transform is not None:
            xv = transform(xv, config.seed)
    loss_spec = LossSpec("ce", config.epsilon)
    rng = np.random.default_rng(config.seed)
    velocity: dict[str, np.ndarray] = {}
    best_acc, best = -1.0, None
    step = 0
    for epoch in range(config.epochs):
        lr = lr_at_epoch(config, epoch)
        order = rng.permutation(len(y))
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            xb = x[idx]
            if transform is not None:
                xb = transform(xb, config.seed * 1_000_003 + step)
            try:
                loss, grads = loss_and_grads(graph, params, (xb, y[idx]), loss_spec, mask)
                sgd_step(params, grads, velocity, config, lr)
            except NumericError as exc:
                raise TrainingError(f"diverged at epoch {epoch}: {exc}", report.epoch_log) from exc
            total += loss * len(idx)
            count += len(idx)
            step += 1
        mean_loss = total / count
        if val_set is not None:
            acc = accuracy_from_logits(predict(graph, params, xv), yv)
        else:
            acc = evaluate(graph, params, (x, y))
        report.epoch_log.append({"epoch": epoch, "loss": mean_loss, "accuracy": acc, "lr": lr})
        log.debug("epoch %d loss %.4f acc %.4f lr %.4g", epoch, mean_loss, acc, lr)
        if acc > best_acc:
            best_acc = acc
            best = {n: params.tensors[n].copy() for n in params.tensors}
    report.final_train_loss = report.epoch_log[-1]["loss"]
    report.best_val_accuracy = best_acc
    if best is not None:
        for n, arr in best.items():
            params.tensors[n][...] = arr
    return report
