"""Loss functions: label-smoothed cross-entropy and squared error.

Each loss has a numpy reference (with an analytic gradient for the
cross-entropy) and a torch twin used inside :func:`modelgraph.loss_and_grads`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import NumericError


@dataclass(frozen=True)
class LossSpec:
    kind: str = "ce"  # "ce" (label-smoothed cross-entropy) or "mse"
    epsilon: float = 0.1

    def __post_init__(self):
        if self.kind not in ("ce", "mse"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if not 0.0 <= self.epsilon < 1.0:
            raise ValueError("epsilon must lie in [0, 1)")


def smoothed_targets(targets: np.ndarray, num_classes: int, epsilon: float) -> np.ndarray:
    """q = (1 - eps) * onehot + eps / C."""
    q = np.full((len(targets), num_classes), epsilon / num_classes)
    q[np.arange(len(targets)), targets] += 1.0 - epsilon
    return q


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _check(logits, targets):
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ValueError(f"logits must be (batch, C >= 2), got {logits.shape}")
    if targets.shape != (logits.shape[0],) or targets.min() < 0 or targets.max() >= logits.shape[1]:
        raise ValueError("targets must be class indices in [0, C)")
    if not np.isfinite(logits).all():
        raise NumericError("non-finite logits")
    return logits, targets


def label_smoothed_ce(logits, targets, epsilon: float = 0.1) -> float:
    """Batch mean of -sum_k q_k log softmax(logits)_k."""
    logits, targets = _check(logits, targets)
    q = smoothed_targets(targets, logits.shape[1], epsilon)
    return float(-(q * _log_softmax(logits)).sum(axis=1).mean())


def label_smoothed_ce_grad(logits, targets, epsilon: float = 0.1) -> np.ndarray:
    """Gradient of :func:`label_smoothed_ce` with respect to the logits."""
    logits, targets = _check(logits, targets)
    q = smoothed_targets(targets, logits.shape[1], epsilon)
    return (np.exp(_log_softmax(logits)) - q) / logits.shape[0]


def torch_loss(output: torch.Tensor, targets, spec: LossSpec) -> torch.Tensor:
    if spec.kind == "mse":
        y = torch.as_tensor(np.asarray(targets), dtype=output.dtype)
        return 0.5 * ((output - y) ** 2).sum(dim=tuple(range(1, output.ndim))).mean()
    y = torch.as_tensor(np.asarray(targets, dtype=np.int64))
    logp = torch.log_softmax(output, dim=1)
    c = output.shape[1]
    nll = -logp.gather(1, y[:, None]).squeeze(1)
    uniform = -logp.sum(dim=1) / c
    return ((1.0 - spec.epsilon) * nll + spec.epsilon * uniform).mean()
