"""The evaluation adversary.

A joint model chains the defended edge half, which stays frozen, with an
attacker head whose parameters are the only trainable ones.  Two reference
points come with it: an unconstrained model trained end to end on raw inputs
(the best baseline) and random guessing.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .defense import Defense, apply_defense, defense_digest, edge_activations
from .errors import FrozenEdgeViolation, ShapeError
from .modelgraph import ModelGraph, ParamStore, TensorSpec, build_model, init_params, linear, predict
from .splitter import SplitModel
from .trainer import TrainConfig, TrainReport, _xy, train

HEAD_ARCHS = ("cloud_clone", "mlp")


@dataclass
class AttackerHead:
    graph: ModelGraph
    params: ParamStore
    arch: str


@dataclass
class JointModel:
    split: SplitModel
    defense: Defense
    head: AttackerHead
    last_report: TrainReport | None = None

    @property
    def trainable_mask(self) -> list[str]:
        return self.head.graph.trainable_names()


@dataclass
class AttackResult:
    accuracy_a: float
    accuracy_a_prime: float
    accuracy_r: float
    head_arch: str
    train_configs: dict = field(default_factory=dict)


def build_head(arch: str, split: SplitModel, num_classes: int, seed: int = 0, init: str = "fresh") -> AttackerHead:
    """Attacker head reading the cut activation.

    ``cloud_clone`` mirrors the cloud half with a task-sized output layer;
    with ``init="cloud"`` it starts from the cloud half's weights wherever the
    shapes agree.  ``mlp`` is a small flatten-linear-relu-linear head.
    """
    spec = split.interface_spec
    if arch == "mlp":
        graph, params = build_model("mlp", spec, num_classes, seed)
        return AttackerHead(graph, params, arch)
    if arch != "cloud_clone":
        raise ValueError(f"unknown head architecture {arch!r}; choose from {HEAD_ARCHS}")
    layers = list(split.cloud.layers)
    last = layers[-1]
    if last.kind != "linear":
        raise ShapeError("cloud half does not end in a linear layer")
    layers[-1] = linear(last.name, last.hyperparams["in_features"], num_classes)
    graph = ModelGraph(tuple(layers), spec, num_classes)
    params = init_params(graph, seed, split.cloud_params.dtype.name)
    if init == "cloud":
        for name, arr in split.cloud_params.tensors.items():
            if name in params and params[name].shape == arr.shape:
                params.tensors[name] = arr.copy()
    elif init != "fresh":
        raise ValueError("init must be 'fresh' or 'cloud'")
    return AttackerHead(graph, params, arch)


def build_joint(split: SplitModel, defense: Defense, head: AttackerHead) -> JointModel:
    if head.graph.input_spec.shape != split.interface_spec.shape:
        raise ShapeError(f"head expects {head.graph.input_spec.shape}, cut transmits {split.interface_spec.shape}")
    if defense.bank.interface_shape != split.interface_spec.shape:
        raise ShapeError("defense does not match the cut interface")
    return JointModel(split, defense, head)


def joint_forward(joint: JointModel, x: np.ndarray, seed: int = 0) -> np.ndarray:
    a = apply_defense(joint.defense, edge_activations(joint.split, x), seed)
    return predict(joint.head.graph, joint.head.params, a)


def edge_digest(joint: JointModel) -> str:
    """Hash of the frozen side: edge parameters plus the noise bank."""
    h = hashlib.sha256(joint.split.edge_params.digest().encode())
    h.update(defense_digest(joint.defense).encode())
    return h.hexdigest()


def train_attack(joint: JointModel, attacker_train, attacker_val, config: TrainConfig) -> float:
    """Fine-tune the head on defended activations; returns the best validation accuracy.

    The edge runs once in eval mode; fresh defense noise is drawn for every
    training batch.  Raises FrozenEdgeViolation if the edge or bank changed.
    """
    before = edge_digest(joint)
    x, y = _xy(attacker_train)
    xv, yv = _xy(attacker_val)
    a_train = edge_activations(joint.split, x)
    a_val = edge_activations(joint.split, xv)

    def defend(batch, seed):
        return apply_defense(joint.defense, batch, seed)

    report = train(joint.head.graph, joint.head.params, (a_train, y), config,
                   trainable_mask=joint.trainable_mask, val_set=(a_val, yv), transform=defend)
    if edge_digest(joint) != before:
        raise FrozenEdgeViolation("edge parameters or noise bank changed during the attack")
    joint.last_report = report
    return report.best_val_accuracy


def train_best_baseline(arch: str, input_spec: TensorSpec, attacker_train, attacker_val, config: TrainConfig,
                        num_classes: int = 2, seed: int = 0) -> float:
    """Unconstrained reference: the full architecture trained end to end on raw inputs."""
    graph, params = build_model(arch, input_spec, num_classes, seed)
    if config.epochs == 0:
        from .trainer import evaluate

        return evaluate(graph, params, attacker_val)
    report = train(graph, params, attacker_train, config, val_set=attacker_val)
    return report.best_val_accuracy


def random_baseline(dataset, mode: str = "uniform", seed: int = 0, num_classes: int | None = None) -> float:
    """Accuracy of random outputs: analytic 1/C, or scored seeded uniform guesses."""
    if hasattr(dataset, "task"):
        labels, c = dataset.labels, num_classes or dataset.task.num_classes
    else:
        labels = np.asarray(dataset[1] if isinstance(dataset, tuple) else dataset)
        c = num_classes or int(labels.max()) + 1
    if len(labels) == 0:
        raise ValueError("empty dataset")
    if mode == "uniform":
        return 1.0 / c
    if mode == "empirical":
        guesses = np.random.default_rng(seed).integers(0, c, len(labels))
        return float(np.mean(guesses == labels))
    raise ValueError(f"unknown mode {mode!r}")
