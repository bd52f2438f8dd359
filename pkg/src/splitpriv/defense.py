"""Additive-noise defenses on the transmitted activation.

Two strategies perturb the activation at the cut, after the cut group's
relu/pool: Gaussian noise whose scale is calibrated against a private-accuracy
target, and a bank of K trained noise tensors (one drawn per sample).
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .checkpoint import read_container, write_container
from .errors import CalibrationError, NumericError, ShapeError, TrainingError
from .losses import LossSpec, torch_loss
from .modelgraph import ParamStore, predict, run_torch
from .splitter import SplitModel
from .trainer import TrainConfig, _xy, accuracy_from_logits, sgd_step

STRATEGIES = ("calibrated_gaussian", "learned_bank", "none")


@dataclass(frozen=True)
class DefenseConfig:
    strategy: str = "calibrated_gaussian"
    pa_target: float = 0.95
    bank_size: int = 8
    lam: float = 0.1  # reward weight on mean |noise| for the learned bank
    seed: int = 0
    epochs: int = 5
    lr: float = 0.01
    batch_size: int = 64
    init_scale: float = 0.1  # initial bank magnitude, in units of the activation std
    epsilon: float = 0.1

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if not 0 < self.pa_target <= 1:
            raise ValueError("pa_target must lie in (0, 1]")
        if self.strategy == "learned_bank" and self.bank_size < 1:
            raise ValueError("bank_size must be >= 1")


@dataclass
class NoiseBank:
    interface_shape: tuple[int, ...]
    sigma: float = 0.0
    tensors: np.ndarray | None = None  # (K, *interface_shape) for the learned bank

    def __post_init__(self):
        self.interface_shape = tuple(self.interface_shape)
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.tensors is not None:
            if tuple(self.tensors.shape[1:]) != self.interface_shape:
                raise ShapeError(f"bank tensors {self.tensors.shape} do not match {self.interface_shape}")
            if not np.isfinite(self.tensors).all():
                raise NumericError("non-finite noise tensor")

    @property
    def size(self) -> int:
        return 0 if self.tensors is None else len(self.tensors)


@dataclass
class Defense:
    config: DefenseConfig
    bank: NoiseBank
    calibration: "CalibrationResult | None" = None


@dataclass(frozen=True)
class CalibrationResult:
    sigma: float
    achieved_accuracy_u_prime: float
    achieved_pa: float
    baseline_accuracy: float
    iterations: int


def no_defense(interface_shape) -> Defense:
    return Defense(DefenseConfig(strategy="none"), NoiseBank(tuple(interface_shape)))


def gaussian_defense(interface_shape, sigma: float, config: DefenseConfig | None = None) -> Defense:
    cfg = config or DefenseConfig(strategy="calibrated_gaussian")
    return Defense(cfg, NoiseBank(tuple(interface_shape), float(sigma)))


def apply_defense(defense: Defense, a: np.ndarray, seed: int) -> np.ndarray:
    """a' = a + n; deterministic for a given seed.  Strategy ``none`` returns ``a`` itself."""
    if tuple(a.shape[1:]) != defense.bank.interface_shape:
        raise ShapeError(f"activation shape {a.shape[1:]} != interface {defense.bank.interface_shape}")
    strategy = defense.config.strategy
    if strategy == "none":
        return a
    rng = np.random.default_rng(seed)
    if strategy == "calibrated_gaussian":
        if defense.bank.sigma == 0:
            return a
        noise = rng.standard_normal(a.shape) * defense.bank.sigma
        return (a + noise).astype(a.dtype, copy=False)
    if defense.bank.tensors is None:
        raise ValueError("learned_bank defense has no trained tensors")
    picks = rng.integers(0, defense.bank.size, len(a))
    return (a + defense.bank.tensors[picks]).astype(a.dtype, copy=False)


def edge_activations(split: SplitModel, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
    return predict(split.edge, split.edge_params, x, batch_size)


def calibrate_gaussian(split: SplitModel, eval_set, pa_target: float, seed: int, depth: int = 20,
                       sigma_max_factor: float = 10.0) -> CalibrationResult:
    """Bisection for the largest sigma whose noisy accuracy keeps PA >= pa_target.

    Every probe reuses one seeded standard-normal draw (common random numbers),
    so PA is close to monotone in sigma; a probe that breaks the bracket is
    re-scored as the mean over three fresh draws.
    """
    x, y = _xy(eval_set)
    a = edge_activations(split, x)
    base = accuracy_from_logits(predict(split.cloud, split.cloud_params, a), y)
    if base == 0:
        raise CalibrationError("user model has zero accuracy; PA undefined")
    z = np.random.default_rng(seed).standard_normal(a.shape).astype(a.dtype)

    def acc_at(sigma, draw=None):
        noise = z if draw is None else draw
        return accuracy_from_logits(predict(split.cloud, split.cloud_params, a + sigma * noise), y)

    def resampled(sigma):
        rng = np.random.default_rng([seed, 1])
        return float(np.mean([acc_at(sigma, rng.standard_normal(a.shape).astype(a.dtype)) for _ in range(3)]))

    sigma_max = sigma_max_factor * float(a.std())
    iterations = 1
    acc_hi = acc_at(sigma_max)
    if acc_hi / base >= pa_target:
        return CalibrationResult(sigma_max, acc_hi, acc_hi / base, base, iterations)
    lo, hi, acc_lo = 0.0, sigma_max, base
    for _ in range(depth):
        mid = 0.5 * (lo + hi)
        acc = acc_at(mid)
        iterations += 1
        if acc > acc_lo or acc < acc_hi:
            acc = resampled(mid)
        if acc / base >= pa_target:
            lo, acc_lo = mid, acc
        else:
            hi, acc_hi = mid, acc
    final = acc_at(lo)
    return CalibrationResult(lo, final, final / base, base, iterations)


def train_noise_bank(split: SplitModel, train_set, config: DefenseConfig) -> NoiseBank:
    """Train K additive noise tensors against a frozen cloud half.

    Objective per batch: label-smoothed CE of cloud(a + n_k) minus
    ``lam * mean|n|`` over the whole bank; each sample draws k uniformly.
    """
    if config.strategy != "learned_bank":
        raise ValueError("train_noise_bank needs strategy 'learned_bank'")
    x, y = _xy(train_set)
    a = edge_activations(split, x)
    rng = np.random.default_rng(config.seed)
    shape = a.shape[1:]
    scale = config.init_scale * float(a.std())
    store = ParamStore({"noise": (rng.standard_normal((config.bank_size,) + shape) * scale).astype(a.dtype)})
    opt = TrainConfig(lr=config.lr, momentum=0.9, weight_decay=0.0, epsilon=config.epsilon, seed=config.seed)
    cloud_t = {k: torch.from_numpy(v) for k, v in split.cloud_params.tensors.items()}
    spec = LossSpec("ce", config.epsilon)
    velocity: dict = {}
    for epoch in range(config.epochs):
        order = rng.permutation(len(y))
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            picks = torch.from_numpy(rng.integers(0, config.bank_size, len(idx)))
            noise = torch.from_numpy(store["noise"]).clone().requires_grad_(True)
            try:
                out = run_torch(split.cloud, cloud_t, torch.from_numpy(a[idx]) + noise[picks], "eval")
            except NumericError as exc:
                raise TrainingError(f"noise bank diverged at epoch {epoch}: {exc}") from exc
            loss = torch_loss(out[-1], y[idx], spec) - config.lam * noise.abs().mean()
            if not bool(torch.isfinite(loss)):
                raise TrainingError(f"noise bank diverged at epoch {epoch}: non-finite loss")
            (g,) = torch.autograd.grad(loss, [noise])
            try:
                sgd_step(store, {"noise": g.numpy()}, velocity, opt)
            except NumericError as exc:
                raise TrainingError(str(exc)) from exc
    return NoiseBank(shape, 0.0, store["noise"].copy())


def build_defense(split: SplitModel, config: DefenseConfig, calib_set=None, train_set=None) -> Defense:
    """Produce a ready Defense for a split according to ``config.strategy``."""
    shape = split.interface_spec.shape
    if config.strategy == "none":
        return Defense(config, NoiseBank(shape))
    if config.strategy == "calibrated_gaussian":
        result = calibrate_gaussian(split, calib_set, config.pa_target, config.seed)
        return Defense(config, NoiseBank(shape, result.sigma), result)
    return Defense(config, train_noise_bank(split, train_set, config))


def save_defense(defense: Defense, path, extra_meta: dict | None = None) -> None:
    tensors = {}
    if defense.bank.tensors is not None:
        tensors = {f"defense.noise.{k}": t for k, t in enumerate(defense.bank.tensors)}
    meta = {"defense": {"config": asdict(defense.config), "sigma": defense.bank.sigma,
                        "interface_shape": list(defense.bank.interface_shape),
                        "calibration": asdict(defense.calibration) if defense.calibration else None}}
    meta.update(extra_meta or {})
    write_container(path, tensors, meta)


def load_defense(path, with_meta: bool = False):
    tensors, meta = read_container(path)
    d = meta["defense"]
    stack = None
    if tensors:
        stack = np.stack([tensors[f"defense.noise.{k}"] for k in range(len(tensors))])
    calib = CalibrationResult(**d["calibration"]) if d.get("calibration") else None
    defense = Defense(DefenseConfig(**d["config"]), NoiseBank(tuple(d["interface_shape"]), d["sigma"], stack), calib)
    return (defense, meta) if with_meta else defense


def defense_digest(defense: Defense) -> str:
    h = hashlib.sha256(repr((defense.config, defense.bank.sigma, defense.bank.interface_shape)).encode())
    if defense.bank.tensors is not None:
        h.update(np.ascontiguousarray(defense.bank.tensors).tobytes())
    return h.hexdigest()
