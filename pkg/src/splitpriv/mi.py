"""Mutual information between inputs and intermediate activations.

Inputs contribute their first channel only; activations contribute all
channels.  Each side is reduced to ``d`` features with a fixed seeded random
projection, and the dependence between the two feature sets is measured with
the Kraskov-Stoegbauer-Grassberger k-NN estimator (algorithm 1) or with an
equal-width histogram plug-in estimator.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import digamma

from .errors import EstimationError

MIN_SAMPLES = 50


@dataclass(frozen=True)
class PairSet:
    """Paired feature rows: ``x[i]`` from input i's first channel, ``y[i]`` from its activation."""

    x: np.ndarray
    y: np.ndarray
    projection: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.x)


@dataclass(frozen=True)
class MIEstimate:
    value_nats: float
    raw_value: float
    estimator: str
    n_samples: int
    config: dict = field(default_factory=dict)


def _projection(dim_in: int, d: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.standard_normal((dim_in, d)) / np.sqrt(dim_in)


def prepare_pairs(inputs: np.ndarray, activations: np.ndarray, d: int = 8, seed: int = 0,
                  projection: str = "random") -> PairSet:
    """Project flattened first-channel inputs and flattened activations to ``d`` features.

    ``projection="identity"`` skips the projection and keeps the raw
    flattened values on both sides.
    """
    inputs = np.asarray(inputs)
    activations = np.asarray(activations)
    if len(inputs) != len(activations):
        raise ValueError(f"{len(inputs)} inputs vs {len(activations)} activations")
    if inputs.ndim < 2:
        raise ValueError("inputs need a leading batch axis")
    first = inputs[:, 0] if inputs.ndim >= 3 else inputs
    fx = first.reshape(len(first), -1).astype(np.float64)
    fy = activations.reshape(len(activations), -1).astype(np.float64)
    if projection == "identity":
        return PairSet(fx, fy, {"projection": "identity"})
    if projection != "random":
        raise ValueError(f"unknown projection {projection!r}")
    if d < 1 or d > min(fx.shape[1], fy.shape[1]):
        raise ValueError(f"projection dimension {d} exceeds available dimensions "
                         f"({fx.shape[1]}, {fy.shape[1]})")
    px = _projection(fx.shape[1], d, seed)
    py = _projection(fy.shape[1], d, seed + 1)
    return PairSet(fx @ px, fy @ py, {"projection": "random", "d": d, "seed": seed})


def _standardize(a: np.ndarray) -> np.ndarray:
    sd = a.std(axis=0)
    sd[sd == 0] = 1.0
    return (a - a.mean(axis=0)) / sd


def ksg(x: np.ndarray, y: np.ndarray, k: int = 5, seed: int = 0, jitter: float = 1e-10) -> float:
    """KSG estimator (algorithm 1, max-norm) in nats, unclamped.

    I = psi(k) + psi(N) - < psi(n_x + 1) + psi(n_y + 1) >, with n_x, n_y the
    marginal neighbour counts strictly inside the joint k-th neighbour distance.
    """
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    y = np.asarray(y, dtype=np.float64).reshape(len(y), -1)
    n = len(x)
    rng = np.random.default_rng(seed)
    # tiny noise breaks exact ties (quantized pixels, dead relus)
    x = _standardize(x) + jitter * rng.standard_normal(x.shape)
    y = _standardize(y) + jitter * rng.standard_normal(y.shape)
    joint = np.hstack([x, y])
    dist, _ = cKDTree(joint).query(joint, k=k + 1, p=np.inf)
    eps = np.nextafter(dist[:, -1], 0)
    nx = cKDTree(x).query_ball_point(x, eps, p=np.inf, return_length=True) - 1
    ny = cKDTree(y).query_ball_point(y, eps, p=np.inf, return_length=True) - 1
    return float(digamma(k) + digamma(n) - np.mean(digamma(nx + 1) + digamma(ny + 1)))


def _codes(a: np.ndarray, bins: int) -> np.ndarray:
    lo, hi = a.min(axis=0), a.max(axis=0)
    width = np.where(hi > lo, (hi - lo) / bins, 1.0)
    return np.clip(((a - lo) / width).astype(np.int64), 0, bins - 1)


def _entropy(codes: np.ndarray) -> float:
    _, counts = np.unique(codes, axis=0, return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def histogram_mi(x: np.ndarray, y: np.ndarray, bins: int = 16) -> float:
    """Plug-in I = H(X) + H(Y) - H(X, Y) over equal-width bins per dimension."""
    cx = _codes(np.asarray(x, dtype=np.float64).reshape(len(x), -1), bins)
    cy = _codes(np.asarray(y, dtype=np.float64).reshape(len(y), -1), bins)
    return _entropy(cx) + _entropy(cy) - _entropy(np.hstack([cx, cy]))


def estimate_mi(pairs: PairSet, estimator: str = "ksg", k: int = 5, bins: int = 16, mode: str = "joint",
                seed: int = 0) -> MIEstimate:
    """Estimate I(X;Y) in nats; negatives are clamped to zero with the raw value kept.

    ``mode="joint"`` treats each side as one vector; ``mode="per_dim_sum"``
    sums the estimates between matching feature dimensions.
    """
    x, y = pairs.x, pairs.y
    n = len(x)
    if n < MIN_SAMPLES:
        raise EstimationError(f"need at least {MIN_SAMPLES} pairs, got {n}")
    if np.all(x.std(axis=0) == 0) or np.all(y.std(axis=0) == 0):
        raise EstimationError("degenerate data: zero variance in every dimension")
    if estimator == "ksg":
        if not 3 <= k <= 10:
            raise ValueError("ksg k must lie in [3, 10]")
        fn = lambda a, b: ksg(a, b, k, seed)  # noqa: E731
        cfg = {"k": k}
    elif estimator == "histogram":
        if not 4 <= bins <= 64:
            raise ValueError("histogram bins must lie in [4, 64]")
        fn = lambda a, b: histogram_mi(a, b, bins)  # noqa: E731
        cfg = {"bins": bins}
    else:
        raise ValueError(f"unknown estimator {estimator!r}")
    if mode == "joint":
        raw = fn(x, y)
    elif mode == "per_dim_sum":
        if x.shape[1] != y.shape[1]:
            raise ValueError("per_dim_sum needs equal feature dimensions")
        raw = sum(fn(x[:, i], y[:, i]) for i in range(x.shape[1]))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    cfg.update(mode=mode, seed=seed, projection=dict(pairs.projection))
    return MIEstimate(max(raw, 0.0), raw, estimator, n, cfg)


def mi_reduction(mi_original, mi_noised) -> float:
    """(MI_original - MI_noised) / MI_original; negative when noise raised the estimate."""
    orig = mi_original.value_nats if isinstance(mi_original, MIEstimate) else float(mi_original)
    noised = mi_noised.value_nats if isinstance(mi_noised, MIEstimate) else float(mi_noised)
    if orig <= 0:
        raise ZeroDivisionError("original MI is zero; reduction ratio undefined")
    return (orig - noised) / orig
