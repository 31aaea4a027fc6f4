"""Lazy/rich diagnostics: empirical NTK, kernel distance and sweep grids."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import (
    Family,
    InputStatistics,
    ModelSpec,
    ParamState,
    TargetSpec,
    lambda_balanced_init,
)
from .errors import (
    ConfigurationError,
    DegenerateError,
    DivergenceError,
    NumericError,
    UnsupportedFamilyError,
)
from .integrator import discrete_gd

LAMBDAS = np.linspace(-9.0, 9.0, 13)
SCALES = np.linspace(2.0, 20.0, 10)
DOWNSCALES = np.geomspace(0.1, 50.0, 8)
IMBALANCES = np.linspace(-1.0, 1.0, 5)
SHAPES = {"square": (5, 5, 5), "funnel": (10, 6, 2), "antifunnel": (2, 6, 10)}


def empirical_ntk(spec: ModelSpec, params: ParamState, x) -> np.ndarray:
    """Parameter-gradient Gram matrix of ``f(x) = x^T W1 W2``, indexed ``(i, k)`` row-major."""
    if spec.family not in (Family.LNN, Family.UFM):
        raise UnsupportedFamilyError(f"empirical NTK is implemented for linear networks, not {spec.family.value}")
    w1, w2 = params[0], params[1]
    x = np.asarray(x, dtype=np.float64)
    h = x @ w1
    return np.kron(x @ x.T, w2.T @ w2) + np.kron(h @ h.T, np.eye(spec.c))


def kernel_distance(k0, kt) -> float:
    """``1 - <K0, Kt> / (|K0| |Kt|)`` in the Frobenius inner product."""
    k0 = np.asarray(k0, dtype=np.float64)
    kt = np.asarray(kt, dtype=np.float64)
    if k0.shape != kt.shape:
        raise ConfigurationError(f"kernel shapes differ: {k0.shape} vs {kt.shape}")
    n0, nt = np.linalg.norm(k0), np.linalg.norm(kt)
    if n0 == 0 or nt == 0:
        raise DegenerateError("zero-norm kernel")
    return float(1.0 - np.sum(k0 * kt) / (n0 * nt))


def wide_scalar_kernel_distance(a0, b0, a, b) -> float:
    """Kernel distance of the scalar-input model's tangent features ``(b, a)``.

    The sample kernel of a scalar-input model is ``x x'`` times a constant, so
    its cosine never moves; the rank-one parameter-space kernel of the
    tangent feature vector carries the rotation instead.
    """
    f0 = np.concatenate([np.ravel(b0), np.ravel(a0)])
    ft = np.concatenate([np.ravel(b), np.ravel(a)])
    return kernel_distance(np.outer(f0, f0), np.outer(ft, ft))


# ---------------------------------------------------------------------------
# tasks and grids


@dataclass(frozen=True)
class RegressionTask:
    """``n`` Gaussian inputs with a linear teacher of entry scale ``sigma / sqrt(d)``."""

    n: int = 10
    sigma: float = float(np.sqrt(3.0))

    def sample(self, d: int, c: int, rng) -> tuple:
        """Inputs ``(n, d)`` and teacher ``(d, c)``; targets are ``x @ teacher``."""
        if self.n < 1 or not self.sigma > 0:
            raise ConfigurationError("need n >= 1 and sigma > 0")
        x = rng.standard_normal((self.n, d))
        return x, self.sigma * rng.standard_normal((d, c)) / np.sqrt(d)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    steps: int = 20000

    def __post_init__(self):
        if not self.lr > 0 or self.steps < 1:
            raise ConfigurationError("lr must be > 0 and steps >= 1")


@dataclass
class RegimeGrid:
    axis1_name: str
    axis1: np.ndarray
    axis2_name: str
    axis2: np.ndarray
    cells: np.ndarray            # (len(axis1), len(axis2)), NaN where training diverged
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.axis1 = np.asarray(self.axis1, dtype=np.float64)
        self.axis2 = np.asarray(self.axis2, dtype=np.float64)
        self.cells = np.asarray(self.cells, dtype=np.float64)
        if self.cells.shape != (self.axis1.size, self.axis2.size):
            raise ConfigurationError("cell matrix does not match the axes")

    def cell(self, v1: float, v2: float) -> float:
        i = int(np.argmin(np.abs(self.axis1 - v1)))
        j = int(np.argmin(np.abs(self.axis2 - v2)))
        return float(self.cells[i, j])

    def rows(self):
        for i, a in enumerate(self.axis1):
            for j, b in enumerate(self.axis2):
                yield float(a), float(b), float(self.cells[i, j])


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=float).encode()).hexdigest()[:16]


def _train_distance(spec: ModelSpec, init: ParamState, x, teacher, train: TrainConfig):
    """Full-batch GD on ``y = x teacher``; returns (kernel distance, final loss), NaN on divergence."""
    k0 = empirical_ntk(spec, init, x)
    try:
        traj = discrete_gd(spec, init, TargetSpec(correlation=teacher), InputStatistics(samples=x),
                           train.lr, train.steps, record_every=train.steps)
    except (DivergenceError, NumericError):
        return float("nan"), float("nan")
    return kernel_distance(k0, empirical_ntk(spec, traj.final_state, x)), float(traj["loss"][-1])


def _spawn(seed, k):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(k)]


def _balanced_grid(d, p, c, lambdas, scales, task, train, seed, name):
    data_rng, init_rng = _spawn(seed, 2)
    x, teacher = task.sample(d, c, data_rng)
    init_seed = int(init_rng.integers(2 ** 31))
    spec = ModelSpec("lnn", d=d, p=p, c=c)
    cells = np.full((len(lambdas), len(scales)), np.nan)
    losses = np.full_like(cells, np.nan)
    for i, lam in enumerate(lambdas):
        for j, s in enumerate(scales):
            init = lambda_balanced_init(d, c, float(lam), float(s), seed=init_seed, p=p)
            cells[i, j], losses[i, j] = _train_distance(spec, init, x, teacher, train)
    meta = {"shape": name, "d": d, "p": p, "c": c, "task": asdict(task), "train": asdict(train),
            "seed": seed, "final_loss": losses}
    meta["hash"] = _hash({k: v for k, v in meta.items() if k != "final_loss"})
    return RegimeGrid("lambda", np.asarray(lambdas), "absolute_scale", np.asarray(scales), cells, meta)


def regime_grid(lambdas: Sequence[float] = LAMBDAS, scales: Sequence[float] = SCALES,
                task: RegressionTask = RegressionTask(), train: TrainConfig = TrainConfig(),
                d: int = 5, seed=0) -> RegimeGrid:
    """Final kernel distance over lambda x absolute scale for a square network."""
    return _balanced_grid(d, d, d, lambdas, scales, task, train, seed, "square")


def funnel_grid(shape: str = "funnel", lambdas: Sequence[float] = LAMBDAS,
                scales: Sequence[float] = SCALES, task: RegressionTask = RegressionTask(),
                train: TrainConfig = TrainConfig(), dims: Optional[tuple] = None, seed=0) -> RegimeGrid:
    """As ``regime_grid`` for a rectangular network (funnel: d > p > c, anti-funnel: d < p < c)."""
    if shape not in ("funnel", "antifunnel", "square"):
        raise ConfigurationError(f"unknown shape {shape!r}")
    d, p, c = dims or SHAPES[shape]
    ok = {"funnel": d > p > c, "antifunnel": d < p < c, "square": d == p == c}[shape]
    if not ok:
        raise ConfigurationError(f"dims {(d, p, c)} are not a {shape} shape")
    return _balanced_grid(d, p, c, lambdas, scales, task, train, seed, shape)


def symmetrized_init(d: int, p: int, c: int, sigma1: float, sigma2: float, rng) -> ParamState:
    """``W1 = [A, A]``, ``W2 = [B; -B]``: the initial function is identically zero."""
    if p % 2:
        raise ConfigurationError("symmetrized init needs an even hidden width")
    a = sigma1 * rng.standard_normal((d, p // 2))
    b = sigma2 * rng.standard_normal((p // 2, c))
    return ParamState((np.hstack([a, a]), np.vstack([b, -b])))


def ratio_grid(downscales: Sequence[float] = DOWNSCALES, imbalances: Sequence[float] = IMBALANCES,
               task: RegressionTask = RegressionTask(), train: TrainConfig = TrainConfig(),
               dims: tuple = (20, 20, 2), base: float = 1.0, seed=0) -> RegimeGrid:
    """Final kernel distance over layer imbalance x target downscaling.

    Imbalance ``m`` sets per-entry stds ``base * 10**(-m/2) / sqrt(d)`` and
    ``base * 10**(m/2) / sqrt(p)``.  Dividing the target by ``downscale``
    multiplies the weight-to-target ratio ``Sigma0 / S`` by it; the ratio of
    every cell is in ``meta["ratio"]``.
    """
    d, p, c = dims
    data_rng, init_rng = _spawn(seed, 2)
    x, teacher = task.sample(d, c, data_rng)
    init_seed = int(init_rng.integers(2 ** 31))
    spec = ModelSpec("lnn", d=d, p=p, c=c)
    cells = np.full((len(imbalances), len(downscales)), np.nan)
    ratio = np.zeros_like(cells)
    losses = np.full_like(cells, np.nan)
    for i, m in enumerate(imbalances):
        s1 = base * 10.0 ** (-m / 2) / np.sqrt(d)
        s2 = base * 10.0 ** (m / 2) / np.sqrt(p)
        init = symmetrized_init(d, p, c, s1, s2, np.random.default_rng(init_seed))
        sigma0 = 0.5 * (np.sum(init[0] ** 2) + np.sum(init[1] ** 2))
        for j, k in enumerate(downscales):
            ratio[i, j] = sigma0 * k / np.linalg.norm(x @ teacher)
            cells[i, j], losses[i, j] = _train_distance(spec, init, x, teacher / k, train)
    meta = {"shape": "symmetrized", "d": d, "p": p, "c": c, "task": asdict(task), "train": asdict(train),
            "base": base, "seed": seed}
    meta["hash"] = _hash(meta)
    meta.update(ratio=ratio, final_loss=losses)
    return RegimeGrid("imbalance", np.asarray(imbalances), "target_downscale", np.asarray(downscales),
                      cells, meta)
