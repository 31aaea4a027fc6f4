"""Gradient-flow integration (Dormand-Prince 5(4)) and discrete optimizers."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Union

import numpy as np

from .analytic import correlation_spectrum
from .core import (
    Family,
    InputStatistics,
    ModelSpec,
    Objective,
    ParamState,
    TargetSpec,
    TWO_LAYER,
    _check,
    conserved_quantity,
    end_to_end,
)
from .errors import ConfigurationError, DivergenceError, StiffnessError

Observer = Callable[[float, ParamState], Union[float, np.ndarray]]

# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4


@dataclass(frozen=True)
class FlowConfig:
    t_end: float
    rel_tol: float = 1e-10
    abs_tol: float = 1e-12
    max_step: Optional[float] = None
    record_every: Optional[float] = None
    seed: Optional[int] = None
    stop_loss: Optional[float] = 1e-14

    def __post_init__(self):
        if not self.t_end > 0:
            raise ConfigurationError("t_end must be > 0")
        for name in ("rel_tol", "abs_tol"):
            v = getattr(self, name)
            if not (0 < v <= 1e-2):
                raise ConfigurationError(f"{name} must lie in (0, 1e-2]")
        if self.max_step is not None and not self.max_step > 0:
            raise ConfigurationError("max_step must be > 0")
        if self.record_every is not None and not (0 < self.record_every <= self.t_end):
            raise ConfigurationError("record_every must lie in (0, t_end]")

    @property
    def grid(self) -> np.ndarray:
        dt = self.record_every or self.t_end / 200
        n = int(math.floor(self.t_end / dt + 1e-9))
        g = dt * np.arange(n + 1)
        if g[-1] < self.t_end * (1 - 1e-12):
            g = np.append(g, self.t_end)
        return g


@dataclass
class Trajectory:
    times: np.ndarray
    observables: dict
    final_state: ParamState
    converged: bool = False
    n_steps: int = 0
    n_rejected: int = 0
    meta: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.observables[name]


def mode_values(spec: ModelSpec, params: ParamState, target: Optional[TargetSpec] = None) -> np.ndarray:
    """Family-specific decoupled mode coordinates."""
    f = spec.family
    if f is Family.LINEAR:
        return np.asarray(params[0]).ravel()
    if f is Family.DIAG_LNN:
        return params[0] * params[1]
    if f is Family.WIDE_SCALAR:
        return np.array([np.dot(params[0], params[1]) / spec.z])
    if f in (Family.LNN, Family.UFM):
        b = end_to_end(spec, params)
        if target is not None and target.correlation is not None:
            spec_ = correlation_spectrum(target.correlation)
            return np.einsum("ij,ik,kj->j", spec_.u, b, spec_.v)
        return np.linalg.svd(b, compute_uv=False)
    return np.zeros(0)


def default_observers(spec: ModelSpec, target: TargetSpec, stats: InputStatistics,
                      init: ParamState) -> dict:
    obj = Objective(spec, target, stats)
    obs: dict = {"loss": lambda t, s: obj.loss(s.layers)}
    if spec.family is not Family.MLP_TANH:
        obs["modes"] = lambda t, s: mode_values(spec, s, target)
    if spec.family in TWO_LAYER:
        c0 = conserved_quantity(spec, init)
        obs["conservation_drift"] = lambda t, s: float(np.max(np.abs(conserved_quantity(spec, s) - c0)))
    return obs


class _Recorder:
    def __init__(self, observers: Mapping[str, Observer]):
        self.observers = dict(observers)
        self.times: list = []
        self.values: dict = {k: [] for k in self.observers}

    def __call__(self, t, state):
        self.times.append(t)
        for k, fn in self.observers.items():
            self.values[k].append(fn(t, state))

    def series(self):
        out = {}
        for k, v in self.values.items():
            try:
                out[k] = np.asarray(v, dtype=np.float64)
            except (ValueError, TypeError):
                out[k] = v
        return np.asarray(self.times), out


def _err_norm(err, y, y_new, cfg):
    scale = cfg.abs_tol + cfg.rel_tol * np.maximum(np.abs(y), np.abs(y_new))
    return float(np.sqrt(np.mean((err / scale) ** 2)))


def integrate(
    spec: ModelSpec,
    init: ParamState,
    target: TargetSpec,
    stats: InputStatistics,
    cfg: FlowConfig,
    observers: Optional[Mapping[str, Observer]] = None,
) -> Trajectory:
    """Integrate ``dtheta/dt = -grad L`` with adaptive Dormand-Prince steps.

    The step is clipped so every grid time of ``cfg`` is hit exactly.  Stops
    early once the loss falls below ``cfg.stop_loss``.
    """
    _check(spec, init)
    obj = Objective(spec, target, stats)
    shapes = obj.shapes
    obs = default_observers(spec, target, stats, init)
    obs.update(observers or {})
    rec = _Recorder(obs)

    grid = cfg.grid
    h_max = cfg.max_step or cfg.t_end
    y = init.flat()
    t = 0.0
    k1 = obj.flow(y)
    if not np.all(np.isfinite(k1)):
        raise DivergenceError("non-finite velocity at t=0", state=init)
    rec(0.0, ParamState.from_flat(y, shapes, 0.0))

    # initial step (Hairer's heuristic, simplified)
    d0 = np.sqrt(np.mean((y / (cfg.abs_tol + cfg.rel_tol * np.abs(y))) ** 2))
    d1 = np.sqrt(np.mean((k1 / (cfg.abs_tol + cfg.rel_tol * np.abs(y))) ** 2))
    h = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h = min(h, h_max)

    beta = 0.04
    alpha = 0.2 - 0.75 * beta
    err_prev = 1e-4
    n_steps = n_rej = 0
    converged = False
    g_idx = 1
    while g_idx < len(grid):
        t_next = grid[g_idx]
        h = min(h, h_max, t_next - t)
        if h < 1e-14 * max(1.0, abs(t)):
            raise StiffnessError(f"step size underflow at t={t:.6g}",
                                 state=ParamState.from_flat(y, shapes, t))
        ks = [k1]
        for i in range(1, 7):
            yi = y + h * sum(a * k for a, k in zip(_A[i], ks) if a != 0.0)
            ks.append(obj.flow(yi))
        y_new = yi  # FSAL: stage 7 is evaluated at the 5th-order solution
        if not np.all(np.isfinite(y_new)):
            raise DivergenceError(f"non-finite state at t={t:.6g}",
                                  state=ParamState.from_flat(y, shapes, t))
        err = h * sum(e * k for e, k in zip(_E, ks) if e != 0.0)
        en = _err_norm(err, y, y_new, cfg)
        if en <= 1.0:
            t_new = t + h
            if t_next - t_new <= 1e-12 * max(1.0, t_next):
                t_new = t_next
            y, t, k1 = y_new, t_new, ks[6]
            n_steps += 1
            fac = 0.9 * en ** (-alpha) * err_prev ** beta if en > 0 else 5.0
            h = h * min(5.0, max(0.2, fac))
            err_prev = max(en, 1e-4)
            if t == t_next:
                state = ParamState.from_flat(y, shapes, t)
                rec(t, state)
                g_idx += 1
                if cfg.stop_loss is not None and obj.loss(obj.unflatten(y)) < cfg.stop_loss:
                    converged = True
                    break
        else:
            n_rej += 1
            h = h * max(0.2, 0.9 * en ** (-alpha))

    times, values = rec.series()
    return Trajectory(times, values, ParamState.from_flat(y, shapes, t), converged, n_steps, n_rej)


# ---------------------------------------------------------------------------
# discrete optimizers


@dataclass(frozen=True)
class Adam:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class AdamState:
    """Bias-corrected Adam with decoupled weight decay, over a list of arrays."""

    def __init__(self, layers, opt: Adam, lr: float, wd: float = 0.0):
        self.opt, self.lr, self.wd = opt, lr, wd
        self.m = [np.zeros_like(w) for w in layers]
        self.v = [np.zeros_like(w) for w in layers]
        self.k = 0

    def step(self, layers, grads):
        o = self.opt
        self.k += 1
        c1 = 1.0 - o.beta1 ** self.k
        c2 = 1.0 - o.beta2 ** self.k
        for w, g, m, v in zip(layers, grads, self.m, self.v):
            m *= o.beta1
            m += (1 - o.beta1) * g
            v *= o.beta2
            v += (1 - o.beta2) * g * g
            if self.wd:
                w -= self.lr * self.wd * w
            w -= self.lr * (m / c1) / (np.sqrt(v / c2) + o.eps)


def discrete_gd(
    spec: ModelSpec,
    init: ParamState,
    target: TargetSpec,
    stats: InputStatistics,
    lr: float,
    steps: int,
    batch: Optional[int] = None,
    optimizer: Union[str, Adam] = "gd",
    wd: float = 0.0,
    seed=None,
    record_every: int = 1,
    observers: Optional[Mapping[str, Observer]] = None,
    divergence_loss: float = 1e12,
) -> Trajectory:
    """Plain GD or Adam; ``times`` of the result are step indices."""
    if not lr > 0:
        raise ConfigurationError("lr must be > 0")
    if wd < 0:
        raise ConfigurationError("wd must be >= 0")
    _check(spec, init)
    obj = Objective(spec, target, stats)
    if batch is not None:
        if stats.samples is None or not obj.sample:
            raise ConfigurationError("minibatches need stats.samples")
        if not (1 <= batch <= obj.x.shape[0]):
            raise ConfigurationError("batch must lie in [1, n]")
    rng = np.random.default_rng(seed)
    layers = [np.array(w, dtype=np.float64) for w in init.layers]
    obs = default_observers(spec, target, stats, init)
    obs.update(observers or {})
    rec = _Recorder(obs)
    rec(0, init)
    adam = AdamState(layers, optimizer, lr, wd) if isinstance(optimizer, Adam) else None
    if adam is None and optimizer != "gd":
        raise ConfigurationError(f"unknown optimizer {optimizer!r}")

    full_x, full_y = (obj.x, obj.y) if obj.sample else (None, None)
    with np.errstate(over="ignore", invalid="ignore"):
        return _gd_loop(obj, spec, layers, rng, lr, steps, batch, adam, wd, rec, record_every,
                        divergence_loss, full_x, full_y)


def _gd_loop(obj, spec, layers, rng, lr, steps, batch, adam, wd, rec, record_every,
             divergence_loss, full_x, full_y):
    for step in range(1, steps + 1):
        if batch is not None and batch < full_x.shape[0]:
            idx = rng.choice(full_x.shape[0], size=batch, replace=False)
            obj.x, obj.y = full_x[idx], full_y[idx]
        grads = obj.grad(layers)
        if batch is not None:
            obj.x, obj.y = full_x, full_y
        if adam is not None:
            adam.step(layers, grads)
        else:
            for w, g in zip(layers, grads):
                if wd:
                    w -= lr * wd * w
                w -= lr * g
        # NaN/inf persist, so a periodic scalar check is enough
        record = step % record_every == 0 or step == steps
        if (record or step % 64 == 0) and not math.isfinite(sum(float(np.sum(w)) for w in layers)):
            raise DivergenceError(f"non-finite parameters by step {step}", step=step)
        if record:
            state = ParamState(tuple(layers), float(step))
            rec(step, state)
            last = rec.values["loss"][-1]
            if not np.isfinite(last) or last > divergence_loss:
                raise DivergenceError(f"loss diverged at step {step}", step=step, state=state)
    times, values = rec.series()
    return Trajectory(times, values, ParamState(tuple(layers), float(steps)), False, steps, 0)
