"""Closed forms against the integrator, family by family."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .analytic import (
    ModeTrajectoryParams,
    balanced_transition,
    correlation_spectrum,
    gamma_at,
    gamma_solution,
    linear_mode,
    reconstruct_params,
    decoupled_mode,
    sigmoidal_crossing_time,
    sigmoidal_mode,
)
from .core import InputStatistics, ModelSpec, ParamState, TargetSpec, random_orthogonal
from .integrator import FlowConfig, integrate


@dataclass(frozen=True)
class Check:
    family: str
    max_dev: float
    horizon: float
    seconds: float
    max_drift_rate: float = 0.0

    def as_row(self):
        return (self.family, self.max_dev, self.horizon, self.seconds, self.max_drift_rate)


def _flow(spec, init, target, stats, horizon, observers=None, points=400):
    cfg = FlowConfig(t_end=horizon, record_every=horizon / points, stop_loss=None)
    return integrate(spec, init, target, stats, cfg, observers)


def _drift_rate(traj) -> float:
    if "conservation_drift" not in traj.observables:
        return 0.0
    t = traj.times[1:]
    return float(np.max(traj["conservation_drift"][1:] / t)) if t.size else 0.0


def check_linear(d: int = 4, seed=0) -> Check:
    rng = np.random.default_rng(seed)
    s = rng.uniform(0.5, 3.0, d)
    var = rng.uniform(0.5, 2.0, d)
    horizon = 5.0 / var.min()
    start = time.perf_counter()
    spec = ModelSpec("linear", d=d, c=1)
    init = ParamState((np.zeros((d, 1)),))
    traj = _flow(spec, init, TargetSpec(scales=s), InputStatistics(variances=var), horizon)
    ref = np.stack([linear_mode(traj.times, s[i], var[i]) for i in range(d)], axis=1)
    dev = float(np.max(np.abs(traj["modes"] - ref)))
    return Check("linear", dev, horizon, time.perf_counter() - start)


def sigmoidal_horizon(s, u0, rate) -> float:
    """Five times the slowest half-saturation time."""
    return 5.0 * max(sigmoidal_crossing_time(0.5, ModeTrajectoryParams(a, b, r)) for a, b, r in zip(s, u0, rate))


def check_sigmoidal(d: int = 4, seed=0) -> Check:
    rng = np.random.default_rng(seed)
    s = rng.uniform(0.5, 3.0, d)
    var = rng.uniform(0.5, 2.0, d)
    u0 = 1e-3 * s
    horizon = sigmoidal_horizon(s, u0, var)
    start = time.perf_counter()
    spec = ModelSpec("diag_lnn", d=d)
    init = ParamState((np.sqrt(u0), np.sqrt(u0)))
    traj = _flow(spec, init, TargetSpec(scales=s), InputStatistics(variances=var), horizon)
    ref = np.stack([sigmoidal_mode(traj.times, ModeTrajectoryParams(s[i], u0[i], var[i])) for i in range(d)], axis=1)
    dev = float(np.max(np.abs(traj["modes"] - ref)))
    return Check("diag_lnn", dev, horizon, time.perf_counter() - start, _drift_rate(traj))


def aligned_init(spectrum, alpha0_sq, p: int, rng) -> ParamState:
    """``W1 = U A R^T``, ``W2 = R A V^T`` with ``A = diag(sqrt(alpha0_sq))`` (balanced, task aligned)."""
    u, v = spectrum.u, spectrum.v
    r = len(alpha0_sq)
    rr = random_orthogonal(p, rng)[:, :r]
    a = np.sqrt(np.asarray(alpha0_sq, dtype=np.float64))
    return ParamState(((u * a) @ rr.T, (rr * a) @ v.T))


def check_decoupled(d: int = 4, c: int = 3, p: int = 5, seed=0) -> Check:
    rng = np.random.default_rng(seed)
    u = random_orthogonal(d, rng)[:, :c]
    v = random_orthogonal(c, rng)
    rho = np.sort(rng.uniform(0.5, 3.0, c))[::-1]
    corr = (u * rho) @ v.T
    spec_ = correlation_spectrum(corr)
    alpha0_sq = 1e-4 * np.ones(c)
    horizon = 5.0 * max(np.log(r / a - 1.0) / (2.0 * r) for r, a in zip(spec_.rho, alpha0_sq))
    start = time.perf_counter()
    spec = ModelSpec("lnn", d=d, p=p, c=c)
    init = aligned_init(spec_, alpha0_sq, p, rng)
    traj = _flow(spec, init, TargetSpec(correlation=corr), InputStatistics.white(d), horizon)
    ref = np.stack([decoupled_mode(traj.times, spec_.rho[i], alpha0_sq[i]) for i in range(c)], axis=1)
    dev = float(np.max(np.abs(traj["modes"] - ref)))
    return Check("lnn", dev, horizon, time.perf_counter() - start, _drift_rate(traj))


def check_gamma(p: int = 6, seed=0, s=None, scale: float = 0.5, z: float = 1.0) -> Check:
    """Wide scalar model: gamma(t) and both weight vectors against the closed form."""
    rng = np.random.default_rng(seed)
    a0 = scale * rng.standard_normal(p)
    b0 = scale * rng.standard_normal(p)
    s = float(rng.uniform(0.5, 3.0)) if s is None else s
    sol = gamma_solution(a0, b0, s, z)
    horizon = 5.0 / sol.rate
    start = time.perf_counter()
    spec = ModelSpec("wide_scalar", d=1, p=p, z=z)
    traj = _flow(spec, ParamState((a0, b0)), TargetSpec(scales=[s]), InputStatistics.white(1), horizon,
                 observers={"a": lambda t, st: st[0].copy(), "b": lambda t, st: st[1].copy()})
    dev = 0.0
    for i, t in enumerate(traj.times):
        a, b = reconstruct_params(t, a0, b0, sol)
        dev = max(dev, float(np.max(np.abs(traj["a"][i] - a))), float(np.max(np.abs(traj["b"][i] - b))))
    # gamma itself from the weights: (a + b) = (a0 + b0) sqrt(gamma)
    g_num = (np.sum((traj["a"] + traj["b"]) * (a0 + b0), axis=1) / np.sum((a0 + b0) ** 2)) ** 2
    dev = max(dev, float(np.max(np.abs(g_num - gamma_at(traj.times, sol)))))
    return Check("wide_scalar", dev, horizon, time.perf_counter() - start, _drift_rate(traj))


def balanced_aligned_init(spectrum, p0, lam: float, rng) -> ParamState:
    """Square task-aligned init with products ``p0`` and ``W1^T W1 - W2 W2^T = -lam I``."""
    p0 = np.asarray(p0, dtype=np.float64)
    # the larger factor first, so the imbalance does not cancel
    big = np.sqrt((abs(lam) + np.sqrt(lam * lam + 4.0 * p0 * p0)) / 2.0)
    a, b = (p0 / big, big) if lam >= 0 else (big, p0 / big)
    r = random_orthogonal(p0.size, rng)
    return ParamState(((spectrum.u * a) @ r.T, (r * b) @ spectrum.v.T))


def check_balanced(lam: float, d: int = 3, seed=0) -> Check:
    """Normalized transition of a lambda-balanced square network.

    ``lam = 0`` is exact; the exponential form is the large-``|lam|`` limit,
    whose error shrinks like ``(rho / lam)^2``.
    """
    rng = np.random.default_rng(seed)
    u, v = random_orthogonal(d, rng), random_orthogonal(d, rng)
    rho = np.sort(rng.uniform(0.5, 3.0, d))[::-1]
    corr = (u * rho) @ v.T
    sp = correlation_spectrum(corr)
    p0 = 1e-3 * sp.rho
    if lam == 0:
        horizon = 5.0 * max(np.log(r / a - 1.0) / (2.0 * r) for r, a in zip(sp.rho, p0))
    else:
        horizon = 5.0 * np.log(2.0) / abs(lam)
    start = time.perf_counter()
    spec = ModelSpec("lnn", d=d, p=d, c=d)
    init = balanced_aligned_init(sp, p0, lam, rng)
    traj = _flow(spec, init, TargetSpec(correlation=corr), InputStatistics.white(d), horizon)
    gam = (traj["modes"] - p0) / (sp.rho - p0)
    ref = np.stack([balanced_transition(traj.times, lam, sp.rho[i], p0[i]) for i in range(d)], axis=1)
    dev = float(np.max(np.abs(gam - ref)))
    return Check(f"lnn_lambda{lam:+g}", dev, horizon, time.perf_counter() - start, _drift_rate(traj))


def run_all(seed=0) -> list:
    return [check_linear(seed=seed), check_sigmoidal(seed=seed), check_decoupled(seed=seed), check_gamma(seed=seed),
            check_balanced(0.0, seed=seed), check_balanced(1e4, seed=seed), check_balanced(-1e4, seed=seed)]
