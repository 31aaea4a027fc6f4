"""Closed-form gradient-flow trajectories.

All times are pure flow time.  Functions accept scalar or array ``t`` and
return the same shape.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateError, DomainError, NumericError, UnsupportedRegimeError


def _times(t):
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(np.isnan(t)):
        raise DomainError("flow time must be >= 0")
    return t


def _out(x):
    return float(x) if np.ndim(x) == 0 else x


@dataclass(frozen=True)
class ModeTrajectoryParams:
    s: float
    u0: float
    rate: float = 1.0


def linear_mode(t, s: float, rate: float):
    """Exponential saturation of a linear-model mode started at zero."""
    t = _times(t)
    return _out(s * -np.expm1(-rate * t))


def _check_sigmoidal(p: ModeTrajectoryParams):
    if not (0 < p.u0 < p.s):
        raise DomainError(f"sigmoidal branch needs 0 < u0 < s, got u0={p.u0}, s={p.s}")
    if p.rate < 0:
        raise DomainError("rate must be >= 0")


def sigmoidal_mode(t, params: ModeTrajectoryParams):
    """Product ``a(t) b(t)`` of a diagonal-network mode with equal small init."""
    _check_sigmoidal(params)
    t = _times(t)
    s, u0 = params.s, params.u0
    return _out(s / (1.0 + (s / u0 - 1.0) * np.exp(-2.0 * s * params.rate * t)))


def sigmoidal_crossing_time(fraction: float, params: ModeTrajectoryParams) -> float:
    """Time at which the sigmoidal mode reaches ``fraction * s`` (negative if already past)."""
    if not (0 < fraction < 1):
        raise DomainError("fraction must lie in (0, 1)")
    _check_sigmoidal(params)
    if params.rate == 0:
        return float("inf")
    s, u0 = params.s, params.u0
    return float(np.log((s / u0 - 1.0) * fraction / (1.0 - fraction)) / (2.0 * s * params.rate))


def decoupled_mode(t, rho: float, alpha0_sq: float):
    """``alpha^2(t)`` of a whitened linear-network mode with singular value ``rho``."""
    if not (0 < alpha0_sq < rho):
        raise DomainError(f"need 0 < alpha0_sq < rho, got {alpha0_sq}, {rho}")
    t = _times(t)
    return _out(rho / (1.0 + (rho / alpha0_sq - 1.0) * np.exp(-2.0 * rho * t)))


@dataclass(frozen=True)
class CorrelationSpectrum:
    """Singular triplets; ``u[:, i]``, ``rho[i]``, ``v[:, i]``, ``rho`` descending."""

    u: np.ndarray
    rho: np.ndarray
    v: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.rho) @ self.v.T


def correlation_spectrum(correlation) -> CorrelationSpectrum:
    m = np.asarray(correlation, dtype=np.float64)
    if m.ndim == 1:
        m = m[:, None]
    if not np.all(np.isfinite(m)):
        raise NumericError("non-finite correlation matrix")
    u, rho, vt = np.linalg.svd(m, full_matrices=False)
    return CorrelationSpectrum(u, rho, vt.T)


# ---------------------------------------------------------------------------
# wide scalar-input network, general initialization


@dataclass(frozen=True)
class GammaSolution:
    s0: float
    sigma0: float
    s: float
    z: float
    gamma_plus: float
    gamma_minus: float

    @property
    def root(self) -> float:
        return float(np.sqrt(self.sigma0 ** 2 - self.s0 ** 2 + self.s ** 2))

    @property
    def rate(self) -> float:
        """Exponential rate of approach to ``gamma_plus``."""
        return 2.0 * self.root / self.z


def gamma_solution(a0, b0, s: float, z: float = 1.0) -> GammaSolution:
    a0 = np.asarray(a0, dtype=np.float64).ravel()
    b0 = np.asarray(b0, dtype=np.float64).ravel()
    if a0.shape != b0.shape or a0.size < 1:
        raise DomainError("a0 and b0 must be non-empty and the same length")
    if not z > 0:
        raise DomainError("z must be > 0")
    s0 = float(np.dot(a0, b0) / z)
    sigma0 = float(np.sum(a0 * a0 + b0 * b0) / (2.0 * z))
    # sigma0 + s0 = sum (a + b)^2 / 2z
    denom = float(np.sum((a0 + b0) ** 2) / (2.0 * z))
    if denom <= 0:
        raise DegenerateError("sigma0 + s0 = 0: initialization has no aligned component")
    root = np.sqrt(max(sigma0 ** 2 - s0 ** 2, 0.0) + s * s)
    return GammaSolution(s0, sigma0, float(s), float(z), float((s + root) / denom), float((s - root) / denom))


def gamma_at(t, sol: GammaSolution):
    """Monotone interpolation from ``gamma(0) = 1`` to ``gamma_plus``."""
    t = _times(t)
    gp, gm = sol.gamma_plus, sol.gamma_minus
    c = (1.0 - gp) / (1.0 - gm)
    e = c * np.exp(-sol.rate * t)
    return _out((gp - gm * e) / (1.0 - e))


def reconstruct_params(t, a0, b0, sol: GammaSolution):
    """Per-unit weights ``(a(t), b(t))``; ``t`` scalar, ``inf`` allowed."""
    a0 = np.asarray(a0, dtype=np.float64)
    b0 = np.asarray(b0, dtype=np.float64)
    g = gamma_at(t, sol)
    half_sum, half_diff = 0.5 * (a0 + b0), 0.5 * (a0 - b0)
    root_g = np.sqrt(g)
    return half_sum * root_g + half_diff / root_g, half_sum * root_g - half_diff / root_g


def limiting_products(a0, b0, sol: GammaSolution) -> np.ndarray:
    a0 = np.asarray(a0, dtype=np.float64)
    b0 = np.asarray(b0, dtype=np.float64)
    return (0.5 * (a0 + b0)) ** 2 * sol.gamma_plus - (0.5 * (a0 - b0)) ** 2 / sol.gamma_plus


# ---------------------------------------------------------------------------
# lambda-balanced transition limits

LARGE_LAMBDA = 100.0


def balanced_transition(t, lam: float, rho_tilde: float, s_alpha0: float, tau: float = 1.0,
                        large: float = LARGE_LAMBDA):
    """Normalized singular-value transition in its two solvable limits.

    ``lam == 0`` gives the sigmoidal limit, ``|lam| >= large`` the
    exponential one.  Anything in between raises UnsupportedRegimeError.
    With ``rho_tilde = rho``, ``s_alpha0 = alpha0^2`` and ``tau = 1`` the
    sigmoidal limit is ``(alpha^2(t) - alpha0^2) / (rho - alpha0^2)`` of
    ``decoupled_mode``.
    """
    t = _times(t)
    if rho_tilde <= 0 or s_alpha0 <= 0 or tau <= 0:
        raise DomainError("rho_tilde, s_alpha0 and tau must be > 0")
    if lam == 0:
        with np.errstate(over="ignore", invalid="ignore"):
            e = np.expm1(2.0 * rho_tilde * t / tau)
            out = np.where(np.isinf(e), 1.0, e / (e + rho_tilde / s_alpha0))
        return _out(out)
    if abs(lam) >= large:
        return _out(-np.expm1(-abs(lam) * t / tau))
    raise UnsupportedRegimeError(f"no closed form for intermediate lambda={lam}")


# ---------------------------------------------------------------------------
# stage-like training


@dataclass(frozen=True)
class StageSchedule:
    order: tuple          # mode indices sorted by s * rate, descending
    windows: tuple        # (start, end) per entry of ``order``
    disjoint: bool


def stage_like_schedule(modes: Sequence[ModeTrajectoryParams], eps: float = 0.01) -> StageSchedule:
    if not (0 < eps < 0.5):
        raise DomainError("eps must lie in (0, 0.5)")
    order = sorted(range(len(modes)), key=lambda i: -modes[i].s * modes[i].rate)
    windows = tuple(
        (sigmoidal_crossing_time(eps, modes[i]), sigmoidal_crossing_time(1 - eps, modes[i]))
        for i in order
    )
    disjoint = all(windows[k][1] < windows[k + 1][0] for k in range(len(windows) - 1))
    return StageSchedule(tuple(order), windows, disjoint)
