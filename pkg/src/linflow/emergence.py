"""Skill-ensemble model of emergence and the multitask sparse parity generator."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .analytic import ModeTrajectoryParams, sigmoidal_mode
from .core import InputStatistics, ModelSpec, ParamState, TargetSpec
from .errors import ConfigurationError, DomainError


@dataclass(frozen=True)
class SkillEnsemble:
    """``p_star`` target skills with power-law frequencies; the model holds the first ``p``."""

    p_star: int
    alpha: float = 2.0
    s: float = 1.0
    p: Optional[int] = None

    def __post_init__(self):
        if self.p_star < 1:
            raise ConfigurationError("p_star must be >= 1")
        if not self.alpha > 0:
            raise ConfigurationError("alpha must be > 0")
        if not self.s > 0:
            raise ConfigurationError("s must be > 0")
        if self.p is None:
            object.__setattr__(self, "p", self.p_star)
        if not 0 <= self.p <= self.p_star:
            raise ConfigurationError("need 0 <= p <= p_star")

    @property
    def freq(self) -> np.ndarray:
        w = np.arange(1, self.p_star + 1, dtype=np.float64) ** -self.alpha
        return w / w.sum()


def skill_flow_problem(ens: SkillEnsemble, u0: float):
    """Diagonal network over the ``p`` model skills with ``E[g_k^2] = freq_k``.

    Mutually exclusive skills are orthogonal features, so the skill model is
    exactly this decoupled diagonal network.
    """
    if not 0 < u0 < ens.s:
        raise DomainError("need 0 < u0 < s")
    p = ens.p
    spec = ModelSpec("diag_lnn", d=p)
    init = ParamState((np.full(p, np.sqrt(u0)), np.full(p, np.sqrt(u0))))
    target = TargetSpec(scales=np.full(p, ens.s))
    stats = InputStatistics(variances=ens.freq[:p])
    return spec, init, target, stats


def skill_strength(coeffs, ens: SkillEnsemble) -> np.ndarray:
    """``R_k = E[f g_k] / E[g_k^2]``, which is ``a_k b_k`` for mutually exclusive skills."""
    coeffs = np.asarray(coeffs, dtype=np.float64).ravel()
    if coeffs.size != ens.p:
        raise ConfigurationError(f"expected {ens.p} coefficients, got {coeffs.size}")
    return coeffs.copy()


def skill_projection(f_values, g_values) -> np.ndarray:
    """Sample estimate of ``E[f g_k] / E[g_k^2]`` from ``f (n,)`` and skill outputs ``g (n, p)``."""
    f = np.asarray(f_values, dtype=np.float64)
    g = np.asarray(g_values, dtype=np.float64)
    den = np.mean(g * g, axis=0)
    if np.any(den == 0):
        raise DomainError("a skill never fires in the sample")
    return (f @ g / len(f)) / den


def emergence_time_curve(ens: SkillEnsemble, u0: float, grid) -> np.ndarray:
    """``R_k(t)`` on ``grid`` (rows) for every target skill (columns).

    Skills the model lacks stay at ``u0``.
    """
    t = np.asarray(grid, dtype=np.float64)
    out = np.full((t.size, ens.p_star), float(u0))
    freq = ens.freq
    for k in range(ens.p):
        out[:, k] = sigmoidal_mode(t, ModeTrajectoryParams(ens.s, u0, freq[k]))
    return out


@dataclass(frozen=True)
class EmergenceData:
    sizes: np.ndarray
    prob: np.ndarray        # (len(sizes), p_star): P(skill learned)
    strength: np.ndarray    # expected R_k
    trials: int


def emergence_data(ens: SkillEnsemble, sizes: Sequence[int], shots: int = 1, trials: int = 2000,
                   seed=None, u0: float = 0.0) -> EmergenceData:
    """Monte-Carlo probability that each skill is seen at least ``shots`` times in ``n`` samples.

    Counts for increasing ``n`` extend the same draw, so every trial (and the
    estimate) is monotone in ``n``.
    """
    if shots < 1 or trials < 1:
        raise ConfigurationError("shots and trials must be >= 1")
    sizes = np.asarray(sizes, dtype=np.int64)
    if np.any(sizes < 0):
        raise ConfigurationError("dataset sizes must be >= 0")
    order = np.argsort(sizes, kind="stable")
    rng = np.random.default_rng(seed)
    freq = ens.freq
    counts = np.zeros((trials, ens.p_star), dtype=np.int64)
    prob = np.zeros((sizes.size, ens.p_star))
    prev = 0
    for i in order:
        n = int(sizes[i])
        if n > prev:
            counts += rng.multinomial(n - prev, freq, size=trials)
            prev = n
        prob[i] = np.mean(counts >= shots, axis=0)
    prob[:, ens.p:] = 0.0
    return EmergenceData(sizes, prob, prob * ens.s + (1 - prob) * u0, trials)


def data_emergence_oracle(ens: SkillEnsemble, sizes) -> np.ndarray:
    """Closed form ``1 - (1 - freq_k)^n`` for one-shot learning."""
    n = np.asarray(sizes, dtype=np.float64)[:, None]
    out = 1.0 - (1.0 - ens.freq[None, :]) ** n
    out[:, ens.p:] = 0.0
    return out


def emergence_params(ens: SkillEnsemble, widths: Sequence[int], u0: float = 0.0):
    """Learned indicator ``k <= p`` and skill strength per (width, skill)."""
    w = np.asarray(widths, dtype=np.int64)
    if np.any(w < 0):
        raise ConfigurationError("widths must be >= 0")
    learned = np.arange(1, ens.p_star + 1)[None, :] <= w[:, None]
    return learned, np.where(learned, ens.s, u0)


def scaling_curve(ens: SkillEnsemble, resource: str, grid, u0: float = 0.0, shots: int = 1,
                  trials: int = 2000, seed=None) -> np.ndarray:
    """Aggregate loss ``1/2 sum_k freq_k (S - R_k)^2`` over a resource grid.

    ``time`` uses the sigmoidal curves (``u0`` must lie in ``(0, s)``);
    ``data`` averages the squared error over the Monte-Carlo draw;
    ``params`` uses the width threshold.
    """
    freq = ens.freq
    if resource == "time":
        r = emergence_time_curve(ens, u0, grid)
        return 0.5 * ((ens.s - r) ** 2) @ freq
    if resource == "data":
        e = emergence_data(ens, grid, shots, trials, seed, u0)
        return 0.5 * ((1 - e.prob) * (ens.s - u0) ** 2) @ freq
    if resource == "params":
        _, r = emergence_params(ens, grid, u0)
        return 0.5 * ((ens.s - r) ** 2) @ freq
    raise ConfigurationError(f"unknown resource {resource!r}")


def loglog_slope(x, y) -> float:
    return float(np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)[0])


# ---------------------------------------------------------------------------
# multitask sparse parity


@dataclass(frozen=True)
class ParityTask:
    """One-hot control block of ``n_s`` bits, then ``n_b`` uniform skill bits.

    Skill ``k`` is the parity of the bits in ``masks[k]``.
    """

    n_s: int
    n_b: int
    m: int
    masks: tuple
    alpha: float = 2.0

    def __post_init__(self):
        if self.m > self.n_b:
            raise ConfigurationError(f"parity arity m={self.m} exceeds n_b={self.n_b}")
        if self.m < 1 or self.n_s < 1:
            raise ConfigurationError("need m >= 1 and n_s >= 1")
        if len(self.masks) != self.n_s:
            raise ConfigurationError("need one mask per control bit")
        for mask in self.masks:
            if len(mask) != self.m or len(set(mask)) != self.m or not all(0 <= i < self.n_b for i in mask):
                raise ConfigurationError(f"bad mask {mask}")
        if not self.alpha > 0:
            raise ConfigurationError("alpha must be > 0")

    @property
    def freq(self) -> np.ndarray:
        return SkillEnsemble(self.n_s, self.alpha).freq


def make_parity_task(n_s: int, n_b: int, m: int, alpha: float = 2.0, seed=None) -> ParityTask:
    if m > n_b:
        raise ConfigurationError(f"parity arity m={m} exceeds n_b={n_b}")
    rng = np.random.default_rng(seed)
    masks = tuple(tuple(int(i) for i in np.sort(rng.choice(n_b, size=m, replace=False))) for _ in range(n_s))
    return ParityTask(n_s, n_b, m, masks, alpha)


def gen_parity(task: ParityTask, n: int, seed=None):
    """``X`` (n, n_s + n_b) of 0/1 bytes, labels ``y`` (n,), and the drawn skill index."""
    if n < 1:
        raise ConfigurationError("n must be >= 1")
    rng = np.random.default_rng(seed)
    skill = rng.choice(task.n_s, size=n, p=task.freq)
    bits = rng.integers(0, 2, size=(n, task.n_b), dtype=np.uint8)
    masks = np.array(task.masks)
    y = (bits[np.arange(n)[:, None], masks[skill]].sum(axis=1) % 2).astype(np.uint8)
    x = np.zeros((n, task.n_s + task.n_b), dtype=np.uint8)
    x[np.arange(n), skill] = 1
    x[:, task.n_s:] = bits
    return x, y, skill


def parity_label(bits, mask) -> int:
    return int(sum(int(bits[i]) for i in mask) % 2)


def write_parity_csv(fh, x, y):
    """Rows ``bits,label`` with bits as a 0/1 character string."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["bits", "label"])
    for row, label in zip(np.asarray(x), np.asarray(y)):
        w.writerow(["".join("1" if b else "0" for b in row), int(label)])
