"""Neural-collapse metrics and small-init linear-network training runs."""
from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np

from .core import InputStatistics, ModelSpec, ParamState, TargetSpec, random_orthogonal
from .errors import ConfigurationError, DegenerateError, NonConvergenceError
from .integrator import FlowConfig, Trajectory, integrate

ETF_TOLERANCE = 0.05
RANK_THRESHOLD = 1e-3


@dataclass(frozen=True)
class NCReport:
    nc1: float
    nc2_max_dev: float
    nc3_max_dev: float
    nc4_agreement: float
    effective_rank: int
    singular_values: tuple

    def as_row(self) -> dict:
        row = asdict(self)
        row.pop("singular_values")
        return row


def _class_index(labels, c=None):
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels.argmax(axis=1)
    return labels.astype(int), (int(labels.max()) + 1 if c is None else c)


def class_statistics(features, labels, c: Optional[int] = None):
    """Class means, global mean and within-class covariance (1/n normalization).

    Classes must be balanced.
    """
    h = np.asarray(features, dtype=np.float64)
    y, c = _class_index(labels, c)
    n = h.shape[0]
    counts = np.bincount(y, minlength=c)
    if n % c or np.any(counts != n // c):
        raise ConfigurationError(f"classes must be balanced, got counts {counts.tolist()}")
    means = np.stack([h[y == k].mean(axis=0) for k in range(c)])
    mu_g = means.mean(axis=0)
    centered = h - means[y]
    sigma_w = centered.T @ centered / n
    return means, mu_g, sigma_w


def effective_rank(m, threshold: float = RANK_THRESHOLD) -> int:
    sv = np.linalg.svd(np.asarray(m), compute_uv=False)
    if sv.size == 0 or sv[0] == 0:
        return 0
    return int(np.sum(sv > threshold * sv[0]))


def nc_report(features, labels, w, b=None, rank_threshold: float = RANK_THRESHOLD) -> NCReport:
    """The four collapse conditions for features ``(n, p)`` and last layer ``w (p, c)``."""
    h = np.asarray(features, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    y, c = _class_index(labels, w.shape[1])
    b = np.zeros(c) if b is None else np.asarray(b, dtype=np.float64)
    means, mu_g, sigma_w = class_statistics(h, y, c)

    dev = means - mu_g
    norms = np.linalg.norm(dev, axis=1)
    if np.any(norms <= 1e-300):
        raise DegenerateError("a class mean coincides with the global mean")
    sigma_b = dev.T @ dev / c
    nc1 = float(np.trace(sigma_w) / np.trace(sigma_b))

    unit = dev / norms[:, None]
    cos = unit @ unit.T
    etf = (c * np.eye(c) - 1.0) / (c - 1)
    nc2 = float(np.max(np.abs(cos - etf)))

    wn = np.linalg.norm(w, axis=0)
    if np.any(wn <= 1e-300):
        raise DegenerateError("zero classifier column")
    nc3 = float(np.max(np.linalg.norm(w.T / wn[:, None] - unit, axis=1)))

    logits = h @ w + b
    dists = ((h[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    nc4 = float(np.mean(logits.argmax(axis=1) == dists.argmin(axis=1)))

    sv = np.linalg.svd(h, compute_uv=False)
    rank = int(np.sum(sv > rank_threshold * sv[0])) if sv[0] > 0 else 0
    return NCReport(nc1, nc2, nc3, nc4, rank, tuple(float(s) for s in sv))


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CollapseData:
    x: np.ndarray
    y: np.ndarray        # one-hot (n, c)
    labels: np.ndarray   # class index (n,)


def collapse_data(n: int, d: int, c: int, separation: float = 3.0, noise: float = 1.0,
                  seed=None) -> CollapseData:
    """Balanced Gaussian class clusters whose labels are exactly linearly realizable.

    Class ``k`` sits at ``separation * q_k`` for orthonormal ``q_k``; the
    within-class Gaussian noise lives in the orthogonal complement of the
    class-mean subspace, so ``X`` has full column rank and ``Y = X B`` has a
    solution.
    """
    if n % c or n < c or d <= c:
        raise ConfigurationError("need n divisible by c, n >= c and d > c")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(c), n // c)
    rng.shuffle(labels)
    y = np.eye(c)[labels]
    q = random_orthogonal(d, rng)
    x = separation * y @ q[:, :c].T + noise * rng.standard_normal((n, d - c)) @ q[:, c:].T
    return CollapseData(x, y, labels)


def norm_init(shapes, scale: float, rng) -> ParamState:
    """Gaussian layers rescaled to Frobenius norm ``scale`` each."""
    out = []
    for s in shapes:
        g = rng.standard_normal(s)
        out.append(g * (scale / np.linalg.norm(g)))
    return ParamState(tuple(out))


@dataclass
class CollapseRun:
    trajectory: Trajectory
    reports: list          # (t, NCReport)
    data: CollapseData
    init: ParamState

    @property
    def final(self) -> NCReport:
        return self.reports[-1][1]


def train_collapse(n: int = 60, d: int = 20, p: int = 20, c: int = 3, init_scale: float = 1e-3,
                   cfg: Optional[FlowConfig] = None, seed=0, separation: float = 3.0,
                   noise: float = 1.0, target_loss: float = 1e-10, report_every: int = 10) -> CollapseRun:
    """Integrate a linear network on realizable one-hot labels and track NC metrics."""
    if n < c or d < c or p < c:
        raise ConfigurationError("need n, d, p >= c")
    cfg = cfg or FlowConfig(t_end=500.0, record_every=1.0, rel_tol=1e-9, abs_tol=1e-13,
                            stop_loss=target_loss * 0.1)
    data = collapse_data(n, d, c, separation, noise, seed)
    spec = ModelSpec("lnn", d=d, p=p, c=c)
    rng = np.random.default_rng(None if seed is None else seed + 7919)
    init = norm_init(spec.layer_shapes(), init_scale, rng)
    target = TargetSpec(labels=data.y)
    stats = InputStatistics(samples=data.x)
    def features(t, s):
        return s[0].copy(), s[1].copy()

    traj = integrate(spec, init, target, stats, cfg, observers={"weights": features})
    reports = []
    for i in range(0, len(traj.times), report_every):
        w1, w2 = traj["weights"][i]
        reports.append((float(traj.times[i]), _safe_report(data, w1, w2)))
    if (len(traj.times) - 1) % report_every:
        w1, w2 = traj["weights"][-1]
        reports.append((float(traj.times[-1]), _safe_report(data, w1, w2)))
    run = CollapseRun(traj, reports, data, init)
    if traj["loss"][-1] > target_loss:
        raise NonConvergenceError(
            f"loss {traj['loss'][-1]:.3g} above {target_loss:g} at t={traj.times[-1]:g}", traj)
    return run


def _safe_report(data: CollapseData, w1, w2):
    try:
        return nc_report(data.x @ w1, data.labels, w2)
    except DegenerateError:
        return None
