"""Model families, parameter states, targets, MSE loss and exact gradients.

Every two-layer family is reduced to its end-to-end linear map ``B`` (a
``d x c`` matrix).  The loss only sees ``B``; the chain rule through the
family's factorization then gives the per-layer gradients.  MlpTanh is the
one non-linear family and is delegated to :mod:`linflow.mlp`.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .errors import (
    ConfigurationError,
    InfeasibleInitError,
    NumericError,
    UnsupportedFamilyError,
)


class Family(str, Enum):
    LINEAR = "linear"
    DIAG_LNN = "diag_lnn"
    LNN = "lnn"
    WIDE_SCALAR = "wide_scalar"
    UFM = "ufm"
    MLP_TANH = "mlp_tanh"


TWO_LAYER = (Family.DIAG_LNN, Family.LNN, Family.WIDE_SCALAR, Family.UFM)


@dataclass(frozen=True)
class ModelSpec:
    """Declarative model description.

    ``d`` input dim, ``p`` hidden width, ``c`` output dim, ``z`` output
    normalization.  For UFM ``d`` is the number of training points (the
    feature matrix is ``d x p``).  ``depth`` counts linear layers of the
    tanh MLP and is ignored elsewhere.
    """

    family: Family
    d: int
    p: int = 1
    c: int = 1
    z: float = 1.0
    depth: int = 2

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        if self.d < 1 or self.c < 1:
            raise ConfigurationError(f"d and c must be >= 1, got d={self.d}, c={self.c}")
        if self.family not in (Family.LINEAR, Family.DIAG_LNN) and self.p < 1:
            raise ConfigurationError(f"p must be >= 1 for {self.family.value}")
        if not self.z > 0:
            raise ConfigurationError(f"z must be > 0, got {self.z}")
        if self.family is Family.WIDE_SCALAR and (self.d != 1 or self.c != 1):
            raise ConfigurationError("wide_scalar forces d = c = 1")
        if self.family is Family.DIAG_LNN and self.c != 1:
            raise ConfigurationError("diag_lnn has scalar output (c = 1)")
        if self.family is Family.MLP_TANH and self.depth < 1:
            raise ConfigurationError("mlp_tanh needs depth >= 1")

    def layer_shapes(self) -> list[tuple[int, ...]]:
        f = self.family
        if f is Family.LINEAR:
            return [(self.d, self.c)]
        if f is Family.DIAG_LNN:
            return [(self.d,), (self.d,)]
        if f is Family.WIDE_SCALAR:
            return [(self.p,), (self.p,)]
        if f in (Family.LNN, Family.UFM):
            return [(self.d, self.p), (self.p, self.c)]
        widths = [self.d] + [self.p] * (self.depth - 1) + [self.c]
        shapes: list[tuple[int, ...]] = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            shapes += [(fan_in, fan_out), (fan_out,)]
        return shapes


@dataclass(frozen=True)
class ParamState:
    """Per-layer parameters at flow time ``t``; arrays are read-only copies."""

    layers: tuple
    t: float = 0.0

    def __post_init__(self):
        frozen = []
        for w in self.layers:
            a = np.array(w, dtype=np.float64, copy=True)
            a.setflags(write=False)
            frozen.append(a)
        object.__setattr__(self, "layers", tuple(frozen))

    def __getitem__(self, k):
        return self.layers[k]

    def __len__(self):
        return len(self.layers)

    def flat(self) -> np.ndarray:
        return np.concatenate([w.ravel() for w in self.layers])

    @classmethod
    def from_flat(cls, vec, shapes, t=0.0) -> "ParamState":
        out, i = [], 0
        for s in shapes:
            n = int(np.prod(s))
            out.append(np.asarray(vec[i:i + n]).reshape(s))
            i += n
        return cls(tuple(out), t)

    def with_time(self, t: float) -> "ParamState":
        return ParamState(self.layers, t)


@dataclass(frozen=True)
class TargetSpec:
    """Exactly one of ``scales`` (d,), ``correlation`` (d, c), ``labels`` (n, c)."""

    scales: Optional[np.ndarray] = None
    correlation: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        given = [x is not None for x in (self.scales, self.correlation, self.labels)]
        if sum(given) != 1:
            raise ConfigurationError("TargetSpec needs exactly one of scales, correlation, labels")
        for name in ("scales", "correlation", "labels"):
            v = getattr(self, name)
            if v is not None:
                a = np.array(v, dtype=np.float64)
                if not np.all(np.isfinite(a)):
                    raise NumericError(f"non-finite {name}")
                object.__setattr__(self, name, a)
        if self.labels is not None:
            y = self.labels
            if y.ndim != 2:
                raise ConfigurationError("labels must be an (n, c) matrix")
            if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1)):
                raise ConfigurationError("label rows must be one-hot")


@dataclass(frozen=True)
class InputStatistics:
    """Population second moments (diagonal) or a finite sample matrix."""

    variances: Optional[np.ndarray] = None
    whitened: bool = False
    samples: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.variances is not None:
            v = np.array(self.variances, dtype=np.float64).ravel()
            if np.any(v < 0) or not np.all(np.isfinite(v)):
                raise ConfigurationError("variances must be finite and >= 0")
            if self.whitened and not np.allclose(v, 1.0):
                raise ConfigurationError("whitened inputs require unit variances")
            object.__setattr__(self, "variances", v)
        if self.samples is not None:
            x = np.array(self.samples, dtype=np.float64)
            if x.ndim != 2 or x.shape[0] < 1:
                raise ConfigurationError("samples must be an (n, d) matrix with n >= 1")
            if not np.all(np.isfinite(x)):
                raise NumericError("non-finite samples")
            object.__setattr__(self, "samples", x)

    @classmethod
    def white(cls, d: int) -> "InputStatistics":
        return cls(variances=np.ones(d), whitened=True)


# ---------------------------------------------------------------------------
# end-to-end map


def end_to_end(spec: ModelSpec, params: ParamState) -> np.ndarray:
    """The ``d x c`` matrix ``B`` with ``f(x) = x^T B``."""
    f = spec.family
    if f is Family.LINEAR:
        return params[0]
    if f is Family.DIAG_LNN:
        return (params[0] * params[1])[:, None]
    if f is Family.WIDE_SCALAR:
        return np.array([[np.dot(params[0], params[1]) / spec.z]])
    if f in (Family.LNN, Family.UFM):
        return params[0] @ params[1]
    raise UnsupportedFamilyError(f"{f.value} has no end-to-end linear map")


def _chain(spec: ModelSpec, params: ParamState, g_b: np.ndarray) -> list[np.ndarray]:
    """Pull dL/dB back to dL/d(layer)."""
    f = spec.family
    if f is Family.LINEAR:
        return [g_b]
    if f is Family.DIAG_LNN:
        g = g_b[:, 0]
        return [g * params[1], g * params[0]]
    if f is Family.WIDE_SCALAR:
        g = g_b[0, 0] / spec.z
        return [g * params[1], g * params[0]]
    return [g_b @ params[1].T, params[0].T @ g_b]


def _check(spec: ModelSpec, params: ParamState):
    shapes = spec.layer_shapes()
    if len(params) != len(shapes):
        raise ConfigurationError(f"expected {len(shapes)} layers, got {len(params)}")
    for k, (w, s) in enumerate(zip(params.layers, shapes)):
        if w.shape != tuple(s):
            raise ConfigurationError(f"layer {k} has shape {w.shape}, expected {tuple(s)}")
        if not np.all(np.isfinite(w)):
            raise NumericError(f"layer {k} has non-finite entries")


def _population_moments(spec: ModelSpec, target: TargetSpec, stats: InputStatistics):
    """(Sigma_xx, B*) for a realizable population target."""
    if stats.whitened and stats.variances is None:
        var = np.ones(spec.d)
    elif stats.variances is not None:
        var = stats.variances
    else:
        raise ConfigurationError("population loss needs variances or whitened=True")
    if var.shape != (spec.d,):
        raise ConfigurationError(f"variances must have length d={spec.d}")
    sxx = np.diag(var)
    if target.scales is not None:
        s = target.scales.ravel()
        if s.shape != (spec.d,) or spec.c != 1:
            raise ConfigurationError("scales target needs length d and c = 1")
        b_star = s[:, None]
    elif target.correlation is not None:
        corr = target.correlation.reshape(spec.d, -1) if target.correlation.ndim == 1 else target.correlation
        if corr.shape != (spec.d, spec.c):
            raise ConfigurationError(f"correlation must be {(spec.d, spec.c)}, got {corr.shape}")
        b_star = np.linalg.pinv(sxx) @ corr
    else:
        raise ConfigurationError("labels need input samples")
    return sxx, b_star


def _sample_data(spec: ModelSpec, target: TargetSpec, stats: InputStatistics):
    x = stats.samples
    if x is None:
        if spec.family is not Family.UFM:
            raise ConfigurationError("sample path needs stats.samples")
        x = np.eye(spec.d)
    if x.shape[1] != spec.d:
        raise ConfigurationError(f"samples have {x.shape[1]} columns, expected d={spec.d}")
    if target.labels is not None:
        y = target.labels
    elif target.scales is not None:
        y = x @ target.scales.reshape(spec.d, 1)
    else:
        # realizable teacher through the population correlation
        y = x @ target.correlation.reshape(spec.d, spec.c)
    if y.shape != (x.shape[0], spec.c):
        raise ConfigurationError(f"labels must be {(x.shape[0], spec.c)}, got {y.shape}")
    return x, y


def _uses_samples(spec, target, stats):
    return stats.samples is not None or target.labels is not None or spec.family is Family.UFM


class Objective:
    """Loss and gradient with data moments precomputed once.

    Works on plain lists of arrays so integrators can call it in a tight loop.
    """

    def __init__(self, spec: ModelSpec, target: TargetSpec, stats: InputStatistics):
        self.spec = spec
        self.shapes = [tuple(s) for s in spec.layer_shapes()]
        self.sizes = [int(np.prod(s)) for s in self.shapes]
        self.sample = spec.family is Family.MLP_TANH or _uses_samples(spec, target, stats)
        if self.sample:
            self.x, self.y = _sample_data(spec, target, stats)
        else:
            self.sxx, self.b_star = _population_moments(spec, target, stats)

    def unflatten(self, vec) -> list[np.ndarray]:
        out, i = [], 0
        for s, n in zip(self.shapes, self.sizes):
            out.append(vec[i:i + n].reshape(s))
            i += n
        return out

    def loss(self, layers) -> float:
        spec = self.spec
        if spec.family is Family.MLP_TANH:
            from .mlp import mlp_loss

            return mlp_loss(layers, self.x, self.y, 1.0 / spec.z)
        b = end_to_end(spec, layers)
        if self.sample:
            r = self.x @ b - self.y
            return 0.5 * float(np.sum(r * r)) / self.x.shape[0]
        e = b - self.b_star
        return 0.5 * float(np.sum(e * (self.sxx @ e)))

    def grad(self, layers) -> list[np.ndarray]:
        spec = self.spec
        if spec.family is Family.MLP_TANH:
            from .mlp import mlp_forward_backward

            return mlp_forward_backward(layers, self.x, self.y, 1.0 / spec.z)[1]
        b = end_to_end(spec, layers)
        if self.sample:
            g_b = self.x.T @ (self.x @ b - self.y) / self.x.shape[0]
        else:
            g_b = self.sxx @ (b - self.b_star)
        return _chain(spec, layers, g_b)

    def flow(self, vec: np.ndarray) -> np.ndarray:
        """Flat gradient-flow velocity ``-grad L``."""
        return -np.concatenate([g.ravel() for g in self.grad(self.unflatten(vec))])


def loss(spec: ModelSpec, params: ParamState, target: TargetSpec, stats: InputStatistics) -> float:
    """Half mean squared error, ``0.5 E[(f*(x) - f(x))^2]`` summed over outputs."""
    _check(spec, params)
    return Objective(spec, target, stats).loss(params.layers)


def loss_grad(spec: ModelSpec, params: ParamState, target: TargetSpec, stats: InputStatistics) -> list[np.ndarray]:
    """dL/d(layer) for every layer."""
    _check(spec, params)
    return Objective(spec, target, stats).grad(params.layers)


def gradient(spec: ModelSpec, params: ParamState, target: TargetSpec, stats: InputStatistics) -> ParamState:
    """Gradient-flow velocity ``-dL/dtheta`` shaped like ``params``."""
    return ParamState(tuple(-g for g in loss_grad(spec, params, target, stats)), params.t)


def conserved_quantity(spec: ModelSpec, params: ParamState) -> np.ndarray:
    """``a_i^2 - b_i^2`` for diagonal/scalar families, ``W1^T W1 - W2 W2^T`` for matrix ones."""
    f = spec.family
    if f in (Family.DIAG_LNN, Family.WIDE_SCALAR):
        return params[0] ** 2 - params[1] ** 2
    if f in (Family.LNN, Family.UFM):
        w1, w2 = params[0], params[1]
        return w1.T @ w1 - w2 @ w2.T
    raise UnsupportedFamilyError(f"no conserved quantity for {f.value}")


# ---------------------------------------------------------------------------
# initializations


def random_orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def lambda_balanced_init(
    d: int,
    c: int,
    lam: float,
    absolute_scale: float,
    seed=None,
    p: Optional[int] = None,
    equal: bool = False,
) -> ParamState:
    """Two-layer weights with ``W2 W2^T - W1^T W1 = lam * I`` and ``||W1 W2||_F = absolute_scale``.

    Layers share a random inner basis ``R``.  On the ``r = min(d, p, c)``
    coupled directions the lighter layer gets singular values ``k * q_i``
    (``q`` a random Gaussian singular-value profile, or all equal when
    ``equal``) and the heavier one ``sqrt(light_i^2 + |lam|)``; ``k`` is solved
    so the product has the requested norm.  For rectangular shapes the
    remaining ``p - r`` inner directions live in one layer only; they are set
    to ``sqrt(|lam|)`` when the sign of ``lam`` allows it and to zero otherwise,
    so the identity holds exactly on the coupled subspace and, where feasible,
    everywhere.
    """
    p = d if p is None else p
    if d < 1 or c < 1 or p < 1:
        raise InfeasibleInitError("dimensions must be positive")
    if not (np.isfinite(lam) and np.isfinite(absolute_scale)) or absolute_scale < 0:
        raise InfeasibleInitError(f"infeasible lam={lam}, absolute_scale={absolute_scale}")
    rng = np.random.default_rng(seed)
    r = min(d, p, c)
    q2 = np.ones(r) if equal else np.linalg.svd(rng.standard_normal((r, r)), compute_uv=False) ** 2
    q2 = q2 / q2.sum()
    # scale^2 = sum light_i * (light_i + |lam|) with light_i = kappa * q2_i
    a, b = float(np.sum(q2 * q2)), abs(lam)
    kappa = 2.0 * absolute_scale ** 2 / (b + np.sqrt(b * b + 4.0 * a * absolute_scale ** 2)) if absolute_scale > 0 else 0.0
    light = kappa * q2
    heavy = light + abs(lam)
    s1_sq, s2_sq = (light, heavy) if lam >= 0 else (heavy, light)

    u, rr, v = random_orthogonal(d, rng), random_orthogonal(p, rng), random_orthogonal(c, rng)
    sig1 = np.zeros((d, p))
    sig2 = np.zeros((p, c))
    idx = np.arange(r)
    sig1[idx, idx] = np.sqrt(s1_sq)
    sig2[idx, idx] = np.sqrt(s2_sq)
    for j in range(r, p):
        # inner direction present in only one layer
        if j < d and lam < 0:
            sig1[j, j] = np.sqrt(-lam)
        if j < c and lam > 0:
            sig2[j, j] = np.sqrt(lam)
    w1 = u @ sig1 @ rr.T
    w2 = rr @ sig2 @ v.T
    return ParamState((w1, w2))


def small_init(spec: ModelSpec, scale: float, seed=None, balanced: bool = False) -> ParamState:
    """Gaussian init with per-entry std ``scale / sqrt(fan_in)``.

    ``balanced=True`` uses equal layers for the diagonal/scalar families.
    """
    rng = np.random.default_rng(seed)
    layers = []
    for s in spec.layer_shapes():
        fan_in = s[0] if len(s) == 2 else 1
        layers.append(rng.standard_normal(s) * scale / np.sqrt(fan_in))
    if balanced and spec.family in (Family.DIAG_LNN, Family.WIDE_SCALAR):
        layers[1] = layers[0].copy()
    return ParamState(tuple(layers))


def zeros(spec: ModelSpec) -> ParamState:
    return ParamState(tuple(np.zeros(s) for s in spec.layer_shapes()))


def num_grad(fun, params: ParamState, h: float = 1e-6) -> list[np.ndarray]:
    """Central finite differences of a scalar function of a ParamState."""
    shapes = [w.shape for w in params.layers]
    x0 = params.flat()
    g = np.zeros_like(x0)
    for i in range(x0.size):
        step = h * max(1.0, abs(x0[i]))
        xp, xm = x0.copy(), x0.copy()
        xp[i] += step
        xm[i] -= step
        g[i] = (fun(ParamState.from_flat(xp, shapes)) - fun(ParamState.from_flat(xm, shapes))) / (2 * step)
    return list(ParamState.from_flat(g, shapes).layers)
