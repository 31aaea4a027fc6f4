"""Tanh-MLP grokking harness: scale knobs, data loading and the accuracy-gap metric."""
from __future__ import annotations

import gzip
import logging
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .analytic import gamma_solution
from .core import InputStatistics, ModelSpec, ParamState, TargetSpec
from .errors import ConfigurationError, DataError
from .integrator import Adam, AdamState, FlowConfig, integrate
from .mlp import lecun_init, mlp_forward, mlp_forward_backward
from .regimes import wide_scalar_kernel_distance

log = logging.getLogger(__name__)

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


@dataclass(frozen=True)
class GrokConfig:
    weight_init_ratio: float = 5.0
    target_scale: float = 3.0
    input_scale: float = 1.0
    output_scale: float = 1.0
    depth: int = 4
    width: int = 512
    epochs: int = 2000
    batch: int = 128
    lr: float = 1e-3
    wd: float = 1e-4
    threshold: float = 0.9

    def __post_init__(self):
        for name in ("weight_init_ratio", "target_scale", "input_scale", "output_scale", "lr"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be > 0")
        if self.depth < 1 or self.width < 1 or self.epochs < 1 or self.batch < 1:
            raise ConfigurationError("depth, width, epochs and batch must be >= 1")
        if self.wd < 0:
            raise ConfigurationError("wd must be >= 0")
        if not 0 < self.threshold <= 1:
            raise ConfigurationError("threshold must lie in (0, 1]")

    def desk(self, width: int = 128, epochs: Optional[int] = None) -> "GrokConfig":
        return replace(self, width=width, epochs=self.epochs if epochs is None else epochs)


DEFAULT = GrokConfig()
MITIGATIONS = {
    "weight_downscaling": {"weight_init_ratio": 1.0},
    "target_upscaling": {"target_scale": 30.0},
    "input_downscaling": {"input_scale": 0.01},
    "output_downscaling": {"output_scale": 0.1},
}


def configurations(base: GrokConfig = DEFAULT) -> dict:
    """The default setting followed by the four single-knob mitigations."""
    out = {"default": base}
    out.update({k: replace(base, **v) for k, v in MITIGATIONS.items()})
    return out


def weight_to_target_ratio(cfg: GrokConfig) -> float:
    """Relative ``Sigma0 / S`` of a configuration, normalized to 1 at unit knobs.

    Weights enter quadratically; input and output scale multiply the function,
    so they act like dividing the target.
    """
    return cfg.weight_init_ratio ** 2 * cfg.input_scale * cfg.output_scale / cfg.target_scale


def companion_wide_scalar(cfg: GrokConfig, p: int = 64, seed=0) -> tuple:
    """``(gamma_plus, kernel distance)`` of a wide scalar model with the knobs of ``cfg``.

    Weights are ``weight_init_ratio * N(0, 1/p)``, the target is
    ``target_scale`` and input and output scales fold into the output
    normalization ``z = 1 / (input_scale * output_scale)``, so its
    ``Sigma0 / S`` is proportional to ``weight_to_target_ratio(cfg)``.
    """
    rng = np.random.default_rng(seed)
    a0 = cfg.weight_init_ratio * rng.standard_normal(p) / np.sqrt(p)
    b0 = cfg.weight_init_ratio * rng.standard_normal(p) / np.sqrt(p)
    z = 1.0 / (cfg.input_scale * cfg.output_scale)
    sol = gamma_solution(a0, b0, cfg.target_scale, z)
    spec = ModelSpec("wide_scalar", d=1, p=p, z=z)
    traj = integrate(spec, ParamState((a0, b0)), TargetSpec(scales=[cfg.target_scale]), InputStatistics.white(1),
                     FlowConfig(t_end=40.0 / sol.rate, stop_loss=None))
    a, b = traj.final_state.layers
    return sol.gamma_plus, wide_scalar_kernel_distance(a0, b0, a, b)


# ---------------------------------------------------------------------------
# data


@dataclass(frozen=True)
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray    # class index
    x_test: np.ndarray
    y_test: np.ndarray
    c: int
    source: str = "synthetic"


def synthetic_task(d: int = 64, c: int = 10, n_train: int = 1000, n_test: int = 1000,
                   margin: float = 1.0, noise: float = 0.06, seed=0) -> Dataset:
    """Isotropic Gaussian clusters around ``margin`` times orthonormal class directions."""
    if not margin > 0 or noise < 0:
        raise ConfigurationError("margin must be > 0 and noise >= 0")
    if c > d or c < 2:
        raise ConfigurationError("need 2 <= c <= d")
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((d, c)))
    means = margin * q.T

    def draw(n):
        y = rng.integers(0, c, n)
        return means[y] + noise * rng.standard_normal((n, d)), y

    xtr, ytr = draw(n_train)
    xte, yte = draw(n_test)
    return Dataset(xtr, ytr, xte, yte, c, "synthetic")


def read_idx(path) -> np.ndarray:
    """Read an IDX file (optionally gzipped) with magic 0x803 (images) or 0x801 (labels)."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8:
        raise DataError(f"{path}: truncated header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic == IDX_IMAGES:
        n, rows, cols = struct.unpack(">III", raw[4:16])
        shape, offset = (n, rows, cols), 16
    elif magic == IDX_LABELS:
        (n,) = struct.unpack(">I", raw[4:8])
        shape, offset = (n,), 8
    else:
        raise DataError(f"{path}: bad magic {magic:#010x}")
    size = int(np.prod(shape))
    if len(raw) - offset < size:
        raise DataError(f"{path}: expected {size} bytes of data, got {len(raw) - offset}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=offset).reshape(shape)


def _find(data_dir: Path, stem: str) -> Optional[Path]:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        if (data_dir / name).exists():
            return data_dir / name
    return None


def load_mnist(data_dir, n_train: int = 1000, n_test: int = 10000, seed=0) -> Dataset:
    data_dir = Path(data_dir)
    paths = {k: _find(data_dir, v) for k, v in MNIST_FILES.items()}
    missing = [MNIST_FILES[k] for k, p in paths.items() if p is None]
    if missing:
        raise DataError(f"MNIST files missing in {data_dir}: {', '.join(missing)}")
    xtr = read_idx(paths["train_images"])
    ytr = read_idx(paths["train_labels"])
    xte = read_idx(paths["test_images"])
    yte = read_idx(paths["test_labels"])
    if len(xtr) != len(ytr) or len(xte) != len(yte):
        raise DataError("image and label counts differ")
    rng = np.random.default_rng(seed)
    itr = rng.choice(len(xtr), size=min(n_train, len(xtr)), replace=False)
    ite = np.arange(min(n_test, len(xte)))
    flat = lambda a: a.reshape(len(a), -1).astype(np.float64) / 255.0
    return Dataset(flat(xtr[itr]), ytr[itr].astype(int), flat(xte[ite]), yte[ite].astype(int), 10, "mnist")


def load_dataset(data_dir=None, n_train: int = 1000, n_test: int = 1000, seed=0,
                 allow_synthetic: bool = True) -> Dataset:
    """MNIST from ``data_dir`` (or ``$DATA_DIR``); falls back to ``synthetic_task``."""
    data_dir = data_dir or os.environ.get("DATA_DIR")
    if data_dir:
        try:
            return load_mnist(data_dir, n_train, n_test, seed)
        except DataError as e:
            if not allow_synthetic:
                raise
            log.warning("MNIST unavailable (%s); using the synthetic task", e)
    elif not allow_synthetic:
        raise DataError("no DATA_DIR given and synthetic fallback disabled")
    else:
        log.warning("DATA_DIR not set; using the synthetic task")
    return synthetic_task(n_train=n_train, n_test=n_test, seed=seed)


# ---------------------------------------------------------------------------
# training


@dataclass
class GrokResult:
    train_loss: np.ndarray
    test_loss: np.ndarray
    train_acc: np.ndarray
    test_acc: np.ndarray
    t_train90: Optional[int]     # first epoch (1-based) at or above threshold
    t_test90: Optional[int]
    config: GrokConfig = field(default_factory=GrokConfig)

    @property
    def train_converged(self) -> bool:
        return self.t_train90 is not None

    @property
    def test_converged(self) -> bool:
        return self.t_test90 is not None

    @property
    def gap(self) -> Optional[int]:
        if self.t_train90 is None or self.t_test90 is None:
            return None
        return self.t_test90 - self.t_train90

    def rows(self):
        for e in range(len(self.train_acc)):
            yield (e + 1, self.train_loss[e], self.test_loss[e], self.train_acc[e], self.test_acc[e])


def _first_epoch(acc, threshold) -> Optional[int]:
    hit = np.nonzero(acc >= threshold)[0]
    return int(hit[0]) + 1 if hit.size else None


def _evaluate(layers, x, y, target, c, out_scale):
    out = mlp_forward(layers, x, out_scale)
    r = out - target * np.eye(c)[y]
    return 0.5 * float(np.sum(r * r)) / len(y), float(np.mean(out.argmax(axis=1) == y))


def run_grok(config: GrokConfig, data: Dataset, seed=0) -> GrokResult:
    """Train the tanh MLP with Adam and record per-epoch losses and accuracies."""
    if data is None:
        raise DataError("no dataset")
    rng = np.random.default_rng(seed)
    d = data.x_train.shape[1]
    widths = [d] + [config.width] * (config.depth - 1) + [data.c]
    layers = lecun_init(widths, rng, config.weight_init_ratio)
    xtr = config.input_scale * data.x_train
    xte = config.input_scale * data.x_test
    ytr_scaled = config.target_scale * np.eye(data.c)[data.y_train]
    opt = AdamState(layers, Adam(), config.lr, config.wd)
    n = len(xtr)

    hist = np.zeros((4, config.epochs))
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        for i in range(0, n, config.batch):
            idx = perm[i:i + config.batch]
            _, grads = mlp_forward_backward(layers, xtr[idx], ytr_scaled[idx], config.output_scale)
            opt.step(layers, grads)
        hist[0, epoch], hist[2, epoch] = _evaluate(layers, xtr, data.y_train, config.target_scale,
                                                   data.c, config.output_scale)
        hist[1, epoch], hist[3, epoch] = _evaluate(layers, xte, data.y_test, config.target_scale,
                                                   data.c, config.output_scale)
    return GrokResult(hist[0], hist[1], hist[2], hist[3],
                      _first_epoch(hist[2], config.threshold), _first_epoch(hist[3], config.threshold),
                      config)
