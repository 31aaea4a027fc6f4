import gzip
import logging
import struct

import numpy as np
import pytest

from linflow.errors import ConfigurationError, DataError, DivergenceError
from linflow.grokking import (
    GrokConfig,
    MITIGATIONS,
    companion_wide_scalar,
    configurations,
    load_dataset,
    load_mnist,
    read_idx,
    run_grok,
    synthetic_task,
    weight_to_target_ratio,
)
from linflow.mlp import lecun_init, mlp_forward, mlp_forward_backward, mlp_loss


def _fd_check(layers, x, y, scale, h=1e-6):
    _, grads = mlp_forward_backward(layers, x, y, scale)
    worst = 0.0
    for layer, g in zip(layers, grads):
        for idx in np.ndindex(layer.shape):
            old = layer[idx]
            layer[idx] = old + h
            up = mlp_loss(layers, x, y, scale)
            layer[idx] = old - h
            down = mlp_loss(layers, x, y, scale)
            layer[idx] = old
            fd = (up - down) / (2 * h)
            worst = max(worst, abs(fd - g[idx]) / max(abs(fd), abs(g[idx]), 1e-8))
    return worst


class TestMLP:
    @pytest.mark.parametrize("seed", range(5))
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        layers = lecun_init([4, 5, 3, 2], rng, ratio=1.5)
        layers = [w + 0.1 * rng.standard_normal(w.shape) for w in layers]
        x, y = rng.standard_normal((6, 4)), rng.standard_normal((6, 2))
        assert _fd_check(layers, x, y, 0.7) <= 1e-4

    def test_zero_weights(self):
        layers = [np.zeros((3, 4)), np.zeros(4), np.zeros((4, 2)), np.zeros(2)]
        x = np.ones((5, 3))
        y = np.tile([2.0, 0.0], (5, 1))
        value, grads = mlp_forward_backward(layers, x, y)
        assert value == pytest.approx(0.5 * 2.0 ** 2)
        assert all(np.all(g == 0) for g in grads[:2])

    def test_single_layer_is_linear_regression(self, rng):
        w, b = rng.standard_normal((3, 2)), rng.standard_normal(2)
        x, y = rng.standard_normal((7, 3)), rng.standard_normal((7, 2))
        r = x @ w + b - y
        value, (gw, gb) = mlp_forward_backward([w, b], x, y)
        assert value == pytest.approx(0.5 * np.sum(r * r) / 7)
        np.testing.assert_allclose(gw, x.T @ r / 7)
        np.testing.assert_allclose(gb, r.sum(axis=0) / 7)

    def test_output_scale(self, rng):
        layers = lecun_init([3, 4, 2], rng)
        x = rng.standard_normal((2, 3))
        np.testing.assert_allclose(mlp_forward(layers, x, 0.1), 0.1 * mlp_forward(layers, x))

    def test_lecun_ratio(self):
        layers = lecun_init([400, 300], np.random.default_rng(0), ratio=5.0)
        assert np.std(layers[0]) == pytest.approx(5.0 / 20.0, rel=0.02)
        assert np.all(layers[1] == 0)

    def test_ratio_one_is_baseline(self):
        a = lecun_init([5, 4, 3], np.random.default_rng(1))
        b = lecun_init([5, 4, 3], np.random.default_rng(1), ratio=1.0)
        for u, v in zip(a, b):
            np.testing.assert_array_equal(u, v)

    def test_divergence(self):
        layers = [np.full((1, 1), np.inf), np.zeros(1)]
        with pytest.raises(DivergenceError):
            mlp_forward_backward(layers, np.ones((1, 1)), np.zeros((1, 1)))


def _write_idx(path, magic, dims, payload, gz=False):
    raw = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims) + payload
    opener = gzip.open if gz else open
    with opener(path, "wb") as f:
        f.write(raw)


class TestIdx:
    def test_images_and_labels(self, tmp_path):
        img = np.arange(2 * 3 * 4, dtype=np.uint8)
        _write_idx(tmp_path / "img", 0x803, (2, 3, 4), img.tobytes())
        _write_idx(tmp_path / "lab.gz", 0x801, (3,), bytes([7, 1, 9]), gz=True)
        np.testing.assert_array_equal(read_idx(tmp_path / "img"), img.reshape(2, 3, 4))
        np.testing.assert_array_equal(read_idx(tmp_path / "lab.gz"), [7, 1, 9])

    def test_bad_magic(self, tmp_path):
        _write_idx(tmp_path / "bad", 0x802, (1,), b"\x00")
        with pytest.raises(DataError, match="magic"):
            read_idx(tmp_path / "bad")

    def test_truncated(self, tmp_path):
        _write_idx(tmp_path / "short", 0x801, (5,), b"\x01\x02")
        with pytest.raises(DataError):
            read_idx(tmp_path / "short")
        (tmp_path / "tiny").write_bytes(b"\x00\x00")
        with pytest.raises(DataError):
            read_idx(tmp_path / "tiny")

    def test_load_mnist_layout(self, tmp_path):
        rng = np.random.default_rng(0)
        for stem, n in (("train", 6), ("t10k", 4)):
            _write_idx(tmp_path / f"{stem}-images-idx3-ubyte", 0x803, (n, 2, 2),
                       rng.integers(0, 256, n * 4, dtype=np.uint8).tobytes())
            _write_idx(tmp_path / f"{stem}-labels-idx1-ubyte.gz", 0x801, (n,),
                       rng.integers(0, 10, n, dtype=np.uint8).tobytes(), gz=True)
        data = load_mnist(tmp_path, n_train=5, n_test=4)
        assert data.x_train.shape == (5, 4) and data.x_test.shape == (4, 4)
        assert data.source == "mnist" and data.x_train.max() <= 1.0

    def test_missing_files(self, tmp_path):
        with pytest.raises(DataError, match="missing"):
            load_mnist(tmp_path)


class TestDataset:
    def test_fallback_warns(self, tmp_path, caplog):
        with caplog.at_level(logging.WARNING):
            data = load_dataset(tmp_path, n_train=20, n_test=10)
        assert data.source == "synthetic" and "synthetic" in caplog.text

    def test_no_fallback(self, tmp_path, monkeypatch):
        monkeypatch.delenv("DATA_DIR", raising=False)
        with pytest.raises(DataError):
            load_dataset(tmp_path, allow_synthetic=False)
        with pytest.raises(DataError):
            load_dataset(None, allow_synthetic=False)

    def test_synthetic_deterministic_and_separable(self):
        a, b = synthetic_task(seed=3), synthetic_task(seed=3)
        np.testing.assert_array_equal(a.x_train, b.x_train)
        # nearest class centroid separates the clusters
        cents = np.stack([a.x_train[a.y_train == k].mean(axis=0) for k in range(a.c)])
        pred = ((a.x_test[:, None] - cents[None]) ** 2).sum(axis=2).argmin(axis=1)
        assert np.mean(pred == a.y_test) == 1.0
        assert np.all(np.bincount(a.y_train, minlength=10) > 50)

    def test_synthetic_invalid(self):
        with pytest.raises(ConfigurationError):
            synthetic_task(d=5, c=10)


class TestConfig:
    def test_table(self):
        cfgs = configurations()
        assert list(cfgs) == ["default", *MITIGATIONS]
        assert cfgs["default"].weight_init_ratio == 5.0 and cfgs["default"].target_scale == 3.0
        assert cfgs["input_downscaling"].input_scale == 0.01
        assert cfgs["output_downscaling"].output_scale == 0.1

    def test_every_mitigation_lowers_ratio(self):
        cfgs = configurations()
        base = weight_to_target_ratio(cfgs["default"])
        for name in MITIGATIONS:
            assert weight_to_target_ratio(cfgs[name]) < base

    def test_companion_kernel_motion_follows_ratio(self):
        cfgs = configurations()
        _, base = companion_wide_scalar(cfgs["default"])
        for name in MITIGATIONS:
            assert companion_wide_scalar(cfgs[name])[1] >= base

    @pytest.mark.parametrize("kw", [dict(lr=0.0), dict(width=0), dict(wd=-1.0), dict(threshold=1.5),
                                    dict(target_scale=-3.0)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigurationError):
            GrokConfig(**kw)

    def test_desk(self):
        cfg = GrokConfig().desk(epochs=10)
        assert cfg.width == 128 and cfg.epochs == 10 and cfg.depth == 4


class TestRun:
    def test_small_run(self):
        data = synthetic_task(d=16, c=4, n_train=64, n_test=64, seed=0)
        cfg = GrokConfig(width=16, epochs=30, batch=32, lr=3e-3, weight_init_ratio=1.0)
        a = run_grok(cfg, data, seed=1)
        b = run_grok(cfg, data, seed=1)
        np.testing.assert_array_equal(a.train_loss, b.train_loss)
        assert a.train_converged and a.t_train90 >= 1
        rows = list(a.rows())
        assert len(rows) == 30 and rows[0][0] == 1
        if a.test_converged:
            assert a.gap == a.t_test90 - a.t_train90

    def test_missing_data(self):
        with pytest.raises(DataError):
            run_grok(GrokConfig(), None)
