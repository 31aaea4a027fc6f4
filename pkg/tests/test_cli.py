import csv
import hashlib
import json

import numpy as np
import pytest

from linflow.cli import csv_text, fmt, main, run
from linflow.config import ConfigError, load_config, parse_config


def _config(tmp_path, obj, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(obj))
    return str(path)


def _read_csv(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


class TestConfig:
    def test_empty_object_is_validate_defaults(self):
        cfg = parse_config({})
        assert cfg.command == "validate" and cfg.seed == 0 and cfg.format == "csv"
        assert cfg.section()["seeds"] == [0]

    def test_unknown_top_level_key(self):
        with pytest.raises(ConfigError) as info:
            parse_config({"lr_sched": "cosine"})
        assert info.value.pointer == "/lr_sched" and "/lr_sched" in str(info.value)

    def test_unknown_nested_key(self):
        with pytest.raises(ConfigError, match="/sweep/lr_sched"):
            parse_config({"sweep": {"lr_sched": 1}})

    def test_pointer_escaping(self):
        with pytest.raises(ConfigError, match="/a~1b"):
            parse_config({"a/b": 1})

    def test_type_mismatch(self):
        with pytest.raises(ConfigError, match="/sweep/steps"):
            parse_config({"sweep": {"steps": "many"}})
        with pytest.raises(ConfigError, match="/simulate/scales/1"):
            parse_config({"simulate": {"scales": [1.0, True]}})

    def test_int_accepted_for_float(self):
        assert parse_config({"simulate": {"t_end": 3}}).sections["simulate"]["t_end"] == 3.0

    def test_choices_and_ranges(self):
        with pytest.raises(ConfigError, match="/command"):
            parse_config({"command": "train"})
        with pytest.raises(ConfigError, match="/collapse/n"):
            parse_config({"collapse": {"n": 0}})

    def test_malformed_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"seed": 1,,}')
        with pytest.raises(ConfigError, match="line 1"):
            load_config(path)

    def test_round_trip(self, tmp_path):
        cfg = load_config(_config(tmp_path, {"command": "sweep", "sweep": {"kind": "ratio"}}))
        again = load_config(_config(tmp_path, json.loads(cfg.dumps()), "again.json"))
        assert again == cfg and again.dumps() == cfg.dumps()


class TestFormatting:
    def test_seventeen_digits(self):
        assert fmt(0.1) == "0.10000000000000001"
        assert float(fmt(1 / 3)) == 1 / 3
        assert fmt(np.float64(2.0)) == "2" and fmt(3) == "3" and fmt(None) == ""

    def test_header_row(self):
        assert csv_text(["a", "b"], [[1, 0.5]]).splitlines() == ["a,b", "1,0.5"]


def _simulate(tmp_path, out, fmt_="csv", seed=0):
    return main(["simulate", "--out", str(tmp_path / out), "--format", fmt_, "--seed", str(seed)])


class TestRun:
    def test_simulate_columns(self, tmp_path):
        assert _simulate(tmp_path, "a") == 0
        rows = _read_csv(tmp_path / "a" / "trajectory.csv")
        assert rows[0] == ["t", "mode_1", "mode_2", "mode_3", "loss", "conservation_drift"]
        final = [float(v) for v in rows[-1]]
        np.testing.assert_allclose(final[1:4], [3.0, 2.0, 1.0], rtol=1e-3)

    def test_rerun_is_byte_identical(self, tmp_path):
        _simulate(tmp_path, "a")
        _simulate(tmp_path, "b")
        assert (tmp_path / "a" / "trajectory.csv").read_bytes() == (tmp_path / "b" / "trajectory.csv").read_bytes()
        ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
        mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
        assert ma["files"] == mb["files"]

    def test_manifest_hashes(self, tmp_path):
        _simulate(tmp_path, "a", "csv+svg")
        m = json.loads((tmp_path / "a" / "manifest.json").read_text())
        names = [f["path"] for f in m["files"]]
        assert names == ["trajectory.csv", "trajectory.svg"]
        for f in m["files"]:
            assert hashlib.sha256((tmp_path / "a" / f["path"]).read_bytes()).hexdigest() == f["sha256"]
        assert m["config"]["command"] == "simulate"
        assert (tmp_path / "a" / "trajectory.svg").read_text().startswith("<svg")

    def test_simulate_families(self, tmp_path):
        for fam, scales in (("linear", [3.0, 2.0, 1.0]), ("lnn", [3.0, 2.0, 1.0]), ("wide_scalar", [1.0])):
            sec = {"family": fam, "scales": scales, "variances": [1.0] * len(scales), "t_end": 5.0, "points": 20}
            cfg = parse_config({"command": "simulate", "output_dir": str(tmp_path / fam), "simulate": sec})
            status, manifest = run(cfg)
            assert status == 0 and manifest["files"][0]["path"] == "trajectory.csv"

    def test_sweep_deterministic(self, tmp_path):
        body = {"sweep": {"lambdas": [0.0, 9.0], "scales": [2.0], "steps": 200}}
        for out in ("a", "b"):
            assert main(["sweep", "--config", _config(tmp_path, body), "--out", str(tmp_path / out)]) == 0
        assert (tmp_path / "a" / "grid.csv").read_bytes() == (tmp_path / "b" / "grid.csv").read_bytes()
        assert _read_csv(tmp_path / "a" / "grid.csv")[0] == ["lambda", "absolute_scale", "kernel_distance",
                                                             "final_loss"]

    def test_ratio_sweep_has_ratio_column(self, tmp_path):
        cfg = parse_config({"command": "sweep", "output_dir": str(tmp_path),
                            "sweep": {"kind": "ratio", "downscales": [1.0], "imbalances": [0.0], "steps": 50}})
        run(cfg)
        assert _read_csv(tmp_path / "grid.csv")[0][-1] == "weight_to_target_ratio"

    def test_collapse(self, tmp_path):
        cfg = parse_config({"command": "collapse", "output_dir": str(tmp_path),
                            "collapse": {"n": 30, "d": 10, "p": 10}})
        status, m = run(cfg)
        assert status == 0 and m["summary"]["effective_rank"] == 3
        assert _read_csv(tmp_path / "collapse.csv")[0][:3] == ["t", "loss", "nc1"]

    def test_emerge(self, tmp_path):
        cfg = parse_config({"command": "emerge", "output_dir": str(tmp_path),
                            "emerge": {"p_star": 50, "p": 50, "trials": 50, "parity": {"rows": 5, "n_b": 6}}})
        status, m = run(cfg)
        assert status == 0
        assert {f["path"] for f in m["files"]} == {"time.csv", "data.csv", "scaling.csv", "parity.csv"}
        assert len(_read_csv(tmp_path / "parity.csv")) == 6

    def test_grok(self, tmp_path, caplog, monkeypatch):
        monkeypatch.delenv("DATA_DIR", raising=False)
        cfg = parse_config({"command": "grok", "output_dir": str(tmp_path),
                            "grok": {"configs": ["default", "weight_downscaling"], "width": 8, "epochs": 2,
                                     "n_train": 40, "n_test": 40}})
        status, m = run(cfg)
        assert status == 0 and "synthetic" in caplog.text
        rows = _read_csv(tmp_path / "grok_mechanism.csv")
        assert rows[0] == ["config", "weight_to_target_ratio", "gamma_plus", "companion_kernel_distance"]
        assert float(rows[2][3]) > float(rows[1][3])
        assert len(_read_csv(tmp_path / "grok_summary.csv")) == 3

    def test_validate(self, tmp_path, capsys):
        assert main(["validate", "--out", str(tmp_path)]) == 0
        out = capsys.readouterr().out
        assert "max_dev" in out
        rows = _read_csv(tmp_path / "validate.csv")
        assert all(float(r[2]) <= 1e-6 for r in rows[1:])


class TestExitCodes:
    def test_config_error(self, tmp_path, capsys):
        assert main(["simulate", "--config", _config(tmp_path, {"lr_sched": 1})]) == 2
        assert "/lr_sched" in capsys.readouterr().err

    def test_mismatched_lengths(self, tmp_path, capsys):
        body = {"simulate": {"scales": [1.0, 2.0], "variances": [1.0]}}
        assert main(["simulate", "--config", _config(tmp_path, body), "--out", str(tmp_path / "o")]) == 2
        assert "/simulate/variances" in capsys.readouterr().err

    def test_runtime_error(self, tmp_path, capsys):
        body = {"collapse": {"n": 30, "d": 10, "p": 10, "t_end": 0.5}}
        assert main(["collapse", "--config", _config(tmp_path, body), "--out", str(tmp_path / "o")]) == 1
        assert "NonConvergenceError" in capsys.readouterr().err

    def test_missing_file(self, tmp_path):
        assert main(["validate", "--config", str(tmp_path / "nope.json")]) == 2
