"""Strict JSON experiment configs.

Every key has a default; unknown keys and type mismatches are rejected with
the JSON pointer of the offending value.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional

from .errors import ConfigurationError

COMMANDS = ("simulate", "sweep", "collapse", "emerge", "grok", "validate")
FORMATS = ("csv", "csv+svg")


class ConfigError(ConfigurationError):
    """Config file problem; ``pointer`` locates the failing value."""

    def __init__(self, pointer: str, message: str):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer


@dataclass(frozen=True)
class Field:
    default: Any
    check: Optional[Callable[[Any], bool]] = None
    hint: str = ""
    choices: tuple = ()


def _pos(v):
    return all(x > 0 for x in v) if isinstance(v, list) else v > 0


def _nonneg(v):
    return all(x >= 0 for x in v) if isinstance(v, list) else v >= 0


def _nonempty(v):
    return len(v) > 0


POS, NONNEG = (_pos, "must be > 0"), (_nonneg, "must be >= 0")


def F(default, rule=None, choices=()):
    check, hint = rule if rule else (None, "")
    return Field(default, check, hint, tuple(choices))


SCHEMA = {
    "command": F("validate", choices=COMMANDS),
    "seed": F(0, NONNEG),
    "output_dir": F("out"),
    "format": F("csv", choices=FORMATS),
    "simulate": {
        "family": F("diag_lnn", choices=("linear", "diag_lnn", "lnn", "wide_scalar")),
        "scales": F([3.0, 2.0, 1.0], POS),
        "variances": F([1.0, 1.0, 1.0], POS),
        "p": F(4, POS),
        "z": F(1.0, POS),
        "init_scale": F(1e-3, POS),
        "t_end": F(10.0, POS),
        "points": F(200, POS),
        "rel_tol": F(1e-10, POS),
        "abs_tol": F(1e-12, POS),
    },
    "sweep": {
        "kind": F("regime", choices=("regime", "ratio", "funnel", "antifunnel")),
        "lambdas": F([-9.0, -4.5, 0.0, 4.5, 9.0], (_nonempty, "must not be empty")),
        "scales": F([2.0, 6.0, 10.0], POS),
        "downscales": F([0.1, 1.0, 10.0, 50.0], POS),
        "imbalances": F([-1.0, 0.0, 1.0], (_nonempty, "must not be empty")),
        "n": F(10, POS),
        "sigma": F(1.7320508075688772, POS),
        "lr": F(0.01, POS),
        "steps": F(20000, POS),
    },
    "collapse": {
        "n": F(60, POS),
        "d": F(20, POS),
        "p": F(20, POS),
        "c": F(3, POS),
        "init_scale": F(1e-3, POS),
        "t_end": F(500.0, POS),
        "separation": F(3.0, POS),
        "noise": F(1.0, NONNEG),
        "report_every": F(10, POS),
    },
    "emerge": {
        "p_star": F(1000, POS),
        "p": F(1000, POS),
        "curve_skills": F(10, POS),
        "alpha": F(2.0, POS),
        "s": F(1.0, POS),
        "u0": F(1e-3, POS),
        "t_end": F(2000.0, POS),
        "points": F(200, POS),
        "sizes": F([0, 1, 3, 10, 30, 100, 300, 1000, 3000], NONNEG),
        "widths": F([8, 16, 32, 64, 128, 256, 512], NONNEG),
        "shots": F(1, POS),
        "trials": F(2000, POS),
        "parity": {
            "n_b": F(32, POS),
            "m": F(3, POS),
            "rows": F(0, NONNEG),
        },
    },
    "grok": {
        "configs": F(["default", "weight_downscaling", "target_upscaling", "input_downscaling",
                      "output_downscaling"], (_nonempty, "must not be empty")),
        "seeds": F([0], NONNEG),
        "width": F(128, POS),
        "depth": F(4, POS),
        "epochs": F(400, POS),
        "batch": F(128, POS),
        "lr": F(1e-3, POS),
        "wd": F(1e-4, NONNEG),
        "threshold": F(0.9, POS),
        "data_dir": F(""),
        "n_train": F(1000, POS),
        "n_test": F(1000, POS),
    },
    "validate": {
        "seeds": F([0], NONNEG),
    },
}


def _type_name(v) -> str:
    if isinstance(v, bool):
        return "boolean"
    if isinstance(v, int):
        return "integer"
    if isinstance(v, float):
        return "number"
    if isinstance(v, str):
        return "string"
    if isinstance(v, list):
        return "array"
    if isinstance(v, dict):
        return "object"
    return "null" if v is None else type(v).__name__


def _coerce(pointer: str, value, default):
    """Check ``value`` against the type of ``default``; ints are accepted for floats."""
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        if ok:
            value = float(value)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(pointer, f"expected array, got {_type_name(value)}")
        proto = default[0]
        return [_coerce(f"{pointer}/{i}", v, proto) for i, v in enumerate(value)]
    else:
        ok = False
    if not ok:
        raise ConfigError(pointer, f"expected {_type_name(default)}, got {_type_name(value)}")
    return value


def _escape(key: str) -> str:
    return key.replace("~", "~0").replace("/", "~1")


def _resolve(obj, schema, pointer=""):
    if not isinstance(obj, dict):
        raise ConfigError(pointer, f"expected object, got {_type_name(obj)}")
    for key in obj:
        if key not in schema:
            raise ConfigError(f"{pointer}/{_escape(key)}", "unknown key")
    out = {}
    for key, field in schema.items():
        ptr = f"{pointer}/{_escape(key)}"
        if isinstance(field, dict):
            out[key] = _resolve(obj.get(key, {}), field, ptr)
            continue
        if key not in obj:
            out[key] = copy.deepcopy(field.default)
            continue
        value = _coerce(ptr, obj[key], field.default)
        if field.choices and value not in field.choices:
            raise ConfigError(ptr, f"must be one of {', '.join(field.choices)}")
        if field.check is not None and not field.check(value):
            raise ConfigError(ptr, field.hint)
        out[key] = value
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    command: str
    seed: int
    output_dir: str
    format: str
    sections: dict

    def section(self, name: Optional[str] = None) -> dict:
        return self.sections[name or self.command]

    def to_dict(self) -> dict:
        out = {"command": self.command, "seed": self.seed, "output_dir": self.output_dir, "format": self.format}
        out.update(copy.deepcopy(self.sections))
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def override(self, command=None, seed=None, output_dir=None, format=None) -> "ExperimentConfig":
        d = self.to_dict()
        for key, v in (("command", command), ("seed", seed), ("output_dir", output_dir), ("format", format)):
            if v is not None:
                d[key] = v
        return parse_config(d)


def parse_config(obj) -> ExperimentConfig:
    r = _resolve(obj, SCHEMA)
    top = ("command", "seed", "output_dir", "format")
    return ExperimentConfig(*(r[k] for k in top), {k: v for k, v in r.items() if k not in top})


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError("", f"cannot read {path}: {e.strerror or e}") from e
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError("", f"malformed JSON at line {e.lineno} column {e.colno}: {e.msg}") from e
    return parse_config(obj)
