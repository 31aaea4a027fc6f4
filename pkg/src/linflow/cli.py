"""Batch experiment runner.

``linflow <command> --config FILE [--seed N] [--out DIR] [--format csv|csv+svg]``

Each run writes CSV files (and optional SVG renderings) plus
``manifest.json`` listing every file with its sha256.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import svg
from .analytic import correlation_spectrum
from .collapse import train_collapse
from .config import COMMANDS, FORMATS, ConfigError, ExperimentConfig, load_config, parse_config
from .core import InputStatistics, ModelSpec, ParamState, TargetSpec, zeros
from .emergence import (
    SkillEnsemble,
    data_emergence_oracle,
    emergence_data,
    emergence_time_curve,
    gen_parity,
    loglog_slope,
    make_parity_task,
    scaling_curve,
    write_parity_csv,
)
from .errors import LinflowError
from .grokking import (
    GrokConfig,
    companion_wide_scalar,
    configurations,
    load_dataset,
    run_grok,
    weight_to_target_ratio,
)
from .integrator import FlowConfig, integrate
from .regimes import RegressionTask, TrainConfig, funnel_grid, ratio_grid, regime_grid
from .validation import aligned_init, run_all

VALIDATE_TOLERANCE = 1e-6


def fmt(v) -> str:
    """17 significant digits for floats, so every value round-trips."""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return "" if v is None else str(v)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else None
    return v


class Artifacts:
    """Collects output files; writing is serialized through this object."""

    def __init__(self, out_dir: Path, with_svg: bool):
        self.out_dir = out_dir
        self.with_svg = with_svg
        self.files: dict = {}

    def write(self, name: str, text: str):
        path = self.out_dir / name
        path.parent.mkdir(parents=True, exist_ok=True)
        data = text.encode("utf-8")
        path.write_bytes(data)
        self.files[name] = {"path": name, "sha256": hashlib.sha256(data).hexdigest(), "bytes": len(data)}

    def csv(self, name: str, header, rows):
        self.write(name, csv_text(header, rows))

    def svg(self, name: str, render, *args, **kwargs):
        if self.with_svg:
            self.write(name, render(*args, **kwargs))


# ---------------------------------------------------------------------------
# commands


def _simulate_problem(sec: dict, seed: int):
    s = np.asarray(sec["scales"], dtype=np.float64)
    var = np.asarray(sec["variances"], dtype=np.float64)
    if s.size == 0:
        raise ConfigError("/simulate/scales", "must not be empty")
    if var.size != s.size:
        raise ConfigError("/simulate/variances", f"needs {s.size} entries to match /simulate/scales")
    fam = sec["family"]
    stats = InputStatistics(variances=var)
    if fam == "linear":
        spec = ModelSpec("linear", d=s.size)
        return spec, zeros(spec), TargetSpec(scales=s), stats
    if fam == "diag_lnn":
        spec = ModelSpec("diag_lnn", d=s.size)
        if np.any(sec["init_scale"] >= 1.0):
            raise ConfigError("/simulate/init_scale", "must be < 1 (initial modes are init_scale * scales)")
        a = np.sqrt(sec["init_scale"] * s)
        return spec, ParamState((a, a)), TargetSpec(scales=s), stats
    if fam == "lnn":
        d = s.size
        if sec["p"] < d:
            raise ConfigError("/simulate/p", f"must be >= {d} for the aligned init")
        spec = ModelSpec("lnn", d=d, p=sec["p"], c=d)
        corr = np.diag(s * var)
        init = aligned_init(correlation_spectrum(corr), sec["init_scale"] * np.sort(s)[::-1], sec["p"],
                            np.random.default_rng(seed))
        return spec, init, TargetSpec(correlation=corr), stats
    # wide_scalar
    if s.size != 1:
        raise ConfigError("/simulate/scales", "wide_scalar takes exactly one target scale")
    spec = ModelSpec("wide_scalar", d=1, p=sec["p"], z=sec["z"])
    rng = np.random.default_rng(seed)
    init = ParamState(tuple(np.sqrt(sec["init_scale"]) * rng.standard_normal(sec["p"]) for _ in range(2)))
    return spec, init, TargetSpec(scales=s), stats


def cmd_simulate(cfg: ExperimentConfig, art: Artifacts) -> dict:
    sec = cfg.section()
    spec, init, target, stats = _simulate_problem(sec, cfg.seed)
    flow = FlowConfig(t_end=sec["t_end"], record_every=sec["t_end"] / sec["points"], rel_tol=sec["rel_tol"],
                      abs_tol=sec["abs_tol"], seed=cfg.seed)
    traj = integrate(spec, init, target, stats, flow)
    modes = np.atleast_2d(traj["modes"])
    k = modes.shape[1]
    drift = traj.observables.get("conservation_drift", np.zeros(len(traj.times)))
    header = ["t"] + [f"mode_{i + 1}" for i in range(k)] + ["loss", "conservation_drift"]
    rows = [[t, *modes[i], traj["loss"][i], drift[i]] for i, t in enumerate(traj.times)]
    art.csv("trajectory.csv", header, rows)
    art.svg("trajectory.svg", svg.line_chart, traj.times, {f"mode {i + 1}": modes[:, i] for i in range(k)},
            title=f"{spec.family.value} modes", xlabel="t", ylabel="mode value")
    print(f"simulate {spec.family.value}: {len(traj.times)} samples, final loss {traj['loss'][-1]:.3e}"
          f"{' (converged)' if traj.converged else ''}")
    return {"family": spec.family.value, "final_loss": traj["loss"][-1], "converged": traj.converged,
            "final_modes": modes[-1], "max_conservation_drift": float(np.max(drift))}


def cmd_sweep(cfg: ExperimentConfig, art: Artifacts) -> dict:
    sec = cfg.section()
    task = RegressionTask(n=sec["n"], sigma=sec["sigma"])
    train = TrainConfig(lr=sec["lr"], steps=sec["steps"])
    kind = sec["kind"]
    if kind == "regime":
        grid = regime_grid(sec["lambdas"], sec["scales"], task, train, seed=cfg.seed)
    elif kind == "ratio":
        grid = ratio_grid(sec["downscales"], sec["imbalances"], task, train, seed=cfg.seed)
    else:
        grid = funnel_grid(kind, sec["lambdas"], sec["scales"], task, train, seed=cfg.seed)
    losses = grid.meta["final_loss"]
    header = [grid.axis1_name, grid.axis2_name, "kernel_distance", "final_loss"]
    rows = []
    for i, a in enumerate(grid.axis1):
        for j, b in enumerate(grid.axis2):
            row = [a, b, grid.cells[i, j], losses[i, j]]
            if "ratio" in grid.meta:
                row.append(grid.meta["ratio"][i, j])
            rows.append(row)
    if "ratio" in grid.meta:
        header.append("weight_to_target_ratio")
    art.csv("grid.csv", header, rows)
    art.svg("grid.svg", svg.heatmap, grid.axis1, grid.axis2, grid.cells, title=f"kernel distance ({kind})",
            row_label=grid.axis1_name, col_label=grid.axis2_name)
    n_nan = int(np.sum(~np.isfinite(grid.cells)))
    print(f"sweep {kind}: {grid.cells.size} cells, {n_nan} diverged, "
          f"kernel distance range [{np.nanmin(grid.cells):.4g}, {np.nanmax(grid.cells):.4g}]")
    return {"kind": kind, "hash": grid.meta["hash"], "cells": grid.cells.size, "diverged": n_nan}


def cmd_collapse(cfg: ExperimentConfig, art: Artifacts) -> dict:
    sec = cfg.section()
    flow = FlowConfig(t_end=sec["t_end"], record_every=sec["t_end"] / 500, rel_tol=1e-9, abs_tol=1e-13,
                      stop_loss=1e-11)
    run = train_collapse(sec["n"], sec["d"], sec["p"], sec["c"], sec["init_scale"], flow, seed=cfg.seed,
                         separation=sec["separation"], noise=sec["noise"], report_every=sec["report_every"])
    loss_at = dict(zip(run.trajectory.times.tolist(), run.trajectory["loss"].tolist()))
    header = ["t", "loss", "nc1", "nc2_max_dev", "nc3_max_dev", "nc4_agreement", "effective_rank"]
    rows = []
    for t, rep in run.reports:
        if rep is None:
            rows.append([t, loss_at[t], None, None, None, None, None])
        else:
            rows.append([t, loss_at[t], rep.nc1, rep.nc2_max_dev, rep.nc3_max_dev, rep.nc4_agreement,
                         rep.effective_rank])
    art.csv("collapse.csv", header, rows)
    art.csv("singular_values.csv", ["index", "singular_value"], enumerate(run.final.singular_values, 1))
    good = [(t, r) for t, r in run.reports if r is not None]
    art.svg("collapse.svg", svg.line_chart, [t for t, _ in good],
            {"nc1": [r.nc1 for _, r in good], "nc2": [r.nc2_max_dev for _, r in good],
             "nc3": [r.nc3_max_dev for _, r in good]},
            title="collapse metrics", xlabel="t", ylabel="deviation", logy=True)
    f = run.final
    print(f"collapse: loss {run.trajectory['loss'][-1]:.3e}, rank {f.effective_rank}, "
          f"nc2 {f.nc2_max_dev:.3e}, nc4 {f.nc4_agreement:.3f}")
    return {"final_loss": run.trajectory["loss"][-1], **f.as_row()}


def cmd_emerge(cfg: ExperimentConfig, art: Artifacts) -> dict:
    sec = cfg.section()
    if sec["p"] > sec["p_star"]:
        raise ConfigError("/emerge/p", "must be <= /emerge/p_star")
    if not sec["u0"] < sec["s"]:
        raise ConfigError("/emerge/u0", "must be < /emerge/s")
    ens = SkillEnsemble(sec["p_star"], sec["alpha"], sec["s"], sec["p"])
    grid = np.linspace(0.0, sec["t_end"], sec["points"] + 1)
    shown = min(ens.p_star, sec["curve_skills"])
    r = emergence_time_curve(ens, sec["u0"], grid)[:, :shown]
    art.csv("time.csv", ["t"] + [f"R_{k + 1}" for k in range(shown)], ([t, *r[i]] for i, t in enumerate(grid)))
    art.svg("time.svg", svg.line_chart, grid, {f"skill {k + 1}": r[:, k] for k in range(shown)},
            title="skill strength over time", xlabel="t", ylabel="R_k")

    sizes = sec["sizes"]
    data = emergence_data(ens, sizes, sec["shots"], sec["trials"], cfg.seed)
    oracle = data_emergence_oracle(ens, sizes) if sec["shots"] == 1 else np.full(data.prob.shape, np.nan)
    art.csv("data.csv", ["n", "skill", "probability", "one_shot_oracle"],
            ([n, k + 1, data.prob[i, k], oracle[i, k]] for i, n in enumerate(sizes) for k in range(shown)))

    curves = {
        "time": (grid[1:], scaling_curve(ens, "time", grid[1:], sec["u0"])),
        "data": (np.asarray(sizes), scaling_curve(ens, "data", sizes, 0.0, sec["shots"], sec["trials"], cfg.seed)),
        "params": (np.asarray(sec["widths"]), scaling_curve(ens, "params", sec["widths"])),
    }
    art.csv("scaling.csv", ["resource", "amount", "loss"],
            ([name, x, y] for name, (xs, ys) in curves.items() for x, y in zip(xs, ys)))
    px, py = curves["params"]
    keep = (px > 0) & (py > 0)
    slope = loglog_slope(px[keep], py[keep]) if keep.sum() >= 2 else float("nan")
    art.svg("scaling.svg", svg.line_chart, px[keep], {"params": py[keep]}, title="loss vs model skills",
            xlabel="p", ylabel="loss", logx=True, logy=True)

    par = sec["parity"]
    if par["rows"]:
        if par["m"] > par["n_b"]:
            raise ConfigError("/emerge/parity/m", "must be <= /emerge/parity/n_b")
        task = make_parity_task(ens.p_star, par["n_b"], par["m"], ens.alpha, seed=cfg.seed)
        x, y, _ = gen_parity(task, par["rows"], seed=cfg.seed)
        buf = io.StringIO()
        write_parity_csv(buf, x, y)
        art.write("parity.csv", buf.getvalue())
    print(f"emerge: {ens.p_star} skills, params log-log slope {slope:.4f} (tail exponent {-(ens.alpha - 1):g})")
    return {"params_slope": slope, "p_star": ens.p_star}


def cmd_grok(cfg: ExperimentConfig, art: Artifacts) -> dict:
    sec = cfg.section()
    base = GrokConfig(depth=sec["depth"], width=sec["width"], epochs=sec["epochs"], batch=sec["batch"],
                      lr=sec["lr"], wd=sec["wd"], threshold=sec["threshold"])
    table = configurations(base)
    for i, name in enumerate(sec["configs"]):
        if name not in table:
            raise ConfigError(f"/grok/configs/{i}", f"must be one of {', '.join(table)}")
    summary, curves = [], {}
    companion = {name: companion_wide_scalar(table[name], seed=cfg.seed) for name in sec["configs"]}
    art.csv("grok_mechanism.csv", ["config", "weight_to_target_ratio", "gamma_plus", "companion_kernel_distance"],
            ([name, weight_to_target_ratio(table[name]), *companion[name]] for name in sec["configs"]))
    for seed in sec["seeds"]:
        data = load_dataset(sec["data_dir"] or None, sec["n_train"], sec["n_test"], seed=seed)
        for name in sec["configs"]:
            res = run_grok(table[name], data, seed=seed)
            art.csv(f"grok_{name}_seed{seed}.csv", ["epoch", "train_loss", "test_loss", "train_acc", "test_acc"],
                    res.rows())
            summary.append([name, seed, data.source, res.t_train90, res.t_test90, res.gap])
            if seed == sec["seeds"][0]:
                curves[name] = res.test_acc
            print(f"grok {name} seed {seed}: train90 {res.t_train90}, test90 {res.t_test90}, gap {res.gap}")
    art.csv("grok_summary.csv", ["config", "seed", "data", "t_train90", "t_test90", "gap"], summary)
    art.svg("grok_test_acc.svg", svg.line_chart, np.arange(1, sec["epochs"] + 1), curves,
            title=f"test accuracy (seed {sec['seeds'][0]})", xlabel="epoch", ylabel="accuracy", logx=True)
    return {"runs": [dict(zip(("config", "seed", "data", "t_train90", "t_test90", "gap"), r)) for r in summary]}


def cmd_validate(cfg: ExperimentConfig, art: Artifacts) -> dict:
    rows, worst = [], 0.0
    print(f"{'family':<12} {'seed':>4} {'max_dev':>10} {'horizon':>9} {'drift/t':>10} {'seconds':>8}")
    for seed in cfg.section()["seeds"]:
        for chk in run_all(seed):
            rows.append([chk.family, seed, chk.max_dev, chk.horizon, chk.max_drift_rate])
            worst = max(worst, chk.max_dev)
            print(f"{chk.family:<12} {seed:>4} {chk.max_dev:>10.2e} {chk.horizon:>9.3g} "
                  f"{chk.max_drift_rate:>10.2e} {chk.seconds:>8.3f}")
    art.csv("validate.csv", ["family", "seed", "max_dev", "horizon", "max_drift_rate"], rows)
    return {"max_dev": worst, "tolerance": VALIDATE_TOLERANCE, "passed": worst <= VALIDATE_TOLERANCE}


RUNNERS = {"simulate": cmd_simulate, "sweep": cmd_sweep, "collapse": cmd_collapse, "emerge": cmd_emerge,
           "grok": cmd_grok, "validate": cmd_validate}


def run(cfg: ExperimentConfig) -> tuple[int, dict]:
    """Run the configured experiment; returns (exit status, manifest)."""
    out = Path(cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError("/output_dir", f"cannot create {out}: {e.strerror or e}") from e
    art = Artifacts(out, cfg.format == "csv+svg")
    summary = RUNNERS[cfg.command](cfg, art)
    status = 0 if summary.get("passed", True) else 1
    manifest = {
        "command": cfg.command,
        "config": cfg.to_dict(),
        "files": [art.files[k] for k in sorted(art.files)],
        "summary": _jsonable(summary),
        "status": status,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return status, manifest


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="linflow", description="Gradient-flow experiments on layerwise linear models.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="JSON config file (defaults are used when omitted)")
    ap.add_argument("--seed", type=int, help="override the config seed")
    ap.add_argument("--out", help="output directory (overrides output_dir)")
    ap.add_argument("--format", choices=FORMATS, help="csv, or csv plus SVG renderings")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config) if args.config else parse_config({})
        cfg = cfg.override(command=args.command, seed=args.seed, output_dir=args.out, format=args.format)
    except ConfigError as e:
        print(f"linflow: config error: {e}", file=sys.stderr)
        return 2
    try:
        status, manifest = run(cfg)
    except ConfigError as e:
        print(f"linflow: config error: {e}", file=sys.stderr)
        return 2
    except LinflowError as e:
        print(f"linflow {cfg.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    print(f"wrote {len(manifest['files'])} files and manifest.json to {cfg.output_dir}")
    if status:
        print(f"linflow {cfg.command}: tolerance check failed", file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
