"""Command-line pipeline: simulate, calibrate, train, reconstruct, analyze, validate, report.

Each stage reads and writes files in an output directory (``--out``) and
records a manifest.  Failures print a JSON error object on stderr and exit
with status 1.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import io
from .analysis import (
    BinGrid,
    bin_increments,
    efficiency_calibration,
    extract_tilt,
    fit_diffusion,
    fit_drift,
    fit_sinusoid,
    radial_mode,
    validate,
    windowed_analysis,
)
from .bayes import BayesCalibration, BayesianFilter, calibrate
from .core import CARDINAL_STATES, mhz
from .lstm import LSTMModel, NetworkConfig, TrainingConfig, train
from .simulator import SimRegime, generate_dataset

STAGES = ("simulate", "calibrate", "train", "reconstruct", "analyze", "validate", "report")
TRAJ_FILE = "trajectories.jsonl"


class StageError(RuntimeError):
    """Inputs for a stage are missing or inconsistent."""


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qtraj", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in STAGES:
        s = sub.add_parser(name)
        s.add_argument("--config", help="RunConfig JSON")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", help="output directory")
        s.add_argument("--n", type=int, help="records per (t_m, axis) or trajectories")
        s.add_argument("--regime", choices=("memoryless", "kernel", "boost"))
        s.add_argument("--variant", choices=("standard", "numerics", "analytics", "lstm"))
        s.add_argument("--grid", type=int, help="bins per axis")
        s.add_argument("--window", type=float, help="window length in seconds")
        s.add_argument("--in", dest="inputs", nargs="*", default=[], help="input files or directories")
        s.add_argument("--model", help="LSTM model JSON (reconstruct)")
        s.add_argument("--calibration", help="calibration JSON (reconstruct)")
        s.add_argument("--dataset", help="dataset directory (validate)")
        s.add_argument("--verbose", action="store_true")
    return p


def load_config(args) -> io.RunConfig:
    cfg = io.RunConfig.load(args.config) if args.config else io.RunConfig()
    return cfg.with_overrides(seed=args.seed, out=args.out, n=args.n, regime=args.regime,
                              variant=args.variant, grid=args.grid, window=args.window)


def _out(cfg) -> Path:
    d = Path(cfg.out)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _single_input(args, what: str) -> Path:
    if not args.inputs:
        raise StageError(f"--in {what} is required")
    p = Path(args.inputs[0])
    if not p.exists():
        raise StageError(f"input {p} does not exist")
    return p


def _read_dataset(path: Path, require_truth: bool = False):
    if path.is_file():
        path = path.parent
    if not (path / io.RECORDS_FILE).exists():
        raise StageError(f"no dataset in {path}; run simulate first")
    return io.read_dataset(path, require_truth)


def _read_trajs(path: Path):
    if path.is_dir():
        path = path / TRAJ_FILE
    if not path.exists():
        raise StageError(f"no trajectories at {path}; run reconstruct first")
    return io.read_trajectories(path)


# ---------------------------------------------------------------------------
# stages


def cmd_simulate(cfg: io.RunConfig, args) -> dict:
    ds = generate_dataset(cfg.params, SimRegime(cfg.regime, cfg.seed), cfg.n, cfg.t_m_grid, tuple(cfg.axes),
                          CARDINAL_STATES[cfg.init_state])
    m = io.write_dataset(_out(cfg), ds, cfg.to_dict(), cfg.seed)
    return {"records": len(ds), "hash": m["hash"]}


def cmd_calibrate(cfg: io.RunConfig, args) -> dict:
    out = _out(cfg)
    h = cfg.hash()
    cal = calibrate(cfg.params, cfg.regime, n_traj=max(cfg.n, 2), seed=cfg.seed)
    io.write_json(out / "calibration.json", dict(cal.to_dict(), schema_version=io.SCHEMA_VERSION, manifest=h))
    result = {"calibration": cal.to_dict()}
    if args.inputs:
        ds = _read_dataset(Path(args.inputs[0]))
        eff = efficiency_calibration(ds)
        rows = [{"t_m": t, "separation": s} for t, s in zip(eff.t_m, eff.separation)]
        io.write_csv(out / "separation.csv", rows, h)
        summary = {"tau_m": eff.tau_m, "gamma_d": eff.gamma_d, "eta": eff.eta, "gamma_m": eff.gamma_m,
                   "slope": eff.slope, "r2": eff.r2}
        io.write_csv(out / "efficiency.csv", [summary], h)
        result["efficiency"] = summary
    return result


def cmd_train(cfg: io.RunConfig, args) -> dict:
    ds = _read_dataset(_single_input(args, "dataset"))
    net = NetworkConfig(cfg.hidden_size, cfg.num_layers)
    tr = TrainingConfig(batch_size=cfg.batch_size, base_lr=cfg.base_lr, max_lr=cfg.max_lr,
                        cycle_len=cfg.cycle_len, max_epochs=cfg.max_epochs)
    model, log = train(ds, net, tr, seed=cfg.seed, verbose=args.verbose)
    out = _out(cfg)
    model.save(out / "model.json")
    log.to_csv(out / "training_log.csv")
    return {"epochs": len(log.rows), "best_val": float(np.min(log.val_loss))}


def _filter(cfg: io.RunConfig, args, params):
    variant = cfg.variant.lower()
    if variant == "lstm":
        if not args.model:
            raise StageError("--model is required for the lstm variant; run train first")
        if not Path(args.model).exists():
            raise StageError(f"model {args.model} does not exist")
        return LSTMModel.load(args.model)
    cal = None
    if args.calibration:
        d = io.read_json(args.calibration)
        cal = BayesCalibration.from_dict(d)
    return BayesianFilter(params, variant.capitalize(), cal, calib_regime=cfg.regime, random_state=cfg.seed).fit()


def cmd_reconstruct(cfg: io.RunConfig, args) -> dict:
    ds = _read_dataset(_single_input(args, "dataset"))
    params = ds.params or cfg.params
    f = _filter(cfg, args, params)
    trajs = f.predict_records(ds.records) if isinstance(f, LSTMModel) else f.transform(ds.records)
    out = _out(cfg)
    h = cfg.hash()
    io.write_trajectories(out / TRAJ_FILE, trajs)
    result = {"trajectories": len(trajs)}
    if ds.truth:
        err = np.concatenate([t.states - ds.truth[t.id].states for t in trajs if t.id in ds.truth])
        rms = np.sqrt(np.mean(err ** 2, axis=0))
        row = {"variant": cfg.variant, "omega": params.omega, "two_omega_over_kappa": 2 * params.omega / params.kappa,
               "rms_x": rms[0], "rms_y": rms[1], "rms_z": rms[2]}
        io.write_csv(out / "errors.csv", [row], h)
        result["rms"] = rms.tolist()
    return result


def cmd_analyze(cfg: io.RunConfig, args) -> dict:
    trajs = _read_trajs(_single_input(args, "trajectories"))
    dt = trajs[0].dt
    out = _out(cfg)
    h = cfg.hash()
    grid = BinGrid("yz", cfg.grid, cfg.min_samples)
    bins = bin_increments(trajs, grid)
    io.write_csv(out / "bins.csv", bins.to_rows(), h)
    drift = fit_drift(bins, dt)
    io.write_csv(out / "drift_fit.csv", [vars(drift)], h)
    try:
        tilt = extract_tilt(bins)
        theta, theta_err = tilt.theta, tilt.theta_err
    except ValueError:
        theta, theta_err = None, math.nan
    diff = fit_diffusion(bins, theta, dt)
    row = dict(vars(diff), tilt=theta if theta is not None else math.nan, tilt_err=theta_err,
               omega_fit=drift.omega)
    io.write_csv(out / "diffusion_fit.csv", [row], h)
    states = np.concatenate([t.states for t in trajs])
    io.write_csv(out / "radius.csv", [{"mode": radial_mode(states)}], h)
    from . import plotting

    plotting.quiver(out / "backaction_yz.svg", bins.center, bins.v, title="dominant increment covariance")
    result = {"bins": len(bins), "omega": drift.omega, "gamma_d": drift.gamma_d, "rate": diff.rate}
    if cfg.window:
        wins = windowed_analysis(trajs, dt, cfg.window, BinGrid("yz", cfg.grid, 20))
        io.write_csv(out / "windows.csv", [vars(w) for w in wins], h)
        ok = [w for w in wins if w.valid]
        if len(ok) >= 4:
            tt = np.array([w.t for w in ok])
            plotting.line_plot(out / "windows.svg", tt * 1e6, [np.array([w.omega for w in ok]) / (2 * np.pi * 1e6)],
                               ["Omega/2pi (MHz)"], xlabel="t (us)")
            try:
                fo = fit_sinusoid(tt, [w.omega for w in ok])
                result["omega_period"] = fo.period
            except ValueError:
                pass
        result["windows"] = len(wins)
    return result


def cmd_validate(cfg: io.RunConfig, args) -> dict:
    trajs = _read_trajs(_single_input(args, "trajectories"))
    if not args.dataset:
        raise StageError("--dataset is required")
    ds = _read_dataset(Path(args.dataset))
    by_id = {t.id: t for t in trajs}
    recs = [r for r in ds.records if r.id in by_id and r.tomo_axis is not None]
    if not recs:
        raise StageError("no labelled records match the trajectories")
    rep = validate(np.array([by_id[r.id].states[-1] for r in recs]), [r.tomo_axis for r in recs],
                   [r.tomo_outcome for r in recs], n_bins=cfg.grid)
    rows = [{"axis": a, "epsilon": rep.epsilon[a], "epsilon_proj": rep.epsilon_proj[a]} for a in rep.epsilon]
    io.write_csv(_out(cfg) / "validation.csv", rows, cfg.hash())
    return {"epsilon": rep.epsilon, "epsilon_proj": rep.epsilon_proj}


def cmd_report(cfg: io.RunConfig, args) -> dict:
    """Collate CSVs from the given directories into ``report.md`` plus tables."""
    if not args.inputs:
        raise StageError("--in needs at least one stage output directory")
    out = _out(cfg)
    tables = {}
    for d in args.inputs:
        dp = Path(d)
        if not dp.is_dir():
            raise StageError(f"{d} is not a directory")
        for name in ("errors", "drift_fit", "diffusion_fit", "validation", "efficiency", "windows", "radius"):
            f = dp / f"{name}.csv"
            if f.exists():
                for row in io.read_csv(f):
                    tables.setdefault(name, []).append(dict(source=dp.name, **row))
    if not tables:
        raise StageError("no stage outputs found")
    lines = ["# Report", ""]
    titles = {
        "errors": "Reconstruction error vs ground truth",
        "drift_fit": "Drift fit",
        "diffusion_fit": "Tilt and measurement rate",
        "validation": "Tomographic validation",
        "efficiency": "Efficiency calibration",
        "windows": "Windowed analysis",
        "radius": "Radial histogram mode",
    }
    for name, rows in tables.items():
        io.write_csv(out / f"report_{name}.csv", rows, cfg.hash())
        lines += [f"## {titles[name]}", ""]
        cols = list(rows[0].keys())
        lines.append("| " + " | ".join(cols) + " |")
        lines.append("|" + "---|" * len(cols))
        for r in rows[:50]:
            lines.append("| " + " | ".join(_cell(r.get(c)) for c in cols) + " |")
        lines.append("")
    if "diffusion_fit" in tables and len(tables["diffusion_fit"]) >= 2:
        from . import plotting

        rows = sorted(tables["diffusion_fit"], key=lambda r: r["omega_fit"])
        om = np.array([mhz(r["omega_fit"]) for r in rows])
        plotting.line_plot(out / "tilt_rate.svg", om, [[r["tilt"] for r in rows], [r["theta"] for r in rows]],
                           ["tilt (v)", "tilt (fit)"], xlabel="Omega/2pi (MHz)", ylabel="rad")
    (out / "report.md").write_text("\n".join(lines) + "\n")
    return {"tables": sorted(tables)}


def _cell(v):
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)


COMMANDS = {
    "simulate": cmd_simulate,
    "calibrate": cmd_calibrate,
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "analyze": cmd_analyze,
    "validate": cmd_validate,
    "report": cmd_report,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        from threadpoolctl import threadpool_limits

        cfg = load_config(args)
        with threadpool_limits(io.worker_count()):
            result = COMMANDS[args.command](cfg, args)
    except Exception as e:  # noqa: BLE001 - every failure becomes a JSON error
        err = {"error": type(e).__name__, "message": str(e), "stage": args.command}
        print(json.dumps(err), file=sys.stderr)
        return 1
    print(json.dumps({"stage": args.command, "ok": True, **_jsonable(result)}))
    return 0


def _jsonable(d: dict) -> dict:
    return json.loads(json.dumps(d, default=lambda o: o.tolist() if hasattr(o, "tolist") else str(o)))


if __name__ == "__main__":
    sys.exit(main())
