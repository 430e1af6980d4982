"""Command-line entry point.

Subcommands:
  train   <scenario>  - train seeds, write loss traces / metrics / checkpoints
  verify  <suite>     - run a seeded property suite, nonzero exit on failure
  export  <run_dir>   - normalize a run directory into a plot-ready bundle

Exit codes: 0 success, 1 property failure, 2 config error, 3 divergence,
4 infeasible projection surfaced from the layer.  All randomness derives
from the seed list; CAFFNET_THREADS caps the per-seed worker fan-out.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from pathlib import Path

from .constraints import ComboMode
from .experiments.piecewise import BOUND_FNS, target_fn
from .experiments.unicycle import (
    A_STATE,
    B_STATE,
    CMD_HI,
    CMD_LO,
    OBSTACLES,
    RolloutLog,
)
from .layer import EmptyCandidateSetError
from .neural import save_checkpoint
from .runner import RunSettings, run_scenario
from .training import MODE_CAFFNET, MODE_SOFT, MODE_UNCONSTRAINED, DivergenceError
from .verify import ALL_SUITES

EXIT_OK = 0
EXIT_PROPERTY = 1
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_INFEASIBLE = 4

ABLATION_MODES = {"none": MODE_CAFFNET, "soft": MODE_SOFT, "post-hoc": MODE_UNCONSTRAINED}


def _parse_seeds(raw: str) -> tuple[int, ...]:
    if "," in raw:
        return tuple(int(s) for s in raw.split(",") if s != "")
    count = int(raw)
    if count <= 0:
        raise ValueError("--seeds must be positive")
    return tuple(range(count))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="caffnet")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a scenario over a seed list")
    p_train.add_argument("scenario", choices=["piecewise", "solver", "unicycle"])
    p_train.add_argument("--config", type=Path, help="JSON config file (flag > file > default)")
    p_train.add_argument("--seeds", type=str, help="seed count or comma list (default 5)")
    p_train.add_argument("--epochs", type=int)
    p_train.add_argument("--batch-size", type=int)
    p_train.add_argument("--mode", choices=["full", "lite"], help="combination family")
    p_train.add_argument("--p-norm", type=float)
    p_train.add_argument("--feas-tol", type=float)
    p_train.add_argument("--lr", type=float)
    p_train.add_argument("--ablation", choices=list(ABLATION_MODES), default=None)
    p_train.add_argument("--out", type=Path, default=Path("runs/latest"))

    p_verify = sub.add_parser("verify", help="run a property suite")
    p_verify.add_argument("suite", choices=sorted(ALL_SUITES))
    p_verify.add_argument("--cases", type=int, default=None)
    p_verify.add_argument("--seed", type=int, default=0)
    p_verify.add_argument("--out", type=Path, default=Path("."),
                          help="where counterexample fixtures are written")

    p_export = sub.add_parser("export", help="normalize a run dir for plotting")
    p_export.add_argument("run_dir", type=Path)
    return parser


def _load_config_file(path: Path | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return doc


class ConfigError(RuntimeError):
    pass


def _resolve_train_settings(args) -> RunSettings:
    file_cfg = _load_config_file(args.config)

    def pick(flag_value, key, default):
        if flag_value is not None:
            return flag_value
        return file_cfg.get(key, default)

    seeds_raw = pick(args.seeds, "seeds", "5")
    try:
        seeds = _parse_seeds(str(seeds_raw))
    except ValueError as exc:
        raise ConfigError(str(exc))
    mode_raw = pick(args.ablation, "ablation", "none")
    if mode_raw not in ABLATION_MODES:
        raise ConfigError(f"unknown ablation {mode_raw!r}")
    combo_raw = pick(args.mode, "mode", None)
    combo = None if combo_raw is None else ComboMode(combo_raw)
    return RunSettings(
        scenario=args.scenario,
        seeds=seeds,
        epochs=pick(args.epochs, "epochs", None),
        batch_size=pick(args.batch_size, "batch_size", None),
        mode=ABLATION_MODES[mode_raw],
        combo_mode=combo,
        p=pick(args.p_norm, "p_norm", 2.0),
        feas_tol=pick(args.feas_tol, "feas_tol", 1e-9),
        lr=pick(args.lr, "lr", None),
        n_train=file_cfg.get("n_train"),
        n_test=file_cfg.get("n_test"),
        n_starts=file_cfg.get("n_starts"),
        out_scale=file_cfg.get("out_scale"),
    )


def settings_hash(settings: dict) -> str:
    blob = json.dumps(settings, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _write_csv(path: Path, header: list[str], rows, manifest_hash: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# manifest {manifest_hash}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _trajectory_rows(log: RolloutLog):
    steps = log.u_exec.shape[1]
    for k in range(steps):
        yield ([round(k * 0.1, 4)] + [float(v) for v in log.states[0, k]]
               + [float(log.u_exec[0, k, 0]), float(log.u_exec[0, k, 1])]
               + [float(log.u_nom[0, k, 0]), float(log.u_nom[0, k, 1])]
               + [float(log.u_net[0, k, 0]), float(log.u_net[0, k, 1])]
               + [float(r) for r in log.residuals[0, k]])


def cmd_train(args) -> int:
    settings = _resolve_train_settings(args).resolved()
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    mhash = settings_hash(settings)

    report = run_scenario(settings)
    manifest = {
        "command": "train",
        "scenario": settings["scenario"],
        "settings": {k: str(v) if isinstance(v, ComboMode) else v
                     for k, v in settings.items()},
        "seeds": settings["seeds"],
        "hash": mhash,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "outputs": [],
    }

    for res in report.results:
        loss_path = out / f"loss_seed{res.seed}.csv"
        _write_csv(loss_path, ["epoch", "loss", "max_violation", "mean_violation"],
                   ((r.epoch, r.loss, r.max_violation, r.mean_violation)
                    for r in res.trace.rows), mhash)
        ckpt = out / f"checkpoint_seed{res.seed}.npz"
        save_checkpoint(ckpt, {"f_theta": res.model.f_theta, "w_phi": res.model.w_phi},
                        tag=mhash)
        manifest["outputs"] += [loss_path.name, ckpt.name]

        if settings["scenario"] == "piecewise":
            xs = res.scenario.x_test[:, 0]
            pred = res.model.predict(res.scenario.x_test)[:, 0]
            rows = zip(xs, target_fn(xs), pred,
                       *(fn(xs) for fn in BOUND_FNS.values()))
            grid = out / f"function_grid_seed{res.seed}.csv"
            _write_csv(grid, ["x", "target", "prediction",
                              "g1_up", "g2_up", "g1_lo", "g2_lo"],
                       ([float(v) for v in row] for row in rows), mhash)
            pts = out / f"train_points_seed{res.seed}.csv"
            _write_csv(pts, ["x", "target"],
                       ((float(x), float(t)) for x, t in
                        zip(res.scenario.x_train[:, 0], res.scenario.y_train[:, 0])), mhash)
            manifest["outputs"] += [grid.name, pts.name]
        elif settings["scenario"] == "unicycle":
            log = res.scenario.test_rollout(res.model)
            traj = out / f"trajectory_seed{res.seed}.csv"
            header = (["t", "p_x", "p_y", "theta", "v", "omega",
                       "v_nom", "omega_nom", "v_net", "omega_net"]
                      + [f"r_{i}" for i in range(log.residuals.shape[2])])
            _write_csv(traj, header, _trajectory_rows(log), mhash)
            manifest["outputs"].append(traj.name)

    metrics_path = out / "metrics.csv"
    report.write_metrics_csv(metrics_path)
    report.write_timings_csv(out / "timings.csv")
    manifest["outputs"] += [metrics_path.name, "timings.csv"]
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    print(f"wrote {len(manifest['outputs'])} artifacts to {out} (manifest {mhash})")
    return EXIT_OK


def cmd_verify(args) -> int:
    suite_fn = ALL_SUITES[args.suite]
    kwargs = {"seed": args.seed}
    if args.cases is not None:
        kwargs["cases"] = args.cases
    report = suite_fn(**kwargs)
    print(report.summary())
    if report.passed:
        return EXIT_OK
    args.out.mkdir(parents=True, exist_ok=True)
    fixture = args.out / f"verify_failure_{args.suite}.json"
    with open(fixture, "w") as fh:
        json.dump(report.failures[:10], fh, indent=2)
    print(f"counterexample fixture: {fixture}")
    return EXIT_PROPERTY


def cmd_export(args) -> int:
    run_dir: Path = args.run_dir
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        print(f"error: no manifest.json in {run_dir}", file=sys.stderr)
        return EXIT_CONFIG
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    scenario = manifest["scenario"]
    seeds = manifest["seeds"]
    export = run_dir / "export"
    export.mkdir(exist_ok=True)
    mhash = manifest["hash"]

    index = {"manifest": mhash, "scenario": scenario, "figures": {}}

    # merged long-format loss file feeds the loss figure for every scenario
    loss_path = export / "loss.csv"
    with open(loss_path, "w", newline="") as fh:
        fh.write(f"# manifest {mhash}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["seed", "epoch", "loss", "max_violation", "mean_violation"])
        for seed in seeds:
            with open(run_dir / f"loss_seed{seed}.csv") as src:
                reader = csv.reader(r for r in src if not r.startswith("#"))
                next(reader)
                for row in reader:
                    writer.writerow([seed] + row)
    index["figures"]["loss"] = {"csv": loss_path.name}

    if scenario == "piecewise":
        for name, stem in (("function", "function_grid_seed"), ("points", "train_points_seed")):
            src = run_dir / f"{stem}{seeds[0]}.csv"
            (export / f"{name}.csv").write_bytes(src.read_bytes())
        index["figures"]["function"] = {"csv": "function.csv", "points_csv": "points.csv"}
    elif scenario == "unicycle":
        src = run_dir / f"trajectory_seed{seeds[0]}.csv"
        (export / "trajectory.csv").write_bytes(src.read_bytes())
        geometry = {
            "obstacles": [{"A": a.tolist(), "b": b.tolist()} for a, b in OBSTACLES],
            "state_box": {"A": A_STATE[:4, :2].tolist(), "b": B_STATE[:4].tolist()},
            "goal": [0.0, 0.0],
            "goal_radius": 0.1,
            "command_bounds": {"lo": CMD_LO.tolist(), "hi": CMD_HI.tolist()},
        }
        with open(export / "geometry.json", "w") as fh:
            json.dump(geometry, fh, indent=2)
        index["figures"]["trajectory"] = {"csv": "trajectory.csv",
                                          "geometry_json": "geometry.json"}
        index["figures"]["controls"] = {"csv": "trajectory.csv",
                                        "geometry_json": "geometry.json"}

    with open(export / "index.json", "w") as fh:
        json.dump(index, fh, indent=2)
    print(f"export bundle at {export}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "train":
            return cmd_train(args)
        if args.command == "verify":
            return cmd_verify(args)
        return cmd_export(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except EmptyCandidateSetError as exc:
        print(f"infeasible projection: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
