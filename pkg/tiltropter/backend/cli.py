"""
Command-line entry points.

    run <scenario.yaml>        closed-loop run, logs and metrics under --out
    sweep <dir>                every scenario of a directory in a process pool
    metrics <name_sim.csv>     recompute metrics from written logs
    dump-allocation            A and A† of a vehicle as CSV
    identify-servo <csv>       first-order servo time constant from a step record
    tilt-transient             servo-compensation study of the wrench estimator
    serve                      batch run API (uvicorn)
"""
import argparse
import glob
import logging
import os
import sys
from multiprocessing import Pool
from typing import List, Optional, Tuple

import pandas as pd
import yaml
from dotenv import load_dotenv

from .allocation import allocation_frames, build_allocation
from .errors import TiltRopterError
from .harness import RunLogs, compute_metrics, run_scenario, run_tilt_transient, write_metrics
from .schemas import ScenarioConfig, VehicleConfig, load_scenario
from .wrench_est import TAU_BOUNDS, ServoIdDataset, identify_servo_tau

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(levelname)s - [%(name)s] - %(message)s"


def configure_logging() -> None:
    level = os.environ.get("TILTROPTER_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format=LOG_FORMAT)


def default_output_dir() -> str:
    return os.environ.get("TILTROPTER_OUTPUT_DIR", "./runs")


def apply_overrides(cfg: ScenarioConfig, args: argparse.Namespace) -> ScenarioConfig:
    """Fold the common run flags into a re-validated copy of the scenario."""
    data = cfg.model_dump()
    if getattr(args, "seed", None) is not None:
        data["seed"] = args.seed
    if getattr(args, "no_noise", False):
        data["noise"]["enabled"] = False
    if getattr(args, "no_estimator", False):
        data["estimator"]["enabled"] = False
    if getattr(args, "rti", False):
        data["nmpc"]["max_iter"] = 1
    return ScenarioConfig.model_validate(data)


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=None, help="RNG seed (overrides the scenario)")
    parser.add_argument("--out", type=str, default=None, help="Output directory")
    parser.add_argument("--no-noise", action="store_true", help="Disable IMU, ESC and state-feed noise")
    parser.add_argument("--no-estimator", action="store_true", help="Feed the ground-truth external wrench")
    parser.add_argument("--rti", action="store_true", help="Single SQP iteration per tick")


def cmd_run(args: argparse.Namespace) -> int:
    cfg = apply_overrides(load_scenario(args.scenario), args)
    out = args.out or os.path.join(default_output_dir(), cfg.name)
    result = run_scenario(cfg, output_dir=out)
    print(yaml.safe_dump(result.metrics.to_dict(), sort_keys=False))
    return 1 if result.metrics.failed else 0


SCENARIO_ERRORS = (TiltRopterError, ValueError, yaml.YAMLError)


def _load_with_overrides(path: str, overrides: dict) -> ScenarioConfig:
    return apply_overrides(load_scenario(path), argparse.Namespace(**overrides))


def _sweep_one(job: Tuple[str, dict, str]) -> dict:
    path, overrides, out = job
    configure_logging()
    name = os.path.splitext(os.path.basename(path))[0]
    try:
        cfg = _load_with_overrides(path, overrides)
        name = cfg.name
        result = run_scenario(cfg, output_dir=os.path.join(out, cfg.name))
        return {"scenario": path, "name": cfg.name, **result.metrics.to_dict(include_timing=False)}
    except SCENARIO_ERRORS as e:
        logger.error(f"Scenario {path} failed: {e}")
        return {"scenario": path, "name": name, "failed": True, "failure": str(e)}


def _record_in_ledger(rows: List[dict], overrides: dict, out: str) -> None:
    from . import ledger
    from .database import Base, SessionLocal, engine

    Base.metadata.create_all(bind=engine)
    db = SessionLocal()
    recorded = 0
    try:
        for row in rows:
            try:
                cfg = _load_with_overrides(row["scenario"], overrides)
            except SCENARIO_ERRORS as e:
                # A ledger row needs a valid scenario; unreadable files only appear in the summary.
                logger.warning(f"Not recording {row['scenario']} in the ledger: {e}")
                continue
            metrics = {k: v for k, v in row.items() if k not in ("scenario", "name")}
            ledger.record_finished(db, cfg, metrics, output_dir=os.path.join(out, cfg.name))
            recorded += 1
        logger.info(f"Recorded {recorded} runs in the ledger")
    finally:
        db.close()


def cmd_sweep(args: argparse.Namespace) -> int:
    paths = sorted(glob.glob(os.path.join(args.directory, "*.yaml")) + glob.glob(os.path.join(args.directory, "*.yml")))
    if not paths:
        logger.error(f"No scenario files in {args.directory}")
        return 2
    out = args.out or os.path.join(default_output_dir(), "sweep")
    os.makedirs(out, exist_ok=True)
    overrides = dict(seed=args.seed, no_noise=args.no_noise, no_estimator=args.no_estimator, rti=args.rti)
    jobs = [(path, overrides, out) for path in paths]
    logger.info(f"Sweeping {len(jobs)} scenarios with {args.workers} workers")
    if args.workers > 1:
        with Pool(args.workers) as pool:
            rows = pool.map(_sweep_one, jobs)
    else:
        rows = [_sweep_one(job) for job in jobs]

    summary = pd.json_normalize(rows)
    summary_path = os.path.join(out, "sweep_summary.csv")
    summary.to_csv(summary_path, index=False)
    logger.info(f"Wrote {summary_path}")
    if args.ledger:
        _record_in_ledger(rows, overrides, out)
    return 1 if any(row.get("failed") for row in rows) else 0


def cmd_metrics(args: argparse.Namespace) -> int:
    metrics = compute_metrics(RunLogs.load(args.log))
    if args.out:
        write_metrics(metrics, args.out)
    print(yaml.safe_dump(metrics.to_dict(), sort_keys=False))
    return 0


def cmd_dump_allocation(args: argparse.Namespace) -> int:
    vehicle = VehicleConfig.from_yaml(args.vehicle) if args.vehicle else VehicleConfig()
    A, A_pinv = allocation_frames(build_allocation(vehicle.to_params()))
    out = args.out or default_output_dir()
    os.makedirs(out, exist_ok=True)
    A.to_csv(os.path.join(out, "allocation_A.csv"))
    A_pinv.to_csv(os.path.join(out, "allocation_A_pinv.csv"))
    print(A.to_string(float_format=lambda v: f"{v: .5f}"))
    return 0


def cmd_identify_servo(args: argparse.Namespace) -> int:
    data = ServoIdDataset.from_csv(args.csv)
    fit = identify_servo_tau(data, bounds=(args.tau_min, args.tau_max))
    print(yaml.safe_dump({"tau": fit.tau, "rms_residual": fit.rms_residual, "evaluations": fit.iterations}, sort_keys=False))
    return 0


def cmd_tilt_transient(args: argparse.Namespace) -> int:
    result = run_tilt_transient(delta=args.delta)
    print(yaml.safe_dump({
        "peak_error_compensated": result.peak_error_compensated,
        "peak_error_uncompensated": result.peak_error_uncompensated,
        "improvement": result.improvement,
    }, sort_keys=False))
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    uvicorn.run("run:app", host=args.host, port=args.port, reload=args.reload)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tiltropter", description="Tilt-rotor NMPC simulation harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="Run one scenario")
    p.add_argument("scenario", help="Scenario YAML file")
    _add_run_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="Run every scenario in a directory")
    p.add_argument("directory")
    p.add_argument("--workers", type=int, default=max(1, (os.cpu_count() or 2) // 2))
    p.add_argument("--ledger", action="store_true", help="Record the runs in the SQL ledger")
    _add_run_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("metrics", help="Recompute metrics from a <name>_sim.csv log")
    p.add_argument("log")
    p.add_argument("--out", type=str, default=None, help="Write the metrics YAML here")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("dump-allocation", help="Write A and its pseudoinverse as CSV")
    p.add_argument("--vehicle", type=str, default=None, help="Vehicle YAML (defaults otherwise)")
    p.add_argument("--out", type=str, default=None)
    p.set_defaults(func=cmd_dump_allocation)

    p = sub.add_parser("identify-servo", help="Fit the servo time constant to a step record")
    p.add_argument("csv", help="CSV with timestamp, command, measured_angle columns")
    p.add_argument("--tau-min", type=float, default=TAU_BOUNDS[0])
    p.add_argument("--tau-max", type=float, default=TAU_BOUNDS[1])
    p.set_defaults(func=cmd_identify_servo)

    p = sub.add_parser("tilt-transient", help="Estimator servo-compensation study")
    p.add_argument("--delta", type=float, default=0.6, help="Tilt step on rotors 1 and 3 [rad]")
    p.set_defaults(func=cmd_tilt_transient)

    p = sub.add_parser("serve", help="Start the batch run API")
    p.add_argument("--host", default="0.0.0.0")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--reload", action="store_true")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (TiltRopterError, ValueError, FileNotFoundError) as e:
        logger.error(f"{args.command} failed: {e}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
