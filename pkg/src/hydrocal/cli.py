"""Command-line pipeline driver.

Subcommands chain through a shared output directory: `doe` writes the
design, `evaluate` the snapshot matrices and run ledger, `rom-fit` the
surrogates, `gsa` the sensitivity tables, `calibrate` / `twin` the
assimilation artifacts.  Every run appends structured lines to
hydrocal.log and stamps a manifest with the config hash and seed.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, assim, doe, gsa, pipeline, rom, swe
from .api import ApiError

LOG_NAME = "hydrocal.log"


def _setup_logging(out_dir: Path, subcommand: str):
    logger = logging.getLogger(f"hydrocal.{subcommand}")
    logger.setLevel(logging.INFO)
    logger.handlers.clear()
    handler = logging.FileHandler(out_dir / LOG_NAME, encoding="utf-8")
    handler.setFormatter(
        logging.Formatter(
            fmt=f"%(asctime)s %(levelname)s {subcommand} %(message)s",
            datefmt="%Y-%m-%dT%H:%M:%S%z",
        )
    )
    logger.addHandler(handler)
    logger.propagate = False
    return logger


def _write_json(path: Path, doc):
    path.write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")


def _write_manifest(out_dir: Path, subcommand, study, artifacts):
    _write_json(
        out_dir / "manifest.json",
        {
            "subcommand": subcommand,
            "config_hash": study.config_hash if study else None,
            "seed": study.seed if study else None,
            "tool_version": __version__,
            "artifacts": sorted(artifacts),
        },
    )


def _matrix_csv(path: Path, matrix, header):
    np.savetxt(path, matrix, delimiter=",", header=header, comments="", fmt="%.17g")


def _workers(args):
    if args.workers is not None:
        return max(1, args.workers)
    env = os.environ.get("HYDROCAL_WORKERS")
    return max(1, int(env)) if env else 1


# -- subcommand bodies --------------------------------------------------------


def _cmd_simulate(args, study, out_dir: Path, log):
    evaluator = pipeline.RowEvaluator(study.case_path, study.bindings)
    defaults = np.array(
        [
            60.0 if b.keyword == "MODEL.CHESTR" else
            {"MODEL.SEALEVEL": study.case.sealevel,
             "MODEL.TIDALRANGE": study.case.tidalrange,
             "MODEL.VELOCITYRANGE": study.case.velocityrange}.get(b.keyword, 0.0)
            for b in study.bindings
        ]
    )
    values = evaluator.evaluate(defaults)
    times = evaluator.record_times
    header = "time_s," + ",".join(f"station_{g + 1}" for g in range(values.shape[0]))
    _matrix_csv(out_dir / "trajectories.csv", np.column_stack([times, values.T]), header)
    log.info("simulated %d records at %d stations", values.shape[1], values.shape[0])
    _write_manifest(out_dir, "simulate", study, ["trajectories.csv"])
    return 0


def _cmd_doe(args, study, out_dir: Path, log):
    design = pipeline.make_design(study)
    doe.save_design(
        design,
        out_dir / "design.csv",
        out_dir / "design.json",
        extra_meta={"config_hash": study.config_hash},
    )
    log.info("design %dx%d scheme=%s seed=%s", design.n, design.dim, design.scheme, design.seed)
    _write_manifest(out_dir, "doe", study, ["design.csv", "design.json"])
    return 0


def _cmd_evaluate(args, study, out_dir: Path, log):
    design_path = Path(args.design) if args.design else out_dir / "design.csv"
    design = doe.load_design(design_path)
    workers = _workers(args)
    import time as _time

    t0 = _time.perf_counter()
    result = pipeline.evaluate_doe(study, design, workers=workers, mode=args.mode)
    log.info(
        "evaluated %d rows on %d workers in %.2fs",
        design.n,
        workers,
        _time.perf_counter() - t0,
    )
    artifacts = ["run_ledger.json"]
    _write_json(out_dir / "run_ledger.json", result.ledger.to_json())
    for snap in result.snapshots:
        name = f"snapshots_{snap.gauge}"
        _matrix_csv(
            out_dir / f"{name}.csv",
            snap.values,
            ",".join(f"t{k}" for k in range(snap.values.shape[1])),
        )
        _write_json(
            out_dir / f"{name}.json",
            {
                "gauge": snap.gauge,
                "times": snap.times.tolist(),
                "design": design_path.name,
                "seed": design.seed,
                "config_hash": study.config_hash,
                "row_mask": [bool(v) for v in result.ledger.ok_mask],
            },
        )
        artifacts += [f"{name}.csv", f"{name}.json"]
    _write_manifest(out_dir, "evaluate", study, artifacts)
    return 0


def _load_snapshots(study, out_dir: Path):
    design = doe.load_design(out_dir / "design.csv")
    snaps = []
    g = 1
    while (out_dir / f"snapshots_station_{g}.csv").exists():
        meta = json.loads(
            (out_dir / f"snapshots_station_{g}.json").read_text(encoding="utf-8")
        )
        values = np.loadtxt(out_dir / f"snapshots_station_{g}.csv", delimiter=",", skiprows=1, ndmin=2)
        snaps.append(
            rom.SnapshotMatrix(
                values,
                gauge=meta["gauge"],
                times=np.asarray(meta["times"], dtype=float),
            )
        )
        g += 1
    if not snaps:
        raise pipeline.PipelineError(f"no snapshot matrices found in {out_dir}")
    return design, snaps


def _cmd_rom_fit(args, study, out_dir: Path, log):
    design, snaps = _load_snapshots(study, out_dir)
    artifacts = []
    for snap in snaps:
        model = rom.build_rom(
            design,
            snap,
            study.space,
            variance_threshold=study.rom_threshold,
            max_degree=study.rom_max_degree,
            patience=study.rom_patience,
        )
        name = f"rom_{snap.gauge}.json"
        rom.save_rom(model, out_dir / name)
        artifacts.append(name)
        log.info(
            "rom %s: %d modes, explained %.6f",
            snap.gauge,
            model.n_modes,
            model.explained_variance,
        )
    _write_manifest(out_dir, "rom-fit", study, artifacts)
    return 0


def _load_roms(out_dir: Path):
    models = []
    g = 1
    while (out_dir / f"rom_station_{g}.json").exists():
        models.append(rom.load_rom(out_dir / f"rom_station_{g}.json"))
        g += 1
    if not models:
        raise pipeline.PipelineError(f"no rom files found in {out_dir}")
    return models


def _cmd_rom_validate(args, study, out_dir: Path, log):
    models = _load_roms(out_dir)
    result = pipeline.validate_roms(study, models, workers=_workers(args))
    times = models[0].times
    if times is None:
        times = np.arange(result.q2_per_gauge[0].size, dtype=float)
    header = "time_s," + ",".join(f"station_{g + 1}" for g in range(len(models)))
    _matrix_csv(
        out_dir / "q2.csv", np.column_stack([times, np.stack(result.q2_per_gauge).T]), header
    )
    _write_json(
        out_dir / "q2_summary.json",
        {
            "time_mean": result.q2_time_mean,
            "n_validation": study.n_validation,
            "config_hash": study.config_hash,
            "seed": study.seed,
        },
    )
    log.info("q2 time means: %s", ", ".join(f"{q:.4f}" for q in result.q2_time_mean))
    _write_manifest(out_dir, "rom-validate", study, ["q2.csv", "q2_summary.json"])
    return 0


def _gsi_csv(path: Path, per_gauge, names, confidences=None):
    lines = ["station,parameter,first_order,total_order"]
    if confidences:
        lines[0] += ",first_min,first_max,total_min,total_max"
    for g, gsi in enumerate(per_gauge):
        for i, name in enumerate(names):
            row = (
                f"station_{g + 1},{name},"
                f"{float(gsi.first[i])!r},{float(gsi.total[i])!r}"
            )
            if confidences:
                c = confidences[g]
                row += (
                    f",{float(c.first_min[i])!r},{float(c.first_max[i])!r}"
                    f",{float(c.total_min[i])!r},{float(c.total_max[i])!r}"
                )
            lines.append(row)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _cmd_gsa(args, study, out_dir: Path, log):
    models = _load_roms(out_dir)
    per_gauge = [gsa.rom_generalized_indices(m) for m in models]
    confidences = None
    if args.confidence:
        confidences = [
            pipeline.gsi_confidence(study, workers=_workers(args), gauge=g)
            for g in range(len(models))
        ]
    names = study.space.names
    artifacts = ["gsi.csv"]
    _gsi_csv(out_dir / "gsi.csv", per_gauge, names, confidences)
    for g, gsi in enumerate(per_gauge):
        name = f"chord_station_{g + 1}.json"
        _write_json(out_dir / name, gsa.chord_graph_export(gsi, names))
        artifacts.append(name)
        ranked = sorted(zip(names, gsi.total), key=lambda t: -t[1])
        log.info(
            "station_%d top parameters: %s",
            g + 1,
            ", ".join(f"{n}={v:.3f}" for n, v in ranked[:3]),
        )
    _write_manifest(out_dir, "gsa", study, artifacts)
    return 0


def _trace_csv(path: Path, report, names):
    lines = ["iteration,j,j_b,j_obs,grad_norm," + ",".join(names)]
    for row in report.result.trace.rows:
        xs = ",".join(repr(float(v)) for v in row.x)
        lines.append(
            f"{row.iteration},{float(row.j)!r},{float(row.j_b)!r},"
            f"{float(row.j_obs)!r},{float(row.grad_norm)!r},{xs}"
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _calibration_artifacts(out_dir, study, report, observations):
    names = report.parameter_names
    _trace_csv(out_dir / "calibration_trace.csv", report, names)
    _write_json(
        out_dir / "calibration_report.json",
        {
            "parameters": list(names),
            "x0": report.x0.tolist(),
            "x_map": report.x_map.tolist(),
            "status": report.result.status,
            "iterations": report.result.n_iterations,
            "j_final": report.result.cost.j,
            "j_b_final": report.result.cost.j_b,
            "j_obs_final": report.result.cost.j_obs,
            "config_hash": study.config_hash,
            "seed": study.seed,
        },
    )
    # per-station series observed vs model before/after
    lines = ["station,time_s,observed,model_prior,model_optimal"]
    offset = 0
    for s in sorted(observations):
        times, values = observations[s]
        m = len(times)
        for k in range(m):
            lines.append(
                f"{s},{float(times[k])!r},{float(values[k])!r},"
                f"{float(report.g_x0[offset + k])!r},{float(report.g_xmap[offset + k])!r}"
            )
        offset += m
    (out_dir / "fit_series.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return ["calibration_trace.csv", "calibration_report.json", "fit_series.csv"]


def _cmd_calibrate(args, study, out_dir: Path, log):
    obs_path = Path(args.obs) if args.obs else out_dir / "observations.csv"
    observations = pipeline.load_observations_csv(obs_path)
    report = pipeline.calibrate_study(study, observations, workers=_workers(args))
    artifacts = _calibration_artifacts(out_dir, study, report, observations)
    log.info(
        "calibrated %s in %d iterations (%s)",
        ", ".join(report.parameter_names),
        report.result.n_iterations,
        report.result.status,
    )
    _write_manifest(out_dir, "calibrate", study, artifacts)
    return 0


def _cmd_twin(args, study, out_dir: Path, log):
    workers = _workers(args)
    twin = pipeline.twin_experiment(study, workers=workers)

    artifacts = ["design.csv", "design.json", "run_ledger.json", "observations.csv"]
    doe.save_design(
        twin.design,
        out_dir / "design.csv",
        out_dir / "design.json",
        extra_meta={"config_hash": study.config_hash},
    )
    _write_json(out_dir / "run_ledger.json", twin.ledger.to_json())
    observations, _ = pipeline.synthesize_observations(
        study, twin.x_true, study.seed + pipeline.SEED_SALT_NOISE
    )
    pipeline.save_observations_csv(out_dir / "observations.csv", observations)

    names = study.space.names
    _gsi_csv(out_dir / "gsi.csv", twin.gsi_per_gauge, names)
    artifacts.append("gsi.csv")
    for g, gsi in enumerate(twin.gsi_per_gauge):
        name = f"chord_station_{g + 1}.json"
        _write_json(out_dir / name, gsa.chord_graph_export(gsi, names))
        artifacts.append(name)
    artifacts += _calibration_artifacts(out_dir, study, twin.calibration, observations)
    _write_json(
        out_dir / "twin_report.json",
        {
            "x_true": twin.x_true.tolist(),
            "parameters": list(names),
            "calibrated": list(study.cal_parameters),
            "x_map": twin.calibration.x_map.tolist(),
            "recovery_fraction_of_range": twin.recovery_fraction.tolist(),
            "q2_time_mean": twin.q2_time_mean,
            "iterations": twin.calibration.result.n_iterations,
            "status": twin.calibration.result.status,
            "config_hash": study.config_hash,
            "seed": study.seed,
        },
    )
    artifacts.append("twin_report.json")
    log.info(
        "twin recovery (fraction of range): %s",
        ", ".join(
            f"{n}={v:.4f}" for n, v in zip(study.cal_parameters, twin.recovery_fraction)
        ),
    )
    _write_manifest(out_dir, "twin", study, artifacts)
    return 0


_COMMANDS = {
    "simulate": _cmd_simulate,
    "doe": _cmd_doe,
    "evaluate": _cmd_evaluate,
    "rom-fit": _cmd_rom_fit,
    "rom-validate": _cmd_rom_validate,
    "gsa": _cmd_gsa,
    "calibrate": _cmd_calibrate,
    "twin": _cmd_twin,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="hydrocal",
        description="Tidal-channel study pipeline: DoE, surrogate, GSA, 3D-VAR.",
    )
    parser.add_argument("--version", action="version", version=f"hydrocal {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=False, help="study TOML file")
        p.add_argument("--seed", type=int, default=None, help="override the study seed")
        p.add_argument(
            "--workers",
            type=int,
            default=None,
            help="parallel evaluation workers (default $HYDROCAL_WORKERS or 1)",
        )
        p.add_argument("--out", default=".", help="artifact directory")
        if name == "evaluate":
            p.add_argument("--design", default=None, help="design CSV (default <out>/design.csv)")
            p.add_argument("--mode", choices=("strict", "permissive"), default="strict")
        if name == "gsa":
            p.add_argument(
                "--confidence",
                action="store_true",
                help="add min-max intervals from repeated pipeline runs",
            )
        if name == "calibrate":
            p.add_argument("--obs", default=None, help="observations CSV")
    return parser


_ERRORS = (
    ApiError,
    pipeline.PipelineError,
    assim.EvaluatorError,
    assim.ObservationGridError,
    swe.SolverError,
    ValueError,
    OSError,
)


def _error_line(exc) -> int:
    code = int(getattr(exc, "code", 1))
    payload = {"code": code, "kind": type(exc).__name__, "message": str(exc)}
    print(f"error: {json.dumps(payload, sort_keys=True)}", file=sys.stderr)
    return 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    # Load the configuration before touching the output directory so a bad
    # invocation leaves nothing behind.
    try:
        if args.config is None:
            raise pipeline.PipelineError("--config is required")
        study = pipeline.load_study_config(args.config, seed_override=args.seed)
    except _ERRORS as exc:
        return _error_line(exc)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    log = _setup_logging(out_dir, args.subcommand)
    try:
        return _COMMANDS[args.subcommand](args, study, out_dir, log)
    except _ERRORS as exc:
        log.error("%s", str(exc))
        return _error_line(exc)


if __name__ == "__main__":
    sys.exit(main())
