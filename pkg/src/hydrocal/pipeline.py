"""Study orchestration: TOML study configs, parameter-to-keyword bindings,
a seeded parallel evaluation pool over independent API instances, the
ROM/GSA wiring and the twin-experiment harness.

Every numerical output is a pure function of (config, seeds, tool
version); worker counts never change results, only wall time.
"""

from __future__ import annotations

import hashlib
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__, assim, doe, gsa, rom, swe
from .api import CaseConfig, SimApi, parse_case_file

SCHEMA_VERSION = 1
SEED_SALT_OPTIMIZER = 1
SEED_SALT_VALIDATION = 2
SEED_SALT_NOISE = 3
SEED_SALT_CONFIDENCE = 100
SEED_SALT_CONVERGENCE = 200


class PipelineError(RuntimeError):
    pass


@dataclass(frozen=True)
class ParameterBinding:
    """One study parameter and the registry keyword it drives."""

    name: str
    keyword: str
    bounds: tuple
    zone: int | None = None  # required for MODEL.CHESTR (zone broadcast)

    def __post_init__(self):
        if self.keyword == "MODEL.CHESTR" and self.zone is None:
            raise ValueError(f"parameter {self.name}: MODEL.CHESTR needs a zone")
        if self.keyword != "MODEL.CHESTR" and self.zone is not None:
            raise ValueError(f"parameter {self.name}: zone only applies to MODEL.CHESTR")


@dataclass
class StudyConfig:
    """Parsed study.toml plus the hash that stamps every artifact."""

    path: Path
    case_path: Path
    case: CaseConfig
    bindings: tuple
    doe_n: int
    doe_scheme: str
    seed: int
    optimizer_iters: int
    rom_threshold: float
    rom_max_degree: int
    rom_patience: int | None
    n_validation: int
    gsa_repetitions: int
    gsa_sample_sizes: tuple
    cal_parameters: tuple
    cal_x0: np.ndarray
    cal_obs_interval: float
    cal_obs_horizon: float
    cal_fd_increment: float
    cal_fd_scheme: str
    cal_max_iter: int
    cal_grad_tol: float
    cal_fixed: dict
    twin_x_true: np.ndarray | None
    twin_noise_std: float
    config_hash: str

    @property
    def space(self) -> doe.ParameterSpace:
        return doe.ParameterSpace(
            tuple(b.name for b in self.bindings),
            tuple(b.bounds for b in self.bindings),
        )

    def binding(self, name) -> ParameterBinding:
        for b in self.bindings:
            if b.name == name:
                return b
        raise KeyError(f"no parameter named {name}")


def load_study_config(path, seed_override=None) -> StudyConfig:
    path = Path(path)
    if not path.is_file():
        raise PipelineError(f"study config not found: {path}")
    raw = path.read_bytes()
    doc = tomllib.loads(raw.decode("utf-8"))
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise PipelineError(
            f"unsupported schema_version {doc.get('schema_version')!r}"
        )
    case_path = Path(doc["case"])
    if not case_path.is_absolute():
        case_path = path.parent / case_path
    case = parse_case_file(case_path)

    bindings = []
    for entry in doc.get("parameters", []):
        bindings.append(
            ParameterBinding(
                name=entry["name"],
                keyword=entry["keyword"],
                bounds=(float(entry["bounds"][0]), float(entry["bounds"][1])),
                zone=entry.get("zone"),
            )
        )
    if not bindings:
        raise PipelineError("study config declares no parameters")

    doe_doc = doc.get("doe", {})
    rom_doc = doc.get("rom", {})
    gsa_doc = doc.get("gsa", {})
    cal_doc = doc.get("calibration", {})
    twin_doc = doc.get("twin", {})

    cal_parameters = tuple(cal_doc.get("parameters", ()))
    names = {b.name for b in bindings}
    for p in cal_parameters:
        if p not in names:
            raise PipelineError(f"calibration parameter {p!r} is not in the space")
    cal_fixed = {str(k): float(v) for k, v in cal_doc.get("fixed", {}).items()}

    twin_x_true = twin_doc.get("x_true")
    if twin_x_true is not None:
        twin_x_true = np.asarray(twin_x_true, dtype=float)
        if twin_x_true.size != len(bindings):
            raise PipelineError("twin.x_true must list one value per parameter")

    seed = int(doe_doc.get("seed", 0)) if seed_override is None else int(seed_override)
    return StudyConfig(
        path=path,
        case_path=case_path,
        case=case,
        bindings=tuple(bindings),
        doe_n=int(doe_doc.get("n", 128)),
        doe_scheme=str(doe_doc.get("scheme", doe.SCHEME_LHS_OPT)),
        seed=seed,
        optimizer_iters=int(doe_doc.get("optimizer_iters", 1000)),
        rom_threshold=float(rom_doc.get("variance_threshold", 0.9995)),
        rom_max_degree=int(rom_doc.get("max_degree", 5)),
        rom_patience=(
            int(rom_doc["patience"]) if rom_doc.get("patience") is not None else None
        ),
        n_validation=int(rom_doc.get("n_validation", 100)),
        gsa_repetitions=int(gsa_doc.get("repetitions", 30)),
        gsa_sample_sizes=tuple(int(n) for n in gsa_doc.get("sample_sizes", ())),
        cal_parameters=cal_parameters,
        cal_x0=np.asarray(cal_doc.get("x0", ()), dtype=float),
        cal_obs_interval=float(cal_doc.get("obs_interval_s", case.record_interval)),
        cal_obs_horizon=float(
            cal_doc.get("obs_horizon_s", case.ntimesteps * case.dt - case.spinup_s)
        ),
        cal_fd_increment=float(cal_doc.get("fd_increment", 1e-4)),
        cal_fd_scheme=str(cal_doc.get("fd_scheme", "forward")),
        cal_max_iter=int(cal_doc.get("max_iter", 200)),
        cal_grad_tol=float(cal_doc.get("grad_tol", 1e-5)),
        cal_fixed=cal_fixed,
        twin_x_true=twin_x_true,
        twin_noise_std=float(twin_doc.get("noise_std", 0.05)),
        config_hash=hashlib.sha256(raw).hexdigest()[:16],
    )


# -- single-run evaluation (API workflow) -----------------------------------


@dataclass
class _RecordSpec:
    dt: float
    n_steps: int
    spin_steps: int
    rec_steps: int

    @property
    def n_records(self):
        return (self.n_steps - self.spin_steps) // self.rec_steps

    def record_times(self):
        ks = self.spin_steps + self.rec_steps * np.arange(1, self.n_records + 1)
        return ks * self.dt


def _record_spec(case: CaseConfig, interval=None, horizon=None) -> _RecordSpec:
    dt = case.dt
    interval = case.record_interval if interval is None else interval
    spin = case.spinup_s
    total = case.ntimesteps * dt - spin if horizon is None else horizon

    def steps(value, name):
        ratio = value / dt
        k = int(round(ratio))
        if k <= 0 or abs(ratio - k) > 1e-9:
            raise PipelineError(f"{name}={value} must be a positive multiple of DT={dt}")
        return k

    spin_steps = steps(spin, "SPINUP_S") if spin > 0 else 0
    rec_steps = steps(interval, "RECORD_INTERVAL")
    horizon_steps = steps(total, "horizon")
    return _RecordSpec(dt, spin_steps + horizon_steps, spin_steps, rec_steps)


class RowEvaluator:
    """Runs one parameter vector through a fresh API instance.

    The instance follows the stepwise workflow: create, read the case,
    allocate/init, set the parameters, loop timesteps while extracting the
    free surface at the gauges, finalize.
    """

    def __init__(self, case_path, bindings, interval=None, horizon=None):
        self.case_path = str(case_path)
        self.bindings = tuple(bindings)
        self.case = parse_case_file(case_path)
        if not self.case.gauges:
            raise PipelineError("case file declares no GAUGES")
        self.spec = _record_spec(self.case, interval, horizon)
        geometry = swe.load_geometry_csv(self.case.geometry_file)
        self.stencils = swe.gauge_weights(geometry, self.case.gauges)
        self.zone_cells = {
            z: np.nonzero(geometry.zone_id == z)[0] for z in range(geometry.n_zones)
        }
        for b in self.bindings:
            if b.zone is not None and b.zone not in self.zone_cells:
                raise PipelineError(f"parameter {b.name}: zone {b.zone} not in geometry")

    @property
    def record_times(self):
        return self.spec.record_times()

    @property
    def n_gauges(self):
        return len(self.case.gauges)

    def evaluate(self, x) -> np.ndarray:
        """Gauge trajectories for one parameter vector, shape (n_gauges, T)."""
        x = np.asarray(x, dtype=float)
        api = SimApi()
        handle = api.create_instance()
        try:
            api.read_case(handle, self.case_path)
            api.allocate_and_init(handle)
            if self.spec.n_steps != self.case.ntimesteps:
                api.set_value(handle, "MODEL.NTIMESTEPS", int(self.spec.n_steps))
            for b, value in zip(self.bindings, x):
                if b.keyword == "MODEL.CHESTR":
                    for cell in self.zone_cells[b.zone]:
                        api.set_value(handle, "MODEL.CHESTR", float(value), i=int(cell) + 1)
                else:
                    api.set_value(handle, b.keyword, float(value))
            spec = self.spec
            out = np.empty((self.n_gauges, spec.n_records))
            col = 0
            for k in range(1, spec.n_steps + 1):
                api.run_timestep(handle)
                if k > spec.spin_steps and (k - spec.spin_steps) % spec.rec_steps == 0:
                    for g, (i, w) in enumerate(self.stencils):
                        z0 = api.get_value(handle, "MODEL.Z", i=i + 1)
                        z1 = api.get_value(handle, "MODEL.Z", i=i + 2)
                        out[g, col] = (1.0 - w) * z0 + w * z1
                    col += 1
            return out
        finally:
            api.finalize(handle)


def kernel_evaluate(case_path, bindings, x, interval=None, horizon=None) -> np.ndarray:
    """Same map as RowEvaluator.evaluate but driven through run_gauges."""
    case = parse_case_file(case_path)
    geometry = swe.load_geometry_csv(case.geometry_file)
    constituents = swe.load_constituents_csv(case.constituents_file)
    ks_cell = np.full(geometry.n_cells, 60.0)
    alpha, beta, gamma = case.tidalrange, case.velocityrange, case.sealevel
    for b, value in zip(bindings, np.asarray(x, dtype=float)):
        if b.keyword == "MODEL.CHESTR":
            ks_cell[geometry.zone_id == b.zone] = value
        elif b.keyword == "MODEL.SEALEVEL":
            gamma = float(value)
        elif b.keyword == "MODEL.TIDALRANGE":
            alpha = float(value)
        elif b.keyword == "MODEL.VELOCITYRANGE":
            beta = float(value)
        else:
            raise PipelineError(f"binding {b.name}: unsupported keyword {b.keyword}")
    forcing = swe.TidalForcing(
        constituents, alpha=alpha, beta=beta, gamma=gamma, z_ref=case.zref
    )
    spec = _record_spec(case, interval, horizon)
    discharge = None
    if isinstance(case.upstream_discharge, str):
        from .api import load_hydrograph_csv

        times, values = load_hydrograph_csv(case.upstream_discharge)
        discharge = lambda t: float(np.interp(t, times, values))  # noqa: E731
    elif case.upstream_discharge:
        discharge = float(case.upstream_discharge)
    record = swe.run_gauges(
        geometry,
        ks_cell,
        forcing,
        swe.GaugeSet(case.gauges, spec.rec_steps * spec.dt),
        dt=spec.dt,
        horizon_s=(spec.n_steps - spec.spin_steps) * spec.dt,
        spinup_s=spec.spin_steps * spec.dt,
        discharge=discharge,
        cfl_number=case.cfl,
    )
    return record.values


# -- parallel design evaluation ---------------------------------------------


@dataclass
class LedgerRow:
    index: int
    status: str  # "ok" | "failed"
    checksum: str | None
    error: str | None = None


@dataclass
class RunLedger:
    """Per-row completion record for one design evaluation."""

    rows: list
    seed: int | None
    tool_version: str = __version__

    @property
    def ok_mask(self):
        return np.array([r.status == "ok" for r in self.rows], dtype=bool)

    def to_json(self):
        return {
            "schema": "hydrocal-ledger-v1",
            "seed": self.seed,
            "tool_version": self.tool_version,
            "rows": [
                {
                    "index": r.index,
                    "status": r.status,
                    "checksum": r.checksum,
                    "error": r.error,
                }
                for r in self.rows
            ],
        }


_WORKER_EVALUATOR = None


def _worker_init(case_path, bindings, interval, horizon):
    global _WORKER_EVALUATOR
    _WORKER_EVALUATOR = RowEvaluator(case_path, bindings, interval, horizon)


def _worker_eval(task):
    index, x = task
    try:
        values = _WORKER_EVALUATOR.evaluate(np.asarray(x))
        return index, values, None
    except Exception as exc:  # noqa: BLE001 - reported in the ledger
        return index, None, f"{type(exc).__name__}: {exc}"


def _row_checksum(values) -> str:
    return hashlib.sha256(np.ascontiguousarray(values).tobytes()).hexdigest()[:16]


@dataclass
class EvaluationResult:
    snapshots: list  # one SnapshotMatrix per gauge
    ledger: RunLedger
    record_times: np.ndarray
    design: doe.Design


def evaluate_doe(
    study: StudyConfig,
    design: doe.Design,
    workers=1,
    mode="strict",
    interval=None,
    horizon=None,
) -> EvaluationResult:
    """Evaluate every design row on its own API instance.

    Results are reduced by row index, so any worker count produces the
    same matrices.  In strict mode a failed row aborts; in permissive mode
    failed rows are dropped and masked in the ledger.
    """
    if mode not in ("strict", "permissive"):
        raise ValueError("mode must be 'strict' or 'permissive'")
    evaluator = RowEvaluator(study.case_path, study.bindings, interval, horizon)
    tasks = list(enumerate(np.asarray(design.scaled_matrix)))
    results: dict[int, tuple] = {}
    if workers and workers > 1:
        with ProcessPoolExecutor(
            max_workers=workers,
            initializer=_worker_init,
            initargs=(str(study.case_path), study.bindings, interval, horizon),
        ) as pool:
            for index, values, error in pool.map(
                _worker_eval, tasks, chunksize=max(1, len(tasks) // (workers * 4))
            ):
                results[index] = (values, error)
    else:
        for task in tasks:
            index, values, error = _worker_eval_local(evaluator, task)
            results[index] = (values, error)

    rows = []
    ok_values = []
    for index in range(len(tasks)):
        values, error = results[index]
        if error is None:
            rows.append(LedgerRow(index, "ok", _row_checksum(values)))
            ok_values.append(values)
        else:
            rows.append(LedgerRow(index, "failed", None, error))
    ledger = RunLedger(rows=rows, seed=design.seed)
    failed = [r for r in rows if r.status != "ok"]
    if failed and mode == "strict":
        raise PipelineError(
            f"{len(failed)} of {len(rows)} rows failed; first: "
            f"row {failed[0].index}: {failed[0].error}"
        )
    if not ok_values:
        raise PipelineError("no rows succeeded")
    stacked = np.stack(ok_values)  # (n_ok, n_gauges, T)
    times = evaluator.record_times
    snapshots = [
        rom.SnapshotMatrix(
            stacked[:, g, :],
            gauge=f"station_{g + 1}",
            times=times,
            design_meta={"seed": design.seed, "scheme": design.scheme},
        )
        for g in range(evaluator.n_gauges)
    ]
    return EvaluationResult(snapshots, ledger, times, design)


def _worker_eval_local(evaluator, task):
    index, x = task
    try:
        return index, evaluator.evaluate(np.asarray(x)), None
    except Exception as exc:  # noqa: BLE001
        return index, None, f"{type(exc).__name__}: {exc}"


# -- study stages ------------------------------------------------------------


def make_design(study: StudyConfig, n=None, seed=None) -> doe.Design:
    n = study.doe_n if n is None else n
    seed = study.seed if seed is None else seed
    space = study.space
    if study.doe_scheme == doe.SCHEME_SOBOL:
        design = doe.sobol_sequence(n, space.dim)
    elif study.doe_scheme in (doe.SCHEME_LHS, doe.SCHEME_LHS_OPT):
        design = doe.lhs(n, space.dim, seed)
        if study.doe_scheme == doe.SCHEME_LHS_OPT:
            design = doe.optimize_lhs(
                design, study.optimizer_iters, seed + SEED_SALT_OPTIMIZER
            )
    else:
        raise PipelineError(f"unknown DoE scheme {study.doe_scheme!r}")
    return doe.scale_design(design, space)


def fit_roms(study: StudyConfig, evaluation: EvaluationResult) -> list:
    return [
        rom.build_rom(
            evaluation.design,
            snap,
            study.space,
            variance_threshold=study.rom_threshold,
            max_degree=study.rom_max_degree,
            patience=study.rom_patience,
        )
        for snap in evaluation.snapshots
    ]


@dataclass
class ValidationResult:
    q2_per_gauge: list  # arrays Q2(t)
    q2_time_mean: list
    design: doe.Design


def validate_roms(study: StudyConfig, roms, workers=1, seed=None) -> ValidationResult:
    """Fresh-design solver runs scored by the predictivity coefficient."""
    seed = (study.seed if seed is None else seed) + SEED_SALT_VALIDATION
    design = doe.scale_design(
        doe.lhs(study.n_validation, study.space.dim, seed), study.space
    )
    evaluation = evaluate_doe(study, design, workers=workers)
    q2s = []
    means = []
    for model, snap in zip(roms, evaluation.snapshots):
        q2t = rom.q2(model, design.scaled_matrix, snap.values)
        q2s.append(q2t)
        means.append(float(np.nanmean(q2t)))
    return ValidationResult(q2s, means, design)


def study_gsi(study: StudyConfig, roms) -> list:
    return [gsa.rom_generalized_indices(model) for model in roms]


def run_gsi_once(study: StudyConfig, n, seed, workers=1) -> list:
    """One full DoE -> evaluation -> ROM -> GSA pass (per gauge)."""
    design = make_design(study, n=n, seed=seed)
    evaluation = evaluate_doe(study, design, workers=workers)
    roms = fit_roms(study, evaluation)
    return study_gsi(study, roms)


def gsi_confidence(study: StudyConfig, repetitions=None, workers=1, gauge=0):
    """Min-max envelopes over independently seeded pipeline repetitions."""
    repetitions = study.gsa_repetitions if repetitions is None else repetitions
    seeds = [study.seed + SEED_SALT_CONFIDENCE + k for k in range(repetitions)]
    return gsa.gsi_confidence(
        lambda s: run_gsi_once(study, study.doe_n, s, workers)[gauge], seeds
    )


def convergence_study(study: StudyConfig, sample_sizes=None, workers=1, gauge=0):
    sizes = study.gsa_sample_sizes if sample_sizes is None else sample_sizes
    if not sizes:
        raise PipelineError("no sample sizes configured")
    return gsa.convergence_study(
        lambda n, s: run_gsi_once(study, n, s, workers)[gauge],
        sizes,
        study.seed + SEED_SALT_CONVERGENCE,
    )


# -- calibration wiring -------------------------------------------------------


def _reduced_vector_to_full(study: StudyConfig, reduced_names, x_reduced, fixed):
    full = []
    lookup = dict(zip(reduced_names, x_reduced))
    for b in study.bindings:
        if b.name in lookup:
            full.append(float(lookup[b.name]))
        elif b.name in fixed:
            full.append(float(fixed[b.name]))
        else:
            raise PipelineError(
                f"parameter {b.name} is neither calibrated nor fixed"
            )
    return np.asarray(full)


class CalibrationEvaluator:
    """Forward map G for the reduced parameter set at observation times."""

    def __init__(self, study: StudyConfig, fixed, station_indices, record_indices):
        self.study = study
        self.fixed = dict(fixed)
        self.names = study.cal_parameters
        self.stations = tuple(station_indices)
        self.record_indices = tuple(np.asarray(ix, dtype=int) for ix in record_indices)
        self.row_evaluator = RowEvaluator(
            study.case_path,
            study.bindings,
            interval=study.cal_obs_interval,
            horizon=study.cal_obs_horizon,
        )

    def __call__(self, x_reduced):
        full = _reduced_vector_to_full(self.study, self.names, x_reduced, self.fixed)
        values = self.row_evaluator.evaluate(full)
        parts = [
            values[s][ix] for s, ix in zip(self.stations, self.record_indices)
        ]
        return np.concatenate(parts)


def load_observations_csv(path):
    """Read `station,time_s,value` rows grouped by station index."""
    path = Path(path)
    if not path.is_file():
        raise PipelineError(f"observations file not found: {path}")
    stations: dict[int, list] = {}
    with path.open(encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "station,time_s,value":
            raise PipelineError(f"{path}: expected header station,time_s,value")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise PipelineError(f"{path}:{lineno}: expected 3 columns")
            s = int(parts[0])
            stations.setdefault(s, []).append((float(parts[1]), float(parts[2])))
    out = {}
    for s, rows in stations.items():
        rows.sort()
        out[s] = (np.array([t for t, _ in rows]), np.array([v for _, v in rows]))
    return out


def save_observations_csv(path, observations):
    lines = ["station,time_s,value"]
    for s in sorted(observations):
        times, values = observations[s]
        for t, v in zip(times, values):
            lines.append(f"{s},{float(t)!r},{float(v)!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def calibrate_study(
    study: StudyConfig, observations, fixed=None, workers=1
) -> assim.CalibrationReport:
    """3D-VAR calibration of the reduced parameter set against observations.

    `observations` maps 1-based station index to (times, values).  Times
    must land on the calibration record grid (strict nearest matching).
    """
    if not study.cal_parameters:
        raise PipelineError("study config has no calibration parameters")
    fixed = dict(fixed or study.cal_fixed)
    for b in study.bindings:
        if b.name not in study.cal_parameters and b.name not in fixed:
            raise PipelineError(f"parameter {b.name} is neither calibrated nor fixed")
    probe = RowEvaluator(
        study.case_path,
        study.bindings,
        interval=study.cal_obs_interval,
        horizon=study.cal_obs_horizon,
    )
    record_times = probe.record_times
    station_indices = []
    record_indices = []
    y_parts = []
    for s in sorted(observations):
        if not (1 <= s <= probe.n_gauges):
            raise PipelineError(f"observation station {s} out of range")
        times, values = observations[s]
        idx = assim.match_observation_times(
            record_times, times, study.cal_obs_interval
        )
        station_indices.append(s - 1)
        record_indices.append(idx)
        y_parts.append(np.asarray(values, dtype=float))
    evaluator = CalibrationEvaluator(study, fixed, station_indices, record_indices)
    y = np.concatenate(y_parts)
    bounds = np.array(
        [study.binding(name).bounds for name in study.cal_parameters]
    )
    return assim.calibrate(
        evaluator,
        y,
        study.cal_x0,
        bounds,
        parameter_names=study.cal_parameters,
        max_iter=study.cal_max_iter,
        grad_tol=study.cal_grad_tol,
        fd_increment=study.cal_fd_increment,
        fd_scheme=study.cal_fd_scheme,
    )


# -- twin experiment ----------------------------------------------------------


def synthesize_observations(study: StudyConfig, x_true, noise_seed, noise_std=None):
    """Gauge records from a known truth plus additive Gaussian noise.

    `noise_std` is the true measurement noise (defaults to the study's
    twin setting); the assimilation itself still assumes the 0.1*|Y|
    observation covariance rule, which deliberately overestimates it.
    """
    evaluator = RowEvaluator(
        study.case_path,
        study.bindings,
        interval=study.cal_obs_interval,
        horizon=study.cal_obs_horizon,
    )
    clean = evaluator.evaluate(np.asarray(x_true, dtype=float))
    times = evaluator.record_times
    if noise_std is None:
        noise_std = study.twin_noise_std
    rng = np.random.default_rng(noise_seed)
    observations = {}
    for g in range(clean.shape[0]):
        noisy = clean[g] + rng.normal(0.0, noise_std, size=clean[g].shape)
        observations[g + 1] = (times.copy(), noisy)
    return observations, clean


@dataclass
class TwinReport:
    x_true: np.ndarray
    design: doe.Design
    gsi_per_gauge: list
    q2_time_mean: list
    q2_per_gauge: list
    calibration: assim.CalibrationReport
    recovery_fraction: np.ndarray  # |x_map - x_true| / parameter range
    ledger: RunLedger


def twin_experiment(study: StudyConfig, x_true=None, workers=1) -> TwinReport:
    """Full pipeline against synthetic truth: DoE, ROM, GSA, calibration."""
    if x_true is None:
        x_true = study.twin_x_true
    if x_true is None:
        raise PipelineError("no twin.x_true in the study config")
    x_true = np.asarray(x_true, dtype=float)
    if not study.space.contains(x_true):
        raise PipelineError("x_true lies outside the parameter bounds")

    design = make_design(study)
    evaluation = evaluate_doe(study, design, workers=workers)
    roms = fit_roms(study, evaluation)
    validation = validate_roms(study, roms, workers=workers)
    gsi = study_gsi(study, roms)

    observations, _ = synthesize_observations(
        study, x_true, study.seed + SEED_SALT_NOISE
    )
    truth_fixed = {b.name: float(v) for b, v in zip(study.bindings, x_true)}
    report = calibrate_study(study, observations, fixed=truth_fixed, workers=workers)

    truth_reduced = np.array(
        [truth_fixed[name] for name in study.cal_parameters]
    )
    ranges = np.array(
        [
            study.binding(name).bounds[1] - study.binding(name).bounds[0]
            for name in study.cal_parameters
        ]
    )
    recovery = np.abs(report.x_map - truth_reduced) / ranges
    return TwinReport(
        x_true=x_true,
        design=design,
        gsi_per_gauge=gsi,
        q2_time_mean=validation.q2_time_mean,
        q2_per_gauge=validation.q2_per_gauge,
        calibration=report,
        recovery_fraction=recovery,
        ledger=evaluation.ledger,
    )
