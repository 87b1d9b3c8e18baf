"""Stepwise control API over the channel solver.

Instance lifecycle (create, read case, allocate/init, step, finalize),
a keyword-addressed variable registry in the MODEL.* namespace, and a
steering-file parser.  Every failure raises ApiError with a distinct
nonzero code and leaves the instance state untouched.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import swe


class Phase(enum.IntEnum):
    CREATED = 0
    CASE_READ = 1
    ALLOCATED = 2
    INITIALIZED = 3
    RUNNING = 4
    FINALIZED = 5


class ApiCode(enum.IntEnum):
    MISSING_FILE = 1
    UNKNOWN_KEY = 2
    TYPE_MISMATCH = 3
    REPEATED_KEY = 4
    MISSING_KEY = 5
    SYNTAX = 6
    PHASE_ORDER = 7
    UNKNOWN_INSTANCE = 8
    STALE_HANDLE = 9
    UNKNOWN_KEYWORD = 10
    READ_ONLY = 11
    INDEX_RANGE = 12
    WRONG_KIND = 13
    CASE_INCONSISTENT = 14
    STEP_LIMIT = 15
    SOLVER_FAILURE = 16
    BAD_VALUE = 17


class ApiError(Exception):
    """API failure with a nonzero code; code 0 is never constructed."""

    def __init__(self, code: ApiCode, message, instance_id=None, keyword=None):
        if int(code) == 0:
            raise ValueError("ApiError code must be nonzero")
        super().__init__(message)
        self.code = ApiCode(code)
        self.instance_id = instance_id
        self.keyword = keyword

    def __str__(self):
        base = super().__str__()
        return f"[{self.code.name}] {base}"


@dataclass(frozen=True)
class VariableDescriptor:
    keyword: str
    kind: str  # "real" | "integer"
    indexed: bool
    mutable: bool
    phase: Phase  # earliest phase at which access is legal


REGISTRY = {
    d.keyword: d
    for d in [
        VariableDescriptor("MODEL.AT", "real", False, False, Phase.INITIALIZED),
        VariableDescriptor("MODEL.DT", "real", False, True, Phase.CASE_READ),
        VariableDescriptor("MODEL.LT", "integer", False, False, Phase.INITIALIZED),
        VariableDescriptor("MODEL.NTIMESTEPS", "integer", False, True, Phase.CASE_READ),
        VariableDescriptor("MODEL.NPOIN", "integer", False, False, Phase.INITIALIZED),
        VariableDescriptor("MODEL.X", "real", True, False, Phase.INITIALIZED),
        VariableDescriptor(
            "MODEL.BOTTOMELEVATION", "real", True, False, Phase.INITIALIZED
        ),
        VariableDescriptor("MODEL.CHESTR", "real", True, True, Phase.INITIALIZED),
        VariableDescriptor("MODEL.SEALEVEL", "real", False, True, Phase.CASE_READ),
        VariableDescriptor("MODEL.TIDALRANGE", "real", False, True, Phase.CASE_READ),
        VariableDescriptor("MODEL.VELOCITYRANGE", "real", False, True, Phase.CASE_READ),
        VariableDescriptor("MODEL.WATERDEPTH", "real", True, False, Phase.INITIALIZED),
        VariableDescriptor("MODEL.VELOCITYU", "real", True, False, Phase.INITIALIZED),
        VariableDescriptor("MODEL.Z", "real", True, False, Phase.INITIALIZED),
        VariableDescriptor("MODEL.DEBIT", "real", False, True, Phase.CASE_READ),
    ]
}

DEFAULT_STRICKLER = 60.0

_CASE_KEYS = {
    "GEOMETRY_FILE": str,
    "CONSTITUENTS_FILE": str,
    "DT": float,
    "NTIMESTEPS": int,
    "RECORD_INTERVAL": float,
    "SPINUP_S": float,
    "GAUGES": "gauges",
    "SEALEVEL": float,
    "TIDALRANGE": float,
    "VELOCITYRANGE": float,
    "UPSTREAM_DISCHARGE": "discharge",
    "ZREF": float,
    "CFL": float,
}
_REQUIRED_CASE_KEYS = ("GEOMETRY_FILE", "CONSTITUENTS_FILE", "DT", "NTIMESTEPS")


@dataclass
class CaseConfig:
    """Parsed steering file, with paths resolved against the file location."""

    geometry_file: Path
    constituents_file: Path
    dt: float
    ntimesteps: int
    record_interval: float
    spinup_s: float
    gauges: tuple
    sealevel: float = 0.0
    tidalrange: float = 1.0
    velocityrange: float = 1.0
    upstream_discharge: float | str = 0.0
    zref: float = 0.0
    cfl: float = 0.9


def _parse_scalar(key, text, kind):
    if kind is float:
        try:
            return float(text)
        except ValueError:
            raise ApiError(
                ApiCode.TYPE_MISMATCH, f"key {key}: expected a number, got {text!r}"
            ) from None
    if kind is int:
        try:
            return int(text)
        except ValueError:
            raise ApiError(
                ApiCode.TYPE_MISMATCH, f"key {key}: expected an integer, got {text!r}"
            ) from None
    return text


def parse_case_file(path) -> CaseConfig:
    """Parse a `KEY = VALUE` steering file ('#' starts a comment)."""
    path = Path(path)
    if not path.is_file():
        raise ApiError(ApiCode.MISSING_FILE, f"case file not found: {path}")
    raw = {}
    for lineno, line in enumerate(
        path.read_text(encoding="utf-8").splitlines(), start=1
    ):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ApiError(ApiCode.SYNTAX, f"{path}:{lineno}: expected KEY = VALUE")
        key, value = (part.strip() for part in text.split("=", 1))
        if key not in _CASE_KEYS:
            raise ApiError(ApiCode.UNKNOWN_KEY, f"{path}:{lineno}: unknown key {key}")
        if key in raw:
            raise ApiError(ApiCode.REPEATED_KEY, f"{path}:{lineno}: repeated key {key}")
        raw[key] = value
    for key in _REQUIRED_CASE_KEYS:
        if key not in raw:
            raise ApiError(ApiCode.MISSING_KEY, f"{path}: missing required key {key}")

    parsed = {}
    for key, value in raw.items():
        kind = _CASE_KEYS[key]
        if kind == "gauges":
            try:
                parsed[key] = tuple(float(p) for p in value.split(";") if p.strip())
            except ValueError:
                raise ApiError(
                    ApiCode.TYPE_MISMATCH,
                    f"key GAUGES: expected semicolon-separated numbers, got {value!r}",
                ) from None
        elif kind == "discharge":
            try:
                parsed[key] = float(value)
            except ValueError:
                parsed[key] = value  # hydrograph file path
        else:
            parsed[key] = _parse_scalar(key, value, kind)

    dt = parsed["DT"]
    if dt <= 0:
        raise ApiError(ApiCode.BAD_VALUE, "DT must be positive")
    if parsed["NTIMESTEPS"] <= 0:
        raise ApiError(ApiCode.BAD_VALUE, "NTIMESTEPS must be positive")

    base = path.parent

    def _resolve(p):
        p = Path(p)
        return p if p.is_absolute() else base / p

    discharge = parsed.get("UPSTREAM_DISCHARGE", 0.0)
    if isinstance(discharge, str):
        discharge = str(_resolve(discharge))
    return CaseConfig(
        geometry_file=_resolve(parsed["GEOMETRY_FILE"]),
        constituents_file=_resolve(parsed["CONSTITUENTS_FILE"]),
        dt=dt,
        ntimesteps=parsed["NTIMESTEPS"],
        record_interval=parsed.get("RECORD_INTERVAL", dt),
        spinup_s=parsed.get("SPINUP_S", 43200.0),
        gauges=parsed.get("GAUGES", ()),
        sealevel=parsed.get("SEALEVEL", 0.0),
        tidalrange=parsed.get("TIDALRANGE", 1.0),
        velocityrange=parsed.get("VELOCITYRANGE", 1.0),
        upstream_discharge=discharge,
        zref=parsed.get("ZREF", 0.0),
        cfl=parsed.get("CFL", 0.9),
    )


def load_hydrograph_csv(path):
    """Read a `time_s,discharge` table; returns a step-time interpolator."""
    path = Path(path)
    if not path.is_file():
        raise ApiError(ApiCode.MISSING_FILE, f"hydrograph file not found: {path}")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] != 2:
        raise ApiError(ApiCode.CASE_INCONSISTENT, f"{path}: expected 2 columns")
    times, values = data[:, 0], data[:, 1]
    if np.any(np.diff(times) <= 0):
        raise ApiError(ApiCode.CASE_INCONSISTENT, f"{path}: times must increase")
    return times, values


class _Instance:
    def __init__(self, instance_id):
        self.id = instance_id
        self.phase = Phase.CREATED
        self.case: CaseConfig | None = None
        self.params: dict = {}
        self.geometry = None
        self.constituents = None
        self.ks_cell = None
        self.state = None
        self.lt = 0
        self.hydrograph = None


class SimApi:
    """Registry of independent simulation instances.

    Instances are fully isolated; distinct instances may be driven from
    distinct threads.  A single instance requires exclusive access.
    """

    def __init__(self):
        self._instances: dict[int, _Instance] = {}
        self._finalized: set[int] = set()
        self._next_id = 1

    # -- lifecycle -----------------------------------------------------

    def create_instance(self) -> int:
        instance_id = self._next_id
        self._next_id += 1
        self._instances[instance_id] = _Instance(instance_id)
        return instance_id

    def _get(self, instance_id) -> _Instance:
        inst = self._instances.get(instance_id)
        if inst is None:
            if instance_id in self._finalized:
                raise ApiError(
                    ApiCode.STALE_HANDLE,
                    f"instance {instance_id} was finalized",
                    instance_id=instance_id,
                )
            raise ApiError(
                ApiCode.UNKNOWN_INSTANCE,
                f"no instance {instance_id}",
                instance_id=instance_id,
            )
        return inst

    def read_case(self, instance_id, case_path):
        inst = self._get(instance_id)
        if inst.phase != Phase.CREATED:
            raise ApiError(
                ApiCode.PHASE_ORDER,
                f"read_case requires phase CREATED, instance is {inst.phase.name}",
                instance_id=instance_id,
            )
        case = parse_case_file(case_path)
        inst.case = case
        inst.params = {
            "dt": case.dt,
            "ntimesteps": case.ntimesteps,
            "sealevel": case.sealevel,
            "tidalrange": case.tidalrange,
            "velocityrange": case.velocityrange,
            "debit": case.upstream_discharge,
        }
        inst.phase = Phase.CASE_READ

    def allocate_and_init(self, instance_id):
        inst = self._get(instance_id)
        if inst.phase != Phase.CASE_READ:
            raise ApiError(
                ApiCode.PHASE_ORDER,
                f"allocate_and_init requires phase CASE_READ, instance is {inst.phase.name}",
                instance_id=instance_id,
            )
        case = inst.case
        try:
            geometry = swe.load_geometry_csv(case.geometry_file)
            constituents = swe.load_constituents_csv(case.constituents_file)
        except FileNotFoundError as exc:
            raise ApiError(ApiCode.MISSING_FILE, str(exc), instance_id=instance_id)
        except ValueError as exc:
            raise ApiError(
                ApiCode.CASE_INCONSISTENT, str(exc), instance_id=instance_id
            )
        for pos in case.gauges:
            if not (geometry.cell_centers[0] <= pos <= geometry.cell_centers[-1]):
                raise ApiError(
                    ApiCode.CASE_INCONSISTENT,
                    f"gauge at x={pos} outside the geometry",
                    instance_id=instance_id,
                )
        hydrograph = None
        if isinstance(inst.params["debit"], str):
            hydrograph = load_hydrograph_csv(inst.params["debit"])
        inst.phase = Phase.ALLOCATED
        inst.geometry = geometry
        inst.constituents = constituents
        inst.hydrograph = hydrograph
        inst.ks_cell = np.full(geometry.n_cells, DEFAULT_STRICKLER)
        inst.state = swe.still_state(geometry, case.zref)
        inst.lt = 0
        inst.phase = Phase.INITIALIZED

    def run_timestep(self, instance_id):
        inst = self._get(instance_id)
        if inst.phase not in (Phase.INITIALIZED, Phase.RUNNING):
            raise ApiError(
                ApiCode.PHASE_ORDER,
                f"run_timestep requires an initialized instance, got {inst.phase.name}",
                instance_id=instance_id,
            )
        if inst.lt >= inst.params["ntimesteps"]:
            raise ApiError(
                ApiCode.STEP_LIMIT,
                f"instance {instance_id} already ran NTIMESTEPS={inst.params['ntimesteps']} steps",
                instance_id=instance_id,
            )
        forcing = swe.TidalForcing(
            inst.constituents,
            alpha=inst.params["tidalrange"],
            beta=inst.params["velocityrange"],
            gamma=inst.params["sealevel"],
            z_ref=inst.case.zref,
        )
        discharge = self._current_discharge(inst)
        try:
            new_state = swe.step(
                inst.state,
                inst.geometry,
                inst.ks_cell,
                forcing,
                inst.params["dt"],
                discharge=discharge,
                cfl_number=inst.case.cfl,
            )
        except swe.SolverError as exc:
            raise ApiError(
                ApiCode.SOLVER_FAILURE, str(exc), instance_id=instance_id
            ) from exc
        inst.state = new_state
        inst.lt += 1
        inst.phase = Phase.RUNNING

    def finalize(self, instance_id):
        inst = self._get(instance_id)
        del self._instances[inst.id]
        self._finalized.add(inst.id)
        inst.phase = Phase.FINALIZED
        inst.state = None
        inst.geometry = None

    def live_instances(self):
        return tuple(sorted(self._instances))

    def phase(self, instance_id) -> Phase:
        if instance_id in self._finalized:
            return Phase.FINALIZED
        return self._get(instance_id).phase

    def _current_discharge(self, inst):
        debit = inst.params["debit"]
        if inst.hydrograph is not None:
            times, values = inst.hydrograph
            return float(np.interp(inst.state.t, times, values))
        return float(debit) if debit else None

    # -- keyword access ------------------------------------------------

    def _descriptor(self, keyword, instance_id):
        desc = REGISTRY.get(keyword)
        if desc is None:
            raise ApiError(
                ApiCode.UNKNOWN_KEYWORD,
                f"unknown keyword {keyword}",
                instance_id=instance_id,
                keyword=keyword,
            )
        return desc

    def _check_access(self, inst, desc, i, j, k):
        if inst.phase < desc.phase:
            raise ApiError(
                ApiCode.PHASE_ORDER,
                f"{desc.keyword} requires phase {desc.phase.name}, "
                f"instance is {inst.phase.name}",
                instance_id=inst.id,
                keyword=desc.keyword,
            )
        if j != 0 or k != 0:
            raise ApiError(
                ApiCode.INDEX_RANGE,
                f"{desc.keyword}: indices j,k are unused and must be 0",
                instance_id=inst.id,
                keyword=desc.keyword,
            )
        if desc.indexed:
            n = inst.geometry.n_cells
            if not (1 <= i <= n):
                raise ApiError(
                    ApiCode.INDEX_RANGE,
                    f"{desc.keyword}: index i={i} outside 1..{n}",
                    instance_id=inst.id,
                    keyword=desc.keyword,
                )
        elif i != 0:
            raise ApiError(
                ApiCode.INDEX_RANGE,
                f"{desc.keyword} is a scalar; index i must be 0",
                instance_id=inst.id,
                keyword=desc.keyword,
            )

    def get_value(self, instance_id, keyword, i=0, j=0, k=0):
        inst = self._get(instance_id)
        desc = self._descriptor(keyword, instance_id)
        self._check_access(inst, desc, i, j, k)
        idx = i - 1
        if keyword == "MODEL.AT":
            return float(inst.state.t)
        if keyword == "MODEL.DT":
            return float(inst.params["dt"])
        if keyword == "MODEL.LT":
            return int(inst.lt)
        if keyword == "MODEL.NTIMESTEPS":
            return int(inst.params["ntimesteps"])
        if keyword == "MODEL.NPOIN":
            return int(inst.geometry.n_cells)
        if keyword == "MODEL.X":
            return float(inst.geometry.cell_centers[idx])
        if keyword == "MODEL.BOTTOMELEVATION":
            return float(inst.geometry.bed_elevation[idx])
        if keyword == "MODEL.CHESTR":
            return float(inst.ks_cell[idx])
        if keyword == "MODEL.SEALEVEL":
            return float(inst.params["sealevel"])
        if keyword == "MODEL.TIDALRANGE":
            return float(inst.params["tidalrange"])
        if keyword == "MODEL.VELOCITYRANGE":
            return float(inst.params["velocityrange"])
        if keyword == "MODEL.WATERDEPTH":
            return float(inst.state.h[idx])
        if keyword == "MODEL.VELOCITYU":
            return float(inst.state.u[idx])
        if keyword == "MODEL.Z":
            return float(inst.state.h[idx] + inst.geometry.bed_elevation[idx])
        if keyword == "MODEL.DEBIT":
            value = self._current_discharge(inst)
            return 0.0 if value is None else value
        raise AssertionError(f"descriptor without getter: {keyword}")

    def set_value(self, instance_id, keyword, value, i=0, j=0, k=0):
        inst = self._get(instance_id)
        desc = self._descriptor(keyword, instance_id)
        if not desc.mutable:
            raise ApiError(
                ApiCode.READ_ONLY,
                f"{keyword} is read-only",
                instance_id=instance_id,
                keyword=keyword,
            )
        self._check_access(inst, desc, i, j, k)
        value = _coerce(desc, value, instance_id)
        if keyword == "MODEL.DT":
            if value <= 0:
                raise ApiError(
                    ApiCode.BAD_VALUE, "DT must be positive", instance_id, keyword
                )
            inst.params["dt"] = value
        elif keyword == "MODEL.NTIMESTEPS":
            if value <= 0:
                raise ApiError(
                    ApiCode.BAD_VALUE,
                    "NTIMESTEPS must be positive",
                    instance_id,
                    keyword,
                )
            inst.params["ntimesteps"] = value
        elif keyword == "MODEL.CHESTR":
            if value <= 0:
                raise ApiError(
                    ApiCode.BAD_VALUE,
                    "Strickler coefficient must be positive",
                    instance_id,
                    keyword,
                )
            inst.ks_cell[i - 1] = value
        elif keyword == "MODEL.SEALEVEL":
            inst.params["sealevel"] = value
        elif keyword == "MODEL.TIDALRANGE":
            inst.params["tidalrange"] = value
        elif keyword == "MODEL.VELOCITYRANGE":
            inst.params["velocityrange"] = value
        elif keyword == "MODEL.DEBIT":
            if value < 0:
                raise ApiError(
                    ApiCode.BAD_VALUE,
                    "upstream discharge must be non-negative",
                    instance_id,
                    keyword,
                )
            inst.params["debit"] = value
            inst.hydrograph = None
        else:
            raise AssertionError(f"descriptor without setter: {keyword}")


def _coerce(desc, value, instance_id):
    if isinstance(value, bool):
        raise ApiError(
            ApiCode.WRONG_KIND,
            f"{desc.keyword} expects a {desc.kind}, got a boolean",
            instance_id=instance_id,
            keyword=desc.keyword,
        )
    if desc.kind == "integer":
        if not isinstance(value, (int, np.integer)):
            raise ApiError(
                ApiCode.WRONG_KIND,
                f"{desc.keyword} expects an integer, got {type(value).__name__}",
                instance_id=instance_id,
                keyword=desc.keyword,
            )
        return int(value)
    if not isinstance(value, (int, float, np.floating, np.integer)):
        raise ApiError(
            ApiCode.WRONG_KIND,
            f"{desc.keyword} expects a real, got {type(value).__name__}",
            instance_id=instance_id,
            keyword=desc.keyword,
        )
    return float(value)
