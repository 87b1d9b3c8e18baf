"""1D finite-volume shallow-water channel solver.

Explicit HLL scheme with hydrostatic bed reconstruction (well balanced,
positivity preserving), zoned Strickler friction applied pointwise
implicitly, harmonic tidal forcing at the downstream boundary and an
optional prescribed discharge upstream.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

GRAVITY = 9.81
DRY_THRESHOLD = 1e-6


class SolverError(Exception):
    """Base class for numerical failures of the channel solver."""


class CflError(SolverError):
    """Requested time step exceeds the CFL-stable step."""


class BlowupError(SolverError):
    """NaN or negative depth detected during a step."""

    def __init__(self, message, cell=None, time=None):
        super().__init__(message)
        self.cell = cell
        self.time = time


class BoundaryDryingError(SolverError):
    """Tidal boundary demanded a negative water depth."""

    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


@dataclass(frozen=True)
class ChannelGeometry:
    """Uniform 1D cell layout with bed elevation and friction-zone ids."""

    cell_centers: np.ndarray
    bed_elevation: np.ndarray
    zone_id: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.cell_centers, dtype=float)
        zb = np.asarray(self.bed_elevation, dtype=float)
        zones = np.asarray(self.zone_id, dtype=int)
        if x.ndim != 1 or x.size < 3:
            raise ValueError("geometry needs at least 3 cells")
        if zb.shape != x.shape or zones.shape != x.shape:
            raise ValueError("geometry arrays must share one length")
        spacing = np.diff(x)
        if np.any(spacing <= 0):
            raise ValueError("cell centers must be strictly increasing")
        if not np.allclose(spacing, spacing[0], rtol=1e-9, atol=1e-9):
            raise ValueError("cell spacing must be uniform")
        if zones.min() < 0:
            raise ValueError("zone ids must be non-negative")
        present = np.unique(zones)
        if present.size != zones.max() + 1:
            missing = sorted(set(range(zones.max() + 1)) - set(present.tolist()))
            raise ValueError(f"friction zones {missing} have no cells")
        object.__setattr__(self, "cell_centers", x)
        object.__setattr__(self, "bed_elevation", zb)
        object.__setattr__(self, "zone_id", zones)

    @property
    def n_cells(self):
        return self.cell_centers.size

    @property
    def dx(self):
        return float(self.cell_centers[1] - self.cell_centers[0])

    @property
    def n_zones(self):
        return int(self.zone_id.max()) + 1


@dataclass(frozen=True)
class FrictionParams:
    """Strickler coefficient per friction zone (m^(1/3)/s)."""

    ks: np.ndarray

    def __post_init__(self):
        ks = np.asarray(self.ks, dtype=float)
        if ks.ndim != 1 or ks.size < 1:
            raise ValueError("ks must be a 1D array with one entry per zone")
        if np.any(ks <= 0):
            raise ValueError("Strickler coefficients must be positive")
        object.__setattr__(self, "ks", ks)

    def per_cell(self, geometry: ChannelGeometry) -> np.ndarray:
        if geometry.n_zones > self.ks.size:
            raise ValueError(
                f"geometry has {geometry.n_zones} zones, friction only {self.ks.size}"
            )
        return self.ks[geometry.zone_id]


@dataclass(frozen=True)
class Constituent:
    """One harmonic constituent of the tidal signal."""

    amplitude: float
    period_s: float
    phase_rad: float = 0.0
    phase0_rad: float = 0.0
    nodal_factor: float = 1.0
    nodal_phase_rad: float = 0.0
    velocity_amplitude: float = 0.0
    velocity_phase_rad: float = 0.0

    def __post_init__(self):
        if self.period_s <= 0:
            raise ValueError("constituent period must be positive")


@dataclass(frozen=True)
class TidalForcing:
    """Harmonic boundary forcing with range/velocity multipliers and level shift."""

    constituents: tuple
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.0
    z_ref: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "constituents", tuple(self.constituents))


@dataclass
class FlowState:
    """Depths, velocities and current time of one running simulation."""

    h: np.ndarray
    u: np.ndarray
    t: float = 0.0

    def copy(self) -> "FlowState":
        return FlowState(self.h.copy(), self.u.copy(), self.t)


@dataclass(frozen=True)
class GaugeSet:
    """Observation positions along the channel and their record cadence."""

    positions: tuple
    record_interval_s: float

    def __post_init__(self):
        object.__setattr__(self, "positions", tuple(float(p) for p in self.positions))
        if self.record_interval_s <= 0:
            raise ValueError("record interval must be positive")


@dataclass(frozen=True)
class GaugeRecord:
    """Recorded free-surface trajectories: values[g, k] at times[k]."""

    times: np.ndarray
    values: np.ndarray
    positions: tuple


def strickler_cf(h, ks):
    """Dimensionless friction coefficient 2 g / (h^(1/3) Ks^2)."""
    if h <= 0:
        raise ValueError("depth must be positive")
    if ks <= 0:
        raise ValueError("Strickler coefficient must be positive")
    return 2.0 * GRAVITY / (h ** (1.0 / 3.0) * ks**2)


def friction_source(h, u, ks, dry_threshold=DRY_THRESHOLD):
    """Friction acceleration -g u|u| / (Ks^2 h^(4/3)); zero on dry cells."""
    if h < dry_threshold:
        return 0.0
    return -GRAVITY * u * abs(u) / (ks**2 * h ** (4.0 / 3.0))


def tidal_boundary(forcing: TidalForcing, t, zb_boundary):
    """Water depth and velocity demanded by the harmonic forcing at time t.

    Raises BoundaryDryingError when the requested depth is negative.
    """
    if t < 0:
        raise ValueError("time must be non-negative")
    eta = 0.0
    vel = 0.0
    for c in forcing.constituents:
        omega_t = 2.0 * math.pi * t / c.period_s
        eta += (
            c.nodal_factor
            * c.amplitude
            * math.cos(omega_t - c.phase_rad + c.phase0_rad + c.nodal_phase_rad)
        )
        vel += (
            c.nodal_factor
            * c.velocity_amplitude
            * math.cos(omega_t - c.velocity_phase_rad + c.phase0_rad + c.nodal_phase_rad)
        )
    h_bnd = forcing.alpha * eta - zb_boundary + forcing.z_ref - forcing.gamma
    u_bnd = forcing.beta * vel
    if h_bnd < 0:
        raise BoundaryDryingError(
            f"tidal boundary dried out at t={t:.3f}s (requested depth {h_bnd:.3f} m)",
            time=t,
        )
    return h_bnd, u_bnd


@njit(cache=True)
def _hll_interface(h_l, u_l, h_r, u_r):
    """HLL flux through one interface, with dry-front wave-speed estimates.

    Bitwise-equal left/right states return the exact physical flux so
    equilibrium states stay equilibria in floating point.
    """
    dry_l = h_l <= 0.0
    dry_r = h_r <= 0.0
    if dry_l and dry_r:
        return 0.0, 0.0
    if h_l == h_r and u_l == u_r:
        return h_l * u_l, h_l * u_l * u_l + 0.5 * GRAVITY * h_l * h_l

    c_l = math.sqrt(GRAVITY * h_l)
    c_r = math.sqrt(GRAVITY * h_r)
    if dry_l:
        # Ritter front speed into the dry left state.
        s_l = u_r - 2.0 * c_r
        s_r = u_r + c_r
    elif dry_r:
        s_l = u_l - c_l
        s_r = u_l + 2.0 * c_l
    else:
        s_l = min(u_l - c_l, u_r - c_r)
        s_r = max(u_l + c_l, u_r + c_r)

    hu_l = h_l * u_l
    hu_r = h_r * u_r
    f1_l = hu_l
    f2_l = hu_l * u_l + 0.5 * GRAVITY * h_l * h_l
    f1_r = hu_r
    f2_r = hu_r * u_r + 0.5 * GRAVITY * h_r * h_r

    if s_l >= 0.0:
        return f1_l, f2_l
    if s_r <= 0.0:
        return f1_r, f2_r
    span = s_r - s_l
    f1 = (s_r * f1_l - s_l * f1_r + s_l * s_r * (h_r - h_l)) / span
    f2 = (s_r * f2_l - s_l * f2_r + s_l * s_r * (hu_r - hu_l)) / span
    return f1, f2


@njit(cache=True)
def _step_core(
    h, u, zb, ks, dx, dt, cfl_number, dry, hg_left, ug_left, right_kind, h_bnd, u_bnd
):
    """One explicit update; returns (h_new, u_new, wave speed, status, cell).

    status: 0 ok, 1 negative depth, 2 NaN, 3 CFL violation.
    right_kind: 0 wall, 1 tidal depth with imposed inflow velocity, 2 tidal
    depth with outflow (interior velocity extrapolated).
    """
    n = h.size
    hw = np.empty(n)
    uw = np.empty(n)
    lam = 0.0
    for i in range(n):
        hi = h[i]
        ui = u[i]
        if hi <= dry:
            hi = max(hi, 0.0)
            ui = 0.0
        hw[i] = hi
        uw[i] = ui
        speed = abs(ui) + math.sqrt(GRAVITY * hi)
        if speed > lam:
            lam = speed
    if lam > 0.0 and dt * lam > cfl_number * dx * (1.0 + 1e-12):
        return hw, uw, lam, 3, -1

    if right_kind == 0:
        hg_right = hw[n - 1]
        ug_right = -uw[n - 1]
    elif right_kind == 1:
        hg_right = h_bnd
        ug_right = u_bnd
    else:
        hg_right = h_bnd
        ug_right = uw[n - 1]

    f1 = np.empty(n + 1)
    f2 = np.empty(n + 1)
    p_l = np.empty(n + 1)
    p_r = np.empty(n + 1)
    for j in range(n + 1):
        if j == 0:
            hl_c, ul_c, zl = hg_left, ug_left, zb[0]
        else:
            hl_c, ul_c, zl = hw[j - 1], uw[j - 1], zb[j - 1]
        if j == n:
            hr_c, ur_c, zr = hg_right, ug_right, zb[n - 1]
        else:
            hr_c, ur_c, zr = hw[j], uw[j], zb[j]
        z_face = max(zl, zr)
        h_ls = max(hl_c + zl - z_face, 0.0)
        h_rs = max(hr_c + zr - z_face, 0.0)
        f1j, f2j = _hll_interface(h_ls, ul_c, h_rs, ur_c)
        f1[j] = f1j
        f2[j] = f2j
        p_l[j] = 0.5 * GRAVITY * h_ls * h_ls
        p_r[j] = 0.5 * GRAVITY * h_rs * h_rs

    coef = dt / dx
    h_new = np.empty(n)
    u_new = np.empty(n)
    status = 0
    bad_cell = -1
    for i in range(n):
        hv = hw[i] - coef * (f1[i + 1] - f1[i])
        huv = hw[i] * uw[i] - coef * ((f2[i + 1] - p_l[i + 1]) - (f2[i] - p_r[i]))
        if math.isnan(hv) or math.isnan(huv):
            return hw, uw, lam, 2, i
        if hv < 0.0:
            if hv < -1e-11 and status == 0:
                status = 1
                bad_cell = i
            hv = 0.0
        if hv > dry:
            us = huv / hv
            # Implicit pointwise friction keeps the term unconditionally stable.
            us = us / (1.0 + dt * GRAVITY * abs(us) / (ks[i] ** 2 * hv ** (4.0 / 3.0)))
        else:
            us = 0.0
        h_new[i] = hv
        u_new[i] = us
    return h_new, u_new, lam, status, bad_cell


def _discharge_ghost(q, h_in, u_in, dry_threshold):
    """Upstream ghost state carrying unit-width discharge q into the channel.

    Depth follows from the outgoing characteristic u - 2 sqrt(g h); on a dry
    first cell the critical depth of q is used instead.
    """
    if q < 0:
        raise ValueError("upstream discharge must be non-negative")
    if h_in < dry_threshold:
        h_g = (q * q / GRAVITY) ** (1.0 / 3.0)
        if h_g < dry_threshold:
            return 0.0, 0.0
        return h_g, q / h_g
    invariant = u_in - 2.0 * math.sqrt(GRAVITY * h_in)

    def f(h):
        return q / h - 2.0 * math.sqrt(GRAVITY * h) - invariant

    # f is strictly decreasing; bracket the root then apply safeguarded Newton.
    lo = 1e-12
    hi = max(h_in, 1.0)
    while f(hi) > 0:
        hi *= 2.0
        if hi > 1e6:
            raise SolverError("upstream boundary depth solve failed to bracket")
    h_g = max(h_in, lo * 2)
    for _ in range(100):
        val = f(h_g)
        if val > 0:
            lo = h_g
        else:
            hi = h_g
        deriv = -q / (h_g * h_g) - math.sqrt(GRAVITY / h_g)
        step = val / deriv
        h_new = h_g - step
        if not (lo < h_new < hi):
            h_new = 0.5 * (lo + hi)
        if abs(h_new - h_g) < 1e-14 * max(1.0, h_g):
            h_g = h_new
            break
        h_g = h_new
    return h_g, q / h_g


def _resolve_ks(friction, geometry):
    if isinstance(friction, FrictionParams):
        return friction.per_cell(geometry)
    if type(friction) is np.ndarray and friction.shape == (geometry.n_cells,):
        return friction
    ks = np.asarray(friction, dtype=float)
    if ks.shape != (geometry.n_cells,):
        raise ValueError("per-cell friction must have one entry per cell")
    if np.any(ks <= 0):
        raise ValueError("Strickler coefficients must be positive")
    return ks


def max_wave_speed(state: FlowState, dry_threshold=DRY_THRESHOLD):
    wet = state.h > dry_threshold
    if not np.any(wet):
        return 0.0
    return float(
        np.max(np.abs(state.u[wet]) + np.sqrt(GRAVITY * state.h[wet]))
    )


def step(
    state: FlowState,
    geometry: ChannelGeometry,
    friction,
    forcing: TidalForcing | None,
    dt,
    *,
    discharge=None,
    cfl_number=0.9,
    dry_threshold=DRY_THRESHOLD,
) -> FlowState:
    """Advance the state by one explicit step of size dt.

    `forcing=None` closes the downstream (last-cell) boundary; `discharge`
    is None for a closed upstream boundary, otherwise a non-negative
    unit-width discharge (scalar or callable of time) entering at the first
    cell.  Raises CflError when dt is larger than the stable step and
    BlowupError when the update produces NaN or negative depths.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    zb = geometry.bed_elevation
    ks_cell = _resolve_ks(friction, geometry)

    # Upstream ghost (first cell): wall by default, else prescribed discharge.
    h0 = state.h[0] if state.h[0] > dry_threshold else max(state.h[0], 0.0)
    u0 = state.u[0] if state.h[0] > dry_threshold else 0.0
    q_up = discharge(state.t) if callable(discharge) else discharge
    if q_up is None or q_up == 0.0:
        hg_left, ug_left = h0, -u0
    else:
        hg_left, ug_left = _discharge_ghost(float(q_up), h0, u0, dry_threshold)

    # Downstream ghost (last cell): wall without forcing, tidal otherwise.
    if forcing is None:
        right_kind, h_bnd, u_bnd = 0, 0.0, 0.0
    else:
        h_bnd, u_bnd = tidal_boundary(forcing, state.t, zb[-1])
        # Velocity signal only imposed while directed into the channel.
        right_kind = 1 if u_bnd < 0.0 else 2

    h_new, u_new, lam, status, cell = _step_core(
        state.h,
        state.u,
        zb,
        ks_cell,
        geometry.dx,
        dt,
        cfl_number,
        dry_threshold,
        hg_left,
        ug_left,
        right_kind,
        h_bnd,
        u_bnd,
    )
    if status == 3:
        raise CflError(
            f"dt={dt:.6g}s violates CFL: stable step is "
            f"{cfl_number * geometry.dx / lam:.6g}s at t={state.t:.3f}s"
        )
    if status == 2:
        raise BlowupError(
            f"NaN in cell {cell} at t={state.t + dt:.3f}s",
            cell=cell,
            time=state.t + dt,
        )
    if status == 1:
        raise BlowupError(
            f"negative depth in cell {cell} at t={state.t + dt:.3f}s",
            cell=cell,
            time=state.t + dt,
        )
    return FlowState(h_new, u_new, state.t + dt)


def still_state(geometry: ChannelGeometry, surface_level) -> FlowState:
    """Water at rest with the free surface at `surface_level`."""
    h = np.maximum(surface_level - geometry.bed_elevation, 0.0)
    return FlowState(h, np.zeros_like(h), 0.0)


def gauge_weights(geometry: ChannelGeometry, positions):
    """Linear interpolation stencils (cell index, weight) for gauge positions."""
    x = geometry.cell_centers
    out = []
    for pos in positions:
        if pos < x[0] or pos > x[-1]:
            raise ValueError(f"gauge at x={pos} lies outside the cell centers")
        idx = int(np.clip(np.searchsorted(x, pos) - 1, 0, x.size - 2))
        w = (pos - x[idx]) / (x[idx + 1] - x[idx])
        out.append((idx, float(w)))
    return out


def _steps_of(interval, dt, name):
    ratio = interval / dt
    steps = int(round(ratio))
    if steps <= 0 or abs(ratio - steps) > 1e-9:
        raise ValueError(f"{name}={interval} must be a positive multiple of dt={dt}")
    return steps


def run_gauges(
    geometry: ChannelGeometry,
    friction,
    forcing: TidalForcing,
    gauges: GaugeSet,
    *,
    dt,
    horizon_s,
    spinup_s=43200.0,
    discharge=None,
    cfl_number=0.9,
    dry_threshold=DRY_THRESHOLD,
    initial_state: FlowState | None = None,
) -> GaugeRecord:
    """Run the channel and record free-surface elevation at the gauges.

    The run covers spinup_s + horizon_s; recording starts one interval after
    the spin-up and repeats every gauges.record_interval_s.  Deterministic:
    identical inputs give bitwise-identical trajectories.
    """
    rec_steps = _steps_of(gauges.record_interval_s, dt, "record_interval")
    spin_steps = _steps_of(spinup_s, dt, "spinup") if spinup_s > 0 else 0
    total_steps = spin_steps + _steps_of(horizon_s, dt, "horizon")

    state = initial_state.copy() if initial_state is not None else still_state(
        geometry, forcing.z_ref
    )
    ks_cell = _resolve_ks(friction, geometry)
    stencils = gauge_weights(geometry, gauges.positions)
    zb = geometry.bed_elevation

    times = []
    rows = []
    for k in range(1, total_steps + 1):
        state = step(
            state,
            geometry,
            ks_cell,
            forcing,
            dt,
            discharge=discharge,
            cfl_number=cfl_number,
            dry_threshold=dry_threshold,
        )
        if k > spin_steps and (k - spin_steps) % rec_steps == 0:
            surface = state.h + zb
            rows.append(
                [(1.0 - w) * surface[i] + w * surface[i + 1] for i, w in stencils]
            )
            times.append(k * dt)
    values = np.asarray(rows, dtype=float).T if rows else np.zeros((len(stencils), 0))
    return GaugeRecord(np.asarray(times, dtype=float), values, gauges.positions)


GEOMETRY_HEADER = ["x", "zb", "zone"]
CONSTITUENTS_HEADER = [
    "amplitude",
    "period_s",
    "phase_rad",
    "phase0_rad",
    "vel_amplitude",
    "vel_phase_rad",
]


def load_geometry_csv(path) -> ChannelGeometry:
    """Read a `x,zb,zone` channel description (one row per cell)."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip() for c in header] != GEOMETRY_HEADER:
            raise ValueError(f"{path}: expected header {','.join(GEOMETRY_HEADER)}")
        xs, zbs, zones = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 columns")
            try:
                xs.append(float(row[0]))
                zbs.append(float(row[1]))
                zones.append(int(row[2]))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return ChannelGeometry(np.asarray(xs), np.asarray(zbs), np.asarray(zones))


def save_geometry_csv(path, geometry: ChannelGeometry):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(GEOMETRY_HEADER)
        for x, zb, zone in zip(
            geometry.cell_centers, geometry.bed_elevation, geometry.zone_id
        ):
            writer.writerow([repr(float(x)), repr(float(zb)), int(zone)])


def load_constituents_csv(path):
    """Read harmonic constituents; returns a tuple of Constituent."""
    path = Path(path)
    out = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip() for c in header] != CONSTITUENTS_HEADER:
            raise ValueError(f"{path}: expected header {','.join(CONSTITUENTS_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(CONSTITUENTS_HEADER):
                raise ValueError(f"{path}:{lineno}: expected {len(CONSTITUENTS_HEADER)} columns")
            try:
                vals = [float(c) for c in row]
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
            out.append(
                Constituent(
                    amplitude=vals[0],
                    period_s=vals[1],
                    phase_rad=vals[2],
                    phase0_rad=vals[3],
                    velocity_amplitude=vals[4],
                    velocity_phase_rad=vals[5],
                )
            )
    return tuple(out)


def save_constituents_csv(path, constituents):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CONSTITUENTS_HEADER)
        for c in constituents:
            writer.writerow(
                [
                    repr(float(c.amplitude)),
                    repr(float(c.period_s)),
                    repr(float(c.phase_rad)),
                    repr(float(c.phase0_rad)),
                    repr(float(c.velocity_amplitude)),
                    repr(float(c.velocity_phase_rad)),
                ]
            )
