import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hydrocal import swe
from oracles import stoker_dam_break

G = 9.81


def flat_channel(n=50, dx=1.0, zones=1):
    x = dx / 2.0 + dx * np.arange(n)
    zone = np.minimum(np.arange(n) * zones // n, zones - 1)
    return swe.ChannelGeometry(x, np.zeros(n), zone)


# -- point formulas ----------------------------------------------------------


def test_strickler_cf_collapses_to_one():
    assert swe.strickler_cf(1.0, math.sqrt(2.0 * G)) == pytest.approx(1.0, abs=1e-12)


def test_strickler_cf_values():
    assert swe.strickler_cf(2.0, 30.0) == pytest.approx(0.017302671466453375, rel=1e-12)
    assert swe.strickler_cf(1.0, 1.0) == pytest.approx(19.62, rel=1e-12)


@pytest.mark.parametrize("h,ks", [(0.0, 10.0), (-1.0, 10.0), (1.0, 0.0), (1.0, -3.0)])
def test_strickler_cf_domain_errors(h, ks):
    with pytest.raises(ValueError):
        swe.strickler_cf(h, ks)


def test_friction_source_values():
    assert swe.friction_source(1.0, 0.0, 30.0) == 0.0
    assert swe.friction_source(1.0, 1.0, 1.0) == pytest.approx(-9.81, rel=1e-12)
    assert swe.friction_source(1e-9, 5.0, 30.0) == 0.0  # dry cell contract


@given(
    h=st.floats(0.01, 50.0),
    u=st.one_of(st.just(0.0), st.floats(1e-6, 10.0), st.floats(-10.0, -1e-6)),
    ks=st.floats(5.0, 115.0),
)
def test_friction_opposes_flow(h, u, ks):
    f = swe.friction_source(h, u, ks)
    if u == 0.0:
        assert f == 0.0
    else:
        assert np.sign(f) == -np.sign(u)


@given(
    h=st.floats(0.01, 50.0),
    u=st.floats(0.01, 10.0),
    ks=st.floats(5.0, 114.0),
    bump=st.floats(0.01, 1.0),
)
def test_friction_decreases_with_ks_and_depth(h, u, ks, bump):
    base = abs(swe.friction_source(h, u, ks))
    assert abs(swe.friction_source(h, u, ks + bump)) < base
    assert abs(swe.friction_source(h + bump, u, ks)) < base


def test_tidal_boundary_hand_values():
    forcing = swe.TidalForcing(
        (swe.Constituent(amplitude=1.0, period_s=3600.0),), z_ref=0.0
    )
    h, u = swe.tidal_boundary(forcing, 0.0, -10.0)
    assert h == pytest.approx(11.0, abs=1e-12)
    assert u == 0.0

    shifted = swe.TidalForcing(forcing.constituents, gamma=0.5)
    h2, _ = swe.tidal_boundary(shifted, 0.0, -10.0)
    assert h2 == pytest.approx(10.5, abs=1e-12)


def test_tidal_boundary_gamma_slope_is_minus_one():
    constituents = (
        swe.Constituent(amplitude=1.2, period_s=44712.0, phase_rad=0.3),
        swe.Constituent(amplitude=0.3, period_s=43200.0, phase_rad=1.1),
    )
    for gamma in (-0.8, -0.1, 0.4, 1.0):
        a = swe.tidal_boundary(
            swe.TidalForcing(constituents, gamma=gamma, z_ref=5.0), 1234.0, 0.0
        )[0]
        b = swe.tidal_boundary(
            swe.TidalForcing(constituents, gamma=0.0, z_ref=5.0), 1234.0, 0.0
        )[0]
        assert a - b == pytest.approx(-gamma, abs=1e-12)


def test_tidal_boundary_beta_linearity():
    constituents = (
        swe.Constituent(amplitude=1.0, period_s=44712.0, velocity_amplitude=0.9),
    )
    t = 5231.0
    u1 = swe.tidal_boundary(swe.TidalForcing(constituents, beta=1.0, z_ref=5.0), t, 0.0)[1]
    u2 = swe.tidal_boundary(swe.TidalForcing(constituents, beta=2.0, z_ref=5.0), t, 0.0)[1]
    assert u2 == pytest.approx(2.0 * u1, rel=1e-12)


def test_tidal_boundary_drying_event():
    forcing = swe.TidalForcing((swe.Constituent(amplitude=1.0, period_s=3600.0),))
    with pytest.raises(swe.BoundaryDryingError):
        swe.tidal_boundary(forcing, 0.0, 5.0)


# -- step invariants ----------------------------------------------------------


def test_lake_at_rest_is_fixed_point():
    n = 50
    x = np.linspace(25.0, 2475.0, n)
    zb = 0.4 * np.sin(x / 300.0) + np.where(x > 2000.0, 2.5, 0.0)  # dry plateau
    geom = swe.ChannelGeometry(x, zb, np.zeros(n, dtype=int))
    fric = swe.FrictionParams(np.array([40.0]))
    state = swe.still_state(geom, 1.0)
    for _ in range(1000):
        state = swe.step(state, geom, fric, None, 2.0)
    surface = state.h + zb
    wet = state.h > swe.DRY_THRESHOLD
    assert np.max(np.abs(surface[wet] - 1.0)) < 1e-12
    assert np.max(np.abs(state.u)) < 1e-12


def test_closed_basin_mass_conservation():
    geom = flat_channel(n=200)
    h0 = np.where(geom.cell_centers < 100.0, 1.0, 0.1)
    state = swe.FlowState(h0.copy(), np.zeros(200), 0.0)
    fric = swe.FrictionParams(np.array([40.0]))
    mass0 = state.h.sum() * geom.dx
    for _ in range(1000):
        state = swe.step(state, geom, fric, None, 0.02)
    assert abs(state.h.sum() * geom.dx - mass0) / mass0 < 1e-10


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_positivity_under_cfl_steps(seed):
    rng = np.random.default_rng(seed)
    n = 40
    x = 1.0 * np.arange(n) + 0.5
    zb = rng.uniform(0.0, 0.5, n)
    geom = swe.ChannelGeometry(x, zb, np.zeros(n, dtype=int))
    h = np.maximum(rng.uniform(-0.2, 1.0, n), 0.0)  # includes dry cells
    u = np.where(h > swe.DRY_THRESHOLD, rng.uniform(-1.0, 1.0, n), 0.0)
    state = swe.FlowState(h, u, 0.0)
    fric = swe.FrictionParams(np.array([30.0]))
    for _ in range(50):
        lam = swe.max_wave_speed(state)
        dt = 0.9 * geom.dx / lam if lam > 0 else 0.1
        state = swe.step(state, geom, fric, None, dt)
        assert np.all(state.h >= 0.0)


def test_cfl_violation_raises():
    geom = flat_channel()
    state = swe.FlowState(np.full(50, 2.0), np.zeros(50), 0.0)
    with pytest.raises(swe.CflError):
        swe.step(state, geom, swe.FrictionParams(np.array([40.0])), None, 5.0)


def test_nan_state_raises_blowup_with_cell():
    geom = flat_channel()
    h = np.full(50, 2.0)
    h[7] = np.nan
    state = swe.FlowState(h, np.zeros(50), 0.0)
    with pytest.raises(swe.BlowupError):
        swe.step(state, geom, swe.FrictionParams(np.array([40.0])), None, 0.05)


def test_dam_break_converges_to_stoker():
    errors = {}
    for n in (100, 200, 400):
        dx = 10.0 / n
        x = dx / 2.0 + dx * np.arange(n)
        geom = swe.ChannelGeometry(x, np.zeros(n), np.zeros(n, dtype=int))
        state = swe.FlowState(np.where(x < 5.0, 1.0, 0.1), np.zeros(n), 0.0)
        fric = swe.FrictionParams(np.array([1e9]))  # frictionless limit
        dt = 0.45 * dx / (2.0 * math.sqrt(G))
        steps = math.ceil(0.5 / dt)
        dt = 0.5 / steps
        for _ in range(steps):
            state = swe.step(state, geom, fric, None, dt)
        h_exact, _ = stoker_dam_break(x, 0.5, 5.0, 1.0, 0.1)
        errors[n] = float(np.sum(np.abs(state.h - h_exact)) * dx)
    assert errors[200] < errors[100]
    assert errors[400] < errors[200]
    # halving dx roughly halves the error for this first-order scheme
    assert 0.4 < errors[400] / errors[200] < 0.6


def test_upstream_discharge_reaches_steady_mass_flux():
    n = 60
    geom = flat_channel(n=n, dx=10.0)
    forcing = swe.TidalForcing((), z_ref=2.0)  # constant downstream level
    fric = swe.FrictionParams(np.array([40.0]))
    state = swe.still_state(geom, 2.0)
    q = 0.8
    for _ in range(30000):
        state = swe.step(state, geom, fric, forcing, 0.5, discharge=q)
    flux = state.h * state.u
    assert np.allclose(flux[5:-5], q, atol=0.01)


# -- gauge runs ---------------------------------------------------------------


def periodic_setup():
    n = 50
    x = np.linspace(100.0, 9900.0, n)
    zb = np.linspace(1.5, 0.0, n)
    geom = swe.ChannelGeometry(x, zb, np.zeros(n, dtype=int))
    fric = swe.FrictionParams(np.array([20.0]))
    forcing = swe.TidalForcing(
        (swe.Constituent(amplitude=1.0, period_s=44712.0),), z_ref=3.0
    )
    gauges = swe.GaugeSet((5000.0,), record_interval_s=1863.0)
    return geom, fric, forcing, gauges


def test_gauge_series_periodic_after_spinup():
    geom, fric, forcing, gauges = periodic_setup()
    rec = swe.run_gauges(
        geom, fric, forcing, gauges, dt=23.0, horizon_s=2 * 44712.0, spinup_s=2 * 44712.0
    )
    series = rec.values[0]
    per = 24  # records per tidal period
    assert np.max(np.abs(series[per:] - series[:-per])) < 1e-3


def test_run_gauges_deterministic():
    geom, fric, forcing, gauges = periodic_setup()
    kwargs = dict(dt=23.0, horizon_s=44712.0, spinup_s=0.0)
    a = swe.run_gauges(geom, fric, forcing, gauges, **kwargs)
    b = swe.run_gauges(geom, fric, forcing, gauges, **kwargs)
    assert np.array_equal(a.values, b.values)
    assert np.array_equal(a.times, b.times)


def test_run_gauges_steady_lake_constant():
    geom = flat_channel(n=40, dx=5.0)
    fric = swe.FrictionParams(np.array([40.0]))
    forcing = swe.TidalForcing((), z_ref=1.5)  # constant level, still start
    gauges = swe.GaugeSet((37.0, 121.0), record_interval_s=10.0)
    rec = swe.run_gauges(geom, fric, forcing, gauges, dt=0.5, horizon_s=100.0, spinup_s=0.0)
    assert np.allclose(rec.values, 1.5, atol=1e-12)


def test_run_gauges_rejects_misaligned_intervals():
    geom, fric, forcing, gauges = periodic_setup()
    with pytest.raises(ValueError):
        swe.run_gauges(geom, fric, forcing, gauges, dt=22.0, horizon_s=44712.0, spinup_s=0.0)


def test_gauge_weights_outside_domain():
    geom = flat_channel(n=10)
    with pytest.raises(ValueError):
        swe.gauge_weights(geom, (12.5,))


# -- file formats -------------------------------------------------------------


def test_geometry_csv_round_trip(tmp_path):
    geom = swe.ChannelGeometry(
        np.array([0.5, 1.5, 2.5, 3.5]),
        np.array([0.1, -0.2, 0.3, 0.0]),
        np.array([0, 0, 1, 1]),
    )
    path = tmp_path / "geom.csv"
    swe.save_geometry_csv(path, geom)
    back = swe.load_geometry_csv(path)
    assert np.array_equal(back.cell_centers, geom.cell_centers)
    assert np.array_equal(back.bed_elevation, geom.bed_elevation)
    assert np.array_equal(back.zone_id, geom.zone_id)


def test_geometry_csv_header_checked(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b,c\n1,2,3\n", encoding="utf-8")
    with pytest.raises(ValueError):
        swe.load_geometry_csv(path)


def test_constituents_csv_round_trip(tmp_path):
    cons = (
        swe.Constituent(1.5, 44712.0, 0.2, 0.1, velocity_amplitude=1.0, velocity_phase_rad=0.4),
        swe.Constituent(0.4, 43200.0, 0.7, 0.0, velocity_amplitude=0.25, velocity_phase_rad=0.7),
    )
    path = tmp_path / "cons.csv"
    swe.save_constituents_csv(path, cons)
    back = swe.load_constituents_csv(path)
    assert back == cons


def test_geometry_validation():
    with pytest.raises(ValueError):
        swe.ChannelGeometry(np.array([0.0, 1.0]), np.zeros(2), np.zeros(2, dtype=int))
    with pytest.raises(ValueError):  # non-uniform spacing
        swe.ChannelGeometry(
            np.array([0.0, 1.0, 3.0]), np.zeros(3), np.zeros(3, dtype=int)
        )
    with pytest.raises(ValueError):  # zone 1 missing
        swe.ChannelGeometry(
            np.array([0.0, 1.0, 2.0]), np.zeros(3), np.array([0, 0, 2])
        )
