import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hydrocal import swe
from hydrocal.api import ApiCode, ApiError, Phase, REGISTRY, SimApi, parse_case_file

DT = 0.5
NSTEPS = 24


@pytest.fixture(scope="module")
def case_dir(tmp_path_factory):
    base = tmp_path_factory.mktemp("case")
    n = 12
    geom = swe.ChannelGeometry(
        2.5 + 5.0 * np.arange(n),
        np.linspace(0.5, 0.0, n),
        np.array([0] * 6 + [1] * 6),
    )
    swe.save_geometry_csv(base / "geom.csv", geom)
    swe.save_constituents_csv(
        base / "cons.csv",
        (swe.Constituent(amplitude=0.2, period_s=600.0, velocity_amplitude=0.1),),
    )
    (base / "run.cas").write_text(
        "\n".join(
            [
                "# tiny test case",
                "GEOMETRY_FILE = geom.csv",
                "CONSTITUENTS_FILE = cons.csv",
                f"DT = {DT}",
                f"NTIMESTEPS = {NSTEPS}",
                "RECORD_INTERVAL = 1.0",
                "SPINUP_S = 0.0",
                "GAUGES = 20;40",
                "ZREF = 2.0",
                "CFL = 0.9",
            ]
        )
        + "\n",
        encoding="utf-8",
    )
    return base


@pytest.fixture()
def case_path(case_dir):
    return str(case_dir / "run.cas")


def ready_instance(api, case_path):
    handle = api.create_instance()
    api.read_case(handle, case_path)
    api.allocate_and_init(handle)
    return handle


# -- lifecycle ----------------------------------------------------------------


def test_handles_are_monotone_and_fresh(case_path):
    api = SimApi()
    assert api.create_instance() == 1
    assert api.create_instance() == 2
    api.finalize(1)
    assert api.create_instance() == 3
    assert api.live_instances() == (2, 3)


def test_happy_path_phases(case_path):
    api = SimApi()
    handle = api.create_instance()
    assert api.phase(handle) == Phase.CREATED
    api.read_case(handle, case_path)
    assert api.phase(handle) == Phase.CASE_READ
    api.allocate_and_init(handle)
    assert api.phase(handle) == Phase.INITIALIZED
    api.run_timestep(handle)
    assert api.phase(handle) == Phase.RUNNING
    api.finalize(handle)
    assert api.phase(handle) == Phase.FINALIZED


def test_finalize_mid_run_and_any_order(case_path):
    api = SimApi()
    handles = [ready_instance(api, case_path) for _ in range(3)]
    api.run_timestep(handles[1])
    for handle in (handles[1], handles[0], handles[2]):
        api.finalize(handle)
    assert api.live_instances() == ()


def test_stale_handle_errors(case_path):
    api = SimApi()
    handle = ready_instance(api, case_path)
    api.finalize(handle)
    with pytest.raises(ApiError) as err:
        api.finalize(handle)
    assert err.value.code == ApiCode.STALE_HANDLE
    with pytest.raises(ApiError) as err:
        api.get_value(handle, "MODEL.AT")
    assert err.value.code == ApiCode.STALE_HANDLE
    with pytest.raises(ApiError) as err:
        api.get_value(999, "MODEL.AT")
    assert err.value.code == ApiCode.UNKNOWN_INSTANCE


def test_instance_isolation_matches_sequential(case_path):
    def run(ks_value, steps):
        api = SimApi()
        handle = ready_instance(api, case_path)
        for i in range(1, 13):
            api.set_value(handle, "MODEL.CHESTR", ks_value, i=i)
        out = []
        for _ in range(steps):
            api.run_timestep(handle)
            out.append(api.get_value(handle, "MODEL.Z", i=5))
        return out

    seq_a = run(20.0, 10)
    seq_b = run(80.0, 10)

    api = SimApi()
    ha = ready_instance(api, case_path)
    hb = ready_instance(api, case_path)
    for i in range(1, 13):
        api.set_value(ha, "MODEL.CHESTR", 20.0, i=i)
        api.set_value(hb, "MODEL.CHESTR", 80.0, i=i)
    inter_a, inter_b = [], []
    for _ in range(10):
        api.run_timestep(ha)
        api.run_timestep(hb)
        inter_a.append(api.get_value(ha, "MODEL.Z", i=5))
        inter_b.append(api.get_value(hb, "MODEL.Z", i=5))
    assert inter_a == seq_a  # bitwise: floats compared exactly
    assert inter_b == seq_b


# -- case file parsing ---------------------------------------------------------


def test_case_defaults_applied(case_dir):
    cfg = parse_case_file(case_dir / "run.cas")
    assert cfg.sealevel == 0.0  # optional SEALEVEL defaults to 0
    assert cfg.tidalrange == 1.0
    assert cfg.upstream_discharge == 0.0


@pytest.mark.parametrize(
    "lines,code",
    [
        (["DT = 5", "NTIMESTEPS = 10", "NOSUCHKEY = 1"], ApiCode.UNKNOWN_KEY),
        (["DT = 5", "DT = 6", "NTIMESTEPS = 10"], ApiCode.REPEATED_KEY),
        (["DT = 5", "NTIMESTEPS = abc"], ApiCode.TYPE_MISMATCH),
        (["DT 5", "NTIMESTEPS = 10"], ApiCode.SYNTAX),
        (["DT = 5"], ApiCode.MISSING_KEY),
    ],
)
def test_case_parse_error_codes(case_dir, tmp_path, lines, code):
    body = ["GEOMETRY_FILE = geom.csv", "CONSTITUENTS_FILE = cons.csv"]
    path = tmp_path / "case.cas"
    path.write_text("\n".join(body + lines) + "\n", encoding="utf-8")
    with pytest.raises(ApiError) as err:
        parse_case_file(path)
    assert err.value.code == code


def test_missing_case_file_code(tmp_path):
    api = SimApi()
    handle = api.create_instance()
    with pytest.raises(ApiError) as err:
        api.read_case(handle, tmp_path / "nope.cas")
    assert err.value.code == ApiCode.MISSING_FILE
    assert api.phase(handle) == Phase.CREATED  # no state change


def test_bad_case_type_leaves_phase(case_dir, tmp_path):
    path = tmp_path / "bad.cas"
    path.write_text(
        f"GEOMETRY_FILE = {case_dir}/geom.csv\n"
        f"CONSTITUENTS_FILE = {case_dir}/cons.csv\n"
        "DT = 5\nNTIMESTEPS = abc\n",
        encoding="utf-8",
    )
    api = SimApi()
    handle = api.create_instance()
    with pytest.raises(ApiError) as err:
        api.read_case(handle, path)
    assert err.value.code == ApiCode.TYPE_MISMATCH
    assert api.phase(handle) == Phase.CREATED


def test_zone_gap_is_inconsistency(case_dir, tmp_path):
    geom_path = tmp_path / "gappy.csv"
    geom_path.write_text(
        "x,zb,zone\n" + "".join(f"{2.5 + 5 * i},0.0,{0 if i < 6 else 2}\n" for i in range(12)),
        encoding="utf-8",
    )
    case = tmp_path / "case.cas"
    case.write_text(
        f"GEOMETRY_FILE = gappy.csv\nCONSTITUENTS_FILE = {case_dir}/cons.csv\n"
        "DT = 5\nNTIMESTEPS = 10\nZREF = 2.0\n",
        encoding="utf-8",
    )
    api = SimApi()
    handle = api.create_instance()
    api.read_case(handle, case)
    with pytest.raises(ApiError) as err:
        api.allocate_and_init(handle)
    assert err.value.code == ApiCode.CASE_INCONSISTENT
    assert api.phase(handle) == Phase.CASE_READ


def test_allocate_twice_is_phase_error(case_path):
    api = SimApi()
    handle = ready_instance(api, case_path)
    with pytest.raises(ApiError) as err:
        api.allocate_and_init(handle)
    assert err.value.code == ApiCode.PHASE_ORDER


# -- keyword registry -----------------------------------------------------------


def test_npoin_after_init(case_path):
    api = SimApi()
    handle = ready_instance(api, case_path)
    assert api.get_value(handle, "MODEL.NPOIN") == 12


def test_round_trip_exact(case_path):
    api = SimApi()
    handle = ready_instance(api, case_path)
    api.set_value(handle, "MODEL.SEALEVEL", 0.8611)
    assert api.get_value(handle, "MODEL.SEALEVEL") == 0.8611
    for i, value in ((1, 33.25), (7, 91.5)):
        api.set_value(handle, "MODEL.CHESTR", value, i=i)
        assert api.get_value(handle, "MODEL.CHESTR", i=i) == value


def test_unknown_keyword(case_path):
    api = SimApi()
    handle = ready_instance(api, case_path)
    with pytest.raises(ApiError) as err:
        api.get_value(handle, "MODEL.WATERDEPH")
    assert err.value.code == ApiCode.UNKNOWN_KEYWORD


def test_read_only_and_kind_and_index_errors(case_path):
    api = SimApi()
    handle = ready_instance(api, case_path)
    with pytest.raises(ApiError) as err:
        api.set_value(handle, "MODEL.Z", 1.0, i=1)
    assert err.value.code == ApiCode.READ_ONLY
    with pytest.raises(ApiError) as err:
        api.set_value(handle, "MODEL.NTIMESTEPS", 1.5)
    assert err.value.code == ApiCode.WRONG_KIND
    with pytest.raises(ApiError) as err:
        api.set_value(handle, "MODEL.SEALEVEL", True)
    assert err.value.code == ApiCode.WRONG_KIND
    with pytest.raises(ApiError) as err:
        api.get_value(handle, "MODEL.Z", i=13)
    assert err.value.code == ApiCode.INDEX_RANGE
    with pytest.raises(ApiError) as err:
        api.get_value(handle, "MODEL.Z")  # indexed keyword needs i
    assert err.value.code == ApiCode.INDEX_RANGE
    with pytest.raises(ApiError) as err:
        api.get_value(handle, "MODEL.AT", i=1)  # scalar takes no index
    assert err.value.code == ApiCode.INDEX_RANGE
    with pytest.raises(ApiError) as err:
        api.get_value(handle, "MODEL.Z", i=1, j=2)
    assert err.value.code == ApiCode.INDEX_RANGE


def test_phase_constraint_on_arrays(case_path):
    api = SimApi()
    handle = api.create_instance()
    api.read_case(handle, case_path)
    assert api.get_value(handle, "MODEL.NTIMESTEPS") == NSTEPS
    with pytest.raises(ApiError) as err:
        api.get_value(handle, "MODEL.WATERDEPTH", i=1)
    assert err.value.code == ApiCode.PHASE_ORDER


def test_step_counters(case_path):
    api = SimApi()
    handle = ready_instance(api, case_path)
    for k in range(1, 6):
        api.run_timestep(handle)
        assert api.get_value(handle, "MODEL.LT") == k
        at = api.get_value(handle, "MODEL.AT")
        assert at == pytest.approx(k * DT, abs=k * math.ulp(k * DT))
    for _ in range(NSTEPS - 5):
        api.run_timestep(handle)
    with pytest.raises(ApiError) as err:
        api.run_timestep(handle)
    assert err.value.code == ApiCode.STEP_LIMIT


def test_api_loop_matches_run_gauges(case_dir, case_path):
    api = SimApi()
    handle = ready_instance(api, case_path)
    cfg = parse_case_file(case_path)
    geom = swe.load_geometry_csv(cfg.geometry_file)
    stencils = swe.gauge_weights(geom, cfg.gauges)
    rec_every = int(round(cfg.record_interval / cfg.dt))
    out = [[] for _ in cfg.gauges]
    for k in range(1, NSTEPS + 1):
        api.run_timestep(handle)
        if k % rec_every == 0:
            for g, (i, w) in enumerate(stencils):
                z0 = api.get_value(handle, "MODEL.Z", i=i + 1)
                z1 = api.get_value(handle, "MODEL.Z", i=i + 2)
                out[g].append((1.0 - w) * z0 + w * z1)
    api.finalize(handle)

    constituents = swe.load_constituents_csv(cfg.constituents_file)
    forcing = swe.TidalForcing(constituents, z_ref=cfg.zref)
    record = swe.run_gauges(
        geom,
        np.full(geom.n_cells, 60.0),
        forcing,
        swe.GaugeSet(cfg.gauges, cfg.record_interval),
        dt=cfg.dt,
        horizon_s=NSTEPS * cfg.dt,
        spinup_s=0.0,
        cfl_number=cfg.cfl,
    )
    assert np.array_equal(np.asarray(out), record.values)


# -- phase machine property suite ------------------------------------------------

OPS = ("read_case", "allocate_and_init", "run_timestep", "get_array", "set_param", "finalize")


def snapshot(api, handle):
    """Observable state, guarded so it never mutates anything."""
    try:
        phase = api.phase(handle)
    except ApiError:
        return ("gone",)
    state = [phase]
    if phase in (Phase.CASE_READ, Phase.INITIALIZED, Phase.RUNNING):
        state.append(api.get_value(handle, "MODEL.SEALEVEL"))
        state.append(api.get_value(handle, "MODEL.NTIMESTEPS"))
    if phase in (Phase.INITIALIZED, Phase.RUNNING):
        state.append(api.get_value(handle, "MODEL.LT"))
        state.append(api.get_value(handle, "MODEL.AT"))
        state.append(
            tuple(api.get_value(handle, "MODEL.WATERDEPTH", i=i) for i in (1, 6, 12))
        )
    return tuple(state)


@settings(max_examples=60, deadline=None)
@given(ops=st.lists(st.sampled_from(OPS), min_size=1, max_size=12))
def test_phase_machine_rejects_out_of_order_without_mutation(case_path_global, ops):
    api = SimApi()
    handle = api.create_instance()
    finalized = False
    for op in ops:
        phase = Phase.FINALIZED if finalized else api.phase(handle)
        before = snapshot(api, handle)
        legal = {
            "read_case": phase == Phase.CREATED,
            "allocate_and_init": phase == Phase.CASE_READ,
            "run_timestep": phase in (Phase.INITIALIZED, Phase.RUNNING),
            "get_array": phase in (Phase.INITIALIZED, Phase.RUNNING),
            "set_param": phase
            in (Phase.CASE_READ, Phase.INITIALIZED, Phase.RUNNING),
            "finalize": phase != Phase.FINALIZED,
        }[op]
        try:
            if op == "read_case":
                api.read_case(handle, case_path_global)
            elif op == "allocate_and_init":
                api.allocate_and_init(handle)
            elif op == "run_timestep":
                api.run_timestep(handle)
            elif op == "get_array":
                api.get_value(handle, "MODEL.WATERDEPTH", i=3)
            elif op == "set_param":
                api.set_value(handle, "MODEL.SEALEVEL", 0.25)
            elif op == "finalize":
                api.finalize(handle)
                finalized = True
        except ApiError as err:
            assert not legal, f"{op} unexpectedly failed in phase {phase}: {err}"
            assert err.code != 0
            assert snapshot(api, handle) == before
        else:
            assert legal, f"{op} unexpectedly succeeded in phase {phase}"


@pytest.fixture(scope="session")
def case_path_global(tmp_path_factory):
    base = tmp_path_factory.mktemp("case_global")
    n = 12
    geom = swe.ChannelGeometry(
        2.5 + 5.0 * np.arange(n), np.linspace(0.5, 0.0, n), np.zeros(n, dtype=int)
    )
    swe.save_geometry_csv(base / "geom.csv", geom)
    swe.save_constituents_csv(
        base / "cons.csv", (swe.Constituent(amplitude=0.2, period_s=600.0),)
    )
    (base / "run.cas").write_text(
        "GEOMETRY_FILE = geom.csv\nCONSTITUENTS_FILE = cons.csv\n"
        f"DT = {DT}\nNTIMESTEPS = {NSTEPS}\nZREF = 2.0\n",
        encoding="utf-8",
    )
    return str(base / "run.cas")


def test_registry_is_resolvable(case_path):
    api = SimApi()
    handle = ready_instance(api, case_path)
    api.run_timestep(handle)
    for keyword, desc in REGISTRY.items():
        value = api.get_value(handle, keyword, i=1 if desc.indexed else 0)
        assert isinstance(value, (int, float))
        if desc.kind == "integer":
            assert isinstance(value, int)
