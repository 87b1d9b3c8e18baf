"""Synthetic twin channel: a desk-scale tidal estuary with known truth.

Writes the geometry, constituents, steering and study files for a
nine-parameter channel (six friction zones, sea-level correction, tidal
range and velocity multipliers).  Two upstream zones sit on a dry berm
and are provably inert; the mouth-adjacent zone carries the whole tidal
signal and dominates the friction response.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import swe

M2_PERIOD_S = 44712.0  # 12.42 h
S2_PERIOD_S = 43200.0


def twin_geometry(variant="full") -> swe.ChannelGeometry:
    """Channel with the sea at the right end and a dry berm upstream.

    Zone 0 hugs the open boundary; the last zones sit on a +10 m berm the
    tide can never reach, so their friction provably cannot touch the
    output.
    """
    if variant == "full":
        n, dx = 40, 800.0
        # (upstream edge distance from the mouth, bed at seaward edge, bed
        # at upstream edge) per zone, zones ordered from the mouth inland.
        reaches = [
            (9600.0, 0.0, 1.2),
            (15600.0, 1.2, 2.4),
            (21600.0, 2.4, 3.3),
            (26400.0, 3.3, 4.5),
            (29600.0, 10.0, 10.0),
            (np.inf, 10.0, 10.0),
        ]
    elif variant == "small":
        n, dx = 24, 800.0
        reaches = [
            (6400.0, 0.0, 0.0),
            (12000.0, 0.0, 1.5),
            (16000.0, 1.5, 4.0),
            (np.inf, 10.0, 10.0),
        ]
    else:
        raise ValueError(f"unknown variant {variant!r}")
    x = dx / 2.0 + dx * np.arange(n)
    sea = n * dx  # open boundary at the right edge

    zb = np.empty(n)
    zone = np.empty(n, dtype=int)
    for i, xi in enumerate(x):
        d = sea - xi  # distance from the mouth
        start = 0.0
        for z, (end, z_start, z_end) in enumerate(reaches):
            if d <= end:
                span = end - start
                frac = 0.0 if not np.isfinite(span) else (d - start) / span
                zb[i] = z_start + frac * (z_end - z_start)
                zone[i] = z
                break
            start = end
    return swe.ChannelGeometry(x, zb, zone)


def twin_constituents():
    return (
        swe.Constituent(
            amplitude=1.7,
            period_s=M2_PERIOD_S,
            velocity_amplitude=1.1,
        ),
        swe.Constituent(
            amplitude=0.45,
            period_s=S2_PERIOD_S,
            phase_rad=0.7,
            velocity_amplitude=0.28,
            velocity_phase_rad=0.7,
        ),
    )


_FULL_CASE = """\
# Twin tidal channel, 36 h run with a 12 h spin-up
GEOMETRY_FILE = channel.csv
CONSTITUENTS_FILE = tides.csv
DT = 30.0
NTIMESTEPS = 4320
RECORD_INTERVAL = 600.0
SPINUP_S = 43200.0
GAUGES = 29200;19600;16400;10400
ZREF = 4.5
SEALEVEL = 0.0
TIDALRANGE = 1.0
VELOCITYRANGE = 1.0
UPSTREAM_DISCHARGE = 0.0
CFL = 0.9
"""

_SMALL_CASE = """\
# Reduced twin channel for quick runs
GEOMETRY_FILE = channel.csv
CONSTITUENTS_FILE = tides.csv
DT = 40.0
NTIMESTEPS = 1620
RECORD_INTERVAL = 1800.0
SPINUP_S = 21600.0
GAUGES = 17000;12000
ZREF = 4.0
SEALEVEL = 0.0
TIDALRANGE = 1.0
VELOCITYRANGE = 1.0
UPSTREAM_DISCHARGE = 0.0
CFL = 0.9
"""

_FULL_STUDY = """\
schema_version = 1
case = "channel.cas"

[[parameters]]
name = "ks1"
keyword = "MODEL.CHESTR"
zone = 0
bounds = [5.0, 115.0]

[[parameters]]
name = "ks2"
keyword = "MODEL.CHESTR"
zone = 1
bounds = [5.0, 115.0]

[[parameters]]
name = "ks3"
keyword = "MODEL.CHESTR"
zone = 2
bounds = [5.0, 115.0]

[[parameters]]
name = "ks4"
keyword = "MODEL.CHESTR"
zone = 3
bounds = [5.0, 115.0]

[[parameters]]
name = "ks5"
keyword = "MODEL.CHESTR"
zone = 4
bounds = [5.0, 115.0]

[[parameters]]
name = "ks6"
keyword = "MODEL.CHESTR"
zone = 5
bounds = [5.0, 115.0]

[[parameters]]
name = "gamma"
keyword = "MODEL.SEALEVEL"
bounds = [-1.0, 1.0]

[[parameters]]
name = "alpha"
keyword = "MODEL.TIDALRANGE"
bounds = [0.8, 1.2]

[[parameters]]
name = "beta"
keyword = "MODEL.VELOCITYRANGE"
bounds = [0.8, 1.2]

[doe]
n = 256
scheme = "lhs-optimized"
seed = 20150812
optimizer_iters = 2000

[rom]
variance_threshold = 0.9995
max_degree = 4
n_validation = 100
patience = 40

[gsa]
repetitions = 10
sample_sizes = [64, 128, 256]

[calibration]
parameters = ["ks1", "ks2", "ks3", "alpha", "gamma"]
x0 = [73.76, 83.62, 83.62, 0.9729, 0.8611]
obs_interval_s = 60.0
obs_horizon_s = 129600.0
fd_increment = 1e-4
fd_scheme = "forward"
max_iter = 100
grad_tol = 1e-5

[twin]
x_true = [42.0, 32.0, 26.0, 25.0, 60.0, 90.0, -0.25, 1.08, 1.1]
noise_std = 0.05
"""

_SMALL_STUDY = """\
schema_version = 1
case = "channel.cas"

[[parameters]]
name = "ks1"
keyword = "MODEL.CHESTR"
zone = 0
bounds = [5.0, 115.0]

[[parameters]]
name = "ks2"
keyword = "MODEL.CHESTR"
zone = 1
bounds = [5.0, 115.0]

[[parameters]]
name = "gamma"
keyword = "MODEL.SEALEVEL"
bounds = [-1.0, 1.0]

[[parameters]]
name = "alpha"
keyword = "MODEL.TIDALRANGE"
bounds = [0.8, 1.2]

[doe]
n = 24
scheme = "lhs"
seed = 7
optimizer_iters = 0

[rom]
variance_threshold = 0.9995
max_degree = 2
n_validation = 8
patience = 20

[gsa]
repetitions = 3
sample_sizes = [12, 24]

[calibration]
parameters = ["ks1", "gamma"]
x0 = [73.76, 0.8611]
obs_interval_s = 600.0
obs_horizon_s = 43200.0
fd_increment = 1e-4
fd_scheme = "forward"
max_iter = 60
grad_tol = 1e-5

[twin]
x_true = [42.0, 80.0, -0.25, 1.08]
noise_std = 0.05
"""


def write_twin_case(directory, variant="full") -> Path:
    """Create channel.csv, tides.csv, channel.cas and study.toml; returns
    the study file path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    geometry = twin_geometry(variant)
    swe.save_geometry_csv(directory / "channel.csv", geometry)
    swe.save_constituents_csv(directory / "tides.csv", twin_constituents())
    (directory / "channel.cas").write_text(
        _FULL_CASE if variant == "full" else _SMALL_CASE, encoding="utf-8"
    )
    study = directory / "study.toml"
    study.write_text(
        _FULL_STUDY if variant == "full" else _SMALL_STUDY, encoding="utf-8"
    )
    return study
