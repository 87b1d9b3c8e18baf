"""Design-of-experiment sampling on bounded uniform parameter spaces.

Latin hypercube designs, centered-L2 discrepancy, simulated-annealing
discrepancy optimization that preserves the LHS property, and an
unscrambled Sobol low-discrepancy alternative.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.stats import qmc

SCHEME_LHS = "lhs"
SCHEME_LHS_OPT = "lhs-optimized"
SCHEME_SOBOL = "sobol-sequence"


@dataclass(frozen=True)
class ParameterSpace:
    """Named uniform-bounded parameters."""

    names: tuple
    bounds: tuple

    def __post_init__(self):
        names = tuple(str(n) for n in self.names)
        bounds = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
        if len(names) < 1 or len(names) != len(bounds):
            raise ValueError("need one (lo, hi) pair per parameter name")
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        for name, (lo, hi) in zip(names, bounds):
            if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
                raise ValueError(f"parameter {name}: bounds must be finite with lo < hi")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "bounds", bounds)

    @property
    def dim(self):
        return len(self.names)

    @property
    def lower(self):
        return np.array([b[0] for b in self.bounds])

    @property
    def upper(self):
        return np.array([b[1] for b in self.bounds])

    def from_unit(self, unit):
        unit = np.asarray(unit, dtype=float)
        return self.lower + unit * (self.upper - self.lower)

    def to_unit(self, values):
        values = np.asarray(values, dtype=float)
        return (values - self.lower) / (self.upper - self.lower)

    def contains(self, values, atol=0.0):
        values = np.atleast_2d(np.asarray(values, dtype=float))
        return bool(
            np.all(values >= self.lower - atol) and np.all(values <= self.upper + atol)
        )


def estuary_space(n_friction_zones=6) -> ParameterSpace:
    """Default nine-parameter space: zoned Strickler coefficients on
    [5, 115], sea-level correction on [-1, 1], range and velocity
    multipliers on [0.8, 1.2]."""
    names = [f"ks{i + 1}" for i in range(n_friction_zones)] + ["gamma", "alpha", "beta"]
    bounds = [(5.0, 115.0)] * n_friction_zones + [(-1.0, 1.0), (0.8, 1.2), (0.8, 1.2)]
    return ParameterSpace(tuple(names), tuple(bounds))


@dataclass(frozen=True)
class Design:
    """A sampled plan: unit-cube matrix plus its physical-space image."""

    unit_matrix: np.ndarray
    scaled_matrix: np.ndarray
    seed: int | None
    scheme: str
    space: ParameterSpace | None = None
    optimizer_seed: int | None = None

    @property
    def n(self):
        return self.unit_matrix.shape[0]

    @property
    def dim(self):
        return self.unit_matrix.shape[1]


def lhs(n, p, seed) -> Design:
    """Latin hypercube design: one point per stratum per column."""
    if n < 2:
        raise ValueError("LHS needs n >= 2")
    if p < 1:
        raise ValueError("LHS needs p >= 1")
    rng = np.random.default_rng(seed)
    unit = np.empty((n, p))
    for j in range(p):
        strata = rng.permutation(n)
        jitter = rng.random(n)
        unit[:, j] = (strata + jitter) / n
    return Design(unit, unit.copy(), seed, SCHEME_LHS)


def is_lhs(unit_matrix) -> bool:
    """True when each column holds exactly one point per stratum."""
    n = unit_matrix.shape[0]
    strata = np.floor(unit_matrix * n).astype(int)
    expected = np.arange(n)
    return all(np.array_equal(np.sort(strata[:, j]), expected) for j in range(unit_matrix.shape[1]))


def _cd_row_factors(x):
    a = np.abs(x - 0.5)
    return 1.0 + 0.5 * a - 0.5 * a * a


def _cd_pair_matrix(x, y):
    """Product over dimensions of the centered-kernel pair terms."""
    ax = np.abs(x - 0.5)
    ay = np.abs(y - 0.5)
    diff = np.abs(x[:, None, :] - y[None, :, :])
    return np.prod(1.0 + 0.5 * (ax[:, None, :] + ay[None, :, :] - diff), axis=2)


def centered_l2_discrepancy(design) -> float:
    """Squared centered-L2 discrepancy of a unit-cube point set."""
    x = design.unit_matrix if isinstance(design, Design) else np.asarray(design, float)
    if x.ndim != 2:
        raise ValueError("expected an (n, p) matrix")
    if np.any(x < 0.0) or np.any(x >= 1.0):
        raise ValueError("unit matrix entries must lie in [0, 1)")
    n, d = x.shape
    row = np.prod(_cd_row_factors(x), axis=1)
    pair_total = 0.0
    block = 256
    for start in range(0, n, block):
        pair_total += float(np.sum(_cd_pair_matrix(x[start : start + block], x)))
    return (13.0 / 12.0) ** d - (2.0 / n) * float(np.sum(row)) + pair_total / n**2


class _DiscrepancyTracker:
    """Incremental centered-L2 bookkeeping for single-column row swaps."""

    def __init__(self, unit):
        self.x = unit.copy()
        n, d = unit.shape
        self.n = n
        self.const = (13.0 / 12.0) ** d
        self.row = np.prod(_cd_row_factors(self.x), axis=1)
        self.pairs = _cd_pair_matrix(self.x, self.x)

    def value(self):
        return (
            self.const
            - (2.0 / self.n) * float(np.sum(self.row))
            + float(np.sum(self.pairs)) / self.n**2
        )

    def swap_delta(self, r1, r2, col):
        """Discrepancy change if rows r1, r2 exchanged their column-col entries."""
        x_new = self.x[[r1, r2]].copy()
        x_new[0, col], x_new[1, col] = self.x[r2, col], self.x[r1, col]
        new_row = np.prod(_cd_row_factors(x_new), axis=1)
        d_row = (new_row[0] - self.row[r1]) + (new_row[1] - self.row[r2])

        others = self.x.copy()
        others[r1] = x_new[0]
        others[r2] = x_new[1]
        new_pair_rows = _cd_pair_matrix(x_new, others)
        old_pair_rows = self.pairs[[r1, r2], :]
        d_pairs = float(np.sum(new_pair_rows) - np.sum(old_pair_rows))
        # Entries in the 2x2 block (r1, r2) x (r1, r2) are double counted
        # when summing both affected rows and (by symmetry) both columns.
        idx = [r1, r2]
        old_block = self.pairs[np.ix_(idx, idx)]
        new_block = new_pair_rows[:, idx]
        d_total = 2.0 * d_pairs - float(np.sum(new_block) - np.sum(old_block))
        return (-2.0 / self.n) * d_row + d_total / self.n**2, (x_new, new_row, new_pair_rows)

    def apply(self, r1, r2, payload):
        x_new, new_row, new_pair_rows = payload
        self.x[r1] = x_new[0]
        self.x[r2] = x_new[1]
        self.row[r1], self.row[r2] = new_row[0], new_row[1]
        self.pairs[r1, :] = new_pair_rows[0]
        self.pairs[r2, :] = new_pair_rows[1]
        self.pairs[:, r1] = new_pair_rows[0]
        self.pairs[:, r2] = new_pair_rows[1]
        # keep the affected 2x2 block consistent after the row/col writes
        self.pairs[r1, r1] = new_pair_rows[0, r1]
        self.pairs[r1, r2] = new_pair_rows[0, r2]
        self.pairs[r2, r1] = new_pair_rows[1, r1]
        self.pairs[r2, r2] = new_pair_rows[1, r2]


def optimize_lhs(design: Design, n_iters, seed) -> Design:
    """Anneal column-wise row swaps to reduce centered-L2 discrepancy.

    Swaps exchange two entries within one column, so the LHS property is
    preserved; the best-seen matrix is returned and its discrepancy never
    exceeds the parent's.
    """
    if design.scheme != SCHEME_LHS:
        raise ValueError("optimize_lhs expects a plain LHS design")
    if n_iters < 0:
        raise ValueError("n_iters must be non-negative")
    if n_iters == 0:
        return design
    rng = np.random.default_rng(seed)
    tracker = _DiscrepancyTracker(design.unit_matrix)
    current = tracker.value()
    best = current
    best_x = tracker.x.copy()
    n, p = design.unit_matrix.shape

    # Initial temperature from the spread of candidate moves.
    deltas = []
    for _ in range(100):
        r1, r2 = rng.choice(n, size=2, replace=False)
        col = int(rng.integers(p))
        delta, _ = tracker.swap_delta(int(r1), int(r2), col)
        deltas.append(delta)
    t0 = float(np.std(deltas))
    if t0 <= 0.0:
        t0 = 1e-12
    cooling = (1e-3) ** (1.0 / max(n_iters, 1))

    temperature = t0
    for it in range(n_iters):
        r1, r2 = rng.choice(n, size=2, replace=False)
        col = int(rng.integers(p))
        delta, payload = tracker.swap_delta(int(r1), int(r2), col)
        if delta < 0.0 or rng.random() < np.exp(-delta / temperature):
            tracker.apply(int(r1), int(r2), payload)
            current += delta
            if current < best:
                best = current
                best_x = tracker.x.copy()
        temperature *= cooling

    # Guard against incremental drift: score the best candidate from scratch.
    best_value = centered_l2_discrepancy(best_x)
    parent_value = centered_l2_discrepancy(design.unit_matrix)
    if best_value > parent_value:
        best_x = design.unit_matrix.copy()
    scaled = (
        design.space.from_unit(best_x) if design.space is not None else best_x.copy()
    )
    return Design(
        best_x,
        scaled,
        design.seed,
        SCHEME_LHS_OPT,
        space=design.space,
        optimizer_seed=seed,
    )


def sobol_sequence(n, p) -> Design:
    """First n points of the unscrambled Sobol sequence, zero point skipped."""
    if n < 1:
        raise ValueError("need n >= 1")
    if p < 1 or p > 21201:
        raise ValueError("dimension outside the direction-number table (1..21201)")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        engine = qmc.Sobol(d=p, scramble=False)
        unit = engine.random(n + 1)[1:]
    return Design(unit, unit.copy(), None, SCHEME_SOBOL)


def scale_design(design: Design, space: ParameterSpace) -> Design:
    """Affine map of the unit matrix onto the physical bounds."""
    if design.dim != space.dim:
        raise ValueError(
            f"design has {design.dim} columns, space has {space.dim} parameters"
        )
    return replace(design, scaled_matrix=space.from_unit(design.unit_matrix), space=space)


def save_design(design: Design, csv_path, meta_path=None, extra_meta=None):
    """Write the scaled matrix as CSV plus a JSON metadata sidecar."""
    csv_path = Path(csv_path)
    names = design.space.names if design.space else tuple(
        f"x{j}" for j in range(design.dim)
    )
    header = ",".join(names)
    np.savetxt(
        csv_path, design.scaled_matrix, delimiter=",", header=header, comments="", fmt="%.17g"
    )
    meta = {
        "scheme": design.scheme,
        "seed": design.seed,
        "optimizer_seed": design.optimizer_seed,
        "n": design.n,
        "p": design.dim,
        "names": list(names),
        "bounds": [list(b) for b in design.space.bounds] if design.space else None,
    }
    if extra_meta:
        meta.update(extra_meta)
    meta_path = Path(meta_path) if meta_path else csv_path.with_suffix(".json")
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")


def load_design(csv_path, meta_path=None) -> Design:
    csv_path = Path(csv_path)
    meta_path = Path(meta_path) if meta_path else csv_path.with_suffix(".json")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    scaled = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
    space = None
    unit = scaled
    if meta.get("bounds"):
        space = ParameterSpace(tuple(meta["names"]), tuple(tuple(b) for b in meta["bounds"]))
        unit = space.to_unit(scaled)
    return Design(
        unit,
        scaled,
        meta.get("seed"),
        meta["scheme"],
        space=space,
        optimizer_seed=meta.get("optimizer_seed"),
    )
