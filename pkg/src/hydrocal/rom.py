"""Reduced-order trajectory model: PCA of a snapshot ensemble plus one
sparse polynomial-chaos expansion per retained mode.

PCA is the SVD of the column-centered snapshot matrix; modes are selected
by explained variance.  Each mode's score is regressed on the inputs with
a tensorized orthonormal Legendre basis: least-angle regression orders the
candidate terms and the active set minimizing the corrected leave-one-out
error is kept.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .doe import Design, ParameterSpace


@dataclass
class SnapshotMatrix:
    """Trajectory ensemble: rows are design samples, columns time records."""

    values: np.ndarray
    gauge: str = "gauge0"
    times: np.ndarray | None = None
    design_meta: dict | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise ValueError("snapshot matrix must be 2D (samples x records)")
        if np.any(np.isnan(values)):
            raise ValueError("snapshot matrix contains NaN")
        self.values = values
        if self.times is not None:
            self.times = np.asarray(self.times, dtype=float)
            if self.times.size != values.shape[1]:
                raise ValueError("one time stamp per record required")


@dataclass
class PcaBasis:
    """Eigen-decomposition of the ensemble covariance, ordered by variance."""

    column_means: np.ndarray
    eigenvalues: np.ndarray  # descending, lambda_i = s_i^2 / n
    modes: np.ndarray  # (r, T), orthonormal rows
    scores: np.ndarray  # (n, r), scores[:, i] = Oc @ modes[i]


def center_columns(values):
    """Remove per-column means; returns (centered, means)."""
    values = np.asarray(values, dtype=float)
    if values.shape[0] < 2:
        raise ValueError("need at least two rows to center")
    if np.any(np.isnan(values)):
        raise ValueError("input contains NaN")
    means = values.mean(axis=0)
    return values - means, means


def pca(centered, rank_tol=1e-12) -> PcaBasis:
    """SVD-based eigenpairs of (1/n) Oc' Oc for a column-centered matrix."""
    centered = np.asarray(centered, dtype=float)
    n = centered.shape[0]
    u, s, vt = np.linalg.svd(centered, full_matrices=False)
    if s.size and s[0] > 0:
        s = np.where(s < rank_tol * s[0], 0.0, s)
    eigenvalues = s**2 / n
    scores = u * s
    return PcaBasis(
        column_means=np.zeros(centered.shape[1]),
        eigenvalues=eigenvalues,
        modes=vt,
        scores=scores,
    )


def fit_pca_basis(values) -> PcaBasis:
    """Center columns, then run pca(); keeps the removed means."""
    centered, means = center_columns(values)
    basis = pca(centered)
    basis.column_means = means
    return basis


def truncate_basis(basis: PcaBasis, threshold=0.9995) -> int:
    """Smallest k whose leading eigenvalues explain >= threshold of variance."""
    total = float(np.sum(basis.eigenvalues))
    if total <= 0.0:
        raise ValueError("all-zero spectrum: nothing to truncate")
    fractions = np.cumsum(basis.eigenvalues) / total
    k = int(np.searchsorted(fractions, threshold - 1e-12) + 1)
    return min(k, basis.eigenvalues.size)


# -- polynomial chaos ----------------------------------------------------


def total_degree_multi_indices(p, max_degree):
    """All exponent tuples of length p with total degree <= max_degree,
    ordered by total degree then lexicographically."""
    groups = []
    for degree in range(max_degree + 1):
        level = []

        def rec(prefix, left, dims):
            if dims == 0:
                if left == 0:
                    level.append(tuple(prefix))
                return
            for d in range(left + 1):
                rec(prefix + [d], left - d, dims - 1)

        rec([], degree, p)
        groups.extend(sorted(level))
    return np.array(groups, dtype=int)


def _legendre_table(xi, max_degree):
    """Orthonormal Legendre values L_hat_d(xi), d=0..max_degree.

    Orthonormal w.r.t. the uniform measure on [-1, 1]: L_hat_d = sqrt(2d+1) P_d.
    """
    n = xi.shape[0]
    table = np.empty((max_degree + 1, n))
    table[0] = 1.0
    if max_degree >= 1:
        table[1] = xi
    for d in range(1, max_degree):
        table[d + 1] = ((2 * d + 1) * xi * table[d] - d * table[d - 1]) / (d + 1)
    norms = np.sqrt(2.0 * np.arange(max_degree + 1) + 1.0)
    return table * norms[:, None]


def pce_design_matrix(unit_points, multi_indices):
    """Evaluate the tensorized orthonormal Legendre basis on unit-cube points."""
    u = np.atleast_2d(np.asarray(unit_points, dtype=float))
    if np.any(u < -1e-12) or np.any(u > 1.0 + 1e-12):
        raise ValueError("points must lie in the unit hypercube")
    xi = 2.0 * u - 1.0
    p = u.shape[1]
    max_degree = int(multi_indices.max()) if multi_indices.size else 0
    tables = [_legendre_table(xi[:, j], max_degree) for j in range(p)]
    psi = np.ones((u.shape[0], multi_indices.shape[0]))
    for col, alpha in enumerate(multi_indices):
        for j, d in enumerate(alpha):
            if d > 0:
                psi[:, col] *= tables[j][d]
    return psi


@dataclass
class PceModel:
    """Sparse polynomial-chaos expansion of one scalar response."""

    multi_indices: np.ndarray  # (m, p) exponents of the retained terms
    coefficients: np.ndarray  # (m,)
    loo_error: float
    max_degree: int
    diagnostics: dict = field(default_factory=dict)

    @property
    def dim(self):
        return self.multi_indices.shape[1]

    def predict(self, unit_points):
        psi = pce_design_matrix(unit_points, self.multi_indices)
        return psi @ self.coefficients

    def variance(self):
        """Output variance implied by the orthonormal basis coefficients."""
        nonconst = np.any(self.multi_indices > 0, axis=1)
        return float(np.sum(self.coefficients[nonconst] ** 2))


class _IncrementalOls:
    """QR-updated least squares with leverages and corrected LOO error.

    Maintains Q (n x s) with orthonormal columns and the inverse of the
    triangular factor, so adding one regressor costs O(n s).
    """

    def __init__(self, y):
        self.y = y
        self.n = y.shape[0]
        self.q = np.empty((self.n, 0))
        self.r_inv = np.empty((0, 0))
        norm = float(np.dot(y, y))
        mean = float(np.mean(y))
        self.y_var = norm / self.n - mean * mean

    @property
    def size(self):
        return self.q.shape[1]

    def try_add(self, column, tol=1e-10):
        """Orthogonalize a column against the active set; False if degenerate."""
        v = column.astype(float, copy=True)
        norm0 = np.linalg.norm(v)
        for _ in range(2):  # re-orthogonalize once for stability
            if self.size:
                v -= self.q @ (self.q.T @ v)
        norm = np.linalg.norm(v)
        if norm <= tol * max(norm0, 1.0):
            return False
        r_col = self.q.T @ column if self.size else np.empty(0)
        q_new = v / norm
        s = self.size
        r_inv_new = np.zeros((s + 1, s + 1))
        r_inv_new[:s, :s] = self.r_inv
        if s:
            r_inv_new[:s, s] = -self.r_inv @ r_col / norm
        r_inv_new[s, s] = 1.0 / norm
        self.q = np.column_stack([self.q, q_new])
        self.r_inv = r_inv_new
        return True

    def solve(self):
        """OLS fit on the active set: (coefficients, corrected LOO error)."""
        qty = self.q.T @ self.y
        beta = self.r_inv @ qty
        fitted = self.q @ qty
        resid = self.y - fitted
        leverage = np.einsum("ij,ij->i", self.q, self.q)
        leverage = np.minimum(leverage, 1.0 - 1e-12)
        loo = float(np.mean((resid / (1.0 - leverage)) ** 2))
        s = self.size
        if s >= self.n:
            return beta, np.inf
        trace_cinv = self.n * float(np.sum(self.r_inv**2))
        correction = (1.0 + trace_cinv / self.n) / (1.0 - s / self.n)
        err = loo * correction
        if self.y_var > 0:
            err /= self.y_var
        return beta, err


def _lars_order(x, y, max_steps):
    """Order in which least-angle regression activates the columns of x.

    Columns are assumed centered and unit-normalized.  Returns the entry
    order and the list of candidates skipped as degenerate.
    """
    n, m = x.shape
    c = x.T @ y
    inactive = np.ones(m, dtype=bool)
    order = []
    skipped = []
    q = np.empty((n, 0))
    r_inv = np.empty((0, 0))
    c_scale = float(np.max(np.abs(c))) if m else 0.0
    if c_scale == 0.0:
        return order, skipped

    for _ in range(max_steps):
        if not np.any(inactive):
            break
        c_abs = np.where(inactive, np.abs(c), -np.inf)
        j = int(np.argmax(c_abs))
        big_c = c_abs[j]
        if big_c < 1e-12 * c_scale:
            break
        # Orthogonalize the new column; a degenerate one is skipped outright.
        v = x[:, j].copy()
        for _ in range(2):
            if q.shape[1]:
                v -= q @ (q.T @ v)
        norm = np.linalg.norm(v)
        if norm <= 1e-10:
            inactive[j] = False
            skipped.append(j)
            continue
        r_col = q.T @ x[:, j] if q.shape[1] else np.empty(0)
        s_old = q.shape[1]
        r_inv_new = np.zeros((s_old + 1, s_old + 1))
        r_inv_new[:s_old, :s_old] = r_inv
        if s_old:
            r_inv_new[:s_old, s_old] = -r_inv @ r_col / norm
        r_inv_new[s_old, s_old] = 1.0 / norm
        q = np.column_stack([q, v / norm])
        r_inv = r_inv_new
        inactive[j] = False
        order.append(j)

        active = np.asarray(order)
        signs = np.sign(c[active])
        signs[signs == 0.0] = 1.0
        # Equiangular direction: u = X_A w with (X_A' X_A) w = signs.
        g_inv_s = r_inv @ (r_inv.T @ signs)
        denom = float(signs @ g_inv_s)
        if denom <= 0.0:
            break
        a_a = 1.0 / np.sqrt(denom)
        w = a_a * g_inv_s
        u = x[:, active] @ w
        a = x.T @ u

        if np.all(~inactive):
            gamma = big_c / a_a
        else:
            candidates = []
            for idx in np.nonzero(inactive)[0]:
                for num, den in (
                    (big_c - c[idx], a_a - a[idx]),
                    (big_c + c[idx], a_a + a[idx]),
                ):
                    if den > 1e-14:
                        val = num / den
                        if val > 1e-14:
                            candidates.append(val)
            gamma = min(candidates) if candidates else big_c / a_a
            gamma = min(gamma, big_c / a_a)
        c = c - gamma * a
    return order, skipped


def fit_pce_lars(
    unit_design,
    scores_column,
    max_degree=5,
    *,
    max_terms=None,
    patience=None,
) -> PceModel:
    """Sparse PCE fit: LARS orders the candidates, corrected LOO picks the cut.

    `unit_design` holds unit-hypercube samples (mapped internally onto
    [-1, 1]); the candidate set is the total-degree Legendre basis.  After
    each LARS activation an OLS fit on the active terms is scored by the
    corrected leave-one-out error; the best-scoring active set is returned
    (the constant-only model is always a candidate).
    """
    u = np.atleast_2d(np.asarray(unit_design, dtype=float))
    y = np.asarray(scores_column, dtype=float)
    n, p = u.shape
    if y.shape != (n,):
        raise ValueError("one response value per design row required")
    if n < 3:
        raise ValueError("need at least 3 samples")

    multi_indices = total_degree_multi_indices(p, max_degree)
    psi = pce_design_matrix(u, multi_indices)

    # LARS runs on centered, normalized candidates; the constant is implicit.
    candidates = psi[:, 1:]
    cand_means = candidates.mean(axis=0)
    centered = candidates - cand_means
    norms = np.linalg.norm(centered, axis=0)
    ok = norms > 1e-12 * np.sqrt(n)
    centered = centered[:, ok] / np.where(ok, norms, 1.0)[ok]
    cand_ids = np.nonzero(ok)[0] + 1  # column ids in psi
    yc = y - y.mean()

    cap = min(centered.shape[1], n - 2)
    if max_terms is not None:
        cap = min(cap, max_terms)
    order, lars_skipped = _lars_order(centered, yc, cap)

    ols = _IncrementalOls(y)
    if not ols.try_add(psi[:, 0]):
        raise ValueError("constant column degenerate; inputs unusable")
    beta, err = ols.solve()
    best = {
        "ids": [0],
        "beta": beta.copy(),
        "err": err,
        "step": 0,
    }
    path_errors = [err]
    active_ids = [0]
    degenerate = [int(cand_ids[j]) for j in lars_skipped]
    since_best = 0
    for step, j in enumerate(order, start=1):
        col_id = int(cand_ids[j])
        if not ols.try_add(psi[:, col_id]):
            degenerate.append(col_id)
            continue
        active_ids.append(col_id)
        beta, err = ols.solve()
        path_errors.append(err)
        if err < best["err"]:
            best = {
                "ids": list(active_ids),
                "beta": beta.copy(),
                "err": err,
                "step": step,
            }
            since_best = 0
        else:
            since_best += 1
            if patience is not None and since_best >= patience:
                break

    ids = np.asarray(best["ids"], dtype=int)
    return PceModel(
        multi_indices=multi_indices[ids],
        coefficients=np.asarray(best["beta"], dtype=float),
        loo_error=float(best["err"]),
        max_degree=max_degree,
        diagnostics={
            "path_loo": path_errors,
            "skipped_candidates": degenerate,
            "n_candidates": int(multi_indices.shape[0]),
            "selected_step": best["step"],
        },
    )


# -- assembled reduced-order model ----------------------------------------


@dataclass
class RomModel:
    """Truncated PCA basis with one PCE per retained mode."""

    space: ParameterSpace
    column_means: np.ndarray
    eigenvalues: np.ndarray  # retained modes only
    modes: np.ndarray  # (k, T)
    pces: list
    explained_variance: float
    variance_threshold: float
    gauge: str = "gauge0"
    times: np.ndarray | None = None

    @property
    def n_modes(self):
        return self.eigenvalues.size


def build_rom(
    design: Design,
    snapshots: SnapshotMatrix,
    space: ParameterSpace | None = None,
    *,
    variance_threshold=0.9995,
    max_degree=5,
    max_terms=None,
    patience=None,
) -> RomModel:
    """Fit the PCA + per-mode sparse PCE surrogate from an evaluated design."""
    space = space or design.space
    if space is None:
        raise ValueError("a parameter space is required to build the surrogate")
    if snapshots.values.shape[0] != design.n:
        raise ValueError("snapshot rows must match design size")
    basis = fit_pca_basis(snapshots.values)
    k = truncate_basis(basis, variance_threshold)
    unit = space.to_unit(design.scaled_matrix)
    pces = [
        fit_pce_lars(
            unit,
            basis.scores[:, mode],
            max_degree,
            max_terms=max_terms,
            patience=patience,
        )
        for mode in range(k)
    ]
    total = float(np.sum(basis.eigenvalues))
    return RomModel(
        space=space,
        column_means=basis.column_means,
        eigenvalues=basis.eigenvalues[:k].copy(),
        modes=basis.modes[:k].copy(),
        pces=pces,
        explained_variance=float(np.sum(basis.eigenvalues[:k]) / total),
        variance_threshold=variance_threshold,
        gauge=snapshots.gauge,
        times=None if snapshots.times is None else snapshots.times.copy(),
    )


def rom_predict(rom: RomModel, x):
    """Trajectories predicted at physical-space points; no extrapolation."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != rom.space.dim:
        raise ValueError("wrong parameter dimension")
    if not rom.space.contains(x, atol=1e-12):
        raise ValueError("point outside the parameter bounds")
    if not rom.pces:  # degenerate surrogate: the ensemble mean
        return np.tile(rom.column_means, (x.shape[0], 1))
    unit = rom.space.to_unit(x)
    scores = np.column_stack([pce.predict(unit) for pce in rom.pces])
    return rom.column_means + scores @ rom.modes


def q2(rom: RomModel, x_val, y_val):
    """Predictivity coefficient per record over a validation ensemble.

    Q2(t) = 1 - sum_j (emulator - model)^2 / sum_j (model - mean)^2; records
    with zero model variance are reported as NaN.
    """
    y_val = np.asarray(y_val, dtype=float)
    if y_val.ndim != 2 or y_val.shape[0] < 2:
        raise ValueError("need at least two validation trajectories")
    pred = rom_predict(rom, x_val)
    if pred.shape != y_val.shape:
        raise ValueError("validation matrix shape mismatch")
    num = np.sum((pred - y_val) ** 2, axis=0)
    dev = y_val - y_val.mean(axis=0)
    den = np.sum(dev**2, axis=0)
    out = np.full(y_val.shape[1], np.nan)
    # a record is undefined when its ensemble variance is zero up to roundoff
    scale = np.maximum(np.max(np.abs(y_val), axis=0), 1.0)
    good = den > y_val.shape[0] * (1e-14 * scale) ** 2
    out[good] = 1.0 - num[good] / den[good]
    return out


# -- persistence -----------------------------------------------------------


def rom_to_json(rom: RomModel) -> dict:
    return {
        "schema": "hydrocal-rom-v1",
        "gauge": rom.gauge,
        "space": {
            "names": list(rom.space.names),
            "bounds": [list(b) for b in rom.space.bounds],
        },
        "column_means": rom.column_means.tolist(),
        "eigenvalues": rom.eigenvalues.tolist(),
        "modes": rom.modes.tolist(),
        "explained_variance": rom.explained_variance,
        "variance_threshold": rom.variance_threshold,
        "times": None if rom.times is None else rom.times.tolist(),
        "pces": [
            {
                "multi_indices": pce.multi_indices.tolist(),
                "coefficients": pce.coefficients.tolist(),
                "loo_error": pce.loo_error,
                "max_degree": pce.max_degree,
            }
            for pce in rom.pces
        ],
    }


def rom_from_json(doc: dict) -> RomModel:
    if doc.get("schema") != "hydrocal-rom-v1":
        raise ValueError("not a rom document")
    space = ParameterSpace(
        tuple(doc["space"]["names"]),
        tuple(tuple(b) for b in doc["space"]["bounds"]),
    )
    pces = [
        PceModel(
            multi_indices=np.asarray(p["multi_indices"], dtype=int).reshape(
                len(p["coefficients"]), space.dim
            ),
            coefficients=np.asarray(p["coefficients"], dtype=float),
            loo_error=float(p["loo_error"]),
            max_degree=int(p["max_degree"]),
        )
        for p in doc["pces"]
    ]
    return RomModel(
        space=space,
        column_means=np.asarray(doc["column_means"], dtype=float),
        eigenvalues=np.asarray(doc["eigenvalues"], dtype=float),
        modes=np.asarray(doc["modes"], dtype=float),
        pces=pces,
        explained_variance=float(doc["explained_variance"]),
        variance_threshold=float(doc["variance_threshold"]),
        gauge=doc.get("gauge", "gauge0"),
        times=None if doc.get("times") is None else np.asarray(doc["times"], float),
    )


def save_rom(rom: RomModel, path):
    Path(path).write_text(
        json.dumps(rom_to_json(rom), indent=2, sort_keys=True), encoding="utf-8"
    )


def load_rom(path) -> RomModel:
    return rom_from_json(json.loads(Path(path).read_text(encoding="utf-8")))
