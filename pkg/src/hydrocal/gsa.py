"""Multivariate sensitivity analysis of trajectory outputs.

Per-mode Sobol indices are read off the orthonormal PCE coefficients;
mode indices are aggregated into generalized indices with the PCA
eigenvalues as weights.  Robustness tooling: min-max intervals over
repeated pipeline runs, convergence tables over growing sample sizes,
and a chord-graph JSON export.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .rom import PceModel, RomModel


@dataclass
class ModeSobol:
    """Variance shares of one retained mode; NaN when the mode is flat."""

    first: np.ndarray  # (p,)
    total: np.ndarray  # (p,)
    second: np.ndarray  # (p, p), exact-pair shares, symmetric, zero diagonal
    variance: float


@dataclass
class GeneralizedIndices:
    """Eigenvalue-weighted aggregation of per-mode Sobol indices."""

    first: np.ndarray
    total: np.ndarray
    second: np.ndarray
    weights: np.ndarray  # eigenvalues actually used (zero-variance modes dropped)
    names: tuple | None = None


def pce_sobol(pce: PceModel) -> ModeSobol:
    """Sobol indices of a PCE: coefficient energies grouped by support."""
    p = pce.dim
    alphas = pce.multi_indices
    coefs = pce.coefficients
    nonconst = np.any(alphas > 0, axis=1)
    variance = float(np.sum(coefs[nonconst] ** 2))
    if variance <= 0.0:
        nanv = np.full(p, np.nan)
        return ModeSobol(nanv, nanv.copy(), np.full((p, p), np.nan), 0.0)
    energy = coefs**2 / variance
    first = np.zeros(p)
    total = np.zeros(p)
    second = np.zeros((p, p))
    support_size = np.sum(alphas > 0, axis=1)
    for i in range(p):
        active_i = alphas[:, i] > 0
        total[i] = float(np.sum(energy[active_i]))
        first[i] = float(np.sum(energy[active_i & (support_size == 1)]))
        for j in range(i + 1, p):
            pair = active_i & (alphas[:, j] > 0) & (support_size == 2)
            share = float(np.sum(energy[pair]))
            second[i, j] = share
            second[j, i] = share
    return ModeSobol(first, total, second, variance)


def generalized_indices(mode_indices, eigenvalues, names=None) -> GeneralizedIndices:
    """Aggregate per-mode indices with their eigenvalue weights.

    Zero-variance modes carry no usable indices; they are dropped and the
    remaining weights renormalized.
    """
    if len(mode_indices) == 0:
        raise ValueError("no modes to aggregate")
    eigenvalues = np.asarray(eigenvalues, dtype=float)
    if eigenvalues.size != len(mode_indices):
        raise ValueError("one eigenvalue per mode required")
    keep = [k for k, m in enumerate(mode_indices) if m.variance > 0.0]
    if not keep:
        raise ValueError("all modes have zero variance")
    weights = eigenvalues[keep]
    total_weight = float(np.sum(weights))
    if total_weight <= 0.0:
        raise ValueError("eigenvalue weights sum to zero")
    if len(keep) == 1:  # scalar-output case: classical indices, exactly
        mode = mode_indices[keep[0]]
        return GeneralizedIndices(
            mode.first.copy(), mode.total.copy(), mode.second.copy(), weights, names
        )
    first = sum(w * mode_indices[k].first for k, w in zip(keep, weights)) / total_weight
    total = sum(w * mode_indices[k].total for k, w in zip(keep, weights)) / total_weight
    second = (
        sum(w * mode_indices[k].second for k, w in zip(keep, weights)) / total_weight
    )
    return GeneralizedIndices(first, total, second, weights, names)


def rom_generalized_indices(rom: RomModel) -> GeneralizedIndices:
    """Generalized indices of a fitted reduced-order model."""
    modes = [pce_sobol(pce) for pce in rom.pces]
    return generalized_indices(modes, rom.eigenvalues, names=rom.space.names)


@dataclass
class ConfidenceResult:
    """Min-max envelopes of generalized indices over repeated runs."""

    first_min: np.ndarray
    first_max: np.ndarray
    total_min: np.ndarray
    total_max: np.ndarray
    estimates: list
    seeds: tuple
    failures: list = field(default_factory=list)

    @property
    def partial(self):
        return bool(self.failures)


def gsi_confidence(run_once, seeds) -> ConfidenceResult:
    """Repeat a full pipeline (seed -> GeneralizedIndices) and reduce.

    `run_once` may raise; failures are collected per seed and the result
    flagged partial.  At least two successful repetitions are required.
    """
    seeds = tuple(int(s) for s in seeds)
    if len(seeds) < 2:
        raise ValueError("need at least two repetitions")
    estimates = []
    failures = []
    for seed in seeds:
        try:
            estimates.append((seed, run_once(seed)))
        except Exception as exc:  # noqa: BLE001 - reported with the seed
            failures.append((seed, f"{type(exc).__name__}: {exc}"))
    if len(estimates) < 2:
        raise RuntimeError(
            f"too few successful repetitions ({len(estimates)}); failures: {failures}"
        )
    firsts = np.array([g.first for _, g in estimates])
    totals = np.array([g.total for _, g in estimates])
    return ConfidenceResult(
        first_min=firsts.min(axis=0),
        first_max=firsts.max(axis=0),
        total_min=totals.min(axis=0),
        total_max=totals.max(axis=0),
        estimates=estimates,
        seeds=seeds,
        failures=failures,
    )


@dataclass
class ConvergenceRow:
    n: int
    seed: int
    gsi: GeneralizedIndices
    stabilized: bool  # max |change| vs previous row below the tolerance


def convergence_study(run_gsi, sample_sizes, base_seed, stab_tol=0.01):
    """Generalized indices for increasing sample sizes.

    `run_gsi(n, seed)` evaluates one pipeline; designs are independent per
    size (seed = base_seed + cell index, recorded per row).  A row is
    flagged stabilized when both index vectors moved less than stab_tol
    against the previous size.
    """
    sizes = [int(n) for n in sample_sizes]
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError("sample sizes must be strictly increasing")
    rows = []
    previous = None
    for cell, n in enumerate(sizes):
        seed = int(base_seed) + cell
        gsi = run_gsi(n, seed)
        stabilized = False
        if previous is not None:
            move = max(
                float(np.max(np.abs(gsi.first - previous.first))),
                float(np.max(np.abs(gsi.total - previous.total))),
            )
            stabilized = move < stab_tol
        rows.append(ConvergenceRow(n=n, seed=seed, gsi=gsi, stabilized=stabilized))
        previous = gsi
    return rows


def chord_graph_export(gsi: GeneralizedIndices, names=None) -> dict:
    """Chord-graph document: inner circle = first order, outer = total,
    ribbons = symmetric second-order pair shares."""
    names = tuple(names) if names else gsi.names
    p = gsi.first.size
    if names is None:
        names = tuple(f"x{i + 1}" for i in range(p))
    ribbons = []
    for i in range(p):
        for j in range(i + 1, p):
            ribbons.append([names[i], names[j], float(gsi.second[i, j])])
    return {
        "schema": "hydrocal-chord-v1",
        "normalization": "variance-fraction",
        "parameters": list(names),
        "inner": [float(v) for v in gsi.first],
        "outer": [float(v) for v in gsi.total],
        "ribbons": ribbons,
    }


def chord_graph_loads(text: str) -> dict:
    doc = json.loads(text)
    if doc.get("schema") != "hydrocal-chord-v1":
        raise ValueError("not a chord-graph document")
    return doc


def gsi_table_rows(gsi: GeneralizedIndices, confidence: ConfidenceResult | None = None):
    """Rows (parameter, first, total[, min/max columns]) for the CSV table."""
    names = gsi.names or tuple(f"x{i + 1}" for i in range(gsi.first.size))
    rows = []
    for i, name in enumerate(names):
        row = {
            "parameter": name,
            "first_order": float(gsi.first[i]),
            "total_order": float(gsi.total[i]),
        }
        if confidence is not None:
            row.update(
                first_min=float(confidence.first_min[i]),
                first_max=float(confidence.first_max[i]),
                total_min=float(confidence.total_min[i]),
                total_max=float(confidence.total_max[i]),
            )
        rows.append(row)
    return rows
