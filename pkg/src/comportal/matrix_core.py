"""Validated compartmental matrices and their flow parametrization.

A compartmental matrix has nonnegative off-diagonal entries and nonpositive
column sums; column i's sum deficit is the outflow coefficient of compartment
i, and entry (j, i) is the flow coefficient from compartment i to j. Reports
and JSON use 1-based indices; arrays in the API are 0-based.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

DEFAULT_TOL = 1e-12


class CompartmentalViolation(ValueError):
    """Raised when a matrix fails compartmental validation; carries the report."""

    def __init__(self, report: "ValidationReport"):
        super().__init__(report.summary())
        self.report = report


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    n: int
    tol: float
    violations: tuple  # dicts: {"kind", "i", "j"|None, "value"} with 1-based indices

    def summary(self) -> str:
        if self.ok:
            return f"compartmental ({self.n}x{self.n}, tol={self.tol:g})"
        parts = []
        for v in self.violations[:6]:
            if v["kind"] == "offdiag":
                parts.append(f"entry ({v['i']},{v['j']}) = {v['value']:g} < 0")
            elif v["kind"] == "colsum":
                parts.append(f"column {v['i']} sum = {v['value']:g} > 0")
            else:
                parts.append(f"non-finite entry at ({v['i']},{v['j']})")
        more = len(self.violations) - 6
        if more > 0:
            parts.append(f"... {more} more")
        return "not compartmental: " + "; ".join(parts)

    def to_json(self) -> dict:
        return {"schema": "comportal.validation/1", "ok": self.ok, "n": self.n,
                "tol": self.tol, "violations": list(self.violations)}


@dataclass(frozen=True, eq=False)
class CompartmentalMatrix:
    """Immutable validated matrix plus cached column sums."""

    entries: np.ndarray
    colsums: np.ndarray

    def __post_init__(self):
        self.entries.setflags(write=False)
        self.colsums.setflags(write=False)

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    def to_json(self) -> dict:
        return {"n": self.n, "entries": self.entries.tolist()}

    def __repr__(self):
        return f"CompartmentalMatrix(n={self.n})"


def as_square_array(m, dtype=float) -> np.ndarray:
    arr = np.array(m, dtype=dtype)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1] or arr.shape[0] < 1:
        raise ValueError(f"expected a square matrix, got shape {arr.shape}")
    return arr


def check_compartmental(m, tol: float = DEFAULT_TOL) -> ValidationReport:
    """Non-raising validation; lists every violating entry and column (1-based)."""
    arr = as_square_array(m)
    n = arr.shape[0]
    violations = []
    bad = ~np.isfinite(arr)
    for i, j in zip(*np.nonzero(bad)):
        violations.append({"kind": "nonfinite", "i": int(i) + 1, "j": int(j) + 1,
                           "value": None})
    if violations:
        return ValidationReport(False, n, tol, tuple(violations))
    off = arr.copy()
    np.fill_diagonal(off, 0.0)
    for i, j in zip(*np.nonzero(off < -tol)):
        violations.append({"kind": "offdiag", "i": int(i) + 1, "j": int(j) + 1,
                           "value": float(arr[i, j])})
    colsums = arr.sum(axis=0)
    for i in np.nonzero(colsums > tol)[0]:
        violations.append({"kind": "colsum", "i": int(i) + 1, "j": None,
                           "value": float(colsums[i])})
    return ValidationReport(not violations, n, tol, tuple(violations))


def validate_compartmental(m, tol: float = DEFAULT_TOL) -> CompartmentalMatrix:
    """Validate and clamp sub-tolerance rounding noise; raise with a report otherwise.

    Off-diagonal entries in [-tol, 0) are clamped to 0; a column sum in
    (0, tol] is absorbed into the diagonal so the stored sums are <= 0 exactly.
    """
    report = check_compartmental(m, tol)
    if not report.ok:
        raise CompartmentalViolation(report)
    arr = as_square_array(m)
    off_mask = ~np.eye(arr.shape[0], dtype=bool)
    arr[off_mask & (arr < 0.0)] = 0.0
    colsums = arr.sum(axis=0)
    excess = np.maximum(colsums, 0.0)
    if np.any(excess > 0.0):
        arr[np.diag_indices_from(arr)] -= excess
        colsums = arr.sum(axis=0)
    colsums = np.minimum(colsums, 0.0)
    return CompartmentalMatrix(arr, colsums)


@dataclass(frozen=True, eq=False)
class FlowParams:
    """Outflow coefficients f0[i] and pairwise coefficients f[j, i] (j != i)."""

    f0: np.ndarray  # (n,), nonnegative
    f: np.ndarray   # (n, n), zero diagonal, nonnegative off-diagonal

    @property
    def n(self) -> int:
        return self.f0.shape[0]


def to_flow_params(F: CompartmentalMatrix) -> FlowParams:
    f = F.entries.copy()
    np.fill_diagonal(f, 0.0)
    return FlowParams(f0=-F.colsums.copy(), f=f)


def from_flow_params(params: FlowParams) -> CompartmentalMatrix:
    """Rebuild the matrix; inverse of `to_flow_params` (exact round-trip)."""
    f = params.f
    diag = -params.f0 - f.sum(axis=0)
    arr = f.copy()
    arr[np.diag_indices_from(arr)] = diag
    return validate_compartmental(arr, tol=0.0)


def conjugate_by_permutation(F: CompartmentalMatrix, r: Sequence[int]) -> CompartmentalMatrix:
    """Relabel compartments: result[i, j] = F[r[i], r[j]] for a 0-based permutation r."""
    r = np.asarray(r, dtype=int)
    n = F.n
    if r.shape != (n,) or sorted(r.tolist()) != list(range(n)):
        raise ValueError(f"r must be a permutation of 0..{n - 1}, got {r.tolist()}")
    return validate_compartmental(F.entries[np.ix_(r, r)], tol=0.0)


def permutation_matrix(r: Sequence[int]) -> np.ndarray:
    """P with P[i, r[i]] = 1, so that (P F P^-1)[i, j] = F[r[i], r[j]]."""
    r = np.asarray(r, dtype=int)
    P = np.zeros((len(r), len(r)))
    P[np.arange(len(r)), r] = 1.0
    return P


def matrix_from_json(data) -> np.ndarray:
    """Accept a dict, JSON text, or path-like; returns the raw entries array."""
    if isinstance(data, (str, bytes)) and "{" not in str(data):
        with open(data) as fh:
            data = json.load(fh)
    elif isinstance(data, (str, bytes)):
        data = json.loads(data)
    arr = as_square_array(data["entries"])
    if "n" in data and int(data["n"]) != arr.shape[0]:
        raise ValueError(f"declared n={data['n']} but entries are {arr.shape[0]}x{arr.shape[1]}")
    return arr
