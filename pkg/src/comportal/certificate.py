"""Linear Lyapunov certificates with explicit exponential decay rates.

A certificate is a positive weight vector v and a rate lambda with
v^T F <= -lambda v^T. For a single outflow-connected matrix the weights come
from a linear solve against the all-ones covector (`linear_inverse_certificate`).
For a whole family of canonical-form matrices, bounded above the diagonal by b
and with below-diagonal column mass at least a_i (tail column sums at most
-a_l), one fixed certificate covers every member (`family_certificate`): the
weights are suffix sums of a recursion that compensates the above-diagonal
coupling, and the rate is the worst bound margin divided by the total weight.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .canonical_form import canonicalize
from .matrix_core import CompartmentalMatrix, validate_compartmental


@dataclass(frozen=True)
class FamilyParams:
    """Canonical-form family: n-by-n compartmental matrices with above-diagonal
    entries <= b, below-diagonal column sums >= a_i (columns 1..l-1), and column
    sums <= -a_l (columns l..n). l=1 denotes the all-columns-negative case."""

    n: int
    l: int
    a: tuple
    b: float

    def __post_init__(self):
        if not 1 <= self.l <= self.n:
            raise ValueError(f"l must be in 1..{self.n}, got {self.l}")
        if len(self.a) != self.l:
            raise ValueError(f"a must have length l={self.l}, got {len(self.a)}")
        if any(ai <= 0 for ai in self.a):
            raise ValueError("all a_i must be positive")
        if self.b < 0:
            raise ValueError("b must be nonnegative")

    def to_json(self) -> dict:
        return {"n": self.n, "l": self.l, "a": list(self.a), "b": self.b}

    @staticmethod
    def from_json(data: dict) -> "FamilyParams":
        return FamilyParams(int(data["n"]), int(data["l"]),
                            tuple(float(x) for x in data["a"]), float(data["b"]))


@dataclass(frozen=True, eq=False)
class LyapunovCertificate:
    v: np.ndarray
    lam: float
    source: str  # family | linear_inverse | user
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.v, dtype=float)
        object.__setattr__(self, "v", v)
        if np.any(v <= 0) or self.lam <= 0:
            raise ValueError("certificate needs v >> 0 and lambda > 0")

    @property
    def gamma(self) -> float:
        return float(self.v.max() / self.v.min())

    def to_json(self) -> dict:
        return {"v": self.v.tolist(), "lambda": self.lam, "gamma": self.gamma,
                "source": self.source}


@dataclass(frozen=True)
class MembershipReport:
    is_member: bool
    worst_margin: float
    violations: tuple  # dicts {"bound", "i", "j"|None, "margin"}, 1-based
    binding: tuple     # same shape, the tightest satisfied constraints

    def __bool__(self):
        return self.is_member


@dataclass(frozen=True, eq=False)
class VerificationResult:
    ok: bool
    worst_margin: float
    margins: np.ndarray  # per column: -lam*v_k - (v^T F)_k

    def __bool__(self):
        return self.ok


def family_membership(F: CompartmentalMatrix, fam: FamilyParams,
                      tol: float = 1e-12) -> MembershipReport:
    """Check the three bound families; margins are slack (negative = violated)."""
    if F.n != fam.n:
        raise ValueError(f"dimension mismatch: matrix {F.n}, family {fam.n}")
    entries = F.entries
    n, l = fam.n, fam.l
    records = []
    for i in range(n - 1):
        for j in range(i + 1, n):
            records.append({"bound": "above_diagonal", "i": i + 1, "j": j + 1,
                            "margin": float(fam.b - entries[i, j])})
    for i in range(l - 1):
        below = entries[i + 1:, i].sum()
        records.append({"bound": "below_column_mass", "i": i + 1, "j": None,
                        "margin": float(below - fam.a[i])})
    for i in range(l - 1, n):
        records.append({"bound": "tail_column_sum", "i": i + 1, "j": None,
                        "margin": float(-fam.a[l - 1] - F.colsums[i])})
    violations = tuple(r for r in records if r["margin"] < -tol)
    worst = min(r["margin"] for r in records)
    binding = tuple(sorted((r for r in records if r["margin"] >= -tol),
                           key=lambda r: r["margin"])[:3])
    return MembershipReport(not violations, worst, violations, binding)


def family_certificate(fam: FamilyParams, sigma: Sequence[float] | None = None) -> LyapunovCertificate:
    """One certificate for every member of the family.

    sigma (positive, length l) trades rate against overshoot; default all-ones.
    The weights are nonincreasing with v_1 >= ... >= v_l = ... = v_n.
    """
    l = fam.l
    if sigma is None:
        sigma = np.ones(l)
    sigma = np.asarray(sigma, dtype=float)
    if sigma.shape != (l,) or np.any(sigma <= 0):
        raise ValueError(f"sigma must be positive with length {l}")
    a = np.asarray(fam.a, dtype=float)
    p = np.empty(l)
    p[0] = sigma[0]
    weighted = 0.0  # running sum of (1-based index) * p
    for i in range(1, l):
        weighted += i * p[i - 1]
        p[i] = sigma[i] + (fam.b / a[i]) * weighted
    v = np.empty(fam.n)
    suffix = np.cumsum(p[::-1])[::-1]  # suffix[i] = p[i] + ... + p[l-1]
    v[:l] = suffix
    v[l:] = p[l - 1]
    lam = float(np.min(a * sigma) / p.sum())
    return LyapunovCertificate(v, lam, "family",
                               provenance={"family": fam.to_json(), "sigma": sigma.tolist(),
                                           "p": p.tolist()})


def verify_certificate(F: CompartmentalMatrix, cert: LyapunovCertificate,
                       tol: float = 1e-12) -> VerificationResult:
    """Margins of v^T F <= -lam v^T per column; ok iff none dips below -tol."""
    if F.n != cert.v.shape[0]:
        raise ValueError(f"dimension mismatch: matrix {F.n}, certificate {cert.v.shape[0]}")
    margins = -cert.lam * cert.v - cert.v @ F.entries
    worst = float(margins.min())
    return VerificationResult(worst >= -tol, worst, margins)


class SingularMatrixError(ValueError):
    pass


def linear_inverse_certificate(F: CompartmentalMatrix,
                               rcond_threshold: float = 1e-12) -> LyapunovCertificate:
    """Weights from solving v^T F = -(1,...,1); rate 1/max v.

    Needs an outflow-connected (hence nonsingular) matrix; the solve uses LU
    with partial pivoting and the inverse is never formed.
    """
    n = F.n
    w = np.ones(n)
    cond = np.linalg.cond(F.entries)
    if not np.isfinite(cond) or 1.0 / cond < rcond_threshold:
        raise SingularMatrixError(
            "matrix is numerically singular; run trap detection "
            "(a trapped compartment set makes the matrix singular)")
    v = np.linalg.solve(F.entries.T, -w)
    if np.any(v <= 0) or not np.all(np.isfinite(v)):
        raise SingularMatrixError(
            "solve produced nonpositive weights; matrix is not outflow connected")
    lam = 1.0 / float(v.max())
    return LyapunovCertificate(v, lam, "linear_inverse")


def fit_family(A: CompartmentalMatrix, l: int) -> FamilyParams:
    """Tightest family containing a canonical-form matrix: below-diagonal sums
    as attained, tail bound as the worst tail column, b as the largest
    above-diagonal entry."""
    entries = A.entries
    n = A.n
    a = [float(entries[i + 1:, i].sum()) for i in range(l - 1)]
    a.append(float(-A.colsums[l - 1:].max()))
    b = float(max(0.0, np.triu(entries, 1).max())) if n > 1 else 0.0
    return FamilyParams(n, l, tuple(a), b)


def certify_via_canonical(F: CompartmentalMatrix,
                          sigma: Sequence[float] | None = None,
                          tol: float = 1e-9) -> LyapunovCertificate:
    """Relabel to canonical form, fit the tightest family, synthesize the family
    certificate, and pull the weights back to the original coordinates.

    The returned certificate covers the whole fitted family, not just F; it is
    re-verified against the original matrix before being returned.
    """
    canon = canonicalize(F)
    fam = fit_family(canon.A, canon.witness.l)
    cert_canon = family_certificate(fam, sigma)
    v = np.empty(F.n)
    v[list(canon.r)] = cert_canon.v
    cert = LyapunovCertificate(
        v, cert_canon.lam, "family",
        provenance={"family": fam.to_json(),
                    "sigma": cert_canon.provenance["sigma"],
                    "permutation": [i + 1 for i in canon.r]})
    result = verify_certificate(F, cert, tol)
    if not result.ok:
        raise AssertionError(
            f"pulled-back certificate failed verification (margin {result.worst_margin:g})")
    return cert


def random_family_members(fam: FamilyParams, count: int, rng: np.random.Generator) -> np.ndarray:
    """Sample members of the family, shape (count, n, n).

    Columns ahead of l get below-diagonal mass a_i*(1+u) split at random and a
    small extra diagonal leak; columns from l on get arbitrary below-diagonal
    mass and column sum -a_l - extra. Above-diagonal entries are uniform in
    [0, b]. Every output satisfies membership by construction.
    """
    n, l = fam.n, fam.l
    M = np.zeros((count, n, n))
    if fam.b > 0 and n > 1:
        iu = np.triu_indices(n, 1)
        M[:, iu[0], iu[1]] = rng.uniform(0.0, fam.b, size=(count, len(iu[0])))
    for i in range(n):
        k = n - 1 - i  # below-diagonal slots in column i
        if i <= l - 2:
            w = rng.uniform(0.2, 1.0, size=(count, k))
            target = fam.a[i] * (1.0 + rng.uniform(0.0, 1.0, size=count))
            M[:, i + 1:, i] = w * (target / w.sum(axis=1))[:, None]
        elif k > 0:
            M[:, i + 1:, i] = rng.uniform(0.0, 1.0, size=(count, k))
        off_sum = M[:, :, i].sum(axis=1)
        if i <= l - 2:
            M[:, i, i] = -off_sum - rng.uniform(0.0, 0.5, size=count)
        else:
            M[:, i, i] = -off_sum - fam.a[l - 1] - rng.uniform(0.0, 1.0, size=count)
    return M


def random_family_member(fam: FamilyParams, rng: np.random.Generator) -> CompartmentalMatrix:
    return validate_compartmental(random_family_members(fam, 1, rng)[0], tol=0.0)
