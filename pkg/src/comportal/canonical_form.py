"""Outflow canonical form: detection and the constructive relabeling.

A compartmental matrix is on outflow canonical form when its trailing columns
(from some index l on) all leak strictly to the environment and every earlier
compartment feeds at least one later one. Any outflow-connected matrix can be
brought to this form by relabeling compartments: order the reverse-BFS layers
toward the outflow set from deepest to shallowest, ascending inside each layer.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph_analysis import STRICT_TOL, build_graph, layer_decomposition
from .matrix_core import CompartmentalMatrix, conjugate_by_permutation, permutation_matrix


@dataclass(frozen=True)
class CanonicalWitness:
    is_canonical: bool
    l: int | None              # 1-based; 1 means every column sum is negative
    negative_columns: tuple    # 0-based columns with strictly negative sums
    feeds: dict                # 0-based i -> j (j > i, entry (j, i) > 0), for i < l-1
    reason: str = ""

    def to_json(self) -> dict:
        return {"is_canonical": self.is_canonical, "l": self.l,
                "negative_columns": [i + 1 for i in self.negative_columns],
                "feeds": {str(i + 1): j + 1 for i, j in self.feeds.items()},
                "reason": self.reason}


@dataclass(frozen=True, eq=False)
class Canonicalization:
    r: tuple                   # 0-based permutation: A[i, j] = F[r[i], r[j]]
    P: np.ndarray
    A: CompartmentalMatrix
    witness: CanonicalWitness

    def to_json(self) -> dict:
        return {"schema": "comportal.canonicalization/1",
                "r": [i + 1 for i in self.r],
                "l": self.witness.l,
                "A": self.A.to_json()}


def check_canonical(F: CompartmentalMatrix, strict_tol: float = STRICT_TOL) -> CanonicalWitness:
    """Report the smallest index l making the canonical-form conditions hold."""
    n = F.n
    negative = F.colsums < -strict_tol
    neg_cols = tuple(int(i) for i in np.nonzero(negative)[0])
    if negative.all():
        return CanonicalWitness(True, 1, neg_cols, {})
    # m: smallest 1-based index with columns m..n all strictly negative
    m = n + 1
    while m >= 2 and negative[m - 2]:
        m -= 1
    if m > n:
        return CanonicalWitness(False, None, neg_cols, {},
                                reason=f"column {n} sum is not negative")
    l = max(2, m)
    feeds = {}
    for i in range(l - 1):  # 0-based columns 0..l-2
        below = np.nonzero(F.entries[i + 1:, i] > strict_tol)[0]
        if below.size == 0:
            return CanonicalWitness(False, None, neg_cols, feeds,
                                    reason=f"column {i + 1} has no positive entry below the diagonal")
        feeds[i] = int(below[0] + i + 1)
    return CanonicalWitness(True, l, neg_cols, feeds)


def canonicalize(F: CompartmentalMatrix, strict_tol: float = STRICT_TOL) -> Canonicalization:
    """Constructive relabeling onto canonical form (requires outflow connectivity).

    Already-canonical input short-circuits to the identity permutation.
    Otherwise the layers toward the outflow set are concatenated deepest-first,
    each ascending, which lands the outflow set in the trailing columns and
    gives every earlier compartment a feed into the previous (later) layer.
    """
    witness = check_canonical(F, strict_tol)
    if witness.is_canonical:
        r = tuple(range(F.n))
        return Canonicalization(r, permutation_matrix(r), F, witness)
    graph = build_graph(F, strict_tol)
    layers = layer_decomposition(graph).layers  # raises with the trap when not connected
    r = tuple(i for layer in reversed(layers) for i in layer)
    A = conjugate_by_permutation(F, r)
    witness_a = check_canonical(A, strict_tol)
    expected_l = F.n + 1 - len(layers[0])
    if not witness_a.is_canonical or witness_a.l != expected_l:
        raise AssertionError(
            f"canonicalization produced a non-canonical result (l={witness_a.l}, "
            f"expected {expected_l}): {witness_a.reason}")
    return Canonicalization(r, permutation_matrix(r), A, witness_a)
