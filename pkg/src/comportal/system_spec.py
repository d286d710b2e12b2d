"""Time-varying compartmental/cooperative system descriptions and structural checks.

Two levels of description:

* `SystemSpec` — black-box evaluators F(t,x), g(t,x), I(t,x) over a box, for
  systems given as arbitrary Python callables.
* `StructuredSystem` — the per-compartment coefficient form: scalar functions
  f0_i(t, x_i), g_i(t, x_i), I_i(t, x_i) and pairwise f_ij(t, x_i) (row i fed
  from compartment j, coefficient depending on the receiving state), which is
  what the incremental-stability machinery and the fast kernels consume.

All structural checks here are sampling-based: they certify "passed at the
sampled points" with the worst margin and a witness, never a proof. Sampling
uses Sobol low-discrepancy points plus the box corners (monotone conditions
bind at extremes).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.stats import qmc

from .expressions import (Expression, Program, Sampled, Table, compile_expression,
                          parse_expression, run_program)
from .kernels import build_flat_pack
from .matrix_core import check_compartmental

DEFAULT_SAMPLES = 4096
MAX_CORNER_DIM = 12


@dataclass(frozen=True, eq=False)
class BoxSpace:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("box bounds must be matching 1-d arrays")
        if np.any(lo > hi):
            raise ValueError("box needs lower <= upper componentwise")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def n(self) -> int:
        return self.lower.shape[0]

    @property
    def bounded(self) -> bool:
        return bool(np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper)))

    def contains(self, x, tol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))

    def clip(self, x) -> np.ndarray:
        return np.clip(np.asarray(x, dtype=float), self.lower, self.upper)

    def sample(self, count: int, seed: int, include_corners: bool = True) -> np.ndarray:
        """Sobol points (scrambled with `seed`) plus the box corners."""
        if not self.bounded:
            raise ValueError("sampling needs a bounded box")
        sob = qmc.Sobol(d=self.n, scramble=True, seed=seed)
        unit = sob.random(count)
        pts = self.lower + unit * (self.upper - self.lower)
        if include_corners:
            pts = np.vstack([pts, self.corners(seed=seed)])
        return pts

    def corners(self, seed: int = 0) -> np.ndarray:
        if self.n <= MAX_CORNER_DIM:
            bits = ((np.arange(2 ** self.n)[:, None] >> np.arange(self.n)) & 1).astype(float)
        else:  # too many corners to enumerate; take a seeded subset
            rng = np.random.default_rng(seed)
            bits = rng.integers(0, 2, size=(2 ** MAX_CORNER_DIM, self.n)).astype(float)
        return self.lower + bits * (self.upper - self.lower)


def unit_box(n: int, cap: float = 1.0) -> BoxSpace:
    return BoxSpace(np.zeros(n), np.full(n, cap))


def nonneg_orthant(n: int) -> BoxSpace:
    return BoxSpace(np.zeros(n), np.full(n, np.inf))


# ---------------------------------------------------------------------------
# Coefficients
# ---------------------------------------------------------------------------

class Coefficient:
    """Scalar coefficient of (t, x). Backed by an expression (compilable for the
    kernels) or a raw Python callable; `None` expression + callable means zero."""

    __slots__ = ("expr", "fn", "constants", "tables", "program", "_table_list")

    def __init__(self, expr: Expression | None = None, fn: Callable | None = None,
                 constants: Mapping[str, float] | None = None,
                 tables: Mapping[str, Table] | None = None):
        self.expr = expr
        self.fn = fn
        self.constants = dict(constants or {})
        self.tables = dict(tables or {})
        self._table_list = list(self.tables.values())
        table_ids = {name: k for k, name in enumerate(self.tables)}
        self.program = (compile_expression(expr, "x", self.constants, table_ids)
                        if expr is not None else None)

    @staticmethod
    def zero() -> "Coefficient":
        return Coefficient()

    @staticmethod
    def constant(value: float) -> "Coefficient":
        return Coefficient(expr=Expression.constant(value))

    @staticmethod
    def from_source(src: str, constants=None, tables=None) -> "Coefficient":
        expr = parse_expression(src)
        if tables:
            for name in set(expr.variables()) & set(tables):
                expr = expr.substitute(name, Expression.sampled(name))
        return Coefficient(expr=expr, constants=constants, tables=tables)

    @property
    def is_zero(self) -> bool:
        return self.expr is None and self.fn is None

    def __call__(self, t, x):
        if self.program is not None:
            return run_program(self.program, t, x, self._table_list)
        if self.fn is not None:
            return self.fn(t, x)
        return np.zeros_like(np.asarray(x, dtype=float)) if np.ndim(x) else 0.0

    def __repr__(self):
        if self.expr is not None:
            return f"Coefficient({self.expr.source!r})"
        return "Coefficient(0)" if self.is_zero else f"Coefficient({self.fn!r})"


# ---------------------------------------------------------------------------
# Structured systems (per-compartment coefficient form)
# ---------------------------------------------------------------------------

class StructuredSystem:
    """Compartmental system with coefficient structure suitable for the kernels.

    pairs maps (i, j) -> coefficient of the flow from compartment j into i;
    the matrix entry (i, j) is pairs[(i, j)](t, x_i) and the diagonal balances
    each column (minus the outflow f0). Indices are 0-based here; JSON is 1-based.
    """

    def __init__(self, n: int, capacities, g: Sequence[Coefficient],
                 f0: Sequence[Coefficient], inflow: Sequence[Coefficient],
                 pairs: Mapping[tuple, Coefficient],
                 declared_lipschitz: Mapping[str, float] | None = None,
                 meta: dict | None = None):
        self.n = n
        self.capacities = np.asarray(capacities, dtype=float) * np.ones(n)
        self.g = list(g)
        self.f0 = list(f0)
        self.inflow = list(inflow)
        self.pairs = {(int(i), int(j)): c for (i, j), c in pairs.items() if not c.is_zero}
        for (i, j) in self.pairs:
            if i == j or not (0 <= i < n and 0 <= j < n):
                raise ValueError(f"bad pair index ({i}, {j})")
        if not (len(self.g) == len(self.f0) == len(self.inflow) == n):
            raise ValueError("g, f0, inflow must each have one coefficient per compartment")
        self.declared_lipschitz = dict(declared_lipschitz or {})
        self.meta = dict(meta or {})
        self._pack = None

    @property
    def space(self) -> BoxSpace:
        return BoxSpace(np.zeros(self.n), self.capacities.copy())

    def g_vector(self, t: float, x: np.ndarray) -> np.ndarray:
        return np.array([float(self.g[i](t, x[i])) for i in range(self.n)])

    def inflow_vector(self, t: float, x: np.ndarray) -> np.ndarray:
        return np.array([float(self.inflow[i](t, x[i])) for i in range(self.n)])

    def f0_vector(self, t: float, x: np.ndarray) -> np.ndarray:
        return np.array([float(self.f0[i](t, x[i])) for i in range(self.n)])

    def F_matrix(self, t: float, x) -> np.ndarray:
        """Assemble the compartmental matrix at (t, x) from the coefficients."""
        x = np.asarray(x, dtype=float)
        F = np.zeros((self.n, self.n))
        for (i, j), coef in self.pairs.items():
            F[i, j] = float(coef(t, x[i]))
        diag = -self.f0_vector(t, x) - F.sum(axis=0)
        F[np.diag_indices(self.n)] = diag
        return F

    def rhs(self, t: float, X: np.ndarray) -> np.ndarray:
        """Batched mass-balance right-hand side (reference numpy path)."""
        from .kernels import structured_rhs
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return structured_rhs(self.flat_pack(), t, X)

    def flat_pack(self):
        if self._pack is None:
            programs = {}
            tables: list[Table] = []
            table_ids: dict[str, int] = {}

            def compiled(coef: Coefficient) -> Program | None:
                if coef.is_zero:
                    return None
                if coef.program is None:
                    raise ValueError(
                        "coefficient has no expression; callable-backed systems "
                        "use the generic integrator path")
                ids = {}
                for name, table in coef.tables.items():
                    if name not in table_ids:
                        table_ids[name] = len(tables)
                        tables.append(table)
                    ids[name] = table_ids[name]
                return compile_expression(coef.expr, "x", coef.constants, ids)

            g_p = [compiled(c) for c in self.g]
            if any(p is None for p in g_p):
                raise ValueError("every compartment needs a g coefficient")
            f0_p = [compiled(c) for c in self.f0]
            in_p = [compiled(c) for c in self.inflow]
            pair_list = [(i, j, compiled(c)) for (i, j), c in sorted(self.pairs.items())]
            self._pack = build_flat_pack(self.n, g_p, f0_p, in_p, pair_list, tables)
        return self._pack

    # -- JSON ---------------------------------------------------------------

    def to_json(self) -> dict:
        def src(c: Coefficient):
            return c.expr.source if c.expr is not None else None

        return {
            "schema": "comportal.system/1",
            "n": self.n,
            "capacities": self.capacities.tolist(),
            "g": [src(c) for c in self.g],
            "f0": [src(c) for c in self.f0],
            "I": [src(c) for c in self.inflow],
            "f": {f"{i + 1},{j + 1}": src(c) for (i, j), c in sorted(self.pairs.items())},
            "declared_lipschitz": self.declared_lipschitz,
        }

    @staticmethod
    def from_json(data: Mapping) -> "StructuredSystem":
        n = int(data["n"])
        caps = data.get("capacities", 1.0)
        constants = dict(data.get("constants", {}))
        tables = {name: Table(name, np.asarray(spec["t"], float), np.asarray(spec["v"], float))
                  for name, spec in data.get("tables", {}).items()}

        def coef(src) -> Coefficient:
            if src is None or src == 0 or src == "0":
                return Coefficient.zero()
            if isinstance(src, (int, float)):
                return Coefficient.constant(float(src))
            return Coefficient.from_source(str(src), constants, tables)

        def coef_list(key, default=None):
            raw = data.get(key)
            if raw is None:
                raw = [default] * n
            if len(raw) != n:
                raise ValueError(f"{key} must list {n} entries")
            return [coef(s) for s in raw]

        pairs = {}
        for key, src in data.get("f", {}).items():
            i_s, j_s = key.split(",")
            pairs[(int(i_s) - 1, int(j_s) - 1)] = coef(src)
        return StructuredSystem(
            n, caps,
            g=coef_list("g", default="x"),
            f0=coef_list("f0"),
            inflow=coef_list("I"),
            pairs=pairs,
            declared_lipschitz=dict(data.get("declared_lipschitz", {})),
        )


class SystemSpec:
    """Black-box system: evaluators over a box, with optional linear fast path."""

    def __init__(self, n: int, space: BoxSpace,
                 F_eval: Callable[[float, np.ndarray], np.ndarray],
                 g_eval: Callable[[float, np.ndarray], np.ndarray] | None = None,
                 I_eval: Callable[[float, np.ndarray], np.ndarray] | None = None,
                 linear_matrix: np.ndarray | None = None,
                 meta: dict | None = None):
        self.n = n
        self.space = space
        self.F_eval = F_eval
        self.g_eval = g_eval or (lambda t, x: np.asarray(x, dtype=float))
        self.I_eval = I_eval or (lambda t, x: np.zeros(n))
        self.linear_matrix = linear_matrix
        self.meta = dict(meta or {})

    def F_matrix(self, t, x) -> np.ndarray:
        return np.asarray(self.F_eval(t, np.asarray(x, dtype=float)), dtype=float)

    def rhs(self, t: float, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.linear_matrix is not None:
            return X @ self.linear_matrix.T
        out = np.empty_like(X)
        for r in range(X.shape[0]):
            x = X[r]
            out[r] = (self.F_matrix(t, x) @ np.asarray(self.g_eval(t, x), dtype=float)
                      + np.asarray(self.I_eval(t, x), dtype=float))
        return out

    @staticmethod
    def from_structured(sys: StructuredSystem) -> "SystemSpec":
        return SystemSpec(sys.n, sys.space, sys.F_matrix,
                          lambda t, x: sys.g_vector(t, x),
                          lambda t, x: sys.inflow_vector(t, x))


def linear_system(F, box: BoxSpace | None = None) -> SystemSpec:
    """Autonomous linear compartmental dynamics xdot = F x with g = identity."""
    from .matrix_core import CompartmentalMatrix
    entries = F.entries if isinstance(F, CompartmentalMatrix) else np.asarray(F, dtype=float)
    n = entries.shape[0]
    return SystemSpec(n, box or nonneg_orthant(n),
                      F_eval=lambda t, x: entries,
                      linear_matrix=entries)


# ---------------------------------------------------------------------------
# Sampling-based checks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Verdict:
    """Outcome of a sampled check: never a proof, always 'at the samples'."""

    passed: bool
    worst_margin: float
    witness: dict | None
    samples: int
    label: str

    def __bool__(self):
        return self.passed

    def to_json(self) -> dict:
        return {"passed": self.passed, "worst_margin": self.worst_margin,
                "witness": self.witness, "samples": self.samples,
                "label": self.label, "certified": "at-samples"}


def check_monotonicity(f: Callable[[float], float], lo: float, hi: float,
                       direction: str = "nonincreasing", samples: int = 257,
                       tol: float = 1e-12) -> Verdict:
    """Check a scalar map on [lo, hi] at a grid plus midpoint refinement.

    Directions: nonincreasing, nondecreasing, or slope_ge_1 (differences grow
    at least as fast as the argument).
    """
    xs = np.linspace(lo, hi, samples)
    xs = np.unique(np.concatenate([xs, 0.5 * (xs[:-1] + xs[1:])]))
    ys = np.array([float(f(x)) for x in xs])
    dx = np.diff(xs)
    dy = np.diff(ys)
    if direction == "nonincreasing":
        margins = -dy
    elif direction == "nondecreasing":
        margins = dy
    elif direction == "slope_ge_1":
        margins = dy - dx
    else:
        raise ValueError(f"unknown direction {direction!r}")
    worst = int(np.argmin(margins))
    passed = bool(margins[worst] >= -tol)
    witness = None
    if not passed:
        witness = {"x": float(xs[worst]), "y": float(xs[worst + 1]),
                   "f_x": float(ys[worst]), "f_y": float(ys[worst + 1])}
    return Verdict(passed, float(margins[worst]), witness, len(xs), f"monotonicity:{direction}")


def _ordered_pairs(space: BoxSpace, count: int, rng: np.random.Generator):
    span = space.upper - space.lower
    a = space.lower + rng.random((count, space.n)) * span
    b = space.lower + rng.random((count, space.n)) * span
    return np.minimum(a, b), np.maximum(a, b)


def check_type_K(sys, t_samples: Sequence[float] | None = None,
                 pair_samples: int = 512, tol: float = 1e-9,
                 seed: int = 0) -> Verdict:
    """Sampled check of the order-preservation condition on the right-hand side.

    For ordered states agreeing in component i, component i of the vector
    field must not decrease when the other components grow.
    """
    space = sys.space
    if not space.bounded:
        raise ValueError("type-K sampling needs a bounded box")
    rng = np.random.default_rng(seed)
    ts = list(t_samples) if t_samples is not None else [0.0, 0.7, 2.3]
    lo_pts, hi_pts = _ordered_pairs(space, pair_samples, rng)
    worst = np.inf
    witness = None
    checked = 0
    for t in ts:
        q_hi = sys.rhs(t, hi_pts)
        for i in range(sys.n):
            pinned = lo_pts.copy()
            pinned[:, i] = hi_pts[:, i]
            q_lo = sys.rhs(t, pinned)
            margins = q_hi[:, i] - q_lo[:, i]
            checked += len(margins)
            k = int(np.argmin(margins))
            if margins[k] < worst:
                worst = float(margins[k])
                witness = {"t": t, "component": i + 1,
                           "a": pinned[k].tolist(), "b": hi_pts[k].tolist()}
    passed = worst >= -tol
    return Verdict(bool(passed), worst, None if passed else witness, checked, "type_K")


def check_nonexpansive_condition(sys, samples: int = 512, tol: float = 1e-9,
                                 seed: int = 0,
                                 t_samples: Sequence[float] | None = None) -> Verdict:
    """Sampled check that the total mass rate never grows along the order:
    sum_i f_i(t, hi) - f_i(t, lo) <= 0 for ordered pairs lo <= hi."""
    space = sys.space
    if not space.bounded:
        raise ValueError("nonexpansiveness sampling needs a bounded box")
    rng = np.random.default_rng(seed)
    ts = list(t_samples) if t_samples is not None else [0.0, 0.7, 2.3]
    lo_pts, hi_pts = _ordered_pairs(space, samples, rng)
    corners = space.corners(seed)
    lo_pts = np.vstack([lo_pts, np.broadcast_to(space.lower, corners.shape)])
    hi_pts = np.vstack([hi_pts, corners])
    worst = np.inf
    witness = None
    for t in ts:
        diff = (sys.rhs(t, hi_pts) - sys.rhs(t, lo_pts)).sum(axis=1)
        k = int(np.argmin(-diff))
        if -diff[k] < worst:
            worst = float(-diff[k])
            witness = {"t": t, "lo": lo_pts[k].tolist(), "hi": hi_pts[k].tolist(),
                       "mass_rate_gap": float(diff[k])}
    passed = worst >= -tol
    return Verdict(bool(passed), worst, None if passed else witness,
                   len(ts) * len(lo_pts), "nonexpansive_condition")


@dataclass(frozen=True)
class StructureReport:
    """Per-assumption sampled verdicts for a structured system."""

    verdicts: dict  # name -> Verdict
    informational: dict

    @property
    def passed(self) -> bool:
        return all(v.passed for v in self.verdicts.values())

    def to_json(self) -> dict:
        return {"passed": self.passed,
                "verdicts": {k: v.to_json() for k, v in self.verdicts.items()},
                "informational": {k: v.to_json() for k, v in self.informational.items()}}


def check_structure(sys: StructuredSystem, t_samples: Sequence[float] = (0.0, 0.9, 3.7),
                    samples: int = 129, tol: float = 1e-9) -> StructureReport:
    """Sampled verification of the structural assumptions.

    Checked: nonnegativity of all coefficients; boundary identities
    g_i(t,0)=0, I_i(t,c_i)=0, f_ij(t,c_i)=0; g slope at least 1; f_ij
    nonincreasing; f0_i nondecreasing; I_i nonincreasing. The identity
    I_i(t,0)=0 is reported as informational: no stability argument uses it and
    constant-inflow models legitimately violate it.
    """
    verdicts: dict = {}
    info: dict = {}
    caps = sys.capacities

    def mono(name, coef, i, direction):
        worst = Verdict(True, np.inf, None, 0, direction)
        for t in t_samples:
            v = check_monotonicity(lambda x: float(coef(t, x)), 0.0, caps[i],
                                   direction, samples, tol)
            if v.worst_margin < worst.worst_margin:
                worst = v
        verdicts[name] = worst

    for i in range(sys.n):
        mono(f"A3:g[{i + 1}] slope>=1", sys.g[i], i, "slope_ge_1")
        if not sys.f0[i].is_zero:
            mono(f"A5:f0[{i + 1}] nondecreasing", sys.f0[i], i, "nondecreasing")
        if not sys.inflow[i].is_zero:
            mono(f"A6:I[{i + 1}] nonincreasing", sys.inflow[i], i, "nonincreasing")
    for (i, j), coef in sorted(sys.pairs.items()):
        mono(f"A4:f[{i + 1},{j + 1}] nonincreasing", coef, i, "nonincreasing")

    # boundary identities and nonnegativity at sampled times
    for t in t_samples:
        for i in range(sys.n):
            gz = float(sys.g[i](t, 0.0))
            _merge_identity(verdicts, f"A2:g[{i + 1}](t,0)=0", gz, tol, t)
            iz = float(sys.inflow[i](t, caps[i])) if not sys.inflow[i].is_zero else 0.0
            _merge_identity(verdicts, f"A2:I[{i + 1}](t,c)=0", iz, tol, t)
            i0 = float(sys.inflow[i](t, 0.0)) if not sys.inflow[i].is_zero else 0.0
            _merge_identity(info, f"A2:I[{i + 1}](t,0)=0", i0, tol, t)
        for (i, j), coef in sorted(sys.pairs.items()):
            fc = float(coef(t, caps[i]))
            _merge_identity(verdicts, f"A2:f[{i + 1},{j + 1}](t,c)=0", fc, tol, t)
        xs = np.linspace(0.0, 1.0, 33)
        for i in range(sys.n):
            for name, coef in ((f"A1:g[{i + 1}]>=0", sys.g[i]),
                               (f"A1:f0[{i + 1}]>=0", sys.f0[i]),
                               (f"A1:I[{i + 1}]>=0", sys.inflow[i])):
                vals = np.array([float(coef(t, x)) for x in xs * caps[i]])
                _merge_margin(verdicts, name, float(vals.min()), tol, t)
        for (i, j), coef in sorted(sys.pairs.items()):
            vals = np.array([float(coef(t, x)) for x in xs * caps[i]])
            _merge_margin(verdicts, f"A1:f[{i + 1},{j + 1}]>=0", float(vals.min()), tol, t)

    return StructureReport(verdicts, info)


def _merge_identity(store, name, value, tol, t):
    margin = -abs(float(value))
    prev = store.get(name)
    if prev is None or margin < prev.worst_margin:
        witness = None if margin >= -tol else {"t": t, "value": float(value)}
        store[name] = Verdict(margin >= -tol, margin, witness, 1, "identity")


def _merge_margin(store, name, margin, tol, t):
    prev = store.get(name)
    if prev is None or margin < prev.worst_margin:
        witness = None if margin >= -tol else {"t": t, "min_value": margin}
        store[name] = Verdict(margin >= -tol, margin, witness, 1, "nonnegative")


def validate_samples(sys, horizon: float = 5.0, count: int = 256, seed: int = 0,
                     tol: float = 1e-9) -> Verdict:
    """Sampled validation of the compartmental-system contract: F(t,x)
    compartmental, g >= x with g(t, x)=0 at x_i=0, inflow >= 0."""
    space = sys.space
    if not space.bounded:
        space = BoxSpace(space.lower, np.minimum(space.upper, 1e3))
    rng = np.random.default_rng(seed)
    pts = space.sample(count, seed)
    ts = rng.uniform(0.0, horizon, size=len(pts))
    worst = np.inf
    witness = None

    def consider(margin, kind, t, x):
        nonlocal worst, witness
        if margin < worst:
            worst = float(margin)
            witness = {"kind": kind, "t": float(t), "x": np.asarray(x).tolist()}

    g_eval = sys.g_vector if isinstance(sys, StructuredSystem) else sys.g_eval
    I_eval = sys.inflow_vector if isinstance(sys, StructuredSystem) else sys.I_eval
    for t, x in zip(ts, pts):
        F = sys.F_matrix(t, x)
        rep = check_compartmental(F, tol=max(tol, 1e-12))
        if not rep.ok:
            worst_v = min((v["value"] for v in rep.violations if v["value"] is not None),
                          default=-np.inf)
            consider(-abs(worst_v), "F_not_compartmental", t, x)
        g = np.asarray(g_eval(t, x), dtype=float)
        consider(float((g - x).min()), "g_below_state", t, x)
        zero_mask = x == 0.0
        if zero_mask.any():
            consider(float(-np.abs(g[zero_mask]).max()), "g_nonzero_at_empty", t, x)
        inflow = np.asarray(I_eval(t, x), dtype=float)
        consider(float(inflow.min()), "negative_inflow", t, x)
    passed = worst >= -tol
    return Verdict(bool(passed), worst, None if passed else witness, len(pts), "system_contract")


def estimate_lipschitz(f: Callable[[float], float], lo: float, hi: float,
                       samples: int = 513, safety: float = 1.25) -> float:
    """Max sampled divided difference times a safety factor; a declared constant
    should always take precedence over this estimate."""
    xs = np.linspace(lo, hi, samples)
    ys = np.array([float(f(x)) for x in xs])
    dx = np.diff(xs)
    slopes = np.abs(np.diff(ys)) / np.where(dx == 0, 1.0, dx)
    return float(slopes.max() * safety)
