"""Certification pipelines: exponential stability of the null solution and
incremental exponential stability for the structured class.

Every "certified" verdict here is an at-samples certification: hypotheses that
quantify over a continuum (family membership for all (t, x), monotonicity on
an interval) are validated on seeded sample sets with logged worst margins.
The tool falsifies or supports; it does not prove.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .canonical_form import canonicalize
from .certificate import (FamilyParams, LyapunovCertificate, family_certificate,
                          family_membership, fit_family, verify_certificate)
from .graph_analysis import build_graph, check_outflow_connected
from .matrix_core import CompartmentalMatrix, validate_compartmental
from .ode_engine import IntegrateOptions, Trajectory, default_step, integrate, integrate_batch
from .system_spec import (BoxSpace, StructuredSystem, Verdict, check_nonexpansive_condition,
                          check_type_K, estimate_lipschitz)

CERTIFIED_ES = "certified-ES"
CERTIFIED_NOT_AS = "certified-not-AS"
CERTIFIED_IES = "certified-IES"
INCONCLUSIVE = "inconclusive"


@dataclass(frozen=True, eq=False)
class ESReport:
    verdict: str
    certificate: LyapunovCertificate | None
    trap: frozenset | None
    assumptions_log: tuple
    worst_margin: float | None = None
    witness: dict | None = None
    seed: int | None = None

    def to_json(self) -> dict:
        return {"schema": "comportal.es_report/1", "verdict": self.verdict,
                "certificate": self.certificate.to_json() if self.certificate else None,
                "trap": sorted(i + 1 for i in self.trap) if self.trap else None,
                "assumptions_log": list(self.assumptions_log),
                "worst_margin": self.worst_margin, "witness": self.witness,
                "seed": self.seed}


def _time_grid(horizon: float, count: int = 9) -> np.ndarray:
    return np.linspace(0.0, horizon, count)


def certify_null_ES(sys, fam: FamilyParams, horizon: float = 10.0,
                    samples: int = 512, seed: int = 0, tol: float = 1e-9) -> ESReport:
    """Certify the null solution exponentially stable by checking that the flow
    matrix stays inside the given family at sampled (t, x) and emitting the
    family certificate. A membership violation is inconclusive, not a
    refutation: the family may simply be fitted wrong.
    """
    log = []
    space = sys.space
    if not space.bounded:
        space = BoxSpace(space.lower, np.minimum(space.upper, 1e3))
        log.append("unbounded state space truncated to 1e3 for sampling")
    pts = space.sample(samples, seed)
    ts = _time_grid(horizon)
    inflow_max = 0.0
    worst = math.inf
    witness = None
    g_fn = sys.g_vector if isinstance(sys, StructuredSystem) else sys.g_eval
    i_fn = sys.inflow_vector if isinstance(sys, StructuredSystem) else sys.I_eval
    for t in ts:
        for x in pts:
            F = validate_compartmental(sys.F_matrix(t, x), tol=max(tol, 1e-12))
            rep = family_membership(F, fam, tol)
            if rep.worst_margin < worst:
                worst = rep.worst_margin
                witness = {"t": float(t), "x": np.asarray(x).tolist(),
                           "violations": list(rep.violations[:3])}
            inflow_max = max(inflow_max, float(np.abs(i_fn(t, x)).max(initial=0.0)))
            g = np.asarray(g_fn(t, x), dtype=float)
            if float((g - np.asarray(x)).min()) < -tol:
                return ESReport(INCONCLUSIVE, None, None,
                                tuple(log + ["g(t,x) >= x fails at a sample"]),
                                worst_margin=worst, seed=seed,
                                witness={"t": float(t), "x": np.asarray(x).tolist()})
    if inflow_max > tol:
        log.append(f"inflow is not identically zero at samples (max {inflow_max:g}); "
                   "null-solution analysis does not apply")
        return ESReport(INCONCLUSIVE, None, None, tuple(log), worst_margin=worst,
                        witness=witness, seed=seed)
    log.append(f"membership checked at {len(ts)}x{len(pts)} samples, worst margin {worst:g}")
    if worst < -tol:
        log.append("family membership violated; certify with a different family or refit")
        return ESReport(INCONCLUSIVE, None, None, tuple(log), worst_margin=worst,
                        witness=witness, seed=seed)
    cert = family_certificate(fam)
    log.append(f"certificate rate {cert.lam:g}, overshoot {cert.gamma:g} (at-samples)")
    return ESReport(CERTIFIED_ES, cert, None, tuple(log), worst_margin=worst, seed=seed)


# ---------------------------------------------------------------------------
# Bounded-coefficient classification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CoefficientBounds:
    """Declared range of one coefficient: identically zero, or pinched between
    positive finite bounds."""

    lower: float
    upper: float

    def __post_init__(self):
        if self.lower == 0.0 and self.upper == 0.0:
            return
        if not (0.0 < self.lower <= self.upper < math.inf):
            raise ValueError(
                f"bounds must be 0 <= {self.lower} <= {self.upper} with positive "
                "lower bound unless identically zero")

    @property
    def is_zero(self) -> bool:
        return self.upper == 0.0


ZERO_BOUND = CoefficientBounds(0.0, 0.0)


@dataclass(frozen=True)
class BoundsDeclaration:
    """Per-coefficient inf/sup declarations: outflow magnitudes f0[i] and pair
    coefficients (i, j) (0-based, row i fed from j)."""

    n: int
    f0: tuple
    pairs: Mapping[tuple, CoefficientBounds]
    estimated: bool = False

    @staticmethod
    def from_sampling(sys, horizon: float = 10.0, samples: int = 512, seed: int = 0,
                      zero_tol: float = 1e-12) -> "BoundsDeclaration":
        """Estimate bounds from samples of F(t, x); flagged as estimated.

        Raises if some coefficient is neither identically zero nor bounded away
        from zero at the samples (the dichotomy the classification needs).
        """
        space = sys.space
        if not space.bounded:
            space = BoxSpace(space.lower, np.minimum(space.upper, 1e3))
        pts = space.sample(samples, seed)
        mats = np.stack([sys.F_matrix(t, x) for t in _time_grid(horizon) for x in pts])
        n = mats.shape[1]
        lo_f = mats.min(axis=0)
        hi_f = mats.max(axis=0)
        col_lo = -mats.sum(axis=1).max(axis=0)  # inf of outflow magnitude per column
        col_hi = -mats.sum(axis=1).min(axis=0)

        def bound(lo, hi, what):
            if hi <= zero_tol:
                return ZERO_BOUND
            if lo <= zero_tol:
                raise ValueError(
                    f"{what} is neither identically zero nor bounded away from zero "
                    f"at the samples (range [{lo:g}, {hi:g}])")
            return CoefficientBounds(float(lo), float(hi))

        f0 = tuple(bound(col_lo[i], col_hi[i], f"outflow f0[{i + 1}]") for i in range(n))
        pairs = {}
        for i in range(n):
            for j in range(n):
                if i != j:
                    b = bound(lo_f[i, j], hi_f[i, j], f"coefficient f[{i + 1},{j + 1}]")
                    if not b.is_zero:
                        pairs[(i, j)] = b
        return BoundsDeclaration(n, f0, pairs, estimated=True)


def classify_bounded_coefficients(sys, declared: BoundsDeclaration | None = None,
                                  seed: int = 0) -> ESReport:
    """Necessary-and-sufficient classification when every coefficient is either
    identically zero or pinched between positive bounds.

    Build the worst-case matrix G from the declared infima. If G is outflow
    connected, the canonical-family certificate (with the above-diagonal bound
    widened by the declared coefficient spreads) certifies exponential
    stability; otherwise G's trap blocks even asymptotic stability, since
    the trap's mass can never decrease.
    """
    log = []
    if declared is None:
        declared = BoundsDeclaration.from_sampling(sys, seed=seed)
    if declared.estimated:
        log.append("bounds estimated from samples (declared bounds take precedence)")
    n = declared.n
    G = np.zeros((n, n))
    for (i, j), b in declared.pairs.items():
        G[i, j] = b.lower
    for i in range(n):
        G[i, i] = -declared.f0[i].lower - sum(
            b.lower for (r, c), b in declared.pairs.items() if c == i)
    Gm = validate_compartmental(G, tol=0.0)
    graph = build_graph(Gm)
    trap_report = check_outflow_connected(graph)
    if not trap_report.is_outflow_connected:
        trap = trap_report.trap
        log.append(f"worst-case graph has trap {sorted(i + 1 for i in trap)}: "
                   "mass in the trap never decreases, so any start with positive "
                   "trap mass keeps it; the null solution is not asymptotically stable")
        log.append("positivity premise: every declared nonzero coefficient has a "
                   "positive lower bound, so the graph is the same at every (t, x)")
        return ESReport(CERTIFIED_NOT_AS, None, trap, tuple(log), seed=seed)
    canon = canonicalize(Gm)
    fam_g = fit_family(canon.A, canon.witness.l)
    spread = 0.0
    r = canon.r
    for a in range(n - 1):
        for bcol in range(a + 1, n):
            bound = declared.pairs.get((r[a], r[bcol]))
            if bound is not None:
                spread = max(spread, bound.upper - bound.lower)
    fam = FamilyParams(fam_g.n, fam_g.l, fam_g.a, fam_g.b + spread)
    cert_canon = family_certificate(fam)
    v = np.empty(n)
    v[list(r)] = cert_canon.v
    cert = LyapunovCertificate(v, cert_canon.lam, "family",
                               provenance={"family": fam.to_json(),
                                           "permutation": [i + 1 for i in r],
                                           "sigma": cert_canon.provenance["sigma"]})
    assert verify_certificate(Gm, cert, tol=1e-9).ok
    log.append("worst-case matrix is outflow connected; family certificate covers "
               "every matrix within the declared bounds (exact given the declarations)")
    log.append(f"rate {cert.lam:g}, overshoot {cert.gamma:g}")
    return ESReport(CERTIFIED_ES, cert, None, tuple(log), seed=seed)


# ---------------------------------------------------------------------------
# Increment factorization (ordered pairs)
# ---------------------------------------------------------------------------

class MonotonicityViolated(ValueError):
    def __init__(self, assumption: str, detail: str):
        super().__init__(f"{assumption} violated: {detail}")
        self.assumption = assumption


@dataclass(frozen=True, eq=False)
class IncrementFactorization:
    """Correction matrix D with F(t,y)g(t,y) - F(t,x)g(t,x) =
    (F(t,y) + D)(g(t,y) - g(t,x)); D is compartmental whenever the
    monotonicity assumptions hold, with above-diagonal entries bounded by
    the coupling bound."""

    matrix: np.ndarray
    residual: float
    t: float
    x: np.ndarray
    y: np.ndarray


def factor_increment(sys: StructuredSystem, t: float, x, y,
                     mono_tol: float = 1e-10) -> IncrementFactorization:
    """Build the correction matrix for an ordered pair x <= y.

    Column k is active when x_k < y_k: its off-diagonal entries transport the
    pair-coefficient decrements through the g-increment of compartment k, and
    its diagonal balances the column to minus the outflow decrement. Negative
    transported quantities name the violated monotonicity assumption.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = sys.n
    if x.shape != (n,) or y.shape != (n,):
        raise ValueError(f"states must have shape ({n},)")
    if np.any(x > y):
        raise ValueError("needs an ordered pair x <= y")
    g_x = sys.g_vector(t, x)
    g_y = sys.g_vector(t, y)
    dg = g_y - g_x
    D = np.zeros((n, n))
    d0 = np.zeros(n)
    for k in range(n):
        if y[k] <= x[k]:
            continue
        if dg[k] < (y[k] - x[k]) - mono_tol or dg[k] <= 0:
            raise MonotonicityViolated(
                "A3 (g increments at least as fast as the state)",
                f"compartment {k + 1}: g gap {dg[k]:g} < state gap {y[k] - x[k]:g}")
        if not sys.f0[k].is_zero:
            df0 = float(sys.f0[k](t, y[k])) - float(sys.f0[k](t, x[k]))
            if df0 < -mono_tol:
                raise MonotonicityViolated(
                    "A5 (outflow coefficient nondecreasing)",
                    f"compartment {k + 1}: decrease {df0:g} on [{x[k]:g}, {y[k]:g}]")
            d0[k] = g_x[k] * max(df0, 0.0) / dg[k]
    for (i, j), coef in sys.pairs.items():
        k = i  # the coefficient depends on the receiving state x_i
        if y[k] <= x[k]:
            continue
        dfij = float(coef(t, x[k])) - float(coef(t, y[k]))
        if dfij < -mono_tol:
            raise MonotonicityViolated(
                "A4 (pair coefficient nonincreasing)",
                f"coefficient ({i + 1},{j + 1}): increase {-dfij:g} on "
                f"[{x[k]:g}, {y[k]:g}]")
        D[j, k] += g_x[j] * max(dfij, 0.0) / dg[k]
    for k in range(n):
        D[k, k] = -d0[k] - (D[:, k].sum() - D[k, k])
    lhs = sys.F_matrix(t, y) @ g_y - sys.F_matrix(t, x) @ g_x
    rhs = (sys.F_matrix(t, y) + D) @ dg
    residual = float(np.abs(lhs - rhs).max())
    return IncrementFactorization(D, residual, t, x.copy(), y.copy())


def increment_coupling_bound(sys: StructuredSystem,
                             lipschitz: Mapping[str, float] | None = None,
                             g_sup: np.ndarray | None = None,
                             t_samples: Sequence[float] = (0.0, 1.0, 5.0)) -> tuple:
    """Uniform bound on the above-diagonal entries of the correction matrix:
    max over downstream pairs (i > j) of sup(g_j) * Lip(f_ij).

    Declared Lipschitz constants (keys "f[i,j]", 1-based) take precedence;
    otherwise constants are estimated from samples and flagged.
    """
    lipschitz = dict(lipschitz or {})
    caps = sys.capacities
    log = []
    if g_sup is None:
        g_sup = np.array([max(float(sys.g[j](t, caps[j])) for t in t_samples)
                          for j in range(sys.n)])
        log.append("g suprema taken at sampled times")
    bound = 0.0
    for (i, j), coef in sys.pairs.items():
        if i <= j:
            continue  # upstream pairs feed below-diagonal entries of D
        key = f"f[{i + 1},{j + 1}]"
        if key in lipschitz:
            lip = float(lipschitz[key])
        else:
            lip = max(estimate_lipschitz(lambda z, t=t: float(coef(t, z)), 0.0, caps[i])
                      for t in t_samples)
            log.append(f"Lipschitz constant of {key} estimated as {lip:g} "
                       "(declare one to override)")
        bound = max(bound, g_sup[j] * lip)
    return bound, tuple(log)


# ---------------------------------------------------------------------------
# Absorbing box
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChainBounds:
    """Declared constants for the downstream-chain route: the last compartment
    drains at least at rate a_n; every compartment i >= 2 feeds compartment
    i+1 at rate at least h_{i}(x_i) > 0 below capacity; L_i bounds the refill
    rate (inflow + upstream coupling, scaled by capacity slack)."""

    a_n: float
    h_funcs: tuple       # callables, h_funcs[k] for 0-based compartment k (k >= 1)
    refill: np.ndarray   # L_k per 0-based compartment k (k >= 1 used)

    def __post_init__(self):
        if self.a_n <= 0:
            raise ValueError("a_n must be positive")


@dataclass(frozen=True, eq=False)
class AbsorbingBox:
    s: np.ndarray              # upper corner of the absorbing box (s[0] = c[0])
    thresholds: np.ndarray     # per-compartment equilibria of the drain bound
    deadlines: np.ndarray      # entry deadlines per compartment
    tau: float
    corner: Trajectory
    verification: Verdict | None
    log: tuple

    def space(self, capacities) -> BoxSpace:
        return BoxSpace(np.zeros(len(self.s)), self.s.copy())


class AbsorbingBoxError(ValueError):
    pass


def compute_absorbing_box(sys: StructuredSystem, tau: float, bounds: ChainBounds,
                          step: float | None = None, ensemble: int = 8, seed: int = 0,
                          ver_tol: float = 1e-6, s_fraction: float = 0.5) -> AbsorbingBox:
    """Shrink the box to S = [0,c_1] x [0,s_2] x ... x [0,s_n] entered by time tau.

    Backward from the last compartment: once compartment k+1 is pinned below
    s_{k+1} (from time tau on), compartment k strictly decreases whenever it
    sits above the equilibrium b_k of its drain bound, so it can never exceed
    max(b_k, its level at tau). The full-capacity corner trajectory dominates
    every start in the box, so its level at tau caps the whole ensemble.
    s_k sits `s_fraction` of the way into the admissible interval
    [max(b_k, corner_k(tau)), c_k) (midpoint by default; smaller fractions
    give larger certified rates at the price of a tighter, harder-to-enter box).
    """
    n = sys.n
    caps = sys.capacities
    log = []
    if tau <= 0:
        raise AbsorbingBoxError("tau must be positive")
    if not 0.0 < s_fraction < 1.0:
        raise AbsorbingBoxError("s_fraction must be in (0, 1)")
    opts = IntegrateOptions(step=step if step is not None else default_step(sys))
    corner = integrate(sys, caps.copy(), 0.0, tau, opts)
    corner_at_tau = corner.states[-1]
    log.append("corner-domination: ordered initial states stay ordered, so the "
               "full-capacity corner trajectory bounds every start in the box")
    s = caps.copy()
    thresholds = np.zeros(n)
    deadlines = np.full(n, tau)
    if n >= 2:
        for k in range(n - 1, 0, -1):
            rate = bounds.a_n if k == n - 1 else float(bounds.h_funcs[k + 1](s[k + 1]))
            if rate <= 0:
                raise AbsorbingBoxError(
                    f"drain rate for compartment {k + 1} is nonpositive ({rate:g}); "
                    "tau too small or the chain bound vanishes")
            L = float(bounds.refill[k])
            b_k = caps[k] * L / (L + rate)
            lo = max(b_k, float(corner_at_tau[k]))
            if lo >= caps[k] * (1.0 - 1e-9):
                raise AbsorbingBoxError(
                    f"compartment {k + 1} has not entered below capacity by "
                    f"tau={tau:g} (level {lo:g} vs capacity {caps[k]:g}); "
                    "tau too small for these bounds")
            s[k] = lo + s_fraction * (caps[k] - lo)
            thresholds[k] = b_k
    verification = None
    if ensemble > 0:
        rng = np.random.default_rng(seed)
        starts = np.vstack([caps, rng.uniform(0.0, 1.0, size=(ensemble, n)) * caps])
        trajs = integrate_batch(sys, starts, 0.0, 1.5 * tau, opts)
        worst = math.inf
        witness = None
        for traj in trajs:
            mask = traj.times >= tau - 1e-12
            for k in range(1, n):
                margin = float((s[k] - traj.states[mask, k]).min())
                if margin < worst:
                    worst = margin
                    witness = {"compartment": k + 1, "level_margin": margin}
        passed = worst >= -ver_tol
        verification = Verdict(bool(passed), worst, None if passed else witness,
                               len(trajs), "absorbing_box_ensemble")
        if not passed:
            raise AbsorbingBoxError(
                f"ensemble simulation left the computed box (margin {worst:g})")
    return AbsorbingBox(s, thresholds, deadlines, tau, corner, verification, tuple(log))


def chain_bounds_from_system(sys: StructuredSystem, a_n: float,
                             lipschitz: Mapping[str, float] | None = None,
                             h_funcs: Sequence[Callable] | None = None,
                             t_samples: Sequence[float] = (0.0, 1.0, 5.0)) -> tuple:
    """Assemble ChainBounds from declared constants plus estimated refill rates.

    refill L_k = Lip(I_k) + sum over sources j of Lip(f_kj) * sup(g_j); the
    Lipschitz constants are declared (keys "I[k]", "f[i,j]", 1-based) or
    estimated from samples (flagged).
    """
    n = sys.n
    caps = sys.capacities
    lipschitz = dict(lipschitz or {})
    log = []

    def lip_of(key: str, coef, hi: float) -> float:
        if key in lipschitz:
            return float(lipschitz[key])
        val = max(estimate_lipschitz(lambda z, t=t: float(coef(t, z)), 0.0, hi)
                  for t in t_samples)
        log.append(f"Lipschitz constant of {key} estimated as {val:g}")
        return val

    g_sup = np.array([max(float(sys.g[j](t, caps[j])) for t in t_samples)
                      for j in range(n)])
    refill = np.zeros(n)
    for k in range(1, n):
        total = 0.0
        if not sys.inflow[k].is_zero:
            total += lip_of(f"I[{k + 1}]", sys.inflow[k], caps[k])
        for (i, j), coef in sys.pairs.items():
            if i == k:
                total += lip_of(f"f[{i + 1},{j + 1}]", coef, caps[i]) * g_sup[j]
        refill[k] = total
    if h_funcs is None:
        missing = [k for k in range(1, n) if (k, k - 1) not in sys.pairs]
        if missing:
            raise AbsorbingBoxError(
                f"no downstream-chain coefficient into compartment {missing[0] + 1}; "
                "declare h functions explicitly")
        h_funcs = [None] + [(lambda z, c=sys.pairs[(k, k - 1)]: float(c(0.0, z)))
                            for k in range(1, n)]
        log.append("chain lower bounds h_i taken from the coefficients at t=0 "
                   "(declare h functions for time-varying chains)")
    else:
        h_funcs = list(h_funcs)
        if len(h_funcs) != n:
            raise ValueError(f"h_funcs must have length n={n} (index 0 unused)")
    return ChainBounds(a_n, tuple(h_funcs), refill), tuple(log)


# ---------------------------------------------------------------------------
# IES certification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IESOptions:
    tau: float = 10.0
    a_n: float | None = None                 # declared inf of the last outflow
    h_funcs: Sequence[Callable] | None = None
    lipschitz: Mapping[str, float] | None = None
    samples: int = 256
    pair_samples: int = 256
    seed: int = 0
    tol: float = 1e-9
    step: float | None = None
    ensemble: int = 8
    horizon: float | None = None             # time-sampling horizon (default 2*tau)
    s_fraction: float = 0.5                  # where s sits in its admissible interval


@dataclass(frozen=True, eq=False)
class IESReport:
    verdict: str
    absorbing_box: AbsorbingBox | None
    entry_time: float | None
    family: FamilyParams | None
    certificate: LyapunovCertificate | None
    lam: float | None
    gamma: float | None            # includes the exp(lam * tau) pre-entry factor
    assumptions_log: tuple
    worst_margin: float | None = None
    witness: dict | None = None
    seed: int | None = None

    def to_json(self) -> dict:
        return {"schema": "comportal.ies_report/1", "verdict": self.verdict,
                "absorbing_box": self.absorbing_box.s.tolist() if self.absorbing_box else None,
                "entry_time": self.entry_time,
                "family": self.family.to_json() if self.family else None,
                "certificate": self.certificate.to_json() if self.certificate else None,
                "lambda": self.lam, "gamma": self.gamma,
                "assumptions_log": list(self.assumptions_log),
                "worst_margin": self.worst_margin, "witness": self.witness,
                "seed": self.seed}


def _inconclusive(log, stage, witness=None, seed=None, margin=None) -> IESReport:
    return IESReport(INCONCLUSIVE, None, None, None, None, None, None,
                     tuple(log + [f"stage {stage} failed"]), worst_margin=margin,
                     witness=witness, seed=seed)


def certify_IES(sys: StructuredSystem, opts: IESOptions = IESOptions()) -> IESReport:
    """Incremental exponential stability for the structured class.

    Pipeline: (1) sampled cooperativity and nonexpansiveness preconditions;
    (2) absorbing box from the declared chain bounds; (3) family fit on the
    absorbing box, above-diagonal bound widened by the increment coupling
    bound; (4) family certificate; (5) verification of the certificate against
    F(t, y) + D(t, x, y) on sampled ordered pairs. The reported overshoot
    multiplies in exp(lambda * tau) so the envelope covers the pre-entry phase.
    """
    log: list[str] = []
    n = sys.n
    seed = opts.seed
    horizon = opts.horizon if opts.horizon is not None else 2.0 * opts.tau
    ts = _time_grid(horizon)

    tk = check_type_K(sys, t_samples=ts[:5], pair_samples=opts.pair_samples,
                      tol=opts.tol, seed=seed)
    if not tk.passed:
        return _inconclusive(log, "type-K (cooperativity)", tk.witness, seed, tk.worst_margin)
    log.append(f"type-K condition passed at samples (worst margin {tk.worst_margin:g})")
    ne = check_nonexpansive_condition(sys, samples=opts.samples, tol=opts.tol,
                                      seed=seed, t_samples=ts[:5])
    if not ne.passed:
        return _inconclusive(log, "nonexpansiveness", ne.witness, seed, ne.worst_margin)
    log.append(f"nonexpansiveness condition passed at samples (worst margin {ne.worst_margin:g})")

    a_n = opts.a_n
    if a_n is None:
        caps = sys.capacities
        a_n = min(float(sys.f0[n - 1](t, x)) for t in ts
                  for x in np.linspace(0.0, caps[n - 1], 33))
        log.append(f"a_n estimated from samples as {a_n:g} (declare it to certify)")
    if a_n <= opts.tol:
        log.append(f"last-compartment outflow bound a_n = {a_n:g} is not positive")
        return _inconclusive(log, "outflow lower bound", {"a_n": a_n}, seed)

    if n == 1:
        box = None
        tau = 0.0
        fam = FamilyParams(1, 1, (a_n,), 0.0)
        s_space = sys.space
        log.append("single compartment: no absorbing box needed")
    else:
        try:
            chain, chain_log = chain_bounds_from_system(
                sys, a_n, opts.lipschitz, opts.h_funcs)
            log.extend(chain_log)
            box = compute_absorbing_box(sys, opts.tau, chain, step=opts.step,
                                        ensemble=opts.ensemble, seed=seed,
                                        s_fraction=opts.s_fraction)
        except (AbsorbingBoxError, ValueError) as exc:
            return _inconclusive(log, "absorbing box", {"error": str(exc)}, seed)
        log.extend(box.log)
        tau = opts.tau
        s_space = box.space(sys.capacities)
        log.append("absorbing box [0,c_1]x" + "x".join(
            f"[0,{v:.6g}]" for v in box.s[1:]))

        pts = s_space.sample(opts.samples, seed)
        a = np.empty(n)
        a[:] = np.inf
        b_fit = 0.0
        tail_sampled = math.inf
        for t in ts:
            for x in pts:
                F = sys.F_matrix(t, x)
                for i in range(n - 1):
                    a[i] = min(a[i], float(F[i + 1:, i].sum()))
                b_fit = max(b_fit, float(np.triu(F, 1).max()))
                tail_sampled = min(tail_sampled, float(-F[:, n - 1].sum()))
        if np.any(a[:n - 1] <= opts.tol):
            k = int(np.argmin(a[:n - 1]))
            log.append(f"below-diagonal column mass of column {k + 1} is not positive "
                       f"on the absorbing box ({a[k]:g})")
            return _inconclusive(log, "family fit", {"column": k + 1, "mass": a[k]}, seed)
        a[n - 1] = a_n
        if tail_sampled < a_n - opts.tol:
            log.append(f"sampled tail outflow {tail_sampled:g} dips below the declared "
                       f"a_n = {a_n:g}; trusting the declaration is unsound here")
            return _inconclusive(log, "declared a_n", {"sampled": tail_sampled}, seed)
        b_tilde, b_log = increment_coupling_bound(
            sys, opts.lipschitz, g_sup=np.array(
                [max(float(sys.g[j](t, s_space.upper[j])) for t in ts) for j in range(n)]))
        log.extend(b_log)
        fam = FamilyParams(n, n, tuple(a), b_fit + b_tilde)
        log.append(f"family fitted on the absorbing box: a={[f'{v:.4g}' for v in a]}, "
                   f"b={b_fit:.4g}+{b_tilde:.4g} (coupling bound)")

    cert = family_certificate(fam)

    # verify against F(t, y) + D(t, x, y) over sampled ordered pairs in the box
    rng = np.random.default_rng(seed + 1)
    span = s_space.upper - s_space.lower
    worst = math.inf
    witness = None
    max_residual = 0.0
    for _ in range(opts.pair_samples):
        t = float(rng.uniform(0.0, horizon))
        xa = s_space.lower + rng.random(n) * span
        xb = s_space.lower + rng.random(n) * span
        x, y = np.minimum(xa, xb), np.maximum(xa, xb)
        try:
            fact = factor_increment(sys, t, x, y)
        except MonotonicityViolated as exc:
            return _inconclusive(log, "increment factorization", {"error": str(exc)},
                                 seed)
        max_residual = max(max_residual, fact.residual)
        M = sys.F_matrix(t, y) + fact.matrix
        margins = -cert.lam * cert.v - cert.v @ M
        k = int(np.argmin(margins))
        if margins[k] < worst:
            worst = float(margins[k])
            witness = {"t": t, "x": x.tolist(), "y": y.tolist(), "column": k + 1}
    log.append(f"certificate verified on {opts.pair_samples} ordered pairs "
               f"(worst margin {worst:g}, max factorization residual {max_residual:.3g})")
    if worst < -opts.tol:
        return _inconclusive(log, "incremental verification", witness, seed, worst)

    gamma = math.exp(cert.lam * tau) * cert.gamma
    log.append(f"rate {cert.lam:g}; overshoot {gamma:g} includes the exp(lambda*tau) "
               "pre-entry factor (distances are nonincreasing before entry)")
    return IESReport(CERTIFIED_IES, box, tau, fam, cert, cert.lam, gamma,
                     tuple(log), worst_margin=worst, seed=seed)
