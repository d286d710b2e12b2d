"""Traffic Reaction Model: flux-decomposition ODE scheme plus the state estimator.

The scheme advances per-segment densities by
``rho_i' = rho_{i-1} h(rho_i) - rho_i h(rho_{i+1})`` on n interior segments of
unit length, with measured boundary densities rho_0(t) and rho_{n+1}(t) and a
nonincreasing speed-like factor h vanishing at capacity. That is exactly the
structured compartmental class: g is the identity, segment i-1 feeds segment i
with coefficient h(x_i), the last segment leaks at rate h(rho_{n+1}(t)), and
the upstream boundary enters as the inflow rho_0(t) h(x_1) (which vanishes at
capacity, keeping the box invariant).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .expressions import Bin, Expression, Table, parse_expression
from .ode_engine import IntegrateOptions, Trajectory, integrate_batch, pairwise_distance
from .stability_pipeline import CERTIFIED_IES, IESOptions, IESReport, certify_IES
from .system_spec import Coefficient, StructuredSystem, check_monotonicity, estimate_lipschitz


@dataclass(frozen=True)
class Signal:
    """Boundary density: a closed-form expression of t, or a sampled series."""

    expr: Expression | None = None
    table: Table | None = None

    @staticmethod
    def from_value(value, name: str = "signal") -> "Signal":
        if isinstance(value, Signal):
            return value
        if isinstance(value, Table):
            return Signal(table=value)
        if isinstance(value, Expression):
            return Signal(expr=value)
        if isinstance(value, (int, float)):
            return Signal(expr=Expression.constant(float(value)))
        return Signal(expr=parse_expression(str(value)))

    @staticmethod
    def from_csv(path, name: str) -> "Signal":
        """Sampled series from CSV with header "t,rho" (linear interpolation)."""
        ts, vals = [], []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if [c.strip().lower() for c in header[:2]] != ["t", "rho"]:
                raise ValueError(f"expected header 't,rho' in {path}, got {header}")
            for row in reader:
                if not row:
                    continue
                ts.append(float(row[0]))
                vals.append(float(row[1]))
        return Signal(table=Table(name, np.asarray(ts), np.asarray(vals)))

    def expression(self) -> Expression:
        if self.expr is not None:
            return self.expr
        return Expression.sampled(self.table.name)

    def tables(self) -> dict:
        return {} if self.table is None else {self.table.name: self.table}

    def __call__(self, t, constants: Mapping[str, float] | None = None):
        if self.table is not None:
            return float(self.table(t))
        env = dict(constants or {})
        env["t"] = t
        return float(self.expr(env))


class TRMConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TRMConfig:
    """Scheme configuration. Segment length is fixed at 1 km: the update rule is
    taken literally, and other lengths amount to rescaling h."""

    n: int
    rho_max: float
    h: Expression
    boundary_in: Signal    # upstream density rho_0(t)
    boundary_out: Signal   # downstream density rho_{n+1}(t)
    constants: dict = field(default_factory=dict)
    lipschitz_h: float | None = None
    horizon_hint: float = 50.0

    @staticmethod
    def build(n: int, rho_max: float, h, boundary_in, boundary_out,
              constants: Mapping[str, float] | None = None,
              lipschitz_h: float | None = None,
              horizon_hint: float = 50.0) -> "TRMConfig":
        h_expr = h if isinstance(h, Expression) else parse_expression(str(h))
        return TRMConfig(int(n), float(rho_max), h_expr,
                         Signal.from_value(boundary_in, "rho_in"),
                         Signal.from_value(boundary_out, "rho_out"),
                         dict(constants or {}), lipschitz_h, horizon_hint)

    def h_variable(self) -> str:
        free = self.h.variables() - set(self.constants) - {"t"}
        if len(free) != 1:
            raise TRMConfigError(
                f"h must have exactly one free variable (the density), got {sorted(free)}")
        return next(iter(free))

    def h_value(self, z: float) -> float:
        env = dict(self.constants)
        env[self.h_variable()] = z
        return float(self.h(env))

    def validate(self, samples: int = 257, tol: float = 1e-9) -> None:
        var = self.h_variable()
        hc = self.h_value(self.rho_max)
        if abs(hc) > tol:
            raise TRMConfigError(f"h({self.rho_max:g}) = {hc:g}, expected 0 at capacity")
        mono = check_monotonicity(self.h_value, 0.0, self.rho_max,
                                  "nonincreasing", samples)
        if not mono.passed:
            raise TRMConfigError(
                f"h must be nonincreasing on [0, {self.rho_max:g}]; violated near "
                f"x={mono.witness['x']:g}")
        for name, sig in (("rho_0", self.boundary_in), ("rho_{n+1}", self.boundary_out)):
            ts = np.linspace(0.0, self.horizon_hint, samples)
            vals = np.array([sig(t, self.constants) for t in ts])
            if vals.min() < -tol or vals.max() > self.rho_max + tol:
                raise TRMConfigError(
                    f"boundary signal {name} leaves [0, {self.rho_max:g}] "
                    f"(range [{vals.min():g}, {vals.max():g}] at samples)")
        _ = var


def build_trm(cfg: TRMConfig) -> StructuredSystem:
    """Assemble the structured system for the scheme (validates the config)."""
    cfg.validate()
    n = cfg.n
    var = cfg.h_variable()
    h_of_x = cfg.h.substitute(var, Expression.parse("x"))
    out_expr = cfg.h.substitute(var, cfg.boundary_out.expression())
    in_expr = cfg.boundary_in.expression()
    inflow_root = Bin("*", in_expr.root, h_of_x.root)
    inflow_expr = Expression(inflow_root, f"({in_expr.source})*({h_of_x.source})")

    tables_out = cfg.boundary_out.tables()
    tables_in = cfg.boundary_in.tables()

    g = [Coefficient(Expression.parse("x")) for _ in range(n)]
    f0 = [Coefficient.zero() for _ in range(n)]
    f0[n - 1] = Coefficient(out_expr, constants=cfg.constants, tables=tables_out)
    inflow = [Coefficient.zero() for _ in range(n)]
    inflow[0] = Coefficient(inflow_expr, constants=cfg.constants, tables=tables_in)
    pairs = {(k, k - 1): Coefficient(h_of_x, constants=cfg.constants)
             for k in range(1, n)}

    lip_h = cfg.lipschitz_h
    estimated = lip_h is None
    if estimated:
        lip_h = estimate_lipschitz(cfg.h_value, 0.0, cfg.rho_max)
    lipschitz = {f"f[{k + 1},{k}]": lip_h for k in range(1, n)}
    meta = {"kind": "trm", "rho_max": cfg.rho_max, "h_source": cfg.h.source,
            "lipschitz_h": lip_h, "lipschitz_h_estimated": estimated}
    return StructuredSystem(n, np.full(n, cfg.rho_max), g, f0, inflow, pairs,
                            declared_lipschitz=lipschitz, meta=meta)


@dataclass(frozen=True)
class IESConditions:
    passed: bool
    a_n: float | None
    epsilon: float | None
    boundary_sup: float
    h_interior_min: float
    log: tuple

    def to_json(self) -> dict:
        return {"passed": self.passed, "a_n": self.a_n, "epsilon": self.epsilon,
                "boundary_sup": self.boundary_sup,
                "h_interior_min": self.h_interior_min, "log": list(self.log)}


def check_ies_conditions(cfg: TRMConfig, epsilon: float | None = None,
                         horizon: float | None = None, samples: int = 1025,
                         tol: float = 1e-9) -> IESConditions:
    """The two incremental-stability conditions for the scheme: the downstream
    boundary stays at least epsilon below capacity, and h is positive strictly
    inside [0, capacity). On a pass the last-segment outflow admits the lower
    bound a_n = h(capacity - epsilon) > 0, since h is nonincreasing."""
    log = []
    horizon = horizon if horizon is not None else cfg.horizon_hint
    ts = np.linspace(0.0, horizon, samples)
    out_vals = np.array([cfg.boundary_out(t, cfg.constants) for t in ts])
    sup_out = float(out_vals.max())
    if epsilon is None:
        epsilon = cfg.rho_max - sup_out
        log.append(f"epsilon inferred from the sampled boundary: {epsilon:g}")
    ok_boundary = sup_out <= cfg.rho_max - epsilon + tol and epsilon > tol
    if not ok_boundary:
        log.append(f"downstream boundary reaches {sup_out:g}; no positive epsilon "
                   f"keeps it {epsilon:g} below capacity {cfg.rho_max:g}")
    zs = np.linspace(0.0, cfg.rho_max * (1.0 - 1e-9), samples)
    h_min = float(min(cfg.h_value(z) for z in zs))
    ok_h = h_min > 0.0  # open condition: h may tend to 0 at capacity itself
    if not ok_h:
        log.append(f"h is not positive on [0, capacity): sampled min {h_min:g}")
    a_n = None
    if ok_boundary and ok_h:
        a_n = cfg.h_value(cfg.rho_max - epsilon)
        log.append(f"a_n = h(capacity - epsilon) = {a_n:g}; h nonincreasing makes "
                   "this a true lower bound on the last-segment outflow")
    return IESConditions(bool(ok_boundary and ok_h and (a_n or 0) > tol),
                         a_n, epsilon if ok_boundary else None, sup_out, h_min, tuple(log))


@dataclass(frozen=True, eq=False)
class EstimatorRun:
    truth: Trajectory
    estimate: Trajectory
    times: np.ndarray
    error: np.ndarray
    envelope: np.ndarray | None
    ies_report: IESReport | None
    conditions: IESConditions
    truth_seed: int

    @property
    def initial_error(self) -> float:
        return float(self.error[0])

    def convergence_time(self, ratio: float = 1e-3) -> float | None:
        """First grid time with error below ratio * initial error."""
        target = ratio * self.initial_error
        idx = np.nonzero(self.error <= target)[0]
        return float(self.times[idx[0]]) if idx.size else None

    def certified_time_bound(self, ratio: float = 1e-3) -> float | None:
        if self.ies_report is None or self.ies_report.lam is None:
            return None
        return math.log(self.ies_report.gamma / ratio) / self.ies_report.lam

    def to_json(self) -> dict:
        return {"schema": "comportal.estimator_run/1",
                "truth_seed": self.truth_seed,
                "initial_error": self.initial_error,
                "final_error": float(self.error[-1]),
                "convergence_time_1e-3": self.convergence_time(),
                "certified_time_bound_1e-3": self.certified_time_bound(),
                "certified": self.ies_report is not None
                             and self.ies_report.verdict == CERTIFIED_IES,
                "conditions": self.conditions.to_json()}


def run_estimator(cfg: TRMConfig, truth_seed: int = 0, estimate_init=None,
                  horizon: float = 150.0, step: float | None = None,
                  ies_opts: IESOptions | None = None,
                  skip_certification: bool = False) -> EstimatorRun:
    """Simulate an unknown-initial-condition plant and an estimator copy.

    The truth starts from a seeded uniform state, the estimate from
    `estimate_init` (default all-zero); both see the same boundary signals.
    When the incremental-stability conditions hold, the certified envelope
    gamma * exp(-lambda t) * initial_error is attached; otherwise the run
    proceeds with a warning in the log (convergence not certified).
    """
    sys = build_trm(cfg)
    conditions = check_ies_conditions(cfg)
    report = None
    if conditions.passed and not skip_certification:
        opts = ies_opts if ies_opts is not None else IESOptions()
        if opts.a_n is None:
            opts = IESOptions(**{**opts.__dict__, "a_n": conditions.a_n,
                                 "lipschitz": sys.declared_lipschitz})
        report = certify_IES(sys, opts)
    rng = np.random.default_rng(truth_seed)
    truth0 = rng.uniform(0.0, cfg.rho_max, size=cfg.n)
    est0 = (np.zeros(cfg.n) if estimate_init is None
            else np.asarray(estimate_init, dtype=float))
    trajs = integrate_batch(sys, np.vstack([truth0, est0]), 0.0, horizon,
                            IntegrateOptions(step=step if step is not None else 0.02))
    truth, estimate = trajs
    times, error = pairwise_distance(truth, estimate)
    envelope = None
    if report is not None and report.verdict == CERTIFIED_IES:
        envelope = report.gamma * np.exp(-report.lam * times) * error[0]
    return EstimatorRun(truth, estimate, times, error, envelope, report,
                        conditions, truth_seed)


def greenshields(vf: float = 1.0, rho_max: float = 1.0) -> tuple:
    """Affine speed factor vf*(1 - z/rho_max): source text and exact constants."""
    return "vf*(1 - x/rho_max)", {"vf": vf, "rho_max": rho_max}, vf / rho_max
