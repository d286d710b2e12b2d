"""Trajectory integration with box safeguards, plus trajectory-level stability measures.

The default integrator is fixed-step RK4 with reject-and-halve handling of box
exits (exits below the projection tolerance are clamped and logged; larger
ones reject the step). Structured systems run on the compiled kernel when it
is available; everything else goes through the batched numpy driver. An
embedded adaptive pair is available through scipy as an option.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .system_spec import BoxSpace, StructuredSystem, SystemSpec


@dataclass(frozen=True)
class IntegrateOptions:
    step: float | None = None          # None: min(0.01, 0.1/Lipschitz estimate)
    method: str = "rk4"                # rk4 | adaptive
    proj_tol: float = 1e-9
    store_derivs: bool = True
    max_steps: int = 5_000_000
    rtol: float = 1e-8                 # adaptive only
    atol: float = 1e-10


@dataclass(frozen=True, eq=False)
class Trajectory:
    times: np.ndarray
    states: np.ndarray                 # (N, n)
    derivs: np.ndarray | None
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.states.shape[1]

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]

    def sample(self, ts) -> np.ndarray:
        """Dense output: cubic Hermite on the stored grid (linear without derivs)."""
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        if self.derivs is None:
            return np.stack([np.interp(ts, self.times, self.states[:, i])
                             for i in range(self.n)], axis=1)
        idx = np.clip(np.searchsorted(self.times, ts, side="right") - 1, 0,
                      len(self.times) - 2)
        h = self.times[idx + 1] - self.times[idx]
        s = np.where(h > 0, (ts - self.times[idx]) / np.where(h > 0, h, 1.0), 0.0)
        s = np.clip(s, 0.0, 1.0)[:, None]
        hcol = h[:, None]
        x0, x1 = self.states[idx], self.states[idx + 1]
        d0, d1 = self.derivs[idx], self.derivs[idx + 1]
        h00 = 2 * s**3 - 3 * s**2 + 1
        h10 = s**3 - 2 * s**2 + s
        h01 = -2 * s**3 + 3 * s**2
        h11 = s**3 - s**2
        return h00 * x0 + h10 * hcol * d0 + h01 * x1 + h11 * hcol * d1

    def weighted_mass(self, weights=None) -> np.ndarray:
        v = np.ones(self.n) if weights is None else np.asarray(weights, dtype=float)
        return self.states @ v

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t"] + [f"x_{i + 1}" for i in range(self.n)])
            for t, row in zip(self.times, self.states):
                writer.writerow([repr(float(t))] + [repr(float(v)) for v in row])


def default_step(sys, cap: float = 0.01) -> float:
    """min(cap, 0.1 / Lipschitz proxy); the proxy is the largest column-wise
    absolute sum of the flow matrix at a few box points."""
    space = sys.space
    probe_hi = np.where(np.isfinite(space.upper), space.upper, 1.0)
    pts = [space.lower, probe_hi, 0.5 * (space.lower + probe_hi)]
    scale = 0.0
    for x in pts:
        try:
            F = sys.F_matrix(0.0, x)
        except Exception:
            continue
        scale = max(scale, float(np.abs(F).sum(axis=0).max()))
    if scale <= 0:
        return cap
    return min(cap, 0.1 / scale)


def _box_of(sys) -> BoxSpace:
    return sys.space


def integrate_batch(sys, xi_batch, t0: float, t1: float,
                    opts: IntegrateOptions = IntegrateOptions()) -> list:
    """Integrate a batch of initial states on one shared grid.

    Returns one Trajectory per row; all share times and integrator metadata.
    """
    if t1 <= t0:
        raise ValueError("need t1 > t0")
    XI = np.atleast_2d(np.asarray(xi_batch, dtype=float))
    space = _box_of(sys)
    h = opts.step if opts.step is not None else default_step(sys)
    if opts.method == "adaptive":
        return [_integrate_adaptive(sys, xi, t0, t1, opts) for xi in XI]
    if opts.method != "rk4":
        raise ValueError(f"unknown method {opts.method!r}")
    if isinstance(sys, StructuredSystem):
        times, states, derivs, stats = kernels.integrate_structured(
            sys.flat_pack(), XI, t0, t1, h, space.lower, space.upper,
            opts.proj_tol, opts.store_derivs, opts.max_steps)
        backend = kernels.BACKEND
    else:
        times, states, derivs, stats = kernels.integrate_callable(
            sys.rhs, XI, t0, t1, h, space.lower, space.upper,
            opts.proj_tol, opts.store_derivs, opts.max_steps)
        backend = "python"
    meta = {"method": "rk4", "step": h, "proj_tol": opts.proj_tol,
            "backend": backend,
            "rejected_steps": int(stats["rejected_steps"]),
            "clamp_events": int(stats["clamp_events"]),
            "max_violation": float(stats["max_violation"])}
    out = []
    for r in range(XI.shape[0]):
        meta_r = dict(meta, projected_mass=float(stats["projected_mass"][r]))
        out.append(Trajectory(times, states[:, r, :],
                              derivs[:, r, :] if derivs is not None else None, meta_r))
    return out


def integrate(sys, xi, t0: float, t1: float,
              opts: IntegrateOptions = IntegrateOptions()) -> Trajectory:
    xi = np.asarray(xi, dtype=float)
    if xi.ndim != 1:
        raise ValueError("integrate takes a single state; use integrate_batch")
    return integrate_batch(sys, xi[None, :], t0, t1, opts)[0]


def _integrate_adaptive(sys, xi, t0, t1, opts: IntegrateOptions) -> Trajectory:
    from scipy.integrate import solve_ivp

    space = _box_of(sys)

    def fun(t, y):
        return sys.rhs(t, y[None, :])[0]

    sol = solve_ivp(fun, (t0, t1), np.asarray(xi, dtype=float), method="RK45",
                    rtol=opts.rtol, atol=opts.atol, dense_output=False)
    if not sol.success:
        raise ArithmeticError(f"adaptive integration failed: {sol.message}")
    states = sol.y.T.copy()
    low = np.maximum(space.lower - states, 0.0)
    high = np.maximum(states - space.upper, 0.0)
    viol = max(float(low.max(initial=0.0)), float(high.max(initial=0.0)))
    if viol > opts.proj_tol * 100:
        raise ArithmeticError(f"adaptive solution leaves the box by {viol:g}")
    states = np.clip(states, space.lower, space.upper)
    derivs = np.stack([fun(t, x) for t, x in zip(sol.t, states)])
    meta = {"method": "adaptive-rk45", "rtol": opts.rtol, "atol": opts.atol,
            "projected_mass": float(low.sum() + high.sum()),
            "clamp_events": int(np.count_nonzero(low) + np.count_nonzero(high)),
            "max_violation": viol, "backend": "scipy"}
    return Trajectory(sol.t.copy(), states, derivs, meta)


# ---------------------------------------------------------------------------
# Trajectory measurements
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DecayFit:
    gamma_hat: float
    lambda_hat: float
    residual: float
    window: tuple
    exact_zero: bool = False

    def to_json(self) -> dict:
        return {"gamma_hat": self.gamma_hat, "lambda_hat": self.lambda_hat,
                "residual": self.residual, "window": list(self.window),
                "exact_zero": self.exact_zero}


def measure_norm_decay(traj: Trajectory, weights=None,
                       window: tuple = (0.2, 1.0)) -> DecayFit:
    """Least-squares fit of log(weighted mass) over a tail window.

    The window is given as fractions of the horizon (default drops the first
    20% as transient). Returns the fitted overshoot gamma (relative to the
    initial mass) and decay rate lambda. A measure that hits exact zero is fit
    on the prefix before the zero; an identically-zero measure is flagged.
    """
    m = traj.weighted_mass(weights)
    times = traj.times
    if np.all(m == 0.0):
        return DecayFit(0.0, 0.0, 0.0, window, exact_zero=True)
    zero_idx = np.nonzero(m <= 0.0)[0]
    if zero_idx.size:
        times = times[:zero_idx[0]]
        m = m[:zero_idx[0]]
    t_lo = times[0] + window[0] * (times[-1] - times[0])
    t_hi = times[0] + window[1] * (times[-1] - times[0])
    mask = (times >= t_lo) & (times <= t_hi)
    if mask.sum() < 2:
        mask = np.ones_like(times, dtype=bool)
    logs = np.log(m[mask])
    A = np.stack([np.ones(mask.sum()), -times[mask]], axis=1)
    (c, lam), *_ = np.linalg.lstsq(A, logs, rcond=None)
    fitted = A @ np.array([c, lam])
    residual = float(np.sqrt(np.mean((fitted - logs) ** 2)))
    m0 = float(traj.weighted_mass(weights)[0])
    gamma = float(np.exp(c) / m0) if m0 > 0 else float("nan")
    return DecayFit(gamma, float(lam), residual, window)


def pairwise_distance(traj_a: Trajectory, traj_b: Trajectory):
    """1-norm distance series; re-interpolates b onto a's grid if they differ."""
    if traj_a.states.shape[1] != traj_b.states.shape[1]:
        raise ValueError("trajectories have different state dimensions")
    if len(traj_a.times) == len(traj_b.times) and np.array_equal(traj_a.times, traj_b.times):
        states_b = traj_b.states
    else:
        states_b = traj_b.sample(traj_a.times)
    dist = np.abs(traj_a.states - states_b).sum(axis=1)
    return traj_a.times.copy(), dist


@dataclass(frozen=True)
class OrderingVerdict:
    passed: bool
    worst_margin: float
    witness: dict | None

    def __bool__(self):
        return self.passed


def check_ordering(traj_a: Trajectory, traj_b: Trajectory, tol: float = 1e-9) -> OrderingVerdict:
    """Componentwise traj_a <= traj_b at every shared grid point (within tol)."""
    times, _ = pairwise_distance(traj_a, traj_b)  # validates shapes, aligns grids
    if np.array_equal(traj_a.times, traj_b.times):
        diff = traj_b.states - traj_a.states
    else:
        diff = traj_b.sample(traj_a.times) - traj_a.states
    k_flat = int(np.argmin(diff))
    k, i = np.unravel_index(k_flat, diff.shape)
    worst = float(diff[k, i])
    passed = worst >= -tol
    witness = None if passed else {"t": float(times[k]), "component": int(i) + 1,
                                   "gap": worst}
    return OrderingVerdict(passed, worst, witness)


def bracket_pair(a1, a2):
    """Componentwise min/max envelope of two states: the ordered pair whose
    trajectories sandwich both originals in a cooperative system."""
    a1 = np.asarray(a1, dtype=float)
    a2 = np.asarray(a2, dtype=float)
    return np.minimum(a1, a2), np.maximum(a1, a2)


def distance_to_gnuplot(times, dist, path) -> None:
    with open(path, "w") as fh:
        fh.write("# t  distance_1norm\n")
        for t, d in zip(times, dist):
            fh.write(f"{t!r} {d!r}\n")
