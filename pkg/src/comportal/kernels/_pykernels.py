"""Pure-Python/numpy integration kernels (fallback backend).

Semantics are kept in lockstep with the compiled kernel in `_ckernels.pyx`:
identical operation order inside the right-hand side, identical RK4
combination expressions, and identical step-control rules, so a trajectory
computed here matches one computed by the compiled kernel.

`integrate_callable` is the generic batched driver; it is also used (through
`comportal.ode_engine`) for linear systems and arbitrary Python right-hand
sides regardless of which backend serves structured systems.
"""
from __future__ import annotations

import numpy as np

from ..expressions import (
    OP_ADD, OP_CLAMP, OP_CONST, OP_DIV, OP_MAX, OP_MIN, OP_MUL, OP_NEG,
    OP_POW, OP_SUB, OP_TABLE, OP_VAR_T, OP_VAR_X, EvaluationError,
)
from .pack import FlatPack

BACKEND = "python"


def _table_eval(pack: FlatPack, tid: int, t: float) -> float:
    a, b = int(pack.tbl_off[tid]), int(pack.tbl_off[tid + 1])
    ts = pack.tbl_t
    vs = pack.tbl_v
    if t <= ts[a]:
        return vs[a]
    if t >= ts[b - 1]:
        return vs[b - 1]
    j = a + int(np.searchsorted(ts[a:b], t, side="right")) - 1
    slope = (vs[j + 1] - vs[j]) / (ts[j + 1] - ts[j])
    return slope * (t - ts[j]) + vs[j]


def _run_flat(pack: FlatPack, prog: int, t: float, x):
    """Run packed program `prog` at time t; x is a scalar or an (m,) vector."""
    codes = pack.codes
    consts = pack.consts
    k = int(pack.prog_off[prog])
    end = int(pack.prog_off[prog + 1])
    stack = []
    while k < end:
        op = codes[k]
        arg = codes[k + 1]
        k += 2
        if op == OP_CONST:
            stack.append(consts[arg])
        elif op == OP_VAR_T:
            stack.append(t)
        elif op == OP_VAR_X:
            stack.append(x)
        elif op == OP_TABLE:
            stack.append(_table_eval(pack, arg, t))
        elif op == OP_NEG:
            stack[-1] = -stack[-1]
        elif op == OP_CLAMP:
            hi = stack.pop()
            lo = stack.pop()
            stack[-1] = np.minimum(np.maximum(stack[-1], lo), hi)
        else:
            b = stack.pop()
            a = stack[-1]
            if op == OP_ADD:
                stack[-1] = a + b
            elif op == OP_SUB:
                stack[-1] = a - b
            elif op == OP_MUL:
                stack[-1] = a * b
            elif op == OP_DIV:
                if np.any(b == 0.0):
                    raise EvaluationError("division by zero")
                stack[-1] = a / b
            elif op == OP_POW:
                out = a ** b
                if not np.all(np.isfinite(out)):
                    raise EvaluationError("non-finite power")
                stack[-1] = out
            elif op == OP_MIN:
                stack[-1] = np.minimum(a, b)
            elif op == OP_MAX:
                stack[-1] = np.maximum(a, b)
            else:
                raise EvaluationError(f"bad opcode {op}")
    return stack[-1]


def eval_program(pack: FlatPack, prog_index: int, t: float, x: float) -> float:
    try:
        return float(_run_flat(pack, prog_index, t, x))
    except EvaluationError as exc:
        raise ArithmeticError(str(exc)) from None


def structured_rhs(pack: FlatPack, t: float, X: np.ndarray) -> np.ndarray:
    """Mass-balance right-hand side of the structured compartmental class."""
    m, n = X.shape
    G = np.empty((m, n))
    for i in range(n):
        G[:, i] = _run_flat(pack, pack.g_idx[i], t, X[:, i])
    Q = np.zeros((m, n))
    for i in range(n):
        if pack.inflow_idx[i] >= 0:
            Q[:, i] = Q[:, i] + _run_flat(pack, pack.inflow_idx[i], t, X[:, i])
        if pack.f0_idx[i] >= 0:
            Q[:, i] = Q[:, i] - _run_flat(pack, pack.f0_idx[i], t, X[:, i]) * G[:, i]
    for p in range(pack.pairs.shape[0]):
        i, j, prog = (int(v) for v in pack.pairs[p])
        fij = _run_flat(pack, prog, t, X[:, i])
        Q[:, i] = Q[:, i] + fij * G[:, j]
        Q[:, j] = Q[:, j] - fij * G[:, j]
    return Q


def integrate_callable(rhs, x0, t0: float, t1: float, h_base: float, lo, hi,
                       proj_tol: float, store_derivs: bool = True,
                       max_steps: int = 5_000_000,
                       reject_exceptions=(EvaluationError,)):
    """Batched fixed-step RK4 with reject-and-halve box handling.

    `rhs(t, X)` maps an (m, n) state batch to its (m, n) derivative. Steps
    whose result leaves the box by more than `proj_tol` (or goes non-finite,
    or raises one of `reject_exceptions`) are rejected and retried at half
    step; sub-`proj_tol` exits are clamped onto the box and logged.
    """
    X = np.array(x0, dtype=np.float64, order="C")
    if X.ndim == 1:
        X = X[None, :]
    m, n = X.shape
    lo = np.ascontiguousarray(lo, dtype=np.float64)
    hi = np.ascontiguousarray(hi, dtype=np.float64)
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite initial state")
    viol = max(float(np.max(lo - X, initial=0.0)), float(np.max(X - hi, initial=0.0)))
    if viol > proj_tol:
        raise ValueError(f"initial state outside the box by {viol:g}")
    X = np.clip(X, lo, hi)

    t = t0
    h_cur = h_base
    h_floor = h_base * 2.0 ** -40
    eps = 1e-12 * max(1.0, abs(t1))
    rejected = 0
    clamp_events = 0
    accepted = 0
    max_violation_seen = 0.0
    proj_mass = np.zeros(m)

    K1 = np.asarray(rhs(t, X), dtype=np.float64)
    times = [t]
    states = [X.copy()]
    derivs = [K1.copy()] if store_derivs else None

    while t < t1 - eps:
        if accepted + rejected > max_steps:
            raise ArithmeticError(f"step budget exceeded at t={t}")
        h_try = h_cur if h_cur < (t1 - t) else (t1 - t)
        h2 = 0.5 * h_try
        failure = None
        try:
            K2 = rhs(t + h2, X + h2 * K1)
            K3 = rhs(t + h2, X + h2 * K2)
            K4 = rhs(t + h_try, X + h_try * K3)
            Xn = X + (h_try / 6.0) * (K1 + 2.0 * K2 + 2.0 * K3 + K4)
        except reject_exceptions as exc:
            failure = str(exc)
            Xn = None
        if Xn is not None and not np.all(np.isfinite(Xn)):
            failure = "non-finite state"
        if failure is None:
            viol = max(float(np.max(lo - Xn, initial=0.0)),
                       float(np.max(Xn - hi, initial=0.0)))
            if viol > proj_tol:
                failure = f"box violation {viol:g}"
        if failure is not None:
            rejected += 1
            h_cur = 0.5 * h_try
            if h_cur < h_floor:
                raise ArithmeticError(
                    f"step size underflow at t={t} ({failure}); "
                    "the system likely leaves the box")
            continue
        if viol > max_violation_seen:
            max_violation_seen = viol
        low_excess = np.maximum(lo - Xn, 0.0)
        high_excess = np.maximum(Xn - hi, 0.0)
        n_clamped = int(np.count_nonzero(low_excess) + np.count_nonzero(high_excess))
        if n_clamped:
            clamp_events += n_clamped
            proj_mass += low_excess.sum(axis=1) + high_excess.sum(axis=1)
            Xn = np.clip(Xn, lo, hi)
        t += h_try
        X = Xn
        K1 = np.asarray(rhs(t, X), dtype=np.float64)
        accepted += 1
        times.append(t)
        states.append(X.copy())
        if store_derivs:
            derivs.append(K1.copy())
        h_cur = h_cur * 2.0 if h_cur * 2.0 < h_base else h_base

    stats = {
        "rejected_steps": rejected,
        "clamp_events": clamp_events,
        "projected_mass": proj_mass,
        "max_violation": max_violation_seen,
        "accepted_steps": accepted,
    }
    times_arr = np.asarray(times, dtype=np.float64)
    states_arr = np.asarray(states, dtype=np.float64)
    derivs_arr = np.asarray(derivs, dtype=np.float64) if store_derivs else None
    return times_arr, states_arr, derivs_arr, stats


def integrate_structured(pack: FlatPack, x0, t0, t1, h_base, lo, hi, proj_tol,
                         store_derivs=True, max_steps=5_000_000):
    return integrate_callable(lambda t, X: structured_rhs(pack, t, X),
                              x0, t0, t1, h_base, lo, hi, proj_tol,
                              store_derivs=store_derivs, max_steps=max_steps)
