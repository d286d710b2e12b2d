# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled integration kernel: stack-program VM + fixed-step RK4 with box projection.

Mirrors kernels._pykernels exactly (same operation order, same step-control
rules) so either backend produces the same trajectories.
"""
from libc.math cimport isfinite, isnan, pow as cpow

import numpy as np

cimport numpy as cnp

BACKEND = "cython"

# opcode values mirrored from comportal.expressions (asserted by tests)
DEF OPC_CONST = 0
DEF OPC_VAR_T = 1
DEF OPC_VAR_X = 2
DEF OPC_ADD = 3
DEF OPC_SUB = 4
DEF OPC_MUL = 5
DEF OPC_DIV = 6
DEF OPC_POW = 7
DEF OPC_NEG = 8
DEF OPC_MIN = 9
DEF OPC_MAX = 10
DEF OPC_CLAMP = 11
DEF OPC_TABLE = 12

DEF STACK_CAP = 64

ERROR_TEXT = {1: "division by zero", 2: "non-finite power", 3: "bad opcode"}


cdef class CompiledPack:
    cdef const cnp.int32_t[::1] codes
    cdef const cnp.int32_t[::1] prog_off
    cdef const double[::1] consts
    cdef const cnp.int32_t[::1] g_idx
    cdef const cnp.int32_t[::1] f0_idx
    cdef const cnp.int32_t[::1] inflow_idx
    cdef const cnp.int32_t[:, ::1] pairs
    cdef const double[::1] tbl_t
    cdef const double[::1] tbl_v
    cdef const cnp.int32_t[::1] tbl_off
    cdef int n
    cdef Py_ssize_t npairs

    def __init__(self, pack):
        self.codes = np.ascontiguousarray(pack.codes, dtype=np.int32)
        self.prog_off = np.ascontiguousarray(pack.prog_off, dtype=np.int32)
        self.consts = np.ascontiguousarray(pack.consts, dtype=np.float64)
        self.g_idx = np.ascontiguousarray(pack.g_idx, dtype=np.int32)
        self.f0_idx = np.ascontiguousarray(pack.f0_idx, dtype=np.int32)
        self.inflow_idx = np.ascontiguousarray(pack.inflow_idx, dtype=np.int32)
        self.pairs = np.ascontiguousarray(pack.pairs.reshape(-1, 3), dtype=np.int32)
        self.tbl_t = np.ascontiguousarray(pack.tbl_t, dtype=np.float64)
        self.tbl_v = np.ascontiguousarray(pack.tbl_v, dtype=np.float64)
        self.tbl_off = np.ascontiguousarray(pack.tbl_off, dtype=np.int32)
        self.n = pack.n
        self.npairs = self.pairs.shape[0]

    cdef double table_eval(self, int tid, double t) noexcept nogil:
        cdef Py_ssize_t a = self.tbl_off[tid]
        cdef Py_ssize_t b = self.tbl_off[tid + 1]
        cdef Py_ssize_t lo, hi, mid
        cdef double slope
        if t <= self.tbl_t[a]:
            return self.tbl_v[a]
        if t >= self.tbl_t[b - 1]:
            return self.tbl_v[b - 1]
        lo = a
        hi = b - 1
        while hi - lo > 1:
            mid = (lo + hi) >> 1
            if self.tbl_t[mid] <= t:
                lo = mid
            else:
                hi = mid
        slope = (self.tbl_v[hi] - self.tbl_v[lo]) / (self.tbl_t[hi] - self.tbl_t[lo])
        return slope * (t - self.tbl_t[lo]) + self.tbl_v[lo]

    cdef double eval_prog(self, int prog, double t, double x, int* err) noexcept nogil:
        cdef double stack[STACK_CAP]
        cdef int sp = 0
        cdef Py_ssize_t k = self.prog_off[prog]
        cdef Py_ssize_t end = self.prog_off[prog + 1]
        cdef int op, arg
        cdef double va, vb, lo_, hi_
        while k < end:
            op = self.codes[k]
            arg = self.codes[k + 1]
            k += 2
            if op == OPC_CONST:
                stack[sp] = self.consts[arg]; sp += 1
            elif op == OPC_VAR_T:
                stack[sp] = t; sp += 1
            elif op == OPC_VAR_X:
                stack[sp] = x; sp += 1
            elif op == OPC_TABLE:
                stack[sp] = self.table_eval(arg, t); sp += 1
            elif op == OPC_NEG:
                stack[sp - 1] = -stack[sp - 1]
            elif op == OPC_CLAMP:
                hi_ = stack[sp - 1]
                lo_ = stack[sp - 2]
                sp -= 2
                va = stack[sp - 1]
                if va < lo_:
                    va = lo_
                if va > hi_:
                    va = hi_
                stack[sp - 1] = va
            else:
                vb = stack[sp - 1]; sp -= 1
                va = stack[sp - 1]
                if op == OPC_ADD:
                    stack[sp - 1] = va + vb
                elif op == OPC_SUB:
                    stack[sp - 1] = va - vb
                elif op == OPC_MUL:
                    stack[sp - 1] = va * vb
                elif op == OPC_DIV:
                    if vb == 0.0:
                        err[0] = 1
                        return 0.0
                    stack[sp - 1] = va / vb
                elif op == OPC_POW:
                    stack[sp - 1] = cpow(va, vb)
                    if not isfinite(stack[sp - 1]):
                        err[0] = 2
                        return 0.0
                elif op == OPC_MIN:
                    stack[sp - 1] = va if va < vb else vb
                elif op == OPC_MAX:
                    stack[sp - 1] = va if va > vb else vb
                else:
                    err[0] = 3
                    return 0.0
        return stack[sp - 1]

    cdef int rhs_row(self, double t, const double[::1] x, double[::1] gbuf,
                     double[::1] q) noexcept nogil:
        cdef int err = 0
        cdef Py_ssize_t i, p
        cdef int pi, pj, pk
        cdef double fij
        for i in range(self.n):
            gbuf[i] = self.eval_prog(self.g_idx[i], t, x[i], &err)
            if err:
                return err
        for i in range(self.n):
            q[i] = 0.0
            if self.inflow_idx[i] >= 0:
                q[i] = q[i] + self.eval_prog(self.inflow_idx[i], t, x[i], &err)
                if err:
                    return err
            if self.f0_idx[i] >= 0:
                q[i] = q[i] - self.eval_prog(self.f0_idx[i], t, x[i], &err) * gbuf[i]
                if err:
                    return err
        for p in range(self.npairs):
            pi = self.pairs[p, 0]
            pj = self.pairs[p, 1]
            pk = self.pairs[p, 2]
            fij = self.eval_prog(pk, t, x[pi], &err)
            if err:
                return err
            q[pi] = q[pi] + fij * gbuf[pj]
            q[pj] = q[pj] - fij * gbuf[pj]
        return 0


cdef int _rhs_batch(CompiledPack cp, double t, double[:, ::1] X, double[:, ::1] Q,
                    double[::1] gbuf) noexcept nogil:
    cdef Py_ssize_t r
    cdef int err
    for r in range(X.shape[0]):
        err = cp.rhs_row(t, X[r], gbuf, Q[r])
        if err:
            return err
    return 0


def eval_program(pack, int prog_index, double t, double x):
    """Evaluate one packed program at scalar (t, x); for equivalence tests."""
    cdef CompiledPack cp = CompiledPack(pack)
    cdef int err = 0
    cdef double out = cp.eval_prog(prog_index, t, x, &err)
    if err:
        raise ArithmeticError(ERROR_TEXT.get(err, "program error"))
    return out


def integrate_structured(pack, x0, double t0, double t1, double h_base,
                         lo, hi, double proj_tol, bint store_derivs=True,
                         long max_steps=5_000_000):
    """Batched fixed-step RK4 with reject-and-halve box handling.

    Returns (times, states, derivs, stats) with states shaped (N, m, n).
    """
    cdef CompiledPack cp = CompiledPack(pack)
    X_arr = np.array(x0, dtype=np.float64, order="C")
    if X_arr.ndim == 1:
        X_arr = X_arr[None, :]
    cdef Py_ssize_t m = X_arr.shape[0]
    cdef Py_ssize_t n = X_arr.shape[1]
    if n != cp.n:
        raise ValueError(f"state dimension {n} != system dimension {cp.n}")
    lo_arr = np.ascontiguousarray(lo, dtype=np.float64)
    hi_arr = np.ascontiguousarray(hi, dtype=np.float64)

    cdef double[:, ::1] X = X_arr
    cdef double[::1] vlo = lo_arr
    cdef double[::1] vhi = hi_arr
    gbuf_arr = np.empty(n, dtype=np.float64)
    K1_arr = np.empty((m, n), dtype=np.float64)
    K2_arr = np.empty((m, n), dtype=np.float64)
    K3_arr = np.empty((m, n), dtype=np.float64)
    K4_arr = np.empty((m, n), dtype=np.float64)
    S_arr = np.empty((m, n), dtype=np.float64)
    Xn_arr = np.empty((m, n), dtype=np.float64)
    cdef double[::1] gbuf = gbuf_arr
    cdef double[:, ::1] K1 = K1_arr
    cdef double[:, ::1] K2 = K2_arr
    cdef double[:, ::1] K3 = K3_arr
    cdef double[:, ::1] K4 = K4_arr
    cdef double[:, ::1] S = S_arr
    cdef double[:, ::1] Xn = Xn_arr
    proj_mass_arr = np.zeros(m, dtype=np.float64)
    cdef double[::1] proj_mass = proj_mass_arr

    cdef Py_ssize_t r, i
    cdef double viol, excess, v
    cdef int err = 0
    cdef long rejected = 0, clamp_events = 0, accepted = 0
    cdef double max_violation_seen = 0.0

    # initial state must sit in the box (within proj_tol; clamped)
    viol = 0.0
    for r in range(m):
        for i in range(n):
            v = X[r, i]
            if not isfinite(v):
                raise ValueError("non-finite initial state")
            if vlo[i] - v > viol:
                viol = vlo[i] - v
            if v - vhi[i] > viol:
                viol = v - vhi[i]
    if viol > proj_tol:
        raise ValueError(f"initial state outside the box by {viol:g}")
    for r in range(m):
        for i in range(n):
            if X[r, i] < vlo[i]:
                X[r, i] = vlo[i]
            elif X[r, i] > vhi[i]:
                X[r, i] = vhi[i]

    cdef double t = t0
    cdef double h_cur = h_base
    cdef double h_floor = h_base * (2.0 ** -40)
    cdef double eps = 1e-12 * max(1.0, abs(t1))
    cdef double h_try, h2, h6

    err = _rhs_batch(cp, t, X, K1, gbuf)
    if err:
        raise ArithmeticError(f"right-hand side failed at t={t}: {ERROR_TEXT.get(err)}")

    times = [t]
    states = [X_arr.copy()]
    derivs = [K1_arr.copy()] if store_derivs else None
    last_err = 0

    while t < t1 - eps:
        if accepted + rejected > max_steps:
            raise ArithmeticError(f"step budget exceeded at t={t}")
        h_try = h_cur if h_cur < (t1 - t) else (t1 - t)
        h2 = 0.5 * h_try
        # K1 is the stored derivative at the current point (reused across retries)
        with nogil:
            err = 0
            for r in range(m):
                for i in range(n):
                    S[r, i] = X[r, i] + h2 * K1[r, i]
            err = _rhs_batch(cp, t + h2, S, K2, gbuf)
            if err == 0:
                for r in range(m):
                    for i in range(n):
                        S[r, i] = X[r, i] + h2 * K2[r, i]
                err = _rhs_batch(cp, t + h2, S, K3, gbuf)
            if err == 0:
                for r in range(m):
                    for i in range(n):
                        S[r, i] = X[r, i] + h_try * K3[r, i]
                err = _rhs_batch(cp, t + h_try, S, K4, gbuf)
            if err == 0:
                h6 = h_try / 6.0
                for r in range(m):
                    for i in range(n):
                        Xn[r, i] = X[r, i] + h6 * (K1[r, i] + 2.0 * K2[r, i]
                                                   + 2.0 * K3[r, i] + K4[r, i])
        viol = 0.0
        if err == 0:
            for r in range(m):
                for i in range(n):
                    v = Xn[r, i]
                    if not isfinite(v):
                        err = 4
                        break
                    if vlo[i] - v > viol:
                        viol = vlo[i] - v
                    if v - vhi[i] > viol:
                        viol = v - vhi[i]
                if err:
                    break
        if err or viol > proj_tol:
            rejected += 1
            last_err = err
            h_cur = 0.5 * h_try
            if h_cur < h_floor:
                what = ERROR_TEXT.get(last_err, "box violation" if last_err == 0 else "non-finite state")
                raise ArithmeticError(
                    f"step size underflow at t={t} ({what}); the system likely leaves the box")
            continue
        if viol > max_violation_seen:
            max_violation_seen = viol
        for r in range(m):
            for i in range(n):
                v = Xn[r, i]
                if v < vlo[i]:
                    proj_mass[r] += vlo[i] - v
                    Xn[r, i] = vlo[i]
                    clamp_events += 1
                elif v > vhi[i]:
                    proj_mass[r] += v - vhi[i]
                    Xn[r, i] = vhi[i]
                    clamp_events += 1
        t += h_try
        for r in range(m):
            for i in range(n):
                X[r, i] = Xn[r, i]
        err = _rhs_batch(cp, t, X, K1, gbuf)
        if err:
            raise ArithmeticError(f"right-hand side failed at t={t}: {ERROR_TEXT.get(err)}")
        accepted += 1
        times.append(t)
        states.append(X_arr.copy())
        if store_derivs:
            derivs.append(K1_arr.copy())
        if h_cur * 2.0 < h_base:
            h_cur = h_cur * 2.0
        else:
            h_cur = h_base

    stats = {
        "rejected_steps": rejected,
        "clamp_events": clamp_events,
        "projected_mass": proj_mass_arr,
        "max_violation": max_violation_seen,
        "accepted_steps": accepted,
    }
    times_arr = np.asarray(times, dtype=np.float64)
    states_arr = np.asarray(states, dtype=np.float64)
    derivs_arr = np.asarray(derivs, dtype=np.float64) if store_derivs else None
    return times_arr, states_arr, derivs_arr, stats
