"""Flattened program-pack layout consumed by the integration kernels.

A structured system's per-compartment coefficients compile to stack programs
(`expressions.Program`). For the kernels those are concatenated into flat
arrays: constant-pool indices are rebased so every program indexes one shared
pool, and sampled-signal tables are packed into flat time/value arrays.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..expressions import OP_CONST, Program, Table


@dataclass
class FlatPack:
    n: int
    codes: np.ndarray      # int32, all programs concatenated as (op, arg) pairs
    prog_off: np.ndarray   # int32, len P+1, offsets into codes (in int32 units)
    consts: np.ndarray     # float64 shared pool (args already rebased)
    g_idx: np.ndarray      # int32[n], program index per compartment (required)
    f0_idx: np.ndarray     # int32[n], -1 for identically zero
    inflow_idx: np.ndarray  # int32[n], -1 for identically zero
    pairs: np.ndarray      # int32[npairs, 3]: (i, j, program index), row i fed from j
    tbl_t: np.ndarray      # float64 flat table times
    tbl_v: np.ndarray      # float64 flat table values
    tbl_off: np.ndarray    # int32, len T+1


def build_flat_pack(n: int,
                    g: Sequence[Program],
                    f0: Sequence[Program | None],
                    inflow: Sequence[Program | None],
                    pairs: Sequence[tuple[int, int, Program]],
                    tables: Sequence[Table] = ()) -> FlatPack:
    programs: list[Program] = []

    def register(prog: Program | None) -> int:
        if prog is None:
            return -1
        programs.append(prog)
        return len(programs) - 1

    g_idx = np.asarray([register(p) for p in g], dtype=np.int32)
    f0_idx = np.asarray([register(p) for p in f0], dtype=np.int32)
    inflow_idx = np.asarray([register(p) for p in inflow], dtype=np.int32)
    pair_rows = []
    for i, j, prog in pairs:
        if i == j:
            raise ValueError("pair coefficients need i != j")
        pair_rows.append((i, j, register(prog)))
    pairs_arr = np.asarray(pair_rows, dtype=np.int32).reshape(len(pair_rows), 3)

    codes_parts = []
    consts_parts = []
    prog_off = [0]
    const_base = 0
    for prog in programs:
        codes = prog.codes.copy()
        for k in range(0, len(codes), 2):
            if codes[k] == OP_CONST:
                codes[k + 1] += const_base
        codes_parts.append(codes)
        consts_parts.append(prog.consts)
        const_base += len(prog.consts)
        prog_off.append(prog_off[-1] + len(codes))

    tbl_t_parts, tbl_v_parts, tbl_off = [], [], [0]
    for table in tables:
        tbl_t_parts.append(table.ts)
        tbl_v_parts.append(table.vals)
        tbl_off.append(tbl_off[-1] + len(table.ts))

    def cat(parts, dtype):
        return np.concatenate(parts).astype(dtype) if parts else np.zeros(0, dtype=dtype)

    return FlatPack(
        n=n,
        codes=cat(codes_parts, np.int32),
        prog_off=np.asarray(prog_off, dtype=np.int32),
        consts=cat(consts_parts, np.float64),
        g_idx=g_idx,
        f0_idx=f0_idx,
        inflow_idx=inflow_idx,
        pairs=pairs_arr,
        tbl_t=cat(tbl_t_parts, np.float64),
        tbl_v=cat(tbl_v_parts, np.float64),
        tbl_off=np.asarray(tbl_off, dtype=np.int32),
    )
