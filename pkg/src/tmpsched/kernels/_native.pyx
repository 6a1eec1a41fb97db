# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the simulator timing loop and the planner chain DP.

Semantics mirror ``_fallback.py`` exactly, including tie-breaking.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor, INFINITY

from ._fallback import DeadlockError

cnp.import_array()


def fifo_times(stream_in, dur_in, indptr_in, indices_in):
    cdef cnp.int8_t[:] stream = np.ascontiguousarray(stream_in, dtype=np.int8)
    cdef double[:] dur = np.ascontiguousarray(dur_in, dtype=np.float64)
    cdef cnp.int64_t[:] indptr = np.ascontiguousarray(indptr_in, dtype=np.int64)
    cdef cnp.int64_t[:] indices = np.ascontiguousarray(indices_in, dtype=np.int64)
    cdef Py_ssize_t n = dur.shape[0]
    start_arr = np.zeros(n)
    end_arr = np.zeros(n)
    cdef double[:] start = start_arr
    cdef double[:] end = end_arr
    cdef cnp.uint8_t[:] done = np.zeros(n, dtype=np.uint8)
    cdef cnp.int64_t[:, :] queues = np.zeros((2, n), dtype=np.int64)
    cdef Py_ssize_t qlen[2]
    cdef Py_ssize_t heads[2]
    cdef double free[2]
    cdef Py_ssize_t i, e, d, s, remaining = n
    cdef double t
    cdef bint ready, progressed
    qlen[0] = qlen[1] = 0
    heads[0] = heads[1] = 0
    free[0] = free[1] = 0.0
    for i in range(n):
        s = stream[i]
        queues[s, qlen[s]] = i
        qlen[s] += 1
    while remaining:
        progressed = False
        for s in range(2):
            while heads[s] < qlen[s]:
                i = queues[s, heads[s]]
                t = free[s]
                ready = True
                for e in range(indptr[i], indptr[i + 1]):
                    d = indices[e]
                    if not done[d]:
                        ready = False
                        break
                    if end[d] > t:
                        t = end[d]
                if not ready:
                    break
                start[i] = t
                end[i] = t + dur[i]
                free[s] = end[i]
                done[i] = 1
                heads[s] += 1
                remaining -= 1
                progressed = True
        if not progressed:
            raise DeadlockError("no stream head is ready: cyclic dependencies or FIFO order conflict")
    return start_arr, end_arr


def chain_dp(unary_in, pair_in, weight_in, allowed_in, double peak, double budget, double gran):
    cdef double[:, :] unary = np.ascontiguousarray(unary_in, dtype=np.float64)
    cdef double[:, :, :] pair = np.ascontiguousarray(pair_in, dtype=np.float64)
    cdef double[:, :] weight = np.ascontiguousarray(weight_in, dtype=np.float64)
    cdef cnp.uint8_t[:, :] allowed = np.ascontiguousarray(allowed_in, dtype=np.uint8)
    cdef Py_ssize_t k = unary.shape[0], p = unary.shape[1]
    if k == 0:
        return 0.0, np.zeros(0, dtype=np.int64)
    cdef Py_ssize_t nb = <Py_ssize_t>floor((budget - peak) / gran) + 2 if budget > peak else 1
    cdef double[:, :] obj = np.full((p, nb), np.inf)
    cdef double[:, :] mem = np.zeros((p, nb))
    cdef double[:, :] new_obj = np.full((p, nb), np.inf)
    cdef double[:, :] new_mem = np.zeros((p, nb))
    cdef double[:, :] tmp
    # live bucket range [lo, hi] per degree; buckets outside it are empty
    cdef cnp.int64_t[:] lo = np.full(p, nb, dtype=np.int64)
    cdef cnp.int64_t[:] hi = np.full(p, -1, dtype=np.int64)
    cdef cnp.int64_t[:] new_lo = np.full(p, nb, dtype=np.int64)
    cdef cnp.int64_t[:] new_hi = np.full(p, -1, dtype=np.int64)
    cdef cnp.int64_t[:] itmp
    # parents are only read back along the optimal path, where they were written
    par_j_arr = np.empty((k, p, nb), dtype=np.int64)
    par_b_arr = np.empty((k, p, nb), dtype=np.int64)
    cdef cnp.int64_t[:, :, :] par_j = par_j_arr
    cdef cnp.int64_t[:, :, :] par_b = par_b_arr
    cdef Py_ssize_t v, j, jp, b, tb, bj, bb
    cdef double cum, val, best, base
    for j in range(p):
        if not allowed[0, j]:
            continue
        cum = 0.0 + weight[0, j]
        if cum + peak < budget:
            b = <Py_ssize_t>floor(cum / gran)
            if b < nb:
                obj[j, b] = unary[0, j]
                mem[j, b] = cum
                lo[j] = b
                hi[j] = b
    for v in range(1, k):
        for j in range(p):
            new_lo[j] = nb
            new_hi[j] = -1
            if not allowed[v, j]:
                continue
            for jp in range(p):
                base = pair[v, jp, j] + unary[v, j]
                for b in range(lo[jp], hi[jp] + 1):
                    if obj[jp, b] == INFINITY:
                        continue
                    cum = mem[jp, b] + weight[v, j]
                    if not (cum + peak < budget):
                        continue
                    tb = <Py_ssize_t>floor(cum / gran)
                    if tb >= nb:
                        continue
                    val = obj[jp, b] + base
                    if val < new_obj[j, tb] or (val == new_obj[j, tb] and cum < new_mem[j, tb]):
                        new_obj[j, tb] = val
                        new_mem[j, tb] = cum
                        par_j[v, j, tb] = jp
                        par_b[v, j, tb] = b
                        if tb < new_lo[j]:
                            new_lo[j] = tb
                        if tb > new_hi[j]:
                            new_hi[j] = tb
        # clear the old layer so it can be reused as the next scratch layer
        for j in range(p):
            for b in range(lo[j], hi[j] + 1):
                obj[j, b] = INFINITY
                mem[j, b] = 0.0
        tmp = obj
        obj = new_obj
        new_obj = tmp
        tmp = mem
        mem = new_mem
        new_mem = tmp
        itmp = lo
        lo = new_lo
        new_lo = itmp
        itmp = hi
        hi = new_hi
        new_hi = itmp
    best = INFINITY
    bj = bb = -1
    for j in range(p):
        for b in range(lo[j], hi[j] + 1):
            if obj[j, b] < best:
                best = obj[j, b]
                bj = j
                bb = b
    if bj < 0:
        return np.inf, None
    choice = np.zeros(k, dtype=np.int64)
    j, b = bj, bb
    for v in range(k - 1, -1, -1):
        choice[v] = j
        if v:
            jp = par_j[v, j, b]
            b = par_b[v, j, b]
            j = jp
    return float(best), choice
