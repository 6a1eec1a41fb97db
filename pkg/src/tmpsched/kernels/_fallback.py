"""Pure-Python/numpy versions of the hot kernels.

Both functions must return bit-identical results to the compiled versions in
``_native.pyx``; the kernel tests compare them on random inputs.
"""

from __future__ import annotations

import numpy as np


class DeadlockError(RuntimeError):
    pass


def fifo_times(stream, dur, indptr, indices):
    """Start/end times for ops executed FIFO per stream in issue order.

    ``stream[i]`` is 0 (compute) or 1 (comm); op ``i`` waits for the previous
    op on its stream and for every op in ``indices[indptr[i]:indptr[i+1]]``.
    """
    n = len(dur)
    start = np.zeros(n)
    end = np.zeros(n)
    done = np.zeros(n, dtype=bool)
    queues = [[i for i in range(n) if stream[i] == s] for s in (0, 1)]
    heads = [0, 0]
    free = [0.0, 0.0]
    remaining = n
    while remaining:
        progressed = False
        for s in (0, 1):
            q = queues[s]
            while heads[s] < len(q):
                i = q[heads[s]]
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
                done[i] = True
                heads[s] += 1
                remaining -= 1
                progressed = True
        if not progressed:
            raise DeadlockError("no stream head is ready: cyclic dependencies or FIFO order conflict")
    return start, end


def chain_dp(unary, pair, weight, allowed, peak, budget, gran):
    """Min-cost degree assignment on a chain under a memory budget.

    Objective: ``sum_v unary[v, j_v] + sum_{v>=1} pair[v, j_{v-1}, j_v]``.
    Memory: ``(w_0 + w_1 + ...) + peak < budget`` accumulated left to right.
    Labels are bucketed by ``floor(memory / gran)``; each bucket keeps the
    cheapest label (ties: less memory, then smaller predecessor degree, then
    smaller predecessor bucket).  Returns ``(objective, choices)`` or
    ``(inf, None)`` when nothing fits.
    """
    unary = np.asarray(unary, dtype=np.float64)
    pair = np.asarray(pair, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    allowed = np.asarray(allowed, dtype=bool)
    k, p = unary.shape
    if k == 0:
        return 0.0, np.zeros(0, dtype=np.int64)
    nb = int((budget - peak) // gran) + 2 if budget > peak else 1
    obj = np.full((p, nb), np.inf)
    mem = np.zeros((p, nb))
    par_j = np.full((k, p, nb), -1, dtype=np.int64)
    par_b = np.full((k, p, nb), -1, dtype=np.int64)
    for j in range(p):
        if not allowed[0, j]:
            continue
        cum = 0.0 + weight[0, j]
        if cum + peak < budget:
            b = int(cum // gran)
            if b < nb:
                obj[j, b] = unary[0, j]
                mem[j, b] = cum
    for v in range(1, k):
        new_obj = np.full((p, nb), np.inf)
        new_mem = np.zeros((p, nb))
        for j in range(p):
            if not allowed[v, j]:
                continue
            cands = []
            for jp in range(p):
                src = np.nonzero(np.isfinite(obj[jp]))[0]
                if src.size == 0:
                    continue
                cum = mem[jp, src] + weight[v, j]
                ok = cum + peak < budget
                src, cum = src[ok], cum[ok]
                tb = np.floor_divide(cum, gran).astype(np.int64)
                ok = tb < nb
                src, cum, tb = src[ok], cum[ok], tb[ok]
                val = obj[jp, src] + (pair[v, jp, j] + unary[v, j])
                cands.append((tb, val, cum, np.full(src.size, jp, dtype=np.int64), src))
            if not cands:
                continue
            tb, val, cum, jps, srcs = (np.concatenate(c) for c in zip(*cands))
            if tb.size == 0:
                continue
            order = np.lexsort((srcs, jps, cum, val, tb))
            tb, val, cum, jps, srcs = tb[order], val[order], cum[order], jps[order], srcs[order]
            first = np.ones(tb.size, dtype=bool)
            first[1:] = tb[1:] != tb[:-1]
            tb, val, cum, jps, srcs = tb[first], val[first], cum[first], jps[first], srcs[first]
            new_obj[j, tb] = val
            new_mem[j, tb] = cum
            par_j[v, j, tb] = jps
            par_b[v, j, tb] = srcs
        obj, mem = new_obj, new_mem
    best = np.inf
    bj = bb = -1
    for j in range(p):
        for b in range(nb):
            if obj[j, b] < best:
                best, bj, bb = obj[j, b], j, b
    if bj < 0:
        return np.inf, None
    choice = np.zeros(k, dtype=np.int64)
    j, b = bj, bb
    for v in range(k - 1, -1, -1):
        choice[v] = j
        if v:
            j, b = par_j[v, j, b], par_b[v, j, b]
    return float(best), choice
