"""Compare the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N] [--json out.json]

Workloads are taken from the real pipeline: the simulator's dependency list
for a 24-layer Oases plan, and the planner's chain DP for the same model.
"""

from __future__ import annotations

import argparse
import json
import sys
import timeit

import numpy as np

from tmpsched.costs import build_cost_vectors
from tmpsched.kernels import _fallback
from tmpsched.model import ModelSpec, build_graph
from tmpsched.planner import Strategy, _chain_terms, edge_cost_matrices
from tmpsched.presets import hardware_preset
from tmpsched.schedule import Variant, build_plan
from tmpsched.sim import _durations, _with_resharding

try:
    from tmpsched.kernels import _native
except ImportError:
    _native = None


def fifo_workload(num_layers: int):
    spec = ModelSpec(hidden_size=2048, num_layers=num_layers, seq_len=1024, attention_heads=32, global_batch=8)
    g = build_graph(spec)
    costs = build_cost_vectors(g, spec, hardware_preset("nvlink3090"))
    plan = build_plan(Variant.OASES, g)
    k = len(g.blocks)
    strategy = Strategy(tuple(2 if b < k // 3 else 4 for b in range(k)))
    idx = strategy.indices(costs)
    entries = _with_resharding(plan, costs, idx)
    pos = {s.id: n for n, (s, _) in enumerate(entries)}
    deps, last_blocking = [], None
    for n, (s, _) in enumerate(entries):
        d = sorted(pos[x] for x in s.deps)
        if s.op.blocking:
            d, last_blocking = list(range(n)), n
        elif last_blocking is not None:
            d.append(last_blocking)
        deps.append(d)
    indptr = np.zeros(len(entries) + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([len(d) for d in deps])
    indices = np.array([x for d in deps for x in d], dtype=np.int64)
    stream = np.array([0 if s.stream.value == "Compute" else 1 for s, _ in entries], dtype=np.int8)
    return stream, _durations(plan, costs, idx, entries, 1.0), indptr, indices


def dp_workload(num_layers: int):
    spec = ModelSpec(hidden_size=2048, num_layers=num_layers, seq_len=1024, attention_heads=32, global_batch=8)
    g = build_graph(spec)
    hw = hardware_preset("3090", candidate_degrees=(1, 2, 4))
    costs = build_cost_vectors(g, spec, hw)
    unary, pair = _chain_terms(costs, edge_cost_matrices(costs))
    peak = float(costs.m_runtime.max())
    return unary, pair, costs.m_param + costs.m_saved, np.ones_like(unary, dtype=bool), peak, hw.memory_capacity, 2.0**20


def bench(fn, args, repeat: int) -> float:
    timer = timeit.Timer(lambda: fn(*args))
    number, _ = timer.autorange()
    return min(timer.repeat(repeat=repeat, number=number)) / number


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--layers", type=int, default=24)
    parser.add_argument("--json", help="also write results here")
    args = parser.parse_args(argv)
    if _native is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first", file=sys.stderr)
        return 1

    rows = []
    for name, workload in (("fifo_times", fifo_workload(args.layers)), ("chain_dp", dp_workload(args.layers))):
        a = getattr(_fallback, name)(*workload)
        b = getattr(_native, name)(*workload)
        same = all(np.array_equal(x, y) for x, y in zip(a, b)) if name == "fifo_times" else (
            a[0] == b[0] and np.array_equal(a[1], b[1]))
        slow = bench(getattr(_fallback, name), workload, args.repeat)
        fast = bench(getattr(_native, name), workload, args.repeat)
        rows.append({"kernel": name, "python_s": slow, "cython_s": fast, "speedup": slow / fast,
                     "identical": bool(same)})

    print(f"{'kernel':<12}{'python':>12}{'cython':>12}{'speedup':>10}  identical")
    for r in rows:
        print(f"{r['kernel']:<12}{r['python_s'] * 1e3:>10.3f}ms{r['cython_s'] * 1e3:>10.3f}ms"
              f"{r['speedup']:>9.1f}x  {r['identical']}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=1)
    return 0 if all(r["identical"] for r in rows) else 1


if __name__ == "__main__":
    sys.exit(main())
