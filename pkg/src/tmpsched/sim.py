"""Two-stream execution of a schedule plan on one representative device.

Each stream runs its operators in plan (issue) order; an operator starts once
its stream is free and all its dependencies have finished.  Resharding
AllGathers are inserted wherever adjacent blocks use different degrees and
block both streams: they wait for everything issued before them and
everything issued after waits for them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .costs import CostError, CostVectors
from .model import Operator, OpKind
from .planner import Strategy
from .schedule import Pass, SchedulePlan, ScheduledOp, Stream, validate_plan


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class TraceEvent:
    op_id: int
    stream: Stream
    start: float
    end: float
    name: str = ""
    kind: str = ""

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class SimResult:
    makespan: float
    compute_busy_fraction: float
    comm_exposed: float
    peak_memory: float
    trace: tuple[TraceEvent, ...] = field(default=())
    variant: str = ""

    @property
    def compute_time(self) -> float:
        return sum(e.duration for e in self.trace if e.stream is Stream.COMPUTE)

    @property
    def comm_time(self) -> float:
        return sum(e.duration for e in self.trace if e.stream is Stream.COMM)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "makespan": self.makespan,
            "compute_busy_fraction": self.compute_busy_fraction,
            "comm_exposed": self.comm_exposed,
            "peak_memory": self.peak_memory,
            "breakdown": breakdown(self) if self.makespan > 0 else None,
            "trace": [
                {"op_id": e.op_id, "name": e.name, "kind": e.kind, "stream": e.stream.value,
                 "start": e.start, "end": e.end}
                for e in self.trace
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def _with_resharding(plan: SchedulePlan, costs: CostVectors, idx: np.ndarray):
    """Plan ops in issue order with blocking AllGathers spliced in."""
    ops = list(plan.ops)
    inserts: dict[int, list[tuple[int, float, Pass]]] = {}
    next_id = max((s.id for s in ops), default=-1) + 1
    for v in range(len(idx) - 1):
        i, j = idx[v], idx[v + 1]
        if i == j:
            continue
        if i < j:
            # forward: after the upstream block's last forward operator
            anchor_block, pass_ = v, (Pass.FORWARD,)
        else:
            # backward: after the downstream block's last backward operator
            anchor_block, pass_ = v + 1, (Pass.BACKWARD,)
        positions = [n for n, s in enumerate(ops) if s.block == anchor_block and s.pass_ in pass_]
        if not positions:
            continue
        inserts.setdefault(positions[-1], []).append((v, costs.t_allgather[v, i, j], pass_[0]))
    out: list[tuple[ScheduledOp, float | None]] = []
    for n, s in enumerate(ops):
        out.append((s, None))
        for v, t, pass_ in inserts.get(n, ()):
            op = Operator(id=next_id, kind=OpKind.ALLGATHER, layer=s.op.layer,
                          sublayer=s.op.sublayer, blocking=True)
            out.append((ScheduledOp(next_id, op, Stream.COMM, frozenset(), pass_, v), float(t)))
            next_id += 1
    return out


def _durations(plan: SchedulePlan, costs: CostVectors, idx: np.ndarray, entries, interference: float):
    scale = 2.0 if plan.sub_batches == 1 else 1.0
    comm_scale = scale * (interference if plan.sub_batches == 2 else 1.0)
    dur = np.zeros(len(entries))
    for n, (s, fixed) in enumerate(entries):
        if fixed is not None:
            dur[n] = fixed
            continue
        b, j = s.block, idx[s.block]
        kind = s.kind
        if kind in (OpKind.FORWARD, OpKind.RECOMPUTE):
            dur[n] = scale * costs.d_fwd[b, j]
        elif kind is OpKind.BACKWARD:
            bwd = costs.d_bwd[b, j] - costs.d_fwd[b, j] if costs.recompute else costs.d_bwd[b, j]
            dur[n] = scale * bwd
        elif kind is OpKind.ALLREDUCE:
            c = costs.c_bwd[b, j] if s.pass_ is Pass.BACKWARD else costs.c_fwd[b, j]
            dur[n] = comm_scale * c
        else:
            raise SimulationError(f"op {s.id}: no cost rule for {kind.value}")
    return dur


def _exposed(compute: list[tuple[float, float]], comm: list[tuple[float, float]]) -> float:
    """Length of comm intervals not covered by compute intervals (both disjoint, sorted)."""
    exposed = 0.0
    ci = 0
    for a, b in comm:
        covered = 0.0
        while ci < len(compute) and compute[ci][1] <= a:
            ci += 1
        k = ci
        while k < len(compute) and compute[k][0] < b:
            covered += min(b, compute[k][1]) - max(a, compute[k][0])
            k += 1
        exposed += (b - a) - covered
    return max(exposed, 0.0)


def _peak_memory(plan, costs, idx, entries, start, end) -> float:
    share = 1.0 if plan.sub_batches == 1 else 0.5
    base = float(sum(costs.m_param[b, j] for b, j in enumerate(idx)))
    pos = {s.id: n for n, (s, _) in enumerate(entries)}
    backward_end = {}
    for n, (s, _) in enumerate(entries):
        if s.kind is OpKind.BACKWARD:
            backward_end[s.block, s.sub_batch] = end[n]
    events: list[tuple[float, int, float]] = []  # (time, order: frees first, delta)

    def hold(t0, key, amount):
        t1 = backward_end.get(key)
        if amount <= 0:
            return
        events.append((t0, 1, amount))
        if t1 is not None:
            events.append((t1, 0, -amount))

    by_id = plan.by_id()
    if plan.recompute:
        for seq in plan.saved_sequences:
            first = by_id[seq[0]]
            hold(start[pos[first.id]], (first.block, first.sub_batch),
                 share * costs.m_saved[first.block, idx[first.block]])
        for n, (s, _) in enumerate(entries):
            if s.kind is OpKind.RECOMPUTE:
                hold(start[n], (s.block, s.sub_batch), share * costs.m_runtime[s.block, idx[s.block]])
    else:
        for n, (s, _) in enumerate(entries):
            if s.kind is OpKind.FORWARD:
                hold(start[n], (s.block, s.sub_batch), share * costs.m_saved[s.block, idx[s.block]])
            elif s.kind is OpKind.BACKWARD:
                hold(start[n], (s.block, s.sub_batch), share * costs.m_runtime[s.block, idx[s.block]])
    events.sort()
    level = peak = 0.0
    for _, _, delta in events:
        level += delta
        peak = max(peak, level)
    return base + peak


def simulate(plan: SchedulePlan, costs: CostVectors, strategy: Strategy,
             interference: float = 1.0, check: bool = True) -> SimResult:
    """Execute ``plan`` with per-block degrees from ``strategy``."""
    if check:
        problems = validate_plan(plan)
        if problems:
            raise SimulationError(f"invalid plan: {problems[0]}")
    if len(strategy.degrees) != plan.num_blocks or costs.num_blocks != plan.num_blocks:
        raise SimulationError(
            f"strategy covers {len(strategy.degrees)} blocks, costs {costs.num_blocks}, plan {plan.num_blocks}")
    try:
        idx = np.array([costs.degree_index(d) for d in strategy.degrees], dtype=np.intp)
    except CostError as exc:
        raise SimulationError(f"missing cost entry: {exc}") from exc

    entries = _with_resharding(plan, costs, idx)
    n = len(entries)
    pos = {s.id: k for k, (s, _) in enumerate(entries)}
    deps: list[list[int]] = []
    last_blocking = None
    for k, (s, _) in enumerate(entries):
        d = sorted(pos[x] for x in s.deps)
        if s.op.blocking:
            d = list(range(k))
        elif last_blocking is not None:
            d.append(last_blocking)
        if s.op.blocking:
            last_blocking = k
        deps.append(d)
    indptr = np.zeros(n + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([len(d) for d in deps])
    indices = np.array([x for d in deps for x in d], dtype=np.int64)
    stream = np.array([0 if s.stream is Stream.COMPUTE else 1 for s, _ in entries], dtype=np.int8)
    dur = _durations(plan, costs, idx, entries, interference)
    try:
        start, end = kernels.fifo_times(stream, dur, indptr, indices)
    except kernels.DeadlockError as exc:
        raise SimulationError(str(exc)) from exc

    trace = tuple(
        TraceEvent(op_id=s.id, stream=s.stream, start=float(start[k]), end=float(end[k]),
                   name=s.label, kind=s.kind.value)
        for k, (s, _) in enumerate(entries)
    )
    makespan = float(end.max()) if n else 0.0
    compute = [(e.start, e.end) for e in trace if e.stream is Stream.COMPUTE and e.end > e.start]
    comm = [(e.start, e.end) for e in trace if e.stream is Stream.COMM and e.end > e.start]
    compute.sort()
    comm.sort()
    busy = sum(b - a for a, b in compute)
    return SimResult(
        makespan=makespan,
        compute_busy_fraction=busy / makespan if makespan > 0 else 0.0,
        comm_exposed=_exposed(compute, comm),
        peak_memory=_peak_memory(plan, costs, idx, entries, start, end),
        trace=trace,
        variant=plan.variant.value,
    )


def breakdown(result: SimResult) -> dict[str, float]:
    """Fractions of the makespan by activity; the values sum to one."""
    if result.makespan <= 0:
        raise SimulationError("breakdown needs a positive makespan")
    compute = sum(e.duration for e in result.trace if e.stream is Stream.COMPUTE) / result.makespan
    comm = result.comm_exposed / result.makespan
    return {"comm_fraction": comm, "compute_fraction": compute, "idle_fraction": max(0.0, 1.0 - comm - compute)}


def export_trace(result: SimResult, path) -> list:
    """Chrome trace JSON at ``path`` plus an SVG timeline next to it."""
    from .timeline import export_trace as _export

    return _export(result, path)
