"""Schedule generators for the four TMP training schedules.

A plan is a list of operators in host issue order.  Each operator names the
stream it runs on and the operators it must wait for.  The simulator executes
each stream first-in-first-out, so issue order plus dependencies fully
determine a timeline.

Variants
--------
Default
    One batch, everything serialized, recomputation replays whole layers
    including their AllReduces.
IntraPass
    Two sub-batches pipelined inside each pass; a barrier separates every
    recomputation pass from its backward pass and from the next layer.
CrossPass
    Same program as IntraPass without the barriers, so recomputation of the
    next layer and backward communication may overlap.
Oases
    Forward saves every post-communication block input, so recomputation
    never replays an AllReduce.

All two-sub-batch variants share one runtime discipline: the host keeps a
single outstanding communication handle and syncs the previous one before
starting the next.  Operators issued after that sync wait for it, which turns
the sub-batches into a lock-step pipeline.  Only the programs differ.
"""

from __future__ import annotations

import enum
import json
from collections import defaultdict, deque
from dataclasses import dataclass

from .model import ModelGraph, Operator, OpKind


class Pass(str, enum.Enum):
    FORWARD = "Forward"
    RECOMPUTE = "Recompute"
    BACKWARD = "Backward"


class Stream(str, enum.Enum):
    COMPUTE = "Compute"
    COMM = "Comm"


class Variant(str, enum.Enum):
    DEFAULT = "Default"
    INTRA_PASS = "IntraPass"
    CROSS_PASS = "CrossPass"
    OASES = "Oases"

    @classmethod
    def parse(cls, name: str) -> "Variant":
        for v in cls:
            if v.value.lower() == name.strip().lower():
                return v
        raise ValueError(f"unknown variant {name!r}; expected one of {[v.value for v in cls]}")


@dataclass(frozen=True)
class ScheduledOp:
    id: int
    op: Operator
    stream: Stream
    deps: frozenset[int]
    pass_: Pass
    block: int

    @property
    def kind(self) -> OpKind:
        return self.op.kind

    @property
    def sub_batch(self) -> int:
        return self.op.sub_batch

    @property
    def label(self) -> str:
        tag = {OpKind.FORWARD: "F", OpKind.RECOMPUTE: "R", OpKind.BACKWARD: "B",
               OpKind.ALLREDUCE: "C", OpKind.ALLGATHER: "AG"}[self.op.kind]
        if self.op.is_comm and self.op.kind is OpKind.ALLREDUCE:
            return f"C{self.block}^{self.sub_batch}({self.pass_.value[0]})"
        return f"{tag}{self.block}^{self.sub_batch}"

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "kind": self.op.kind.value,
            "layer": self.op.layer,
            "sublayer": self.op.sublayer.value,
            "sub_batch": self.sub_batch,
            "block": self.block,
            "stream": self.stream.value,
            "pass": self.pass_.value,
            "blocking": self.op.blocking,
            "deps": sorted(self.deps),
        }


@dataclass(frozen=True)
class SchedulePlan:
    variant: Variant
    forward_ops: tuple[ScheduledOp, ...]
    backward_ops: tuple[ScheduledOp, ...]
    saved_sequences: tuple[tuple[int, ...], ...]
    sub_batches: int = 2
    recompute: bool = True
    num_blocks: int = 0

    @property
    def ops(self) -> tuple[ScheduledOp, ...]:
        return self.forward_ops + self.backward_ops

    def by_id(self) -> dict[int, ScheduledOp]:
        return {s.id: s for s in self.ops}

    def to_dict(self) -> dict:
        return {
            "variant": self.variant.value,
            "sub_batches": self.sub_batches,
            "recompute": self.recompute,
            "num_blocks": self.num_blocks,
            "forward_ops": [s.to_dict() for s in self.forward_ops],
            "backward_ops": [s.to_dict() for s in self.backward_ops],
            "saved_sequences": [list(seq) for seq in self.saved_sequences],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def comm_count(plan: SchedulePlan) -> int:
    """Logical AllReduce operators, counting a sub-batch pair once."""
    return len({(s.block, s.pass_) for s in plan.ops if s.kind is OpKind.ALLREDUCE})


def compute_multiset(plan: SchedulePlan) -> dict[tuple[int, OpKind], int]:
    """Compute operators per (block, kind), ignoring the sub-batch split."""
    seen = {(s.block, s.kind) for s in plan.ops if not s.op.is_comm}
    counts: dict[tuple[int, OpKind], int] = defaultdict(int)
    for key in seen:
        counts[key] += 1
    return dict(counts)


class _Builder:
    def __init__(self, graph: ModelGraph, host_sync: bool = False, serialize: bool = False):
        self.graph = graph
        self.ops: list[ScheduledOp] = []
        self.host_sync = host_sync
        self.serialize = serialize
        self._last_comm: int | None = None
        self._sync_floor: int | None = None

    def emit(self, kind: OpKind, block: int, sub_batch: int, pass_: Pass, deps=()) -> int:
        b = self.graph.blocks[block]
        template = b.comm_op if kind.is_comm else b.compute_ops[-1]
        sid = len(self.ops)
        deps = {d for d in deps if d is not None}
        if self.host_sync and kind.is_comm:
            # wait for the previous comm before launching this one; later ops wait for it too
            self._sync_floor = self._last_comm
            self._last_comm = sid
        if self._sync_floor is not None:
            deps.add(self._sync_floor)
        if self.serialize and self.ops:
            deps.add(sid - 1)
        op = Operator(id=sid, kind=kind, layer=b.layer, sublayer=template.sublayer, sub_batch=sub_batch)
        stream = Stream.COMM if kind.is_comm else Stream.COMPUTE
        self.ops.append(ScheduledOp(sid, op, stream, frozenset(deps), pass_, block))
        return sid


def _layer_segments(graph: ModelGraph) -> list[list[int]]:
    segments: list[list[int]] = []
    for block in graph.blocks:
        if segments and graph.blocks[segments[-1][0]].layer == block.layer:
            segments[-1].append(block.index)
        else:
            segments.append([block.index])
    return segments


def _forward(bld: _Builder, sub_batches: tuple[int, ...]) -> tuple[dict, dict]:
    """Forward pass, sub-batches alternating at every communication operator."""
    fwd: dict[tuple[int, int], int] = {}
    tail: dict[int, int | None] = {x: None for x in sub_batches}
    for b, block in enumerate(bld.graph.blocks):
        for x in sub_batches:
            fwd[b, x] = bld.emit(OpKind.FORWARD, b, x, Pass.FORWARD, [tail[x]])
            tail[x] = fwd[b, x]
            if block.comm_op is not None:
                tail[x] = bld.emit(OpKind.ALLREDUCE, b, x, Pass.FORWARD, [fwd[b, x]])
    return fwd, tail


def _finish(variant, bld, n_forward, saved, sub_batches, recompute) -> SchedulePlan:
    return SchedulePlan(
        variant=variant,
        forward_ops=tuple(bld.ops[:n_forward]),
        backward_ops=tuple(bld.ops[n_forward:]),
        saved_sequences=tuple(tuple(seq) for seq in saved),
        sub_batches=len(sub_batches),
        recompute=recompute,
        num_blocks=len(bld.graph.blocks),
    )


def schedule_default(graph: ModelGraph, recompute: bool = True) -> SchedulePlan:
    bld = _Builder(graph, serialize=True)
    fwd, tail = _forward(bld, (0,))
    n_forward = len(bld.ops)
    segments = _layer_segments(graph)
    saved = [[fwd[b, 0] for b in seg] for seg in segments] if recompute else []
    loss = [tail[0]]
    grad = None  # last backward op of the block above
    for seg in reversed(segments):
        rec: dict[int, int] = {}
        if recompute:
            prev = None
            for b in seg:
                rec[b] = bld.emit(OpKind.RECOMPUTE, b, 0, Pass.RECOMPUTE, [prev] + loss)
                loss = []
                prev = rec[b]
                if graph.blocks[b].comm_op is not None:
                    prev = bld.emit(OpKind.ALLREDUCE, b, 0, Pass.RECOMPUTE, [rec[b]])
        for b in reversed(seg):
            producer = rec[b] if recompute else fwd[b, 0]
            grad = bld.emit(OpKind.BACKWARD, b, 0, Pass.BACKWARD, [producer, grad] + loss)
            loss = []
            if graph.blocks[b].comm_op is not None:
                grad = bld.emit(OpKind.ALLREDUCE, b, 0, Pass.BACKWARD, [grad])
    return _finish(Variant.DEFAULT, bld, n_forward, saved, (0,), recompute)


def _layered_two_batch(graph: ModelGraph, recompute: bool, barriers: bool, variant: Variant) -> SchedulePlan:
    bld = _Builder(graph, host_sync=True)
    sbs = (0, 1)
    fwd, tail = _forward(bld, sbs)
    n_forward = len(bld.ops)
    segments = _layer_segments(graph)
    saved = [[fwd[b, x] for b in seg] for seg in segments for x in sbs] if recompute else []
    order = (1, 0)  # backward pops the last saved sequence first
    barrier = [t for t in tail.values() if t is not None]
    grad: dict[int, int | None] = {x: None for x in sbs}
    for seg in reversed(segments):
        rec: dict[tuple[int, int], int] = {}
        if recompute:
            start = len(bld.ops)
            prev: dict[int, int | None] = {x: None for x in sbs}
            for b in seg:
                for x in order:
                    rec[b, x] = bld.emit(OpKind.RECOMPUTE, b, x, Pass.RECOMPUTE, [prev[x]] + barrier)
                    prev[x] = rec[b, x]
                    if graph.blocks[b].comm_op is not None:
                        prev[x] = bld.emit(OpKind.ALLREDUCE, b, x, Pass.RECOMPUTE, [rec[b, x]] + barrier)
            barrier = list(range(start, len(bld.ops))) if barriers else []
        start = len(bld.ops)
        for b in reversed(seg):
            for x in order:
                producer = rec[b, x] if recompute else fwd[b, x]
                grad[x] = bld.emit(OpKind.BACKWARD, b, x, Pass.BACKWARD, [producer, grad[x]] + barrier)
                if graph.blocks[b].comm_op is not None:
                    grad[x] = bld.emit(OpKind.ALLREDUCE, b, x, Pass.BACKWARD, [grad[x]] + barrier)
        barrier = list(range(start, len(bld.ops))) if barriers and recompute else []
    return _finish(variant, bld, n_forward, saved, sbs, recompute)


def schedule_intra_pass(graph: ModelGraph, recompute: bool = True) -> SchedulePlan:
    return _layered_two_batch(graph, recompute, barriers=True, variant=Variant.INTRA_PASS)


def schedule_cross_pass(graph: ModelGraph, recompute: bool = True) -> SchedulePlan:
    return _layered_two_batch(graph, recompute, barriers=False, variant=Variant.CROSS_PASS)


def schedule_oases(graph: ModelGraph, recompute: bool = True) -> SchedulePlan:
    """Fine-grained recomputation with host-synced sub-batch pipelining.

    Forward walks the operator sequence, switching sub-batch at every
    communication operator and saving the compute run since the last
    communication (the array of saved sequences).  Backward pops those
    sequences last-first, recomputes each without its trailing AllReduce, runs
    the backward compute and starts the backward AllReduce asynchronously.
    """
    bld = _Builder(graph, host_sync=True)
    sbs = (0, 1)
    fwd, tail = _forward(bld, sbs)
    n_forward = len(bld.ops)
    saved = [[fwd[b, x]] for b in range(len(graph.blocks)) for x in sbs] if recompute else []
    loss = [t for t in tail.values() if t is not None]
    grad: dict[int, int | None] = {x: None for x in sbs}
    for b in reversed(range(len(graph.blocks))):
        for x in (1, 0):
            producer = fwd[b, x]
            if recompute:
                producer = bld.emit(OpKind.RECOMPUTE, b, x, Pass.RECOMPUTE, loss)
                loss = []
            grad[x] = bld.emit(OpKind.BACKWARD, b, x, Pass.BACKWARD, [producer, grad[x]] + loss)
            loss = []
            if graph.blocks[b].comm_op is not None:
                grad[x] = bld.emit(OpKind.ALLREDUCE, b, x, Pass.BACKWARD, [grad[x]])
    return _finish(Variant.OASES, bld, n_forward, saved, sbs, recompute)


GENERATORS = {
    Variant.DEFAULT: schedule_default,
    Variant.INTRA_PASS: schedule_intra_pass,
    Variant.CROSS_PASS: schedule_cross_pass,
    Variant.OASES: schedule_oases,
}


def build_plan(variant: Variant | str, graph: ModelGraph, recompute: bool = True) -> SchedulePlan:
    if isinstance(variant, str):
        variant = Variant.parse(variant)
    return GENERATORS[variant](graph, recompute=recompute)


def _find_cycle(ops: dict[int, ScheduledOp]) -> bool:
    indeg = {i: 0 for i in ops}
    children = defaultdict(list)
    for s in ops.values():
        for d in s.deps:
            if d in ops:
                indeg[s.id] += 1
                children[d].append(s.id)
    queue = deque(i for i, n in indeg.items() if n == 0)
    visited = 0
    while queue:
        i = queue.popleft()
        visited += 1
        for c in children[i]:
            indeg[c] -= 1
            if indeg[c] == 0:
                queue.append(c)
    return visited != len(ops)


def validate_plan(plan: SchedulePlan) -> list[str]:
    """Return human-readable violations; empty means the plan is legal."""
    violations: list[str] = []
    ops = plan.by_id()
    if len(ops) != len(plan.ops):
        violations.append("duplicate operator ids")
    for s in plan.ops:
        for d in s.deps:
            if d not in ops:
                violations.append(f"op {s.id} ({s.label}) depends on missing op {d}")
        want = Stream.COMM if s.op.is_comm else Stream.COMPUTE
        if s.stream is not want:
            violations.append(f"op {s.id} ({s.label}) is a {s.kind.value} on the {s.stream.value} stream")
    if _find_cycle(ops):
        violations.append("dependency graph has a cycle")

    recomputed = set()
    seq_count: dict[int, int] = defaultdict(int)
    for seq in plan.saved_sequences:
        for op_id in seq:
            seq_count[op_id] += 1
            if op_id in ops:
                s = ops[op_id]
                recomputed.add((s.block, s.sub_batch))
    for op_id, n in seq_count.items():
        if n != 1:
            violations.append(f"forward op {op_id} appears in {n} saved sequences")
    if plan.recompute:
        for s in plan.forward_ops:
            if s.kind is OpKind.FORWARD and seq_count.get(s.id, 0) == 0:
                violations.append(f"forward op {s.id} ({s.label}) is in no saved sequence")

    producers = {}
    for s in plan.ops:
        if s.kind in (OpKind.FORWARD, OpKind.RECOMPUTE):
            producers.setdefault((s.block, s.sub_batch), {})[s.kind] = s.id
    for s in plan.backward_ops:
        if s.kind is not OpKind.BACKWARD:
            continue
        need = OpKind.RECOMPUTE if (s.block, s.sub_batch) in recomputed else OpKind.FORWARD
        pid = producers.get((s.block, s.sub_batch), {}).get(need)
        if pid is None:
            violations.append(f"op {s.id} ({s.label}) has no {need.value} producer")
        elif need is OpKind.RECOMPUTE and pid not in s.deps:
            violations.append(f"op {s.id} ({s.label}) does not wait for its recompute producer {pid}")
    if plan.variant is Variant.OASES:
        for s in plan.ops:
            if s.op.is_comm and s.pass_ is Pass.RECOMPUTE:
                violations.append(f"op {s.id} ({s.label}) replays communication during recomputation")
    return violations
