"""Transformer operator sequences and the block-chain graph built from them.

Each transformer layer contributes two fused compute operators (attention and
FFN), each followed by the AllReduce that merges the row-parallel partial
results.  Grouping a compute run with its trailing communication operator gives
a *block*, the unit the planner assigns a parallel degree to.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence


class ModelError(ValueError):
    """Raised for invalid model specs or illegal operator sequences."""


class OpKind(str, enum.Enum):
    FORWARD = "ForwardCompute"
    RECOMPUTE = "RecomputeCompute"
    BACKWARD = "BackwardCompute"
    ALLREDUCE = "AllReduce"
    ALLGATHER = "AllGather"

    @property
    def is_comm(self) -> bool:
        return self in (OpKind.ALLREDUCE, OpKind.ALLGATHER)


class Sublayer(str, enum.Enum):
    ATTENTION = "Attention"
    FFN = "FFN"


@dataclass(frozen=True)
class ModelSpec:
    hidden_size: int
    num_layers: int
    seq_len: int
    attention_heads: int
    global_batch: int
    bytes_per_element: int = 2
    recompute_enabled: bool = True

    def __post_init__(self):
        for name in ("hidden_size", "seq_len", "attention_heads", "global_batch", "bytes_per_element"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
                raise ModelError(f"{name}: expected a positive integer, got {value!r}")
        if not isinstance(self.num_layers, int) or isinstance(self.num_layers, bool) or self.num_layers < 0:
            raise ModelError(f"num_layers: expected a non-negative integer, got {self.num_layers!r}")
        if self.hidden_size % self.attention_heads:
            raise ModelError(
                f"hidden_size: {self.hidden_size} is not divisible by attention_heads={self.attention_heads}"
            )
        if self.global_batch % 2:
            raise ModelError(f"global_batch: must be even to split into two sub-batches, got {self.global_batch}")
        if not isinstance(self.recompute_enabled, bool):
            raise ModelError(f"recompute_enabled: expected a boolean, got {self.recompute_enabled!r}")

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(data) - known)
        if unknown:
            raise ModelError(f"{unknown[0]}: unknown model field")
        missing = [name for name in ("hidden_size", "num_layers", "seq_len", "attention_heads", "global_batch")
                   if name not in data]
        if missing:
            raise ModelError(f"{missing[0]}: missing required model field")
        return cls(**data)

    @classmethod
    def from_json(cls, path: str | Path) -> "ModelSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}


@dataclass(frozen=True)
class Operator:
    """One unit of work.

    The size annotations are per sample: ``flops`` of the fused compute,
    ``activation_elements`` of its output (for communication operators, the
    message), ``internal_activation`` elements stashed inside the fused
    operator when it is not recomputed.
    """

    id: int
    kind: OpKind
    layer: int
    sublayer: Sublayer
    sub_batch: int = 0
    blocking: bool = False
    param_count: int = 0
    flops: float = 0.0
    activation_elements: int = 0
    internal_activation: int = 0

    def __post_init__(self):
        if self.kind is OpKind.ALLGATHER and not self.blocking:
            raise ModelError("AllGather operators are always blocking")
        if self.sub_batch not in (0, 1):
            raise ModelError(f"sub_batch must be 0 or 1, got {self.sub_batch}")

    @property
    def is_comm(self) -> bool:
        return self.kind.is_comm


@dataclass(frozen=True)
class Block:
    index: int
    compute_ops: tuple[Operator, ...]
    comm_op: Operator | None
    param_count: int
    activation_elements: int
    flops: float = 0.0
    internal_activation: int = 0

    @property
    def ops(self) -> tuple[Operator, ...]:
        return self.compute_ops + ((self.comm_op,) if self.comm_op is not None else ())

    @property
    def layer(self) -> int:
        return self.compute_ops[0].layer


@dataclass(frozen=True)
class ModelGraph:
    blocks: tuple[Block, ...]
    edges: tuple[tuple[int, int], ...] = field(default=())

    def __post_init__(self):
        expected = tuple((i, i + 1) for i in range(len(self.blocks) - 1))
        if self.edges != expected:
            raise ModelError("edges must form the chain (0,1),(1,2),...")

    def __len__(self) -> int:
        return len(self.blocks)

    def flatten(self) -> list[Operator]:
        return [op for block in self.blocks for op in block.ops]


def build_operator_sequence(spec: ModelSpec) -> list[Operator]:
    """Forward operator order: attention, AllReduce, FFN, AllReduce per layer."""
    H, s = spec.hidden_size, spec.seq_len
    boundary = s * H
    ops: list[Operator] = []
    for layer in range(spec.num_layers):
        attention = Operator(
            id=len(ops), kind=OpKind.FORWARD, layer=layer, sublayer=Sublayer.ATTENTION,
            param_count=4 * H * H,
            # QKV + output projections, plus the score and context matmuls
            flops=8.0 * s * H * H + 4.0 * s * s * H,
            activation_elements=boundary,
            internal_activation=4 * s * H + 2 * spec.attention_heads * s * s,
        )
        ops.append(attention)
        ops.append(Operator(id=len(ops), kind=OpKind.ALLREDUCE, layer=layer,
                            sublayer=Sublayer.ATTENTION, activation_elements=boundary))
        ffn = Operator(
            id=len(ops), kind=OpKind.FORWARD, layer=layer, sublayer=Sublayer.FFN,
            param_count=8 * H * H,
            flops=16.0 * s * H * H,
            activation_elements=boundary,
            internal_activation=8 * s * H,
        )
        ops.append(ffn)
        ops.append(Operator(id=len(ops), kind=OpKind.ALLREDUCE, layer=layer,
                            sublayer=Sublayer.FFN, activation_elements=boundary))
    return ops


def _make_block(index: int, compute: list[Operator], comm: Operator | None) -> Block:
    activation = comm.activation_elements if comm is not None else compute[-1].activation_elements
    return Block(
        index=index,
        compute_ops=tuple(compute),
        comm_op=comm,
        param_count=sum(op.param_count for op in compute),
        activation_elements=activation,
        flops=float(sum(op.flops for op in compute)),
        internal_activation=sum(op.internal_activation for op in compute),
    )


def build_block_graph(ops: Sequence[Operator]) -> ModelGraph:
    """Merge each compute run with its trailing communication operator."""
    seen: set[int] = set()
    blocks: list[Block] = []
    pending: list[Operator] = []
    for op in ops:
        if op.id in seen:
            raise ModelError(f"operator id {op.id} appears twice")
        seen.add(op.id)
        if op.is_comm:
            if not pending:
                what = "two adjacent communication operators" if blocks else "sequence starts with communication"
                raise ModelError(f"illegal forward sequence: {what} (op {op.id})")
            blocks.append(_make_block(len(blocks), pending, op))
            pending = []
        else:
            if op.kind is not OpKind.FORWARD:
                raise ModelError(f"op {op.id}: only forward compute belongs in a forward sequence")
            pending.append(op)
    if pending:
        blocks.append(_make_block(len(blocks), pending, None))
    edges = tuple((i, i + 1) for i in range(len(blocks) - 1))
    return ModelGraph(blocks=tuple(blocks), edges=edges)


def build_graph(spec: ModelSpec) -> ModelGraph:
    return build_block_graph(build_operator_sequence(spec))
