import pytest
from hypothesis import given, strategies as st

from tmpsched.model import (ModelError, ModelGraph, ModelSpec, Operator, OpKind, Sublayer,
                            build_block_graph, build_graph, build_operator_sequence)

from gen import toy_spec


def kinds(ops):
    return [op.kind for op in ops]


def test_one_layer_has_two_computes_and_two_allreduces():
    ops = build_operator_sequence(toy_spec(1))
    assert kinds(ops) == [OpKind.FORWARD, OpKind.ALLREDUCE, OpKind.FORWARD, OpKind.ALLREDUCE]
    assert [op.sublayer for op in ops] == [Sublayer.ATTENTION] * 2 + [Sublayer.FFN] * 2


def test_zero_layers_is_empty():
    assert build_operator_sequence(toy_spec(0)) == []
    assert build_graph(toy_spec(0)).blocks == ()


def test_three_layers():
    ops = build_operator_sequence(toy_spec(3))
    assert sum(op.kind is OpKind.FORWARD for op in ops) == 6
    assert sum(op.kind is OpKind.ALLREDUCE for op in ops) == 6


def test_one_layer_gives_two_blocks():
    graph = build_graph(toy_spec(1))
    assert len(graph.blocks) == 2
    assert graph.edges == ((0, 1),)


def test_single_compute_is_terminal_block():
    op = Operator(id=0, kind=OpKind.FORWARD, layer=0, sublayer=Sublayer.FFN)
    graph = build_block_graph([op])
    assert len(graph.blocks) == 1
    assert graph.blocks[0].comm_op is None
    assert graph.blocks[0].compute_ops == (op,)


def test_24_layers_give_48_blocks():
    assert len(build_graph(toy_spec(24)).blocks) == 48


def test_sizes_follow_transformer_accounting():
    H, s, heads = 64, 8, 4
    ops = build_operator_sequence(toy_spec(1))
    attn, ffn = ops[0], ops[2]
    assert attn.param_count == 4 * H * H and ffn.param_count == 8 * H * H
    assert attn.flops == 8 * s * H * H + 4 * s * s * H
    assert ffn.flops == 16 * s * H * H
    assert attn.internal_activation == 4 * s * H + 2 * heads * s * s
    block = build_graph(toy_spec(1)).blocks[0]
    assert block.activation_elements == s * H


def test_adjacent_comms_rejected():
    ops = build_operator_sequence(toy_spec(1))
    extra = Operator(id=99, kind=OpKind.ALLREDUCE, layer=0, sublayer=Sublayer.FFN)
    with pytest.raises(ModelError, match="adjacent"):
        build_block_graph(ops[:2] + [extra] + ops[2:])


def test_leading_comm_rejected():
    with pytest.raises(ModelError, match="starts with communication"):
        build_block_graph([Operator(id=0, kind=OpKind.ALLREDUCE, layer=0, sublayer=Sublayer.FFN)])


def test_duplicate_ids_rejected():
    ops = build_operator_sequence(toy_spec(1))
    with pytest.raises(ModelError, match="twice"):
        build_block_graph(ops + [ops[0]])


@pytest.mark.parametrize("field,value,match", [
    ("global_batch", 3, "global_batch"),
    ("hidden_size", 65, "hidden_size"),
    ("seq_len", 0, "seq_len"),
    ("num_layers", -1, "num_layers"),
])
def test_spec_validation_names_the_field(field, value, match):
    params = dict(hidden_size=64, num_layers=1, seq_len=8, attention_heads=4, global_batch=2)
    params[field] = value
    with pytest.raises(ModelError, match=match):
        ModelSpec(**params)


def test_spec_dict_roundtrip_and_unknown_field():
    spec = toy_spec(2)
    assert ModelSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ModelError, match="dropout"):
        ModelSpec.from_dict({**spec.to_dict(), "dropout": 0.1})
    bad = spec.to_dict()
    del bad["seq_len"]
    with pytest.raises(ModelError, match="seq_len"):
        ModelSpec.from_dict(bad)


def test_allgather_must_block():
    with pytest.raises(ModelError):
        Operator(id=0, kind=OpKind.ALLGATHER, layer=0, sublayer=Sublayer.FFN)
    assert Operator(id=0, kind=OpKind.ALLGATHER, layer=0, sublayer=Sublayer.FFN, blocking=True).blocking


def test_graph_requires_chain_edges():
    graph = build_graph(toy_spec(1))
    with pytest.raises(ModelError):
        ModelGraph(blocks=graph.blocks, edges=((1, 0),))


@given(st.integers(0, 30))
def test_block_count_is_twice_layers(L):
    assert len(build_graph(toy_spec(L)).blocks) == 2 * L


@st.composite
def legal_sequences(draw):
    """Compute runs of length >= 1, each optionally closed by one AllReduce."""
    ops = []
    runs = draw(st.integers(0, 8))
    for r in range(runs):
        for _ in range(draw(st.integers(1, 3))):
            ops.append(Operator(id=len(ops), kind=OpKind.FORWARD, layer=r, sublayer=Sublayer.FFN))
        if r < runs - 1 or draw(st.booleans()):
            ops.append(Operator(id=len(ops), kind=OpKind.ALLREDUCE, layer=r, sublayer=Sublayer.FFN))
    return ops


@given(legal_sequences())
def test_flatten_roundtrip(ops):
    graph = build_block_graph(ops)
    assert graph.flatten() == ops
    ids = [op.id for b in graph.blocks for op in b.ops]
    assert len(ids) == len(set(ids))
    comms = sum(op.is_comm for op in ops)
    assert len(graph.blocks) == comms + (1 if ops and not ops[-1].is_comm else 0)
