import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tmpsched.costs import CostVectors, build_cost_vectors
from tmpsched.model import Operator, OpKind, Sublayer, build_graph
from tmpsched.planner import Strategy
from tmpsched.presets import hardware_preset
from tmpsched.schedule import (Pass, ScheduledOp, SchedulePlan, Stream, Variant, build_plan)
from tmpsched.sim import SimulationError, TraceEvent, SimResult, breakdown, export_trace, simulate
from tmpsched.timeline import read_chrome_trace

from gen import random_analytic, random_strategy, random_table, toy_spec


def table(d, c, degrees=(1,)):
    d = np.asarray(d, float).reshape(-1, len(degrees))
    c = np.asarray(c, float).reshape(-1, len(degrees))
    k, p = d.shape
    ones = np.ones((k, p))
    return CostVectors(degrees, d, d, c, c, ones, ones, ones, np.zeros((max(k - 1, 0), p, p)), recompute=False)


def hand_plan(spec, sub_batches, num_blocks):
    """spec: (kind, block, sub_batch, deps) in issue order; forward pass only."""
    ops = []
    for n, (kind, block, sb, deps) in enumerate(spec):
        op = Operator(id=n, kind=kind, layer=0, sublayer=Sublayer.FFN, sub_batch=sb)
        stream = Stream.COMM if kind.is_comm else Stream.COMPUTE
        ops.append(ScheduledOp(n, op, stream, frozenset(deps), Pass.FORWARD, block))
    return SchedulePlan(Variant.DEFAULT if sub_batches == 1 else Variant.OASES, tuple(ops), (), (),
                        sub_batches=sub_batches, recompute=False, num_blocks=num_blocks)


F, C = OpKind.FORWARD, OpKind.ALLREDUCE


def test_serialized_compute_comm_compute_takes_five_seconds():
    # single-batch entries are doubled: 1s per sub-batch -> 2s, 0.5s -> 1s
    plan = hand_plan([(F, 0, 0, ()), (C, 0, 0, (0,)), (F, 1, 0, (1,))], 1, 2)
    res = simulate(plan, table([1, 1], [0.5, 0]), Strategy((1, 1)))
    assert res.makespan == 5.0


def test_two_sub_batches_overlap_to_four_seconds():
    plan = hand_plan([
        (F, 0, 0, ()), (C, 0, 0, (0,)), (F, 0, 1, ()), (C, 0, 1, (2,)),
        (F, 1, 0, (1,)), (F, 1, 1, (3,)),
    ], 2, 2)
    res = simulate(plan, table([1, 1], [1, 0]), Strategy((1, 1)))
    assert res.makespan == 4.0
    ev = {e.op_id: e for e in res.trace}
    assert ev[1].start == 1.0 and ev[2].start == 1.0  # C0 overlaps F1


def test_interference_slows_overlapped_comm_only_for_pipelines():
    plan = hand_plan([(F, 0, 0, ()), (C, 0, 0, (0,)), (F, 0, 1, ()), (C, 0, 1, (2,))], 2, 1)
    base = simulate(plan, table([1], [1]), Strategy((1,)))
    slow = simulate(plan, table([1], [1]), Strategy((1,)), interference=1.5)
    assert slow.makespan == pytest.approx(base.makespan + 1.0)


def test_missing_degree_is_an_error():
    plan = hand_plan([(F, 0, 0, ())], 1, 1)
    with pytest.raises(SimulationError, match="missing cost entry"):
        simulate(plan, table([1], [0]), Strategy((2,)))


def test_wrong_strategy_length_is_an_error():
    plan = hand_plan([(F, 0, 0, ())], 1, 1)
    with pytest.raises(SimulationError, match="covers"):
        simulate(plan, table([1], [0]), Strategy((1, 1)))


def test_invalid_plan_is_rejected():
    plan = hand_plan([(F, 0, 0, (0,))], 1, 1)  # self loop
    with pytest.raises(SimulationError, match="invalid plan"):
        simulate(plan, table([1], [0]), Strategy((1,)))


@pytest.mark.parametrize("variant", list(Variant))
def test_zero_comm_makespan_is_total_compute(variant):
    rng = np.random.default_rng(3)
    costs = random_table(rng, 6, sparse_comm=False)
    costs = costs.with_entries(c_fwd=np.zeros_like(costs.c_fwd), c_bwd=np.zeros_like(costs.c_bwd))
    g = build_graph(toy_spec(3))
    res = simulate(build_plan(variant, g), costs, Strategy.uniform(2, 6))
    assert res.makespan == pytest.approx(res.compute_time, rel=1e-12)
    assert res.comm_exposed == pytest.approx(0.0, abs=1e-12)


def test_export_empty_trace(tmp_path):
    paths = export_trace(SimResult(0.0, 0.0, 0.0, 0.0, ()), tmp_path / "t.json")
    assert [ev for ev in json.loads(paths[0].read_text()) if ev.get("ph") == "X"] == []
    assert paths[1].suffix == ".svg" and paths[1].exists()


def test_export_three_events_roundtrip(tmp_path):
    trace = (TraceEvent(0, Stream.COMPUTE, 0.0, 1.25e-3, "F0"), TraceEvent(1, Stream.COMM, 1.25e-3, 2e-3, "C0"),
             TraceEvent(2, Stream.COMPUTE, 1.25e-3, 3.5e-3, "F1"))
    res = SimResult(3.5e-3, 1.0, 0.0, 0.0, trace)
    path, _ = export_trace(res, tmp_path / "t.json")
    events = [ev for ev in json.loads(path.read_text()) if ev["ph"] == "X"]
    assert len(events) == 3
    assert events[0]["ts"] == pytest.approx(0.0) and events[0]["dur"] == pytest.approx(1250.0)
    assert {ev["tid"] for ev in events} == {0, 1}
    assert read_chrome_trace(path) == [(e.op_id, e.start, e.end) for e in trace]


def test_export_simulated_trace_roundtrip(tmp_path):
    g = build_graph(toy_spec(2))
    costs = random_table(np.random.default_rng(1), 4)
    res = simulate(build_plan(Variant.OASES, g), costs, Strategy((1, 2, 2, 4)))
    path, _ = export_trace(res, tmp_path / "oases.json")
    assert read_chrome_trace(path) == [(e.op_id, e.start, e.end) for e in res.trace]


def test_breakdown_serialized_plan():
    plan = hand_plan([(F, 0, 0, ()), (C, 0, 0, (0,)), (F, 1, 0, (1,))], 1, 2)
    b = breakdown(simulate(plan, table([1, 1], [0.5, 0]), Strategy((1, 1))))
    assert b["comm_fraction"] == pytest.approx(1 / 5)
    assert sum(b.values()) == pytest.approx(1.0)


def test_breakdown_fully_hidden_comm():
    plan = hand_plan([(F, 0, 0, ()), (C, 0, 0, (0,)), (F, 0, 1, ()), (F, 1, 0, (1,))], 2, 2)
    b = breakdown(simulate(plan, table([1, 1], [1, 0]), Strategy((1, 1))))
    assert b["comm_fraction"] == 0.0
    assert b["idle_fraction"] == pytest.approx(0.0, abs=1e-12)


def test_breakdown_rejects_zero_makespan():
    with pytest.raises(SimulationError):
        breakdown(SimResult(0.0, 0.0, 0.0, 0.0))


def test_default_breakdown_on_3090_like_profile():
    spec = toy_spec(24, hidden_size=3072, seq_len=1024, attention_heads=48, global_batch=4)
    g = build_graph(spec)
    costs = build_cost_vectors(g, spec, hardware_preset("3090"))
    res = simulate(build_plan(Variant.DEFAULT, g), costs, Strategy.uniform(4, 48))
    assert 0.55 <= breakdown(res)["comm_fraction"] <= 0.75


def test_simulation_is_deterministic():
    g = build_graph(toy_spec(3))
    costs = random_table(np.random.default_rng(7), 6)
    s = Strategy((1, 2, 4, 4, 2, 1))
    a = simulate(build_plan(Variant.OASES, g), costs, s)
    b = simulate(build_plan(Variant.OASES, g), costs, s)
    assert a.to_json() == b.to_json()


def sim_all(g, costs, s):
    return {v: simulate(build_plan(v, g), costs, s) for v in Variant}


@settings(max_examples=150)
@given(st.integers(1, 4), st.integers(0, 2**32 - 1), st.booleans())
def test_provable_dominance_chain(L, seed, uniform):
    rng = np.random.default_rng(seed)
    costs = random_table(rng, 2 * L)
    s = Strategy.uniform(2, 2 * L) if uniform else random_strategy(rng, 2 * L, costs.degrees)
    r = sim_all(build_graph(toy_spec(L)), costs, s)
    tol = 1e-9 * max(1.0, r[Variant.DEFAULT].makespan)
    assert r[Variant.INTRA_PASS].makespan <= r[Variant.DEFAULT].makespan + tol
    assert r[Variant.CROSS_PASS].makespan <= r[Variant.INTRA_PASS].makespan + tol


def test_oases_fastest_on_analytic_tables():
    rng = np.random.default_rng(2024)
    for _ in range(150):
        _, g, _, costs = random_analytic(rng)
        s = random_strategy(rng, costs.num_blocks, costs.degrees)
        r = sim_all(g, costs, s)
        assert r[Variant.OASES].makespan <= r[Variant.CROSS_PASS].makespan * (1 + 1e-12)


@settings(max_examples=100)
@given(st.integers(1, 4), st.integers(0, 2**32 - 1), st.sampled_from(list(Variant)))
def test_trace_invariants_and_lower_bound(L, seed, variant):
    rng = np.random.default_rng(seed)
    costs = random_table(rng, 2 * L)
    s = random_strategy(rng, 2 * L, costs.degrees)
    plan = build_plan(variant, build_graph(toy_spec(L)))
    res = simulate(plan, costs, s)
    ends = {e.op_id: e.end for e in res.trace}
    for stream in Stream:
        evs = sorted((e for e in res.trace if e.stream is stream), key=lambda e: e.start)
        for a, b in zip(evs, evs[1:]):
            assert a.end <= b.start + 1e-12
    for op in plan.ops:
        ev = next(e for e in res.trace if e.op_id == op.id)
        assert all(ev.start >= ends[d] - 1e-12 for d in op.deps)
    comm = sum(e.duration for e in res.trace if e.stream is Stream.COMM)
    assert res.makespan >= max(res.compute_time, comm) - 1e-9
    assert 0.0 <= res.compute_busy_fraction <= 1.0 + 1e-12
    assert res.comm_exposed >= 0.0


def test_oases_peak_memory_below_no_recompute_plan():
    rng = np.random.default_rng(11)
    hw = hardware_preset("3090")
    for L in (1, 2, 4):
        for H in (256, 1024):
            spec = toy_spec(L, hidden_size=H, seq_len=256, attention_heads=8, global_batch=8)
            g = build_graph(spec)
            rc = build_cost_vectors(g, spec, hw)
            no_spec = toy_spec(L, hidden_size=H, seq_len=256, attention_heads=8, global_batch=8,
                               recompute_enabled=False)
            no_rc = build_cost_vectors(g, no_spec, hw)
            s = random_strategy(rng, 2 * L, hw.candidate_degrees)
            oases = simulate(build_plan(Variant.OASES, g), rc, s)
            for v in Variant:
                plain = simulate(build_plan(v, g, recompute=False), no_rc, s)
                assert oases.peak_memory <= plain.peak_memory
