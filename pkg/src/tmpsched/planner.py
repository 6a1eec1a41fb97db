"""Cost model and strategy search over per-block parallel degrees.

The estimated iteration time of a strategy is the forward and backward node
costs of the two-sub-batch pipeline plus resharding costs on every edge whose
endpoints use different degrees.  Because the block graph is a chain and edge
costs couple only neighbours, the optimum under a memory budget is found
exactly by dynamic programming over (block, degree, memory bucket).
"""

from __future__ import annotations

import itertools
import json
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from . import kernels
from .costs import CostVectors, HardwareProfile
from .model import ModelGraph

FORWARD = "Forward"
BACKWARD = "Backward"
DEFAULT_GRANULARITY = float(2**20)
MAX_DP_CELLS = 5 * 10**7  # blocks x degrees x memory buckets


class PlannerError(ValueError):
    pass


class InfeasibleError(PlannerError):
    """No strategy fits the memory budget."""


class SolverError(PlannerError):
    """The search itself failed (as opposed to the instance being infeasible)."""


@dataclass(frozen=True)
class Strategy:
    degrees: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "degrees", tuple(int(d) for d in self.degrees))

    @classmethod
    def uniform(cls, degree: int, num_blocks: int) -> "Strategy":
        return cls((degree,) * num_blocks)

    def __len__(self) -> int:
        return len(self.degrees)

    def check(self, candidate_degrees: Sequence[int], num_blocks: int) -> None:
        if len(self.degrees) != num_blocks:
            raise PlannerError(f"strategy has {len(self.degrees)} entries for {num_blocks} blocks")
        bad = [d for d in self.degrees if d not in candidate_degrees]
        if bad:
            raise PlannerError(f"degree {bad[0]} is not a candidate degree {tuple(candidate_degrees)}")

    def indices(self, costs: CostVectors) -> np.ndarray:
        self.check(costs.degrees, costs.num_blocks)
        return np.array([costs.degrees.index(d) for d in self.degrees], dtype=np.intp)

    def one_hot(self, candidate_degrees: Sequence[int]) -> np.ndarray:
        s = np.zeros((len(self.degrees), len(candidate_degrees)))
        for v, d in enumerate(self.degrees):
            s[v, list(candidate_degrees).index(d)] = 1.0
        return s

    def run_length(self) -> str:
        """Render as e.g. ``[[2] * 8 + [4] * 16]``."""
        if not self.degrees:
            return "[]"
        runs = [(d, len(list(g))) for d, g in itertools.groupby(self.degrees)]
        return "[" + " + ".join(f"[{d}] * {n}" for d, n in runs) + "]"

    @property
    def is_uniform(self) -> bool:
        return len(set(self.degrees)) <= 1


@dataclass(frozen=True)
class PlanResult:
    strategy: Strategy
    predicted_time: float
    predicted_memory: float
    solve_time: float
    evaluated: int = 0
    granularity: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self, timing: bool = True) -> dict:
        out = {
            "degrees": list(self.strategy.degrees),
            "strategy": self.strategy.run_length(),
            "predicted_time": self.predicted_time,
            "predicted_memory": self.predicted_memory,
        }
        if self.granularity is not None:
            out["memory_granularity"] = self.granularity
        if self.evaluated:
            out["evaluated"] = self.evaluated
        if timing:
            out["solve_time_ms"] = self.solve_time * 1e3
        out.update(self.extra)
        return out

    def to_json(self, timing: bool = True) -> str:
        return json.dumps(self.to_dict(timing=timing), indent=1, sort_keys=True)


def _pass_vectors(costs: CostVectors, idx: np.ndarray, pass_: str):
    if pass_ == FORWARD:
        return costs.pick("d_fwd", idx), costs.pick("c_fwd", idx)
    if pass_ == BACKWARD:
        # the backward pass walks the chain from the last block
        return costs.pick("d_bwd", idx)[::-1], costs.pick("c_bwd", idx)[::-1]
    raise PlannerError(f"unknown pass {pass_!r}")


def node_cost(costs: CostVectors, strategy: Strategy, pass_: str) -> float:
    """Two-sub-batch pipeline time of one pass.

    The first block's sub-batch-0 compute runs alone; afterwards each compute
    overlaps the other sub-batch's most recent communication, and the final
    communication runs alone.
    """
    d, c = _pass_vectors(costs, strategy.indices(costs), pass_)
    k = len(d)
    if k == 0:
        return 0.0
    total = d[0]
    for i in range(1, k):
        total += max(d[i], c[i - 1])
    for i in range(k):
        total += max(d[i], c[i])
    return float(total + c[k - 1])


def edge_cost_matrix(costs: CostVectors, pair: tuple[int, int],
                     profile: HardwareProfile | None = None) -> np.ndarray:
    """Resharding cost matrix for adjacent blocks ``(v, u)``.

    Moving to a larger degree reshards in the forward pass, to a smaller one
    in the backward pass.  Either way the blocked AllGather also kills the
    overlap between the communication that precedes it and the compute that
    follows it.  ``profile`` is accepted for interface symmetry; the AllGather
    times come from ``costs.t_allgather``.
    """
    v, u = pair
    if u != v + 1:
        raise PlannerError(f"edge {pair} is not between adjacent blocks")
    p = len(costs.degrees)
    R = np.zeros((p, p))
    for i in range(p):
        for j in range(p):
            if i < j:
                R[i, j] = costs.t_allgather[v, i, j] + min(costs.c_fwd[v, i], costs.d_fwd[u, j])
            elif i > j:
                R[i, j] = costs.t_allgather[v, i, j] + min(costs.c_bwd[u, j], costs.d_bwd[v, i])
    return R


def edge_cost_matrices(costs: CostVectors, profile: HardwareProfile | None = None) -> list[np.ndarray]:
    return [edge_cost_matrix(costs, (v, v + 1), profile) for v in range(costs.num_blocks - 1)]


def objective(costs: CostVectors, edges: Sequence[np.ndarray], strategy: Strategy) -> float:
    idx = strategy.indices(costs)
    total = node_cost(costs, strategy, FORWARD) + node_cost(costs, strategy, BACKWARD)
    for v, R in enumerate(edges):
        total += R[idx[v], idx[v + 1]]
    return float(total)


def memory_usage(costs: CostVectors, strategy: Strategy) -> float:
    """Parameter state and saved inputs of every block plus the largest backward working set."""
    idx = strategy.indices(costs)
    total = 0.0
    for b, j in enumerate(idx):
        total += costs.m_param[b, j] + costs.m_saved[b, j]
    peak = max((costs.m_runtime[b, j] for b, j in enumerate(idx)), default=0.0)
    return float(total + peak)


def _chain_terms(costs: CostVectors, edges: Sequence[np.ndarray]):
    dF, cF, dB, cB = costs.d_fwd, costs.c_fwd, costs.d_bwd, costs.c_bwd
    k, p = dF.shape
    unary = np.maximum(dF, cF) + np.maximum(dB, cB)
    if k:
        unary[0] += dF[0] + cB[0]
        unary[k - 1] += cF[k - 1] + dB[k - 1]
    pair = np.zeros((k, p, p))
    for v in range(1, k):
        pair[v] = (np.maximum(dF[v][None, :], cF[v - 1][:, None])
                   + np.maximum(dB[v - 1][:, None], cB[v][None, :])
                   + edges[v - 1])
    return unary, pair


def solve(graph: ModelGraph, costs: CostVectors, edges: Sequence[np.ndarray] | None,
          profile: HardwareProfile | None, budget: float,
          granularity: float = DEFAULT_GRANULARITY) -> PlanResult:
    """Minimize the estimated iteration time subject to ``memory_usage < budget``."""
    t0 = time.perf_counter()
    if costs.num_blocks != len(graph.blocks):
        raise PlannerError("cost tables and graph disagree on block count")
    if granularity <= 0:
        raise PlannerError("memory granularity must be positive")
    if edges is None:
        edges = edge_cost_matrices(costs, profile)
    k = costs.num_blocks
    if k == 0:
        return PlanResult(Strategy(()), 0.0, 0.0, time.perf_counter() - t0, granularity=granularity)
    cells = costs.num_blocks * len(costs.degrees) * (budget / granularity + 2)
    if cells > MAX_DP_CELLS:
        raise PlannerError(
            f"memory granularity {granularity:.6g} gives {budget / granularity:.3g} buckets for a "
            f"budget of {budget:.6g}; use a granularity of at least {budget * costs.num_blocks * len(costs.degrees) / MAX_DP_CELLS:.3g}")
    unary, pair = _chain_terms(costs, edges)
    weight = costs.m_param + costs.m_saved
    best_val, best_choice = np.inf, None
    previous_mask = None
    for peak in np.unique(costs.m_runtime):
        allowed = costs.m_runtime <= peak
        if not allowed.any(axis=1).all():
            continue
        if previous_mask is not None and np.array_equal(allowed, previous_mask):
            continue
        previous_mask = allowed
        try:
            val, choice = kernels.chain_dp(unary, pair, weight, allowed, float(peak), float(budget), granularity)
        except Exception as exc:  # pragma: no cover - kernel failure is a solver bug
            raise SolverError(f"chain DP failed: {exc}") from exc
        if choice is not None and val < best_val:
            best_val, best_choice = val, choice
    if best_choice is None:
        raise InfeasibleError(
            f"no strategy fits the memory budget of {budget:.6g} bytes "
            f"(smallest possible usage is {minimum_memory(costs):.6g})")
    strategy = Strategy(tuple(costs.degrees[j] for j in best_choice))
    return PlanResult(
        strategy=strategy,
        predicted_time=objective(costs, edges, strategy),
        predicted_memory=memory_usage(costs, strategy),
        solve_time=time.perf_counter() - t0,
        granularity=granularity,
    )


def minimum_memory(costs: CostVectors) -> float:
    """Lower bound on memory_usage over all strategies."""
    if costs.num_blocks == 0:
        return 0.0
    return float((costs.m_param + costs.m_saved).min(axis=1).sum() + costs.m_runtime.min(axis=1).max())


def brute_force(graph: ModelGraph, costs: CostVectors, edges: Sequence[np.ndarray] | None,
                profile: HardwareProfile | None, budget: float, cap: int = 10**6) -> PlanResult:
    """Exhaustive search; ties go to the lexicographically smallest degree vector."""
    t0 = time.perf_counter()
    if edges is None:
        edges = edge_cost_matrices(costs, profile)
    k, p = costs.num_blocks, len(costs.degrees)
    if p**k > cap:
        raise SolverError(f"{p}^{k} strategies exceed the brute-force cap of {cap}")
    best = None
    evaluated = 0
    for combo in itertools.product(costs.degrees, repeat=k):
        s = Strategy(combo)
        evaluated += 1
        mem = memory_usage(costs, s)
        if not mem < budget:
            continue
        val = objective(costs, edges, s)
        if best is None or val < best[0]:
            best = (val, s, mem)
    if best is None:
        raise InfeasibleError(f"no strategy fits the memory budget of {budget:.6g} bytes")
    return PlanResult(best[1], best[0], best[2], time.perf_counter() - t0, evaluated=evaluated)


def rank_correlation(costs: CostVectors, edges: Sequence[np.ndarray], strategies: Sequence[Strategy],
                     sim_results: Sequence) -> float:
    """Spearman correlation between predicted times and simulated makespans."""
    if len(strategies) != len(sim_results):
        raise PlannerError("strategies and sim_results differ in length")
    if len(strategies) < 3:
        raise PlannerError("rank correlation needs at least 3 strategies")
    predicted = [objective(costs, edges, s) for s in strategies]
    observed = [getattr(r, "makespan", r) for r in sim_results]
    if len(set(predicted)) == 1 or len(set(observed)) == 1:
        raise PlannerError("degenerate ranking: all values are equal")
    return float(stats.spearmanr(predicted, observed).statistic)
