"""Tensor-parallel training schedules: operator graphs, costs, simulation and strategy search."""

from .costs import CostVectors, HardwareProfile, build_cost_vectors, load_measured_costs
from .model import ModelGraph, ModelSpec, build_graph
from .planner import PlanResult, Strategy, brute_force, solve
from .schedule import SchedulePlan, Variant, build_plan
from .sim import SimResult, simulate

__version__ = "0.1.0"

__all__ = [
    "CostVectors", "HardwareProfile", "ModelGraph", "ModelSpec", "PlanResult", "SchedulePlan",
    "SimResult", "Strategy", "Variant", "brute_force", "build_cost_vectors", "build_graph",
    "build_plan", "load_measured_costs", "simulate", "solve",
]
