"""Per-block, per-degree time and memory costs.

Costs come from an alpha-beta link model plus a linear compute model, and can
be overridden entry by entry from measured tables.  Every time entry is for a
single sub-batch (half of the global batch).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from .model import ModelGraph, ModelSpec

TIME_FIELDS = ("d_fwd", "d_bwd", "c_fwd", "c_bwd")
MEMORY_FIELDS = ("m_param", "m_saved", "m_runtime")
FIELDS = TIME_FIELDS + MEMORY_FIELDS

# parameter + gradient + optimizer state bytes per parameter under mixed precision
DEFAULT_STATE_BYTES = 16


class CostError(ValueError):
    pass


def _is_pow2(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


@dataclass(frozen=True)
class HardwareProfile:
    num_devices: int
    memory_capacity: float
    compute_throughput: float
    bandwidth_by_group: Mapping[int, float]
    latency_by_group: Mapping[int, float]
    candidate_degrees: tuple[int, ...]
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "candidate_degrees", tuple(int(d) for d in self.candidate_degrees))
        object.__setattr__(self, "bandwidth_by_group", {int(k): float(v) for k, v in self.bandwidth_by_group.items()})
        object.__setattr__(self, "latency_by_group", {int(k): float(v) for k, v in self.latency_by_group.items()})
        if self.num_devices < 1:
            raise CostError("num_devices: must be positive")
        if self.memory_capacity <= 0:
            raise CostError("memory_capacity: must be positive")
        if self.compute_throughput <= 0:
            raise CostError("compute_throughput: must be positive")
        if not self.candidate_degrees:
            raise CostError("candidate_degrees: must be non-empty")
        if list(self.candidate_degrees) != sorted(set(self.candidate_degrees)):
            raise CostError("candidate_degrees: must be strictly increasing")
        for d in self.candidate_degrees:
            if not _is_pow2(d):
                raise CostError(f"candidate_degrees: {d} is not a power of two")
            if d > self.num_devices:
                raise CostError(f"candidate_degrees: {d} exceeds num_devices={self.num_devices}")
            if d > 1 and d not in self.bandwidth_by_group:
                raise CostError(f"bandwidth_by_group: missing entry for group size {d}")
        for n, bw in self.bandwidth_by_group.items():
            if bw <= 0:
                raise CostError(f"bandwidth_by_group: non-positive bandwidth for group size {n}")
        for n, lat in self.latency_by_group.items():
            if lat < 0:
                raise CostError(f"latency_by_group: negative latency for group size {n}")

    @classmethod
    def from_dict(cls, data: dict) -> "HardwareProfile":
        required = ("num_devices", "memory_capacity", "compute_throughput",
                    "bandwidth_by_group", "candidate_degrees")
        for name in required:
            if name not in data:
                raise CostError(f"{name}: missing required hardware field")
        unknown = sorted(set(data) - set(cls.__dataclass_fields__))
        if unknown:
            raise CostError(f"{unknown[0]}: unknown hardware field")
        data = dict(data)
        data.setdefault("latency_by_group", {})
        return cls(**data)

    @classmethod
    def from_json(cls, path: str | Path) -> "HardwareProfile":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "num_devices": self.num_devices,
            "memory_capacity": self.memory_capacity,
            "compute_throughput": self.compute_throughput,
            "bandwidth_by_group": {str(k): v for k, v in sorted(self.bandwidth_by_group.items())},
            "latency_by_group": {str(k): v for k, v in sorted(self.latency_by_group.items())},
            "candidate_degrees": list(self.candidate_degrees),
        }


@dataclass(frozen=True, eq=False)
class CostVectors:
    """Cost tables indexed ``[block, degree_index]``.

    ``t_allgather[e, i, j]`` is the resharding time on edge ``(e, e+1)`` when
    the upstream block uses degree index ``i`` and the downstream ``j``.
    ``recompute`` records whether ``d_bwd`` already includes the replayed
    forward.
    """

    degrees: tuple[int, ...]
    d_fwd: np.ndarray
    d_bwd: np.ndarray
    c_fwd: np.ndarray
    c_bwd: np.ndarray
    m_param: np.ndarray
    m_saved: np.ndarray
    m_runtime: np.ndarray
    t_allgather: np.ndarray = field(default=None)
    recompute: bool = True

    def __post_init__(self):
        k, p = np.shape(self.d_fwd) if np.ndim(self.d_fwd) == 2 else (0, len(self.degrees))
        for name in FIELDS:
            arr = np.array(getattr(self, name), dtype=np.float64).reshape(k, p)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        ag = self.t_allgather
        if ag is None:
            ag = np.zeros((max(k - 1, 0), p, p))
        ag = np.array(ag, dtype=np.float64).reshape(max(k - 1, 0), p, p)
        ag.setflags(write=False)
        object.__setattr__(self, "t_allgather", ag)
        object.__setattr__(self, "degrees", tuple(int(d) for d in self.degrees))
        if len(self.degrees) != p:
            raise CostError("degrees length does not match cost table width")
        for name in FIELDS:
            if np.any(getattr(self, name) < 0) or not np.all(np.isfinite(getattr(self, name))):
                raise CostError(f"{name}: costs must be finite and non-negative")
        if np.any(self.t_allgather < 0):
            raise CostError("t_allgather: costs must be non-negative")
        if np.any(self.d_bwd < self.d_fwd):
            raise CostError("d_bwd must be at least d_fwd for every block and degree")

    @property
    def num_blocks(self) -> int:
        return self.d_fwd.shape[0]

    def degree_index(self, degree: int) -> int:
        try:
            return self.degrees.index(degree)
        except ValueError:
            raise CostError(f"degree {degree} is not a candidate degree {self.degrees}") from None

    def pick(self, name: str, indices) -> np.ndarray:
        """Per-block entries of table ``name`` at the given degree indices."""
        table = getattr(self, name)
        return table[np.arange(table.shape[0]), np.asarray(indices, dtype=np.intp)]

    def with_entries(self, **tables) -> "CostVectors":
        return replace(self, **tables)

    def to_dict(self) -> dict:
        out = {"degrees": list(self.degrees), "recompute": self.recompute}
        for name in FIELDS:
            out[name] = getattr(self, name).tolist()
        out["t_allgather"] = self.t_allgather.tolist()
        return out


def allreduce_volume(message_bytes: float, degree: int) -> float:
    """Per-device traffic of a ring AllReduce."""
    if message_bytes < 0 or degree < 1:
        raise CostError("allreduce_volume needs message_bytes >= 0 and degree >= 1")
    return 2.0 * message_bytes * (degree - 1) / degree


def allgather_volume(message_bytes: float, degree: int) -> float:
    """Per-device traffic of a ring AllGather: N-1 steps of K/N each."""
    if message_bytes < 0 or degree < 1:
        raise CostError("allgather_volume needs message_bytes >= 0 and degree >= 1")
    return message_bytes * (degree - 1) / degree


def comm_time(volume: float, degree: int, profile: HardwareProfile) -> float:
    if degree == 1:
        return 0.0
    try:
        bandwidth = profile.bandwidth_by_group[degree]
    except KeyError:
        raise CostError(f"no bandwidth entry for group size {degree}") from None
    return volume / bandwidth + profile.latency_by_group.get(degree, 0.0)


def build_cost_vectors(graph: ModelGraph, spec: ModelSpec, profile: HardwareProfile,
                       state_bytes: float = DEFAULT_STATE_BYTES) -> CostVectors:
    """Analytic cost tables for every block at every candidate degree."""
    degrees = profile.candidate_degrees
    k, p = len(graph.blocks), len(degrees)
    half = spec.global_batch // 2
    bpe = spec.bytes_per_element
    tables = {name: np.zeros((k, p)) for name in FIELDS}
    ag = np.zeros((max(k - 1, 0), p, p))
    bwd_factor = 3.0 if spec.recompute_enabled else 2.0
    for b, block in enumerate(graph.blocks):
        boundary_bytes = spec.global_batch * block.activation_elements * bpe
        message = half * block.activation_elements * bpe
        for j, n in enumerate(degrees):
            d = block.flops * half / (n * profile.compute_throughput)
            tables["d_fwd"][b, j] = d
            tables["d_bwd"][b, j] = bwd_factor * d
            if block.comm_op is not None:
                c = comm_time(allreduce_volume(message, n), n, profile)
                tables["c_fwd"][b, j] = c
                tables["c_bwd"][b, j] = c
            tables["m_param"][b, j] = block.param_count / n * state_bytes
            internal = spec.global_batch * block.internal_activation / n * bpe
            if spec.recompute_enabled:
                # only the post-communication block input is kept; it is replicated across the group
                tables["m_saved"][b, j] = boundary_bytes
                tables["m_runtime"][b, j] = internal
            else:
                tables["m_saved"][b, j] = boundary_bytes + internal
                tables["m_runtime"][b, j] = boundary_bytes
        if b + 1 < k:
            for i, ni in enumerate(degrees):
                for j, nj in enumerate(degrees):
                    if i != j:
                        n = max(ni, nj)
                        ag[b, i, j] = comm_time(allgather_volume(message, n), n, profile)
    return CostVectors(degrees=degrees, t_allgather=ag, recompute=spec.recompute_enabled, **tables)


def load_measured_costs(path: str | Path, analytic: CostVectors) -> CostVectors:
    """Override analytic entries with rows ``{block_index, degree, field, seconds_or_bytes}``."""
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CostError(f"{path}: malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    rows = data.get("rows") if isinstance(data, dict) else data
    if not isinstance(rows, list):
        raise CostError(f"{path}: expected a list of rows")
    tables = {name: np.array(getattr(analytic, name)) for name in FIELDS}
    for n, row in enumerate(rows):
        if not isinstance(row, dict):
            raise CostError(f"{path}: row {n} is not an object")
        missing = [key for key in ("block_index", "degree", "field", "seconds_or_bytes") if key not in row]
        if missing:
            raise CostError(f"{path}: row {n} missing {missing[0]}")
        b, name, value = row["block_index"], row["field"], row["seconds_or_bytes"]
        if not isinstance(b, int) or not 0 <= b < analytic.num_blocks:
            raise CostError(f"{path}: row {n} has unknown block index {b!r}")
        if name not in FIELDS:
            raise CostError(f"{path}: row {n} has unknown field {name!r}")
        if not isinstance(value, (int, float)) or value < 0:
            raise CostError(f"{path}: row {n} has negative or non-numeric value {value!r}")
        j = analytic.degree_index(row["degree"])
        tables[name][b, j] = float(value)
    return analytic.with_entries(**tables)
