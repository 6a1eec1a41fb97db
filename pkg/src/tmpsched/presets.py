"""Bundled hardware profiles.

These are synthetic calibrations meant to resemble a consumer-GPU server,
one flavour with NVLink bridges between pairs of cards and one with PCIe
only.  They are not measurements of any real machine.
"""

from __future__ import annotations

from .costs import HardwareProfile

GiB = 1024**3

# bytes/s per group size; latency in seconds
_PRESETS = {
    "3090": dict(
        num_devices=8,
        memory_capacity=24 * GiB,
        compute_throughput=35e12,
        bandwidth_by_group={2: 5.6e9, 4: 4.8e9, 8: 3.8e9},
        latency_by_group={2: 3e-5, 4: 4e-5, 8: 6e-5},
        candidate_degrees=(1, 2, 4, 8),
    ),
    "nvlink3090": dict(
        num_devices=8,
        memory_capacity=24 * GiB,
        compute_throughput=35e12,
        bandwidth_by_group={2: 40.0e9, 4: 4.8e9, 8: 3.8e9},
        latency_by_group={2: 1e-5, 4: 4e-5, 8: 6e-5},
        candidate_degrees=(1, 2, 4, 8),
    ),
}


def preset_names() -> list[str]:
    return sorted(_PRESETS)


def hardware_preset(name: str, **overrides) -> HardwareProfile:
    """Return the named preset, with fields optionally overridden."""
    try:
        params = dict(_PRESETS[name])
    except KeyError:
        raise KeyError(f"unknown hardware preset {name!r}; choose from {preset_names()}") from None
    params.update(overrides)
    params.setdefault("name", f"synthetic-{name}")
    return HardwareProfile(**params)
