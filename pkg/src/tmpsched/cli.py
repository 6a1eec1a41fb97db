"""Command-line front end.

Every command reads one JSON run config, writes JSON artifacts into the
output directory and prints a short table.  Wall-clock timings go to a
separate ``timing.json`` so the other artifacts are byte-reproducible.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics
from .costs import CostError, CostVectors, HardwareProfile, build_cost_vectors, load_measured_costs
from .model import ModelError, ModelGraph, ModelSpec, build_graph
from .planner import (DEFAULT_GRANULARITY, InfeasibleError, PlannerError, PlanResult, Strategy,
                      edge_cost_matrices, memory_usage, solve)
from .presets import hardware_preset
from .schedule import Variant, build_plan
from .sim import SimResult, breakdown, export_trace, simulate

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_IO = 4

ALL_VARIANTS = (Variant.DEFAULT, Variant.INTRA_PASS, Variant.CROSS_PASS, Variant.OASES)


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: ModelSpec
    hardware: HardwareProfile
    variants: tuple[Variant, ...] = ALL_VARIANTS
    strategy: object = "plan"  # "plan" or a Strategy
    output_dir: Path = Path("out")
    seed: int = 0
    measured_costs: Path | None = None
    memory_budget: float | None = None
    mem_granularity: float = DEFAULT_GRANULARITY
    interference: float = 1.0
    extra: dict = field(default_factory=dict)

    @property
    def budget(self) -> float:
        return self.memory_budget if self.memory_budget is not None else self.hardware.memory_capacity


_RUN_LENGTH = re.compile(r"\[\s*(\d+)\s*\]\s*\*\s*(\d+)")


def parse_strategy(value, num_blocks: int):
    """Accept "plan", an int (uniform), a list of degrees, or run-length text like "[[2] * 8 + [4] * 16]"."""
    if value == "plan":
        return "plan"
    if isinstance(value, bool):
        raise ConfigError(f"strategy: unsupported value {value!r}")
    if isinstance(value, int):
        return Strategy.uniform(value, num_blocks)
    if isinstance(value, list) and all(isinstance(d, int) and not isinstance(d, bool) for d in value):
        return Strategy(tuple(value))
    if isinstance(value, str):
        runs = _RUN_LENGTH.findall(value)
        if runs:
            return Strategy(tuple(int(d) for d, n in runs for _ in range(int(n))))
    raise ConfigError(f"strategy: expected \"plan\", a degree, a list of degrees or run-length text, got {value!r}")


def parse_variants(names) -> tuple[Variant, ...]:
    if isinstance(names, str):
        names = [n for n in names.split(",") if n.strip()]
    if not names:
        raise ConfigError("variants: must be non-empty")
    try:
        return tuple(Variant.parse(n.strip()) for n in names)
    except ValueError as exc:
        raise ConfigError(f"variants: {exc}") from None


KNOWN_KEYS = {"model", "hardware", "hardware_preset", "variants", "strategy", "output_dir", "seed",
              "measured_costs", "memory_budget", "mem_granularity", "interference"}


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise OSError(f"{path}: cannot read config: {exc.strerror}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return config_from_dict(data, base=path.parent)


def config_from_dict(data: dict, base: Path = Path(".")) -> RunConfig:
    unknown = sorted(set(data) - KNOWN_KEYS)
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown config field")
    if "model" not in data:
        raise ConfigError("model: missing required config field")
    try:
        model = ModelSpec.from_dict(data["model"])
    except (ModelError, TypeError) as exc:
        raise ConfigError(f"model.{exc}") from None
    if ("hardware" in data) == ("hardware_preset" in data):
        raise ConfigError("hardware: give exactly one of hardware or hardware_preset")
    try:
        if "hardware" in data:
            hardware = HardwareProfile.from_dict(data["hardware"])
        else:
            hardware = hardware_preset(data["hardware_preset"])
    except KeyError as exc:
        raise ConfigError(f"hardware_preset: {exc.args[0]}") from None
    except (CostError, TypeError) as exc:
        raise ConfigError(f"hardware.{exc}") from None
    num_blocks = len(build_graph(model).blocks)
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError(f"seed: expected an integer, got {seed!r}")
    cfg = RunConfig(
        model=model,
        hardware=hardware,
        variants=parse_variants(data.get("variants", [v.value for v in ALL_VARIANTS])),
        strategy=parse_strategy(data.get("strategy", "plan"), num_blocks),
        output_dir=base / data.get("output_dir", "out"),
        seed=seed,
        measured_costs=(base / data["measured_costs"]) if data.get("measured_costs") else None,
        memory_budget=data.get("memory_budget"),
        mem_granularity=float(data.get("mem_granularity", DEFAULT_GRANULARITY)),
        interference=float(data.get("interference", 1.0)),
    )
    if cfg.memory_budget is not None and not cfg.memory_budget > 0:
        raise ConfigError("memory_budget: must be positive")
    if cfg.mem_granularity <= 0:
        raise ConfigError("mem_granularity: must be positive")
    if isinstance(cfg.strategy, Strategy):
        try:
            cfg.strategy.check(hardware.candidate_degrees, num_blocks)
        except PlannerError as exc:
            raise ConfigError(f"strategy: {exc}") from None
    return cfg


# ------------------------------------------------------------------ pipeline


@dataclass
class Setup:
    graph: ModelGraph
    costs: CostVectors
    edges: list


def prepare(cfg: RunConfig) -> Setup:
    graph = build_graph(cfg.model)
    costs = build_cost_vectors(graph, cfg.model, cfg.hardware)
    if cfg.measured_costs is not None:
        costs = load_measured_costs(cfg.measured_costs, costs)
    return Setup(graph, costs, edge_cost_matrices(costs, cfg.hardware))


def plan_strategy(cfg: RunConfig, setup: Setup) -> PlanResult:
    return solve(setup.graph, setup.costs, setup.edges, cfg.hardware, cfg.budget, cfg.mem_granularity)


def best_uniform(cfg: RunConfig, setup: Setup, variant: Variant = Variant.OASES) -> Strategy:
    """Fastest memory-feasible uniform strategy under ``variant``; ties go to the smaller degree."""
    plan = build_plan(variant, setup.graph, cfg.model.recompute_enabled)
    best = None
    for d in cfg.hardware.candidate_degrees:
        s = Strategy.uniform(d, len(setup.graph.blocks))
        if not memory_usage(setup.costs, s) < cfg.budget:
            continue
        t = simulate(plan, setup.costs, s, cfg.interference).makespan
        if best is None or t < best[0]:
            best = (t, s)
    if best is None:
        raise InfeasibleError(f"no uniform strategy fits the memory budget of {cfg.budget:.6g} bytes")
    return best[1]


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _table(headers: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(headers)]
    line = "  ".join(h.ljust(w) for h, w in zip(headers, widths))
    out = [line, "  ".join("-" * w for w in widths)]
    out += ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows]
    return "\n".join(out)


def cmd_simulate(cfg: RunConfig, out=None) -> dict[str, SimResult]:
    out = out or sys.stdout
    setup = prepare(cfg)
    timing = {}
    if cfg.strategy == "plan":
        planned = plan_strategy(cfg, setup)
        strategy = planned.strategy
        timing["solve_time_ms"] = planned.solve_time * 1e3
    else:
        strategy = cfg.strategy
    results: dict[str, SimResult] = {}
    for v in cfg.variants:
        plan = build_plan(v, setup.graph, cfg.model.recompute_enabled)
        res = simulate(plan, setup.costs, strategy, cfg.interference)
        results[v.value] = res
        _write(cfg.output_dir / f"{v.value}.result.json", res.to_json() + "\n")
        export_trace(res, cfg.output_dir / f"{v.value}.trace.json")
    base = next(iter(results.values())).makespan
    rows, summary = [], []
    for name, res in results.items():
        b = breakdown(res) if res.makespan > 0 else {"comm_fraction": 0.0, "compute_fraction": 0.0,
                                                      "idle_fraction": 0.0}
        speedup = base / res.makespan if res.makespan > 0 else 1.0
        summary.append({"variant": name, "makespan": res.makespan, "speedup": speedup, **b})
        rows.append([name, f"{res.makespan:.6g}", f"{100 * b['comm_fraction']:.1f}%",
                     f"{100 * b['compute_fraction']:.1f}%", f"{100 * b['idle_fraction']:.1f}%", f"{speedup:.2f}x"])
    report = {"seed": cfg.seed, "strategy": strategy.run_length(), "degrees": list(strategy.degrees),
              "rows": summary}
    _write(cfg.output_dir / "simulate.json", _dump(report))
    if timing:
        _write(cfg.output_dir / "timing.json", _dump(timing))
    print(f"strategy {strategy.run_length()}", file=out)
    print(_table(["variant", "makespan_s", "comm", "compute", "idle", "speedup"], rows), file=out)
    return results


def cmd_plan(cfg: RunConfig, out=None) -> PlanResult:
    out = out or sys.stdout
    setup = prepare(cfg)
    result = plan_strategy(cfg, setup)
    _write(cfg.output_dir / "plan.json", result.to_json(timing=False) + "\n")
    _write(cfg.output_dir / "timing.json", _dump({"solve_time_ms": result.solve_time * 1e3}))
    print(f"strategy        {result.strategy.run_length()}", file=out)
    print(f"predicted time  {result.predicted_time:.6g} s", file=out)
    print(f"predicted mem   {result.predicted_memory / 2**30:.3f} GiB (budget {cfg.budget / 2**30:.3f} GiB)",
          file=out)
    print(f"solve time      {result.solve_time * 1e3:.1f} ms", file=out)
    return result


def cmd_ablate(cfg: RunConfig, out=None) -> list[dict]:
    """Makespans for each requested schedule at a fixed strategy, then Oases with the planned strategy."""
    out = out or sys.stdout
    setup = prepare(cfg)
    baseline = best_uniform(cfg, setup) if cfg.strategy == "plan" else cfg.strategy
    planned = plan_strategy(cfg, setup)
    order = [v for v in ALL_VARIANTS if v in cfg.variants]
    rows = []
    for v in order:
        plan = build_plan(v, setup.graph, cfg.model.recompute_enabled)
        rows.append((v.value, baseline, simulate(plan, setup.costs, baseline, cfg.interference)))
    oases = build_plan(Variant.OASES, setup.graph, cfg.model.recompute_enabled)
    rows.append(("+Planner", planned.strategy, simulate(oases, setup.costs, planned.strategy, cfg.interference)))
    base = rows[0][2].makespan
    table, report = [], []
    for name, strat, res in rows:
        speedup = base / res.makespan if res.makespan > 0 else 1.0
        report.append({"row": name, "strategy": strat.run_length(), "makespan": res.makespan, "speedup": speedup})
        table.append([name, strat.run_length(), f"{res.makespan:.6g}", f"{speedup:.2f}x"])
    _write(cfg.output_dir / "ablate.json", _dump({"seed": cfg.seed, "rows": report}))
    print(_table(["schedule", "strategy", "makespan_s", "speedup"], table), file=out)
    return report


def cmd_verify_numerics(seed: int = 0, trials: int = 100, out=None, output_dir: Path | None = None) -> bool:
    out = out or sys.stdout
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2**31 - 1, size=trials).tolist()
    rows, report, ok = [], {"seed": seed, "trials": trials, "identity": {}, "elision": {}}, True
    for w in (1, 2, 4, 8):
        checks = [numerics.allreduce_grad_identity(w, seed=s) for s in seeds]
        dev = max(c.max_deviation for c in checks)
        elision = max(numerics.recompute_elision_equivalence(numerics.ToyShardedModel.random(w, seed=s))
                      for s in seeds)
        ok &= dev < 1e-8 and elision < 1e-10
        report["identity"][str(w)] = dev
        report["elision"][str(w)] = elision
        rows.append([str(w), f"{dev:.3e}", f"{elision:.3e}"])
    print(_table(["w", "grad identity dev", "elision dev"], rows), file=out)
    print("numerics OK" if ok else "numerics FAILED", file=out)
    if output_dir is not None:
        _write(Path(output_dir) / "numerics.json", _dump(report))
    return ok


# ----------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tmpsched", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (("simulate", "simulate schedule variants"),
                           ("plan", "search per-block parallel degrees"),
                           ("ablate", "schedule and planner ablation table")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True, help="run config JSON")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--seed", type=int)
        p.add_argument("--variants", help="comma-separated, e.g. Default,Oases")
        p.add_argument("--mem-granularity", type=float, help="planner memory bucket size in bytes")
    p = sub.add_parser("verify-numerics", help="check the AllReduce gradient identity")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--out", help="write numerics.json here")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "verify-numerics":
            ok = cmd_verify_numerics(args.seed, args.trials, output_dir=args.out)
            return EXIT_OK if ok else EXIT_CHECK_FAILED
        cfg = load_config(args.config)
        if args.out:
            cfg.output_dir = Path(args.out)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.variants:
            cfg.variants = parse_variants(args.variants)
        if args.mem_granularity is not None:
            if args.mem_granularity <= 0:
                raise ConfigError("--mem-granularity: must be positive")
            cfg.mem_granularity = args.mem_granularity
        {"simulate": cmd_simulate, "plan": cmd_plan, "ablate": cmd_ablate}[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CostError as exc:
        # measured-cost tables are config inputs too
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except PlannerError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
