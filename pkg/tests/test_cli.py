import json
import subprocess
import sys
import time

import pytest

from tmpsched import cli
from tmpsched.cli import (EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_IO, EXIT_OK, ConfigError, config_from_dict,
                          load_config, main, parse_strategy)
from tmpsched.planner import Strategy

SMALL = {"hidden_size": 256, "num_layers": 2, "seq_len": 64, "attention_heads": 8, "global_batch": 4}


def write_config(tmp_path, **overrides):
    data = {"model": dict(SMALL), "hardware_preset": "3090", "variants": ["Default", "Oases"],
            "strategy": "plan", "output_dir": "out", "seed": 0}
    data.update(overrides)
    path = tmp_path / "run.json"
    path.write_text(json.dumps(data, indent=1))
    return path


def test_simulate_two_variants(tmp_path, capsys):
    assert main(["simulate", "--config", str(write_config(tmp_path, strategy=4))]) == EXIT_OK
    out = tmp_path / "out"
    assert sorted(p.name for p in out.glob("*.trace.json")) == ["Default.trace.json", "Oases.trace.json"]
    assert (out / "Oases.trace.svg").exists()
    text = capsys.readouterr().out
    assert "speedup" in text and "1.00x" in text
    rows = json.loads((out / "simulate.json").read_text())["rows"]
    assert [r["variant"] for r in rows] == ["Default", "Oases"]
    assert rows[1]["speedup"] > 1.0


def test_odd_batch_names_the_field(tmp_path, capsys):
    path = write_config(tmp_path, model={**SMALL, "global_batch": 3})
    assert main(["simulate", "--config", str(path)]) == EXIT_CONFIG
    assert "global_batch" in capsys.readouterr().err


def test_malformed_json_reports_line(tmp_path, capsys):
    path = tmp_path / "run.json"
    path.write_text('{\n "model": {\n  "hidden_size": 256,,\n }\n}')
    assert main(["plan", "--config", str(path)]) == EXIT_CONFIG
    assert "run.json:3:" in capsys.readouterr().err


def test_missing_config_is_io_error(tmp_path):
    assert main(["plan", "--config", str(tmp_path / "nope.json")]) == EXIT_IO


def test_unwritable_output_is_io_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    path = write_config(tmp_path)
    assert main(["plan", "--config", str(path), "--out", str(blocker / "sub")]) == EXIT_IO


def test_infeasible_budget(tmp_path, capsys):
    path = write_config(tmp_path, memory_budget=1024)
    assert main(["plan", "--config", str(path)]) == EXIT_INFEASIBLE
    assert "memory budget" in capsys.readouterr().err


def test_granularity_too_fine_is_config_error(tmp_path):
    path = write_config(tmp_path)
    assert main(["plan", "--config", str(path), "--mem-granularity", "1e-6"]) == EXIT_CONFIG
    assert main(["plan", "--config", str(path), "--mem-granularity", "-1"]) == EXIT_CONFIG


@pytest.mark.parametrize("overrides,match", [
    (dict(variants=[]), "variants"),
    (dict(variants=["Megatron"]), "variants"),
    (dict(strategy=[4, 4]), "strategy"),
    (dict(strategy=3), "strategy"),
    (dict(seed="x"), "seed"),
    (dict(hardware_preset="a100"), "hardware_preset"),
    (dict(colour="red"), "colour"),
])
def test_config_field_errors(tmp_path, overrides, match):
    with pytest.raises(ConfigError, match=match):
        load_config(write_config(tmp_path, **overrides))


def test_hardware_and_preset_are_exclusive():
    with pytest.raises(ConfigError, match="exactly one"):
        config_from_dict({"model": SMALL})


def test_parse_strategy_forms():
    assert parse_strategy("plan", 4) == "plan"
    assert parse_strategy(2, 3) == Strategy((2, 2, 2))
    assert parse_strategy([1, 2], 2) == Strategy((1, 2))
    assert parse_strategy("[[2] * 2 + [4] * 1]", 3) == Strategy((2, 2, 4))


def test_reruns_are_byte_identical(tmp_path):
    path = write_config(tmp_path, variants=["Default", "IntraPass", "CrossPass", "Oases"])
    snapshots = []
    for run in range(2):
        out = tmp_path / f"run{run}"
        for cmd in ("simulate", "plan", "ablate"):
            assert main([cmd, "--config", str(path), "--out", str(out), "--seed", "7"]) == EXIT_OK
        snapshots.append({p.name: p.read_bytes() for p in sorted(out.iterdir()) if p.name != "timing.json"})
    assert snapshots[0] == snapshots[1]
    assert "plan.json" in snapshots[0] and "ablate.json" in snapshots[0]


def test_plan_writes_run_length_and_timing(tmp_path):
    path = write_config(tmp_path)
    assert main(["plan", "--config", str(path)]) == EXIT_OK
    plan = json.loads((tmp_path / "out" / "plan.json").read_text())
    assert plan["strategy"].startswith("[[") and len(plan["degrees"]) == 4
    assert "solve_time_ms" in json.loads((tmp_path / "out" / "timing.json").read_text())


def test_single_candidate_plan_is_uniform(tmp_path):
    hw = {"num_devices": 4, "memory_capacity": 2**34, "compute_throughput": 1e13,
          "bandwidth_by_group": {"2": 1e10}, "latency_by_group": {"2": 1e-5}, "candidate_degrees": [2]}
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"model": SMALL, "hardware": hw}))
    result = cli.cmd_plan(load_config(path), out=sys.stderr)
    assert result.strategy == Strategy.uniform(2, 4)


def test_planned_strategy_beats_every_uniform(tmp_path):
    from tmpsched.schedule import Variant, build_plan
    from tmpsched.sim import simulate

    cfg = load_config(write_config(tmp_path, hardware_preset="nvlink3090"))
    setup = cli.prepare(cfg)
    planned = cli.plan_strategy(cfg, setup)
    plan = build_plan(Variant.OASES, setup.graph)
    t_plan = simulate(plan, setup.costs, planned.strategy).makespan
    uniform = cli.best_uniform(cfg, setup)
    assert t_plan <= simulate(plan, setup.costs, uniform).makespan * (1 + 1e-12)


def test_ablate_rows_and_zero_comm(tmp_path):
    hw = {"num_devices": 4, "memory_capacity": 2**34, "compute_throughput": 1e13,
          "bandwidth_by_group": {"2": 1e300, "4": 1e300}, "latency_by_group": {"2": 0.0, "4": 0.0},
          "candidate_degrees": [1, 2, 4]}
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"model": SMALL, "hardware": hw, "variants": ["Default", "CrossPass", "Oases"],
                                "strategy": 4}))
    assert main(["ablate", "--config", str(path)]) == EXIT_OK
    rows = json.loads((tmp_path / "out" / "ablate.json").read_text())["rows"]
    assert [r["row"] for r in rows] == ["Default", "CrossPass", "Oases", "+Planner"]
    assert all(f"{r['speedup']:.2f}" == "1.00" for r in rows[:3])


def test_ablate_progression_on_3090_profile(tmp_path):
    model = {"hidden_size": 2048, "num_layers": 24, "seq_len": 1024, "attention_heads": 32, "global_batch": 4}
    path = write_config(tmp_path, model=model, variants=["Default", "IntraPass", "CrossPass", "Oases"])
    report = cli.cmd_ablate(load_config(path), out=sys.stderr)
    speedups = [r["speedup"] for r in report]
    assert len(report) == 5
    assert all(b >= a * (1 - 1e-12) for a, b in zip(speedups, speedups[1:]))


def test_plan_48_blocks_under_five_seconds(tmp_path):
    model = {"hidden_size": 2048, "num_layers": 24, "seq_len": 1024, "attention_heads": 32, "global_batch": 8}
    hw = {"num_devices": 4, "memory_capacity": 24 * 2**30, "compute_throughput": 35e12,
          "bandwidth_by_group": {"2": 4e10, "4": 4.8e9}, "latency_by_group": {"2": 1e-5, "4": 4e-5},
          "candidate_degrees": [1, 2, 4]}
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"model": model, "hardware": hw}))
    t0 = time.perf_counter()
    assert main(["plan", "--config", str(path)]) == EXIT_OK
    assert time.perf_counter() - t0 < 5.0


def test_verify_numerics_command(tmp_path, capsys):
    assert main(["verify-numerics", "--trials", "3", "--out", str(tmp_path)]) == EXIT_OK
    assert "numerics OK" in capsys.readouterr().out
    assert json.loads((tmp_path / "numerics.json").read_text())["trials"] == 3


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "tmpsched", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "verify-numerics" in proc.stdout
