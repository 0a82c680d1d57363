from __future__ import annotations

import copy
import csv
import io
import json
import re

import pytest
import yaml

from specrl.sweep import cli
from specrl.sweep.config import (
    ConfigError,
    ScenarioSpec,
    build_deployment,
    list_presets,
    load_scenario,
    parse_scenario,
    validate_config,
    validate_scenario,
)
from specrl.sweep.emit import GridError, format_value, render_csv, render_heatmap, render_text
from specrl.sweep.scenario import run_scenario

HW = {"gpu_name": "toy", "hbm_bandwidth_bytes_per_s": 1e12, "peak_flops_per_s": 1e15,
      "hbm_capacity_bytes": 40e9, "interconnect_bandwidth_bytes_per_s": 1e11, "per_layer_comm_latency_s": 1e-6}
MODEL = {"name": "toy", "total_params": 1e9, "active_params_per_token": 1e9, "num_layers": 4,
         "hidden_size": 256, "bytes_per_param": 2, "draft_cost_fraction": 0.05}

BASE = {
    "hardware": HW,
    "model": MODEL,
    "deployment": {"gpus_per_instance": 1, "num_instances": 4},
    "traffic": {"kind": "lognormal", "median_tokens": 200, "p99_tokens": 1000, "max_tokens": 2000, "prompt_tokens": 16},
    "rollout": {"global_batch": 64},
    "speculation": {"k": 3, "alpha": 2.5},
    "pipeline": {"mode": "sync_colocated", "num_steps": 3, "warmup_steps": 1, "generation_share": 0.6},
}


def scenario(axes=(), **kw) -> ScenarioSpec:
    raw = {"name": "toy", "kind": "rollout", "seed": 5, "base": copy.deepcopy(BASE),
           "axes": [{"path": p, "values": list(v)} for p, v in axes], **kw}
    errs: list[str] = []
    spec = parse_scenario(raw, errs)
    errs += validate_scenario(spec)
    assert not errs, errs
    return spec


GRID = scenario([("speculation.k", [1, 3]), ("speculation.alpha", [1.5, 2.5, 4.5])])


@pytest.fixture(scope="module")
def grid_result():
    return run_scenario(GRID)


class TestValidation:
    def test_shipped_files_valid(self):
        from specrl.cost_model import PROFILE_DIR
        from specrl.sweep.config import PRESET_DIR

        paths = sorted(PRESET_DIR.glob("*.yaml")) + sorted(PROFILE_DIR.glob("*.yaml"))
        assert validate_config(paths) == []
        assert {"table1_replay", "table2_replay", "fig3_heatmap", "fig4_sensitivity", "sec33_async"} <= set(list_presets())

    def test_reports_every_violation(self, tmp_path):
        base = copy.deepcopy(BASE)
        base["deployment"] = {"gpus_per_instance": 8, "tensor_parallel": 4, "pipeline_parallel": 4, "num_instances": 1}
        base["traffic"] = {"kind": "lognormal", "mu": 5.0, "sigma": 0, "max_tokens": 100}
        base["pipeline"] = {"mode": "async_noncolocated", "max_policy_lag": 0}
        f = tmp_path / "bad.yaml"
        f.write_text(yaml.safe_dump({"name": "bad", "base": base,
                                     "axes": [{"path": "speculation.nope", "values": [1]}]}))
        errs = validate_config([f])
        text = "\n".join(errs)
        assert "speculation.nope" in text
        assert "gpus_per_instance" in text
        assert "sigma" in text
        assert "max_policy_lag" in text

    def test_malformed_input_never_raises(self, tmp_path):
        f = tmp_path / "junk.yaml"
        f.write_text("- just\n- a list\n")
        assert validate_config([f, tmp_path / "missing.yaml"])

    def test_profile_file(self, tmp_path):
        f = tmp_path / "plan.yaml"
        f.write_text("sharding: {gpus_per_instance: 8, tensor_parallel: 4, pipeline_parallel: 4}\n")
        assert any("gpus_per_instance" in e for e in validate_config([f]))

    def test_cell_cap(self):
        raw = {"name": "big", "base": copy.deepcopy(BASE), "max_cells": 10,
               "axes": [{"path": "speculation.alpha", "values": list(range(11))}]}
        spec = parse_scenario(raw)
        assert any("cap" in e for e in validate_scenario(spec))


class TestDeployment:
    @pytest.mark.parametrize("gpus, lag, expect", [
        (32, 0, (8, 4, 1)), (32, 8, (8, 1, 4)), (2048, 0, (64, 32, 1)), (2048, 2, (32, 32, 2)), (2048, 8, (8, 32, 8)),
    ])
    def test_auto_rule(self, gpus, lag, expect):
        cfg = {"deployment": {"gpus": gpus, "auto": {"min_gpus_per_instance": 8, "min_local_batch": 128}},
               "rollout": {"global_batch": 4096}}
        dep = build_deployment(cfg, lag)
        assert (dep.plan.gpus_per_instance, dep.num_instances, dep.concurrency) == expect


class TestScenario:
    def test_infeasible_cells_carry_no_values(self, grid_result):
        for c in grid_result.cells:
            infeasible = c.coords["speculation.alpha"] > c.coords["speculation.k"] + 1
            assert c.feasible is not infeasible
            if infeasible:
                assert not any("speedup" in k for k in c.values)

    def test_cross_checks(self, grid_result):
        for c in grid_result.cells:
            if c.feasible:
                v = c.values
                assert min(1, v["rollout_speedup"]) - 1e-9 <= v["e2e_speedup"] <= max(1, v["rollout_speedup"]) + 1e-9
                assert v["e2e_speedup"] <= v["amdahl_bound"] + 1e-9

    def test_order_independent(self, grid_result):
        flipped = scenario([("speculation.alpha", [4.5, 2.5, 1.5]), ("speculation.k", [3, 1])])
        other = run_scenario(flipped)
        assert len(other.cells) == len(grid_result.cells)
        for c in other.cells:
            assert grid_result.lookup(**c.coords).values == c.values

    def test_threads_identical(self, grid_result):
        assert run_scenario(GRID, threads=4).summary_json() == grid_result.summary_json()

    def test_capacity_marks_cell_infeasible(self):
        spec = scenario([("model.total_params", [1e9, 1e11])])
        spec.base["model"]["active_params_per_token"] = 1e9
        res = run_scenario(spec)
        big = res.lookup(**{"model.total_params": 1e11})
        assert not big.feasible and "HBM" in big.reason
        assert res.lookup(**{"model.total_params": 1e9}).feasible

    def test_variants(self):
        raw_variants = {"method": {"slow": {"speculation": {"cycle_overhead_s": 0.01}}, "fast": {}}}
        spec = scenario([("variant.method", ["slow", "fast"])], variants=raw_variants)
        res = run_scenario(spec)
        slow = res.lookup(**{"variant.method": "slow"}).values["rollout_speedup"]
        fast = res.lookup(**{"variant.method": "fast"}).values["rollout_speedup"]
        assert slow < fast

    def test_summary_provenance(self, grid_result):
        s = json.loads(grid_result.summary_json())
        assert set(s["provenance"]) == {"config_hash", "seed", "version", "kind", "num_cells"}
        assert s["provenance"]["seed"] == 5


class TestEmit:
    def test_formatting(self):
        assert format_value("rollout_speedup", 1.3489) == "1.35"
        assert format_value("e2e_speedup", 1.0) == "1.00"
        assert format_value("e2e_speedup", 12.34) == "12.3"
        assert format_value("step_ar_s", 185.26) == "185.3"

    def test_csv_round_trip(self, grid_result):
        text = render_csv(grid_result)
        rows = list(csv.DictReader(io.StringIO(text)))
        assert len(rows) == 6
        assert list(rows[0])[:3] == ["speculation.k", "speculation.alpha", "feasible"]
        assert text == render_csv(run_scenario(GRID))

    def test_empty_axes_single_row(self):
        res = run_scenario(scenario())
        assert len(render_csv(res).strip().splitlines()) == 2
        assert len(render_text(res).strip().splitlines()) == 3

    def test_heatmap_cells_and_gray(self, grid_result):
        svg = render_heatmap(grid_result, "speculation.alpha", "speculation.k", "rollout_speedup")
        rects = re.findall(r'<rect [^>]*data-x="([^"]+)" data-y="([^"]+)" data-feasible="(\d)"', svg)
        assert len(rects) == 6
        gray = {(float(x), int(y)) for x, y, f in rects if f == "0"}
        assert gray == {(2.5, 1), (4.5, 1), (4.5, 3)}
        assert "color ramp" in svg

    def test_two_by_two_labels(self):
        res = run_scenario(scenario([("speculation.k", [2, 3]), ("speculation.alpha", [1.5, 2.5])]))
        svg = render_heatmap(res, "speculation.alpha", "speculation.k", "e2e_speedup")
        assert len(re.findall(r'text-anchor="middle" fill=', svg)) == 4

    def test_ramp_monotone(self, grid_result):
        svg = render_heatmap(grid_result, "speculation.alpha", "speculation.k", "rollout_speedup")
        fills = {}
        for m in re.finditer(r'fill="#([0-9a-f]{6})" stroke="#ffffff" data-x="([^"]+)" data-y="([^"]+)" data-feasible="1"', svg):
            fills[(float(m.group(2)), int(m.group(3)))] = m.group(1)
        pts = []
        for (x, y), hexcol in fills.items():
            val = grid_result.lookup(**{"speculation.alpha": x, "speculation.k": y}).values["rollout_speedup"]
            lum = sum(int(hexcol[i:i + 2], 16) for i in (0, 2, 4))
            pts.append((val, lum))
        pts.sort()
        assert all(b[1] <= a[1] for a, b in zip(pts, pts[1:]))

    def test_non_factorable(self, grid_result):
        res = run_scenario(scenario([("speculation.k", [2, 3]), ("speculation.alpha", [1.5, 2.5]),
                                     ("traffic.prompt_tokens", [8, 16])]))
        with pytest.raises(GridError):
            render_heatmap(res, "speculation.alpha", "speculation.k", "e2e_speedup")
        render_heatmap(res, "speculation.alpha", "speculation.k", "e2e_speedup", where={"traffic.prompt_tokens": 8})


class TestCli:
    def write(self, tmp_path, spec_dict):
        f = tmp_path / "s.yaml"
        f.write_text(yaml.safe_dump(spec_dict))
        return f

    def raw(self):
        return {"name": "toy", "seed": 1, "base": copy.deepcopy(BASE),
                "axes": [{"path": "speculation.alpha", "values": [2.0, 2.5]}, {"path": "speculation.k", "values": [2, 3]}],
                "outputs": ["table", "heatmap"],
                "heatmaps": [{"x": "speculation.alpha", "y": "speculation.k", "value": "rollout_speedup"}]}

    def test_run_outputs_and_determinism(self, tmp_path):
        f = self.write(tmp_path, self.raw())
        assert cli.main(["run", str(f), "--out-dir", str(tmp_path / "a")]) == 0
        assert cli.main(["run", str(f), "--out-dir", str(tmp_path / "b"), "--threads", "4"]) == 0
        names = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert names == ["toy.csv", "toy.json", "toy.txt", "toy_rollout_speedup.svg"]
        for n in names:
            assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()

    def test_env_out_dir(self, tmp_path, monkeypatch):
        f = self.write(tmp_path, self.raw())
        monkeypatch.setenv("SPECRL_OUT_DIR", str(tmp_path / "env"))
        assert cli.main(["run", str(f), "--format", "csv"]) == 0
        assert (tmp_path / "env" / "toy.csv").exists()

    def test_exit_codes(self, tmp_path, capsys):
        bad = self.raw()
        bad["base"]["traffic"] = {"kind": "lognormal", "mu": 1.0, "sigma": -1, "max_tokens": 10}
        assert cli.main(["validate", str(self.write(tmp_path, bad))]) == 1
        assert cli.main(["run", str(tmp_path / "s.yaml"), "--out-dir", str(tmp_path)]) == 1
        assert "sigma" in capsys.readouterr().err
        # a heatmap over a missing axis fails at run time
        rt = self.raw()
        rt["heatmaps"] = [{"x": "speculation.alpha", "y": "nowhere", "value": "rollout_speedup"}]
        assert cli.main(["run", str(self.write(tmp_path, rt)), "--out-dir", str(tmp_path / "o")]) == 2

    def test_validate_and_list(self, capsys):
        assert cli.main(["list-presets"]) == 0
        assert "fig3_heatmap" in capsys.readouterr().out
        assert cli.main(["validate", "table1_replay"]) == 0

    def test_seed_override_changes_output(self, tmp_path):
        f = self.write(tmp_path, self.raw())
        cli.main(["run", str(f), "--out-dir", str(tmp_path / "s1"), "--seed", "1"])
        cli.main(["run", str(f), "--out-dir", str(tmp_path / "s2"), "--seed", "2"])
        assert (tmp_path / "s1" / "toy.json").read_text() != (tmp_path / "s2" / "toy.json").read_text()

    def test_load_error_collects_all(self, tmp_path):
        raw = self.raw()
        raw["axes"].append({"path": "x.y", "values": [1]})
        raw["base"]["speculation"]["k"] = 0
        with pytest.raises(ConfigError) as info:
            load_scenario(self.write(tmp_path, raw))
        assert len(info.value.errors) >= 2
        assert load_scenario("table1_replay").kind == "stage_replay"


@pytest.mark.parametrize("side, step", [("reference", 64.6 * 50.4 / 51.7), ("baseline", 64.6)])
def test_async_replay_training_side(side, step):
    spec = load_scenario("sec33_async")
    spec.base["speculative_training_side"] = side
    v = run_scenario(spec).cells[0].values
    assert v["async_ar_step_s"] == pytest.approx(75.0)
    assert v["async_ar_exposed_gen_s"] == pytest.approx(10.4)
    assert v["async_spec_step_s"] == pytest.approx(step)
    assert v["async_speedup"] < v["sync_speedup"]


def test_async_replay_rejects_unknown_side():
    spec = load_scenario("sec33_async")
    spec.base["speculative_training_side"] = "other"
    assert any("speculative_training_side" in e for e in validate_scenario(spec))
