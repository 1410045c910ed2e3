import json
from pathlib import Path

import pytest

from edgetelem.scenario import (
    FaultSpec,
    ScenarioError,
    ScenarioSpec,
    load_scenario,
    run_scenario,
    scenario_from_dict,
)

SCENARIO_DIR = Path(__file__).resolve().parent.parent / "src" / "edgetelem" / "scenarios"

BASE_TRACE = {
    "regimes": [
        {
            "duration_ticks": 1000,
            "rsrp_mean_dbm": -95.0,
            "rsrp_std": 4.0,
            "rsrq_mean_db": -10.0,
            "rsrq_std": 1.5,
            "rssi_offset_db": 17.0,
            "true_coeffs": {"b0": 20.0, "b_rsrp": 2.0, "b_rsrq": 1.0, "b_rssi": 0.5, "b_hist": 0.2},
            "noise_std_mbps": 1.0,
        }
    ]
}


def simple_spec(**overrides) -> ScenarioSpec:
    doc = {
        "name": "unit",
        "seed": 7,
        "ticks": 10,
        "platform": {},
        "rules": {},
        "trace": BASE_TRACE,
    }
    doc.update(overrides)
    return scenario_from_dict(doc, Path("."))


class TestSpecValidation:
    def test_fault_beyond_run_rejected(self):
        with pytest.raises(ScenarioError, match="at_tick"):
            simple_spec(faults=[{"at_tick": 10, "kind": "BrokerDown", "duration_ticks": 1}])

    def test_unknown_fault_kind(self):
        with pytest.raises(ScenarioError):
            FaultSpec(at_tick=0, kind="Meteor")

    def test_broker_down_needs_duration(self):
        with pytest.raises(ScenarioError):
            FaultSpec(at_tick=0, kind="BrokerDown")

    def test_delay_shim_needs_dist(self):
        with pytest.raises(ScenarioError):
            FaultSpec(at_tick=0, kind="DelayShim")

    def test_ref_resolution(self, tmp_path):
        (tmp_path / "trace.json").write_text(json.dumps(BASE_TRACE))
        doc = {"seed": 1, "ticks": 3, "platform": {}, "rules": {}, "trace": "trace.json"}
        spec = scenario_from_dict(doc, tmp_path)
        assert spec.trace == BASE_TRACE

    def test_missing_ref_is_scenario_error(self, tmp_path):
        doc = {"seed": 1, "ticks": 3, "platform": {}, "rules": {}, "trace": "nope.json"}
        with pytest.raises(ScenarioError, match="nope.json"):
            scenario_from_dict(doc, tmp_path)


class TestRunBasics:
    def test_plain_run_report_shape(self, tmp_path):
        report = run_scenario(simple_spec(), tmp_path / "out")
        assert report["ticks"] == 10
        assert report["published"] == 10
        assert report["dead_letters"] == 0
        assert report["lake_path"] == "lake"
        assert (tmp_path / "out" / "report.json").exists()
        assert (tmp_path / "out" / "lake" / "dev0").exists()
        assert report["final_fps"] == pytest.approx(34.013, rel=0.02)

    def test_report_json_matches_returned_report(self, tmp_path):
        report = run_scenario(simple_spec(), tmp_path / "out")
        on_disk = json.loads((tmp_path / "out" / "report.json").read_text())
        assert on_disk == report

    def test_broker_down_fault_buffers_and_replays(self, tmp_path):
        spec = simple_spec(faults=[{"at_tick": 3, "kind": "BrokerDown", "duration_ticks": 3}])
        report = run_scenario(spec, tmp_path / "out")
        assert report["published"] == 10  # buffered during the outage, flushed after
        from edgetelem.cloud import Lake

        records = Lake(tmp_path / "out" / "lake").scan("dev0")
        seqs = [r.snapshot.seq for r in records]
        assert seqs == list(range(10))

    def test_delay_shim_shifts_ingest_times(self, tmp_path):
        spec = simple_spec(faults=[{"at_tick": 0, "kind": "DelayShim", "dist": "constant:250"}])
        run_scenario(spec, tmp_path / "out")
        from edgetelem.cloud import Lake

        records = Lake(tmp_path / "out" / "lake").scan("dev0")
        offsets = [r.ingest_time_ms - r.snapshot.device_time_ms for r in records]
        assert all(off == 250 for off in offsets)


class TestReproducibility:
    @pytest.mark.parametrize("name", ["scenario_fps_cap", "scenario_model_swap", "scenario_offload"])
    def test_same_spec_same_seed_identical_outputs(self, tmp_path, name):
        spec = load_scenario(SCENARIO_DIR / f"{name}.json")
        report_a = run_scenario(spec, tmp_path / "a")
        report_b = run_scenario(spec, tmp_path / "b")
        assert report_a == report_b
        assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()
        lakes_a = sorted((tmp_path / "a" / "lake").rglob("*.jsonl"))
        lakes_b = sorted((tmp_path / "b" / "lake").rglob("*.jsonl"))
        assert [p.name for p in lakes_a] == [p.name for p in lakes_b]
        assert lakes_a, "scenario must persist at least one lake file"
        for pa, pb in zip(lakes_a, lakes_b):
            assert pa.read_bytes() == pb.read_bytes()

    def test_different_seed_changes_lake(self, tmp_path):
        a = run_scenario(simple_spec(seed=1), tmp_path / "a")
        b = run_scenario(simple_spec(seed=2), tmp_path / "b")
        file_a = next((tmp_path / "a" / "lake" / "dev0").glob("*.jsonl"))
        file_b = next((tmp_path / "b" / "lake" / "dev0").glob("*.jsonl"))
        assert file_a.read_bytes() != file_b.read_bytes()


class TestBundledScenarios:
    def test_fps_cap_closes_the_loop(self, tmp_path):
        report = run_scenario(load_scenario(SCENARIO_DIR / "scenario_fps_cap.json"), tmp_path)
        downs = [a for a in report["actions"] if a["action"] == "StepFrequencyDown" and a["status"] == "applied"]
        assert downs
        assert report["final_fps"] <= 30.0

    def test_model_swap_and_corrupt_variant(self, tmp_path):
        ok = run_scenario(load_scenario(SCENARIO_DIR / "scenario_model_swap.json"), tmp_path / "ok")
        assert ok["final_model_id"] == "ssd_resnet50_fpn"
        bad = run_scenario(load_scenario(SCENARIO_DIR / "scenario_model_swap_corrupt.json"), tmp_path / "bad")
        assert bad["final_model_id"] == "yolov3"
        rejected = [a for a in bad["actions"] if a["status"] == "rejected"]
        assert rejected and rejected[0]["reason"] == "integrity"
