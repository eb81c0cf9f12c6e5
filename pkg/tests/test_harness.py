import json
import subprocess
import sys

import numpy as np
import pytest

from tersim import harness
from tersim.harness import (
    IncompatibleRuns,
    NotFound,
    ScenarioError,
    build_metrics,
    compare_runs,
    load_scenario,
    measure_ap_diameter,
    metrics_csv,
    metrics_json,
    run_scenario,
    validate_metrics,
)


def disk_frame(diameter_px, size=64, vessel=30, tissue=150):
    img = np.full((size, size), tissue, dtype=np.uint8)
    yy, xx = np.mgrid[0:size, 0:size]
    c = size / 2 - 0.5
    img[(yy - c) ** 2 + (xx - c) ** 2 <= (diameter_px / 2) ** 2] = vessel
    return img


class TestMeasurement:
    def test_centered_disk(self):
        result = measure_ap_diameter([(1, disk_frame(30))], threshold=90, pixel_spacing=1.0)
        assert result.ap_diameter_mm == pytest.approx(30.0, abs=1.0)

    def test_max_over_sweep_and_frame_seq(self):
        frames = [(1, disk_frame(10)), (2, disk_frame(40)), (3, disk_frame(20))]
        result = measure_ap_diameter(frames, threshold=90, pixel_spacing=1.0)
        assert result.frame_seq == 2
        assert result.ap_diameter_mm == pytest.approx(40.0, abs=1.0)

    def test_spacing_scales_result(self):
        result = measure_ap_diameter([(1, disk_frame(30))], threshold=90, pixel_spacing=0.5)
        assert result.ap_diameter_mm == pytest.approx(15.0, abs=0.5)

    def test_zero_pixels_are_not_lumen(self):
        img = disk_frame(20)
        img[:, :4] = 0  # air outside the body must not pollute the centroid
        result = measure_ap_diameter([(1, img)], threshold=90, pixel_spacing=1.0)
        assert result.ap_diameter_mm == pytest.approx(20.0, abs=1.0)

    def test_not_found(self):
        img = np.full((16, 16), 150, dtype=np.uint8)
        with pytest.raises(NotFound):
            measure_ap_diameter([(1, img)], threshold=90, pixel_spacing=1.0)

    def test_needs_frames(self):
        with pytest.raises(ValueError):
            measure_ap_diameter([], threshold=90, pixel_spacing=1.0)

    def test_bright_vessel_mode(self):
        img = 255 - disk_frame(24)  # vessel brighter than tissue
        result = measure_ap_diameter(
            [(1, img)], threshold=150, pixel_spacing=1.0, vessel_below_threshold=False
        )
        assert result.ap_diameter_mm == pytest.approx(24.0, abs=1.0)


class TestScenarioLoading:
    def test_bundled_names(self):
        names = harness.bundled_scenario_names()
        assert {"aaa_sweep", "disruption_drill", "freeze_drill", "crash_drill",
                "interactive"} <= set(names)

    def test_load_bundled_by_name(self):
        sc = load_scenario("aaa_sweep")
        assert sc.name == "aaa_sweep"
        assert sc.channel.name == "ISDN256"

    def test_preset_and_seed_override(self):
        sc = load_scenario("aaa_sweep", preset_override="LAN100M", seed_override=9)
        assert sc.channel.name == "LAN100M"
        assert sc.seed == 9

    def test_missing_file(self):
        with pytest.raises(ScenarioError):
            load_scenario("no_such_scenario")

    def test_json_error_has_line_info(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"schema_version": 1,\n  "name": oops}\n')
        with pytest.raises(ScenarioError) as exc:
            load_scenario(bad)
        assert ":2:" in exc.value.problems[0]

    def test_validation_collects_problems(self, tmp_path):
        doc = json.loads(harness.bundled_scenario_path("aaa_sweep").read_text())
        doc["body"]["breathing_amplitude"] = 0.5
        doc["duration_s"] = -2
        doc["faults"] = [{"kind": "link_disruption", "window": [3, 1]}]
        path = tmp_path / "broken.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(ScenarioError) as exc:
            load_scenario(path)
        text = "\n".join(exc.value.problems)
        assert "body" in text and "duration_s" in text

    def test_interactive_program(self):
        sc = load_scenario("interactive")
        assert sc.interactive


class TestRunScenario:
    def test_artifacts_written(self, tmp_path):
        metrics, result, code = run_scenario(
            "freeze_drill", out_dir=tmp_path, write_trace=True, dump_frames=True
        )
        assert code == 0
        assert (tmp_path / "metrics.json").exists()
        assert (tmp_path / "metrics.csv").exists()
        assert (tmp_path / "trace.tsv").exists()
        dumped = sorted(tmp_path.glob("frame_*.pgm"))
        assert len(dumped) == result.received_frame_count
        loaded = json.loads((tmp_path / "metrics.json").read_text())
        assert validate_metrics(loaded) == []

    def test_duration_accounting_exact(self, tmp_path):
        metrics, result, code = run_scenario("freeze_drill")
        assert metrics["exam_duration_s"] == 15.0

    def test_metrics_accounting_matches_trace(self, tmp_path):
        metrics, result, code = run_scenario("freeze_drill", out_dir=tmp_path, write_trace=True)
        per_stream = {}
        for line in (tmp_path / "trace.tsv").read_text().splitlines():
            _, stream, _, _, size, ev = line.split("\t")
            if ev == "DELIVERED":
                per_stream[stream] = per_stream.get(stream, 0) + int(size)
        assert per_stream == metrics["bytes_per_stream"]

    def test_crash_drill_exit_code(self):
        metrics, result, code = run_scenario("crash_drill")
        assert code == 2
        assert any(e["kind"] == "slave_crash" for e in metrics["safety_events"])

    def test_disruption_drill_single_safety_event(self):
        metrics, result, code = run_scenario("disruption_drill")
        holds = [e for e in metrics["safety_events"] if e["kind"] == "safe_hold"]
        assert len(holds) == 1
        assert code == 0  # recovered: not an abort

    def test_measure_cli_roundtrip(self, tmp_path):
        run_scenario("aaa_sweep", out_dir=tmp_path, dump_frames=True)
        proc = subprocess.run(
            [sys.executable, "-m", "tersim.cli", "measure", str(tmp_path), "--spacing", "1.0"],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0, proc.stderr
        out = json.loads(proc.stdout)
        assert abs(out["ap_diameter_mm"] - 50.0) <= 2.0


@pytest.fixture(scope="module")
def metrics():
    sc = load_scenario("freeze_drill")
    result, measurements = harness.run_engine_and_measure(sc)
    return build_metrics(sc, result, measurements)


class TestMetricsSchema:

    def test_clinical_fields_present_but_not_computed(self, metrics):
        clinical = metrics["clinical"]
        for name in harness.CLINICAL_FIELDS:
            assert name in clinical
        # human-outcome scores are recorded-only: never produced by a run
        assert clinical["feasibility_score"] is None
        assert clinical["quality_score"] is None
        assert clinical["patient_acceptability"] is None
        assert clinical["reference_exam_duration_min"] is None

    def test_serialization_roundtrip(self, metrics):
        text = metrics_json(metrics)
        assert json.loads(text) == metrics
        assert validate_metrics(json.loads(text)) == []

    def test_csv_row(self, metrics):
        lines = metrics_csv(metrics).splitlines()
        assert len(lines) == 2
        header = lines[0].split(",")
        assert "achieved_frame_rate_hz" in header
        assert "clinical.exam_duration_min" in header

    def test_frame_rate_bounded_by_config(self, metrics):
        assert metrics["achieved_frame_rate_hz"] <= 4.0


class TestCompareRuns:
    def test_identical_runs_zero_deltas(self):
        m, _, _ = run_scenario("freeze_drill")
        report = compare_runs(m, m)
        assert report["diameter_agreement"]["abs_delta_mm"] == 0
        assert report["duration_ratio"] == 1.0
        assert report["latency_delta_ms"] == 0
        assert report["clamp_delta"] == 0

    def test_channel_affects_latency_not_geometry(self):
        a, _, _ = run_scenario("freeze_drill")
        b, _, _ = run_scenario("freeze_drill", preset_override="LAN100M")
        report = compare_runs(a, b)
        assert report["diameter_agreement"]["abs_delta_mm"] == 0
        assert report["latency_delta_ms"] < 0  # LAN is faster

    def test_incompatible_phantoms(self):
        a, _, _ = run_scenario("freeze_drill")
        b = json.loads(metrics_json(a))
        b["phantom"]["ap_diameter_ground_truth_mm"] = 42.0
        with pytest.raises(IncompatibleRuns):
            compare_runs(a, b)

    def test_incompatible_schema_version(self):
        a, _, _ = run_scenario("freeze_drill")
        b = json.loads(metrics_json(a))
        b["schema_version"] = 999
        with pytest.raises(IncompatibleRuns):
            compare_runs(a, b)
