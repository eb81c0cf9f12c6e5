"""Scenario files, the remote-measurement procedure, metrics and run drivers.

A scenario is one JSON document bundling phantom, rig, session, channel,
fault schedule and the scripted operator program.  Runs produce a
deterministic trace plus a metrics record (JSON + flat CSV row); the
measurement pipeline replays the operator's caliper work by scanning each
received frame for the longest depth-axis lumen run.
"""

from __future__ import annotations

import csv
import io
import json
import math
import statistics
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .kinematics import ContactModel, StrapRig, WristLimits, inverse_kinematics
from .phantom import BodySurface, USFrame, VascularPhantom, ap_diameter_ground_truth, write_pgm
from .protocol import (
    ChannelProfile,
    LinkDisruption,
    MasterInputFreeze,
    SlaveCrash,
    StreamSpec,
    preset,
)
from .session import (
    ChartMapping,
    ExternalOperator,
    ScriptedOperator,
    SessionConfig,
    SessionEngine,
    validate_config,
)

METRICS_SCHEMA_VERSION = 1
SCENARIO_SCHEMA_VERSION = 1

# Recorded-only clinical fields: outcomes of human behaviour, never computed
# or asserted by the simulator.
CLINICAL_FIELDS = (
    "feasibility_score",
    "quality_score",
    "patient_acceptability",
    "exam_duration_min",
    "reference_exam_duration_min",
    "notes",
)


class ScenarioError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class NotFound(LookupError):
    """No lumen pixels in any frame of the sweep."""


class IncompatibleRuns(ValueError):
    pass


@dataclass(frozen=True)
class MeasurementResult:
    ap_diameter_mm: float
    frame_seq: int
    repeat_index: int = 0

    def __post_init__(self):
        if self.ap_diameter_mm < 0:
            raise ValueError("diameter must be non-negative")


@dataclass
class Scenario:
    name: str
    seed: int
    duration_s: float
    body: BodySurface
    phantom: VascularPhantom
    rig: StrapRig
    contact: ContactModel
    wrist_limits: WristLimits
    config: SessionConfig
    mapping: ChartMapping
    channel: ChannelProfile
    faults: list = field(default_factory=list)
    waypoints: list = field(default_factory=list)  # empty => interactive
    clinical_notes: dict = field(default_factory=dict)

    @property
    def interactive(self) -> bool:
        return not self.waypoints

    def initial_box(self):
        if self.waypoints:
            return tuple(self.waypoints[0][1])
        return (0.0, 0.0, 0.0)

    def initial_wrist(self):
        if self.waypoints:
            return tuple(self.waypoints[0][2])
        return (0.0, 0.0, 0.0)

    def build_operator(self):
        if self.interactive:
            return ExternalOperator(self.initial_box(), self.initial_wrist())
        return ScriptedOperator(self.waypoints)

    def build_engine(self, seed=None, **engine_kwargs) -> SessionEngine:
        return SessionEngine(
            body=self.body,
            phantom=self.phantom,
            rig=self.rig,
            contact=self.contact,
            wrist_limits=self.wrist_limits,
            config=self.config,
            mapping=self.mapping,
            profile=self.channel,
            operator=self.build_operator(),
            duration_s=self.duration_s,
            seed=self.seed if seed is None else seed,
            faults=list(self.faults),
            initial_box=self.initial_box(),
            initial_wrist=self.initial_wrist(),
            **engine_kwargs,
        )


def bundled_scenario_path(name: str) -> Path:
    return Path(str(resources.files("tersim") / "scenarios" / f"{name}.json"))


def bundled_scenario_names() -> list[str]:
    root = resources.files("tersim") / "scenarios"
    return sorted(p.name[: -len(".json")] for p in root.iterdir() if p.name.endswith(".json"))


def _fault_from_dict(d: dict):
    kind = d.get("kind")
    if kind == "link_disruption":
        return LinkDisruption(tuple(d["window"]))
    if kind == "master_input_freeze":
        return MasterInputFreeze(tuple(d["window"]))
    if kind == "slave_crash":
        return SlaveCrash(float(d["at"]))
    raise ValueError(f"unknown fault kind {kind!r}")


def _channel_from_value(value) -> ChannelProfile:
    if isinstance(value, str):
        return preset(value)
    streams = tuple(
        StreamSpec(s["name"], int(s["budget_bits_per_s"]), s.get("direction", "both"))
        for s in value["streams"]
    )
    return ChannelProfile(
        name=value.get("name", "custom"),
        streams=streams,
        link_total_bits_per_s=int(value["link_total_bits_per_s"]),
        latency_ms=float(value.get("latency_ms", 0.0)),
        jitter_ms=float(value.get("jitter_ms", 0.0)),
        disruption_windows=tuple(tuple(w) for w in value.get("disruption_windows", ())),
    )


def scenario_from_dict(doc: dict, preset_override: str | None = None,
                       seed_override: int | None = None) -> Scenario:
    problems: list[str] = []

    def build(label, fn):
        try:
            return fn()
        except (KeyError, TypeError, ValueError) as exc:
            problems.append(f"{label}: {exc}")
            return None

    version = doc.get("schema_version")
    if version != SCENARIO_SCHEMA_VERSION:
        problems.append(f"schema_version: expected {SCENARIO_SCHEMA_VERSION}, got {version!r}")
    name = doc.get("name") or "unnamed"
    duration = build("duration_s", lambda: float(doc["duration_s"]))
    if duration is not None and duration <= 0:
        problems.append("duration_s: must be positive")
    seed = seed_override if seed_override is not None else int(doc.get("seed", 0))

    body = build("body", lambda: BodySurface(**doc.get("body", {})))
    phantom = build("phantom", lambda: VascularPhantom(**doc.get("phantom", {})))
    rig_doc = dict(doc.get("rig", {}))
    if "anchors" in rig_doc:
        rig_doc["anchors"] = tuple(tuple(a) for a in rig_doc["anchors"])
    if "strap_length_limits" in rig_doc:
        rig_doc["strap_length_limits"] = tuple(rig_doc["strap_length_limits"])
    rig = build("rig", lambda: StrapRig(**rig_doc))
    contact = build("contact", lambda: ContactModel(**doc.get("contact", {})))
    wrist_limits = build("wrist_limits", lambda: WristLimits(**doc.get("wrist_limits", {})))
    config = build("session", lambda: SessionConfig(**doc.get("session", {})))
    mapping_doc = doc.get("mapping", {})
    mapping = build(
        "mapping",
        lambda: ChartMapping(
            tuple(mapping_doc.get("u_range", (0.55, 0.95))),
            tuple(mapping_doc.get("v_range", (0.05, 0.45))),
        ),
    )
    channel_value = preset_override if preset_override else doc.get("channel", "ISDN256")
    channel = build("channel", lambda: _channel_from_value(channel_value))
    faults = []
    for i, fd in enumerate(doc.get("faults", ())):
        fault = build(f"faults[{i}]", lambda fd=fd: _fault_from_dict(fd))
        if fault is not None:
            faults.append(fault)

    operator = doc.get("operator", {"program": "interactive"})
    program = operator.get("program", "interactive")
    waypoints = []
    if program == "waypoints":
        raw = operator.get("waypoints", [])
        if not raw:
            problems.append("operator.waypoints: waypoint program needs at least one waypoint")
        for i, w in enumerate(raw):
            try:
                waypoints.append(
                    (float(w["t"]), tuple(float(c) for c in w["pos"]),
                     tuple(float(c) for c in w.get("wrist", (0.0, 0.0, 0.0))))
                )
            except (KeyError, TypeError, ValueError) as exc:
                problems.append(f"operator.waypoints[{i}]: {exc}")
        if duration is not None and waypoints and waypoints[-1][0] > duration:
            problems.append("operator.waypoints: waypoint times exceed the scenario duration")
    elif program != "interactive":
        problems.append(f"operator.program: unknown program {program!r}")

    clinical = doc.get("clinical_notes", {})
    unknown = set(clinical) - set(CLINICAL_FIELDS)
    if unknown:
        problems.append(f"clinical_notes: unknown fields {sorted(unknown)}")

    if not problems and config is not None and channel is not None:
        problems.extend(validate_config(config, channel))
    if not problems and rig is not None and body is not None and mapping is not None:
        u, v, _ = mapping.box_to_chart(
            *(waypoints[0][1] if waypoints else (0.0, 0.0, 0.0)), config.fine_travel_limit
        )
        try:
            inverse_kinematics((u, v), 0.0, rig, body)
        except Exception as exc:
            problems.append(f"initial pose unreachable: {exc}")
    if problems:
        raise ScenarioError(problems)
    return Scenario(
        name=name,
        seed=seed,
        duration_s=duration,
        body=body,
        phantom=phantom,
        rig=rig,
        contact=contact,
        wrist_limits=wrist_limits,
        config=config,
        mapping=mapping,
        channel=channel,
        faults=faults,
        waypoints=waypoints,
        clinical_notes=dict(clinical),
    )


def load_scenario(path_or_name, preset_override: str | None = None,
                  seed_override: int | None = None) -> Scenario:
    """Load a scenario from a file path or a bundled scenario name."""
    path = Path(path_or_name)
    if not path.exists():
        candidate = bundled_scenario_path(str(path_or_name))
        if candidate.exists():
            path = candidate
        else:
            raise ScenarioError([f"no such scenario file or bundled name: {path_or_name}"])
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError([f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}"]) from None
    return scenario_from_dict(doc, preset_override, seed_override)


# ---------------------------------------------------------------------------
# Measurement
# ---------------------------------------------------------------------------


def _frame_arrays(frames):
    for i, f in enumerate(frames):
        if isinstance(f, USFrame):
            yield i + 1, f.as_array()
        elif isinstance(f, dict):
            arr = np.frombuffer(f["pixels"], dtype=np.uint8).reshape(f["height"], f["width"])
            yield f.get("seq", i + 1), arr
        else:
            seq, arr = f
            yield seq, np.asarray(arr, dtype=np.uint8)


def measure_ap_diameter(
    frames,
    threshold: float,
    pixel_spacing: float,
    vessel_below_threshold: bool = True,
    repeat_index: int = 0,
) -> MeasurementResult:
    """Largest depth-axis lumen run over a frame sweep.

    Per frame: classify lumen pixels against the threshold (zero pixels are
    outside the body and never count), take the column through the lumen
    centroid and the longest vertical run there.  The sweep result is the
    maximum over frames.
    """
    if pixel_spacing <= 0:
        raise ValueError("pixel spacing must be positive")
    best: tuple[float, int] | None = None
    seen = False
    for seq, img in _frame_arrays(frames):
        seen = True
        if vessel_below_threshold:
            mask = (img > 0) & (img < threshold)
        else:
            mask = img > threshold
        if not mask.any():
            continue
        cols = np.nonzero(mask)[1]
        col = int(round(float(cols.mean())))
        column = mask[:, col]
        run = best_run = 0
        for val in column:
            run = run + 1 if val else 0
            best_run = max(best_run, run)
        diameter = best_run * pixel_spacing
        if best is None or diameter > best[0]:
            best = (diameter, seq)
    if not seen:
        raise ValueError("measurement needs at least one frame")
    if best is None:
        raise NotFound("no lumen pixels in any frame")
    return MeasurementResult(best[0], best[1], repeat_index)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def _percentile_ms(values_us, fraction: float) -> float:
    if not values_us:
        return 0.0
    ordered = sorted(values_us)
    rank = max(1, math.ceil(fraction * len(ordered)))
    return ordered[rank - 1] / 1000.0


def build_metrics(scenario: Scenario, result, measurements=()) -> dict:
    lat = result.frame_latencies_us
    safety_events = []
    for ep in result.safety_episodes:
        safety_events.append(
            {
                "kind": "safe_hold",
                "t_enter_us": ep.t_enter_us,
                "t_exit_us": ep.t_exit_us,
                "force_released_us": ep.force_released_us,
            }
        )
    if result.crashed:
        safety_events.append({"kind": "slave_crash", "t_us": result.crash_time_us})
    clinical = {name: None for name in CLINICAL_FIELDS}
    clinical["exam_duration_min"] = result.duration_s / 60.0
    clinical.update(scenario.clinical_notes)
    return {
        "schema_version": METRICS_SCHEMA_VERSION,
        "scenario": scenario.name,
        "preset": scenario.channel.name,
        "seed": scenario.seed,
        "exam_duration_s": result.duration_s,
        "achieved_frame_rate_hz": result.received_frame_count / result.duration_s,
        "image_latency_ms": {
            "mean": (statistics.fmean(lat) / 1000.0) if lat else 0.0,
            "p95": _percentile_ms(lat, 0.95),
        },
        "bytes_per_stream": dict(sorted(result.delivered_bytes.items())),
        "messages": {
            "sent": result.sent_count,
            "delivered": result.delivered_count,
            "dropped": result.dropped_count,
        },
        "safety_events": safety_events,
        "measurements": [
            {
                "ap_diameter_mm": m.ap_diameter_mm,
                "frame_seq": m.frame_seq,
                "repeat_index": m.repeat_index,
            }
            for m in measurements
        ],
        "operator_clamp_count": result.clamp_count,
        "solver_failures": result.solver_failures,
        "phantom": {
            "ap_diameter_ground_truth_mm": ap_diameter_ground_truth(scenario.phantom),
            "vessel_radius_mm": scenario.phantom.vessel_radius,
            "pixel_spacing_mm": scenario.config.pixel_spacing,
        },
        "clinical": clinical,
    }


def validate_metrics(doc: dict) -> list[str]:
    problems = []
    if doc.get("schema_version") != METRICS_SCHEMA_VERSION:
        problems.append("bad or missing schema_version")
    for key in (
        "scenario",
        "preset",
        "seed",
        "exam_duration_s",
        "achieved_frame_rate_hz",
        "image_latency_ms",
        "bytes_per_stream",
        "messages",
        "safety_events",
        "measurements",
        "operator_clamp_count",
        "phantom",
        "clinical",
    ):
        if key not in doc:
            problems.append(f"missing field {key}")
    clinical = doc.get("clinical", {})
    for name in CLINICAL_FIELDS:
        if name not in clinical:
            problems.append(f"missing clinical field {name}")
    if doc.get("exam_duration_s", 0) < 0:
        problems.append("exam_duration_s must be >= 0")
    if doc.get("achieved_frame_rate_hz", 0) < 0:
        problems.append("achieved_frame_rate_hz must be >= 0")
    for m in doc.get("measurements", ()):
        if m.get("ap_diameter_mm", 0) < 0:
            problems.append("measurement diameters must be >= 0")
    return problems


def metrics_json(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def _flatten(doc: dict, prefix="") -> dict:
    flat = {}
    for key, value in doc.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, name + "."))
        elif isinstance(value, list):
            flat[name] = json.dumps(value, sort_keys=True)
        else:
            flat[name] = value
    return flat


def metrics_csv(doc: dict) -> str:
    flat = _flatten(doc)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(sorted(flat))
    writer.writerow([flat[k] for k in sorted(flat)])
    return buf.getvalue()


def compare_runs(metrics_a: dict, metrics_b: dict) -> dict:
    """Field-by-field comparison of two exam records."""
    if metrics_a.get("schema_version") != metrics_b.get("schema_version"):
        raise IncompatibleRuns("metrics schema versions differ")
    pa, pb = metrics_a.get("phantom", {}), metrics_b.get("phantom", {})
    if pa.get("ap_diameter_ground_truth_mm") != pb.get("ap_diameter_ground_truth_mm"):
        raise IncompatibleRuns("runs measured different phantoms")

    def measured(doc):
        vals = [m["ap_diameter_mm"] for m in doc.get("measurements", ())]
        return vals[0] if vals else None

    da, db = measured(metrics_a), measured(metrics_b)
    diameter = None
    if da is not None and db is not None:
        diameter = {
            "a_mm": da,
            "b_mm": db,
            "abs_delta_mm": abs(da - db),
            "ratio": db / da if da else None,
        }
    dur_a = metrics_a["exam_duration_s"]
    dur_b = metrics_b["exam_duration_s"]
    return {
        "runs": [metrics_a["scenario"], metrics_b["scenario"]],
        "presets": [metrics_a["preset"], metrics_b["preset"]],
        "diameter_agreement": diameter,
        "duration_ratio": dur_b / dur_a if dur_a else None,
        "latency_delta_ms": metrics_b["image_latency_ms"]["mean"]
        - metrics_a["image_latency_ms"]["mean"],
        "frame_rate_delta_hz": metrics_b["achieved_frame_rate_hz"]
        - metrics_a["achieved_frame_rate_hz"],
        "clamp_delta": metrics_b["operator_clamp_count"] - metrics_a["operator_clamp_count"],
    }


# ---------------------------------------------------------------------------
# Run drivers
# ---------------------------------------------------------------------------


def run_engine_and_measure(scenario: Scenario, seed=None, repeat_index=0, slave_probe=None):
    engine = scenario.build_engine(seed=seed, slave_probe=slave_probe)
    result = engine.run()
    measurements = []
    threshold = (scenario.phantom.intensity_vessel + scenario.phantom.intensity_tissue) / 2.0
    below = scenario.phantom.intensity_vessel < scenario.phantom.intensity_tissue
    if result.frames:
        try:
            measurements.append(
                measure_ap_diameter(
                    result.frames,
                    threshold,
                    scenario.config.pixel_spacing,
                    vessel_below_threshold=below,
                    repeat_index=repeat_index,
                )
            )
        except NotFound:
            pass
    return result, measurements


def run_scenario(
    path_or_name,
    out_dir=None,
    preset_override=None,
    seed_override=None,
    dump_frames=False,
    write_trace=False,
):
    """Load, run, measure and persist one scenario.

    Returns (metrics dict, SessionResult, exit_code).  Exit code 2 flags a
    safety abort: a slave crash, an unrecovered SAFE_HOLD at session end, or
    kinematics solver failures.
    """
    scenario = load_scenario(path_or_name, preset_override, seed_override)
    result, measurements = run_engine_and_measure(scenario)
    metrics = build_metrics(scenario, result, measurements)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(metrics_json(metrics))
        (out / "metrics.csv").write_text(metrics_csv(metrics))
        if write_trace:
            (out / "trace.tsv").write_text("\n".join(result.trace_lines) + "\n")
        if dump_frames:
            for record in result.frames:
                frame = USFrame(
                    record["width"],
                    record["height"],
                    scenario.config.pixel_spacing,
                    record["pixels"],
                    record["timestamp_us"],
                )
                write_pgm(frame, out / f"frame_{record['seq']}.pgm")

    aborted = (
        result.crashed
        or result.solver_failures > 0
        or any(ep.t_exit_us is None for ep in result.safety_episodes)
    )
    return metrics, result, (2 if aborted else 0)


def run_repeats(scenario: Scenario, jitters_mm, base_seed=None):
    """Repeat a scripted sweep with the start shifted by each jitter (mm on
    the master box x axis); returns one MeasurementResult per repeat."""
    results = []
    for idx, jitter in enumerate(jitters_mm):
        shifted = Scenario(
            **{
                **scenario.__dict__,
                "waypoints": [
                    (t, (pos[0] + jitter, pos[1], pos[2]), wrist)
                    for t, pos, wrist in scenario.waypoints
                ],
            }
        )
        _, measurements = run_engine_and_measure(shifted, seed=base_seed, repeat_index=idx)
        if not measurements:
            raise NotFound(f"repeat {idx} found no lumen")
        results.append(measurements[0])
    return results
