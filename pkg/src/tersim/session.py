"""Master/slave state machines and the deterministic session engine.

Everything runs on a virtual microsecond clock driven by a single event
queue ordered by (timestamp, insertion sequence), so a (scenario, seed)
pair always produces the same trace byte for byte.  The master integrates
operator input into a workspace-clamped virtual probe and streams motion
orders; the slave servos toward the latest order with a speed-capped
first-order lag, rides the breathing surface, emits frames/forces/state
reports at configured rates, and falls back to SAFE_HOLD when the order
stream goes quiet.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from . import protocol
from .geometry import quat_from_rpy, rpy_from_quat
from .kinematics import (
    ContactModel,
    StrapRig,
    WristLimits,
    WristState,
    clamp_chart_to_workspace,
    clamp_master_workspace,
    contact_force,
    inverse_kinematics,
    wrist_forward,
)
from .phantom import BodySurface, VascularPhantom, extract_slice
from .protocol import (
    CTRL_STOP,
    M2S,
    S2M,
    ChannelProfile,
    FramePayload,
    ForceSample,
    Heartbeat,
    LinkDisruption,
    LinkEmulator,
    MasterInputFreeze,
    Message,
    MotionOrder,
    MsgType,
    RobotStateReport,
    SessionControl,
    SlaveCrash,
    encoded_size,
)

HEARTBEAT_RATE_HZ = 10
AV_PLACEHOLDER_BYTES = 100
AV_PLACEHOLDER_RATE_HZ = 1
HOLD_RELEASE_RATE_MM_S = 5.0
HOLD_RELEASE_FORCE_N = 0.5
RESUME_ORDER_COUNT = 3

# safety_state byte: low 3 bits = mode, plus clamp flags
SAFETY_WRIST_CLAMPED = 0x40
SAFETY_WORKSPACE_CLAMPED = 0x80

STREAM_US = "us_images"
STREAM_AV = "av"
STREAM_HAPTIC = "haptic_robot"


class DomainError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class SlaveMode(IntEnum):
    INIT = 0
    READY = 1
    TRACKING = 2
    SAFE_HOLD = 3
    SHUTDOWN = 4


def render_force_1d(f, normal) -> float:
    """Normal reaction component shown to the operator: max(0, f . n)."""
    n = np.asarray(normal, dtype=float)
    if abs(math.sqrt(float(np.dot(n, n))) - 1.0) > 1e-6:
        raise DomainError("normal must be a unit vector")
    return max(0.0, float(np.dot(np.asarray(f, dtype=float), n)))


@dataclass(frozen=True)
class SessionConfig:
    motion_rate: int = 50  # Hz, also the master tick rate
    frame_rate: int = 4
    force_rate: int = 25
    state_rate: int = 10
    watchdog_timeout_ms: float = 200.0
    servo_time_constant_ms: float = 80.0
    max_probe_speed: float = 50.0  # mm/s
    slave_tick_rate: int = 100
    frame_width: int = 64
    frame_height: int = 60
    pixel_spacing: float = 1.0
    fine_travel_limit: float = 20.0
    noise_amplitude: int = 0


@dataclass(frozen=True)
class ChartMapping:
    """Affine map from the master box onto a chart sub-rectangle; the box z
    axis maps onto the fine translation range."""

    u_range: tuple[float, float] = (0.55, 0.95)
    v_range: tuple[float, float] = (0.05, 0.45)

    def box_to_chart(self, x: float, y: float, z: float, fine_limit: float):
        u0, u1 = self.u_range
        v0, v1 = self.v_range
        u = u0 + (x + 80.0) / 160.0 * (u1 - u0)
        v = v0 + (y + 60.0) / 120.0 * (v1 - v0)
        fine = z / 60.0 * fine_limit
        return u, v, fine

    def chart_to_box(self, u: float, v: float, fine: float, fine_limit: float):
        u0, u1 = self.u_range
        v0, v1 = self.v_range
        x = (u - u0) / (u1 - u0) * 160.0 - 80.0
        y = (v - v0) / (v1 - v0) * 120.0 - 60.0
        z = fine / fine_limit * 60.0
        return x, y, z


_MSG_SIZES = {
    MsgType.MOTION_ORDER: 51,
    MsgType.FORCE_SAMPLE: 34,
    MsgType.ROBOT_STATE: 51,
    MsgType.HEARTBEAT: 18,
}


def validate_config(config: SessionConfig, profile: ChannelProfile) -> list[str]:
    """Closed-form feasibility checks; returns a list of problems."""
    errors = []
    for name in ("motion_rate", "frame_rate", "force_rate", "state_rate", "slave_tick_rate"):
        rate = getattr(config, name)
        if rate <= 0:
            errors.append(f"{name} must be positive")
        elif 1_000_000 % rate != 0:
            errors.append(f"{name}={rate} Hz has no whole-microsecond period")
    if errors:
        return errors
    if config.motion_rate % HEARTBEAT_RATE_HZ != 0:
        errors.append(f"motion_rate must be a multiple of the {HEARTBEAT_RATE_HZ} Hz heartbeat")
    for name in ("frame_rate", "force_rate", "state_rate"):
        rate = getattr(config, name)
        if config.slave_tick_rate % rate != 0:
            errors.append(f"slave_tick_rate must be a multiple of {name}")
    if config.frame_width < 8 or config.frame_height < 8:
        errors.append("frame dimensions must be at least 8x8")
    if config.watchdog_timeout_ms <= 0 or config.servo_time_constant_ms <= 0:
        errors.append("watchdog timeout and servo time constant must be positive")
    if config.max_probe_speed <= 0:
        errors.append("max_probe_speed must be positive")

    frame_bytes = protocol.HEADER_SIZE + 4 + config.frame_width * config.frame_height
    try:
        us_budget = profile.stream(STREAM_US).budget_bits_per_s
        if frame_bytes * 8 * config.frame_rate > us_budget:
            errors.append(
                f"frame stream needs {frame_bytes * 8 * config.frame_rate} bit/s, "
                f"us_images budget is {us_budget}"
            )
        haptic = profile.stream(STREAM_HAPTIC).budget_bits_per_s
        m2s = (config.motion_rate * _MSG_SIZES[MsgType.MOTION_ORDER]
               + HEARTBEAT_RATE_HZ * _MSG_SIZES[MsgType.HEARTBEAT]) * 8
        if m2s > haptic:
            errors.append(f"master->slave haptic load {m2s} bit/s exceeds budget {haptic}")
        s2m = (config.force_rate * _MSG_SIZES[MsgType.FORCE_SAMPLE]
               + config.state_rate * _MSG_SIZES[MsgType.ROBOT_STATE]) * 8
        if s2m > haptic:
            errors.append(f"slave->master haptic load {s2m} bit/s exceeds budget {haptic}")
        av = profile.stream(STREAM_AV).budget_bits_per_s
        if AV_PLACEHOLDER_BYTES * 8 * AV_PLACEHOLDER_RATE_HZ > av:
            errors.append("av placeholder traffic exceeds the av budget")
    except protocol.NoSuchStream as exc:
        errors.append(f"channel profile is missing stream {exc}")
    return errors


class ScriptedOperator:
    """Piecewise-linear waypoint program in master box coordinates."""

    has_input = True

    def __init__(self, waypoints):
        if not waypoints:
            raise ValueError("scripted operator needs at least one waypoint")
        pts = sorted(waypoints, key=lambda w: w[0])
        self._times = [float(w[0]) for w in pts]
        self._pos = [np.asarray(w[1], dtype=float) for w in pts]
        self._wrist = [np.asarray(w[2] if len(w) > 2 and w[2] is not None else (0.0, 0.0, 0.0),
                                  dtype=float) for w in pts]

    def target(self, t: float):
        times = self._times
        if t <= times[0]:
            return self._pos[0], self._wrist[0]
        if t >= times[-1]:
            return self._pos[-1], self._wrist[-1]
        hi = 1
        while times[hi] < t:
            hi += 1
        lo = hi - 1
        a = (t - times[lo]) / (times[hi] - times[lo])
        return (
            self._pos[lo] * (1 - a) + self._pos[hi] * a,
            self._wrist[lo] * (1 - a) + self._wrist[hi] * a,
        )


class ExternalOperator:
    """Live target holder for the real-time console bridge."""

    def __init__(self, initial_pos=(0.0, 0.0, 0.0), initial_wrist=(0.0, 0.0, 0.0)):
        self._pos = np.asarray(initial_pos, dtype=float)
        self._wrist = np.asarray(initial_wrist, dtype=float)
        self.has_input = False

    def set_target(self, pos, wrist=None):
        self._pos = np.asarray(pos, dtype=float)
        if wrist is not None:
            self._wrist = np.asarray(wrist, dtype=float)
        self.has_input = True

    def target(self, t: float):
        return self._pos, self._wrist


@dataclass
class SafetyEpisode:
    t_enter_us: int
    t_exit_us: int | None = None
    force_released_us: int | None = None


@dataclass
class SessionResult:
    duration_s: float
    trace_lines: list[str]
    mode_transitions: list[tuple[int, str]]
    safety_episodes: list[SafetyEpisode]
    frames: list[dict]
    force_display: list[tuple[int, float]]
    frame_latencies_us: list[int]
    delivered_bytes: dict[str, int]
    sent_count: int = 0
    delivered_count: int = 0
    dropped_count: int = 0
    clamp_count: int = 0
    solver_failures: int = 0
    crashed: bool = False
    crash_time_us: int | None = None
    message_log: list = field(default_factory=list)
    pixel_spacing: float = 1.0

    @property
    def received_frame_count(self) -> int:
        return len(self.frames)


class SessionEngine:
    """Discrete-event simulator binding master, link and slave together."""

    def __init__(
        self,
        body: BodySurface,
        phantom: VascularPhantom,
        rig: StrapRig,
        contact: ContactModel,
        wrist_limits: WristLimits,
        config: SessionConfig,
        mapping: ChartMapping,
        profile: ChannelProfile,
        operator,
        duration_s: float,
        seed: int = 0,
        faults=(),
        initial_box=(0.0, 0.0, 0.0),
        initial_wrist=(0.0, 0.0, 0.0),
        slave_probe=None,
        frame_sink=None,
        master_sink=None,
    ):
        errors = validate_config(config, profile)
        if errors:
            raise ConfigError("; ".join(errors))
        self.body = body
        self.phantom = phantom
        self.rig = rig
        self.contact = contact
        self.wrist_limits = wrist_limits
        self.config = config
        self.mapping = mapping
        self.operator = operator
        self.duration_us = int(round(duration_s * 1_000_000))
        self.seed = seed
        self.slave_probe = slave_probe
        self.frame_sink = frame_sink
        self.master_sink = master_sink
        self._started = False

        self.emulator = LinkEmulator(profile, seed)
        self.freeze_windows_us: list[tuple[int, int]] = []
        self.crash_at_us: int | None = None
        for fault in faults:
            self.inject_fault(fault)

        # master state
        self.virtual_probe = clamp_master_workspace(np.asarray(initial_box, dtype=float))
        self.master_wrist = np.asarray(initial_wrist, dtype=float)
        self.master_seq = {t: 0 for t in MsgType}
        self.slave_seq = {t: 0 for t in MsgType}
        self.av_seq = {M2S: 0, S2M: 0}
        self.clamp_count = 0
        self.force_display: list[tuple[int, float]] = []
        self.frames: list[dict] = []
        self.frame_latencies_us: list[int] = []

        # slave state
        self.mode = SlaveMode.INIT
        self.mode_transitions: list[tuple[int, str]] = [(0, SlaveMode.INIT.name)]
        u, v, fine = mapping.box_to_chart(*self.virtual_probe, config.fine_travel_limit)
        self.cmd = {"u": u, "v": v, "fine": fine, "wrist": np.array(initial_wrist, dtype=float)}
        self.act = {"u": u, "v": v, "fine": fine, "wrist": np.array(initial_wrist, dtype=float)}
        self.hold_pose: dict | None = None
        self.last_rx_us: int | None = None
        self.orders_since_hold = 0
        self.safety_episodes: list[SafetyEpisode] = []
        self.workspace_clamped = False
        self.wrist_clamped = False
        self.tracking_anchor: int | None = None
        self.strap_lengths = inverse_kinematics((u, v), 0.0, rig, body)
        self.solver_failures = 0
        self.crashed = False
        self.crash_time_us: int | None = None

        self._events: list[tuple[int, int, str, object]] = []
        self._event_seq = 0
        self._trace: list[str] = []
        self._message_log: list = []
        self._sent = 0
        self._delivered = 0

        self._master_period = 1_000_000 // config.motion_rate
        self._slave_period = 1_000_000 // config.slave_tick_rate
        self._hb_div = config.motion_rate // HEARTBEAT_RATE_HZ
        self._frame_div = config.slave_tick_rate // config.frame_rate
        self._force_div = config.slave_tick_rate // config.force_rate
        self._state_div = config.slave_tick_rate // config.state_rate
        dt = self._slave_period / 1_000_000
        self._dt = dt
        self._lag_beta = math.exp(-dt / (config.servo_time_constant_ms / 1000.0))
        self._step_cap = config.max_probe_speed * dt
        self._watchdog_us = int(round(config.watchdog_timeout_ms * 1000))

    # -- fault injection ----------------------------------------------------

    def inject_fault(self, fault) -> None:
        if isinstance(fault, LinkDisruption):
            self.emulator.add_disruption(fault.window)
        elif isinstance(fault, MasterInputFreeze):
            w = (int(round(fault.window[0] * 1e6)), int(round(fault.window[1] * 1e6)))
            if w[1] <= w[0]:
                raise protocol.InvalidSchedule("empty input-freeze window")
            self.freeze_windows_us.append(w)
        elif isinstance(fault, SlaveCrash):
            self.crash_at_us = int(round(fault.at * 1e6))
        else:
            raise TypeError(f"unknown fault kind {fault!r}")

    # -- event plumbing -----------------------------------------------------

    def _push(self, t_us: int, kind: str, data) -> None:
        self._event_seq += 1
        heapq.heappush(self._events, (t_us, self._event_seq, kind, data))

    def _trace_line(self, t_us: int, stream: str, type_name: str, seq: int, size: int, event: str):
        self._trace.append(f"{t_us}\t{stream}\t{type_name}\t{seq}\t{size}\t{event}")

    def _send(self, now_us: int, stream: str, direction: str, msg: Message) -> None:
        size = encoded_size(msg)
        outcome = self.emulator.send(stream, direction, size, now_us)
        self._trace_line(now_us, stream, msg.msg_type.name, msg.seq, size, "SENT")
        self._message_log.append(("SENT", now_us, stream, direction, msg))
        self._sent += 1
        if outcome.dropped:
            self._push(outcome.delivery_us, "drop", (stream, direction, msg, size))
        else:
            self._push(outcome.delivery_us, "deliver", (stream, direction, msg, size))

    def _send_av(self, now_us: int, direction: str) -> None:
        self.av_seq[direction] += 1
        seq = self.av_seq[direction]
        outcome = self.emulator.send(STREAM_AV, direction, AV_PLACEHOLDER_BYTES, now_us)
        self._trace_line(now_us, STREAM_AV, "AvPlaceholder", seq, AV_PLACEHOLDER_BYTES, "SENT")
        self._sent += 1
        kind = "drop" if outcome.dropped else "deliver_av"
        self._push(outcome.delivery_us, kind, (STREAM_AV, direction, seq, AV_PLACEHOLDER_BYTES))

    def _next_seq(self, counters: dict, msg_type: MsgType) -> int:
        counters[msg_type] += 1
        return counters[msg_type]

    def _set_mode(self, t_us: int, mode: SlaveMode) -> None:
        if mode != self.mode:
            self.mode = mode
            self.mode_transitions.append((t_us, mode.name))

    # -- master -------------------------------------------------------------

    def _input_frozen(self, t_us: int) -> bool:
        return any(w0 <= t_us < w1 for w0, w1 in self.freeze_windows_us)

    def _master_tick(self, t_us: int, k: int) -> None:
        if self.operator.has_input and not self._input_frozen(t_us):
            target_pos, target_wrist = self.operator.target(t_us / 1_000_000)
            clamped = clamp_master_workspace(target_pos)
            if not np.array_equal(clamped, np.asarray(target_pos, dtype=float)):
                self.clamp_count += 1
                flags = 1
            else:
                flags = 0
            self.virtual_probe = clamped
            self.master_wrist = np.asarray(target_wrist, dtype=float)
        else:
            flags = 2 if self.operator.has_input else 0  # held value

        if self.operator.has_input:
            u, v, fine = self.mapping.box_to_chart(
                *self.virtual_probe, self.config.fine_travel_limit
            )
            fine = max(-self.config.fine_travel_limit, min(self.config.fine_travel_limit, fine))
            tip = self.body.surface_point_rest(u, v)
            quat = quat_from_rpy(*self.master_wrist)
            order = Message(
                MsgType.MOTION_ORDER,
                self._next_seq(self.master_seq, MsgType.MOTION_ORDER),
                t_us,
                MotionOrder(tuple(float(c) for c in tip), tuple(float(c) for c in quat),
                            fine, flags),
            )
            self._send(t_us, STREAM_HAPTIC, M2S, order)
        if k % self._hb_div == 0:
            hb = Message(
                MsgType.HEARTBEAT,
                self._next_seq(self.master_seq, MsgType.HEARTBEAT),
                t_us,
                Heartbeat(),
            )
            self._send(t_us, STREAM_HAPTIC, M2S, hb)

        nxt = t_us + self._master_period
        if nxt < self.duration_us:
            self._push(nxt, "master_tick", k + 1)

    # -- slave --------------------------------------------------------------

    def _slave_crashed(self, t_us: int) -> bool:
        if self.crash_at_us is not None and t_us >= self.crash_at_us and not self.crashed:
            self.crashed = True
            self.crash_time_us = self.crash_at_us
        return self.crashed

    def _servo_step(self, t_us: int) -> None:
        t = t_us / 1_000_000
        beta = self._lag_beta
        if self.mode == SlaveMode.TRACKING:
            tgt_u, tgt_v = self.cmd["u"], self.cmd["v"]
            tgt_fine = self.cmd["fine"]
            tgt_wrist = self.cmd["wrist"]
        else:  # SAFE_HOLD: translation and wrist frozen at the hold pose
            tgt_u, tgt_v = self.hold_pose["u"], self.hold_pose["v"]
            tgt_fine = self.act["fine"]
            tgt_wrist = self.hold_pose["wrist"]

        cu, cv = self.act["u"], self.act["v"]
        nu = tgt_u + (cu - tgt_u) * beta
        nv = tgt_v + (cv - tgt_v) * beta
        if nu != cu or nv != cv:
            p_old = self.body.surface_point(cu, cv, t)
            p_new = self.body.surface_point(nu, nv, t)
            step = float(np.linalg.norm(p_new - p_old))
            # chord cap; the chart map is near-linear at step scale, so a few
            # proportional rescales converge well below float tolerance
            for _ in range(5):
                if step <= self._step_cap * (1 + 1e-12) or step == 0.0:
                    break
                scale = self._step_cap / step
                nu = cu + (nu - cu) * scale
                nv = cv + (nv - cv) * scale
                p_new = self.body.surface_point(nu, nv, t)
                step = float(np.linalg.norm(p_new - p_old))
        self.act["u"], self.act["v"] = nu, nv

        if self.mode == SlaveMode.TRACKING:
            cf = self.act["fine"]
            nf = tgt_fine + (cf - tgt_fine) * beta
            df = nf - cf
            if abs(df) > self._step_cap:
                nf = cf + math.copysign(self._step_cap, df)
            self.act["fine"] = nf
        self.act["wrist"] = tgt_wrist + (self.act["wrist"] - tgt_wrist) * beta

    def _slave_pose(self, t_us: int):
        t = t_us / 1_000_000
        u, v = self.act["u"], self.act["v"]
        frame = self.body.tangent_frame(u, v, t)
        base = self.body.surface_point(u, v, t)
        wrist = WristState(*(float(c) for c in self.act["wrist"]), fine_d=self.act["fine"])
        pose = wrist_forward(base, frame, wrist, self.wrist_limits)
        return pose, frame[2]

    def _slave_tick(self, t_us: int, k: int) -> None:
        if self._slave_crashed(t_us):
            return
        report_due = k % self._state_div == 0
        emitted_state = False
        if self.mode in (SlaveMode.TRACKING, SlaveMode.SAFE_HOLD):
            if self.tracking_anchor is None:
                self.tracking_anchor = k
            j = k - self.tracking_anchor
            t = t_us / 1_000_000

            if (
                self.mode == SlaveMode.TRACKING
                and self.last_rx_us is not None
                and t_us - self.last_rx_us > self._watchdog_us
            ):
                self.hold_pose = {
                    "u": self.act["u"],
                    "v": self.act["v"],
                    "wrist": self.act["wrist"].copy(),
                }
                self.orders_since_hold = 0
                self.safety_episodes.append(SafetyEpisode(t_enter_us=t_us))
                self._set_mode(t_us, SlaveMode.SAFE_HOLD)

            self._servo_step(t_us)
            pose, normal = self._slave_pose(t_us)
            force = contact_force(pose, self.body, t, self.contact)
            scalar = render_force_1d(force, normal)

            if self.mode == SlaveMode.SAFE_HOLD:
                episode = self.safety_episodes[-1]
                if scalar > HOLD_RELEASE_FORCE_N:
                    self.act["fine"] = max(
                        -self.config.fine_travel_limit,
                        self.act["fine"] - HOLD_RELEASE_RATE_MM_S * self._dt,
                    )
                    pose, normal = self._slave_pose(t_us)
                    force = contact_force(pose, self.body, t, self.contact)
                    scalar = render_force_1d(force, normal)
                if scalar <= HOLD_RELEASE_FORCE_N and episode.force_released_us is None:
                    episode.force_released_us = t_us
                if (
                    scalar <= HOLD_RELEASE_FORCE_N
                    and self.orders_since_hold >= RESUME_ORDER_COUNT
                    and self.last_rx_us is not None
                    and t_us - self.last_rx_us <= self._watchdog_us
                ):
                    episode.t_exit_us = t_us
                    self._set_mode(t_us, SlaveMode.TRACKING)

            try:
                self.strap_lengths = inverse_kinematics(
                    (self.act["u"], self.act["v"]), t, self.rig, self.body
                )
            except Exception:
                self.solver_failures += 1

            if self.slave_probe is not None:
                self.slave_probe(t_us, self)

            if j % self._force_div == 0:
                msg = Message(
                    MsgType.FORCE_SAMPLE,
                    self._next_seq(self.slave_seq, MsgType.FORCE_SAMPLE),
                    t_us,
                    ForceSample(tuple(float(c) for c in force), scalar),
                )
                self._send(t_us, STREAM_HAPTIC, S2M, msg)
            if j % self._frame_div == 0:
                frame = extract_slice(
                    self.body,
                    self.phantom,
                    pose,
                    self.config.frame_width,
                    self.config.frame_height,
                    self.config.pixel_spacing,
                    t,
                    acquisition_time_us=t_us,
                    noise_amplitude=self.config.noise_amplitude,
                    noise_seed=self.seed,
                )
                msg = Message(
                    MsgType.US_FRAME,
                    self._next_seq(self.slave_seq, MsgType.US_FRAME),
                    t_us,
                    FramePayload(frame.width, frame.height, frame.pixels),
                )
                self._send(t_us, STREAM_US, S2M, msg)
            if report_due:
                emitted_state = True
                self._send_state_report(t_us, scalar)

        if report_due and not emitted_state and self.mode in (SlaveMode.READY, SlaveMode.INIT):
            self._send_state_report(t_us, 0.0)

        nxt = t_us + self._slave_period
        if nxt < self.duration_us:
            self._push(nxt, "slave_tick", k + 1)

    def _send_state_report(self, t_us: int, scalar_force: float) -> None:
        state = int(self.mode)
        if self.wrist_clamped:
            state |= SAFETY_WRIST_CLAMPED
        if self.workspace_clamped:
            state |= SAFETY_WORKSPACE_CLAMPED
        msg = Message(
            MsgType.ROBOT_STATE,
            self._next_seq(self.slave_seq, MsgType.ROBOT_STATE),
            t_us,
            RobotStateReport(
                tuple(self.strap_lengths),
                tuple(float(c) for c in self.act["wrist"]),
                self.act["fine"],
                state,
            ),
        )
        self._send(t_us, STREAM_HAPTIC, S2M, msg)

    # -- deliveries ---------------------------------------------------------

    def _deliver(self, t_us: int, stream: str, direction: str, msg: Message, size: int) -> None:
        self._trace_line(t_us, stream, msg.msg_type.name, msg.seq, size, "DELIVERED")
        self._message_log.append(("DELIVERED", t_us, stream, direction, msg))
        self._delivered += 1
        if direction == M2S:
            self._deliver_to_slave(t_us, msg)
        else:
            self._deliver_to_master(t_us, msg)

    def _deliver_to_slave(self, t_us: int, msg: Message) -> None:
        if self._slave_crashed(t_us):
            return
        if msg.msg_type == MsgType.HEARTBEAT:
            self.last_rx_us = t_us
        elif msg.msg_type == MsgType.MOTION_ORDER:
            self.last_rx_us = t_us
            self._accept_order(t_us, msg.payload)
        elif msg.msg_type == MsgType.SESSION_CONTROL:
            if msg.payload.code == CTRL_STOP and self.mode != SlaveMode.INIT:
                self._set_mode(t_us, SlaveMode.SHUTDOWN)

    def _accept_order(self, t_us: int, order: MotionOrder) -> None:
        t = t_us / 1_000_000
        u, v = self.body.chart_from_point_rest(order.tip)
        (u, v), ws_clamped = clamp_chart_to_workspace(
            (self.act["u"], self.act["v"]), (u, v), t, self.rig, self.body
        )
        self.workspace_clamped = ws_clamped
        roll, pitch, yaw = rpy_from_quat(np.asarray(order.orientation, dtype=float))
        lim = self.wrist_limits
        clamped_wrist = (
            max(-lim.roll, min(lim.roll, roll)),
            max(-lim.pitch, min(lim.pitch, pitch)),
            max(-lim.yaw, min(lim.yaw, yaw)),
        )
        self.wrist_clamped = clamped_wrist != (roll, pitch, yaw)
        fine = max(-self.config.fine_travel_limit,
                   min(self.config.fine_travel_limit, order.fine_d))
        self.cmd = {"u": u, "v": v, "fine": fine, "wrist": np.array(clamped_wrist)}
        if self.mode == SlaveMode.READY:
            self._set_mode(t_us, SlaveMode.TRACKING)
        elif self.mode == SlaveMode.SAFE_HOLD:
            self.orders_since_hold += 1

    def _deliver_to_master(self, t_us: int, msg: Message) -> None:
        if self.master_sink is not None:
            self.master_sink(msg)
        if msg.msg_type == MsgType.US_FRAME:
            self.frame_latencies_us.append(t_us - msg.timestamp_us)
            record = {
                "seq": msg.seq,
                "width": msg.payload.width,
                "height": msg.payload.height,
                "pixels": msg.payload.pixels,
                "timestamp_us": msg.timestamp_us,
                "delivered_us": t_us,
            }
            self.frames.append(record)
            if self.frame_sink is not None:
                self.frame_sink(record)
        elif msg.msg_type == MsgType.FORCE_SAMPLE:
            self.force_display.append((t_us, max(0.0, msg.payload.normal_magnitude)))

    # -- main loop ----------------------------------------------------------

    def start(self) -> None:
        """Schedule the initial events; idempotent."""
        if self._started:
            return
        self._started = True
        if self.mode == SlaveMode.INIT:
            self._set_mode(0, SlaveMode.READY)
        self._push(0, "master_tick", 0)
        self._push(0, "slave_tick", 0)
        for direction in (M2S, S2M):
            t = 0
            while t < self.duration_us:
                self._push(t, "av_tick", direction)
                t += 1_000_000 // AV_PLACEHOLDER_RATE_HZ
        self._push(self.duration_us, "session_end", None)

    def advance_to(self, limit_us: int | None) -> bool:
        """Process events up to and including limit_us (None = drain all).

        Returns True while events remain beyond the limit.
        """
        while self._events:
            if limit_us is not None and self._events[0][0] > limit_us:
                return True
            t_us, _, kind, data = heapq.heappop(self._events)
            if kind == "master_tick":
                self._master_tick(t_us, data)
            elif kind == "slave_tick":
                self._slave_tick(t_us, data)
            elif kind == "deliver":
                self._deliver(t_us, *data)
            elif kind == "deliver_av":
                stream, direction, seq, size = data
                self._trace_line(t_us, stream, "AvPlaceholder", seq, size, "DELIVERED")
                self._delivered += 1
            elif kind == "drop":
                stream, direction, payload, size = (
                    data if len(data) == 4 else (*data, None)
                )
                if isinstance(payload, Message):
                    self._trace_line(t_us, stream, payload.msg_type.name, payload.seq, size,
                                     "DROPPED")
                    self._message_log.append(("DROPPED", t_us, stream, direction, payload))
                else:
                    self._trace_line(t_us, stream, "AvPlaceholder", payload, size, "DROPPED")
            elif kind == "av_tick":
                self._send_av(t_us, data)
            elif kind == "session_end":
                stop = Message(
                    MsgType.SESSION_CONTROL,
                    self._next_seq(self.master_seq, MsgType.SESSION_CONTROL),
                    t_us,
                    SessionControl(CTRL_STOP),
                )
                self._send(t_us, STREAM_HAPTIC, M2S, stop)
        return False

    def run(self) -> SessionResult:
        self.start()
        self.advance_to(None)
        return self.result()

    def result(self) -> SessionResult:
        return SessionResult(
            duration_s=self.duration_us / 1_000_000,
            trace_lines=self._trace,
            mode_transitions=self.mode_transitions,
            safety_episodes=self.safety_episodes,
            frames=self.frames,
            force_display=self.force_display,
            frame_latencies_us=self.frame_latencies_us,
            delivered_bytes=dict(self.emulator.delivered_bytes),
            sent_count=self._sent,
            delivered_count=self._delivered,
            dropped_count=self.emulator.dropped_count,
            clamp_count=self.clamp_count,
            solver_failures=self.solver_failures,
            crashed=self.crashed,
            crash_time_us=self.crash_time_us,
            message_log=self._message_log,
            pixel_spacing=self.config.pixel_spacing,
        )
