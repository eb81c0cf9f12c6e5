"""In-process smoke test of the real-time console bridge."""

import math
import time

import pytest

fastapi = pytest.importorskip("fastapi")
from fastapi.testclient import TestClient  # noqa: E402

from tersim.geometry import quat_from_rpy  # noqa: E402
from tersim.harness import load_scenario  # noqa: E402
from tersim.protocol import (  # noqa: E402
    CTRL_START,
    Heartbeat,
    Message,
    MotionOrder,
    MsgType,
    SessionControl,
    decode,
    encode,
)
from tersim.server import build_app  # noqa: E402
from tersim.session import SlaveMode  # noqa: E402


def collect(ws, want, deadline_s=6.0, limit=400):
    """Read frames until `want(messages)` is truthy or the budget runs out."""
    messages = []
    t0 = time.monotonic()
    while time.monotonic() - t0 < deadline_s and len(messages) < limit:
        messages.append(decode(ws.receive_bytes()))
        if want(messages):
            return messages
    return messages


def test_serve_bridge_end_to_end():
    app = build_app(load_scenario("interactive"))
    with TestClient(app) as client:
        assert client.get("/health").text == "ok"
        with client.websocket_connect("/session") as ws:
            ws.send_bytes(encode(Message(MsgType.SESSION_CONTROL, 1, 0,
                                         SessionControl(CTRL_START))))

            def saw_ready(msgs):
                return any(
                    m.msg_type == MsgType.ROBOT_STATE
                    and (m.payload.safety_state & 0x07) == SlaveMode.READY
                    for m in msgs
                )

            msgs = collect(ws, saw_ready, deadline_s=3.0)
            assert saw_ready(msgs), "no READY state report within budget"

            # operator pushes in: orders carry the console's box pose
            quat = tuple(quat_from_rpy(0.0, 0.0, math.pi / 2))
            ws.send_bytes(
                encode(
                    Message(
                        MsgType.MOTION_ORDER,
                        1,
                        0,
                        MotionOrder((0.0, -43.0, 9.0), quat, 0.0, 0),
                    )
                )
            )
            ws.send_bytes(encode(Message(MsgType.HEARTBEAT, 1, 0, Heartbeat())))

            def saw_frame_and_tracking(msgs):
                got_frame = any(m.msg_type == MsgType.US_FRAME for m in msgs)
                got_tracking = any(
                    m.msg_type == MsgType.ROBOT_STATE
                    and (m.payload.safety_state & 0x07) == SlaveMode.TRACKING
                    for m in msgs
                )
                return got_frame and got_tracking

            msgs = collect(ws, saw_frame_and_tracking, deadline_s=6.0)
            assert saw_frame_and_tracking(msgs), "no frame/TRACKING after operator input"
            frames = [m for m in msgs if m.msg_type == MsgType.US_FRAME]
            assert frames[0].payload.width == 64
            assert frames[0].payload.height == 60
            forces = [m for m in msgs if m.msg_type == MsgType.FORCE_SAMPLE]
            assert forces, "no force samples streamed"
            assert all(0.0 <= m.payload.normal_magnitude <= 20.0 for m in forces)
