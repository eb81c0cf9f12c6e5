"""Real-time console bridge: the session engine paced by the wall clock.

The browser console is the operator's input device and display; the master
logic itself (workspace clamp, box-to-chart mapping, order pacing) runs
here.  The WebSocket at /session carries raw wire-protocol frames in both
directions: the console sends SessionControl/Heartbeat/MotionOrder (tip =
master box coordinates, mm), the bridge sends everything the master
receives over the emulated link.  The virtual clock starts on the first
SessionControl START and then follows the wall clock.
"""

import asyncio
import contextlib
import time

from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from fastapi.responses import PlainTextResponse

from .geometry import rpy_from_quat
from .harness import load_scenario
from .protocol import CTRL_START, LinkDisruption, MsgType, decode, encode, CodecError
from .session import SessionEngine

TICK_SECONDS = 0.005


class SessionBridge:
    def __init__(self, scenario):
        self.scenario = scenario
        self.outbox: list[bytes] = []
        self.engine: SessionEngine = scenario.build_engine(
            master_sink=lambda msg: self.outbox.append(encode(msg))
        )
        self.operator = self.engine.operator
        self.clients: set = set()
        self.wall_t0: float | None = None
        self.decode_errors = 0

    def handle_client_bytes(self, blob: bytes) -> None:
        try:
            msg = decode(blob)
        except CodecError:
            self.decode_errors += 1
            return
        if msg.msg_type == MsgType.SESSION_CONTROL and msg.payload.code == CTRL_START:
            if self.wall_t0 is None:
                self.engine.start()
                self.wall_t0 = time.monotonic()
        elif msg.msg_type == MsgType.MOTION_ORDER:
            # console orders carry the virtual-probe box pose, not body space
            wrist = rpy_from_quat(msg.payload.orientation)
            self.operator.set_target(msg.payload.tip, wrist)
        # heartbeats only prove console liveness; nothing to do

    def pump(self) -> list[bytes]:
        """Advance the engine to the current wall time; return outbound frames."""
        if self.wall_t0 is None:
            return []
        elapsed_us = int((time.monotonic() - self.wall_t0) * 1_000_000)
        self.engine.advance_to(min(elapsed_us, self.engine.duration_us))
        if elapsed_us >= self.engine.duration_us:
            self.engine.advance_to(None)  # drain in-flight deliveries
        out, self.outbox = self.outbox, []
        return out


def build_app(scenario):
    bridge = SessionBridge(scenario)

    @contextlib.asynccontextmanager
    async def lifespan(app):
        task = asyncio.create_task(_ticker(bridge))
        try:
            yield
        finally:
            task.cancel()
            with contextlib.suppress(asyncio.CancelledError):
                await task

    app = FastAPI(lifespan=lifespan)
    app.state.bridge = bridge

    @app.get("/health")
    async def health():
        return PlainTextResponse("ok")

    @app.websocket("/session")
    async def session(ws: WebSocket):
        await ws.accept()
        bridge.clients.add(ws)
        try:
            while True:
                blob = await ws.receive_bytes()
                bridge.handle_client_bytes(blob)
        except WebSocketDisconnect:
            pass
        finally:
            bridge.clients.discard(ws)

    return app


async def _ticker(bridge: SessionBridge):
    while True:
        await asyncio.sleep(TICK_SECONDS)
        for blob in bridge.pump():
            for ws in list(bridge.clients):
                try:
                    await ws.send_bytes(blob)
                except Exception:
                    bridge.clients.discard(ws)


def serve(scenario_path, host="127.0.0.1", port=8766, preset_override=None,
          seed_override=None, extra_faults=()):
    import uvicorn

    scenario = load_scenario(scenario_path, preset_override, seed_override)
    for kind, start, end in extra_faults:
        if kind == "link_disruption":
            scenario.faults.append(LinkDisruption((start, end)))
    app = build_app(scenario)
    print(f"tersim serve: ws://{host}:{port}/session ({scenario.name})", flush=True)
    uvicorn.run(app, host=host, port=port, log_level="warning")
