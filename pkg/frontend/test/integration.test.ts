// End-to-end drill against a real `tersim serve` process: the test plays
// the console role using the production codec/state/input modules, minus
// the canvas. Needs python3 with the simulator package installed.

import { ChildProcess, spawn } from "node:child_process";
import { setTimeout as delay } from "node:timers/promises";
import { afterEach, describe, expect, it } from "vitest";
import WebSocket from "ws";

import { decode, encode, MsgType } from "../src/codec";
import { heartbeat, initialPose, integrate, motionOrderFrom, sessionStart } from "../src/input";
import { achievedFps, applyMessage, ConsoleView, initialView } from "../src/state";

const PYTHON = process.env.PYTHON ?? "python3";

let proc: ChildProcess | null = null;

afterEach(() => {
  proc?.kill("SIGTERM");
  proc = null;
});

async function startServe(port: number, extraArgs: string[] = []): Promise<void> {
  proc = spawn(
    PYTHON,
    ["-m", "tersim.cli", "serve", "interactive", "--listen", `127.0.0.1:${port}`, ...extraArgs],
    { stdio: ["ignore", "pipe", "pipe"] }
  );
  const deadline = Date.now() + 20_000;
  while (Date.now() < deadline) {
    try {
      const res = await fetch(`http://127.0.0.1:${port}/health`);
      if ((await res.text()) === "ok") return;
    } catch {
      // not up yet
    }
    await delay(200);
  }
  throw new Error("tersim serve did not come up");
}

interface Driver {
  ws: WebSocket;
  view: () => ConsoleView;
  frameArrivals: number[];
  startedAtMs: number;
  readyAtMs: number | null;
  stop: () => void;
}

function drive(port: number, pressKeys: string[]): Promise<Driver> {
  return new Promise((resolve, reject) => {
    const ws = new WebSocket(`ws://127.0.0.1:${port}/session`);
    ws.binaryType = "arraybuffer";
    let view = initialView();
    const frameArrivals: number[] = [];
    const state = {
      ws,
      view: () => view,
      frameArrivals,
      startedAtMs: 0,
      readyAtMs: null as number | null,
      stop: () => {},
    };
    let seq = 0;
    let hbSeq = 0;
    let pose = initialPose();
    const keys = new Set(pressKeys);

    ws.on("open", () => {
      state.startedAtMs = Date.now();
      ws.send(encode(sessionStart(1)));
      const orderTimer = setInterval(() => {
        pose = integrate(pose, keys);
        const nowUs = BigInt(Date.now()) * 1000n;
        ws.send(encode(motionOrderFrom(pose, ++seq, nowUs)));
        if (seq % 5 === 0) ws.send(encode(heartbeat(++hbSeq, nowUs)));
      }, 20);
      state.stop = () => {
        clearInterval(orderTimer);
        ws.close();
      };
      resolve(state);
    });
    ws.on("message", (data) => {
      const bytes = new Uint8Array(data as ArrayBuffer);
      const now = Date.now();
      const msg = decode(bytes);
      view = applyMessage(view, msg, now);
      if (msg.type === MsgType.USFrame) frameArrivals.push(now);
      if (state.readyAtMs === null && view.slaveMode === "READY") {
        state.readyAtMs = now;
      }
    });
    ws.on("error", reject);
  });
}

async function waitFor(pred: () => boolean, timeoutMs: number, label: string): Promise<void> {
  const deadline = Date.now() + timeoutMs;
  while (Date.now() < deadline) {
    if (pred()) return;
    await delay(100);
  }
  throw new Error(`timed out waiting for ${label}`);
}

describe("console against tersim serve", () => {
  it(
    "shows READY fast, streams ~4 fps, keeps the force bar within limits",
    async () => {
      await startServe(8871);
      const driver = await drive(8871, ["d", "q"]); // sweep while pressing in
      try {
        await waitFor(() => driver.readyAtMs !== null, 3_000, "READY state report");
        expect(driver.readyAtMs! - driver.startedAtMs).toBeLessThanOrEqual(1_000);

        await waitFor(() => driver.frameArrivals.length >= 1, 5_000, "first frame");
        // let the stream settle over a full 10 s window
        await delay(11_000);
        const fps = achievedFps(driver.view(), Date.now());
        expect(Math.abs(fps - 4.0)).toBeLessThanOrEqual(0.5);

        const v = driver.view();
        expect(v.slaveMode === "TRACKING" || v.slaveMode === "SAFE_HOLD").toBe(true);
        expect(v.maxForceSeenN).toBeGreaterThan(0);
        expect(v.maxForceSeenN).toBeLessThanOrEqual(20.0);
        expect(v.decodeErrors).toBe(0);
      } finally {
        driver.stop();
      }
    },
    40_000
  );

  it(
    "shows the SAFE_HOLD badge during an injected link disruption",
    async () => {
      await startServe(8872, ["--inject-disruption", "3,2"]);
      const driver = await drive(8872, ["d", "q"]);
      try {
        await waitFor(() => driver.view().safeHoldSeen, 12_000, "SAFE_HOLD badge");
        expect(driver.view().safeHoldSeen).toBe(true);
        // recovery: tracking resumes once orders flow again
        await waitFor(() => driver.view().slaveMode === "TRACKING", 8_000, "tracking resume");
      } finally {
        driver.stop();
      }
    },
    40_000
  );
});
