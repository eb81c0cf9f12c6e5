// Console view state: a pure function of the received message log plus
// local input, so a session can be replayed from a capture.

import { Message, MsgType } from "./codec";

export const FORCE_BAR_MAX_N = 20;
const FPS_WINDOW_MS = 10_000;

export type SlaveModeName = "INIT" | "READY" | "TRACKING" | "SAFE_HOLD" | "SHUTDOWN" | "?";

const MODE_NAMES: SlaveModeName[] = ["INIT", "READY", "TRACKING", "SAFE_HOLD", "SHUTDOWN"];

export interface FrameView {
  seq: number;
  width: number;
  height: number;
  pixels: Uint8Array;
}

export interface ConsoleView {
  connected: boolean;
  slaveMode: SlaveModeName;
  safeHoldSeen: boolean;
  forceN: number;
  maxForceSeenN: number;
  frame: FrameView | null;
  frameArrivalsMs: number[];
  framesReceived: number;
  frameDrops: number;
  latencyOffsetMs: number | null;
  latencyMs: number;
  decodeErrors: number;
  wristRpy: [number, number, number];
  strapLengths: [number, number, number, number];
}

export function initialView(): ConsoleView {
  return {
    connected: false,
    slaveMode: "?",
    safeHoldSeen: false,
    forceN: 0,
    maxForceSeenN: 0,
    frame: null,
    frameArrivalsMs: [],
    framesReceived: 0,
    frameDrops: 0,
    latencyOffsetMs: null,
    latencyMs: 0,
    decodeErrors: 0,
    wristRpy: [0, 0, 0],
    strapLengths: [0, 0, 0, 0],
  };
}

export function applyMessage(view: ConsoleView, msg: Message, nowMs: number): ConsoleView {
  const next = { ...view };
  switch (msg.type) {
    case MsgType.USFrame: {
      if (msg.payload.kind !== "frame") break;
      if (next.frame && msg.seq <= next.frame.seq) break; // stale or duplicate
      if (next.frame) {
        next.frameDrops += msg.seq - next.frame.seq - 1;
      }
      next.frame = {
        seq: msg.seq,
        width: msg.payload.width,
        height: msg.payload.height,
        pixels: msg.payload.pixels,
      };
      next.framesReceived += 1;
      next.frameArrivalsMs = [...next.frameArrivalsMs, nowMs].filter(
        (t) => nowMs - t <= FPS_WINDOW_MS
      );
      const sentMs = Number(msg.timestampUs / 1000n);
      if (next.latencyOffsetMs === null) {
        next.latencyOffsetMs = nowMs - sentMs;
      }
      next.latencyMs = Math.max(0, nowMs - sentMs - next.latencyOffsetMs);
      break;
    }
    case MsgType.ForceSample: {
      if (msg.payload.kind !== "force") break;
      const clamped = Math.min(Math.max(msg.payload.normalMagnitude, 0), FORCE_BAR_MAX_N);
      next.forceN = clamped;
      next.maxForceSeenN = Math.max(next.maxForceSeenN, clamped);
      break;
    }
    case MsgType.RobotStateReport: {
      if (msg.payload.kind !== "robotState") break;
      const mode = msg.payload.safetyState & 0x07;
      next.slaveMode = MODE_NAMES[mode] ?? "?";
      if (next.slaveMode === "SAFE_HOLD") next.safeHoldSeen = true;
      next.wristRpy = msg.payload.wristRpy;
      next.strapLengths = msg.payload.strapLengths;
      break;
    }
    default:
      break;
  }
  return next;
}

export function achievedFps(view: ConsoleView, nowMs: number): number {
  const recent = view.frameArrivalsMs.filter((t) => nowMs - t <= FPS_WINDOW_MS);
  if (recent.length < 2) return 0;
  const span = (nowMs - recent[0]) / 1000;
  return span > 0 ? recent.length / span : 0;
}

export function setConnected(view: ConsoleView, connected: boolean): ConsoleView {
  return { ...view, connected };
}

export function countDecodeError(view: ConsoleView): ConsoleView {
  return { ...view, decodeErrors: view.decodeErrors + 1 };
}
