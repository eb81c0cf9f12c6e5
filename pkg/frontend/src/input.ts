// Keyboard state -> virtual probe motion. The probe pose lives in the
// master box (x +/-80, y/z +/-60 mm); deltas are fixed steps per tick, so
// holding nothing keeps the probe exactly in place.

import { CTRL_START, Message, MotionOrder, MsgType, quatFromRpy } from "./codec";

export interface ProbeBoxPose {
  x: number;
  y: number;
  z: number;
  roll: number;
  pitch: number;
  yaw: number;
}

export interface InputConfig {
  tangentialStepMm: number;
  fineStepMm: number;
  wristStepRad: number;
}

export const DEFAULT_INPUT: InputConfig = {
  tangentialStepMm: 1.0,
  fineStepMm: 0.5,
  wristStepRad: 0.02,
};

export const BOX = { x: 80, y: 60, z: 60 };
const WRIST_LIMITS = { roll: Math.PI / 2, pitch: Math.PI / 3, yaw: Math.PI };

export function initialPose(): ProbeBoxPose {
  return { x: 0, y: 0, z: 0, roll: 0, pitch: 0, yaw: 0 };
}

const clamp = (v: number, lim: number) => Math.min(Math.max(v, -lim), lim);

export function poseDelta(keys: Set<string>, cfg: InputConfig = DEFAULT_INPUT) {
  const step = cfg.tangentialStepMm;
  let dx = 0,
    dy = 0,
    dz = 0,
    droll = 0,
    dpitch = 0,
    dyaw = 0;
  if (keys.has("ArrowRight") || keys.has("d")) dx += step;
  if (keys.has("ArrowLeft") || keys.has("a")) dx -= step;
  if (keys.has("ArrowUp") || keys.has("w")) dy += step;
  if (keys.has("ArrowDown") || keys.has("s")) dy -= step;
  if (keys.has("q")) dz += cfg.fineStepMm; // press in
  if (keys.has("e")) dz -= cfg.fineStepMm; // lift off
  if (keys.has("r")) dyaw += cfg.wristStepRad;
  if (keys.has("f")) dyaw -= cfg.wristStepRad;
  if (keys.has("t")) dpitch += cfg.wristStepRad;
  if (keys.has("g")) dpitch -= cfg.wristStepRad;
  if (keys.has("c")) droll += cfg.wristStepRad;
  if (keys.has("v")) droll -= cfg.wristStepRad;
  return { dx, dy, dz, droll, dpitch, dyaw };
}

export function isZeroDelta(d: ReturnType<typeof poseDelta>): boolean {
  return d.dx === 0 && d.dy === 0 && d.dz === 0 && d.droll === 0 && d.dpitch === 0 && d.dyaw === 0;
}

export function integrate(
  pose: ProbeBoxPose,
  keys: Set<string>,
  cfg: InputConfig = DEFAULT_INPUT
): ProbeBoxPose {
  const d = poseDelta(keys, cfg);
  return {
    x: clamp(pose.x + d.dx, BOX.x),
    y: clamp(pose.y + d.dy, BOX.y),
    z: clamp(pose.z + d.dz, BOX.z),
    roll: clamp(pose.roll + d.droll, WRIST_LIMITS.roll),
    pitch: clamp(pose.pitch + d.dpitch, WRIST_LIMITS.pitch),
    yaw: clamp(pose.yaw + d.dyaw, WRIST_LIMITS.yaw),
  };
}

export function motionOrderFrom(pose: ProbeBoxPose, seq: number, timestampUs: bigint): Message {
  const payload: MotionOrder = {
    kind: "motion",
    tip: [pose.x, pose.y, pose.z],
    orientation: quatFromRpy(pose.roll, pose.pitch, pose.yaw),
    fineD: 0,
    flags: 0,
  };
  return { type: MsgType.MotionOrder, seq, timestampUs, payload };
}

export function heartbeat(seq: number, timestampUs: bigint): Message {
  return { type: MsgType.Heartbeat, seq, timestampUs, payload: { kind: "heartbeat" } };
}

export function sessionStart(seq: number): Message {
  return {
    type: MsgType.SessionControl,
    seq,
    timestampUs: 0n,
    payload: { kind: "control", code: CTRL_START },
  };
}
