// Binary wire codec, little-endian. Header (18 bytes): magic 0x54 u8,
// msg type u8, seq u32, timestamp u64, payload length u32. Must stay
// bit-compatible with the simulator side; both test suites share
// codec_vectors.bin.

export const MAGIC = 0x54;
export const HEADER_SIZE = 18;

export enum MsgType {
  MotionOrder = 1,
  USFrame = 2,
  ForceSample = 3,
  RobotStateReport = 4,
  SessionControl = 5,
  Heartbeat = 6,
}

export const CTRL_START = 1;
export const CTRL_STOP = 2;

export interface MotionOrder {
  kind: "motion";
  tip: [number, number, number];
  orientation: [number, number, number, number];
  fineD: number;
  flags: number;
}

export interface USFramePayload {
  kind: "frame";
  width: number;
  height: number;
  pixels: Uint8Array;
}

export interface ForceSample {
  kind: "force";
  force: [number, number, number];
  normalMagnitude: number;
}

export interface RobotStateReport {
  kind: "robotState";
  strapLengths: [number, number, number, number];
  wristRpy: [number, number, number];
  fineD: number;
  safetyState: number;
}

export interface SessionControl {
  kind: "control";
  code: number;
}

export interface Heartbeat {
  kind: "heartbeat";
}

export type Payload =
  | MotionOrder
  | USFramePayload
  | ForceSample
  | RobotStateReport
  | SessionControl
  | Heartbeat;

export interface Message {
  type: MsgType;
  seq: number;
  timestampUs: bigint;
  payload: Payload;
}

export class CodecError extends Error {}
export class BadMagic extends CodecError {}
export class Truncated extends CodecError {}
export class UnknownType extends CodecError {}
export class LengthMismatch extends CodecError {}

const PAYLOAD_SIZES: Partial<Record<MsgType, number>> = {
  [MsgType.MotionOrder]: 33,
  [MsgType.ForceSample]: 16,
  [MsgType.RobotStateReport]: 33,
  [MsgType.SessionControl]: 1,
  [MsgType.Heartbeat]: 0,
};

function payloadBytes(m: Message): Uint8Array {
  const p = m.payload;
  switch (p.kind) {
    case "motion": {
      const buf = new Uint8Array(33);
      const view = new DataView(buf.buffer);
      p.tip.forEach((v, i) => view.setFloat32(i * 4, v, true));
      p.orientation.forEach((v, i) => view.setFloat32(12 + i * 4, v, true));
      view.setFloat32(28, p.fineD, true);
      view.setUint8(32, p.flags);
      return buf;
    }
    case "force": {
      const buf = new Uint8Array(16);
      const view = new DataView(buf.buffer);
      p.force.forEach((v, i) => view.setFloat32(i * 4, v, true));
      view.setFloat32(12, p.normalMagnitude, true);
      return buf;
    }
    case "robotState": {
      const buf = new Uint8Array(33);
      const view = new DataView(buf.buffer);
      p.strapLengths.forEach((v, i) => view.setFloat32(i * 4, v, true));
      p.wristRpy.forEach((v, i) => view.setFloat32(16 + i * 4, v, true));
      view.setFloat32(28, p.fineD, true);
      view.setUint8(32, p.safetyState);
      return buf;
    }
    case "frame": {
      if (p.pixels.length !== p.width * p.height) {
        throw new CodecError("frame pixel count does not match dimensions");
      }
      const buf = new Uint8Array(4 + p.pixels.length);
      const view = new DataView(buf.buffer);
      view.setUint16(0, p.width, true);
      view.setUint16(2, p.height, true);
      buf.set(p.pixels, 4);
      return buf;
    }
    case "control":
      return new Uint8Array([p.code & 0xff]);
    case "heartbeat":
      return new Uint8Array(0);
  }
}

export function encode(m: Message): Uint8Array {
  const payload = payloadBytes(m);
  const out = new Uint8Array(HEADER_SIZE + payload.length);
  const view = new DataView(out.buffer);
  view.setUint8(0, MAGIC);
  view.setUint8(1, m.type);
  view.setUint32(2, m.seq, true);
  view.setBigUint64(6, m.timestampUs, true);
  view.setUint32(14, payload.length, true);
  out.set(payload, HEADER_SIZE);
  return out;
}

export function decode(buf: Uint8Array): Message {
  if (buf.length < HEADER_SIZE) {
    throw new Truncated(`need ${HEADER_SIZE} header bytes, got ${buf.length}`);
  }
  const view = new DataView(buf.buffer, buf.byteOffset, buf.byteLength);
  if (view.getUint8(0) !== MAGIC) {
    throw new BadMagic(`bad magic byte 0x${view.getUint8(0).toString(16)}`);
  }
  const type = view.getUint8(1) as MsgType;
  if (!(type in MsgType)) {
    throw new UnknownType(`unknown message type ${type}`);
  }
  const seq = view.getUint32(2, true);
  const timestampUs = view.getBigUint64(6, true);
  const plen = view.getUint32(14, true);
  if (buf.length < HEADER_SIZE + plen) {
    throw new Truncated(`payload declares ${plen} bytes, ${buf.length - HEADER_SIZE} present`);
  }
  if (buf.length > HEADER_SIZE + plen) {
    throw new LengthMismatch("trailing bytes after declared payload");
  }
  const expected = PAYLOAD_SIZES[type];
  if (expected !== undefined && plen !== expected) {
    throw new LengthMismatch(`${MsgType[type]} payload must be ${expected} bytes`);
  }
  const p = new DataView(buf.buffer, buf.byteOffset + HEADER_SIZE, plen);
  let payload: Payload;
  switch (type) {
    case MsgType.MotionOrder:
      payload = {
        kind: "motion",
        tip: [p.getFloat32(0, true), p.getFloat32(4, true), p.getFloat32(8, true)],
        orientation: [
          p.getFloat32(12, true),
          p.getFloat32(16, true),
          p.getFloat32(20, true),
          p.getFloat32(24, true),
        ],
        fineD: p.getFloat32(28, true),
        flags: p.getUint8(32),
      };
      break;
    case MsgType.ForceSample:
      payload = {
        kind: "force",
        force: [p.getFloat32(0, true), p.getFloat32(4, true), p.getFloat32(8, true)],
        normalMagnitude: p.getFloat32(12, true),
      };
      break;
    case MsgType.RobotStateReport:
      payload = {
        kind: "robotState",
        strapLengths: [
          p.getFloat32(0, true),
          p.getFloat32(4, true),
          p.getFloat32(8, true),
          p.getFloat32(12, true),
        ],
        wristRpy: [p.getFloat32(16, true), p.getFloat32(20, true), p.getFloat32(24, true)],
        fineD: p.getFloat32(28, true),
        safetyState: p.getUint8(32),
      };
      break;
    case MsgType.USFrame: {
      if (plen < 4) {
        throw new LengthMismatch("USFrame payload shorter than its dimension header");
      }
      const width = p.getUint16(0, true);
      const height = p.getUint16(2, true);
      if (plen !== 4 + width * height) {
        throw new LengthMismatch(`USFrame ${width}x${height} needs ${width * height} pixel bytes`);
      }
      payload = {
        kind: "frame",
        width,
        height,
        pixels: buf.slice(HEADER_SIZE + 4, HEADER_SIZE + plen),
      };
      break;
    }
    case MsgType.SessionControl:
      payload = { kind: "control", code: p.getUint8(0) };
      break;
    default:
      payload = { kind: "heartbeat" };
  }
  return { type, seq, timestampUs, payload };
}

// quaternion for intrinsic yaw(z)*pitch(y)*roll(x), matching the robot side
export function quatFromRpy(
  roll: number,
  pitch: number,
  yaw: number
): [number, number, number, number] {
  const cr = Math.cos(roll / 2),
    sr = Math.sin(roll / 2);
  const cp = Math.cos(pitch / 2),
    sp = Math.sin(pitch / 2);
  const cy = Math.cos(yaw / 2),
    sy = Math.sin(yaw / 2);
  return [
    cy * cp * cr + sy * sp * sr,
    cy * cp * sr - sy * sp * cr,
    cy * sp * cr + sy * cp * sr,
    sy * cp * cr - cy * sp * sr,
  ];
}
