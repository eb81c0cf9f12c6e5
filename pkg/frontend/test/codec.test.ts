import { readFileSync } from "node:fs";
import { dirname, join } from "node:path";
import { fileURLToPath } from "node:url";
import { describe, expect, it } from "vitest";

import {
  BadMagic,
  CodecError,
  decode,
  encode,
  LengthMismatch,
  Message,
  MsgType,
  Truncated,
  UnknownType,
} from "../src/codec";

const HERE = dirname(fileURLToPath(import.meta.url));
const VECTORS_PATH = join(HERE, "..", "..", "codec_vectors.bin");

function goldenBlobs(): Uint8Array[] {
  const raw = new Uint8Array(readFileSync(VECTORS_PATH));
  const view = new DataView(raw.buffer);
  const blobs: Uint8Array[] = [];
  let pos = 0;
  while (pos < raw.length) {
    const len = view.getUint32(pos, true);
    pos += 4;
    blobs.push(raw.slice(pos, pos + len));
    pos += len;
  }
  return blobs;
}

describe("shared golden vectors", () => {
  it("covers all six message types", () => {
    const types = new Set(goldenBlobs().map((b) => decode(b).type));
    expect(types.size).toBe(6);
  });

  it("every vector decodes and re-encodes byte-identically", () => {
    for (const blob of goldenBlobs()) {
      const msg = decode(blob);
      expect(encode(msg)).toEqual(blob);
    }
  });

  it("fixed sizes: heartbeat 18 B, motion order 51 B", () => {
    const byType = new Map(goldenBlobs().map((b) => [decode(b).type, b]));
    expect(byType.get(MsgType.Heartbeat)!.length).toBe(18);
    expect(byType.get(MsgType.MotionOrder)!.length).toBe(51);
  });
});

describe("round trips", () => {
  it("motion order survives encode/decode", () => {
    const msg: Message = {
      type: MsgType.MotionOrder,
      seq: 77,
      timestampUs: 123456789n,
      payload: {
        kind: "motion",
        tip: [12.5, -3.25, 101.5],
        orientation: [0.5, -0.5, 0.5, 0.5],
        fineD: 1.5,
        flags: 3,
      },
    };
    expect(decode(encode(msg))).toEqual(msg);
  });

  it("frame pixels survive", () => {
    const pixels = new Uint8Array(16 * 8).map((_, i) => (i * 7 + 3) % 256);
    const msg: Message = {
      type: MsgType.USFrame,
      seq: 1,
      timestampUs: 5n,
      payload: { kind: "frame", width: 16, height: 8, pixels },
    };
    const out = decode(encode(msg));
    expect(out.payload.kind).toBe("frame");
    if (out.payload.kind === "frame") {
      expect(out.payload.pixels).toEqual(pixels);
    }
  });

  it("u64 timestamps keep full precision", () => {
    const msg: Message = {
      type: MsgType.Heartbeat,
      seq: 1,
      timestampUs: 9007199254740993n, // above Number.MAX_SAFE_INTEGER
      payload: { kind: "heartbeat" },
    };
    expect(decode(encode(msg)).timestampUs).toBe(9007199254740993n);
  });
});

describe("decode errors", () => {
  it("bad magic", () => {
    const blob = encode({
      type: MsgType.Heartbeat,
      seq: 0,
      timestampUs: 0n,
      payload: { kind: "heartbeat" },
    });
    blob[0] = 0;
    expect(() => decode(blob)).toThrow(BadMagic);
  });

  it("truncated header and payload", () => {
    expect(() => decode(new Uint8Array([0x54, 6]))).toThrow(Truncated);
    const blobs = goldenBlobs();
    const motion = blobs.find((b) => decode(b).type === MsgType.MotionOrder)!;
    expect(() => decode(motion.slice(0, motion.length - 1))).toThrow(Truncated);
  });

  it("unknown type", () => {
    const blob = encode({
      type: MsgType.Heartbeat,
      seq: 0,
      timestampUs: 0n,
      payload: { kind: "heartbeat" },
    });
    blob[1] = 99;
    expect(() => decode(blob)).toThrow(UnknownType);
  });

  it("trailing bytes rejected", () => {
    const blob = encode({
      type: MsgType.Heartbeat,
      seq: 0,
      timestampUs: 0n,
      payload: { kind: "heartbeat" },
    });
    const padded = new Uint8Array(blob.length + 2);
    padded.set(blob);
    expect(() => decode(padded)).toThrow(LengthMismatch);
  });

  it("fuzz: never throws anything but CodecError", () => {
    let x = 123456789;
    const rand = () => {
      // deterministic xorshift
      x ^= x << 13;
      x ^= x >>> 17;
      x ^= x << 5;
      return (x >>> 0) / 0xffffffff;
    };
    const golden = goldenBlobs();
    for (let i = 0; i < 5000; i++) {
      let blob: Uint8Array;
      if (i % 2 === 0) {
        blob = new Uint8Array(Math.floor(rand() * 100)).map(() => Math.floor(rand() * 256));
      } else {
        blob = Uint8Array.from(golden[Math.floor(rand() * golden.length)]);
        const n = 1 + Math.floor(rand() * 4);
        for (let k = 0; k < n; k++) {
          blob[Math.floor(rand() * blob.length)] = Math.floor(rand() * 256);
        }
      }
      try {
        decode(blob);
      } catch (err) {
        expect(err).toBeInstanceOf(CodecError);
      }
    }
  });
});
