// Console bootstrap: socket, keyboard, 50 Hz order loop, render loop.

import { decode, encode } from "./codec";
import { heartbeat, initialPose, integrate, isZeroDelta, motionOrderFrom, poseDelta } from "./input";
import { ConsoleClient } from "./net";
import { render, Dom } from "./render";
import { applyMessage, countDecodeError, initialView, setConnected } from "./state";

const MOTION_RATE_HZ = 50;
const HEARTBEAT_EVERY = 5; // 10 Hz

function el(id: string): HTMLElement {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element ${id}`);
  return node;
}

function main(): void {
  const dom: Dom = {
    canvas: el("frame") as HTMLCanvasElement,
    forceBar: el("force-bar"),
    forceLabel: el("force-label"),
    badge: el("badge"),
    stats: el("stats"),
    probe: el("probe"),
  };
  const addrInput = el("address") as HTMLInputElement;
  const proto = location.protocol === "https:" ? "wss" : "ws";
  addrInput.value = `${proto}://${location.hostname}:8766/session`;
  const stepInput = el("step-mm") as HTMLInputElement;
  const fineInput = el("fine-mm") as HTMLInputElement;
  const gainInput = el("gain") as HTMLInputElement;

  let view = initialView();
  let pose = initialPose();
  const keys = new Set<string>();
  let touched = false;
  let seq = 0;
  let hbSeq = 0;
  let tick = 0;
  let client: ConsoleClient | null = null;

  function connect(): void {
    client?.close();
    view = initialView();
    pose = initialPose();
    touched = false;
    client = new ConsoleClient(addrInput.value, {
      onBinary(data) {
        try {
          view = applyMessage(view, decode(data), performance.now());
        } catch {
          view = countDecodeError(view);
        }
      },
      onStatus(connected) {
        view = setConnected(view, connected);
      },
    });
    client.connect();
  }
  el("connect").addEventListener("click", connect);

  window.addEventListener("keydown", (ev) => {
    keys.add(ev.key.length === 1 ? ev.key.toLowerCase() : ev.key);
  });
  window.addEventListener("keyup", (ev) => {
    keys.delete(ev.key.length === 1 ? ev.key.toLowerCase() : ev.key);
  });

  setInterval(() => {
    tick += 1;
    if (!client) return;
    const nowUs = BigInt(Math.round(performance.now() * 1000));
    const cfg = {
      tangentialStepMm: Number(stepInput.value) || 1.0,
      fineStepMm: Number(fineInput.value) || 0.5,
      wristStepRad: 0.02,
    };
    if (!isZeroDelta(poseDelta(keys, cfg))) touched = true;
    if (touched) {
      pose = integrate(pose, keys, cfg);
      client.send(encode(motionOrderFrom(pose, ++seq, nowUs)));
    }
    if (tick % HEARTBEAT_EVERY === 0) {
      client.send(encode(heartbeat(++hbSeq, nowUs)));
    }
  }, 1000 / MOTION_RATE_HZ);

  function frameLoop(): void {
    const probeText =
      `x ${pose.x.toFixed(1)} y ${pose.y.toFixed(1)} z ${pose.z.toFixed(1)} | ` +
      `rpy ${pose.roll.toFixed(2)} ${pose.pitch.toFixed(2)} ${pose.yaw.toFixed(2)}`;
    render(dom, view, performance.now(), probeText, Number(gainInput.value) || 1.0);
    requestAnimationFrame(frameLoop);
  }
  connect();
  frameLoop();
}

main();
