// Canvas + DOM painting of the console view.

import { achievedFps, ConsoleView, FORCE_BAR_MAX_N } from "./state";

export interface Dom {
  canvas: HTMLCanvasElement;
  forceBar: HTMLElement;
  forceLabel: HTMLElement;
  badge: HTMLElement;
  stats: HTMLElement;
  probe: HTMLElement;
}

export function render(
  dom: Dom,
  view: ConsoleView,
  nowMs: number,
  probeText: string,
  gain = 1.0
): void {
  const ctx = dom.canvas.getContext("2d");
  if (ctx && view.frame) {
    const { width, height, pixels } = view.frame;
    if (dom.canvas.width !== width || dom.canvas.height !== height) {
      dom.canvas.width = width;
      dom.canvas.height = height;
    }
    const img = ctx.createImageData(width, height);
    for (let i = 0; i < pixels.length; i++) {
      const level = Math.min(255, Math.round(pixels[i] * gain));
      img.data[i * 4] = level;
      img.data[i * 4 + 1] = level;
      img.data[i * 4 + 2] = level;
      img.data[i * 4 + 3] = 255;
    }
    ctx.putImageData(img, 0, 0);
  }

  const frac = Math.min(view.forceN / FORCE_BAR_MAX_N, 1);
  dom.forceBar.style.width = `${(frac * 100).toFixed(1)}%`;
  dom.forceBar.style.background = frac > 0.8 ? "#d9534f" : "#5cb85c";
  dom.forceLabel.textContent = `${view.forceN.toFixed(2)} N`;

  const mode = view.connected ? view.slaveMode : "DISCONNECTED";
  dom.badge.textContent = mode;
  const cls = mode === "?" ? "unknown" : mode.toLowerCase().replace("_", "-");
  dom.badge.className = `badge badge-${cls}`;

  const fps = achievedFps(view, nowMs);
  dom.stats.textContent =
    `fps ${fps.toFixed(1)} | frames ${view.framesReceived} | drops ${view.frameDrops} | ` +
    `latency ~${view.latencyMs.toFixed(0)} ms | decode errors ${view.decodeErrors}`;
  dom.probe.textContent = probeText;
}
