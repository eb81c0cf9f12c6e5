// WebSocket client with automatic retry and exponential backoff.

import { encode } from "./codec";
import { sessionStart } from "./input";

const BASE_DELAY_MS = 1000;
const BACKOFF_FACTOR = 1.8;
const MAX_DELAY_MS = 30_000;

export interface ClientCallbacks {
  onBinary(data: Uint8Array): void;
  onStatus(connected: boolean): void;
}

export class ConsoleClient {
  private ws: WebSocket | null = null;
  private delayMs = BASE_DELAY_MS;
  private closed = false;
  private seq = 0;

  constructor(private url: string, private cb: ClientCallbacks) {}

  connect(): void {
    if (this.closed) return;
    const ws = new WebSocket(this.url);
    ws.binaryType = "arraybuffer";
    ws.onopen = () => {
      this.delayMs = BASE_DELAY_MS;
      this.cb.onStatus(true);
      ws.send(encode(sessionStart(++this.seq)));
    };
    ws.onmessage = (ev) => {
      if (ev.data instanceof ArrayBuffer) {
        this.cb.onBinary(new Uint8Array(ev.data));
      }
    };
    ws.onclose = () => {
      this.cb.onStatus(false);
      this.ws = null;
      this.scheduleReconnect();
    };
    ws.onerror = () => {
      ws.close();
    };
    this.ws = ws;
  }

  private scheduleReconnect(): void {
    if (this.closed) return;
    setTimeout(() => this.connect(), this.delayMs);
    this.delayMs = Math.min(this.delayMs * BACKOFF_FACTOR, MAX_DELAY_MS);
  }

  send(data: Uint8Array): boolean {
    if (this.ws && this.ws.readyState === WebSocket.OPEN) {
      this.ws.send(data);
      return true;
    }
    return false;
  }

  close(): void {
    this.closed = true;
    this.ws?.close();
  }
}
