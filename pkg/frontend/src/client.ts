// WebSocket client: sends newline-terminated JSON, records a transcript,
// and feeds parsed server messages to a handler.

import { encodeLine, parseServerMsg, type ClientMsg, type ServerMsg } from "./protocol";
import { Transcript } from "./transcript";

export class ProtocolClient {
  readonly transcript = new Transcript();
  private ws: WebSocket | null = null;

  constructor(private onMessage: (msg: ServerMsg) => void,
              private onStatus: (connected: boolean) => void) {}

  connect(url: string): void {
    this.ws = new WebSocket(url);
    this.ws.onopen = () => this.onStatus(true);
    this.ws.onclose = () => this.onStatus(false);
    this.ws.onerror = () => this.onStatus(false);
    this.ws.onmessage = (ev: MessageEvent) => {
      const line = typeof ev.data === "string" ? ev.data : "";
      this.transcript.recordReceived(line);
      try {
        this.onMessage(parseServerMsg(line));
      } catch (err) {
        console.error("bad server message", err, line);
      }
    };
  }

  get connected(): boolean {
    return this.ws !== null && this.ws.readyState === WebSocket.OPEN;
  }

  send(msg: ClientMsg): void {
    if (!this.connected || this.ws === null) return;
    const line = encodeLine(msg);
    this.transcript.recordSent(line);
    this.ws.send(line);
  }

  close(): void {
    this.ws?.close();
  }
}
