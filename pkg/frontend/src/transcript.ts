// Sent-message transcript: recorded verbatim (the exact lines that went over
// the socket) so replaying it through the service must reproduce the state
// stream byte for byte.

export class Transcript {
  private sent: string[] = [];
  private received: string[] = [];

  recordSent(line: string): void {
    this.sent.push(line);
  }

  recordReceived(line: string): void {
    this.received.push(line);
  }

  sentLines(): string[] {
    return [...this.sent];
  }

  receivedLines(): string[] {
    return [...this.received];
  }

  clear(): void {
    this.sent = [];
    this.received = [];
  }

  export(): string {
    return JSON.stringify({ sent: this.sent, received: this.received }, null, 0);
  }

  static parse(text: string): { sent: string[]; received: string[] } {
    const obj = JSON.parse(text);
    if (!Array.isArray(obj.sent) || !Array.isArray(obj.received)) {
      throw new Error("not a transcript export");
    }
    return { sent: obj.sent, received: obj.received };
  }
}
