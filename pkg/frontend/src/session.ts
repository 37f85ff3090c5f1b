/**
 * One console session = at most one WebSocket to the daemon.
 *
 * Requests resolve through id correlation; telemetry updates a
 * latest-frame snapshot that rendering reads on its own cadence; events
 * fan out to listeners. All failures surface as CommandError with the
 * daemon's code and message verbatim.
 */

import {
  encodeRequest,
  parseIncoming,
  ProtocolError,
  type EventMsg,
  type TelemetryFrame,
} from "./protocol.js";

export type SessionState = "disconnected" | "connecting" | "connected";

export class CommandError extends Error {
  constructor(
    readonly code: string,
    message: string,
  ) {
    super(message);
  }
}

export interface SocketLike {
  send(data: string): void;
  close(): void;
  addEventListener(type: string, listener: (event: never) => void): void;
}

export type SocketFactory = (url: string) => SocketLike;

export interface SessionOptions {
  url: string;
  token?: string;
  socketFactory?: SocketFactory;
  requestTimeoutMs?: number;
}

interface PendingRequest {
  resolve: (result: Record<string, unknown>) => void;
  reject: (error: Error) => void;
  timer: ReturnType<typeof setTimeout> | null;
}

type Listener<T> = (value: T) => void;

function defaultFactory(url: string): SocketLike {
  const ctor = (globalThis as { WebSocket?: new (url: string) => SocketLike })
    .WebSocket;
  if (ctor === undefined) {
    throw new Error("no WebSocket implementation available");
  }
  return new ctor(url);
}

export class ConsoleSession {
  readonly url: string;
  readonly token: string;
  subscriptionRateHz = 0;
  protocolErrors = 0;

  private readonly socketFactory: SocketFactory;
  private readonly requestTimeoutMs: number;
  private socket: SocketLike | null = null;
  private stateValue: SessionState = "disconnected";
  private nextId = 1;
  private pending = new Map<number, PendingRequest>();
  private latest: TelemetryFrame | null = null;
  private stateListeners = new Set<Listener<SessionState>>();
  private telemetryListeners = new Set<Listener<TelemetryFrame>>();
  private eventListeners = new Set<Listener<Record<string, unknown>>>();

  constructor(options: SessionOptions) {
    this.url = options.url;
    this.token = options.token ?? "";
    this.socketFactory = options.socketFactory ?? defaultFactory;
    this.requestTimeoutMs = options.requestTimeoutMs ?? 30_000;
  }

  get state(): SessionState {
    return this.stateValue;
  }

  latestFrame(): TelemetryFrame | null {
    return this.latest;
  }

  pendingIds(): number[] {
    return [...this.pending.keys()];
  }

  onState(listener: Listener<SessionState>): () => void {
    this.stateListeners.add(listener);
    return () => this.stateListeners.delete(listener);
  }

  onTelemetry(listener: Listener<TelemetryFrame>): () => void {
    this.telemetryListeners.add(listener);
    return () => this.telemetryListeners.delete(listener);
  }

  onEvent(listener: Listener<Record<string, unknown>>): () => void {
    this.eventListeners.add(listener);
    return () => this.eventListeners.delete(listener);
  }

  private setState(state: SessionState): void {
    if (state === this.stateValue) {
      return;
    }
    this.stateValue = state;
    for (const listener of this.stateListeners) {
      listener(state);
    }
  }

  async connect(): Promise<void> {
    if (this.socket !== null) {
      throw new Error("session already has an active connection");
    }
    this.setState("connecting");
    const url = this.token
      ? `${this.url}${this.url.includes("?") ? "&" : "?"}token=${encodeURIComponent(this.token)}`
      : this.url;
    const socket = this.socketFactory(url);
    this.socket = socket;
    try {
      await new Promise<void>((resolve, reject) => {
        let settled = false;
        socket.addEventListener("open", () => {
          if (!settled) {
            settled = true;
            resolve();
          }
        });
        const fail = () => {
          if (!settled) {
            settled = true;
            reject(new CommandError("disconnected", "connection failed"));
          }
        };
        socket.addEventListener("error", fail);
        socket.addEventListener("close", fail);
      });
    } catch (error) {
      this.socket = null;
      this.setState("disconnected");
      throw error;
    }
    socket.addEventListener("message", (event: { data: unknown }) => {
      this.handleMessage(String(event.data));
    });
    socket.addEventListener("close", () => this.handleClose());
    this.setState("connected");
  }

  private handleMessage(raw: string): void {
    let message;
    try {
      message = parseIncoming(raw);
    } catch (error) {
      if (error instanceof ProtocolError) {
        this.protocolErrors += 1;
        return;
      }
      throw error;
    }
    if (message.kind === "telemetry") {
      this.latest = message.frame;
      for (const listener of this.telemetryListeners) {
        listener(message.frame);
      }
      return;
    }
    if (message.kind === "event") {
      for (const listener of this.eventListeners) {
        listener((message as EventMsg).event);
      }
      return;
    }
    const waiter = this.pending.get(message.id);
    if (waiter === undefined) {
      return; // response to a request we gave up on
    }
    this.pending.delete(message.id);
    if (waiter.timer !== null) {
      clearTimeout(waiter.timer);
    }
    if (message.ok) {
      waiter.resolve(message.result ?? {});
    } else {
      const error = message.error ?? { code: "failed", message: "" };
      waiter.reject(new CommandError(error.code, error.message));
    }
  }

  private handleClose(): void {
    this.socket = null;
    this.setState("disconnected");
    const waiters = [...this.pending.values()];
    this.pending.clear();
    for (const waiter of waiters) {
      if (waiter.timer !== null) {
        clearTimeout(waiter.timer);
      }
      waiter.reject(new CommandError("disconnected", "connection closed"));
    }
  }

  request(
    type: string,
    payload: Record<string, unknown> = {},
    timeoutMs?: number,
  ): Promise<Record<string, unknown>> {
    if (this.stateValue !== "connected" || this.socket === null) {
      return Promise.reject(
        new CommandError("disconnected", "session is not connected"),
      );
    }
    const id = this.nextId++;
    const line = encodeRequest(id, type, payload);
    return new Promise((resolve, reject) => {
      const budget = timeoutMs ?? this.requestTimeoutMs;
      const timer =
        budget > 0
          ? setTimeout(() => {
              this.pending.delete(id);
              reject(
                new CommandError("timeout", `${type}: no response in time`),
              );
            }, budget)
          : null;
      this.pending.set(id, { resolve, reject, timer });
      this.socket!.send(line);
    });
  }

  async subscribe(rateHz: number): Promise<number> {
    const result = await this.request("subscribe", { rate_hz: rateHz });
    this.subscriptionRateHz = Number(result.rate_hz ?? 0);
    return this.subscriptionRateHz;
  }

  close(): void {
    this.socket?.close();
  }
}
