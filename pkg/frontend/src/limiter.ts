/**
 * Rate limiter for command streams: at most `maxHz` sends per second,
 * always finishing with the latest value (trailing send), so a released
 * slider's final position is what the hand ends up holding.
 */

export type Clock = () => number;
export type Schedule = (fn: () => void, ms: number) => unknown;
export type Cancel = (handle: unknown) => void;

export interface LimiterOptions {
  clock?: Clock;
  schedule?: Schedule;
  cancel?: Cancel;
}

export class CommandLimiter<T> {
  readonly minIntervalMs: number;
  sends = 0;

  private readonly clock: Clock;
  private readonly schedule: Schedule;
  private readonly cancel: Cancel;
  private lastSentAt = Number.NEGATIVE_INFINITY;
  private pending: { value: T } | null = null;
  private timer: unknown = null;

  constructor(
    private readonly send: (value: T) => void,
    maxHz: number = 20,
    private readonly merge: (prev: T | null, next: T) => T = (_, next) => next,
    options: LimiterOptions = {},
  ) {
    if (maxHz <= 0) {
      throw new Error("maxHz must be positive");
    }
    this.minIntervalMs = 1000 / maxHz;
    this.clock = options.clock ?? (() => Date.now());
    this.schedule =
      options.schedule ?? ((fn, ms) => setTimeout(fn, ms) as unknown);
    this.cancel =
      options.cancel ?? ((handle) => clearTimeout(handle as number));
  }

  push(value: T): void {
    const now = this.clock();
    if (this.timer === null && now - this.lastSentAt >= this.minIntervalMs) {
      this.emit(this.merge(null, value), now);
      return;
    }
    this.pending = { value: this.merge(this.pending?.value ?? null, value) };
    if (this.timer === null) {
      const wait = Math.max(0, this.lastSentAt + this.minIntervalMs - now);
      this.timer = this.schedule(() => this.fire(), wait);
    }
  }

  private fire(): void {
    this.timer = null;
    if (this.pending !== null) {
      const value = this.pending.value;
      this.pending = null;
      this.emit(value, this.clock());
    }
  }

  private emit(value: T, now: number): void {
    this.lastSentAt = now;
    this.sends += 1;
    this.send(value);
  }

  /** Drops any scheduled trailing send. */
  dispose(): void {
    if (this.timer !== null) {
      this.cancel(this.timer);
      this.timer = null;
    }
    this.pending = null;
  }
}
