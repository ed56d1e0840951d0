/** Wire and script types. Tokens are integer ids end to end — never strings. */

export type TokenId = number;

export interface GenParams {
  maxNewTokens: number;
  seed?: number;
  stopCondition?: TokenId | null;
}

export interface RetryPolicy {
  /** Total attempts, first try included. */
  maxAttempts: number;
  /** Fallback backoff when the server sends no Retry-After hint (ms). */
  baseBackoffMs: number;
  /** Upper bound for any single backoff (ms). */
  maxBackoffMs: number;
}

export const DEFAULT_RETRY: RetryPolicy = {
  maxAttempts: 3,
  baseBackoffMs: 100,
  maxBackoffMs: 5000,
};

export interface SessionOptions {
  baseUrl: string;
  sessionId: string;
  retry?: Partial<RetryPolicy>;
  /** Per-request timeout in ms; must outlive a server-side model switch. */
  requestTimeoutMs?: number;
}

/** One scripted turn: user tokens appended to the running context. */
export interface TurnSpec {
  user: TokenId[];
  params?: Partial<GenParams>;
  /** Parallel continuations opened after this turn (same session, shared prefix). */
  branches?: TurnSpec[][];
}

export interface Exchange {
  path: string; // e.g. "t0", "t1", "t1.b0.t0"
  input: TokenId[];
  output: TokenId[];
}

export interface BranchError {
  path: string;
  error: string;
}

export interface Transcript {
  exchanges: Exchange[];
  errors: BranchError[];
}

export class ExhaustedRetriesError extends Error {
  constructor(attempts: number, last: string) {
    super(`gave up after ${attempts} attempts: ${last}`);
    this.name = "ExhaustedRetriesError";
  }
}

export class ProtocolMismatchError extends Error {
  constructor(detail: string) {
    super(`response violates the agent-facing schema: ${detail}`);
    this.name = "ProtocolMismatchError";
  }
}

export class ClientValidationError extends Error {
  constructor(detail: string) {
    super(detail);
    this.name = "ClientValidationError";
  }
}
