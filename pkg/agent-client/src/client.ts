/**
 * Session-scoped client for the capture proxy's agent-facing endpoint.
 *
 * The proxy absorbs model switches server-side, so a healthy call returns one
 * contiguous token array. The client's own retry loop only handles retryable
 * 503s (pending-timeout, transient unavailability), backing off from the
 * server's Retry-After hint; it never sees or surfaces raw wait signals.
 */

import {
  ClientValidationError,
  DEFAULT_RETRY,
  ExhaustedRetriesError,
  GenParams,
  ProtocolMismatchError,
  RetryPolicy,
  SessionOptions,
  TokenId,
} from "./types.js";

function sleep(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}

function isIntegerArray(value: unknown): value is number[] {
  return Array.isArray(value) && value.every((t) => Number.isInteger(t));
}

export class AgentSession {
  readonly sessionId: string;
  readonly baseUrl: string;
  private readonly retry: RetryPolicy;
  private readonly requestTimeoutMs: number;

  constructor(opts: SessionOptions) {
    this.baseUrl = opts.baseUrl.replace(/\/+$/, "");
    this.sessionId = opts.sessionId;
    this.retry = { ...DEFAULT_RETRY, ...opts.retry };
    this.requestTimeoutMs = opts.requestTimeoutMs ?? 60_000;
  }

  async chat(tokens: TokenId[], params: GenParams): Promise<TokenId[]> {
    if (tokens.length === 0) {
      throw new ClientValidationError("input tokens must be non-empty");
    }
    if (!isIntegerArray(tokens)) {
      throw new ClientValidationError("input tokens must be integers");
    }
    if (!Number.isInteger(params.maxNewTokens) || params.maxNewTokens < 1) {
      throw new ClientValidationError("maxNewTokens must be a positive integer");
    }

    const body = JSON.stringify({
      session_id: this.sessionId,
      tokens,
      params: {
        max_new_tokens: params.maxNewTokens,
        seed: params.seed ?? 0,
        stop_condition: params.stopCondition ?? null,
      },
    });

    let lastError = "unknown";
    for (let attempt = 1; attempt <= this.retry.maxAttempts; attempt++) {
      let resp: Response;
      try {
        resp = await fetch(`${this.baseUrl}/v1/generate`, {
          method: "POST",
          headers: { "content-type": "application/json" },
          body,
          signal: AbortSignal.timeout(this.requestTimeoutMs),
        });
      } catch (err) {
        lastError = `network: ${String(err)}`;
        await sleep(this.backoff(attempt, undefined));
        continue;
      }

      if (resp.status === 503) {
        const hint = Number(resp.headers.get("retry-after") ?? "") * 1000;
        lastError = `retryable 503: ${await resp.text().catch(() => "")}`;
        await sleep(this.backoff(attempt, Number.isFinite(hint) ? hint : undefined));
        continue;
      }
      if (!resp.ok) {
        throw new ProtocolMismatchError(
          `unexpected status ${resp.status}: ${(await resp.text()).slice(0, 200)}`,
        );
      }

      let parsed: unknown;
      try {
        parsed = await resp.json();
      } catch {
        throw new ProtocolMismatchError("body is not JSON");
      }
      const record = parsed as { tokens?: unknown };
      if (!isIntegerArray(record.tokens)) {
        throw new ProtocolMismatchError("'tokens' must be an integer array");
      }
      return record.tokens;
    }
    throw new ExhaustedRetriesError(this.retry.maxAttempts, lastError);
  }

  private backoff(attempt: number, serverHintMs: number | undefined): number {
    const base = serverHintMs && serverHintMs > 0 ? serverHintMs : this.retry.baseBackoffMs;
    return Math.min(base * 2 ** (attempt - 1), this.retry.maxBackoffMs);
  }

  /** Trainer-side view of this session, used by conformance tests. */
  async trajectories(includePartials = false): Promise<
    { session_id: string; tokens: number[]; loss_mask: number[]; versions: number[] }[]
  > {
    const resp = await fetch(
      `${this.baseUrl}/traj/session/${encodeURIComponent(this.sessionId)}` +
        (includePartials ? "?include_partials=true" : ""),
    );
    if (!resp.ok) {
      throw new ProtocolMismatchError(`trajectory fetch failed: ${resp.status}`);
    }
    const body = (await resp.json()) as { trajectories?: unknown };
    if (!Array.isArray(body.trajectories)) {
      throw new ProtocolMismatchError("'trajectories' must be an array");
    }
    return body.trajectories as never;
  }

  async storageStats(): Promise<{ stored_tokens: number; naive_tokens: number; dedup_ratio: number }> {
    const resp = await fetch(`${this.baseUrl}/traj/stats/${encodeURIComponent(this.sessionId)}`);
    if (!resp.ok) {
      throw new ProtocolMismatchError(`stats fetch failed: ${resp.status}`);
    }
    return (await resp.json()) as never;
  }
}
