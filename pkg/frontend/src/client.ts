/**
 * Session logic for the forced-choice experiment client.
 *
 * Everything here is DOM-free so the protocol behavior can be tested
 * headlessly: trial payloads are scanned for ground-truth leaks, posts
 * are retried idempotently on transient failures, and the server's
 * progress endpoint is the single source of truth for where a session
 * stands (a reload resumes exactly at the first unanswered trial).
 */

export type Choice = "left" | "right" | "center";

export const CHOICES: readonly Choice[] = ["left", "right", "center"];

/**
 * Keys that must never appear in any payload an observer's browser
 * receives; seeing one means the service is leaking the answer key, so
 * the client refuses to continue rather than silently render it.
 */
export const FORBIDDEN_KEYS: readonly string[] = [
  "expected_side",
  "expectedSide",
  "method_tag",
  "methodTag",
  "mirrored",
  "lighter_side",
  "lighterSide",
];

export interface SessionInfo {
  sessionId: string;
  trialCount: number;
  nextIndex: number;
}

export interface TrialView {
  index: number;
  total: number;
  answered: boolean;
  imageUrl: string;
  prompt: string;
  choices: string[];
}

export interface Progress {
  total: number;
  answered: number;
  nextIndex: number | null;
  complete: boolean;
}

export interface PostResult {
  nextIndex: number | null;
  alreadyRecorded: boolean;
}

export class HttpError extends Error {
  constructor(readonly status: number, detail: string) {
    super(`HTTP ${status}: ${detail}`);
  }
}

export class GroundTruthLeakError extends Error {
  constructor(key: string) {
    super(
      `refusing to proceed: server payload contains ground-truth key "${key}"`,
    );
  }
}

/** Recursively scan a decoded JSON payload for answer-key fields. */
export function assertNoGroundTruth(payload: unknown): void {
  if (Array.isArray(payload)) {
    for (const item of payload) assertNoGroundTruth(item);
    return;
  }
  if (payload !== null && typeof payload === "object") {
    for (const [key, value] of Object.entries(payload)) {
      if (FORBIDDEN_KEYS.includes(key)) throw new GroundTruthLeakError(key);
      assertNoGroundTruth(value);
    }
  }
}

export interface ClientOptions {
  fetchImpl?: typeof fetch;
  /** attempts per request including the first (default 4) */
  attempts?: number;
  /** awaited between attempts; injectable so tests run instantly */
  sleep?: (ms: number) => Promise<void>;
}

const defaultSleep = (ms: number) =>
  new Promise<void>((resolve) => setTimeout(resolve, ms));

export class SessionClient {
  private readonly base: string;
  private readonly fetchImpl: typeof fetch;
  private readonly attempts: number;
  private readonly sleep: (ms: number) => Promise<void>;

  constructor(baseUrl: string, options: ClientOptions = {}) {
    this.base = baseUrl.replace(/\/+$/, "");
    const impl = options.fetchImpl ?? globalThis.fetch;
    if (!impl) throw new Error("no fetch implementation available");
    this.fetchImpl = impl;
    this.attempts = options.attempts ?? 4;
    this.sleep = options.sleep ?? defaultSleep;
  }

  /**
   * One JSON round trip with retries on network errors and 5xx.
   * 4xx responses are never retried: for responses the server treats a
   * replayed identical choice as already-recorded success, so a retried
   * POST that actually landed the first time cannot double-record.
   */
  private async request(
    method: string,
    path: string,
    body?: unknown,
  ): Promise<unknown> {
    let lastError: unknown = null;
    for (let attempt = 0; attempt < this.attempts; attempt++) {
      if (attempt > 0) await this.sleep(250 * attempt);
      let response: Response;
      try {
        response = await this.fetchImpl(this.base + path, {
          method,
          headers: body === undefined
            ? undefined
            : { "content-type": "application/json" },
          body: body === undefined ? undefined : JSON.stringify(body),
        });
      } catch (err) {
        lastError = err; // network failure: retry
        continue;
      }
      if (response.status >= 500) {
        lastError = new HttpError(response.status, await response.text());
        continue;
      }
      if (!response.ok) {
        let detail = await response.text();
        try {
          const decoded = JSON.parse(detail) as { detail?: string };
          if (decoded && typeof decoded.detail === "string") {
            detail = decoded.detail;
          }
        } catch {
          /* plain-text error body */
        }
        throw new HttpError(response.status, detail);
      }
      const payload: unknown = await response.json();
      assertNoGroundTruth(payload);
      return payload;
    }
    throw lastError instanceof Error
      ? lastError
      : new Error(`request failed after ${this.attempts} attempts`);
  }

  async createSession(observerId = "anonymous", seed?: number):
    Promise<SessionInfo> {
    const body: Record<string, unknown> = { observer_id: observerId };
    if (seed !== undefined) body.seed = seed;
    const raw = (await this.request("POST", "/api/v1/sessions", body)) as {
      session_id: string;
      trial_count: number;
      next_index: number;
    };
    return {
      sessionId: raw.session_id,
      trialCount: raw.trial_count,
      nextIndex: raw.next_index,
    };
  }

  async progress(sessionId: string): Promise<Progress> {
    const raw = (await this.request(
      "GET",
      `/api/v1/sessions/${encodeURIComponent(sessionId)}/progress`,
    )) as {
      total: number;
      answered: number;
      next_index: number | null;
      complete: boolean;
    };
    return {
      total: raw.total,
      answered: raw.answered,
      nextIndex: raw.next_index,
      complete: raw.complete,
    };
  }

  async getTrial(sessionId: string, index: number): Promise<TrialView> {
    const raw = (await this.request(
      "GET",
      `/api/v1/sessions/${encodeURIComponent(sessionId)}/trials/${index}`,
    )) as {
      index: number;
      total: number;
      answered: boolean;
      image_url: string;
      prompt: string;
      choices: string[];
    };
    return {
      index: raw.index,
      total: raw.total,
      answered: raw.answered,
      imageUrl: this.base + raw.image_url,
      prompt: raw.prompt,
      choices: raw.choices,
    };
  }

  async postResponse(
    sessionId: string,
    index: number,
    choice: Choice,
    responseMs?: number,
  ): Promise<PostResult> {
    const body: Record<string, unknown> = { choice };
    if (responseMs !== undefined) body.response_ms = responseMs;
    const raw = (await this.request(
      "POST",
      `/api/v1/sessions/${encodeURIComponent(sessionId)}/trials/${index}` +
        "/response",
      body,
    )) as { next_index: number | null; already_recorded: boolean };
    return {
      nextIndex: raw.next_index,
      alreadyRecorded: raw.already_recorded,
    };
  }
}

export interface RunHooks {
  /** Called once per unanswered trial; resolves with the observer's pick. */
  choose(trial: TrialView): Promise<{ choice: Choice; responseMs?: number }>;
  /** Optional: called before the choice is requested (render the trial). */
  onTrial?(trial: TrialView): void | Promise<void>;
  /** Optional: called after the final response is accepted. */
  onComplete?(): void | Promise<void>;
}

/**
 * Drive a session to completion from wherever it currently stands.
 * Returns the number of responses this run posted.  The next trial
 * index always comes from the server's reply, never from local
 * counting, so a resumed session continues exactly where it stopped.
 */
export async function runSession(
  client: SessionClient,
  sessionId: string,
  hooks: RunHooks,
): Promise<number> {
  let posted = 0;
  let next = (await client.progress(sessionId)).nextIndex;
  while (next !== null) {
    const trial = await client.getTrial(sessionId, next);
    if (hooks.onTrial) await hooks.onTrial(trial);
    const { choice, responseMs } = await hooks.choose(trial);
    const result = await client.postResponse(
      sessionId,
      trial.index,
      choice,
      responseMs,
    );
    posted += 1;
    next = result.nextIndex;
  }
  if (hooks.onComplete) await hooks.onComplete();
  return posted;
}
