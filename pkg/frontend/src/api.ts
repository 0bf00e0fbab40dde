import {
  Aggregate,
  ErrorBody,
  NextQuestion,
  ResponseAck,
  SCHEMA_VERSION,
  SessionOpened,
  StudyCreated,
  StudyInfo,
} from "./types.js";

/** Error raised when the server answers with a non-2xx status. */
export class ApiError extends Error {
  readonly status: number;
  /** Machine-readable error class from the response body, e.g. "OutOfOrder". */
  readonly code: string;
  readonly detail: string;

  constructor(status: number, code: string, detail: string) {
    super(`${code} (HTTP ${status}): ${detail}`);
    this.name = "ApiError";
    this.status = status;
    this.code = code;
    this.detail = detail;
  }
}

export type FetchLike = (
  input: string,
  init?: RequestInit,
) => Promise<Response>;

export interface StudyApiOptions {
  /** Injectable fetch for tests; defaults to the global fetch. */
  fetchImpl?: FetchLike;
  /** Attempts per request when the network itself fails (default 3). */
  attempts?: number;
  /** Injectable sleep for tests; defaults to a linear-backoff timeout. */
  sleep?: (ms: number) => Promise<void>;
}

/** Generate a request id used to make response submission idempotent. */
export function newRequestId(): string {
  if (typeof crypto !== "undefined" && crypto.randomUUID) {
    return crypto.randomUUID();
  }
  return `${Date.now().toString(36)}-${Math.random().toString(36).slice(2)}`;
}

function assertSchema(payload: { schema_version: number }): void {
  if (payload.schema_version !== SCHEMA_VERSION) {
    throw new Error(
      `unsupported schema_version ${payload.schema_version}; ` +
        `this client speaks version ${SCHEMA_VERSION}`,
    );
  }
}

/**
 * Typed client for the study service.
 *
 * All traffic goes through plain HTTP; nothing here reads server state by
 * any other route. Requests that lose the network are retried with linear
 * backoff. Retrying a response submission is safe because the caller
 * supplies a request id and the server replays rather than double-counts.
 */
export class StudyApi {
  private readonly baseUrl: string;
  private readonly fetchImpl: FetchLike;
  private readonly attempts: number;
  private readonly sleep: (ms: number) => Promise<void>;

  constructor(baseUrl = "", options: StudyApiOptions = {}) {
    this.baseUrl = baseUrl.replace(/\/$/, "");
    this.fetchImpl = options.fetchImpl ?? ((input, init) => fetch(input, init));
    this.attempts = options.attempts ?? 3;
    this.sleep =
      options.sleep ?? ((ms) => new Promise((resolve) => setTimeout(resolve, ms)));
  }

  /** URL of a study image; usable directly as an <img> src. */
  assetUrl(imageId: string): string {
    return `${this.baseUrl}/assets/${encodeURIComponent(imageId)}`;
  }

  async createStudy(body: {
    run_dir: string;
    n_question_sets?: number;
    seed?: number;
  }): Promise<StudyCreated> {
    return this.request<StudyCreated>("POST", "/study", {
      schema_version: SCHEMA_VERSION,
      ...body,
    });
  }

  async getStudy(studyId: string): Promise<StudyInfo> {
    return this.request<StudyInfo>(
      "GET",
      `/study/${encodeURIComponent(studyId)}`,
    );
  }

  async openSession(studyId: string): Promise<SessionOpened> {
    return this.request<SessionOpened>("POST", "/session", {
      schema_version: SCHEMA_VERSION,
      study_id: studyId,
    });
  }

  /** Fetch the next pending question; the server decides the ordering. */
  async nextQuestion(sessionId: string): Promise<NextQuestion> {
    return this.request<NextQuestion>(
      "GET",
      `/session/${encodeURIComponent(sessionId)}/next`,
    );
  }

  /**
   * Submit one answer. `requestId` must be stable across retries of the
   * same logical answer so the server can deduplicate.
   */
  async submitResponse(
    sessionId: string,
    body: {
      question_index: number;
      phase: "qs" | "qq";
      qs_choice?: string;
      qq_rating?: number;
    },
    requestId: string,
  ): Promise<ResponseAck> {
    return this.request<ResponseAck>(
      "POST",
      `/session/${encodeURIComponent(sessionId)}/response`,
      { schema_version: SCHEMA_VERSION, request_id: requestId, ...body },
    );
  }

  async aggregate(studyId: string): Promise<Aggregate> {
    return this.request<Aggregate>(
      "GET",
      `/study/${encodeURIComponent(studyId)}/aggregate`,
    );
  }

  private async request<T extends { schema_version: number }>(
    method: "GET" | "POST",
    path: string,
    body?: unknown,
  ): Promise<T> {
    const init: RequestInit = { method };
    if (body !== undefined) {
      init.headers = { "content-type": "application/json" };
      init.body = JSON.stringify(body);
    }
    let lastFailure: unknown;
    for (let attempt = 0; attempt < this.attempts; attempt += 1) {
      let response: Response;
      try {
        response = await this.fetchImpl(`${this.baseUrl}${path}`, init);
      } catch (err) {
        // Network-level failure: back off and retry the same payload.
        lastFailure = err;
        if (attempt + 1 < this.attempts) {
          await this.sleep(400 * (attempt + 1));
        }
        continue;
      }
      if (!response.ok) {
        throw await toApiError(response);
      }
      const payload = (await response.json()) as T;
      assertSchema(payload);
      return payload;
    }
    throw lastFailure instanceof Error
      ? lastFailure
      : new Error(String(lastFailure));
  }
}

async function toApiError(response: Response): Promise<ApiError> {
  let code = `HTTP${response.status}`;
  let detail = response.statusText;
  try {
    const body = (await response.json()) as Partial<ErrorBody>;
    if (typeof body.error === "string") code = body.error;
    if (typeof body.detail === "string") detail = body.detail;
  } catch {
    // Non-JSON error body; keep the status text.
  }
  return new ApiError(response.status, code, detail);
}
