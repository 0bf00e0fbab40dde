import { ApiError, newRequestId } from "./api.js";
import { NextQuestion, ResponseAck } from "./types.js";

/** The only ratings the UI can produce; anything else is unrepresentable. */
export type Rating = 1 | 2 | 3 | 4 | 5;
export const RATINGS: readonly Rating[] = [1, 2, 3, 4, 5];

export interface SceneQuestion {
  kind: "qs";
  index: number;
  totalSets: number;
  realSceneId: string;
  candidates: string[];
}

export interface RatingQuestion {
  kind: "qq";
  index: number;
  totalSets: number;
  paintingId: string;
  realSceneId: string;
}

export interface Finished {
  kind: "done";
  totalSets: number;
}

export type Question = SceneQuestion | RatingQuestion | Finished;

/** A client-side ordering violation (e.g. rating while selection is due). */
export class ProtocolError extends Error {
  constructor(message: string) {
    super(message);
    this.name = "ProtocolError";
  }
}

export interface SubmitOutcome {
  ack: ResponseAck;
  next: Question;
}

/** Minimal slice of the API client the controller needs; stubbed in tests. */
export interface SessionApi {
  nextQuestion(sessionId: string): Promise<NextQuestion>;
  submitResponse(
    sessionId: string,
    body: {
      question_index: number;
      phase: "qs" | "qq";
      qs_choice?: string;
      qq_rating?: number;
    },
    requestId: string,
  ): Promise<ResponseAck>;
}

function parseNext(payload: NextQuestion): Question {
  if (payload.phase === "done") {
    return { kind: "done", totalSets: payload.total_sets };
  }
  if (payload.question_index === null) {
    throw new Error("server sent an active phase without a question index");
  }
  if (payload.phase === "qs") {
    if (!payload.real_scene_id || !payload.candidates?.length) {
      throw new Error("selection question arrived without candidates");
    }
    return {
      kind: "qs",
      index: payload.question_index,
      totalSets: payload.total_sets,
      realSceneId: payload.real_scene_id,
      candidates: [...payload.candidates],
    };
  }
  if (!payload.painting_id || !payload.real_scene_id) {
    throw new Error("rating question arrived without image ids");
  }
  return {
    kind: "qq",
    index: payload.question_index,
    totalSets: payload.total_sets,
    paintingId: payload.painting_id,
    realSceneId: payload.real_scene_id,
  };
}

function sameQuestion(a: Question | null, b: Question): boolean {
  if (a === null || a.kind === "done" || b.kind === "done") return false;
  return a.kind === b.kind && a.index === b.index;
}

/**
 * Drives one participant session, mirroring the server's ordering.
 *
 * The controller never decides which question comes next: after every
 * accepted answer (and after any ordering conflict) it re-reads the
 * pending question from the server, so a page refresh or a stale tab
 * always lands back on the authoritative state. Each logical answer gets
 * one request id that survives network retries, making resubmission safe.
 */
export class SessionController {
  private readonly api: SessionApi;
  readonly sessionId: string;
  private current: Question | null = null;
  private selection: string | null = null;
  private readonly requestIds = new Map<string, string>();

  constructor(api: SessionApi, sessionId: string) {
    this.api = api;
    this.sessionId = sessionId;
  }

  /** The question currently on screen; null before the first refresh. */
  get question(): Question | null {
    return this.current;
  }

  /** The candidate picked but not yet submitted, if any. */
  get selectedCandidate(): string | null {
    return this.selection;
  }

  /**
   * Re-read the pending question from the server. A pending selection is
   * kept when the server still shows the same question (so a failed
   * submit can be retried without re-picking) and dropped otherwise.
   */
  async refresh(): Promise<Question> {
    const next = parseNext(await this.api.nextQuestion(this.sessionId));
    if (!sameQuestion(this.current, next)) {
      this.selection = null;
    }
    this.current = next;
    return next;
  }

  /** Record the participant's pick for the current selection question. */
  selectCandidate(imageId: string): void {
    const question = this.requireCurrent();
    if (question.kind !== "qs") {
      throw new ProtocolError("no selection question is active");
    }
    if (!question.candidates.includes(imageId)) {
      throw new ProtocolError(`"${imageId}" is not among the candidates`);
    }
    this.selection = imageId;
  }

  /** Submit the picked candidate; requires a prior selectCandidate call. */
  async submitSelection(): Promise<SubmitOutcome> {
    const question = this.requireCurrent();
    if (question.kind !== "qs") {
      throw new ProtocolError("no selection question is active");
    }
    if (this.selection === null) {
      throw new ProtocolError("pick a candidate before submitting");
    }
    return this.submit(question, {
      question_index: question.index,
      phase: "qs",
      qs_choice: this.selection,
    });
  }

  /**
   * Submit a rating for the current rating question. The signature only
   * admits the five discrete values, and the phase guard keeps a rating
   * from ever being sent while a selection is still due.
   */
  async submitRating(rating: Rating): Promise<SubmitOutcome> {
    const question = this.requireCurrent();
    if (question.kind !== "qq") {
      throw new ProtocolError("no rating question is active");
    }
    return this.submit(question, {
      question_index: question.index,
      phase: "qq",
      qq_rating: rating,
    });
  }

  private async submit(
    question: SceneQuestion | RatingQuestion,
    body: {
      question_index: number;
      phase: "qs" | "qq";
      qs_choice?: string;
      qq_rating?: number;
    },
  ): Promise<SubmitOutcome> {
    const key = `${body.phase}:${body.question_index}`;
    // Reuse the id from a previous attempt at this same answer so the
    // server replays instead of double-counting.
    const requestId = this.requestIds.get(key) ?? newRequestId();
    this.requestIds.set(key, requestId);
    let ack: ResponseAck;
    try {
      ack = await this.api.submitResponse(this.sessionId, body, requestId);
    } catch (err) {
      if (err instanceof ApiError) {
        // The server ruled on this attempt; the id must not be reused
        // for a different answer later.
        this.requestIds.delete(key);
        if (err.code === "OutOfOrder") {
          // Our view was stale; adopt the server's ordering.
          await this.refresh();
        }
      }
      throw err;
    }
    this.requestIds.delete(key);
    this.selection = null;
    const next = await this.refresh();
    return { ack, next };
  }

  private requireCurrent(): Question {
    if (this.current === null) {
      throw new ProtocolError("session not loaded; call refresh() first");
    }
    return this.current;
  }
}
