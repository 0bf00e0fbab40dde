/**
 * Wire types for the study service HTTP API.
 *
 * Every payload carries `schema_version`; the client refuses to interpret
 * a version it does not know so that a stale bundle fails loudly instead
 * of mis-rendering questions.
 */

export const SCHEMA_VERSION = 1;

/** Phase of a question set: scene selection, quality rating, or finished. */
export type Phase = "qs" | "qq" | "done";

export interface StudyCreated {
  schema_version: number;
  study_id: string;
  n_question_sets: number;
}

export interface StudyInfo {
  schema_version: number;
  study_id: string;
  created_at: string;
  n_question_sets: number;
}

export interface SessionOpened {
  schema_version: number;
  session_id: string;
  study_id: string;
  n_question_sets: number;
}

/**
 * The next pending question for a session, as the server orders it.
 *
 * For phase "qs" the payload names the real scene to find and five
 * candidate image ids; for phase "qq" it names the painting/scene pair
 * to rate; for phase "done" `question_index` is null and no ids are sent.
 */
export interface NextQuestion {
  schema_version: number;
  phase: Phase;
  question_index: number | null;
  total_sets: number;
  real_scene_id?: string;
  candidates?: string[];
  painting_id?: string;
}

export interface ResponseBody {
  schema_version: number;
  question_index: number;
  phase: "qs" | "qq";
  qs_choice?: string;
  qq_rating?: number;
  request_id?: string;
}

export interface ResponseAck {
  schema_version: number;
  accepted: boolean;
  question_index: number;
  phase: "qs" | "qq";
  replayed: boolean;
}

export interface PerQuestionAggregate {
  index: number;
  qs_percent: number;
  qs_n: number;
  qq_mean: number;
  qq_n: number;
}

export interface Aggregate {
  schema_version: number;
  study_id: string;
  per_question: PerQuestionAggregate[];
  qs_avg: number;
  qq_avg: number;
  n_participants: number;
}

/** Error body the service attaches to non-2xx responses. */
export interface ErrorBody {
  schema_version: number;
  error: string;
  detail: string;
}
