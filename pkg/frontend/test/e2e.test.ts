/**
 * End-to-end: boots the real study service on a finished pipeline run and
 * drives it with the actual client code over HTTP. Requires python3 with
 * the backend package installed (as `npm test` from a checkout has).
 */
import { execFile, spawn, type ChildProcess } from "node:child_process";
import { promisify } from "node:util";
import { mkdtempSync, readFileSync, rmSync } from "node:fs";
import net from "node:net";
import os from "node:os";
import path from "node:path";
import { fileURLToPath } from "node:url";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { ApiError, StudyApi } from "../src/api.js";
import { Rating, SessionController } from "../src/state.js";

const execFileAsync = promisify(execFile);
const FRONTEND_ROOT = fileURLToPath(new URL("..", import.meta.url));

let workDir: string;
let runDir: string;
let storeDir: string;
let server: ChildProcess;
let baseUrl: string;
let api: StudyApi;

function freePort(): Promise<number> {
  return new Promise((resolve, reject) => {
    const probe = net.createServer();
    probe.once("error", reject);
    probe.listen(0, "127.0.0.1", () => {
      const { port } = probe.address() as net.AddressInfo;
      probe.close(() => resolve(port));
    });
  });
}

async function waitForServer(url: string, timeoutMs: number): Promise<void> {
  const deadline = Date.now() + timeoutMs;
  for (;;) {
    try {
      await fetch(url);
      return; // any HTTP answer (even 404) means the service is up
    } catch {
      if (Date.now() > deadline) {
        throw new Error(`service did not come up within ${timeoutMs}ms`);
      }
      await new Promise((resolve) => setTimeout(resolve, 250));
    }
  }
}

/** Drive one full session; picks and ratings are supplied by the caller. */
async function runSession(
  studyId: string,
  pick: (setIndex: number, candidates: string[]) => string,
  rate: (setIndex: number) => Rating,
): Promise<{ sessionId: string; accepted: number }> {
  const opened = await api.openSession(studyId);
  const controller = new SessionController(api, opened.session_id);
  let question = await controller.refresh();
  let accepted = 0;
  while (question.kind !== "done") {
    if (question.kind === "qs") {
      controller.selectCandidate(pick(question.index, question.candidates));
      const outcome = await controller.submitSelection();
      if (outcome.ack.accepted) accepted += 1;
      question = outcome.next;
    } else {
      const outcome = await controller.submitRating(rate(question.index));
      if (outcome.ack.accepted) accepted += 1;
      question = outcome.next;
    }
  }
  return { sessionId: opened.session_id, accepted };
}

beforeAll(async () => {
  workDir = mkdtempSync(path.join(os.tmpdir(), "p2d-ui-e2e-"));
  const fixture = path.join(FRONTEND_ROOT, "test", "fixtures", "make_store.py");
  const { stdout } = await execFileAsync("python3", [fixture, workDir], {
    timeout: 120_000,
  });
  const lines = stdout.trim().split("\n");
  runDir = lines[lines.length - 2]!;
  storeDir = lines[lines.length - 1]!;

  const port = await freePort();
  baseUrl = `http://127.0.0.1:${port}`;
  server = spawn(
    "python3",
    [
      "-m", "p2d.cli", "serve-study",
      "--study", storeDir,
      "--host", "127.0.0.1",
      "--port", String(port),
      "--ui", FRONTEND_ROOT,
    ],
    { stdio: ["ignore", "pipe", "pipe"] },
  );
  server.stderr?.setEncoding("utf8");
  let bootLog = "";
  server.stderr?.on("data", (chunk: string) => {
    bootLog = (bootLog + chunk).slice(-4000);
  });
  server.once("exit", (code) => {
    if (code !== null && code !== 0) {
      // Surface the reason in test output instead of a bare timeout.
      console.error(`study service exited with ${code}:\n${bootLog}`);
    }
  });
  await waitForServer(`${baseUrl}/study/warmup-probe`, 60_000);
  api = new StudyApi(baseUrl);
});

afterAll(() => {
  server?.kill("SIGTERM");
  if (workDir) rmSync(workDir, { recursive: true, force: true });
});

describe("study service driven by the browser client", () => {
  it("completes all five question sets in one scripted session", async () => {
    const study = await api.createStudy({
      run_dir: runDir,
      n_question_sets: 5,
      seed: 11,
    });
    expect(study.n_question_sets).toBe(5);

    const { sessionId, accepted } = await runSession(
      study.study_id,
      (_set, candidates) => candidates[0]!,
      (set) => ((set % 5) + 1) as Rating,
    );
    expect(accepted).toBe(10);

    // The server agrees the session is finished.
    const next = await api.nextQuestion(sessionId);
    expect(next.phase).toBe("done");
    expect(next.question_index).toBeNull();
  });

  it("never reveals the answer key before submission", async () => {
    const study = await api.createStudy({
      run_dir: runDir,
      n_question_sets: 5,
      seed: 11,
    });
    const info = await fetch(`${baseUrl}/study/${study.study_id}`);
    expect(info.status).toBe(200);
    expect(JSON.stringify(await info.json())).not.toContain("correct_id");

    const opened = await api.openSession(study.study_id);
    const next = await api.nextQuestion(opened.session_id);
    expect(next.phase).toBe("qs");
    const raw = JSON.stringify(next);
    expect(raw).not.toContain("correct_id");
    expect(raw).not.toContain("painting_id");
  });

  it("rejects a rating injected before its selection", async () => {
    const study = await api.createStudy({
      run_dir: runDir,
      n_question_sets: 5,
      seed: 11,
    });
    const opened = await api.openSession(study.study_id);
    const controller = new SessionController(api, opened.session_id);
    const first = await controller.refresh();
    expect(first.kind).toBe("qs");

    // Bypass the client-side guard and post the rating straight to the
    // wire, as a hostile or buggy client would.
    const failure = await api
      .submitResponse(
        opened.session_id,
        { question_index: 1, phase: "qq", qq_rating: 3 },
        "injected-out-of-order",
      )
      .catch((err: unknown) => err);

    expect(failure).toBeInstanceOf(ApiError);
    expect((failure as ApiError).status).toBe(409);
    expect((failure as ApiError).code).toBe("OutOfOrder");

    // The session is not poisoned: the proper order still works.
    const question = await controller.refresh();
    expect(question).toMatchObject({ kind: "qs", index: 1 });
    if (question.kind !== "qs") throw new Error("expected selection phase");
    controller.selectCandidate(question.candidates[0]!);
    const afterPick = await controller.submitSelection();
    expect(afterPick.ack.accepted).toBe(true);
    expect(afterPick.next).toMatchObject({ kind: "qq", index: 1 });
    const afterRating = await controller.submitRating(4);
    expect(afterRating.ack.accepted).toBe(true);
  });

  it("replays instead of double-counting a resubmitted answer", async () => {
    const study = await api.createStudy({
      run_dir: runDir,
      n_question_sets: 5,
      seed: 31,
    });
    const opened = await api.openSession(study.study_id);
    const next = await api.nextQuestion(opened.session_id);
    if (next.phase !== "qs" || !next.candidates) {
      throw new Error("expected a selection question");
    }
    const body = {
      question_index: 1,
      phase: "qs" as const,
      qs_choice: next.candidates[0]!,
    };

    const first = await api.submitResponse(opened.session_id, body, "retry-1");
    const second = await api.submitResponse(opened.session_id, body, "retry-1");

    expect(first.replayed).toBe(false);
    expect(second.replayed).toBe(true);
    expect(second.accepted).toBe(true);
  });

  it("aggregates three scripted sessions to match an independent tally", async () => {
    const study = await api.createStudy({
      run_dir: runDir,
      n_question_sets: 5,
      seed: 23,
    });
    const ratingTable: Record<number, Rating[]> = {
      1: [5, 4, 1], 2: [4, 4, 2], 3: [3, 4, 3], 4: [2, 4, 4], 5: [1, 4, 5],
    };
    const picks = new Map<string, string>(); // "participant:set" -> choice

    for (let participant = 0; participant < 3; participant += 1) {
      await runSession(
        study.study_id,
        (set, candidates) => {
          const choice = candidates[(set + participant) % 5]!;
          picks.set(`${participant}:${set}`, choice);
          return choice;
        },
        (set) => ratingTable[set]![participant]!,
      );
    }

    // Independent tally: correctness comes from the study definition the
    // operator holds on disk, never from the HTTP API.
    const definition = JSON.parse(
      readFileSync(
        path.join(storeDir, study.study_id, "definition.json"),
        "utf8",
      ),
    ) as {
      question_sets: Array<{
        index: number;
        qs: { correct_id: string };
      }>;
    };
    const expectedPerQuestion = definition.question_sets
      .slice()
      .sort((a, b) => a.index - b.index)
      .map((qset) => {
        let correct = 0;
        for (let participant = 0; participant < 3; participant += 1) {
          if (picks.get(`${participant}:${qset.index}`) === qset.qs.correct_id) {
            correct += 1;
          }
        }
        const ratings = ratingTable[qset.index]!;
        return {
          index: qset.index,
          qs_percent: (100.0 * correct) / 3,
          qs_n: 3,
          qq_mean: ratings.reduce((a, b) => a + b, 0) / 3,
          qq_n: 3,
        };
      });
    const mean = (values: number[]) =>
      values.reduce((a, b) => a + b, 0) / values.length;

    const aggregate = await api.aggregate(study.study_id);

    expect(aggregate.n_participants).toBe(3);
    expect(aggregate.per_question).toEqual(expectedPerQuestion);
    expect(aggregate.qs_avg).toBe(
      mean(expectedPerQuestion.map((q) => q.qs_percent)),
    );
    expect(aggregate.qq_avg).toBe(
      mean(expectedPerQuestion.map((q) => q.qq_mean)),
    );
  });

  it("serves the static bundle under /ui", async () => {
    const page = await fetch(`${baseUrl}/ui/`);
    expect(page.status).toBe(200);
    expect(await page.text()).toContain("Scene matching study");

    const bundle = await fetch(`${baseUrl}/ui/dist/main.js`);
    expect(bundle.status).toBe(200);

    const root = await fetch(`${baseUrl}/`);
    expect(root.url.endsWith("/ui/")).toBe(true);
    expect(root.status).toBe(200);
  });
});
