import { describe, expect, it, vi } from "vitest";

import { ApiError, StudyApi, newRequestId } from "../src/api.js";

function jsonResponse(body: unknown, status = 200): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "content-type": "application/json" },
  });
}

const NEXT_QS = {
  schema_version: 1,
  phase: "qs",
  question_index: 1,
  total_sets: 5,
  real_scene_id: "rs01",
  candidates: ["a", "b", "c", "d", "e"],
};

describe("StudyApi request handling", () => {
  it("parses a next-question payload", async () => {
    const fetchImpl = vi.fn(async () => jsonResponse(NEXT_QS));
    const api = new StudyApi("http://svc", { fetchImpl });

    const next = await api.nextQuestion("s1");

    expect(next.phase).toBe("qs");
    expect(next.candidates).toEqual(["a", "b", "c", "d", "e"]);
    expect(fetchImpl).toHaveBeenCalledWith(
      "http://svc/session/s1/next",
      expect.objectContaining({ method: "GET" }),
    );
  });

  it("rejects a payload with an unknown schema version", async () => {
    const fetchImpl = vi.fn(async () =>
      jsonResponse({ ...NEXT_QS, schema_version: 99 }),
    );
    const api = new StudyApi("", { fetchImpl });

    await expect(api.nextQuestion("s1")).rejects.toThrow(/schema_version 99/);
  });

  it("retries network failures with backoff, then succeeds", async () => {
    const fetchImpl = vi
      .fn<(input: string, init?: RequestInit) => Promise<Response>>()
      .mockRejectedValueOnce(new TypeError("fetch failed"))
      .mockRejectedValueOnce(new TypeError("fetch failed"))
      .mockResolvedValueOnce(jsonResponse(NEXT_QS));
    const sleeps: number[] = [];
    const api = new StudyApi("", {
      fetchImpl,
      sleep: async (ms) => {
        sleeps.push(ms);
      },
    });

    const next = await api.nextQuestion("s1");

    expect(next.question_index).toBe(1);
    expect(fetchImpl).toHaveBeenCalledTimes(3);
    expect(sleeps).toEqual([400, 800]);
  });

  it("gives up after the configured attempts and rethrows", async () => {
    const fetchImpl = vi.fn(async () => {
      throw new TypeError("fetch failed");
    });
    const api = new StudyApi("", {
      fetchImpl,
      attempts: 2,
      sleep: async () => {},
    });

    await expect(api.nextQuestion("s1")).rejects.toThrow("fetch failed");
    expect(fetchImpl).toHaveBeenCalledTimes(2);
  });

  it("maps HTTP errors to ApiError without retrying", async () => {
    const fetchImpl = vi.fn(async () =>
      jsonResponse(
        {
          schema_version: 1,
          error: "OutOfOrder",
          detail: "expected qs for set 1",
        },
        409,
      ),
    );
    const api = new StudyApi("", { fetchImpl });

    const failure = await api
      .submitResponse("s1", { question_index: 1, phase: "qq", qq_rating: 3 }, "r1")
      .catch((err: unknown) => err);

    expect(failure).toBeInstanceOf(ApiError);
    const apiError = failure as ApiError;
    expect(apiError.status).toBe(409);
    expect(apiError.code).toBe("OutOfOrder");
    expect(apiError.detail).toBe("expected qs for set 1");
    expect(fetchImpl).toHaveBeenCalledTimes(1);
  });

  it("keeps the status text when the error body is not JSON", async () => {
    const fetchImpl = vi.fn(
      async () =>
        new Response("<html>boom</html>", {
          status: 502,
          statusText: "Bad Gateway",
        }),
    );
    const api = new StudyApi("", { fetchImpl });

    const failure = await api.getStudy("x").catch((err: unknown) => err);

    expect(failure).toBeInstanceOf(ApiError);
    expect((failure as ApiError).code).toBe("HTTP502");
    expect((failure as ApiError).detail).toBe("Bad Gateway");
  });

  it("sends the schema version and the caller's request id", async () => {
    const fetchImpl = vi.fn(async () =>
      jsonResponse({
        schema_version: 1,
        accepted: true,
        question_index: 2,
        phase: "qs",
        replayed: false,
      }),
    );
    const api = new StudyApi("", { fetchImpl });

    const ack = await api.submitResponse(
      "sess",
      { question_index: 2, phase: "qs", qs_choice: "img9" },
      "fixed-id",
    );

    expect(ack.accepted).toBe(true);
    const [url, init] = fetchImpl.mock.calls[0] as [string, RequestInit];
    expect(url).toBe("/session/sess/response");
    const sent = JSON.parse(String(init.body));
    expect(sent).toEqual({
      schema_version: 1,
      request_id: "fixed-id",
      question_index: 2,
      phase: "qs",
      qs_choice: "img9",
    });
  });

  it("builds asset URLs that are safe to embed", () => {
    const api = new StudyApi("http://svc:81");
    expect(api.assetUrl("rs 01")).toBe("http://svc:81/assets/rs%2001");
  });

  it("generates distinct request ids", () => {
    expect(newRequestId()).not.toBe(newRequestId());
  });
});
