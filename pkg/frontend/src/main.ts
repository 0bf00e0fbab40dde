import { ApiError, StudyApi } from "./api.js";
import {
  Question,
  RATINGS,
  Rating,
  SessionController,
} from "./state.js";

/**
 * Single-page participant flow.
 *
 * The page is static; everything it knows arrives over the HTTP API. The
 * session id is kept in sessionStorage so a mid-session refresh resumes
 * at the server's pending question instead of starting over.
 */

const api = new StudyApi("");

type Child = Node | string;

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Record<string, string> = {},
  children: Child[] = [],
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [name, value] of Object.entries(attrs)) {
    node.setAttribute(name, value);
  }
  for (const child of children) {
    node.append(child);
  }
  return node;
}

function statusLine(root: HTMLElement): HTMLElement {
  let line = root.querySelector<HTMLElement>(".status");
  if (!line) {
    line = el("p", { class: "status", role: "status" });
    root.append(line);
  }
  return line;
}

function describeError(err: unknown): string {
  if (err instanceof ApiError) return `${err.code}: ${err.detail}`;
  if (err instanceof Error) return err.message;
  return String(err);
}

function renderProgress(question: Question): HTMLElement {
  if (question.kind === "done") {
    return el("p", { class: "progress" }, ["All question sets answered."]);
  }
  const phase =
    question.kind === "qs" ? "find the matching scene" : "rate the match";
  return el("p", { class: "progress" }, [
    `Question set ${question.index} of ${question.totalSets} — ${phase}`,
  ]);
}

function thumbnail(imageId: string, alt: string): HTMLImageElement {
  return el("img", {
    src: api.assetUrl(imageId),
    alt,
    class: "thumb",
    width: "160",
    height: "160",
  });
}

function renderSelection(
  root: HTMLElement,
  controller: SessionController,
  question: Extract<Question, { kind: "qs" }>,
): void {
  root.replaceChildren(
    renderProgress(question),
    el("h2", {}, ["Which image shows this scene?"]),
    el("figure", { class: "target" }, [
      thumbnail(question.realSceneId, "scene to find"),
      el("figcaption", {}, ["Target scene"]),
    ]),
  );
  const grid = el("div", { class: "candidates", role: "group" });
  grid.setAttribute("aria-label", "candidate images");
  const submit = el("button", { class: "submit", disabled: "" }, [
    "Submit choice",
  ]) as HTMLButtonElement;

  const buttons: HTMLButtonElement[] = [];
  question.candidates.forEach((candidateId, i) => {
    const button = el("button", {
      class: "candidate",
      type: "button",
      "aria-pressed": "false",
    }) as HTMLButtonElement;
    button.append(
      thumbnail(candidateId, `candidate ${i + 1}`),
      el("span", { class: "sr-only" }, [`candidate ${i + 1}`]),
    );
    button.addEventListener("click", () => {
      controller.selectCandidate(candidateId);
      for (const other of buttons) {
        other.setAttribute("aria-pressed", String(other === button));
        other.classList.toggle("selected", other === button);
      }
      submit.disabled = false;
    });
    buttons.push(button);
    grid.append(button);
  });
  root.append(grid, submit);

  submit.addEventListener("click", async () => {
    submit.disabled = true;
    try {
      const { next } = await controller.submitSelection();
      renderQuestion(root, controller, next);
    } catch (err) {
      if (err instanceof ApiError) {
        // The server resolved the attempt (out-of-order, duplicate, …);
        // the controller already resynced where needed.
        statusLine(root).textContent = describeError(err);
        const current = controller.question;
        if (current) renderQuestion(root, controller, current);
      } else {
        // Network trouble: the pick is still held locally, offer a retry.
        statusLine(root).textContent =
          `Could not reach the server (${describeError(err)}). ` +
          "Your choice is kept — press Submit to try again.";
        submit.disabled = false;
      }
    }
  });
}

function renderRating(
  root: HTMLElement,
  controller: SessionController,
  question: Extract<Question, { kind: "qq" }>,
): void {
  root.replaceChildren(
    renderProgress(question),
    el("h2", {}, ["How well does the generated scene match the painting?"]),
    el("div", { class: "pair" }, [
      el("figure", {}, [
        thumbnail(question.paintingId, "source painting"),
        el("figcaption", {}, ["Painting"]),
      ]),
      el("figure", {}, [
        thumbnail(question.realSceneId, "generated scene"),
        el("figcaption", {}, ["Generated scene"]),
      ]),
    ]),
  );
  const scale = el("div", { class: "ratings", role: "group" });
  scale.setAttribute("aria-label", "rating from 1 (poor) to 5 (excellent)");
  for (const rating of RATINGS) {
    const button = el("button", { type: "button", class: "rating" }, [
      String(rating),
    ]) as HTMLButtonElement;
    button.addEventListener("click", () => {
      void submitRating(root, controller, rating, scale);
    });
    scale.append(button);
  }
  root.append(
    scale,
    el("p", { class: "hint" }, ["1 = no resemblance, 5 = excellent match"]),
  );
}

async function submitRating(
  root: HTMLElement,
  controller: SessionController,
  rating: Rating,
  scale: HTMLElement,
): Promise<void> {
  for (const button of scale.querySelectorAll("button")) {
    button.disabled = true;
  }
  try {
    const { next } = await controller.submitRating(rating);
    renderQuestion(root, controller, next);
  } catch (err) {
    if (err instanceof ApiError) {
      statusLine(root).textContent = describeError(err);
      const current = controller.question;
      if (current) renderQuestion(root, controller, current);
    } else {
      statusLine(root).textContent =
        `Could not reach the server (${describeError(err)}). ` +
        "Pick the rating again to retry.";
      for (const button of scale.querySelectorAll("button")) {
        button.disabled = false;
      }
    }
  }
}

function renderDone(root: HTMLElement): void {
  root.replaceChildren(
    el("h2", {}, ["Thank you!"]),
    el("p", {}, ["All question sets are answered. You can close this tab."]),
  );
}

function renderQuestion(
  root: HTMLElement,
  controller: SessionController,
  question: Question,
): void {
  switch (question.kind) {
    case "qs":
      renderSelection(root, controller, question);
      break;
    case "qq":
      renderRating(root, controller, question);
      break;
    case "done":
      renderDone(root);
      break;
  }
}

function renderStudyPicker(root: HTMLElement): void {
  const input = el("input", {
    type: "text",
    id: "study-id",
    autocomplete: "off",
  }) as HTMLInputElement;
  const go = el("button", { type: "button" }, ["Start"]) as HTMLButtonElement;
  go.addEventListener("click", () => {
    const id = input.value.trim();
    if (id) {
      const url = new URL(window.location.href);
      url.searchParams.set("study", id);
      window.location.href = url.toString();
    }
  });
  root.replaceChildren(
    el("h2", {}, ["Join a study"]),
    el("label", { for: "study-id" }, ["Study id"]),
    input,
    go,
  );
}

async function start(root: HTMLElement): Promise<void> {
  const studyId = new URLSearchParams(window.location.search).get("study");
  if (!studyId) {
    renderStudyPicker(root);
    return;
  }
  const storageKey = `p2d-session:${studyId}`;
  let sessionId = window.sessionStorage.getItem(storageKey);
  if (!sessionId) {
    const opened = await api.openSession(studyId);
    sessionId = opened.session_id;
    window.sessionStorage.setItem(storageKey, sessionId);
  }
  const controller = new SessionController(api, sessionId);
  const question = await controller.refresh();
  renderQuestion(root, controller, question);
}

const root = document.getElementById("app");
if (root) {
  start(root).catch((err) => {
    root.replaceChildren(
      el("p", { class: "status" }, [
        `Could not load the study: ${describeError(err)}`,
      ]),
    );
  });
}
