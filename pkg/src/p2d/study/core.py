"""Study construction, response protocol, persistence, and aggregation.

Each question set shows one generated real-scene image with five candidate
paintings (identification), then asks for a 1..5 realism rating of the same
real-scene image. Sets are answered strictly in order, identification before
rating. Responses land in an append-only per-study log; aggregates are
derived, never stored as the source of truth.
"""

from __future__ import annotations

import hashlib
import json
import secrets
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..errors import (
    DuplicateResponse,
    InvalidChoice,
    InvalidRating,
    NoData,
    NotEnoughMaterial,
    NotFound,
    OutOfOrder,
)

STUDY_SCHEMA_VERSION = 1

MIN_CANDIDATES = 5  # one correct painting plus four distractors


@dataclass(frozen=True)
class QsQuestion:
    """Identification: which of five paintings matches the real-scene image."""

    real_scene_id: str
    candidates: tuple[str, ...]
    correct_id: str

    def __post_init__(self) -> None:
        if len(self.candidates) != MIN_CANDIDATES:
            raise ValueError(f"need exactly {MIN_CANDIDATES} candidates")
        if len(set(self.candidates)) != len(self.candidates):
            raise ValueError("candidate ids must be distinct")
        if self.correct_id not in self.candidates:
            raise ValueError("correct_id must be among the candidates")


@dataclass(frozen=True)
class QqQuestion:
    """Realism rating of the real-scene image translated from one painting."""

    painting_id: str
    real_scene_id: str


@dataclass(frozen=True)
class StudyQuestionSet:
    index: int  # 1-based
    qs: QsQuestion
    qq: QqQuestion


@dataclass
class StudyDefinition:
    study_id: str
    created_at: str
    seed: int
    source_run_id: str
    question_sets: list[StudyQuestionSet]
    assets: dict[str, str] = field(default_factory=dict)  # image_id -> path

    @property
    def n_question_sets(self) -> int:
        return len(self.question_sets)

    def set_by_index(self, index: int) -> StudyQuestionSet:
        for qset in self.question_sets:
            if qset.index == index:
                return qset
        raise NotFound(f"question set {index} not in study {self.study_id}")

    def to_dict(self) -> dict:
        return {
            "schema_version": STUDY_SCHEMA_VERSION,
            "study_id": self.study_id,
            "created_at": self.created_at,
            "seed": self.seed,
            "source_run_id": self.source_run_id,
            "question_sets": [
                {
                    "index": qset.index,
                    "qs": asdict(qset.qs) | {"candidates": list(qset.qs.candidates)},
                    "qq": asdict(qset.qq),
                }
                for qset in self.question_sets
            ],
            "assets": self.assets,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "StudyDefinition":
        if data.get("schema_version") != STUDY_SCHEMA_VERSION:
            raise ValueError("unsupported study schema_version")
        sets = [
            StudyQuestionSet(
                index=row["index"],
                qs=QsQuestion(
                    real_scene_id=row["qs"]["real_scene_id"],
                    candidates=tuple(row["qs"]["candidates"]),
                    correct_id=row["qs"]["correct_id"],
                ),
                qq=QqQuestion(**row["qq"]),
            )
            for row in data["question_sets"]
        ]
        return cls(
            study_id=data["study_id"],
            created_at=data["created_at"],
            seed=data["seed"],
            source_run_id=data["source_run_id"],
            question_sets=sets,
            assets=dict(data.get("assets", {})),
        )


def create_study(run_record, n_question_sets: int = 5, seed: int = 0
                 ) -> StudyDefinition:
    """Sample question sets from a finished run.

    Both the questioned paintings (without replacement) and each set's four
    distractors (uniform, without replacement from the remaining paintings)
    are drawn from a generator seeded by `seed`, so a fixed seed reproduces
    the study exactly.
    """
    if n_question_sets < 1:
        raise ValueError("n_question_sets must be >= 1")

    finished = []
    for painting_id, item in sorted(run_record.items.items()):
        if item.get("real_scene") and item.get("painting_path"):
            finished.append((painting_id, item))
    if len(finished) < MIN_CANDIDATES:
        raise NotEnoughMaterial(
            f"need at least {MIN_CANDIDATES} paintings with real_scene outputs, "
            f"run has {len(finished)}"
        )
    if n_question_sets > len(finished):
        raise NotEnoughMaterial(
            f"cannot sample {n_question_sets} sets without replacement "
            f"from {len(finished)} finished paintings"
        )

    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(finished), size=n_question_sets, replace=False)

    question_sets: list[StudyQuestionSet] = []
    assets: dict[str, str] = {}
    all_ids = [painting_id for painting_id, _ in finished]
    item_by_id = dict(finished)
    for set_index, pick in enumerate(chosen, start=1):
        painting_id, item = finished[int(pick)]
        others = [pid for pid in all_ids if pid != painting_id]
        distractors = [others[int(i)] for i in
                       rng.choice(len(others), size=MIN_CANDIDATES - 1,
                                  replace=False)]
        candidates = [painting_id] + distractors
        order = rng.permutation(MIN_CANDIDATES)
        candidates = tuple(candidates[int(i)] for i in order)
        real_scene = item["real_scene"]
        question_sets.append(StudyQuestionSet(
            index=set_index,
            qs=QsQuestion(real_scene_id=real_scene["id"],
                          candidates=candidates,
                          correct_id=painting_id),
            qq=QqQuestion(painting_id=painting_id,
                          real_scene_id=real_scene["id"]),
        ))
        assets[real_scene["id"]] = real_scene["path"]
        for pid in candidates:
            assets[pid] = item_by_id[pid]["painting_path"]

    study_id = hashlib.sha256(
        f"{run_record.run_id}:{seed}:{n_question_sets}".encode("utf-8")
    ).hexdigest()[:12]
    return StudyDefinition(
        study_id=study_id,
        created_at=time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        seed=seed,
        source_run_id=run_record.run_id,
        question_sets=question_sets,
        assets=assets,
    )


class StudyStore:
    """One directory per study: definition.json plus append-only NDJSON logs
    for sessions and responses. Appends are serialized by a process-wide lock
    and written as single lines, so concurrent sessions never interleave
    records; reads snapshot the whole file."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    # --- paths ---------------------------------------------------------------
    def study_dir(self, study_id: str) -> Path:
        return self.root / study_id

    def _definition_path(self, study_id: str) -> Path:
        return self.study_dir(study_id) / "definition.json"

    # --- studies ---------------------------------------------------------------
    def save_study(self, definition: StudyDefinition) -> None:
        path = self._definition_path(definition.study_id)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".json.tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(definition.to_dict(), fh, indent=2, sort_keys=True)
        tmp.replace(path)

    def load_study(self, study_id: str) -> StudyDefinition:
        path = self._definition_path(study_id)
        if not path.is_file():
            raise NotFound(f"study {study_id} not found under {self.root}")
        with open(path, "r", encoding="utf-8") as fh:
            return StudyDefinition.from_dict(json.load(fh))

    def list_studies(self) -> list[str]:
        return sorted(
            child.name for child in self.root.iterdir()
            if child.is_dir() and (child / "definition.json").is_file()
        )

    # --- sessions -----------------------------------------------------------
    def open_session(self, study_id: str) -> dict:
        self.load_study(study_id)  # existence check
        session = {
            "session_id": secrets.token_hex(8),
            "study_id": study_id,
            "created_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        }
        self._append(self.study_dir(study_id) / "sessions.ndjson", session)
        return session

    def sessions(self, study_id: str) -> list[dict]:
        return self._read_log(self.study_dir(study_id) / "sessions.ndjson")

    def find_session(self, study_id: str, session_id: str) -> dict:
        for session in self.sessions(study_id):
            if session["session_id"] == session_id:
                return session
        raise NotFound(f"session {session_id} not found in study {study_id}")

    # --- responses ----------------------------------------------------------
    def append_response(self, study_id: str, response: dict) -> None:
        self._append(self.study_dir(study_id) / "responses.ndjson", response)

    def responses(self, study_id: str) -> list[dict]:
        return self._read_log(self.study_dir(study_id) / "responses.ndjson")

    def write_aggregate_cache(self, study_id: str, aggregate: dict) -> None:
        path = self.study_dir(study_id) / "aggregate_cache.json"
        tmp = path.with_suffix(".json.tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(aggregate, fh, indent=2, sort_keys=True)
        tmp.replace(path)

    # --- log plumbing ---------------------------------------------------------
    def _append(self, path: Path, row: dict) -> None:
        line = json.dumps(row, sort_keys=True) + "\n"
        with self._lock:
            with open(path, "a", encoding="utf-8") as fh:
                fh.write(line)
                fh.flush()

    @staticmethod
    def _read_log(path: Path) -> list[dict]:
        if not path.is_file():
            return []
        with open(path, "r", encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]


def _session_answered(responses: list[dict], session_id: str) -> dict:
    """(question_index, phase) -> stored response for one session."""
    answered = {}
    for row in responses:
        if row["session_id"] == session_id:
            answered[(row["question_index"], row["phase"])] = row
    return answered


def expected_next(definition: StudyDefinition,
                  answered: dict) -> tuple[str, int | None]:
    """The only (phase, index) the protocol accepts next; ('done', None) when
    the session has answered everything."""
    for qset in definition.question_sets:
        if (qset.index, "qs") not in answered:
            return "qs", qset.index
        if (qset.index, "qq") not in answered:
            return "qq", qset.index
    return "done", None


def record_response(
    store: StudyStore,
    study_id: str,
    session_id: str,
    question_index: int,
    phase: str,
    qs_choice: str | None = None,
    qq_rating: int | None = None,
    request_id: str | None = None,
) -> dict:
    """Validate and persist one answer; returns the acknowledgment.

    Questions are accepted strictly in protocol order (set order, qs before
    qq). A second answer for the same question is rejected, except that a
    retry carrying the same request_id replays the stored acknowledgment, so
    clients can safely resubmit after network faults.
    """
    definition = store.load_study(study_id)
    store.find_session(study_id, session_id)
    if phase not in ("qs", "qq"):
        raise ValueError(f"phase must be 'qs' or 'qq', got {phase!r}")
    qset = definition.set_by_index(question_index)  # NotFound on bad index

    if phase == "qs":
        if qs_choice is None:
            raise InvalidChoice("identification answer requires qs_choice")
        if qs_choice not in qset.qs.candidates:
            raise InvalidChoice(
                f"choice {qs_choice!r} is not among the offered candidates"
            )
    else:
        if not isinstance(qq_rating, int) or isinstance(qq_rating, bool) \
                or not 1 <= qq_rating <= 5:
            raise InvalidRating(f"rating must be an integer in 1..5, got {qq_rating!r}")

    responses = store.responses(study_id)
    answered = _session_answered(responses, session_id)
    key = (question_index, phase)
    if key in answered:
        stored = answered[key]
        if request_id is not None and stored.get("request_id") == request_id:
            # Idempotent retry: replay the original acknowledgment.
            return {"accepted": True, "question_index": question_index,
                    "phase": phase, "replayed": True}
        raise DuplicateResponse(
            f"session {session_id} already answered set {question_index} {phase}"
        )
    expected = expected_next(definition, answered)
    if expected != (phase, question_index):
        raise OutOfOrder(
            f"expected {expected[0]} for set {expected[1]}, "
            f"got {phase} for set {question_index}"
        )

    row = {
        "session_id": session_id,
        "question_index": question_index,
        "phase": phase,
        "qs_choice": qs_choice,
        "qq_rating": qq_rating,
        "request_id": request_id,
        "submitted_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    store.append_response(study_id, row)
    return {"accepted": True, "question_index": question_index,
            "phase": phase, "replayed": False}


@dataclass
class StudyAggregate:
    """Per-question identification percentages and rating means, plus their
    across-question averages and the number of complete sessions."""

    per_question: list[dict]
    qs_avg: float
    qq_avg: float
    n_participants: int

    def to_dict(self) -> dict:
        return {
            "per_question": self.per_question,
            "qs_avg": self.qs_avg,
            "qq_avg": self.qq_avg,
            "n_participants": self.n_participants,
        }


def _mean(values: list[float]) -> float:
    # Plain left-to-right mean, as in a hand tally; do not substitute a
    # compensated summation here, aggregate equality tests pin this order.
    return sum(values) / len(values)


def aggregate_study(store: StudyStore, study_id: str) -> StudyAggregate:
    """Tally the response log into the study aggregate.

    Incomplete sessions still contribute the questions they answered, so each
    question reports its own n; n_participants counts complete sessions only.
    Requires at least one complete session.
    """
    definition = store.load_study(study_id)
    responses = store.responses(study_id)
    sessions = store.sessions(study_id)

    needed = {(qset.index, phase) for qset in definition.question_sets
              for phase in ("qs", "qq")}
    n_participants = 0
    for session in sessions:
        answered = _session_answered(responses, session["session_id"])
        if needed <= set(answered):
            n_participants += 1
    if n_participants == 0:
        raise NoData(f"study {study_id} has no complete session yet")

    per_question: list[dict] = []
    qs_percents: list[float] = []
    qq_means: list[float] = []
    for qset in definition.question_sets:
        qs_rows = [r for r in responses
                   if r["question_index"] == qset.index and r["phase"] == "qs"]
        qq_rows = [r for r in responses
                   if r["question_index"] == qset.index and r["phase"] == "qq"]
        correct = sum(1 for r in qs_rows if r["qs_choice"] == qset.qs.correct_id)
        qs_percent = 100.0 * correct / len(qs_rows)
        qq_mean = _mean([r["qq_rating"] for r in qq_rows])
        per_question.append({
            "index": qset.index,
            "qs_percent": qs_percent,
            "qs_n": len(qs_rows),
            "qq_mean": qq_mean,
            "qq_n": len(qq_rows),
        })
        qs_percents.append(qs_percent)
        qq_means.append(qq_mean)

    aggregate = StudyAggregate(
        per_question=per_question,
        qs_avg=_mean(qs_percents),
        qq_avg=_mean(qq_means),
        n_participants=n_participants,
    )
    store.write_aggregate_cache(study_id, aggregate.to_dict())
    return aggregate
