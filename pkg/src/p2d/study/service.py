"""HTTP service for running studies: versioned JSON API plus read-only asset
serving and an optional static UI bundle mount."""

from __future__ import annotations

import logging
import mimetypes
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import FileResponse, JSONResponse, RedirectResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel, Field

from ..errors import (
    DuplicateResponse,
    InvalidChoice,
    InvalidRating,
    NoData,
    NotEnoughMaterial,
    NotFound,
    OutOfOrder,
    P2DError,
)
from ..pipeline import RunRecord
from .core import (
    StudyStore,
    aggregate_study,
    create_study,
    expected_next,
    record_response,
    _session_answered,
)

log = logging.getLogger(__name__)

API_SCHEMA_VERSION = 1

_STATUS_BY_ERROR = {
    NotFound: 404,
    OutOfOrder: 409,
    DuplicateResponse: 409,
    NoData: 409,
    InvalidRating: 422,
    InvalidChoice: 422,
    NotEnoughMaterial: 422,
}


class CreateStudyRequest(BaseModel):
    schema_version: int = API_SCHEMA_VERSION
    run_dir: str
    n_question_sets: int = Field(default=5, ge=1)
    seed: int = 0


class OpenSessionRequest(BaseModel):
    schema_version: int = API_SCHEMA_VERSION
    study_id: str


class SubmitResponseRequest(BaseModel):
    schema_version: int = API_SCHEMA_VERSION
    question_index: int
    phase: str
    qs_choice: str | None = None
    qq_rating: int | None = None
    request_id: str | None = None


def create_app(store_root: str | Path, ui_dir: str | Path | None = None) -> FastAPI:
    """App factory. store_root holds one subdirectory per study; ui_dir, when
    given, is a built static bundle mounted at /ui."""
    store = StudyStore(store_root)
    app = FastAPI(title="painting-to-depth study service", version="1")
    # session -> study routing table, rebuilt from the durable logs.
    session_index: dict[str, str] = {}
    for study_id in store.list_studies():
        for session in store.sessions(study_id):
            session_index[session["session_id"]] = study_id

    @app.exception_handler(P2DError)
    async def on_p2d_error(request: Request, exc: P2DError) -> JSONResponse:
        status = 422
        for kind, code in _STATUS_BY_ERROR.items():
            if isinstance(exc, kind):
                status = code
                break
        return JSONResponse(
            status_code=status,
            content={
                "schema_version": API_SCHEMA_VERSION,
                "error": type(exc).__name__,
                "detail": str(exc),
            },
        )

    def _find_study_for_session(session_id: str) -> str:
        study_id = session_index.get(session_id)
        if study_id is None:
            raise NotFound(f"session {session_id} is not known to this service")
        return study_id

    @app.post("/study")
    def post_study(body: CreateStudyRequest) -> dict:
        run_record = RunRecord.load(body.run_dir)
        definition = create_study(run_record,
                                  n_question_sets=body.n_question_sets,
                                  seed=body.seed)
        store.save_study(definition)
        return {
            "schema_version": API_SCHEMA_VERSION,
            "study_id": definition.study_id,
            "n_question_sets": definition.n_question_sets,
        }

    @app.get("/study/{study_id}")
    def get_study(study_id: str) -> dict:
        definition = store.load_study(study_id)
        # Correct answers stay server-side; only shape metadata leaves.
        return {
            "schema_version": API_SCHEMA_VERSION,
            "study_id": definition.study_id,
            "created_at": definition.created_at,
            "n_question_sets": definition.n_question_sets,
        }

    @app.post("/session")
    def post_session(body: OpenSessionRequest) -> dict:
        session = store.open_session(body.study_id)
        session_index[session["session_id"]] = body.study_id
        return {
            "schema_version": API_SCHEMA_VERSION,
            "session_id": session["session_id"],
            "study_id": body.study_id,
            "n_question_sets": store.load_study(body.study_id).n_question_sets,
        }

    @app.get("/session/{session_id}/next")
    def get_next(session_id: str) -> dict:
        study_id = _find_study_for_session(session_id)
        definition = store.load_study(study_id)
        store.find_session(study_id, session_id)
        answered = _session_answered(store.responses(study_id), session_id)
        phase, index = expected_next(definition, answered)
        payload: dict = {
            "schema_version": API_SCHEMA_VERSION,
            "phase": phase,
            "question_index": index,
            "total_sets": definition.n_question_sets,
        }
        if phase == "qs":
            qset = definition.set_by_index(index)
            payload["real_scene_id"] = qset.qs.real_scene_id
            payload["candidates"] = list(qset.qs.candidates)
        elif phase == "qq":
            qset = definition.set_by_index(index)
            payload["painting_id"] = qset.qq.painting_id
            payload["real_scene_id"] = qset.qq.real_scene_id
        return payload

    @app.post("/session/{session_id}/response")
    def post_response(session_id: str, body: SubmitResponseRequest) -> dict:
        study_id = _find_study_for_session(session_id)
        ack = record_response(
            store, study_id, session_id,
            question_index=body.question_index,
            phase=body.phase,
            qs_choice=body.qs_choice,
            qq_rating=body.qq_rating,
            request_id=body.request_id,
        )
        return {"schema_version": API_SCHEMA_VERSION, **ack}

    @app.get("/study/{study_id}/aggregate")
    def get_aggregate(study_id: str) -> dict:
        aggregate = aggregate_study(store, study_id)
        return {"schema_version": API_SCHEMA_VERSION,
                "study_id": study_id, **aggregate.to_dict()}

    @app.get("/assets/{image_id}")
    def get_asset(image_id: str) -> FileResponse:
        for study_id in store.list_studies():
            definition = store.load_study(study_id)
            path = definition.assets.get(image_id)
            if path and Path(path).is_file():
                media_type = mimetypes.guess_type(path)[0] or "application/octet-stream"
                return FileResponse(path, media_type=media_type)
        raise NotFound(f"no asset with id {image_id}")

    if ui_dir is not None and Path(ui_dir).is_dir():
        app.mount("/ui", StaticFiles(directory=str(ui_dir), html=True), name="ui")

        @app.get("/")
        def root_redirect() -> RedirectResponse:
            return RedirectResponse(url="/ui/")

    return app


def serve(store_root: str | Path, host: str = "127.0.0.1", port: int = 8000,
          ui_dir: str | Path | None = None) -> None:
    import uvicorn

    app = create_app(store_root, ui_dir=ui_dir)
    uvicorn.run(app, host=host, port=port, log_level="info")
