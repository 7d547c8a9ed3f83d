"""HTTP API over the review store; this is the surface the browser UI uses.

All writes funnel through the store's single append lock, so concurrent
clients are safe; a duplicate verdict (e.g. a client retrying after a
network drop) answers 409 without writing a second event.
"""

from __future__ import annotations

import json
from pathlib import Path

from fastapi import FastAPI, HTTPException, Header, Query
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import FileResponse, PlainTextResponse
from pydantic import BaseModel

from .core import record_to_json
from .errors import (
    DuplicateVerdictError,
    InvalidTransitionError,
    TaskNotFoundError,
    UnauthorizedAnnotatorError,
)
from .review import ReviewStore, ReviewTask, Verdict


class LabelBody(BaseModel):
    verdict: str
    note: str | None = None


def _task_view(store: ReviewStore, task: ReviewTask, annotator: str | None) -> dict:
    my_verdict = None
    if annotator:
        for event in task.labels:
            if event.annotator == annotator:
                my_verdict = event.verdict.value
    candidate = task.candidate
    return {
        "task_id": task.task_id,
        "status": task.status.value,
        "score": candidate.score,
        "image_url": f"/api/tasks/{task.task_id}/image",
        "grid": {
            "width": candidate.grid.width,
            "height": candidate.grid.height,
            "mpp": candidate.grid.mpp,
        },
        "mask": {
            "width": candidate.mask.grid.width,
            "height": candidate.mask.grid.height,
            "runs": list(candidate.mask.runs),
        },
        "my_verdict": my_verdict,
    }


def create_app(store: ReviewStore) -> FastAPI:
    app = FastAPI(title="mitodet review API")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )

    def get_task(task_id: str) -> ReviewTask:
        task = store.tasks.get(task_id)
        if task is None:
            raise HTTPException(status_code=404, detail=f"unknown task {task_id!r}")
        return task

    @app.get("/api/tasks/next")
    def next_task(annotator: str = Query(...)):
        try:
            task = store.next_task(annotator)
        except UnauthorizedAnnotatorError as exc:
            raise HTTPException(status_code=403, detail=str(exc))
        return {"task": _task_view(store, task, annotator) if task else None}

    @app.get("/api/tasks/{task_id}")
    def task_detail(task_id: str, annotator: str | None = Query(default=None)):
        return _task_view(store, get_task(task_id), annotator)

    @app.get("/api/tasks/{task_id}/image")
    def task_image(task_id: str):
        task = get_task(task_id)
        path = Path(task.candidate.image_path)
        if not path.is_absolute() and store.store_dir is not None:
            path = store.store_dir / path
        if not path.exists():
            raise HTTPException(status_code=404, detail=f"crop image {path} missing")
        return FileResponse(path)

    @app.post("/api/tasks/{task_id}/labels")
    def submit_label(
        task_id: str,
        body: LabelBody,
        x_annotator: str = Header(..., alias="X-Annotator"),
    ):
        try:
            verdict = Verdict(body.verdict)
        except ValueError:
            raise HTTPException(status_code=422, detail=f"unknown verdict {body.verdict!r}")
        try:
            status = store.submit_label(task_id, x_annotator, verdict, note=body.note)
        except TaskNotFoundError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        except DuplicateVerdictError as exc:
            raise HTTPException(status_code=409, detail=str(exc), headers={"X-Conflict": "duplicate"})
        except InvalidTransitionError as exc:
            raise HTTPException(status_code=409, detail=str(exc), headers={"X-Conflict": "transition"})
        except UnauthorizedAnnotatorError as exc:
            raise HTTPException(status_code=403, detail=str(exc))
        return {"task_id": task_id, "status": status.value}

    @app.get("/api/stats")
    def stats():
        return store.stats().to_json()

    @app.get("/api/export")
    def export():
        lines = [json.dumps(record_to_json(r)) for r in store.export_training()]
        return PlainTextResponse("\n".join(lines) + ("\n" if lines else ""))

    return app
