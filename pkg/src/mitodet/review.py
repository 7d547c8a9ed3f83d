"""Pathologist-in-the-loop review service.

AI-detected candidates are queued to annotators, verdicts are appended to an
event log, equivocal cases escalate to senior reviewers, and resolved labels
export back to the manifest for retraining.

The store is event-sourced: the append-only log is the source of truth and
the in-memory state is a pure fold over it, so rebuilding from the log is
byte-identical to the live state. Every event is flushed to disk before the
caller gets an acknowledgment. A single lock serializes writers; reads see
consistent in-memory snapshots.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import (
    BinaryMask,
    Label,
    ObjectRecord,
    PixelGrid,
    Provenance,
    Species,
    decode_mask,
    encode_mask,
    record_from_raster,
)
from .errors import (
    ConfigurationError,
    DuplicateVerdictError,
    InvalidTransitionError,
    RejectedInputError,
    TaskNotFoundError,
    UnauthorizedAnnotatorError,
)

EVENT_SCHEMA = "omg-review/1"
SNAPSHOT_SCHEMA = "omg-review-snapshot/1"

# Two concurring senior verdicts resolve an escalated task.
SENIOR_QUORUM = 2


class Role(str, Enum):
    JUNIOR = "junior"
    SENIOR = "senior"


class Verdict(str, Enum):
    MF = "mf"
    NOT_MF = "not_mf"
    UNCERTAIN = "uncertain"


class TaskStatus(str, Enum):
    PENDING = "pending"
    LABELED = "labeled"
    ESCALATED = "escalated"
    RESOLVED = "resolved"
    DISPUTED = "disputed"


@dataclass(frozen=True)
class LabelEvent:
    task_id: str
    annotator: str
    role: Role
    verdict: Verdict
    timestamp: float
    note: str | None = None

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "annotator": self.annotator,
            "role": self.role.value,
            "verdict": self.verdict.value,
            "timestamp": self.timestamp,
            "note": self.note,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "LabelEvent":
        return cls(
            task_id=obj["task_id"],
            annotator=obj["annotator"],
            role=Role(obj["role"]),
            verdict=Verdict(obj["verdict"]),
            timestamp=float(obj["timestamp"]),
            note=obj.get("note"),
        )


@dataclass(frozen=True)
class ReviewCandidate:
    """One AI-detected object: a crop image reference plus its mask and score."""

    image_path: str
    grid: PixelGrid
    mask: BinaryMask
    score: float
    species: Species = Species.HUMAN
    tumour_type: str = ""
    dataset: str = "review"

    def __post_init__(self):
        if self.mask.foreground_pixels == 0:
            raise RejectedInputError("candidate mask is empty")
        if not (0.0 <= self.score <= 1.0):
            raise RejectedInputError(f"score {self.score} outside [0, 1]")

    def to_json(self) -> dict:
        return {
            "image_path": self.image_path,
            "grid": {
                "width": self.grid.width,
                "height": self.grid.height,
                "mpp": self.grid.mpp,
            },
            "mask": {
                "width": self.mask.grid.width,
                "height": self.mask.grid.height,
                "runs": list(self.mask.runs),
            },
            "score": self.score,
            "species": self.species.value,
            "tumour_type": self.tumour_type,
            "dataset": self.dataset,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ReviewCandidate":
        grid = PixelGrid(
            int(obj["grid"]["width"]), int(obj["grid"]["height"]), float(obj["grid"]["mpp"])
        )
        mask = BinaryMask(
            PixelGrid(int(obj["mask"]["width"]), int(obj["mask"]["height"]), grid.mpp),
            tuple(obj["mask"]["runs"]),
        )
        return cls(
            image_path=obj["image_path"],
            grid=grid,
            mask=mask,
            score=float(obj["score"]),
            species=Species(obj.get("species", "human")),
            tumour_type=obj.get("tumour_type", ""),
            dataset=obj.get("dataset", "review"),
        )


@dataclass
class ReviewTask:
    task_id: str
    candidate: ReviewCandidate
    status: TaskStatus = TaskStatus.PENDING
    assigned_to: str | None = None
    labels: list[LabelEvent] = field(default_factory=list)
    resolved_verdict: Verdict | None = None
    was_escalated: bool = False

    def senior_verdicts(self) -> list[Verdict]:
        return [e.verdict for e in self.labels if e.role == Role.SENIOR]


@dataclass
class ReviewStats:
    n_tasks: int
    by_status: dict[str, int]
    per_annotator: dict[str, int]
    escalation_rate: float | None
    dispute_rate: float | None

    def to_json(self) -> dict:
        return {
            "n_tasks": self.n_tasks,
            "by_status": self.by_status,
            "per_annotator": self.per_annotator,
            "escalation_rate": self.escalation_rate,
            "dispute_rate": self.dispute_rate,
        }


def candidates_from_records(records) -> list[ReviewCandidate]:
    """Wrap manifest records (e.g. curation's refined masks) as review
    candidates, so mask quality assurance runs through the same queue as
    detector output. The record's image is used as the crop reference and
    its mask is expanded to the full crop frame."""
    candidates = []
    for record in records:
        frame = np.zeros((record.grid.height, record.grid.width), dtype=bool)
        x0, y0, x1, y1 = record.bbox_px
        frame[y0:y1, x0:x1] = decode_mask(record.mask)
        candidates.append(
            ReviewCandidate(
                image_path=record.image_path,
                grid=record.grid,
                mask=encode_mask(frame, record.grid),
                score=float(record.extras.get("score", 1.0)),
                species=record.species,
                tumour_type=record.tumour_type,
                dataset=record.dataset,
            )
        )
    return candidates


class ReviewStore:
    """Event-sourced task store. Pass a directory to persist; None keeps the
    log in memory only (tests)."""

    def __init__(self, store_dir: str | Path | None = None):
        self._lock = threading.Lock()
        self.tasks: dict[str, ReviewTask] = {}
        self.annotators: dict[str, Role] = {}
        self._seq = 0
        self._next_task_number = 0
        self.store_dir = Path(store_dir) if store_dir is not None else None
        self._log_handle = None
        if self.store_dir is not None:
            self.store_dir.mkdir(parents=True, exist_ok=True)
            self._load()
            self._log_handle = open(self.events_path, "a", encoding="utf-8")

    @property
    def events_path(self) -> Path:
        return self.store_dir / "events.jsonl"

    @property
    def snapshot_path(self) -> Path:
        return self.store_dir / "snapshot.json"

    # -- persistence ---------------------------------------------------------

    def _load(self) -> None:
        start_seq = 0
        if self.snapshot_path.exists():
            start_seq = self._restore_snapshot(
                json.loads(self.snapshot_path.read_text())
            )
        if self.events_path.exists():
            with open(self.events_path, encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    event = json.loads(line)
                    if event["seq"] <= start_seq:
                        continue
                    self._apply(event)
                    self._seq = event["seq"]

    def _append(self, event: dict) -> dict:
        self._seq += 1
        event = {"schema": EVENT_SCHEMA, "seq": self._seq, **event}
        if self._log_handle is not None:
            self._log_handle.write(json.dumps(event) + "\n")
            self._log_handle.flush()
        self._apply(event)
        return event

    def _apply(self, event: dict) -> None:
        kind = event["type"]
        if kind == "annotator_registered":
            self.annotators[event["annotator"]] = Role(event["role"])
        elif kind == "task_created":
            task = ReviewTask(
                task_id=event["task_id"],
                candidate=ReviewCandidate.from_json(event["candidate"]),
                assigned_to=event["assigned_to"],
            )
            self.tasks[task.task_id] = task
            number = int(event["task_id"].rsplit("-", 1)[-1])
            self._next_task_number = max(self._next_task_number, number + 1)
        elif kind == "label":
            label = LabelEvent.from_json(event["event"])
            task = self.tasks[label.task_id]
            task.labels.append(label)
            self._step_status(task, label)
        else:
            raise ValueError(f"unknown event type {kind!r}")

    def _step_status(self, task: ReviewTask, label: LabelEvent) -> None:
        if task.status == TaskStatus.PENDING:
            if label.verdict == Verdict.UNCERTAIN:
                task.status = TaskStatus.ESCALATED
                task.was_escalated = True
            else:
                # pending -> labeled -> resolved happens in one step; a
                # mf/not_mf verdict is final for an unescalated task.
                task.status = TaskStatus.RESOLVED
                task.resolved_verdict = label.verdict
        elif task.status == TaskStatus.ESCALATED:
            verdicts = task.senior_verdicts()
            if len(verdicts) >= SENIOR_QUORUM:
                if all(v == verdicts[0] for v in verdicts):
                    task.status = TaskStatus.RESOLVED
                    task.resolved_verdict = verdicts[0]
                else:
                    task.status = TaskStatus.DISPUTED

    def write_snapshot(self) -> None:
        """Persist the current state; loads then only replay newer events."""
        if self.store_dir is None:
            raise ConfigurationError("in-memory store cannot snapshot")
        snapshot = {
            "schema": SNAPSHOT_SCHEMA,
            "seq": self._seq,
            "annotators": {a: r.value for a, r in self.annotators.items()},
            "tasks": [
                {
                    "task_id": t.task_id,
                    "candidate": t.candidate.to_json(),
                    "status": t.status.value,
                    "assigned_to": t.assigned_to,
                    "labels": [e.to_json() for e in t.labels],
                    "resolved_verdict": t.resolved_verdict.value
                    if t.resolved_verdict
                    else None,
                    "was_escalated": t.was_escalated,
                }
                for t in self.tasks.values()
            ],
        }
        self.snapshot_path.write_text(json.dumps(snapshot, indent=2))

    def _restore_snapshot(self, snapshot: dict) -> int:
        if snapshot.get("schema") != SNAPSHOT_SCHEMA:
            raise ConfigurationError(
                f"unsupported snapshot schema {snapshot.get('schema')!r}"
            )
        self.annotators = {a: Role(r) for a, r in snapshot["annotators"].items()}
        for obj in snapshot["tasks"]:
            task = ReviewTask(
                task_id=obj["task_id"],
                candidate=ReviewCandidate.from_json(obj["candidate"]),
                status=TaskStatus(obj["status"]),
                assigned_to=obj["assigned_to"],
                labels=[LabelEvent.from_json(e) for e in obj["labels"]],
                resolved_verdict=Verdict(obj["resolved_verdict"])
                if obj["resolved_verdict"]
                else None,
                was_escalated=obj["was_escalated"],
            )
            self.tasks[task.task_id] = task
            number = int(task.task_id.rsplit("-", 1)[-1])
            self._next_task_number = max(self._next_task_number, number + 1)
        return int(snapshot["seq"])

    def close(self) -> None:
        if self._log_handle is not None:
            self._log_handle.close()
            self._log_handle = None

    # -- operations ----------------------------------------------------------

    def register_annotator(self, annotator: str, role: Role | str) -> None:
        with self._lock:
            self._append(
                {
                    "type": "annotator_registered",
                    "annotator": annotator,
                    "role": Role(role).value,
                }
            )

    def enqueue(self, candidates: Sequence[ReviewCandidate], seed: int = 0) -> list[ReviewTask]:
        """Create one pending task per candidate, randomly and evenly assigned
        to the registered junior annotators (max count difference 1)."""
        juniors = sorted(a for a, r in self.annotators.items() if r == Role.JUNIOR)
        if not juniors:
            raise ConfigurationError("no junior annotators registered")
        rng = np.random.default_rng(seed)
        tasks = []
        with self._lock:
            assignment: list[str] = []
            while len(assignment) < len(candidates):
                assignment.extend(juniors[i] for i in rng.permutation(len(juniors)))
            for candidate, annotator in zip(candidates, assignment):
                task_id = f"task-{self._next_task_number:06d}"
                event = self._append(
                    {
                        "type": "task_created",
                        "task_id": task_id,
                        "candidate": candidate.to_json(),
                        "assigned_to": annotator,
                    }
                )
                tasks.append(self.tasks[event["task_id"]])
        return tasks

    def submit_label(
        self,
        task_id: str,
        annotator: str,
        verdict: Verdict | str,
        note: str | None = None,
    ) -> TaskStatus:
        """Record a verdict; returns the task's new status.

        Junior verdicts resolve (mf / not_mf) or escalate (uncertain) their
        assigned tasks; senior verdicts drive escalated tasks to resolution
        or dispute. The event is on disk before this returns.
        """
        verdict = Verdict(verdict)
        with self._lock:
            task = self.tasks.get(task_id)
            if task is None:
                raise TaskNotFoundError(f"unknown task {task_id!r}")
            role = self.annotators.get(annotator)
            if role is None:
                raise UnauthorizedAnnotatorError(f"unknown annotator {annotator!r}")
            if any(e.annotator == annotator for e in task.labels):
                raise DuplicateVerdictError(
                    f"annotator {annotator!r} already labelled {task_id}"
                )
            if task.status in (TaskStatus.RESOLVED, TaskStatus.DISPUTED):
                raise InvalidTransitionError(
                    f"task {task_id} is terminal ({task.status.value})"
                )
            if task.status == TaskStatus.PENDING:
                if role == Role.JUNIOR and annotator != task.assigned_to:
                    raise UnauthorizedAnnotatorError(
                        f"task {task_id} is assigned to {task.assigned_to!r}"
                    )
            elif task.status == TaskStatus.ESCALATED:
                if role != Role.SENIOR:
                    raise UnauthorizedAnnotatorError(
                        "escalated tasks accept senior verdicts only"
                    )
            timestamp = time.time()
            if task.labels and timestamp <= task.labels[-1].timestamp:
                timestamp = task.labels[-1].timestamp + 1e-6
            event = LabelEvent(
                task_id=task_id,
                annotator=annotator,
                role=role,
                verdict=verdict,
                timestamp=timestamp,
                note=note,
            )
            self._append({"type": "label", "event": event.to_json()})
            return self.tasks[task_id].status

    def resolve_escalated(self, task_id: str) -> TaskStatus:
        """Re-evaluate an escalated task against the senior quorum rule.

        State changes normally happen when verdicts arrive; this re-check is
        idempotent and mainly useful after replays or quorum config changes.
        """
        with self._lock:
            task = self.tasks.get(task_id)
            if task is None:
                raise TaskNotFoundError(f"unknown task {task_id!r}")
            if task.status == TaskStatus.ESCALATED:
                verdicts = task.senior_verdicts()
                if len(verdicts) >= SENIOR_QUORUM:
                    if all(v == verdicts[0] for v in verdicts):
                        task.status = TaskStatus.RESOLVED
                        task.resolved_verdict = verdicts[0]
                    else:
                        task.status = TaskStatus.DISPUTED
            return task.status

    def next_task(self, annotator: str) -> ReviewTask | None:
        """Oldest actionable task for this annotator: pending-and-assigned for
        juniors, escalated-and-not-yet-voted for seniors."""
        role = self.annotators.get(annotator)
        if role is None:
            raise UnauthorizedAnnotatorError(f"unknown annotator {annotator!r}")
        for task_id in sorted(self.tasks):
            task = self.tasks[task_id]
            if role == Role.JUNIOR:
                if task.status == TaskStatus.PENDING and task.assigned_to == annotator:
                    return task
            else:
                if task.status == TaskStatus.ESCALATED and not any(
                    e.annotator == annotator for e in task.labels
                ):
                    return task
        return None

    def export_training(self) -> list[ObjectRecord]:
        """Resolved tasks as manifest records: mf -> MF, not_mf -> MLF (they
        are mitotic-like by construction: the detector proposed them).
        Pending, escalated, disputed, and resolved-uncertain tasks are
        excluded. Provenance is active_learning."""
        records = []
        for task_id in sorted(self.tasks):
            task = self.tasks[task_id]
            if task.status != TaskStatus.RESOLVED:
                continue
            if task.resolved_verdict == Verdict.MF:
                label = Label.MF
            elif task.resolved_verdict == Verdict.NOT_MF:
                label = Label.MLF
            else:
                continue
            candidate = task.candidate
            raster = decode_mask(candidate.mask)
            records.append(
                record_from_raster(
                    raster,
                    candidate.grid,
                    id=task.task_id,
                    dataset=candidate.dataset,
                    image_path=candidate.image_path,
                    label=label,
                    species=candidate.species,
                    tumour_type=candidate.tumour_type,
                    provenance=Provenance.ACTIVE_LEARNING,
                    extras={"score": candidate.score},
                )
            )
        return records

    def stats(self) -> ReviewStats:
        by_status = {s.value: 0 for s in TaskStatus}
        per_annotator: dict[str, int] = {}
        n_escalated = 0
        n_disputed = 0
        for task in self.tasks.values():
            by_status[task.status.value] += 1
            if task.was_escalated:
                n_escalated += 1
            if task.status == TaskStatus.DISPUTED:
                n_disputed += 1
            for event in task.labels:
                per_annotator[event.annotator] = per_annotator.get(event.annotator, 0) + 1
        n = len(self.tasks)
        return ReviewStats(
            n_tasks=n,
            by_status=by_status,
            per_annotator=per_annotator,
            escalation_rate=(n_escalated / n) if n else None,
            dispute_rate=(n_disputed / n) if n else None,
        )
