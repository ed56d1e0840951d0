"""Flow-based task dispatch: feed agents as capacity frees, never in fixed batches."""

from __future__ import annotations

import json
import threading
from collections import deque
from dataclasses import dataclass, field
from enum import Enum

from .core import TokenId


class TaskState(Enum):
    PENDING = "pending"
    DISPATCHED = "dispatched"
    COMPLETE = "complete"
    REQUEUED = "requeued"


@dataclass
class TaskRecord:
    task_id: str
    prompt_tokens: list[TokenId]
    meta: dict = field(default_factory=dict)
    state: TaskState = TaskState.PENDING

    def to_record(self) -> dict:
        return {"task_id": self.task_id, "prompt_tokens": self.prompt_tokens, "meta": self.meta}


class TaskParseError(ValueError):
    def __init__(self, line_number: int, detail: str):
        super().__init__(f"task file line {line_number}: {detail}")
        self.line_number = line_number


class IllegalTaskStateError(RuntimeError):
    pass


class UnknownTaskError(KeyError):
    pass


class StreamingDataloader:
    """FIFO dispatcher with requeued work prioritized ahead of fresh tasks."""

    def __init__(self):
        self._lock = threading.Lock()
        self._tasks: dict[str, TaskRecord] = {}
        self._fresh: deque[str] = deque()
        self._requeued: deque[str] = deque()

    def load(self, source: str) -> int:
        """Ingest a line-delimited task file. Atomic: a bad line enqueues nothing."""
        records: list[TaskRecord] = []
        with open(source, encoding="utf-8") as fh:
            for line_number, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    raw = json.loads(line)
                    record = TaskRecord(
                        task_id=str(raw["task_id"]),
                        prompt_tokens=[int(t) for t in raw["prompt_tokens"]],
                        meta=dict(raw.get("meta", {})),
                    )
                except (ValueError, KeyError, TypeError) as exc:
                    raise TaskParseError(line_number, str(exc)) from exc
                records.append(record)
        with self._lock:
            for record in records:
                self._admit(record)
        return len(records)

    def add_task(self, record: TaskRecord) -> None:
        with self._lock:
            self._admit(record)

    def _admit(self, record: TaskRecord) -> None:
        if record.task_id in self._tasks:
            raise IllegalTaskStateError(f"duplicate task id {record.task_id}")
        record.state = TaskState.PENDING
        self._tasks[record.task_id] = record
        self._fresh.append(record.task_id)

    def next(self, capacity_now: int) -> list[TaskRecord]:
        """Dispatch up to ``capacity_now`` tasks, requeued work first, FIFO within."""
        if capacity_now < 0:
            raise ValueError("capacity must be >= 0")
        out: list[TaskRecord] = []
        with self._lock:
            while len(out) < capacity_now and (self._requeued or self._fresh):
                queue = self._requeued if self._requeued else self._fresh
                task = self._tasks[queue.popleft()]
                task.state = TaskState.DISPATCHED
                out.append(task)
        return out

    def complete(self, task_id: str) -> None:
        self._transition(task_id, TaskState.COMPLETE)

    def requeue(self, task_id: str) -> None:
        with self._lock:
            task = self._get_dispatched(task_id)
            task.state = TaskState.PENDING
            self._requeued.append(task_id)

    def _transition(self, task_id: str, to: TaskState) -> None:
        with self._lock:
            task = self._get_dispatched(task_id)
            task.state = to

    def _get_dispatched(self, task_id: str) -> TaskRecord:
        task = self._tasks.get(task_id)
        if task is None:
            raise UnknownTaskError(task_id)
        if task.state is not TaskState.DISPATCHED:
            raise IllegalTaskStateError(
                f"task {task_id} is {task.state.value}, expected dispatched"
            )
        return task

    # -- accounting -----------------------------------------------------------

    def pending_count(self) -> int:
        with self._lock:
            return len(self._fresh) + len(self._requeued)

    def in_flight_count(self) -> int:
        with self._lock:
            return sum(1 for t in self._tasks.values() if t.state is TaskState.DISPATCHED)

    def complete_count(self) -> int:
        with self._lock:
            return sum(1 for t in self._tasks.values() if t.state is TaskState.COMPLETE)

    def all_task_ids(self) -> set[str]:
        with self._lock:
            return set(self._tasks)

    def is_exhausted(self) -> bool:
        with self._lock:
            return all(t.state is TaskState.COMPLETE for t in self._tasks.values())
