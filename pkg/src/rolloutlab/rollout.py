"""Control loop for pausing, resuming, and re-versioning rollouts.

The manager turns trigger events (batch threshold, weight sync, tag
transitions, failures) into ordered command plans, executes them against the
engine, and tracks every in-flight task so that paused work is buffered and
resumed exactly once. Planning is a pure function of (event, snapshot) so an
event log can be replayed offline.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

from .clock import VirtualClock
from .core import ModelVersion, TokenId
from .engine import MockEngine, VersionRegressionError


class EventKind(Enum):
    THRESHOLD_REACHED = "threshold_reached"
    TIMEOUT = "timeout"
    WEIGHT_SYNC = "weight_sync"
    TAG_TRANSITION = "tag_transition"
    RESOURCE_RESTORED = "resource_restored"
    RESOURCE_FAILED = "resource_failed"


@dataclass
class ControlEvent:
    kind: EventKind
    payload: dict = field(default_factory=dict)

    @classmethod
    def threshold_reached(cls, count: int) -> ControlEvent:
        return cls(EventKind.THRESHOLD_REACHED, {"count": count})

    @classmethod
    def timeout(cls) -> ControlEvent:
        return cls(EventKind.TIMEOUT, {})

    @classmethod
    def weight_sync(cls, version: ModelVersion) -> ControlEvent:
        return cls(EventKind.WEIGHT_SYNC, {"version": version})

    @classmethod
    def tag_transition(cls, resource_ids: Sequence[str], to_tag: str) -> ControlEvent:
        return cls(EventKind.TAG_TRANSITION, {"resources": list(resource_ids), "to": to_tag})

    @classmethod
    def resource_restored(cls, resource_id: str) -> ControlEvent:
        return cls(EventKind.RESOURCE_RESTORED, {"resource": resource_id})

    @classmethod
    def resource_failed(cls, resource_id: str, task_ids: Sequence[str]) -> ControlEvent:
        return cls(EventKind.RESOURCE_FAILED, {"resource": resource_id, "tasks": list(task_ids)})

    def to_record(self) -> dict:
        return {"kind": self.kind.value, "payload": self.payload}

    @classmethod
    def from_record(cls, rec: dict) -> ControlEvent:
        return cls(EventKind(rec["kind"]), dict(rec.get("payload", {})))


class CommandKind(Enum):
    PAUSE_ROLLOUTS = "pause_rollouts"
    RESUME_ROLLOUTS = "resume_rollouts"
    BEGIN_ENGINE_SWITCH = "begin_engine_switch"
    COMPLETE_ENGINE_SWITCH = "complete_engine_switch"
    REQUEST_TRAIN_DISPATCH = "request_train_dispatch"
    REQUEUE_TASKS = "requeue_tasks"


@dataclass
class Command:
    kind: CommandKind
    targets: list[str] = field(default_factory=list)  # resource ids or task ids
    version: ModelVersion | None = None
    scope_all: bool = False

    def to_record(self) -> dict:
        rec: dict = {"kind": self.kind.value}
        if self.targets:
            rec["targets"] = self.targets
        if self.version is not None:
            rec["version"] = self.version
        if self.scope_all:
            rec["all"] = True
        return rec


@dataclass
class PartialBuffer:
    task_id: str
    input_tokens: list[TokenId]
    generated: list[TokenId]
    versions: list[ModelVersion]
    budget_remaining: int


@dataclass(frozen=True)
class SystemSnapshot:
    current_version: ModelVersion
    train_capable: tuple[str, ...] = ()


@dataclass
class UpdateReport:
    new_version: ModelVersion
    paused: int
    resumed: int
    switch_duration: float


class StaleVersionError(ValueError):
    pass


def plan(event: ControlEvent, snapshot: SystemSnapshot) -> list[Command]:
    """Map one trigger event to its ordered command plan. Pure."""
    kind = event.kind
    if kind in (EventKind.THRESHOLD_REACHED, EventKind.TIMEOUT):
        return [
            Command(CommandKind.PAUSE_ROLLOUTS, targets=list(snapshot.train_capable)),
            Command(CommandKind.REQUEST_TRAIN_DISPATCH),
        ]
    if kind is EventKind.WEIGHT_SYNC:
        version = event.payload["version"]
        if version <= snapshot.current_version:
            raise StaleVersionError(
                f"weight_sync version {version} <= current {snapshot.current_version}"
            )
        return [
            Command(CommandKind.PAUSE_ROLLOUTS, scope_all=True),
            Command(CommandKind.BEGIN_ENGINE_SWITCH),
            Command(CommandKind.COMPLETE_ENGINE_SWITCH, version=version),
            Command(CommandKind.RESUME_ROLLOUTS),
        ]
    if kind is EventKind.TAG_TRANSITION:
        if event.payload.get("to") == "train":
            return [Command(CommandKind.PAUSE_ROLLOUTS, targets=list(event.payload["resources"]))]
        return [Command(CommandKind.RESUME_ROLLOUTS)]
    if kind is EventKind.RESOURCE_RESTORED:
        return [Command(CommandKind.RESUME_ROLLOUTS)]
    if kind is EventKind.RESOURCE_FAILED:
        return [Command(CommandKind.REQUEUE_TASKS, targets=list(event.payload["tasks"]))]
    raise ValueError(f"unhandled event kind {kind}")


@dataclass
class _Task:
    task_id: str
    snapshot_fn: Callable[[], object] | None = None
    resource_id: str | None = None
    job_id: str | None = None
    paused: bool = False


class RolloutManager:
    """Single logical controller; events are handled strictly in order."""

    def __init__(
        self,
        engine: MockEngine,
        *,
        scheduler=None,
        clock: VirtualClock | None = None,
        switch_duration: float = 0.0,
        event_log_path: str | None = None,
    ):
        self.engine = engine
        self.scheduler = scheduler
        self.clock = clock or VirtualClock()
        self.switch_duration = switch_duration
        self._lock = threading.RLock()
        self._tasks: dict[str, _Task] = {}
        self._buffers: dict[str, PartialBuffer] = {}
        self._pause_order: list[str] = []
        self._event_seq = 0
        self._event_records: list[dict] = []
        self._event_log_path = event_log_path
        self._log_fh = open(event_log_path, "a", encoding="utf-8") if event_log_path else None
        self.counters = {"pauses": 0, "resumes": 0, "updates": 0, "dispatch_requests": 0, "requeues": 0}
        self.on_train_dispatch: Callable[[], None] | None = None
        self.on_requeue: Callable[[list[str]], None] | None = None

    # -- task registry (RolloutControl implementation) ----------------------

    def admit_task(self, task_id: str, snapshot: Callable[[], object] | None = None) -> None:
        with self._lock:
            self._tasks[task_id] = _Task(task_id=task_id, snapshot_fn=snapshot)

    def release_task(self, task_id: str) -> None:
        with self._lock:
            self._tasks.pop(task_id, None)
            self._buffers.pop(task_id, None)
            if task_id in self._pause_order:
                self._pause_order.remove(task_id)

    def note_job(self, task_id: str, job_id: str | None) -> None:
        with self._lock:
            task = self._tasks.get(task_id)
            if task is not None:
                task.job_id = job_id

    def bind_resource(self, task_id: str, resource_id: str | None) -> None:
        with self._lock:
            task = self._tasks.get(task_id)
            if task is not None:
                task.resource_id = resource_id

    def is_runnable(self, task_id: str) -> bool:
        with self._lock:
            task = self._tasks.get(task_id)
            return task is None or not task.paused

    def tasks_on(self, resource_ids: Sequence[str]) -> list[str]:
        wanted = set(resource_ids)
        with self._lock:
            return [t.task_id for t in self._tasks.values() if t.resource_id in wanted]

    def paused_task_ids(self) -> list[str]:
        with self._lock:
            return [t.task_id for t in self._tasks.values() if t.paused]

    # -- snapshot / planning -------------------------------------------------

    def snapshot(self) -> SystemSnapshot:
        train_capable: tuple[str, ...] = ()
        if self.scheduler is not None:
            train_capable = tuple(self.scheduler.query("train"))
        return SystemSnapshot(
            current_version=self.engine.current_version, train_capable=train_capable
        )

    def handle(self, event: ControlEvent) -> list[Command]:
        """Plan, log, and execute one event; the log line carries the snapshot."""
        with self._lock:
            snap = self.snapshot()
            commands = plan(event, snap)
            self._event_seq += 1
            record = {
                "seq": self._event_seq,
                "t": self.clock.now(),
                **event.to_record(),
                "snapshot": {
                    "version": snap.current_version,
                    "train_capable": list(snap.train_capable),
                },
                "commands": [c.to_record() for c in commands],
            }
            self._event_records.append(record)
            if self._log_fh is not None:
                self._log_fh.write(json.dumps(record, separators=(",", ":")) + "\n")
                self._log_fh.flush()
            self._execute(commands)
            return commands

    def _execute(self, commands: list[Command]) -> None:
        for cmd in commands:
            if cmd.kind is CommandKind.PAUSE_ROLLOUTS:
                self.pause_rollouts(None if cmd.scope_all else cmd.targets)
            elif cmd.kind is CommandKind.RESUME_ROLLOUTS:
                self.resume_rollouts()
            elif cmd.kind is CommandKind.BEGIN_ENGINE_SWITCH:
                self.engine.begin_switch()
                self.clock.advance(self.switch_duration)
            elif cmd.kind is CommandKind.COMPLETE_ENGINE_SWITCH:
                assert cmd.version is not None
                self.engine.complete_switch(cmd.version)
                self.counters["updates"] += 1
            elif cmd.kind is CommandKind.REQUEST_TRAIN_DISPATCH:
                self.counters["dispatch_requests"] += 1
                if self.on_train_dispatch is not None:
                    self.on_train_dispatch()
            elif cmd.kind is CommandKind.REQUEUE_TASKS:
                self.counters["requeues"] += len(cmd.targets)
                if self.on_requeue is not None:
                    self.on_requeue(list(cmd.targets))

    # -- operations -----------------------------------------------------------

    def pause_rollouts(self, targets: Sequence[str] | None = None) -> list[PartialBuffer]:
        """Interrupt in-flight tasks (on the targeted resources, or all).

        Partial output is captured into buffers; nothing is lost: buffered
        tokens plus remaining budget always equal the original budget.
        """
        with self._lock:
            if targets is None:
                chosen = [t for t in self._tasks.values() if not t.paused]
            else:
                wanted = set(targets)
                chosen = [
                    t
                    for t in self._tasks.values()
                    if not t.paused and t.resource_id in wanted
                ]
            buffers: list[PartialBuffer] = []
            for task in chosen:
                leg_tokens: list[TokenId] = []
                leg_versions: list[ModelVersion] = []
                if task.job_id is not None:
                    for partial in self.engine.interrupt([task.job_id]):
                        leg_tokens = partial.output_tokens
                        leg_versions = partial.version_per_token
                snap = task.snapshot_fn() if task.snapshot_fn is not None else None
                if snap is not None:
                    budget = snap.budget_remaining - len(leg_tokens)
                    if budget <= 0:
                        continue  # budget spent; the owner will finalize, not resume
                    buf = PartialBuffer(
                        task_id=task.task_id,
                        input_tokens=list(snap.input_tokens),
                        generated=list(snap.produced) + leg_tokens,
                        versions=list(snap.versions) + leg_versions,
                        budget_remaining=budget,
                    )
                    self._buffers[task.task_id] = buf
                    buffers.append(buf)
                task.paused = True
                self._pause_order.append(task.task_id)
            self.counters["pauses"] += len(buffers)
            return buffers

    def resume_rollouts(self, capacity: int | None = None) -> list[str]:
        """Mark paused tasks runnable again, oldest pause first.

        Each buffer is consumed exactly once; with a capacity bound the
        remainder stays paused until a later resume. The pending requests
        owning the tasks re-dispatch through the engine's resume path.
        """
        with self._lock:
            n = len(self._pause_order) if capacity is None else min(capacity, len(self._pause_order))
            resumed: list[str] = []
            for task_id in self._pause_order[:n]:
                task = self._tasks.get(task_id)
                self._buffers.pop(task_id, None)
                if task is not None:
                    task.paused = False
                resumed.append(task_id)
            del self._pause_order[:n]
            self.counters["resumes"] += len(resumed)
            return resumed

    def buffered(self) -> list[PartialBuffer]:
        with self._lock:
            return list(self._buffers.values())

    def coordinate_update(self, new_version: ModelVersion) -> UpdateReport:
        """Run the full weight-sync plan end to end."""
        with self._lock:
            if new_version <= self.engine.current_version:
                raise VersionRegressionError(
                    f"update to {new_version} but engine already at {self.engine.current_version}"
                )
            t0 = self.clock.now()
            paused = len(self.pause_rollouts(None))
            self.engine.begin_switch()
            self.clock.advance(self.switch_duration)
            self.engine.complete_switch(new_version)
            self.counters["updates"] += 1
            resumed = len(self.resume_rollouts())
            self._event_seq += 1
            record = {
                "seq": self._event_seq,
                "t": self.clock.now(),
                **ControlEvent.weight_sync(new_version).to_record(),
                "snapshot": {"version": new_version, "train_capable": []},
                "commands": [],
                "coordinate_update": {"paused": paused, "resumed": resumed},
            }
            self._event_records.append(record)
            if self._log_fh is not None:
                self._log_fh.write(json.dumps(record, separators=(",", ":")) + "\n")
                self._log_fh.flush()
            return UpdateReport(
                new_version=new_version,
                paused=paused,
                resumed=resumed,
                switch_duration=self.clock.now() - t0,
            )

    # -- reporting -------------------------------------------------------------

    def state_report(self) -> dict:
        with self._lock:
            return {
                "version": self.engine.current_version,
                "events": self._event_seq,
                "open_tasks": len(self._tasks),
                "paused_tasks": len(self._pause_order),
                **self.counters,
            }

    def event_records(self) -> list[dict]:
        with self._lock:
            return list(self._event_records)

    def close(self) -> None:
        if self._log_fh is not None:
            self._log_fh.close()
            self._log_fh = None


# -- offline replay -------------------------------------------------------------


class LogCorruptError(ValueError):
    def __init__(self, offset: int, detail: str):
        super().__init__(f"event log corrupt at byte offset {offset}: {detail}")
        self.offset = offset


@dataclass
class ReplayReport:
    events: int
    final_version: ModelVersion
    counters: dict
    divergences: list[str] = field(default_factory=list)

    def to_record(self) -> dict:
        return {
            "events": self.events,
            "final_version": self.final_version,
            "counters": self.counters,
            "divergences": self.divergences,
        }


def replay_event_log(text: bytes | str, recorded_final: dict | None = None) -> ReplayReport:
    """Re-drive planning over a persisted event log, offline.

    Feeds every logged event back through :func:`plan` against the logged
    snapshot, accumulating the same counters the live manager keeps. If a
    recorded final state is supplied, mismatches are flagged as divergences.
    """
    if isinstance(text, str):
        text = text.encode("utf-8")
    counters = {"pauses": 0, "resumes": 0, "updates": 0, "dispatch_requests": 0, "requeues": 0}
    version = 0
    events = 0
    offset = 0
    for raw in text.split(b"\n"):
        if raw.strip():
            try:
                rec = json.loads(raw.decode("utf-8"))
                event = ControlEvent.from_record(rec)
                snap = SystemSnapshot(
                    current_version=rec["snapshot"]["version"],
                    train_capable=tuple(rec["snapshot"].get("train_capable", [])),
                )
            except (ValueError, KeyError) as exc:
                raise LogCorruptError(offset, str(exc)) from exc
            events += 1
            if "coordinate_update" in rec:
                cu = rec["coordinate_update"]
                counters["pauses"] += cu.get("paused", 0)
                counters["resumes"] += cu.get("resumed", 0)
                counters["updates"] += 1
                version = max(version, event.payload["version"])
            else:
                commands = plan(event, snap)
                for cmd in commands:
                    if cmd.kind is CommandKind.COMPLETE_ENGINE_SWITCH:
                        counters["updates"] += 1
                        version = max(version, cmd.version or 0)
                    elif cmd.kind is CommandKind.REQUEST_TRAIN_DISPATCH:
                        counters["dispatch_requests"] += 1
                    elif cmd.kind is CommandKind.REQUEUE_TASKS:
                        counters["requeues"] += len(cmd.targets)
        offset += len(raw) + 1

    divergences = []
    if recorded_final is not None:
        if recorded_final.get("version") != version:
            divergences.append(
                f"version: replay {version} vs recorded {recorded_final.get('version')}"
            )
        for key in ("updates", "dispatch_requests", "requeues"):
            if key in recorded_final and recorded_final[key] != counters[key]:
                divergences.append(
                    f"{key}: replay {counters[key]} vs recorded {recorded_final[key]}"
                )
    return ReplayReport(
        events=events, final_version=version, counters=counters, divergences=divergences
    )
