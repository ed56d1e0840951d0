"""Tag-driven resource pool with preemptive dispatch.

Resources carry capability tags (what they can run) and one active tag (what
they run now). Dispatch prefers idle resources and otherwise preempts
occupied ones; every preemption is announced to the rollout manager before
the assignment activates, so running work is paused — never killed — first.

Train placement on heterogeneous pools is ordered by a roofline-derived key:
peak compute first, ties broken by the ridge point (flops per byte), so
compute-rich bandwidth-lean devices are preferred for training.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable

from .clock import VirtualClock
from .rollout import ControlEvent, EventKind


class CapabilityTag(Enum):
    ROLLOUT = "rollout"
    TRAIN = "train"
    CRITIC = "critic"
    REFERENCE = "reference"
    REWARD = "reward"


class UnknownResourceError(KeyError):
    pass


class InsufficientCapabilityError(RuntimeError):
    pass


class CapabilityViolationError(RuntimeError):
    pass


def compute_train_priority(peak_flops: float, hbm_bandwidth: float) -> tuple[float, float]:
    """Lexicographic ordering key: (peak compute, ridge point), both descending."""
    if peak_flops <= 0 or hbm_bandwidth <= 0:
        raise ValueError("peak_flops and hbm_bandwidth must be positive")
    return (peak_flops, peak_flops / hbm_bandwidth)


@dataclass
class ResourceDescriptor:
    resource_id: str
    capability_tags: set[CapabilityTag]
    peak_flops: float = 1.0e12
    hbm_bandwidth: float = 1.0e12
    active_tag: CapabilityTag | None = None

    def __post_init__(self) -> None:
        if not self.capability_tags:
            raise ValueError("capability_tags must be non-empty")
        if self.active_tag is not None and self.active_tag not in self.capability_tags:
            raise CapabilityViolationError(
                f"{self.resource_id}: active {self.active_tag} outside capabilities"
            )

    @property
    def train_priority(self) -> tuple[float, float] | None:
        if CapabilityTag.TRAIN not in self.capability_tags:
            return None
        return compute_train_priority(self.peak_flops, self.hbm_bandwidth)

    def to_record(self) -> dict:
        return {
            "resource_id": self.resource_id,
            "tags": sorted(t.value for t in self.capability_tags),
            "active": self.active_tag.value if self.active_tag else None,
            "peak_flops": self.peak_flops,
            "hbm_bandwidth": self.hbm_bandwidth,
        }


@dataclass
class Assignment:
    task_kind: CapabilityTag
    resource_ids: list[str]
    preempted: list[str]


@dataclass
class RecoveryPlan:
    resource_id: str
    requeued_task_ids: list[str]


class TagScheduler:
    """One logical scheduler; pool mutations and dispatches are serialized."""

    def __init__(
        self,
        *,
        event_sink: Callable[[ControlEvent], None] | None = None,
        clock: VirtualClock | None = None,
    ):
        self.event_sink = event_sink
        self.clock = clock or VirtualClock()
        self._lock = threading.RLock()
        self._pool: dict[str, ResourceDescriptor] = {}
        self._tasks_on: dict[str, set[str]] = {}

    def _emit(self, event: ControlEvent) -> None:
        if self.event_sink is not None:
            self.event_sink(event)

    # -- pool management ---------------------------------------------------

    def register(self, descriptor: ResourceDescriptor) -> None:
        with self._lock:
            self._pool[descriptor.resource_id] = descriptor
            self._tasks_on.setdefault(descriptor.resource_id, set())

    def retag(self, resource_id: str, new_tags: Iterable[CapabilityTag]) -> None:
        """Reassign capabilities on the fly; invalidated active work is announced."""
        new_tags = set(new_tags)
        if not new_tags:
            raise ValueError("capability set must be non-empty")
        event: ControlEvent | None = None
        with self._lock:
            desc = self._pool.get(resource_id)
            if desc is None:
                raise UnknownResourceError(resource_id)
            if new_tags == desc.capability_tags:
                return
            if desc.active_tag is not None and desc.active_tag not in new_tags:
                to = (
                    CapabilityTag.ROLLOUT
                    if CapabilityTag.ROLLOUT in new_tags
                    else next(iter(sorted(new_tags, key=lambda t: t.value)))
                )
                event = ControlEvent.tag_transition([resource_id], to.value)
                desc.active_tag = None
            desc.capability_tags = new_tags
        if event is not None:
            self._emit(event)

    def descriptor(self, resource_id: str) -> ResourceDescriptor:
        with self._lock:
            desc = self._pool.get(resource_id)
            if desc is None:
                raise UnknownResourceError(resource_id)
            return desc

    def resources(self) -> list[ResourceDescriptor]:
        with self._lock:
            return [self._pool[k] for k in sorted(self._pool)]

    def query(self, tag: CapabilityTag | str) -> list[str]:
        """Resource ids holding a capability, active or not, stably ordered."""
        tag = CapabilityTag(tag) if isinstance(tag, str) else tag
        with self._lock:
            holders = [d for d in self._pool.values() if tag in d.capability_tags]
        if tag is CapabilityTag.TRAIN:
            holders.sort(key=lambda d: (tuple(-x for x in d.train_priority), d.resource_id))
        else:
            holders.sort(key=lambda d: d.resource_id)
        return [d.resource_id for d in holders]

    # -- dispatch ------------------------------------------------------------

    def dispatch(self, task_kind: CapabilityTag | str, count: int) -> Assignment:
        """Place a task on up to ``count`` capable resources, idle first.

        When idle capacity is short, occupied resources are preempted (in
        train-priority order for train tasks); each preemption is announced
        through the event sink before active tags flip, so the rollout
        manager pauses the displaced work first.
        """
        task_kind = CapabilityTag(task_kind) if isinstance(task_kind, str) else task_kind
        if count < 1:
            raise ValueError("count must be >= 1")
        with self._lock:
            ordered = self.query(task_kind)
            if not ordered:
                raise InsufficientCapabilityError(f"no resource holds tag {task_kind.value}")
            already = [r for r in ordered if self._pool[r].active_tag is task_kind]
            idle = [r for r in ordered if self._pool[r].active_tag is None]
            busy = [
                r
                for r in ordered
                if self._pool[r].active_tag is not None
                and self._pool[r].active_tag is not task_kind
            ]
            chosen: list[str] = []
            preempted: list[str] = []
            for rid in already + idle:
                if len(chosen) >= count:
                    break
                chosen.append(rid)
            for rid in busy:
                if len(chosen) >= count:
                    break
                chosen.append(rid)
                preempted.append(rid)
            # pause displaced work before the assignment becomes active
            for rid in preempted:
                self._emit(ControlEvent.tag_transition([rid], task_kind.value))
            for rid in chosen:
                self._pool[rid].active_tag = task_kind
            return Assignment(task_kind=task_kind, resource_ids=chosen, preempted=preempted)

    def set_active(self, resource_id: str, tag: CapabilityTag | None) -> None:
        with self._lock:
            desc = self._pool.get(resource_id)
            if desc is None:
                raise UnknownResourceError(resource_id)
            if tag is not None and tag not in desc.capability_tags:
                raise CapabilityViolationError(
                    f"{resource_id} cannot activate {tag}: capabilities {desc.capability_tags}"
                )
            desc.active_tag = tag

    def active(self, tag: CapabilityTag) -> list[str]:
        with self._lock:
            return sorted(r for r, d in self._pool.items() if d.active_tag is tag)

    # -- occupancy & failures ---------------------------------------------------

    def note_task(self, resource_id: str, task_id: str) -> None:
        with self._lock:
            if resource_id not in self._pool:
                raise UnknownResourceError(resource_id)
            self._tasks_on[resource_id].add(task_id)

    def clear_task(self, resource_id: str, task_id: str) -> None:
        with self._lock:
            if resource_id in self._tasks_on:
                self._tasks_on[resource_id].discard(task_id)

    def tasks_on(self, resource_id: str) -> set[str]:
        with self._lock:
            return set(self._tasks_on.get(resource_id, ()))

    def handle_failure(self, resource_id: str) -> RecoveryPlan:
        """Drop a resource; surviving work is requeued via the rollout manager."""
        with self._lock:
            if resource_id not in self._pool:
                raise UnknownResourceError(resource_id)
            del self._pool[resource_id]
            tasks = sorted(self._tasks_on.pop(resource_id, ()))
        self._emit(ControlEvent.resource_failed(resource_id, tasks))
        return RecoveryPlan(resource_id=resource_id, requeued_task_ids=tasks)

    # -- export -------------------------------------------------------------------

    def pool_snapshot_lines(self) -> str:
        return "\n".join(
            json.dumps(d.to_record(), separators=(",", ":")) for d in self.resources()
        )

    def check_capability_safety(self) -> list[str]:
        with self._lock:
            return [
                f"{d.resource_id}: active {d.active_tag} outside {d.capability_tags}"
                for d in self._pool.values()
                if d.active_tag is not None and d.active_tag not in d.capability_tags
            ]


# -- spatiotemporal multiplexing loop ---------------------------------------------


class PipelinePhase(Enum):
    ROLLOUT_ONLY = "R"
    MIXED = "R||T"
    TRAIN_ONLY = "T"
    IDLE = "idle"


@dataclass
class PhaseTransition:
    t: float
    phase: PipelinePhase
    rollout_active: int
    train_active: int


@dataclass
class MultiplexingController:
    """Drives the alternating rollout / rollout-parallel-train loop.

    All-dual-tag pools degenerate to colocated alternation (R, T, R, ...);
    all-single-tag pools degenerate to the disaggregated split. Data produced
    while an update is in flight is one step off-policy by construction.
    """

    scheduler: TagScheduler
    clock: VirtualClock = field(default_factory=VirtualClock)
    train_want: int | None = None
    transitions: list[PhaseTransition] = field(default_factory=list)
    training_active: bool = False

    def start(self) -> list[str]:
        """Initial step: every rollout-capable machine rolls out."""
        assigned = self._all_rollout_capable_to_rollout()
        self._record()
        return assigned

    def on_threshold_reached(self) -> Assignment:
        """Enough samples: claim train-tagged machines, preempting if needed."""
        want = self.train_want
        if want is None:
            want = len(self.scheduler.query(CapabilityTag.TRAIN))
        assignment = self.scheduler.dispatch(CapabilityTag.TRAIN, want)
        self.training_active = True
        self._record()
        return assignment

    def on_train_complete(self) -> list[str]:
        """Training finished: all rollout-capable machines back to rollout.

        Train-only machines have nothing to run until the next dispatch and
        go idle; on a disaggregated pool that idleness is the bubble.
        """
        self.training_active = False
        for rid in self.scheduler.active(CapabilityTag.TRAIN):
            desc = self.scheduler.descriptor(rid)
            if CapabilityTag.ROLLOUT not in desc.capability_tags:
                self.scheduler.set_active(rid, None)
        assigned = self._all_rollout_capable_to_rollout()
        self._record()
        return assigned

    def handle_event(self, event: ControlEvent):
        if event.kind is EventKind.THRESHOLD_REACHED:
            return self.on_threshold_reached()
        if event.kind is EventKind.TAG_TRANSITION and event.payload.get("to") == "rollout":
            return self.on_train_complete()
        if event.kind is EventKind.RESOURCE_RESTORED:
            return self._all_rollout_capable_to_rollout()
        return None

    @property
    def phase(self) -> PipelinePhase:
        rollout = len(self.scheduler.active(CapabilityTag.ROLLOUT))
        train = len(self.scheduler.active(CapabilityTag.TRAIN))
        if rollout and train:
            return PipelinePhase.MIXED
        if train:
            return PipelinePhase.TRAIN_ONLY
        if rollout:
            return PipelinePhase.ROLLOUT_ONLY
        return PipelinePhase.IDLE

    def in_update_window(self) -> bool:
        return self.training_active

    def _all_rollout_capable_to_rollout(self) -> list[str]:
        assigned = []
        for rid in self.scheduler.query(CapabilityTag.ROLLOUT):
            self.scheduler.set_active(rid, CapabilityTag.ROLLOUT)
            assigned.append(rid)
        return assigned

    def _record(self) -> None:
        self.transitions.append(
            PhaseTransition(
                t=self.clock.now(),
                phase=self.phase,
                rollout_active=len(self.scheduler.active(CapabilityTag.ROLLOUT)),
                train_active=len(self.scheduler.active(CapabilityTag.TRAIN)),
            )
        )
