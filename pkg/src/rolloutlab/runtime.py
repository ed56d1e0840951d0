"""Wiring of the full stack plus two execution drivers.

``Stack.build`` constructs engine, rollout manager, trajectory manager,
scheduler, and dataloader in dependency order and cross-wires their event
paths (scheduler preemptions pause tasks before assignments activate,
failures requeue work, batch thresholds trigger training).

``PipelineDriver`` advances everything on a deterministic single-threaded
tick loop (one engine token per busy resource per tick) — the form used by
tests and failure-injection runs. ``WorkerPool``/``TrainerLoop`` run the same
stack under real threads for the HTTP server.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .clock import VirtualClock
from .core import GenParams
from .dataloader import StreamingDataloader, TaskRecord
from .engine import MockEngine
from .rollout import RolloutManager
from .scheduler import (
    CapabilityTag,
    MultiplexingController,
    ResourceDescriptor,
    TagScheduler,
)
from .trajectory import PendingRequest, PumpStatus, TrajectoryManager


@dataclass
class StackConfig:
    cluster: list[ResourceDescriptor]
    vocab_size: int = 4096
    batch_size: int = 4
    train_ticks: int = 8  # virtual train duration for the stub trainer
    train_duration: float = 0.05  # real seconds, threaded mode
    max_updates: int | None = None
    max_new_tokens: int = 16
    gen_seed: int = 0
    engine_step_delay: float = 0.0
    pending_timeout: float = 30.0
    batch_timeout_ticks: int | None = None  # timeout trigger window, driver mode
    event_log_path: str | None = None


@dataclass
class Stack:
    config: StackConfig
    clock: VirtualClock
    engine: MockEngine
    rollout: RolloutManager
    trajectory: TrajectoryManager
    scheduler: TagScheduler
    dataloader: StreamingDataloader
    controller: MultiplexingController
    startup_order: list[str] = field(default_factory=list)

    @classmethod
    def build(cls, config: StackConfig) -> Stack:
        order: list[str] = []
        clock = VirtualClock()
        engine = MockEngine(vocab_size=config.vocab_size, step_delay=config.engine_step_delay)
        order.append("engine")
        rollout = RolloutManager(
            engine, clock=clock, event_log_path=config.event_log_path
        )
        order.append("rollout-manager")
        trajectory = TrajectoryManager(
            engine, control=rollout, pending_timeout=config.pending_timeout
        )
        order.append("trajectory-manager")
        scheduler = TagScheduler(event_sink=rollout.handle, clock=clock)
        rollout.scheduler = scheduler
        for desc in config.cluster:
            scheduler.register(desc)
        order.append("scheduler")
        dataloader = StreamingDataloader()
        rollout.on_requeue = lambda task_ids: None  # driver/pool override
        order.append("dataloader")
        controller = MultiplexingController(scheduler=scheduler, clock=clock)
        stack = cls(
            config=config,
            clock=clock,
            engine=engine,
            rollout=rollout,
            trajectory=trajectory,
            scheduler=scheduler,
            dataloader=dataloader,
            controller=controller,
            startup_order=order,
        )
        return stack

    def readiness(self) -> dict[str, bool]:
        return {name: True for name in self.startup_order}

    def shutdown(self) -> None:
        # reverse of startup; only the rollout manager holds a file handle
        self.rollout.close()


@dataclass
class DriverReport:
    ticks: int
    tasks_completed: int
    updates: int
    final_version: int
    failures_injected: int


class PipelineDriver:
    """Deterministic end-to-end executor over virtual ticks.

    Every rollout-active resource holds at most one task; each busy task
    advances one engine step per tick. The stub trainer drains complete
    trajectories at the batch threshold, occupies train-tagged resources for
    ``train_ticks``, then bumps the engine version through the rollout
    manager's coordinated update.
    """

    def __init__(
        self,
        stack: Stack,
        *,
        failure_plan: dict[int, str] | None = None,
        on_batch: Callable[[list], None] | None = None,
    ):
        self.stack = stack
        self.failure_plan = dict(failure_plan or {})
        self.on_batch = on_batch
        self.handles: dict[str, PendingRequest] = {}
        self.occupant: dict[str, str] = {}  # resource -> task
        self.training_left = 0
        self.train_assignment: list[str] = []
        self.updates_done = 0
        self.failures = 0
        self.ticks_since_dispatch = 0
        self.tick = 0
        stack.rollout.on_requeue = self._requeue

    # -- wiring callbacks ------------------------------------------------------

    def _requeue(self, task_ids: Sequence[str]) -> None:
        rm = self.stack.rollout
        for task_id in task_ids:
            handle = self.handles.get(task_id)
            if handle is not None and handle.job_id is not None:
                self.stack.engine.interrupt([handle.job_id])
            rm.bind_resource(task_id, None)
            for rid, occupant in list(self.occupant.items()):
                if occupant == task_id:
                    del self.occupant[rid]
            self.stack.dataloader.requeue(task_id)

    # -- trainer ----------------------------------------------------------------

    def _trainer_tick(self) -> None:
        stack = self.stack
        cfg = stack.config
        if self.training_left > 0:
            self.training_left -= 1
            if self.training_left == 0:
                stack.rollout.coordinate_update(stack.engine.current_version + 1)
                self.updates_done += 1
                stack.controller.on_train_complete()
            return
        if cfg.max_updates is not None and self.updates_done >= cfg.max_updates:
            return
        ready = stack.trajectory.undelivered_count() >= cfg.batch_size
        timed_out = (
            cfg.batch_timeout_ticks is not None
            and self.ticks_since_dispatch >= cfg.batch_timeout_ticks
            and stack.trajectory.undelivered_count() > 0
        )
        if not (ready or timed_out):
            return
        batch = stack.trajectory.drain_batch(1 if timed_out else cfg.batch_size)
        if batch is None:
            return
        if self.on_batch is not None:
            self.on_batch(batch)
        assignment = stack.controller.on_threshold_reached()
        self.train_assignment = list(assignment.resource_ids)
        self.training_left = max(1, cfg.train_ticks)
        self.ticks_since_dispatch = 0

    def _retry_training_after_failure(self, failed: str) -> None:
        if failed in self.train_assignment and self.training_left > 0:
            assignment = self.stack.controller.on_threshold_reached()
            self.train_assignment = list(assignment.resource_ids)
            self.training_left = max(1, self.stack.config.train_ticks)

    # -- rollout ----------------------------------------------------------------

    def _fill(self) -> None:
        stack = self.stack
        rollout_active = stack.scheduler.active(CapabilityTag.ROLLOUT)
        for rid in rollout_active:
            if rid in self.occupant:
                continue
            got = stack.dataloader.next(1)
            if not got:
                return
            (task,) = got
            handle = self.handles.get(task.task_id)
            if handle is None:
                handle = stack.trajectory.open_request(
                    task.task_id,
                    task.prompt_tokens,
                    GenParams(max_new_tokens=stack.config.max_new_tokens, seed=stack.config.gen_seed),
                    request_id=task.task_id,
                )
                self.handles[task.task_id] = handle
            self.occupant[rid] = task.task_id
            stack.rollout.bind_resource(task.task_id, rid)
            stack.scheduler.note_task(rid, task.task_id)

    def _step_running(self) -> None:
        stack = self.stack
        for rid, task_id in list(self.occupant.items()):
            handle = self.handles[task_id]
            status = stack.trajectory.pump(handle)
            if status is PumpStatus.DONE:
                stack.dataloader.complete(task_id)
                stack.scheduler.clear_task(rid, task_id)
                del self.occupant[rid]

    # -- main loop -----------------------------------------------------------------

    def run(self, max_ticks: int = 100_000) -> DriverReport:
        stack = self.stack
        stack.controller.start()
        cfg = stack.config
        while self.tick < max_ticks:
            timeout_pending = (
                cfg.batch_timeout_ticks is not None
                and (cfg.max_updates is None or self.updates_done < cfg.max_updates)
                and stack.trajectory.undelivered_count() > 0
            )
            if (
                stack.dataloader.is_exhausted()
                and self.training_left == 0
                and stack.dataloader.pending_count() == 0
                and not self.occupant
                and not timeout_pending
            ):
                break
            failed = self.failure_plan.pop(self.tick, None)
            if failed is not None:
                stack.scheduler.handle_failure(failed)
                self.failures += 1
                self._retry_training_after_failure(failed)
            self._trainer_tick()
            self._fill()
            self._step_running()
            stack.clock.advance(1.0)
            self.ticks_since_dispatch += 1
            self.tick += 1
        return DriverReport(
            ticks=self.tick,
            tasks_completed=stack.dataloader.complete_count(),
            updates=self.updates_done,
            final_version=stack.engine.current_version,
            failures_injected=self.failures,
        )


class TrainerLoop(threading.Thread):
    """Threaded stub trainer: drain at threshold, hold train nodes, bump version."""

    def __init__(self, stack: Stack):
        super().__init__(daemon=True)
        self.stack = stack
        self.stop_flag = threading.Event()
        self.updates_done = 0
        self.batches: list[list] = []

    def run(self) -> None:
        stack = self.stack
        cfg = stack.config
        stack.controller.start()
        while not self.stop_flag.is_set():
            if cfg.max_updates is not None and self.updates_done >= cfg.max_updates:
                time.sleep(0.01)
                continue
            batch = stack.trajectory.drain_batch(cfg.batch_size)
            if batch is None:
                time.sleep(0.005)
                continue
            self.batches.append(batch)
            stack.controller.on_threshold_reached()
            time.sleep(cfg.train_duration)
            stack.rollout.coordinate_update(stack.engine.current_version + 1)
            self.updates_done += 1
            stack.controller.on_train_complete()

    def stop(self) -> None:
        self.stop_flag.set()


class WorkerPool:
    """One rollout worker thread per rollout-capable resource (threaded mode)."""

    def __init__(self, stack: Stack):
        self.stack = stack
        self.threads: list[threading.Thread] = []
        self.stop_flag = threading.Event()
        self.errors: list[Exception] = []

    def start(self) -> None:
        for rid in self.stack.scheduler.query(CapabilityTag.ROLLOUT):
            t = threading.Thread(target=self._work, args=(rid,), daemon=True)
            self.threads.append(t)
            t.start()

    def _work(self, rid: str) -> None:
        stack = self.stack
        while not self.stop_flag.is_set():
            if rid not in stack.scheduler.active(CapabilityTag.ROLLOUT):
                time.sleep(0.003)
                continue
            got = stack.dataloader.next(1)
            if not got:
                if stack.dataloader.is_exhausted():
                    return
                time.sleep(0.003)
                continue
            (task,) = got
            try:
                stack.rollout.bind_resource(task.task_id, rid)
                stack.trajectory.proxy_generate(
                    task.task_id,
                    task.prompt_tokens,
                    GenParams(
                        max_new_tokens=stack.config.max_new_tokens, seed=stack.config.gen_seed
                    ),
                    request_id=task.task_id,
                )
                stack.dataloader.complete(task.task_id)
            except Exception as exc:  # pragma: no cover - surfaced by tests
                self.errors.append(exc)
                return

    def stop(self, timeout: float = 5.0) -> None:
        self.stop_flag.set()
        for t in self.threads:
            t.join(timeout)

    def join_idle(self, timeout: float = 30.0) -> bool:
        """Wait until every loaded task is complete."""
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if self.stack.dataloader.is_exhausted():
                return True
            time.sleep(0.01)
        return False


def single_turn_oracle(stack: Stack, task: TaskRecord) -> list[int]:
    """Expected uninterrupted response for a driver task at version 0."""
    from .engine import oracle_generate

    return oracle_generate(
        task.prompt_tokens,
        GenParams(max_new_tokens=stack.config.max_new_tokens, seed=stack.config.gen_seed),
        version=0,
        vocab_size=stack.config.vocab_size,
    )
