"""Proxy between agents and the engine; the system of record for rollouts.

Every agent request passes through :class:`TrajectoryManager`. The manager
forwards generation to the engine, reassembles output across interrupts and
weight switches into one contiguous response, and inserts the recorded
(input, output) sequence into the session's radix tree before the response
is released. Agents never see wait signals or truncation.

Requests are driven by a small pump state machine so the same code path
serves both blocking callers (HTTP handlers, thread-per-request) and the
deterministic single-stepped drivers used in tests and the pipeline runtime.
"""

from __future__ import annotations

import itertools
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Protocol, Sequence

from .core import (
    GenParams,
    ModelVersion,
    SpanOrigin,
    TokenId,
    TokenSpan,
    Trajectory,
)
from .engine import MockEngine, StepOutcome, WaitSignal
from .trie import SessionTrie, StorageStats


class UnknownSessionError(KeyError):
    pass


class ProxyRetryableError(RuntimeError):
    """The request could not complete now; the agent may retry."""


class RequestState(Enum):
    FORWARDED = "forwarded"
    WAITING_SWITCH = "waiting_switch"
    RESUMING = "resuming"
    DONE = "done"


class PumpStatus(Enum):
    PROGRESS = "progress"
    WAITING = "waiting"
    DONE = "done"


class RolloutControl(Protocol):
    """Hook the rollout manager implements to pause/resume proxied work."""

    def admit_task(self, task_id: str, snapshot: Callable[[], "TaskSnapshot"]) -> None: ...

    def release_task(self, task_id: str) -> None: ...

    def note_job(self, task_id: str, job_id: str | None) -> None: ...

    def is_runnable(self, task_id: str) -> bool: ...


@dataclass
class TaskSnapshot:
    input_tokens: list[TokenId]
    produced: list[TokenId]
    versions: list[ModelVersion]
    budget_remaining: int


@dataclass
class PendingRequest:
    request_id: str
    session_id: str
    input_tokens: list[TokenId]
    params: GenParams
    context_version: ModelVersion
    state: RequestState = RequestState.FORWARDED
    job_id: str | None = None
    produced: list[TokenId] = field(default_factory=list)
    versions: list[ModelVersion] = field(default_factory=list)
    response: list[TokenId] | None = None
    _mutex: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def snapshot(self) -> TaskSnapshot:
        with self._mutex:
            return TaskSnapshot(
                input_tokens=list(self.input_tokens),
                produced=list(self.produced),
                versions=list(self.versions),
                budget_remaining=self.params.max_new_tokens - len(self.produced),
            )


@dataclass
class _Session:
    trie: SessionTrie
    lock: threading.RLock = field(default_factory=threading.RLock)
    delivered: set[int] = field(default_factory=set)


class TrajectoryManager:
    """Records all token-level I/O and serves trajectories to the trainer."""

    def __init__(
        self,
        engine: MockEngine,
        *,
        control: RolloutControl | None = None,
        expected_switch_duration: float = 0.5,
        pending_timeout: float | None = None,
        poll_interval: float = 0.002,
    ):
        self.engine = engine
        self.control = control
        # Pending requests mostly wait on weight switches, so the give-up
        # deadline defaults to 10x the expected switch duration.
        self.pending_timeout = (
            pending_timeout if pending_timeout is not None else 10.0 * expected_switch_duration
        )
        self.poll_interval = poll_interval
        self._lock = threading.RLock()
        self._sessions: dict[str, _Session] = {}
        self._open_requests: dict[str, PendingRequest] = {}
        self._complete_queue: list[tuple[str, int]] = []  # (session_id, node_id) FIFO
        self._enqueued: set[tuple[str, int]] = set()
        self._req_counter = itertools.count()
        self.on_complete: Callable[[int], None] | None = None  # arg: undelivered count

    # -- sessions ---------------------------------------------------------

    def _session(self, session_id: str, create: bool = False) -> _Session:
        with self._lock:
            sess = self._sessions.get(session_id)
            if sess is None:
                if not create:
                    raise UnknownSessionError(session_id)
                sess = _Session(trie=SessionTrie(session_id))
                self._sessions[session_id] = sess
            return sess

    def session_ids(self) -> list[str]:
        with self._lock:
            return list(self._sessions)

    # -- request lifecycle --------------------------------------------------

    def open_request(
        self,
        session_id: str,
        input_tokens: Sequence[TokenId],
        params: GenParams,
        *,
        request_id: str | None = None,
    ) -> PendingRequest:
        if not input_tokens:
            raise ValueError("input must be non-empty")
        params.validate()
        self._session(session_id, create=True)
        if request_id is None:
            request_id = f"req-{next(self._req_counter)}"
        req = PendingRequest(
            request_id=request_id,
            session_id=session_id,
            input_tokens=list(input_tokens),
            params=params,
            context_version=self.engine.current_version,
        )
        with self._lock:
            self._open_requests[request_id] = req
        if self.control is not None:
            self.control.admit_task(request_id, req.snapshot)
        return req

    def pump(self, req: PendingRequest) -> PumpStatus:
        """Advance a request by at most one engine step. Never blocks."""
        if req.state is RequestState.DONE:
            return PumpStatus.DONE

        if req.job_id is None:
            if len(req.produced) >= req.params.max_new_tokens:
                self._finalize(req)
                return PumpStatus.DONE
            if self.control is not None and not self.control.is_runnable(req.request_id):
                return PumpStatus.WAITING
            try:
                job_id = self.engine.start_job(
                    req.input_tokens,
                    req.params,
                    prefix=req.produced,
                    request_id=req.request_id,
                )
            except WaitSignal:
                req.state = RequestState.WAITING_SWITCH
                return PumpStatus.WAITING
            req.job_id = job_id
            req.state = RequestState.FORWARDED if not req.produced else RequestState.RESUMING
            if self.control is not None:
                self.control.note_job(req.request_id, job_id)
            return PumpStatus.PROGRESS

        outcome = self.engine.step_job(req.job_id)
        if outcome is StepOutcome.TOKEN:
            return PumpStatus.PROGRESS
        result = self.engine.finish_job(req.job_id)
        with req._mutex:
            req.job_id = None
            req.produced.extend(result.output_tokens)
            req.versions.extend(result.version_per_token)
        if self.control is not None:
            self.control.note_job(req.request_id, None)
        if result.finished or len(req.produced) >= req.params.max_new_tokens:
            self._finalize(req)
            return PumpStatus.DONE
        req.state = RequestState.RESUMING
        return PumpStatus.PROGRESS

    def _finalize(self, req: PendingRequest) -> None:
        """Record the completed exchange and release the response."""
        sess = self._session(req.session_id)
        sequence = req.input_tokens + req.produced
        origins = [SpanOrigin.AGENT_INPUT] * len(req.input_tokens) + [
            SpanOrigin.MODEL_OUTPUT
        ] * len(req.produced)
        versions = [req.context_version] * len(req.input_tokens) + req.versions
        with sess.lock:
            res = sess.trie.lpm_insert(sequence, origins, versions, completion_id=req.request_id)
        undelivered = None
        with self._lock:
            key = (req.session_id, res.node_id)
            if key not in self._enqueued and res.node_id not in sess.delivered:
                self._enqueued.add(key)
                self._complete_queue.append(key)
            self._open_requests.pop(req.request_id, None)
            undelivered = len(self._complete_queue)
        req.state = RequestState.DONE
        req.response = list(req.produced)
        if self.control is not None:
            self.control.release_task(req.request_id)
        if self.on_complete is not None:
            self.on_complete(undelivered)

    def abort_request(self, req: PendingRequest) -> None:
        with self._lock:
            self._open_requests.pop(req.request_id, None)
        if req.job_id is not None:
            self.engine.interrupt([req.job_id])
            try:
                self.engine.finish_job(req.job_id)
            except KeyError:
                pass
            req.job_id = None
        if self.control is not None:
            self.control.release_task(req.request_id)

    def proxy_generate(
        self,
        session_id: str,
        input_tokens: Sequence[TokenId],
        params: GenParams,
        *,
        request_id: str | None = None,
    ) -> list[TokenId]:
        """Agent-facing blocking call: one contiguous response, always.

        Interrupts and model switches are absorbed here: the request stays
        pending, output is buffered, and generation resumes from the buffered
        prefix once the engine serves again and the rollout gate is open.
        """
        req = self.open_request(session_id, input_tokens, params, request_id=request_id)
        deadline = time.monotonic() + self.pending_timeout
        try:
            while True:
                status = self.pump(req)
                if status is PumpStatus.DONE:
                    assert req.response is not None
                    return req.response
                if status is PumpStatus.PROGRESS:
                    deadline = time.monotonic() + self.pending_timeout
                    continue
                if time.monotonic() > deadline:
                    raise ProxyRetryableError(
                        f"request {req.request_id} timed out waiting for switch/resume"
                    )
                if not self.engine.wait_serving(self.poll_interval):
                    continue  # still switching; re-check the deadline
                time.sleep(self.poll_interval)  # serving but gated; back off briefly
        except ProxyRetryableError:
            self.abort_request(req)
            raise

    # -- trainer-facing surface ----------------------------------------------

    def extract_trajectories(
        self,
        session_id: str,
        *,
        min_version: ModelVersion | None = None,
        include_partials: bool = False,
    ) -> list[Trajectory]:
        """All completed root-to-leaf trajectories for a session.

        ``min_version`` keeps only trajectories whose newest token version is
        at least that value. Paused or abandoned requests are omitted unless
        ``include_partials`` is set; partials are synthesized from the pending
        buffers, not from the tree.
        """
        sess = self._session(session_id)
        with sess.lock:
            items = sess.trie.extract()
        out = [traj for _, traj in items]
        if include_partials:
            with self._lock:
                open_reqs = [
                    r for r in self._open_requests.values() if r.session_id == session_id
                ]
            for req in open_reqs:
                if req.produced:
                    out.append(self._partial_trajectory(req))
        if min_version is not None:
            out = [t for t in out if t.max_version() >= min_version]
        return out

    def _partial_trajectory(self, req: PendingRequest) -> Trajectory:
        spans = [TokenSpan(tuple(req.input_tokens), SpanOrigin.AGENT_INPUT, req.context_version)]
        pos = 0
        while pos < len(req.produced):
            end = pos
            while end < len(req.produced) and req.versions[end] == req.versions[pos]:
                end += 1
            spans.append(
                TokenSpan(tuple(req.produced[pos:end]), SpanOrigin.MODEL_OUTPUT, req.versions[pos])
            )
            pos = end
        return Trajectory.from_spans(req.session_id, spans)

    def drain_batch(self, min_samples: int) -> list[Trajectory] | None:
        """Atomically hand all undelivered complete trajectories to the trainer.

        Returns None (not-ready) until at least ``min_samples`` are complete.
        Every leaf is delivered exactly once.
        """
        if min_samples < 1:
            raise ValueError("min_samples must be positive")
        with self._lock:
            if len(self._complete_queue) < min_samples:
                return None
            taken = self._complete_queue
            self._complete_queue = []
            for session_id, node_id in taken:
                self._sessions[session_id].delivered.add(node_id)
                self._enqueued.discard((session_id, node_id))
        out = []
        for session_id, node_id in taken:
            sess = self._session(session_id)
            with sess.lock:
                out.append(sess.trie.path_trajectory(node_id))
        return out

    def undelivered_count(self) -> int:
        with self._lock:
            return len(self._complete_queue)

    def storage_stats(self, session_id: str) -> StorageStats:
        sess = self._session(session_id)
        with sess.lock:
            return sess.trie.stats()

    def trie_for(self, session_id: str) -> SessionTrie:
        return self._session(session_id).trie
