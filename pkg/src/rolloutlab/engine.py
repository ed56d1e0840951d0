"""Deterministic mock of an LLM serving engine.

The "model" is a seeded hash: each output token is a pure function of the
full context so far, the request seed, and the engine's current weight
version. That makes every consistency property of the surrounding plumbing
falsifiable — a lost, duplicated, or mis-versioned token changes the stream.

Token function (also implemented by out-of-process clients, so the byte
layout is frozen):

    msg    = b"tokgen1" + le64_signed(seed) + le32(version)
             + le32(len(context)) + le32(t) for t in context
    token  = be_uint64(sha256(msg)[:8]) % vocab_size

where ``context`` is the request input plus every token produced before the
one being computed (including any resumed prefix).
"""

from __future__ import annotations

import hashlib
import itertools
import struct
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

from .core import GenParams, ModelVersion, TokenId

_MAGIC = b"tokgen1"


def next_token(
    context: Sequence[TokenId], seed: int, version: ModelVersion, vocab_size: int
) -> TokenId:
    """The fixed public token function. Pure; usable as an external oracle."""
    h = hashlib.sha256()
    h.update(_MAGIC)
    h.update(struct.pack("<q", seed))
    h.update(struct.pack("<I", version))
    h.update(struct.pack("<I", len(context)))
    for tok in context:
        h.update(struct.pack("<I", tok))
    return int.from_bytes(h.digest()[:8], "big") % vocab_size


def oracle_generate(
    input_tokens: Sequence[TokenId],
    params: GenParams,
    version: ModelVersion,
    vocab_size: int,
    *,
    prefix: Sequence[TokenId] = (),
) -> list[TokenId]:
    """Reference uninterrupted run at a fixed version (no engine involved)."""
    produced = list(prefix)
    while len(produced) < params.max_new_tokens:
        tok = next_token(list(input_tokens) + produced, params.seed, version, vocab_size)
        produced.append(tok)
        if params.stop_condition is not None and tok == params.stop_condition:
            break
    return produced[len(prefix):]


class EnginePhase(Enum):
    SERVING = "serving"
    SWITCHING = "switching"


@dataclass(frozen=True)
class EngineState:
    phase: EnginePhase
    current_version: ModelVersion
    switch_id: int


@dataclass
class GenerationResult:
    input_tokens: list[TokenId]
    output_tokens: list[TokenId]
    version_per_token: list[ModelVersion]
    finished: bool
    job_id: str = ""
    request_id: str | None = None


@dataclass
class OracleLogEntry:
    """One generation leg as the engine itself saw it."""

    job_id: str
    request_id: str | None
    input_tokens: list[TokenId]
    prefix: list[TokenId]
    output_tokens: list[TokenId]
    version_per_token: list[ModelVersion]
    finished: bool


class WaitSignal(Exception):
    """Raised while the engine is reloading weights; retry after the switch."""

    def __init__(self, switch_id: int, retry_after: float = 0.05):
        super().__init__(f"engine switching (switch {switch_id}); retry later")
        self.switch_id = switch_id
        self.retry_after = retry_after


class IllegalPhaseError(RuntimeError):
    pass


class VersionRegressionError(ValueError):
    pass


class BudgetExhaustedError(ValueError):
    pass


class UnknownJobError(KeyError):
    pass


@dataclass
class _Job:
    job_id: str
    request_id: str | None
    input_tokens: list[TokenId]
    prefix: list[TokenId]
    params: GenParams
    produced: list[TokenId] = field(default_factory=list)
    versions: list[ModelVersion] = field(default_factory=list)
    interrupted: bool = False
    stopped: bool = False

    @property
    def remaining(self) -> int:
        return self.params.max_new_tokens - len(self.prefix) - len(self.produced)


class StepOutcome(Enum):
    TOKEN = "token"
    FINISHED = "finished"
    INTERRUPTED = "interrupted"


class MockEngine:
    """Thread-safe deterministic generation with pause/reload/resume semantics.

    Generation is token-at-a-time; interrupts and phase changes take effect
    at token boundaries (tokens are atomic). ``step_hook``, when set, is
    called as ``hook(job_id, position)`` before each token outside the lock —
    tests use it as a virtual step clock to interrupt or switch at exact
    positions. ``step_delay`` adds a real sleep per token for live-server
    scenarios that need a window to inject control calls.
    """

    def __init__(
        self,
        vocab_size: int = 4096,
        *,
        step_delay: float = 0.0,
        step_hook: Callable[[str, int], None] | None = None,
    ):
        if vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        self.vocab_size = vocab_size
        self.step_delay = step_delay
        self.step_hook = step_hook
        self._lock = threading.RLock()
        self._serving = threading.Event()
        self._serving.set()
        self._phase = EnginePhase.SERVING
        self._version: ModelVersion = 0
        self._switch_id = 0
        self._jobs: dict[str, _Job] = {}
        self._job_counter = itertools.count()
        self._oracle_log: list[OracleLogEntry] = []

    # -- state ----------------------------------------------------------

    @property
    def state(self) -> EngineState:
        with self._lock:
            return EngineState(self._phase, self._version, self._switch_id)

    @property
    def current_version(self) -> ModelVersion:
        with self._lock:
            return self._version

    def in_flight_ids(self) -> list[str]:
        with self._lock:
            return list(self._jobs)

    def oracle_log(self, request_id: str | None = None) -> list[OracleLogEntry]:
        with self._lock:
            if request_id is None:
                return list(self._oracle_log)
            return [e for e in self._oracle_log if e.request_id == request_id]

    def wait_serving(self, timeout: float | None = None) -> bool:
        return self._serving.wait(timeout)

    # -- control path ----------------------------------------------------

    def begin_switch(self) -> EngineState:
        with self._lock:
            if self._phase is not EnginePhase.SWITCHING:
                self._phase = EnginePhase.SWITCHING
                self._switch_id += 1
                self._serving.clear()
                # In-flight work is interrupted rather than drained; partial
                # rollout resumes it after the switch.
                for job in self._jobs.values():
                    job.interrupted = True
            else:
                raise IllegalPhaseError("begin_switch requires phase=serving")
            return EngineState(self._phase, self._version, self._switch_id)

    def complete_switch(self, new_version: ModelVersion) -> EngineState:
        with self._lock:
            if self._phase is not EnginePhase.SWITCHING:
                raise IllegalPhaseError("complete_switch requires phase=switching")
            if new_version <= self._version:
                raise VersionRegressionError(
                    f"new version {new_version} must exceed current {self._version}"
                )
            self._version = new_version
            self._phase = EnginePhase.SERVING
            self._serving.set()
            return EngineState(self._phase, self._version, self._switch_id)

    def interrupt(self, job_ids: Sequence[str] | None = None) -> list[GenerationResult]:
        """Stop in-flight generations at the next token boundary.

        Returns a snapshot of each targeted job's partial output. Idempotent;
        interrupting nothing returns an empty list.
        """
        with self._lock:
            targets = list(self._jobs.values()) if job_ids is None else [
                self._jobs[j] for j in job_ids if j in self._jobs
            ]
            results = []
            for job in targets:
                job.interrupted = True
                results.append(
                    GenerationResult(
                        input_tokens=list(job.input_tokens),
                        output_tokens=list(job.produced),
                        version_per_token=list(job.versions),
                        finished=False,
                        job_id=job.job_id,
                        request_id=job.request_id,
                    )
                )
            return results

    # -- job-level generation (virtual step clock) ------------------------

    def start_job(
        self,
        input_tokens: Sequence[TokenId],
        params: GenParams,
        *,
        prefix: Sequence[TokenId] = (),
        request_id: str | None = None,
    ) -> str:
        """Register a generation; tokens are produced by step_job calls."""
        params.validate()
        if len(prefix) >= params.max_new_tokens and len(prefix) > 0:
            raise BudgetExhaustedError(
                f"prefix length {len(prefix)} leaves no budget (max_new_tokens={params.max_new_tokens})"
            )
        with self._lock:
            if self._phase is not EnginePhase.SERVING:
                raise WaitSignal(self._switch_id)
            job_id = f"job-{next(self._job_counter)}"
            self._jobs[job_id] = _Job(
                job_id=job_id,
                request_id=request_id,
                input_tokens=list(input_tokens),
                prefix=list(prefix),
                params=params,
            )
            return job_id

    def step_job(self, job_id: str) -> StepOutcome:
        """Produce one token, or report the job finished/interrupted."""
        with self._lock:
            job = self._jobs.get(job_id)
            if job is None:
                raise UnknownJobError(job_id)
        hook = self.step_hook
        if hook is not None:
            hook(job_id, len(job.produced))
        if self.step_delay > 0:
            time.sleep(self.step_delay)
        with self._lock:
            if job.interrupted or self._phase is not EnginePhase.SERVING:
                job.interrupted = True
                return StepOutcome.INTERRUPTED
            if job.stopped or job.remaining <= 0:
                return StepOutcome.FINISHED
            context = job.input_tokens + job.prefix + job.produced
            tok = next_token(context, job.params.seed, self._version, self.vocab_size)
            job.produced.append(tok)
            job.versions.append(self._version)
            if job.params.stop_condition is not None and tok == job.params.stop_condition:
                job.stopped = True
                return StepOutcome.FINISHED
            if job.remaining <= 0:
                return StepOutcome.FINISHED
            return StepOutcome.TOKEN

    def finish_job(self, job_id: str) -> GenerationResult:
        """Unregister a job and log its leg to the oracle log."""
        with self._lock:
            job = self._jobs.pop(job_id, None)
            if job is None:
                raise UnknownJobError(job_id)
            result = GenerationResult(
                input_tokens=list(job.input_tokens),
                output_tokens=list(job.produced),
                version_per_token=list(job.versions),
                finished=not job.interrupted,
                job_id=job.job_id,
                request_id=job.request_id,
            )
            self._oracle_log.append(
                OracleLogEntry(
                    job_id=job.job_id,
                    request_id=job.request_id,
                    input_tokens=list(job.input_tokens),
                    prefix=list(job.prefix),
                    output_tokens=list(job.produced),
                    version_per_token=list(job.versions),
                    finished=not job.interrupted,
                )
            )
            return result

    # -- blocking convenience wrappers ------------------------------------

    def generate(
        self,
        input_tokens: Sequence[TokenId],
        params: GenParams,
        *,
        request_id: str | None = None,
    ) -> GenerationResult:
        """Run a generation to completion or first interruption."""
        job_id = self.start_job(input_tokens, params, request_id=request_id)
        return self._run(job_id)

    def resume_from(
        self,
        prefix: Sequence[TokenId],
        input_tokens: Sequence[TokenId],
        params: GenParams,
        *,
        request_id: str | None = None,
    ) -> GenerationResult:
        """Continue a previously interrupted generation after ``prefix``.

        The remaining budget is max_new_tokens minus the prefix length; an
        empty prefix is identical to ``generate``.
        """
        job_id = self.start_job(input_tokens, params, prefix=prefix, request_id=request_id)
        return self._run(job_id)

    def _run(self, job_id: str) -> GenerationResult:
        while True:
            outcome = self.step_job(job_id)
            if outcome is not StepOutcome.TOKEN:
                return self.finish_job(job_id)
