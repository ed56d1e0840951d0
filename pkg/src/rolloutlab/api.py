"""HTTP surface for the integrated stack.

All token payloads are integer arrays, never strings. The engine's wait
signal maps to 503 with a Retry-After hint; the agent-facing proxy endpoint
never surfaces it — requests stay pending across switches and return one
contiguous token array.
"""

from __future__ import annotations

from fastapi import FastAPI, Header, Query, Request
from fastapi.responses import JSONResponse, PlainTextResponse
from pydantic import BaseModel, Field

from .core import GenParams, InvalidParamsError, trajectory_to_line, trajectory_to_record
from .dataloader import IllegalTaskStateError, UnknownTaskError
from .engine import (
    BudgetExhaustedError,
    IllegalPhaseError,
    VersionRegressionError,
    WaitSignal,
)
from .rollout import ControlEvent, StaleVersionError
from .runtime import Stack
from .scheduler import (
    CapabilityTag,
    CapabilityViolationError,
    InsufficientCapabilityError,
    UnknownResourceError,
)
from .trajectory import ProxyRetryableError, UnknownSessionError


class GenerateBody(BaseModel):
    tokens: list[int]
    max_new_tokens: int = 16
    seed: int = 0
    stop_condition: int | None = None
    request_id: str | None = None


class ResumeBody(GenerateBody):
    prefix: list[int] = Field(default_factory=list)


class SwitchBody(BaseModel):
    version: int


class ProxyParams(BaseModel):
    max_new_tokens: int = 16
    seed: int = 0
    stop_condition: int | None = None


class ProxyGenerateBody(BaseModel):
    session_id: str | None = None
    tokens: list[int]
    params: ProxyParams = Field(default_factory=ProxyParams)


class DrainBody(BaseModel):
    min_samples: int = 1


class EventBody(BaseModel):
    kind: str
    payload: dict = Field(default_factory=dict)


class RegisterBody(BaseModel):
    id: str
    tags: list[str]
    peak_flops: float = 1.0e12
    hbm_bandwidth: float = 1.0e12


class RetagBody(BaseModel):
    resource_id: str
    tags: list[str]


class DispatchBody(BaseModel):
    task_kind: str
    count: int = 1


class FailBody(BaseModel):
    resource_id: str


class TaskIdBody(BaseModel):
    task_id: str


def build_app(stack: Stack) -> FastAPI:
    app = FastAPI(title="rolloutlab", docs_url=None, redoc_url=None)
    engine = stack.engine
    tm = stack.trajectory
    rm = stack.rollout
    sched = stack.scheduler
    loader = stack.dataloader

    @app.exception_handler(WaitSignal)
    async def wait_handler(request: Request, exc: WaitSignal):
        return JSONResponse(
            status_code=503,
            headers={"Retry-After": str(exc.retry_after)},
            content={"error": "wait", "switch_id": exc.switch_id, "retry_after": exc.retry_after},
        )

    @app.exception_handler(ProxyRetryableError)
    async def retryable_handler(request: Request, exc: ProxyRetryableError):
        return JSONResponse(
            status_code=503,
            headers={"Retry-After": "0.1"},
            content={"error": "retryable", "detail": str(exc)},
        )

    for exc_type in (
        IllegalPhaseError,
        VersionRegressionError,
        StaleVersionError,
        InsufficientCapabilityError,
        CapabilityViolationError,
        IllegalTaskStateError,
    ):

        @app.exception_handler(exc_type)
        async def conflict_handler(request: Request, exc: Exception):
            return JSONResponse(status_code=409, content={"error": type(exc).__name__, "detail": str(exc)})

    for exc_type in (UnknownSessionError, UnknownResourceError, UnknownTaskError):

        @app.exception_handler(exc_type)
        async def missing_handler(request: Request, exc: Exception):
            return JSONResponse(status_code=404, content={"error": type(exc).__name__, "detail": str(exc)})

    for exc_type in (InvalidParamsError, BudgetExhaustedError, ValueError):

        @app.exception_handler(exc_type)
        async def bad_request_handler(request: Request, exc: Exception):
            return JSONResponse(status_code=400, content={"error": type(exc).__name__, "detail": str(exc)})

    # -- health ------------------------------------------------------------

    @app.get("/healthz")
    def healthz():
        return {"ready": True, "services": stack.readiness()}

    # -- engine ------------------------------------------------------------

    @app.post("/engine/generate")
    def engine_generate(body: GenerateBody):
        params = GenParams(body.max_new_tokens, body.seed, body.stop_condition)
        result = engine.generate(body.tokens, params, request_id=body.request_id)
        return {
            "input_tokens": result.input_tokens,
            "output_tokens": result.output_tokens,
            "versions": result.version_per_token,
            "finished": result.finished,
        }

    @app.post("/engine/resume")
    def engine_resume(body: ResumeBody):
        params = GenParams(body.max_new_tokens, body.seed, body.stop_condition)
        result = engine.resume_from(body.prefix, body.tokens, params, request_id=body.request_id)
        return {
            "input_tokens": result.input_tokens,
            "output_tokens": result.output_tokens,
            "versions": result.version_per_token,
            "finished": result.finished,
        }

    @app.post("/engine/control/interrupt")
    def engine_interrupt():
        partials = engine.interrupt()
        return {
            "partials": [
                {
                    "job_id": p.job_id,
                    "request_id": p.request_id,
                    "output_tokens": p.output_tokens,
                    "versions": p.version_per_token,
                }
                for p in partials
            ]
        }

    @app.post("/engine/control/begin_switch")
    def engine_begin_switch():
        state = engine.begin_switch()
        return {"phase": state.phase.value, "version": state.current_version, "switch_id": state.switch_id}

    @app.post("/engine/control/complete_switch")
    def engine_complete_switch(body: SwitchBody):
        state = engine.complete_switch(body.version)
        return {"phase": state.phase.value, "version": state.current_version, "switch_id": state.switch_id}

    @app.get("/engine/state")
    def engine_state():
        state = engine.state
        return {"phase": state.phase.value, "version": state.current_version, "switch_id": state.switch_id}

    # -- agent-facing proxy ---------------------------------------------------

    @app.post("/v1/generate")
    def proxy_generate(body: ProxyGenerateBody, x_session_id: str | None = Header(default=None)):
        session_id = body.session_id or x_session_id
        if session_id is None:
            # sessionless callers get a one-off session per request
            session_id = f"anon-{id(body)}-{len(body.tokens)}"
        params = GenParams(
            body.params.max_new_tokens, body.params.seed, body.params.stop_condition
        )
        tokens = tm.proxy_generate(session_id, body.tokens, params)
        return {"session_id": session_id, "tokens": tokens}

    # -- trainer-facing -----------------------------------------------------------

    @app.post("/traj/drain")
    def traj_drain(body: DrainBody):
        batch = tm.drain_batch(body.min_samples)
        if batch is None:
            return {"ready": False, "trajectories": []}
        return {"ready": True, "trajectories": [trajectory_to_record(t) for t in batch]}

    @app.get("/traj/session/{session_id}")
    def traj_session(
        session_id: str,
        min_version: int | None = Query(default=None),
        include_partials: bool = Query(default=False),
    ):
        trajs = tm.extract_trajectories(
            session_id, min_version=min_version, include_partials=include_partials
        )
        return {"trajectories": [trajectory_to_record(t) for t in trajs]}

    @app.get("/traj/stats/{session_id}")
    def traj_stats(session_id: str):
        stats = tm.storage_stats(session_id)
        return {
            "stored_tokens": stats.stored_tokens,
            "naive_tokens": stats.naive_tokens,
            "dedup_ratio": stats.dedup_ratio,
        }

    @app.get("/traj/export")
    def traj_export():
        lines = []
        for session_id in sorted(tm.session_ids()):
            for traj in tm.extract_trajectories(session_id):
                lines.append(trajectory_to_line(traj))
        return PlainTextResponse("\n".join(lines) + ("\n" if lines else ""))

    # -- rollout control -------------------------------------------------------------

    @app.post("/ctl/event")
    def ctl_event(body: EventBody):
        event = ControlEvent.from_record({"kind": body.kind, "payload": body.payload})
        commands = rm.handle(event)
        return {"commands": [c.to_record() for c in commands]}

    @app.post("/ctl/update")
    def ctl_update(body: SwitchBody):
        report = rm.coordinate_update(body.version)
        return {
            "new_version": report.new_version,
            "paused": report.paused,
            "resumed": report.resumed,
            "switch_duration": report.switch_duration,
        }

    @app.get("/ctl/state")
    def ctl_state():
        return rm.state_report()

    # -- scheduler ----------------------------------------------------------------------

    @app.post("/sched/register")
    def sched_register(body: RegisterBody):
        from .scheduler import ResourceDescriptor

        sched.register(
            ResourceDescriptor(
                body.id,
                {CapabilityTag(t) for t in body.tags},
                peak_flops=body.peak_flops,
                hbm_bandwidth=body.hbm_bandwidth,
            )
        )
        return {"registered": body.id}

    @app.post("/sched/retag")
    def sched_retag(body: RetagBody):
        sched.retag(body.resource_id, {CapabilityTag(t) for t in body.tags})
        return {"retagged": body.resource_id}

    @app.get("/sched/pool")
    def sched_pool(format: str = Query(default="json")):
        if format == "lines":
            return PlainTextResponse(sched.pool_snapshot_lines() + "\n")
        return {"resources": [d.to_record() for d in sched.resources()]}

    @app.post("/sched/dispatch")
    def sched_dispatch(body: DispatchBody):
        assignment = sched.dispatch(CapabilityTag(body.task_kind), body.count)
        return {
            "task_kind": assignment.task_kind.value,
            "resource_ids": assignment.resource_ids,
            "preempted": assignment.preempted,
        }

    @app.post("/sched/fail")
    def sched_fail(body: FailBody):
        plan = sched.handle_failure(body.resource_id)
        return {"resource_id": plan.resource_id, "requeued_task_ids": plan.requeued_task_ids}

    # -- dataloader -----------------------------------------------------------------------

    @app.get("/data/next")
    def data_next(capacity: int = Query(ge=0)):
        tasks = loader.next(capacity)
        return {"tasks": [t.to_record() for t in tasks]}

    @app.post("/data/complete")
    def data_complete(body: TaskIdBody):
        loader.complete(body.task_id)
        return {"task_id": body.task_id, "state": "complete"}

    @app.post("/data/requeue")
    def data_requeue(body: TaskIdBody):
        loader.requeue(body.task_id)
        return {"task_id": body.task_id, "state": "pending"}

    return app
