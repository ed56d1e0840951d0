"""Discrete-event simulator for rollout/train pipeline scheduling strategies.

Four strategies run over the same cluster and workload:

* ``naive``          — rollout and training strictly alternate.
* ``micro_batch``    — gradients start per micro-batch as samples land, but
                       rollout stays strictly on-policy (idles until the
                       version bump).
* ``off_policy_fill``— micro-batch training plus continuous rollout; data is
                       consumed while its version lag stays within the limit.
* ``spatiotemporal`` — train-capable machines are preempted between roles by
                       the real tag scheduler and multiplexing controller
                       (the same code path the live stack uses).

Baselines project the cluster onto the disaggregated split (train-capable
machines form the train cluster, the rest roll out); the spatiotemporal
strategy uses the tags as given.

Bubble accounting: a resource contributes bubble time while it sits idle and
positive-duration work matching one of its (strategy-view) capabilities
remains unfinished. Zero-duration work never opens a window, so degenerate
workloads report zero bubble.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from enum import Enum
from heapq import heappop, heappush
from typing import Sequence

from .scheduler import (
    CapabilityTag,
    MultiplexingController,
    ResourceDescriptor,
    TagScheduler,
)


class Strategy(Enum):
    NAIVE = "naive"
    MICRO_BATCH = "micro_batch"
    OFF_POLICY_FILL = "off_policy_fill"
    SPATIOTEMPORAL = "spatiotemporal"


class IncompatibleTaggingError(RuntimeError):
    pass


@dataclass
class DurationSpec:
    """Per-sample rollout duration: constant or uniform."""

    kind: str = "constant"
    value: float = 1.0
    low: float = 0.0
    high: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("constant", "uniform"):
            raise ValueError(f"unknown duration kind {self.kind!r}")
        if self.kind == "constant" and self.value <= 0:
            raise ValueError("duration must be > 0")
        if self.kind == "uniform" and not (0 < self.low <= self.high):
            raise ValueError("uniform duration needs 0 < low <= high")

    def sample(self, seed: int, index: int) -> float:
        if self.kind == "constant":
            return self.value
        rng = random.Random(f"{seed}:{index}")
        return rng.uniform(self.low, self.high)

    @property
    def mean(self) -> float:
        return self.value if self.kind == "constant" else (self.low + self.high) / 2.0

    def to_record(self) -> dict:
        if self.kind == "constant":
            return {"kind": "constant", "value": self.value}
        return {"kind": "uniform", "low": self.low, "high": self.high}

    @classmethod
    def from_record(cls, rec) -> DurationSpec:
        if isinstance(rec, (int, float)):
            return cls(kind="constant", value=float(rec))
        if rec.get("kind") == "uniform":
            return cls(kind="uniform", low=float(rec["low"]), high=float(rec["high"]))
        return cls(kind="constant", value=float(rec["value"]))


@dataclass
class Workload:
    num_steps: int
    rollout_duration: DurationSpec
    train_duration: float
    batch_size: int
    staleness_limit: int = 1
    micro_batches: int | None = None  # default: batch_size // 4, at least 1
    transition_cost: float = 0.0

    def __post_init__(self) -> None:
        if self.num_steps < 1 or self.batch_size < 1:
            raise ValueError("num_steps and batch_size must be >= 1")
        if self.train_duration < 0:
            raise ValueError("train_duration must be >= 0")

    def effective_micro_batches(self) -> int:
        if self.micro_batches is not None:
            return max(1, self.micro_batches)
        return max(1, self.batch_size // 4)


@dataclass
class SampleRecord:
    sample_id: int
    duration: float
    completed_t: float | None = None
    gen_version: int | None = None
    in_update_window: bool = False
    trained_step: int | None = None
    lag: int | None = None
    dropped: bool = False


@dataclass
class StepRecord:
    step: int
    dispatch_t: float
    start_t: float
    end_t: float
    batch: list[int]
    lags: list[int]
    policy_version: int  # version when the step began


@dataclass
class SimMetrics:
    strategy: str
    seed: int
    makespan: float
    busy_by_resource: dict[str, float]
    idle_by_resource: dict[str, float]
    bubble_by_resource: dict[str, float]
    bubble_fraction: float
    train_bubble_fraction: float
    rollout_bubble_fraction: float
    staleness_histogram: dict[int, int]
    samples_completed: int
    samples_trained: int
    samples_dropped: int
    mean_staleness: float

    def to_record(self) -> dict:
        return {
            "strategy": self.strategy,
            "seed": self.seed,
            "makespan": round(self.makespan, 9),
            "bubble_fraction": round(self.bubble_fraction, 9),
            "train_bubble_fraction": round(self.train_bubble_fraction, 9),
            "rollout_bubble_fraction": round(self.rollout_bubble_fraction, 9),
            "mean_staleness": round(self.mean_staleness, 9),
            "staleness_histogram": {str(k): v for k, v in sorted(self.staleness_histogram.items())},
            "samples_completed": self.samples_completed,
            "samples_trained": self.samples_trained,
            "samples_dropped": self.samples_dropped,
        }


@dataclass
class SimResult:
    strategy: Strategy
    seed: int
    metrics: SimMetrics
    trace: list[dict]
    steps: list[StepRecord]
    samples: dict[int, SampleRecord]
    phase_windows: list[tuple[float, float, str]]
    busy_intervals: list[tuple[str, float, float, str, str]] = field(default_factory=list)


@dataclass
class _Busy:
    node: str
    start: float
    end: float
    kind: str
    task: str


class _Recorder:
    def __init__(self):
        self.trace: list[dict] = []
        self.busy: list[_Busy] = []

    def event(self, t: float, node: str, event: str, task: str = "", kind: str = "") -> None:
        self.trace.append({"t": round(t, 9), "node": node, "event": event, "task": task, "kind": kind})

    def interval(self, node: str, start: float, end: float, kind: str, task: str) -> None:
        if end > start:
            self.busy.append(_Busy(node, start, end, kind, task))


def _view_for(strategy: Strategy, cluster: Sequence[ResourceDescriptor]) -> dict[str, set[str]]:
    """Map each node to the capability view the strategy schedules it under."""
    if not cluster:
        raise IncompatibleTaggingError("cluster is empty")
    train_capable = [d for d in cluster if CapabilityTag.TRAIN in d.capability_tags]
    rollout_only = [
        d
        for d in cluster
        if CapabilityTag.ROLLOUT in d.capability_tags
        and CapabilityTag.TRAIN not in d.capability_tags
    ]
    if strategy is Strategy.SPATIOTEMPORAL:
        if not train_capable:
            raise IncompatibleTaggingError("spatiotemporal needs at least one train-capable node")
        if not any(CapabilityTag.ROLLOUT in d.capability_tags for d in cluster):
            raise IncompatibleTaggingError("spatiotemporal needs rollout-capable nodes")
        return {d.resource_id: {t.value for t in d.capability_tags} for d in cluster}
    # Baselines require the disaggregated single-tag split: the train-capable
    # machines become the train cluster, everything else rolls out.
    if not train_capable:
        raise IncompatibleTaggingError(f"{strategy.value} needs at least one train-capable node")
    if not rollout_only:
        raise IncompatibleTaggingError(
            f"{strategy.value} needs a disaggregated split (no rollout-only nodes present)"
        )
    view: dict[str, set[str]] = {}
    for d in cluster:
        view[d.resource_id] = {"train"} if CapabilityTag.TRAIN in d.capability_tags else {"rollout"}
    return view


def _metrics_from(
    strategy: Strategy,
    seed: int,
    view: dict[str, set[str]],
    rec: _Recorder,
    makespan: float,
    samples: dict[int, SampleRecord],
    steps: list[StepRecord],
    train_duration: float,
    rollout_window_end: float,
) -> SimMetrics:
    busy_by: dict[str, float] = {n: 0.0 for n in view}
    intervals_by: dict[str, list[tuple[float, float]]] = {n: [] for n in view}
    for b in rec.busy:
        clipped_end = min(b.end, makespan)
        if clipped_end > b.start:
            busy_by[b.node] += clipped_end - b.start
            intervals_by[b.node].append((b.start, clipped_end))

    windows: dict[str, tuple[float, float] | None] = {
        "train": (0.0, makespan) if train_duration > 0 and makespan > 0 else None,
        "rollout": (0.0, rollout_window_end) if rollout_window_end > 0 else None,
    }

    idle_by: dict[str, float] = {}
    bubble_by: dict[str, float] = {}
    for node, caps in view.items():
        merged = _merge_intervals(intervals_by[node])
        idle_gaps = _complement(merged, 0.0, makespan)
        idle_by[node] = sum(e - s for s, e in idle_gaps)
        relevant = [windows[c] for c in caps if windows.get(c) is not None]
        bubble = 0.0
        for s, e in idle_gaps:
            covered = 0.0
            for ws, we in relevant:
                lo, hi = max(s, ws), min(e, we)
                covered = max(covered, max(0.0, hi - lo))
            bubble += covered
        bubble_by[node] = bubble

    n = len(view)
    total = n * makespan if makespan > 0 else 1.0
    train_nodes = [node for node, caps in view.items() if "train" in caps]
    rollout_nodes = [node for node, caps in view.items() if "train" not in caps]
    trained = [s for s in samples.values() if s.trained_step is not None]
    hist: dict[int, int] = {}
    for s in trained:
        hist[s.lag] = hist.get(s.lag, 0) + 1
    return SimMetrics(
        strategy=strategy.value,
        seed=seed,
        makespan=makespan,
        busy_by_resource=busy_by,
        idle_by_resource=idle_by,
        bubble_by_resource=bubble_by,
        bubble_fraction=sum(bubble_by.values()) / total,
        train_bubble_fraction=(
            sum(bubble_by[r] for r in train_nodes) / (len(train_nodes) * makespan)
            if train_nodes and makespan > 0
            else 0.0
        ),
        rollout_bubble_fraction=(
            sum(bubble_by[r] for r in rollout_nodes) / (len(rollout_nodes) * makespan)
            if rollout_nodes and makespan > 0
            else 0.0
        ),
        staleness_histogram=hist,
        samples_completed=sum(1 for s in samples.values() if s.completed_t is not None),
        samples_trained=len(trained),
        samples_dropped=sum(1 for s in samples.values() if s.dropped),
        mean_staleness=(sum(s.lag for s in trained) / len(trained)) if trained else 0.0,
    )


def _merge_intervals(intervals: list[tuple[float, float]]) -> list[tuple[float, float]]:
    out: list[tuple[float, float]] = []
    for s, e in sorted(intervals):
        if out and s <= out[-1][1] + 1e-12:
            out[-1] = (out[-1][0], max(out[-1][1], e))
        else:
            out.append((s, e))
    return out


def _complement(intervals: list[tuple[float, float]], lo: float, hi: float) -> list[tuple[float, float]]:
    gaps: list[tuple[float, float]] = []
    cursor = lo
    for s, e in intervals:
        if s > cursor + 1e-12:
            gaps.append((cursor, s))
        cursor = max(cursor, e)
    if hi > cursor + 1e-12:
        gaps.append((cursor, hi))
    return gaps


# -- batch-synchronous baselines: naive and micro_batch -------------------------


def _simulate_batched(
    strategy: Strategy,
    cluster: Sequence[ResourceDescriptor],
    workload: Workload,
    seed: int,
) -> SimResult:
    """naive (one chunk) and micro_batch (chunked gradients, on-policy rollout)."""
    view = _view_for(strategy, cluster)
    train_nodes = sorted(n for n, caps in view.items() if "train" in caps)
    rollout_nodes = sorted(n for n, caps in view.items() if "rollout" in caps)
    chunks = 1 if strategy is Strategy.NAIVE else workload.effective_micro_batches()
    chunk_time = workload.train_duration / chunks

    rec = _Recorder()
    samples: dict[int, SampleRecord] = {}
    steps: list[StepRecord] = []
    sample_counter = 0
    version = 0
    t = 0.0
    last_rollout_completion = 0.0

    for step in range(workload.num_steps):
        # rollout phase: exactly batch_size samples, nodes pick up work as they free
        free_at = {n: t for n in rollout_nodes}
        completions: list[tuple[float, int]] = []
        for _ in range(workload.batch_size):
            node = min(rollout_nodes, key=lambda n: (free_at[n], n))
            sid = sample_counter
            sample_counter += 1
            dur = workload.rollout_duration.sample(seed, sid)
            start = free_at[node]
            end = start + dur
            free_at[node] = end
            samples[sid] = SampleRecord(sid, dur, completed_t=end, gen_version=version)
            rec.event(start, node, "sample_start", f"s{sid}", "rollout")
            rec.event(end, node, "sample_done", f"s{sid}", "rollout")
            rec.interval(node, start, end, "rollout", f"s{sid}")
            completions.append((end, sid))
        completions.sort()
        last_rollout_completion = max(last_rollout_completion, completions[-1][0])

        # gradient chunks start as their samples are ready, sequentially
        per_chunk = _split_counts(workload.batch_size, chunks)
        chunk_end = 0.0
        consumed = 0
        first_start = None
        for k, size in enumerate(per_chunk):
            consumed += size
            ready = completions[consumed - 1][0]
            start = max(ready, chunk_end)
            if first_start is None:
                first_start = start
            chunk_end = start + chunk_time
            for node in train_nodes:
                rec.interval(node, start, chunk_end, "train", f"step{step}.c{k}")
            rec.event(start, train_nodes[0], "chunk_start", f"step{step}.c{k}", "train")
            rec.event(chunk_end, train_nodes[0], "chunk_done", f"step{step}.c{k}", "train")

        batch_ids = [sid for _, sid in completions]
        for sid in batch_ids:
            samples[sid].trained_step = step
            samples[sid].lag = version - samples[sid].gen_version  # always 0 here
        steps.append(
            StepRecord(
                step=step,
                dispatch_t=completions[workload.batch_size - 1][0],
                start_t=first_start if first_start is not None else t,
                end_t=chunk_end,
                batch=batch_ids,
                lags=[0] * len(batch_ids),
                policy_version=version,
            )
        )
        rec.event(chunk_end, train_nodes[0], "train_done", f"step{step}", "train")
        version += 1
        t = chunk_end  # strictly on-policy: next batch starts after the bump

    makespan = t
    metrics = _metrics_from(
        strategy,
        seed,
        view,
        rec,
        makespan,
        samples,
        steps,
        workload.train_duration,
        rollout_window_end=last_rollout_completion,
    )
    return SimResult(
        strategy, seed, metrics, rec.trace, steps, samples, [],
        busy_intervals=[(b.node, b.start, b.end, b.kind, b.task) for b in rec.busy],
    )


def _split_counts(total: int, parts: int) -> list[int]:
    base, rem = divmod(total, parts)
    return [base + (1 if i < rem else 0) for i in range(parts)]


# -- streaming strategies: off_policy_fill and spatiotemporal ---------------------


@dataclass
class _Running:
    sample_id: int
    start: float
    remaining: float
    epoch: int


class _StreamSim:
    """Shared event-loop state for the streaming strategies."""

    def __init__(self, strategy, cluster, workload, seed):
        self.strategy = strategy
        self.workload = workload
        self.seed = seed
        self.view = _view_for(strategy, cluster)
        self.rec = _Recorder()
        self.samples: dict[int, SampleRecord] = {}
        self.steps: list[StepRecord] = []
        self.completed: list[int] = []  # undelivered, completion order
        self.heap: list[tuple[float, int, str, tuple]] = []
        self.seq = 0
        self.sample_counter = 0
        self.version = 0
        self.steps_done = 0
        self.training = False
        self.running: dict[str, _Running] = {}
        self.epoch = 0
        self.makespan = 0.0
        self.phase_windows: list[tuple[float, float, str]] = []
        self._phase_started = 0.0
        self._phase_label = ""

    def push(self, t: float, kind: str, data: tuple = ()) -> None:
        self.seq += 1
        heappush(self.heap, (t, self.seq, kind, data))

    def new_sample(self) -> int:
        sid = self.sample_counter
        self.sample_counter += 1
        dur = self.workload.rollout_duration.sample(self.seed, sid)
        self.samples[sid] = SampleRecord(sid, dur)
        return sid

    def note_phase(self, t: float, label: str) -> None:
        if label == self._phase_label:
            return
        if self._phase_label:
            self.phase_windows.append((self._phase_started, t, self._phase_label))
        self._phase_label = label
        self._phase_started = t

    def close_phase(self, t: float) -> None:
        if self._phase_label:
            self.phase_windows.append((self._phase_started, t, self._phase_label))
            self._phase_label = ""


def _simulate_off_policy_fill(cluster, workload, seed) -> SimResult:
    sim = _StreamSim(Strategy.OFF_POLICY_FILL, cluster, workload, seed)
    train_nodes = sorted(n for n, caps in sim.view.items() if "train" in caps)
    rollout_nodes = sorted(n for n, caps in sim.view.items() if "rollout" in caps)
    chunks = workload.effective_micro_batches()
    chunk_time = workload.train_duration / chunks
    per_chunk = _split_counts(workload.batch_size, chunks)

    # open-step consumption state
    claimed: list[int] = []
    chunk_index = 0
    chunk_busy_until = 0.0
    dispatch_t: float | None = None
    step_start: float | None = None
    step_version = 0

    def start_sample(node: str, t: float) -> None:
        sid = sim.new_sample()
        sim.running[node] = _Running(sid, t, sim.samples[sid].duration, sim.epoch)
        sim.rec.event(t, node, "sample_start", f"s{sid}", "rollout")
        sim.push(t + sim.samples[sid].duration, "sample_done", (node, sid))

    def try_consume(t: float) -> None:
        nonlocal chunk_index, chunk_busy_until, dispatch_t, step_start, claimed, step_version
        if sim.steps_done >= workload.num_steps:
            return
        # claim fresh-enough samples FIFO for the open step
        while sim.completed and len(claimed) < workload.batch_size:
            sid = sim.completed[0]
            lag = sim.version - sim.samples[sid].gen_version
            if lag > workload.staleness_limit:
                sim.completed.pop(0)
                sim.samples[sid].dropped = True
                sim.rec.event(t, "", "drop_stale", f"s{sid}", "train")
                continue
            if dispatch_t is None:
                dispatch_t = t
                step_start = None
                step_version = sim.version
            sim.completed.pop(0)
            claimed.append(sid)
        # run any gradient chunks whose samples have landed
        while chunk_index < chunks and len(claimed) >= sum(per_chunk[: chunk_index + 1]):
            start = max(t, chunk_busy_until)
            if step_start is None:
                step_start = start
            end = start + chunk_time
            for node in train_nodes:
                sim.rec.interval(node, start, end, "train", f"step{sim.steps_done}.c{chunk_index}")
            chunk_busy_until = end
            if chunk_index == chunks - 1:
                sim.push(end, "train_done", ())
            chunk_index += 1

    def on_train_done(t: float) -> None:
        nonlocal chunk_index, dispatch_t, step_start, claimed
        step = sim.steps_done
        for sid in claimed:
            s = sim.samples[sid]
            s.trained_step = step
            s.lag = step_version - s.gen_version
        sim.steps.append(
            StepRecord(
                step=step,
                dispatch_t=dispatch_t if dispatch_t is not None else t,
                start_t=step_start if step_start is not None else t,
                end_t=t,
                batch=list(claimed),
                lags=[sim.samples[sid].lag for sid in claimed],
                policy_version=step_version,
            )
        )
        sim.rec.event(t, train_nodes[0], "train_done", f"step{step}", "train")
        sim.steps_done += 1
        sim.version += 1
        claimed = []
        chunk_index = 0
        dispatch_t = None
        step_start = None
        if sim.steps_done < workload.num_steps:
            try_consume(t)

    for node in rollout_nodes:
        start_sample(node, 0.0)
    try_consume(0.0)  # degenerate zero-duration workloads

    while sim.heap and sim.steps_done < workload.num_steps:
        t, _, kind, data = heappop(sim.heap)
        if kind == "sample_done":
            node, sid = data
            run = sim.running.get(node)
            if run is None or run.sample_id != sid:
                continue
            sim.rec.interval(node, run.start, t, "rollout", f"s{sid}")
            sim.rec.event(t, node, "sample_done", f"s{sid}", "rollout")
            record = sim.samples[sid]
            record.completed_t = t
            record.gen_version = sim.version
            record.in_update_window = sim.training
            sim.completed.append(sid)
            del sim.running[node]
            start_sample(node, t)  # continuous rollout: no idle gap
            try_consume(t)
        elif kind == "train_done":
            on_train_done(t)

    makespan = sim.makespan = sim.steps[-1].end_t if sim.steps else 0.0
    # truncate still-running rollout work at the makespan
    for node, run in sim.running.items():
        sim.rec.interval(node, run.start, makespan, "rollout", f"s{run.sample_id}")
    metrics = _metrics_from(
        Strategy.OFF_POLICY_FILL,
        seed,
        sim.view,
        sim.rec,
        makespan,
        sim.samples,
        sim.steps,
        workload.train_duration,
        rollout_window_end=makespan,
    )
    return SimResult(
        Strategy.OFF_POLICY_FILL, seed, metrics, sim.rec.trace, sim.steps, sim.samples, [],
        busy_intervals=[(b.node, b.start, b.end, b.kind, b.task) for b in sim.rec.busy],
    )


def _simulate_spatiotemporal(cluster, workload, seed) -> SimResult:
    """Routes every scheduling decision through the real tag scheduler."""
    sim = _StreamSim(Strategy.SPATIOTEMPORAL, cluster, workload, seed)
    sched = TagScheduler()
    for desc in cluster:
        sched.register(
            ResourceDescriptor(
                desc.resource_id,
                set(desc.capability_tags),
                peak_flops=desc.peak_flops,
                hbm_bandwidth=desc.hbm_bandwidth,
            )
        )
    controller = MultiplexingController(scheduler=sched)
    paused: list[tuple[int, float]] = []  # (sample_id, remaining), FIFO
    batch_claimed: list[int] = []
    train_started = 0.0
    dispatch_time = 0.0
    step_version = 0

    def label_now() -> str:
        rollout_active = len(sim.running)
        if sim.training and rollout_active:
            return "R||T"
        if sim.training:
            return "T"
        if rollout_active:
            return "R"
        return "idle"

    def start_rollout(node: str, t: float, cost: float) -> None:
        begin = t + cost
        if paused:
            sid, remaining = paused.pop(0)
            sim.rec.event(begin, node, "sample_resume", f"s{sid}", "rollout")
        else:
            sid = sim.new_sample()
            remaining = sim.samples[sid].duration
            sim.rec.event(begin, node, "sample_start", f"s{sid}", "rollout")
        sim.epoch += 1
        sim.running[node] = _Running(sid, begin, remaining, sim.epoch)
        sim.push(begin + remaining, "sample_done", (node, sid, sim.epoch))

    def pause_node(node: str, t: float) -> None:
        run = sim.running.pop(node, None)
        if run is None:
            return
        executed = t - run.start
        remaining = run.remaining - executed
        sim.rec.interval(node, run.start, t, "rollout", f"s{run.sample_id}")
        if remaining <= 1e-12:
            complete_sample(node, run.sample_id, t, record_interval=False)
            return
        sim.rec.event(t, node, "sample_preempt", f"s{run.sample_id}", "rollout")
        paused.append((run.sample_id, remaining))

    def complete_sample(node: str, sid: int, t: float, record_interval: bool = True) -> None:
        run = sim.running.pop(node, None)
        if record_interval and run is not None:
            sim.rec.interval(node, run.start, t, "rollout", f"s{sid}")
        sim.rec.event(t, node, "sample_done", f"s{sid}", "rollout")
        record = sim.samples[sid]
        record.completed_t = t
        record.gen_version = sim.version
        record.in_update_window = sim.training
        sim.completed.append(sid)

    def maybe_dispatch(t: float) -> None:
        nonlocal batch_claimed, train_started, dispatch_time, step_version
        if sim.training or sim.steps_done >= workload.num_steps:
            return
        if len(sim.completed) < workload.batch_size:
            return
        dispatch_time = t
        step_version = sim.version
        batch_claimed = sim.completed[: workload.batch_size]
        del sim.completed[: workload.batch_size]
        assignment = controller.on_threshold_reached()
        sim.training = True
        for node in assignment.preempted:
            pause_node(node, t)
        train_started = t + workload.transition_cost
        for node in assignment.resource_ids:
            sim.rec.interval(
                node, train_started, train_started + workload.train_duration, "train",
                f"step{sim.steps_done}",
            )
        sim.rec.event(train_started, assignment.resource_ids[0], "train_start", f"step{sim.steps_done}", "train")
        sim.push(train_started + workload.train_duration, "train_done", (list(assignment.resource_ids),))
        sim.note_phase(t, label_now())

    for node in controller.start():
        start_rollout(node, 0.0, 0.0)
    sim.note_phase(0.0, label_now())

    while sim.heap and sim.steps_done < workload.num_steps:
        t, _, kind, data = heappop(sim.heap)
        if kind == "sample_done":
            node, sid, epoch = data
            run = sim.running.get(node)
            if run is None or run.epoch != epoch:
                continue  # stale event from a preempted run
            complete_sample(node, sid, t)
            if node in sched.active(CapabilityTag.ROLLOUT):
                start_rollout(node, t, 0.0)
            maybe_dispatch(t)
            sim.note_phase(t, label_now())
        elif kind == "train_done":
            (train_node_ids,) = data
            step = sim.steps_done
            for sid in batch_claimed:
                s = sim.samples[sid]
                s.trained_step = step
                s.lag = step_version - s.gen_version
            sim.steps.append(
                StepRecord(
                    step=step,
                    dispatch_t=dispatch_time,
                    start_t=train_started,
                    end_t=t,
                    batch=list(batch_claimed),
                    lags=[sim.samples[sid].lag for sid in batch_claimed],
                    policy_version=step_version,
                )
            )
            sim.rec.event(t, train_node_ids[0], "train_done", f"step{step}", "train")
            sim.steps_done += 1
            sim.version += 1
            sim.training = False
            batch_claimed = []
            if sim.steps_done >= workload.num_steps:
                sim.makespan = t
                break
            for node in controller.on_train_complete():
                if node not in sim.running:
                    cost = workload.transition_cost if node in train_node_ids else 0.0
                    start_rollout(node, t, cost)
            maybe_dispatch(t)
            sim.note_phase(t, label_now())

    makespan = sim.makespan
    sim.close_phase(makespan)
    for node, run in sim.running.items():
        sim.rec.interval(node, run.start, makespan, "rollout", f"s{run.sample_id}")
    metrics = _metrics_from(
        Strategy.SPATIOTEMPORAL,
        seed,
        sim.view,
        sim.rec,
        makespan,
        sim.samples,
        sim.steps,
        workload.train_duration,
        rollout_window_end=makespan,
    )
    return SimResult(
        Strategy.SPATIOTEMPORAL, seed, metrics, sim.rec.trace, sim.steps, sim.samples,
        sim.phase_windows,
        busy_intervals=[(b.node, b.start, b.end, b.kind, b.task) for b in sim.rec.busy],
    )


def simulate(
    strategy: Strategy | str,
    cluster: Sequence[ResourceDescriptor],
    workload: Workload,
    seed: int,
) -> SimResult:
    """Run one strategy over a cluster and workload; deterministic per seed."""
    strategy = Strategy(strategy) if isinstance(strategy, str) else strategy
    if strategy in (Strategy.NAIVE, Strategy.MICRO_BATCH):
        return _simulate_batched(strategy, cluster, workload, seed)
    if strategy is Strategy.OFF_POLICY_FILL:
        return _simulate_off_policy_fill(cluster, workload, seed)
    return _simulate_spatiotemporal(cluster, workload, seed)


@dataclass
class CompareReport:
    rows: list[SimMetrics]
    dominance_ok: bool

    def ranked(self) -> list[SimMetrics]:
        return sorted(self.rows, key=lambda m: m.bubble_fraction)

    def to_records(self) -> list[dict]:
        return [m.to_record() for m in self.ranked()]

    def table(self) -> str:
        header = f"{'strategy':<18} {'bubble':>10} {'train_bubble':>13} {'makespan':>12} {'mean_lag':>9}"
        lines = [header, "-" * len(header)]
        for m in self.ranked():
            lines.append(
                f"{m.strategy:<18} {m.bubble_fraction:>10.4f} {m.train_bubble_fraction:>13.4f} "
                f"{m.makespan:>12.3f} {m.mean_staleness:>9.3f}"
            )
        return "\n".join(lines)


def compare(
    strategies: Sequence[Strategy | str],
    cluster: Sequence[ResourceDescriptor],
    workload: Workload,
    seed: int,
) -> CompareReport:
    """Run every strategy on identical inputs and rank by bubble fraction."""
    rows = [simulate(s, cluster, workload, seed).metrics for s in strategies]
    by_name = {m.strategy: m for m in rows}
    dominance_ok = True
    ours = by_name.get(Strategy.SPATIOTEMPORAL.value)
    if ours is not None:
        for name, m in by_name.items():
            if name != Strategy.SPATIOTEMPORAL.value and ours.bubble_fraction > m.bubble_fraction:
                dominance_ok = False
    return CompareReport(rows=rows, dominance_ok=dominance_ok)
