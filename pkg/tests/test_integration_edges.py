"""Cross-module edges: timeouts, concurrency, ordering, snapshot ingestion."""

from __future__ import annotations

import json
import threading

import pytest

from rolloutlab.config import parse_cluster
from rolloutlab.core import GenParams
from rolloutlab.engine import MockEngine
from rolloutlab.rollout import ControlEvent, EventKind, RolloutManager, replay_event_log
from rolloutlab.scheduler import (
    CapabilityTag,
    MultiplexingController,
    ResourceDescriptor,
    TagScheduler,
)
from rolloutlab.simulator import DurationSpec, Strategy, Workload, simulate
from rolloutlab.trajectory import ProxyRetryableError, TrajectoryManager

R, T = CapabilityTag.ROLLOUT, CapabilityTag.TRAIN
VOCAB = 4096


def test_pending_request_times_out_as_retryable():
    # a switch that never completes: the long-duration hold gives up after
    # the configured timeout and surfaces a retryable proxy error
    engine = MockEngine(vocab_size=VOCAB)
    tm = TrajectoryManager(engine, pending_timeout=0.15, poll_interval=0.005)
    engine.begin_switch()
    with pytest.raises(ProxyRetryableError):
        tm.proxy_generate("s", [1], GenParams(max_new_tokens=4, seed=0))
    # the aborted request leaves no open state behind
    assert tm.extract_trajectories("s", include_partials=True) == []
    engine.complete_switch(1)
    out = tm.proxy_generate("s", [1], GenParams(max_new_tokens=4, seed=0))
    assert len(out) == 4


def test_default_timeout_is_ten_times_expected_switch_duration():
    engine = MockEngine(vocab_size=VOCAB)
    tm = TrajectoryManager(engine, expected_switch_duration=0.7)
    assert tm.pending_timeout == pytest.approx(7.0)


def test_concurrent_branched_turns_share_prefix_once():
    # test-time scaling: parallel continuations from one prefix, one session
    engine = MockEngine(vocab_size=VOCAB)
    rm = RolloutManager(engine)
    tm = TrajectoryManager(engine, control=rm, pending_timeout=5.0)
    prefix = list(range(50, 66))
    results: dict[int, list[int]] = {}

    def branch(seed):
        results[seed] = tm.proxy_generate(
            "scale", prefix, GenParams(max_new_tokens=8, seed=seed)
        )

    threads = [threading.Thread(target=branch, args=(seed,)) for seed in range(6)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(results) == 6
    distinct = {tuple(v) for v in results.values()}
    assert len(distinct) == 6
    stats = tm.storage_stats("scale")
    assert stats.naive_tokens == 6 * (16 + 8)
    # independent oracle: the trie holds one token per distinct prefix
    sequences = [tuple(prefix + results[s]) for s in results]
    distinct_prefixes = {seq[:i] for seq in sequences for i in range(1, len(seq) + 1)}
    assert stats.stored_tokens == len(distinct_prefixes)
    assert stats.stored_tokens <= 16 + 6 * 8
    trie = tm.trie_for("scale")
    assert trie.check_well_formed() == []
    got = {tuple(t.tokens) for t in tm.extract_trajectories("scale")}
    assert got == {tuple(prefix + results[s]) for s in results}


def test_preemption_pause_precedes_activation():
    # when the preemption event fires, the displaced resource must still be
    # rollout-active: pause causally precedes the train assignment
    observed: list[tuple[str, str | None]] = []
    sched = TagScheduler()

    def sink(event: ControlEvent):
        if event.kind is EventKind.TAG_TRANSITION:
            rid = event.payload["resources"][0]
            active = sched.descriptor(rid).active_tag
            observed.append((rid, active.value if active else None))

    sched.event_sink = sink
    sched.register(ResourceDescriptor("n0", {R, T}))
    sched.set_active("n0", R)
    assignment = sched.dispatch(T, 1)
    assert assignment.preempted == ["n0"]
    assert observed == [("n0", "rollout")]  # old role still active at event time
    assert sched.descriptor("n0").active_tag is T


def test_pool_snapshot_round_trips_into_the_simulator():
    sched = TagScheduler()
    for i in range(2):
        sched.register(ResourceDescriptor(f"d{i}", {R, T}, peak_flops=9e14, hbm_bandwidth=3e12))
    for i in range(2):
        sched.register(ResourceDescriptor(f"r{i}", {R}, peak_flops=4e14, hbm_bandwidth=3e12))
    lines = sched.pool_snapshot_lines().splitlines()
    cluster = parse_cluster([json.loads(line) for line in lines])
    wl = Workload(
        num_steps=4,
        rollout_duration=DurationSpec(kind="constant", value=2.0),
        train_duration=1.0,
        batch_size=2,
    )
    res = simulate(Strategy.SPATIOTEMPORAL, cluster, wl, 1)
    assert res.metrics.samples_trained == 8


def test_replay_is_deterministic_across_runs(tmp_path):
    engine = MockEngine(vocab_size=VOCAB)
    log = tmp_path / "events.ndjson"
    rm = RolloutManager(engine, event_log_path=str(log))
    rm.handle(ControlEvent.threshold_reached(4))
    rm.handle(ControlEvent.weight_sync(1))
    rm.close()
    data = log.read_bytes()
    first = replay_event_log(data)
    second = replay_event_log(data)
    assert first.to_record() == second.to_record()


def test_controller_event_adapter():
    # the controller consumes raw trigger events as well as direct calls
    sched = TagScheduler()
    for i in range(2):
        sched.register(ResourceDescriptor(f"n{i}", {R, T}))
    ctrl = MultiplexingController(scheduler=sched)
    ctrl.start()
    ctrl.handle_event(ControlEvent.threshold_reached(2))
    assert ctrl.in_update_window()
    ctrl.handle_event(ControlEvent.tag_transition(["n0"], "rollout"))
    assert not ctrl.in_update_window()
    assert len(sched.active(R)) == 2
