"""Engine behavior: determinism, interrupts, switches, resume semantics."""

from __future__ import annotations

import hashlib
import struct
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rolloutlab.core import GenParams, InvalidParamsError
from rolloutlab.engine import (
    BudgetExhaustedError,
    EnginePhase,
    IllegalPhaseError,
    MockEngine,
    StepOutcome,
    VersionRegressionError,
    WaitSignal,
    next_token,
)

VOCAB = 4096


def oracle_next(ctx, seed, version, vocab=VOCAB):
    """Local reimplementation of the token recurrence, independent of engine.py."""
    h = hashlib.sha256()
    h.update(b"tokgen1")
    h.update(struct.pack("<q", seed))
    h.update(struct.pack("<I", version))
    h.update(struct.pack("<I", len(ctx)))
    for t in ctx:
        h.update(struct.pack("<I", t))
    return int.from_bytes(h.digest()[:8], "big") % vocab


def oracle_run(inp, seed, version, n, prefix=()):
    out = list(prefix)
    while len(out) < n:
        out.append(oracle_next(list(inp) + out, seed, version))
    return out[len(prefix):]


@pytest.fixture
def engine():
    return MockEngine(vocab_size=VOCAB)


class TestDeterminism:
    # Frozen via the local oracle above.
    S_V0 = [4037, 2817, 2147, 3737, 3615, 3838, 2964, 2384]
    S_V1 = [572, 2994, 3703, 2183, 203, 1762, 2946, 1444]

    def test_fixed_sequence(self, engine):
        res = engine.generate([1, 2, 3], GenParams(max_new_tokens=8, seed=7))
        assert res.output_tokens == self.S_V0
        assert res.finished
        assert res.version_per_token == [0] * 8

    def test_identical_calls_identical_outputs(self, engine):
        a = engine.generate([1, 2, 3], GenParams(max_new_tokens=8, seed=7))
        b = engine.generate([1, 2, 3], GenParams(max_new_tokens=8, seed=7))
        assert a.output_tokens == b.output_tokens == self.S_V0

    def test_version_changes_output(self, engine):
        engine.begin_switch()
        engine.complete_switch(1)
        res = engine.generate([1, 2, 3], GenParams(max_new_tokens=8, seed=7))
        assert res.output_tokens == self.S_V1

    def test_next_token_matches_local_oracle(self):
        for ctx in ([], [0], [1, 2, 3], list(range(50))):
            for seed in (-3, 0, 7, 2**40):
                for version in (0, 1, 9):
                    assert next_token(ctx, seed, version, VOCAB) == oracle_next(ctx, seed, version)

    @given(
        inp=st.lists(st.integers(0, VOCAB - 1), min_size=1, max_size=8),
        seed=st.integers(-(2**31), 2**31),
        n=st.integers(1, 24),
    )
    @settings(max_examples=40, deadline=None)
    def test_generate_matches_oracle(self, inp, seed, n):
        engine = MockEngine(vocab_size=VOCAB)
        res = engine.generate(inp, GenParams(max_new_tokens=n, seed=seed))
        assert res.output_tokens == oracle_run(inp, seed, 0, n)


class TestParamsAndStop:
    def test_zero_max_new_tokens_rejected(self, engine):
        with pytest.raises(InvalidParamsError):
            engine.generate([1], GenParams(max_new_tokens=0, seed=0))

    def test_stop_condition_halts_generation(self, engine):
        free = engine.generate([9, 9], GenParams(max_new_tokens=6, seed=3))
        stop = free.output_tokens[2]
        res = engine.generate([9, 9], GenParams(max_new_tokens=6, seed=3, stop_condition=stop))
        assert res.output_tokens == free.output_tokens[:3]
        assert res.finished


class TestInterrupt:
    def test_interrupt_nothing_is_empty(self, engine):
        assert engine.interrupt() == []

    def test_interrupt_after_k_tokens(self, engine):
        k = 4

        def hook(job_id, pos):
            if pos == k:
                engine.interrupt()

        engine.step_hook = hook
        res = engine.generate([5], GenParams(max_new_tokens=10, seed=7))
        assert not res.finished
        assert len(res.output_tokens) == k
        assert res.output_tokens == oracle_run([5], 7, 0, 10)[:k]
        assert res.version_per_token == [0] * k
        assert engine.in_flight_ids() == []

    def test_interrupt_three_concurrent_jobs(self, engine):
        ids = [
            engine.start_job([i], GenParams(max_new_tokens=10, seed=i), request_id=f"r{i}")
            for i in range(3)
        ]
        for job_id in ids:
            engine.step_job(job_id)
            engine.step_job(job_id)
        partials = engine.interrupt()
        assert {p.job_id for p in partials} == set(ids)
        for p in partials:
            assert len(p.output_tokens) == 2
        for job_id in ids:
            assert engine.step_job(job_id) is StepOutcome.INTERRUPTED
            engine.finish_job(job_id)


class TestSwitch:
    def test_happy_path(self, engine):
        engine.begin_switch()
        state = engine.complete_switch(1)
        assert state.phase is EnginePhase.SERVING
        assert state.current_version == 1

    def test_version_regression_rejected(self, engine):
        engine.begin_switch()
        with pytest.raises(VersionRegressionError):
            engine.complete_switch(0)

    def test_illegal_phase_transitions(self, engine):
        with pytest.raises(IllegalPhaseError):
            engine.complete_switch(1)
        engine.begin_switch()
        with pytest.raises(IllegalPhaseError):
            engine.begin_switch()

    def test_wait_signal_while_switching(self, engine):
        engine.begin_switch()
        with pytest.raises(WaitSignal) as exc:
            engine.generate([1], GenParams(max_new_tokens=4, seed=0))
        assert exc.value.switch_id == engine.state.switch_id
        engine.complete_switch(1)
        res = engine.generate([1], GenParams(max_new_tokens=4, seed=0))
        assert res.finished

    def test_begin_switch_interrupts_in_flight(self, engine):
        job = engine.start_job([1], GenParams(max_new_tokens=6, seed=0))
        engine.step_job(job)
        engine.begin_switch()
        assert engine.step_job(job) is StepOutcome.INTERRUPTED
        res = engine.finish_job(job)
        assert not res.finished
        assert len(res.output_tokens) == 1

    def test_no_tokens_produced_during_switch_window(self, engine):
        # Wait-completeness: every request either errors with wait or runs
        # entirely outside the switch window.
        job = engine.start_job([2], GenParams(max_new_tokens=8, seed=1))
        engine.begin_switch()
        assert engine.step_job(job) is StepOutcome.INTERRUPTED
        engine.finish_job(job)
        with pytest.raises(WaitSignal):
            engine.start_job([2], GenParams(max_new_tokens=8, seed=1))
        engine.complete_switch(1)
        res = engine.generate([2], GenParams(max_new_tokens=8, seed=1))
        assert len(res.output_tokens) == 8


class TestResume:
    FULL_V0 = [2842, 3194, 379, 355, 2388, 3269, 2388, 1921, 3027, 2323]
    RESUMED_V1_TAIL = [1042, 764, 2208, 823, 2072, 98]

    def test_empty_prefix_is_generate(self, engine):
        a = engine.generate([4, 4], GenParams(max_new_tokens=5, seed=2))
        b = engine.resume_from([], [4, 4], GenParams(max_new_tokens=5, seed=2))
        assert a.output_tokens == b.output_tokens

    def test_resume_same_version_bit_exact(self, engine):
        params = GenParams(max_new_tokens=10, seed=7)
        full = engine.generate([5], params)
        assert full.output_tokens == self.FULL_V0
        tail = engine.resume_from(full.output_tokens[:4], [5], params)
        assert full.output_tokens[:4] + tail.output_tokens == self.FULL_V0

    def test_resume_after_switch_diverges_at_first_new_position(self, engine):
        params = GenParams(max_new_tokens=10, seed=7)
        prefix = self.FULL_V0[:4]
        engine.begin_switch()
        engine.complete_switch(1)
        tail = engine.resume_from(prefix, [5], params)
        assert tail.output_tokens == self.RESUMED_V1_TAIL
        assert tail.output_tokens[0] != self.FULL_V0[4]
        assert len(tail.output_tokens) == 6
        assert tail.version_per_token == [1] * 6

    def test_budget_exhausted(self, engine):
        with pytest.raises(BudgetExhaustedError):
            engine.resume_from([1, 2, 3], [9], GenParams(max_new_tokens=3, seed=0))

    @given(k=st.integers(0, 11), seed=st.integers(0, 10_000))
    @settings(max_examples=60, deadline=None)
    def test_resume_identity_property(self, k, seed):
        # Interrupt-then-resume under an unchanged version equals the
        # uninterrupted run for every interrupt position.
        engine = MockEngine(vocab_size=VOCAB)
        params = GenParams(max_new_tokens=12, seed=seed)
        baseline = engine.generate([7, 1], params).output_tokens

        fresh = MockEngine(vocab_size=VOCAB)

        def hook(job_id, pos):
            if pos == k:
                fresh.interrupt()

        fresh.step_hook = hook
        part = fresh.generate([7, 1], params)
        fresh.step_hook = None
        assert part.output_tokens == baseline[:k]
        if k == 0:
            assert not part.finished
        if len(part.output_tokens) < 12:
            tail = fresh.resume_from(part.output_tokens, [7, 1], params)
            assert part.output_tokens + tail.output_tokens == baseline


class TestOracleLog:
    def test_legs_share_request_id(self, engine):
        params = GenParams(max_new_tokens=6, seed=3)

        def hook(job_id, pos):
            if pos == 2:
                engine.interrupt()

        engine.step_hook = hook
        part = engine.generate([8], params, request_id="req-a")
        engine.step_hook = None
        engine.resume_from(part.output_tokens, [8], params, request_id="req-a")
        legs = engine.oracle_log("req-a")
        assert len(legs) == 2
        assert not legs[0].finished and legs[1].finished
        joined = legs[0].output_tokens + legs[1].output_tokens
        assert joined == oracle_run([8], 3, 0, 6)


def test_concurrent_generates_are_isolated():
    engine = MockEngine(vocab_size=VOCAB)
    results = {}

    def worker(i):
        results[i] = engine.generate([i], GenParams(max_new_tokens=16, seed=i))

    threads = [threading.Thread(target=worker, args=(i,)) for i in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for i in range(8):
        assert results[i].output_tokens == oracle_run([i], i, 0, 16)
