"""HTTP schema conformance: endpoints, status codes, wait-signal mapping."""

from __future__ import annotations

import threading
import time

import pytest
from fastapi.testclient import TestClient

from rolloutlab.api import build_app
from rolloutlab.runtime import Stack, StackConfig
from rolloutlab.scheduler import CapabilityTag, ResourceDescriptor

R, T = CapabilityTag.ROLLOUT, CapabilityTag.TRAIN


@pytest.fixture
def client():
    cfg = StackConfig(
        cluster=[
            ResourceDescriptor("d0", {R, T}, peak_flops=9e14, hbm_bandwidth=3e12),
            ResourceDescriptor("r0", {R}, peak_flops=4e14, hbm_bandwidth=3e12),
        ],
        pending_timeout=5.0,
    )
    stack = Stack.build(cfg)
    with TestClient(build_app(stack)) as c:
        c.stack = stack
        yield c


def test_healthz_lists_services(client):
    body = client.get("/healthz").json()
    assert body["ready"] is True
    assert list(body["services"]) == [
        "engine",
        "rollout-manager",
        "trajectory-manager",
        "scheduler",
        "dataloader",
    ]


class TestEngineEndpoints:
    def test_generate_roundtrip(self, client):
        r = client.post("/engine/generate", json={"tokens": [1, 2], "max_new_tokens": 4, "seed": 3})
        assert r.status_code == 200
        body = r.json()
        assert len(body["output_tokens"]) == 4
        assert body["finished"] is True
        again = client.post("/engine/generate", json={"tokens": [1, 2], "max_new_tokens": 4, "seed": 3})
        assert again.json()["output_tokens"] == body["output_tokens"]

    def test_wait_signal_is_503_with_retry_after(self, client):
        assert client.post("/engine/control/begin_switch").status_code == 200
        r = client.post("/engine/generate", json={"tokens": [1], "max_new_tokens": 2})
        assert r.status_code == 503
        assert "Retry-After" in r.headers
        assert r.json()["error"] == "wait"
        assert client.post("/engine/control/complete_switch", json={"version": 1}).status_code == 200
        r = client.post("/engine/generate", json={"tokens": [1], "max_new_tokens": 2})
        assert r.status_code == 200

    def test_version_regression_is_409(self, client):
        client.post("/engine/control/begin_switch")
        r = client.post("/engine/control/complete_switch", json={"version": 0})
        assert r.status_code == 409

    def test_illegal_phase_is_409(self, client):
        r = client.post("/engine/control/complete_switch", json={"version": 5})
        assert r.status_code == 409

    def test_resume_continues_prefix(self, client):
        full = client.post(
            "/engine/generate", json={"tokens": [7], "max_new_tokens": 6, "seed": 1}
        ).json()["output_tokens"]
        tail = client.post(
            "/engine/resume",
            json={"prefix": full[:2], "tokens": [7], "max_new_tokens": 6, "seed": 1},
        ).json()["output_tokens"]
        assert full[:2] + tail == full

    def test_state_endpoint(self, client):
        body = client.get("/engine/state").json()
        assert body == {"phase": "serving", "version": 0, "switch_id": 0}

    def test_interrupt_idempotent(self, client):
        body = client.post("/engine/control/interrupt").json()
        assert body == {"partials": []}

    def test_invalid_params_is_400(self, client):
        r = client.post("/engine/generate", json={"tokens": [1], "max_new_tokens": 0})
        assert r.status_code == 400


class TestProxyEndpoints:
    def test_generate_with_body_session(self, client):
        r = client.post(
            "/v1/generate",
            json={"session_id": "s1", "tokens": [1, 2], "params": {"max_new_tokens": 4, "seed": 0}},
        )
        assert r.status_code == 200
        assert len(r.json()["tokens"]) == 4

    def test_header_session_alternative(self, client):
        r = client.post(
            "/v1/generate",
            json={"tokens": [3], "params": {"max_new_tokens": 3}},
            headers={"X-Session-Id": "hdr-sess"},
        )
        assert r.json()["session_id"] == "hdr-sess"
        stats = client.get("/traj/stats/hdr-sess")
        assert stats.status_code == 200

    def test_token_arrays_are_integers(self, client):
        r = client.post(
            "/v1/generate",
            json={"session_id": "s2", "tokens": [5], "params": {"max_new_tokens": 3}},
        )
        assert all(isinstance(t, int) for t in r.json()["tokens"])

    def test_proxy_held_across_switch(self, client):
        # issue the request while switching: the proxy must hold and complete
        client.post("/engine/control/begin_switch")

        done = {}

        def finish_switch():
            time.sleep(0.1)
            client.post("/engine/control/complete_switch", json={"version": 1})

        t = threading.Thread(target=finish_switch)
        t.start()
        r = client.post(
            "/v1/generate",
            json={"session_id": "sw", "tokens": [9], "params": {"max_new_tokens": 5}},
        )
        t.join()
        assert r.status_code == 200
        assert len(r.json()["tokens"]) == 5


class TestTrainerEndpoints:
    def test_drain_not_ready_then_ready(self, client):
        assert client.post("/traj/drain", json={"min_samples": 1}).json()["ready"] is False
        client.post("/v1/generate", json={"session_id": "s", "tokens": [1], "params": {"max_new_tokens": 2}})
        body = client.post("/traj/drain", json={"min_samples": 1}).json()
        assert body["ready"] is True
        assert len(body["trajectories"]) == 1
        rec = body["trajectories"][0]
        assert list(rec) == ["session_id", "tokens", "loss_mask", "versions"]

    def test_session_and_stats_404(self, client):
        assert client.get("/traj/session/ghost").status_code == 404
        assert client.get("/traj/stats/ghost").status_code == 404

    def test_export_lines(self, client):
        client.post("/v1/generate", json={"session_id": "e1", "tokens": [1], "params": {"max_new_tokens": 2}})
        r = client.get("/traj/export")
        assert r.status_code == 200
        lines = [l for l in r.text.splitlines() if l]
        assert len(lines) == 1
        assert lines[0].startswith('{"session_id":"e1"')


class TestControlEndpoints:
    def test_update_and_state(self, client):
        r = client.post("/ctl/update", json={"version": 1})
        assert r.status_code == 200
        assert r.json()["new_version"] == 1
        state = client.get("/ctl/state").json()
        assert state["version"] == 1

    def test_stale_update_is_409(self, client):
        client.post("/ctl/update", json={"version": 1})
        assert client.post("/ctl/update", json={"version": 1}).status_code == 409

    def test_event_injection(self, client):
        r = client.post("/ctl/event", json={"kind": "weight_sync", "payload": {"version": 1}})
        assert r.status_code == 200
        kinds = [c["kind"] for c in r.json()["commands"]]
        assert kinds == [
            "pause_rollouts",
            "begin_engine_switch",
            "complete_engine_switch",
            "resume_rollouts",
        ]


class TestSchedulerEndpoints:
    def test_register_query_dispatch_fail(self, client):
        client.post("/sched/register", json={"id": "x0", "tags": ["rollout", "train"]})
        pool = client.get("/sched/pool").json()["resources"]
        assert any(r["resource_id"] == "x0" for r in pool)
        r = client.post("/sched/dispatch", json={"task_kind": "train", "count": 1})
        assert r.status_code == 200
        assert r.json()["resource_ids"]
        r = client.post("/sched/fail", json={"resource_id": "x0"})
        assert r.status_code == 200
        assert client.post("/sched/fail", json={"resource_id": "x0"}).status_code == 404

    def test_insufficient_capability_is_409(self, client):
        r = client.post("/sched/dispatch", json={"task_kind": "reward", "count": 1})
        assert r.status_code == 409

    def test_pool_lines_format(self, client):
        r = client.get("/sched/pool", params={"format": "lines"})
        lines = [l for l in r.text.splitlines() if l]
        assert len(lines) == 2  # the two fixture nodes


class TestDataEndpoints:
    def test_next_complete_requeue_cycle(self, client):
        loader = client.stack.dataloader
        from rolloutlab.dataloader import TaskRecord

        loader.add_task(TaskRecord("t1", [1, 2]))
        got = client.get("/data/next", params={"capacity": 2}).json()["tasks"]
        assert [t["task_id"] for t in got] == ["t1"]
        assert client.post("/data/requeue", json={"task_id": "t1"}).status_code == 200
        got = client.get("/data/next", params={"capacity": 1}).json()["tasks"]
        assert [t["task_id"] for t in got] == ["t1"]
        assert client.post("/data/complete", json={"task_id": "t1"}).status_code == 200
        assert client.post("/data/complete", json={"task_id": "t1"}).status_code == 409

    def test_unknown_task_404(self, client):
        assert client.post("/data/complete", json={"task_id": "ghost"}).status_code == 404
