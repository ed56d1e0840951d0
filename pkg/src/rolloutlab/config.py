"""Config and scenario files: one self-describing versioned JSON document each.

Serve config (schema_version 1):

    {
      "schema_version": 1,
      "cluster":   [{"id": "d0", "tags": ["rollout", "train"],
                     "peak_flops": 9.89e14, "hbm_bandwidth": 3.35e12}, ...],
      "engine":    {"vocab_size": 4096, "step_delay": 0.0},
      "thresholds": {"batch_size": 4, "timeout_ticks": null},
      "trainer":   {"train_duration": 0.05, "train_ticks": 8, "max_updates": null},
      "generation": {"max_new_tokens": 16, "seed": 0},
      "proxy":     {"pending_timeout": 30.0},
      "dataloader": {"source": "tasks.ndjson"},
      "server":    {"host": "127.0.0.1", "port": 8775}
    }

Scenario (simulate/compare) carries cluster, workload, strategy or
strategies, seed. Settings resolve flag > environment > file.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Any

from .runtime import StackConfig
from .scheduler import CapabilityTag, ResourceDescriptor
from .simulator import DurationSpec, Strategy, Workload

ENV_PREFIX = "ROLLOUTLAB"


class ConfigError(ValueError):
    """Invalid config; ``field`` is the dotted path of the offending entry."""

    def __init__(self, field_path: str, detail: str):
        super().__init__(f"config field '{field_path}': {detail}")
        self.field_path = field_path


def load_json_file(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(path, "file not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(path, f"not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(path, "top level must be an object")
    return raw


def _require(raw: dict, key: str, parent: str = "") -> Any:
    if key not in raw:
        path = f"{parent}.{key}" if parent else key
        raise ConfigError(path, "missing")
    return raw[key]


def _get(raw: dict, key: str, default: Any) -> Any:
    return raw.get(key, default)


def parse_cluster(raw: Any, parent: str = "cluster") -> list[ResourceDescriptor]:
    if not isinstance(raw, list) or not raw:
        raise ConfigError(parent, "must be a non-empty array of resource records")
    out: list[ResourceDescriptor] = []
    seen: set[str] = set()
    for i, rec in enumerate(raw):
        path = f"{parent}[{i}]"
        if not isinstance(rec, dict):
            raise ConfigError(path, "must be an object")
        rid = str(_require(rec, "id", path) if "id" in rec else _require(rec, "resource_id", path))
        if rid in seen:
            raise ConfigError(f"{path}.id", f"duplicate resource id {rid!r}")
        seen.add(rid)
        tags_raw = _require(rec, "tags", path)
        try:
            tags = {CapabilityTag(t) for t in tags_raw}
        except ValueError as exc:
            raise ConfigError(f"{path}.tags", str(exc)) from None
        if not tags:
            raise ConfigError(f"{path}.tags", "must be non-empty")
        try:
            out.append(
                ResourceDescriptor(
                    rid,
                    tags,
                    peak_flops=float(_get(rec, "peak_flops", 1.0e12)),
                    hbm_bandwidth=float(_get(rec, "hbm_bandwidth", 1.0e12)),
                )
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(path, str(exc)) from None
    return out


@dataclass
class ServeConfig:
    stack: StackConfig
    host: str = "127.0.0.1"
    port: int = 8775
    task_source: str | None = None


def parse_serve_config(raw: dict) -> ServeConfig:
    version = _require(raw, "schema_version")
    if version != 1:
        raise ConfigError("schema_version", f"unsupported version {version!r}")
    cluster = parse_cluster(_require(raw, "cluster"))

    engine = _get(raw, "engine", {})
    thresholds = _get(raw, "thresholds", {})
    trainer = _get(raw, "trainer", {})
    generation = _get(raw, "generation", {})
    proxy = _get(raw, "proxy", {})
    server = _get(raw, "server", {})
    dataloader = _get(raw, "dataloader", {})

    def positive_int(section: dict, key: str, default: int, path: str) -> int:
        value = _get(section, key, default)
        if not isinstance(value, int) or value < 1:
            raise ConfigError(path, f"must be a positive integer, got {value!r}")
        return value

    stack = StackConfig(
        cluster=cluster,
        vocab_size=positive_int(engine, "vocab_size", 4096, "engine.vocab_size"),
        engine_step_delay=float(_get(engine, "step_delay", 0.0)),
        batch_size=positive_int(thresholds, "batch_size", 4, "thresholds.batch_size"),
        batch_timeout_ticks=_get(thresholds, "timeout_ticks", None),
        train_duration=float(_get(trainer, "train_duration", 0.05)),
        train_ticks=positive_int(trainer, "train_ticks", 8, "trainer.train_ticks"),
        max_updates=_get(trainer, "max_updates", None),
        max_new_tokens=positive_int(generation, "max_new_tokens", 16, "generation.max_new_tokens"),
        gen_seed=int(_get(generation, "seed", 0)),
        pending_timeout=float(_get(proxy, "pending_timeout", 30.0)),
        event_log_path=_get(raw, "event_log", None),
    )
    port = _get(server, "port", 8775)
    if not isinstance(port, int) or not (0 < port < 65536):
        raise ConfigError("server.port", f"must be a valid port, got {port!r}")
    return ServeConfig(
        stack=stack,
        host=str(_get(server, "host", "127.0.0.1")),
        port=port,
        task_source=_get(dataloader, "source", None),
    )


@dataclass
class Scenario:
    cluster: list[ResourceDescriptor]
    workload: Workload
    strategy: Strategy
    strategies: list[Strategy]
    seed: int
    seeds: list[int] = field(default_factory=list)


def parse_scenario(raw: dict) -> Scenario:
    version = _require(raw, "schema_version")
    if version != 1:
        raise ConfigError("schema_version", f"unsupported version {version!r}")
    cluster = parse_cluster(_require(raw, "cluster"))
    wl_raw = _require(raw, "workload")
    if not isinstance(wl_raw, dict):
        raise ConfigError("workload", "must be an object")
    try:
        duration = DurationSpec.from_record(_require(wl_raw, "rollout_duration", "workload"))
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError("workload.rollout_duration", str(exc)) from None
    try:
        workload = Workload(
            num_steps=int(_require(wl_raw, "num_steps", "workload")),
            rollout_duration=duration,
            train_duration=float(_require(wl_raw, "train_duration", "workload")),
            batch_size=int(_require(wl_raw, "batch_size", "workload")),
            staleness_limit=int(_get(wl_raw, "staleness_limit", 1)),
            micro_batches=_get(wl_raw, "micro_batches", None),
            transition_cost=float(_get(wl_raw, "transition_cost", 0.0)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError("workload", str(exc)) from None

    try:
        strategy = Strategy(_get(raw, "strategy", "spatiotemporal"))
        strategies = [Strategy(s) for s in _get(raw, "strategies", [s.value for s in Strategy])]
    except ValueError as exc:
        raise ConfigError("strategy", str(exc)) from None
    seed = int(_get(raw, "seed", 0))
    seeds = [int(s) for s in _get(raw, "seeds", [])]
    return Scenario(
        cluster=cluster,
        workload=workload,
        strategy=strategy,
        strategies=strategies,
        seed=seed,
        seeds=seeds or [seed],
    )


def resolve_setting(flag_value: Any, env_name: str, file_value: Any = None) -> Any:
    """Precedence: command-line flag > environment variable > config file."""
    if flag_value is not None:
        return flag_value
    env = os.environ.get(f"{ENV_PREFIX}_{env_name}")
    if env is not None and env != "":
        return env
    return file_value


def canonical_scenario_record() -> dict:
    """The 4:1 rollout:train scenario on the 8-node mixed-tag pool."""
    cluster = [
        {"id": f"d{i}", "tags": ["rollout", "train"], "peak_flops": 9.89e14, "hbm_bandwidth": 3.35e12}
        for i in range(4)
    ] + [
        {"id": f"r{i}", "tags": ["rollout"], "peak_flops": 4.0e14, "hbm_bandwidth": 3.35e12}
        for i in range(4)
    ]
    return {
        "schema_version": 1,
        "cluster": cluster,
        "workload": {
            "num_steps": 50,
            "rollout_duration": {"kind": "uniform", "low": 3.8, "high": 4.2},
            "train_duration": 1.0,
            "batch_size": 4,
            "staleness_limit": 1,
            "micro_batches": 4,
            "transition_cost": 0.0,
        },
        "strategy": "spatiotemporal",
        "strategies": [s.value for s in Strategy],
        "seed": 1,
        "seeds": [1, 2, 3, 4, 5],
    }
