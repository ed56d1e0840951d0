"""Operator entry point: serve the stack, run simulations, replay event logs.

Settings resolve flag > environment (ROLLOUTLAB_*) > config file. Commands
exit nonzero on invalid input, port conflicts, corrupt logs, or a failed
dominance assertion.
"""

from __future__ import annotations

import json
import socket
import sys
from pathlib import Path

import click

from .config import (
    ConfigError,
    canonical_scenario_record,
    load_json_file,
    parse_scenario,
    parse_serve_config,
    resolve_setting,
)
from .rollout import LogCorruptError, replay_event_log
from .runtime import Stack, TrainerLoop, WorkerPool
from .simulator import IncompatibleTaggingError, compare, simulate


@click.group()
def main() -> None:
    """Desk-scale rollout infrastructure testbed."""


def _load_scenario(scenario_path: str | None, seed_flag: int | None):
    path = resolve_setting(scenario_path, "SCENARIO")
    if path is None:
        raise click.UsageError("a scenario file is required (--scenario or ROLLOUTLAB_SCENARIO)")
    scenario = parse_scenario(load_json_file(path))
    seed_override = resolve_setting(seed_flag, "SEED")
    if seed_override is not None:
        scenario.seed = int(seed_override)
        scenario.seeds = [scenario.seed]
    return scenario


def _out_dir(out_dir_flag: str | None) -> Path:
    out = Path(resolve_setting(out_dir_flag, "OUT_DIR", "out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None, help="serve config JSON")
def serve(config_path: str | None) -> None:
    """Run the integrated stack behind one HTTP port."""
    import uvicorn

    from .api import build_app

    path = resolve_setting(config_path, "CONFIG")
    if path is None:
        raise click.UsageError("a config file is required (--config or ROLLOUTLAB_CONFIG)")
    try:
        cfg = parse_serve_config(load_json_file(path))
    except ConfigError as exc:
        click.echo(f"config-invalid: {exc}", err=True)
        sys.exit(2)

    # fail fast on occupied ports, before any service starts
    probe = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    try:
        probe.bind((cfg.host, cfg.port))
    except OSError:
        click.echo(f"port-conflict: {cfg.host}:{cfg.port} is in use", err=True)
        sys.exit(3)
    finally:
        probe.close()

    stack = Stack.build(cfg.stack)
    if cfg.task_source:
        count = stack.dataloader.load(cfg.task_source)
        click.echo(f"loaded {count} tasks from {cfg.task_source}")
    for service in stack.startup_order:
        click.echo(f"ready: {service}")

    trainer = TrainerLoop(stack)
    pool = WorkerPool(stack)
    trainer.start()
    pool.start()
    app = build_app(stack)
    click.echo(f"serving on http://{cfg.host}:{cfg.port}")
    try:
        uvicorn.run(app, host=cfg.host, port=cfg.port, log_level="warning")
    finally:
        trainer.stop()
        pool.stop()
        stack.shutdown()


@main.command("simulate")
@click.option("--scenario", "scenario_path", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out-dir", "out_dir_flag", type=click.Path(), default=None)
def cmd_simulate(scenario_path: str | None, seed: int | None, out_dir_flag: str | None) -> None:
    """Run one strategy over a scenario; write metrics and the event trace."""
    try:
        scenario = _load_scenario(scenario_path, seed)
        result = simulate(scenario.strategy, scenario.cluster, scenario.workload, scenario.seed)
    except (ConfigError, IncompatibleTaggingError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    out = _out_dir(out_dir_flag)
    metrics_path = out / f"metrics_{scenario.strategy.value}_seed{scenario.seed}.ndjson"
    trace_path = out / f"trace_{scenario.strategy.value}_seed{scenario.seed}.ndjson"
    metrics_path.write_text(json.dumps(result.metrics.to_record(), sort_keys=True) + "\n")
    trace_path.write_text(
        "".join(json.dumps(e, sort_keys=True) + "\n" for e in result.trace)
    )
    click.echo(json.dumps(result.metrics.to_record(), sort_keys=True))
    click.echo(f"wrote {metrics_path} and {trace_path}")


@main.command("compare")
@click.option("--scenario", "scenario_path", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out-dir", "out_dir_flag", type=click.Path(), default=None)
@click.option("--assert-dominance", is_flag=True, default=False)
def cmd_compare(
    scenario_path: str | None,
    seed: int | None,
    out_dir_flag: str | None,
    assert_dominance: bool,
) -> None:
    """Run all strategies on identical inputs and rank them."""
    try:
        scenario = _load_scenario(scenario_path, seed)
    except ConfigError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    out = _out_dir(out_dir_flag)
    all_ok = True
    records = []
    for run_seed in scenario.seeds:
        try:
            report = compare(scenario.strategies, scenario.cluster, scenario.workload, run_seed)
        except IncompatibleTaggingError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(2)
        click.echo(f"seed {run_seed}")
        click.echo(report.table())
        records.extend(report.to_records())
        all_ok = all_ok and report.dominance_ok
    out_path = out / "compare.ndjson"
    out_path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    click.echo(f"wrote {out_path}")
    if assert_dominance:
        if all_ok:
            click.echo("dominance: ok")
        else:
            click.echo("dominance: FAILED", err=True)
            sys.exit(1)


@main.command("replay")
@click.option("--log", "log_path", type=click.Path(exists=True), required=True)
@click.option("--snapshot", "snapshot_path", type=click.Path(exists=True), default=None)
def cmd_replay(log_path: str, snapshot_path: str | None) -> None:
    """Re-drive rollout-manager planning over a persisted event log."""
    recorded = None
    if snapshot_path:
        recorded = json.loads(Path(snapshot_path).read_text())
    try:
        report = replay_event_log(Path(log_path).read_bytes(), recorded_final=recorded)
    except LogCorruptError as exc:
        click.echo(f"log-corrupt: {exc}", err=True)
        sys.exit(2)
    click.echo(json.dumps(report.to_record(), sort_keys=True))
    if report.divergences:
        click.echo("divergence detected", err=True)
        sys.exit(1)


@main.command("export-traj")
@click.option("--server", "server_url", required=True, help="base URL of a running stack")
@click.option("--session", "session_id", default=None)
@click.option("--out", "out_path", type=click.Path(), required=True)
def cmd_export_traj(server_url: str, session_id: str | None, out_path: str) -> None:
    """Fetch trajectories in the canonical line format and write them to a file."""
    import httpx

    url = (
        f"{server_url.rstrip('/')}/traj/export"
        if session_id is None
        else f"{server_url.rstrip('/')}/traj/session/{session_id}"
    )
    resp = httpx.get(url, timeout=30.0)
    resp.raise_for_status()
    if session_id is None:
        Path(out_path).write_text(resp.text)
    else:
        from .core import trajectory_from_record, trajectory_to_line

        recs = resp.json()["trajectories"]
        lines = "".join(trajectory_to_line(trajectory_from_record(r)) + "\n" for r in recs)
        Path(out_path).write_text(lines)
    click.echo(f"wrote {out_path}")


@main.command("init-scenario")
@click.option("--out", "out_path", type=click.Path(), default="scenario.json")
def cmd_init_scenario(out_path: str) -> None:
    """Write the canonical 4:1 mixed-tagging scenario to a file."""
    Path(out_path).write_text(json.dumps(canonical_scenario_record(), indent=2) + "\n")
    click.echo(f"wrote {out_path}")


if __name__ == "__main__":
    main()
