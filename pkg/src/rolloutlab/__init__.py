"""Desk-scale RL rollout infrastructure testbed.

A deterministic mock serving engine, a token-capture proxy with radix-tree
session storage, a pause/resume rollout controller, a tag-driven preemptive
scheduler, a streaming task dispatcher, and a pipeline-bubble simulator —
wired into one stack with an HTTP surface and CLI.
"""

from .core import (
    GenParams,
    SpanOrigin,
    TokenSpan,
    Trajectory,
    validate_trajectory,
)
from .engine import MockEngine, WaitSignal, next_token, oracle_generate
from .rollout import ControlEvent, RolloutManager
from .scheduler import CapabilityTag, MultiplexingController, ResourceDescriptor, TagScheduler
from .simulator import Strategy, Workload, compare, simulate
from .trajectory import TrajectoryManager

__all__ = [
    "CapabilityTag",
    "ControlEvent",
    "GenParams",
    "MockEngine",
    "MultiplexingController",
    "ResourceDescriptor",
    "RolloutManager",
    "SpanOrigin",
    "Strategy",
    "TagScheduler",
    "TokenSpan",
    "Trajectory",
    "TrajectoryManager",
    "WaitSignal",
    "Workload",
    "compare",
    "next_token",
    "oracle_generate",
    "simulate",
    "validate_trajectory",
]

__version__ = "0.1.0"
