"""Shared domain types: token spans, trajectories, validation, serialization.

Everything downstream (engine, proxy, scheduler, simulator) exchanges data
through these value types. They are plain immutable-ish dataclasses with no
shared mutable state, safe to pass between threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Iterator

TokenId = int
ModelVersion = int


class SpanOrigin(Enum):
    AGENT_INPUT = "agent_input"
    MODEL_OUTPUT = "model_output"


@dataclass(frozen=True)
class TokenSpan:
    """A contiguous run of tokens with a single origin.

    ``version`` is the model version that produced the tokens for
    model_output spans; for agent_input spans it records the version current
    at request time (bookkeeping only, never trainable).
    """

    tokens: tuple[TokenId, ...]
    origin: SpanOrigin
    version: ModelVersion = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "tokens", tuple(self.tokens))

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class GenParams:
    """Generation request parameters."""

    max_new_tokens: int
    seed: int = 0
    stop_condition: TokenId | None = None

    def validate(self) -> None:
        if self.max_new_tokens < 1:
            raise InvalidParamsError(f"max_new_tokens must be >= 1, got {self.max_new_tokens}")


class InvalidParamsError(ValueError):
    pass


@dataclass
class Trajectory:
    """One training sample: ordered spans plus per-token mask and version tags.

    ``loss_mask[i]`` is True exactly when token i was produced by the model
    (model_output origin); ``version_tags[i]`` is the model version attached
    to token i. Both arrays cover the concatenation of all spans.
    """

    session_id: str
    spans: list[TokenSpan] = field(default_factory=list)
    loss_mask: list[bool] = field(default_factory=list)
    version_tags: list[ModelVersion] = field(default_factory=list)

    @property
    def tokens(self) -> list[TokenId]:
        out: list[TokenId] = []
        for span in self.spans:
            out.extend(span.tokens)
        return out

    def __len__(self) -> int:
        return sum(len(s) for s in self.spans)

    def max_version(self) -> ModelVersion:
        return max(self.version_tags) if self.version_tags else 0

    @classmethod
    def from_spans(cls, session_id: str, spans: Iterable[TokenSpan]) -> Trajectory:
        """Build a trajectory with mask and tags derived from span metadata."""
        spans = list(spans)
        mask: list[bool] = []
        tags: list[ModelVersion] = []
        for span in spans:
            trainable = span.origin is SpanOrigin.MODEL_OUTPUT
            mask.extend([trainable] * len(span))
            tags.extend([span.version] * len(span))
        return cls(session_id=session_id, spans=spans, loss_mask=mask, version_tags=tags)


def version_lag(traj: Trajectory, current_version: ModelVersion) -> int:
    """Steps between the newest policy and the newest token in the trajectory."""
    return current_version - traj.max_version()


def is_off_policy(traj: Trajectory, current_version: ModelVersion) -> bool:
    return version_lag(traj, current_version) >= 1


@dataclass
class ValidationReport:
    ok: bool
    violations: list[str] = field(default_factory=list)


def validate_trajectory(traj: Trajectory, *, vocab_size: int | None = None) -> ValidationReport:
    """Check every trajectory invariant; report each violation instead of raising."""
    violations: list[str] = []
    total = len(traj)

    if len(traj.loss_mask) != total:
        violations.append(f"loss_mask length {len(traj.loss_mask)} != token count {total}")
    if len(traj.version_tags) != total:
        violations.append(f"version_tags length {len(traj.version_tags)} != token count {total}")

    for i, span in enumerate(traj.spans):
        if len(span) == 0:
            violations.append(f"span {i} is empty")

    # Mask must be True exactly on model_output tokens.
    if len(traj.loss_mask) == total:
        pos = 0
        for i, span in enumerate(traj.spans):
            expect = span.origin is SpanOrigin.MODEL_OUTPUT
            for j in range(len(span)):
                if traj.loss_mask[pos + j] != expect:
                    violations.append(
                        f"loss_mask[{pos + j}] is {traj.loss_mask[pos + j]} but span {i} origin is {span.origin.value}"
                    )
                    break
            pos += len(span)

    if len(traj.version_tags) == total and any(
        a > b for a, b in zip(traj.version_tags, traj.version_tags[1:])
    ):
        violations.append("version_tags non-decreasing")

    for tag in traj.version_tags:
        if tag < 0:
            violations.append(f"negative version tag {tag}")
            break

    if vocab_size is not None:
        for tok in traj.tokens:
            if not (0 <= tok < vocab_size):
                violations.append(f"token {tok} outside vocabulary [0, {vocab_size})")
                break
    else:
        for tok in traj.tokens:
            if tok < 0:
                violations.append(f"negative token id {tok}")
                break

    return ValidationReport(ok=not violations, violations=violations)


# --- canonical line-delimited serialization ---------------------------------
#
# One JSON object per line, fixed field order (session_id, tokens, loss_mask,
# versions), no whitespace. Byte-stable so exports are diffable.


def trajectory_to_record(traj: Trajectory) -> dict:
    return {
        "session_id": traj.session_id,
        "tokens": traj.tokens,
        "loss_mask": [1 if m else 0 for m in traj.loss_mask],
        "versions": list(traj.version_tags),
    }


def trajectory_to_line(traj: Trajectory) -> str:
    return json.dumps(trajectory_to_record(traj), separators=(",", ":"))


def trajectory_from_record(rec: dict) -> Trajectory:
    """Rebuild a trajectory from its wire record.

    Spans are reconstructed as maximal runs of constant (origin, version), so
    a round-trip preserves tokens, mask, and tags exactly (span boundaries
    inside such runs are not preserved; they carry no information).
    """
    tokens = [int(t) for t in rec["tokens"]]
    mask = [bool(m) for m in rec["loss_mask"]]
    tags = [int(v) for v in rec["versions"]]
    if not (len(tokens) == len(mask) == len(tags)):
        raise ValueError("tokens, loss_mask, versions must have equal length")

    spans: list[TokenSpan] = []
    i = 0
    while i < len(tokens):
        j = i
        while j < len(tokens) and mask[j] == mask[i] and tags[j] == tags[i]:
            j += 1
        origin = SpanOrigin.MODEL_OUTPUT if mask[i] else SpanOrigin.AGENT_INPUT
        spans.append(TokenSpan(tuple(tokens[i:j]), origin, tags[i]))
        i = j
    return Trajectory(
        session_id=str(rec["session_id"]), spans=spans, loss_mask=mask, version_tags=tags
    )


def write_trajectories(path, trajectories: Iterable[Trajectory]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for traj in trajectories:
            fh.write(trajectory_to_line(traj))
            fh.write("\n")
            n += 1
    return n


def read_trajectories(path) -> Iterator[Trajectory]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield trajectory_from_record(json.loads(line))
