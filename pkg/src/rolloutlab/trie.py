"""Per-session radix tree of token sequences.

Inserting a recorded sequence consumes the longest prefix already stored
(longest-prefix matching) and splits a node when divergence falls inside its
span, so every token is stored exactly once per distinct path. Nodes carry
per-token origin/version metadata as run-length runs instead of splitting on
version changes: the tree stays purely prefix-structural.

Shared prefixes keep the metadata of their first writer. Re-recording the
same tokens under a newer version (e.g. a later turn replaying earlier
context) does not rewrite history; the stored run is the capture of record.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterator, Sequence

from .core import ModelVersion, SpanOrigin, TokenId, TokenSpan, Trajectory

# (length, origin, version) runs over a node's tokens
MetaRun = tuple[int, SpanOrigin, ModelVersion]


def _runs_from(origins: Sequence[SpanOrigin], versions: Sequence[ModelVersion]) -> list[MetaRun]:
    runs: list[MetaRun] = []
    for origin, version in zip(origins, versions):
        if runs and runs[-1][1] is origin and runs[-1][2] == version:
            runs[-1] = (runs[-1][0] + 1, origin, version)
        else:
            runs.append((1, origin, version))
    return runs


def _split_runs(runs: list[MetaRun], k: int) -> tuple[list[MetaRun], list[MetaRun]]:
    left: list[MetaRun] = []
    right: list[MetaRun] = []
    consumed = 0
    for length, origin, version in runs:
        if consumed + length <= k:
            left.append((length, origin, version))
        elif consumed >= k:
            right.append((length, origin, version))
        else:
            left.append((k - consumed, origin, version))
            right.append((length - (k - consumed), origin, version))
        consumed += length
    return left, right


def _expand_runs(runs: list[MetaRun]) -> Iterator[tuple[SpanOrigin, ModelVersion]]:
    for length, origin, version in runs:
        for _ in range(length):
            yield origin, version


@dataclass
class TrieNode:
    node_id: int
    tokens: list[TokenId]
    runs: list[MetaRun]
    children: dict[TokenId, "TrieNode"] = field(default_factory=dict)
    leaf_marks: set[str] = field(default_factory=set)

    @property
    def is_marked(self) -> bool:
        return bool(self.leaf_marks)


@dataclass
class InsertResult:
    matched_prefix_length: int
    node_id: int
    added_tokens: int


@dataclass
class StorageStats:
    stored_tokens: int
    naive_tokens: int

    @property
    def dedup_ratio(self) -> float:
        if self.naive_tokens == 0:
            return 1.0
        return self.stored_tokens / self.naive_tokens


class SessionTrie:
    """Radix tree over one session's recorded token sequences."""

    def __init__(self, session_id: str):
        self.session_id = session_id
        self._ids = itertools.count()
        self.root = TrieNode(node_id=next(self._ids), tokens=[], runs=[])
        self.nodes: dict[int, TrieNode] = {self.root.node_id: self.root}
        self.total_stored_tokens = 0
        self.total_naive_tokens = 0

    def _new_node(self, tokens: list[TokenId], runs: list[MetaRun]) -> TrieNode:
        node = TrieNode(node_id=next(self._ids), tokens=tokens, runs=runs)
        self.nodes[node.node_id] = node
        return node

    def _split(self, parent: TrieNode, child: TrieNode, at: int) -> TrieNode:
        """Split ``child`` so its first ``at`` tokens become a new parent node.

        The original node object keeps its id (and marks/children) for the
        suffix, so previously returned leaf ids stay valid.
        """
        head_runs, tail_runs = _split_runs(child.runs, at)
        head = self._new_node(child.tokens[:at], head_runs)
        parent.children[head.tokens[0]] = head
        child.tokens = child.tokens[at:]
        child.runs = tail_runs
        head.children = {child.tokens[0]: child}
        return head

    def lpm_insert(
        self,
        tokens: Sequence[TokenId],
        origins: Sequence[SpanOrigin],
        versions: Sequence[ModelVersion],
        completion_id: str | None = None,
    ) -> InsertResult:
        """Insert one recorded sequence, merging with stored content by LPM."""
        if not tokens:
            raise ValueError("cannot insert an empty sequence")
        if not (len(tokens) == len(origins) == len(versions)):
            raise ValueError("tokens, origins, versions must be parallel")

        tokens = list(tokens)
        node = self.root
        i = 0
        while True:
            if i == len(tokens):
                end = node
                break
            child = node.children.get(tokens[i])
            if child is None:
                suffix_runs = _runs_from(origins[i:], versions[i:])
                end = self._new_node(tokens[i:], suffix_runs)
                node.children[tokens[i]] = end
                self.total_stored_tokens += len(tokens) - i
                self.total_naive_tokens += len(tokens)
                if completion_id is not None:
                    end.leaf_marks.add(completion_id)
                return InsertResult(i, end.node_id, len(tokens) - i)

            common = 0
            limit = min(len(child.tokens), len(tokens) - i)
            while common < limit and child.tokens[common] == tokens[i + common]:
                common += 1
            if common == len(child.tokens):
                node = child
                i += common
                continue
            # divergence (or sequence end) inside the child's span
            head = self._split(node, child, common)
            i += common
            if i == len(tokens):
                end = head
            else:
                suffix_runs = _runs_from(origins[i:], versions[i:])
                end = self._new_node(tokens[i:], suffix_runs)
                head.children[tokens[i]] = end
                self.total_stored_tokens += len(tokens) - i
            matched = i
            self.total_naive_tokens += len(tokens)
            if completion_id is not None:
                end.leaf_marks.add(completion_id)
            return InsertResult(matched, end.node_id, len(tokens) - matched)

        # walked off the end exactly at a node boundary: fully matched
        self.total_naive_tokens += len(tokens)
        if completion_id is not None:
            end.leaf_marks.add(completion_id)
        return InsertResult(len(tokens), end.node_id, 0)

    def mark(self, node_id: int, completion_id: str) -> None:
        self.nodes[node_id].leaf_marks.add(completion_id)

    def stats(self) -> StorageStats:
        return StorageStats(self.total_stored_tokens, self.total_naive_tokens)

    # -- reconstruction ----------------------------------------------------

    def _walk(self) -> Iterator[tuple[TrieNode, list[TokenId], list[MetaRun]]]:
        """DFS yielding every node with the full path content ending at it."""
        stack: list[tuple[TrieNode, list[TokenId], list[MetaRun]]] = [(self.root, [], [])]
        while stack:
            node, toks, runs = stack.pop()
            if node is not self.root:
                yield node, toks, runs
            for key in sorted(node.children, reverse=True):
                child = node.children[key]
                stack.append((child, toks + child.tokens, runs + child.runs))

    def marked_nodes(self) -> list[TrieNode]:
        return [n for n, _, _ in self._walk() if n.is_marked]

    def path_trajectory(self, node_id: int) -> Trajectory:
        """Rebuild the trajectory for the root→node path."""
        for node, toks, runs in self._walk():
            if node.node_id == node_id:
                return self._to_trajectory(toks, runs)
        raise KeyError(f"node {node_id} not in trie")

    def extract(self) -> list[tuple[int, Trajectory]]:
        """One trajectory per marked node, in deterministic path order."""
        out = []
        for node, toks, runs in self._walk():
            if node.is_marked:
                out.append((node.node_id, self._to_trajectory(toks, runs)))
        return out

    def _to_trajectory(self, tokens: list[TokenId], runs: list[MetaRun]) -> Trajectory:
        spans: list[TokenSpan] = []
        pos = 0
        for length, origin, version in _merge_runs(runs):
            spans.append(TokenSpan(tuple(tokens[pos:pos + length]), origin, version))
            pos += length
        return Trajectory.from_spans(self.session_id, spans)

    # -- invariants ---------------------------------------------------------

    def check_well_formed(self) -> list[str]:
        """Structural invariant check used by property tests."""
        problems: list[str] = []
        seen_tokens = 0
        stack = [self.root]
        while stack:
            node = stack.pop()
            if node is not self.root:
                if not node.tokens:
                    problems.append(f"node {node.node_id} has empty span")
                seen_tokens += len(node.tokens)
                if sum(r[0] for r in node.runs) != len(node.tokens):
                    problems.append(f"node {node.node_id} runs do not cover its tokens")
            for key, child in node.children.items():
                if not child.tokens or child.tokens[0] != key:
                    problems.append(
                        f"child of node {node.node_id} keyed {key} but starts with "
                        f"{child.tokens[:1]}"
                    )
                stack.append(child)
        if seen_tokens != self.total_stored_tokens:
            problems.append(
                f"stored-token accounting off: counted {seen_tokens}, "
                f"recorded {self.total_stored_tokens}"
            )
        if self.total_stored_tokens > self.total_naive_tokens:
            problems.append("stored exceeds naive total")
        return problems


def _merge_runs(runs: list[MetaRun]) -> list[MetaRun]:
    merged: list[MetaRun] = []
    for run in runs:
        if merged and merged[-1][1] is run[1] and merged[-1][2] == run[2]:
            merged[-1] = (merged[-1][0] + run[0], run[1], run[2])
        else:
            merged.append(run)
    return merged
