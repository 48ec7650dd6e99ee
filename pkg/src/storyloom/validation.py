"""LLM-free verification of the two structural constraints on event graphs.

Causal rationality: the subgraph of causal edges must be acyclic.
Narrative completeness: exactly one Beginning and one Ending exist, every
event is reachable from the Beginning, and every event reaches the Ending,
both over flow edges (causal plus suspense).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Any

from .graph import FLOW_LABELS, EventGraph, EventRelationLabel, StageLabel


class ConstraintKind(str, Enum):
    CAUSAL_CYCLE = "CausalCycle"
    UNREACHABLE_FROM_BEGINNING = "UnreachableFromBeginning"
    NO_PATH_TO_ENDING = "NoPathToEnding"
    MISSING_BEGINNING = "MissingBeginning"
    MISSING_ENDING = "MissingEnding"


@dataclass(frozen=True)
class Violation:
    constraint: ConstraintKind
    witness: tuple[str, ...]

    def to_dict(self) -> dict[str, Any]:
        return {"constraint": self.constraint.value, "witness": list(self.witness)}


@dataclass(frozen=True)
class ValidationReport:
    passed: bool
    violations: tuple[Violation, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {"passed": self.passed, "violations": [v.to_dict() for v in self.violations]}


def _report(violations: list[Violation]) -> ValidationReport:
    return ValidationReport(passed=not violations, violations=tuple(violations))


def _adjacency(graph: EventGraph, labels: frozenset[EventRelationLabel]) -> dict[str, list[str]]:
    adj: dict[str, list[str]] = {node.id: [] for node in graph.events}
    for rel in graph.relations:
        if rel.label in labels and rel.to_id not in adj[rel.from_id]:
            adj[rel.from_id].append(rel.to_id)
    return adj


def _find_cycle(graph: EventGraph, labels: frozenset[EventRelationLabel]) -> tuple[str, ...] | None:
    """First cycle found by DFS in event insertion order, or None.

    The witness is the node sequence around the cycle: consecutive witnesses
    (and last back to first) are connected by edges of the given labels.
    """
    adj = _adjacency(graph, labels)
    WHITE, GRAY, BLACK = 0, 1, 2
    color = {nid: WHITE for nid in adj}
    path: list[str] = []

    def dfs(node: str) -> tuple[str, ...] | None:
        color[node] = GRAY
        path.append(node)
        for succ in adj[node]:
            if color[succ] == GRAY:
                return tuple(path[path.index(succ):])
            if color[succ] == WHITE:
                cycle = dfs(succ)
                if cycle is not None:
                    return cycle
        path.pop()
        color[node] = BLACK
        return None

    for node in graph.events:
        if color[node.id] == WHITE:
            cycle = dfs(node.id)
            if cycle is not None:
                return cycle
    return None


def _reachable(adj: dict[str, list[str]], start: str) -> set[str]:
    seen = {start}
    stack = [start]
    while stack:
        node = stack.pop()
        for succ in adj[node]:
            if succ not in seen:
                seen.add(succ)
                stack.append(succ)
    return seen


def check_causal_acyclicity(graph: EventGraph) -> ValidationReport:
    """Pass iff the causal subgraph has no directed cycle; witness one cycle."""
    cycle = _find_cycle(graph, frozenset({EventRelationLabel.CAUSAL}))
    if cycle is None:
        return _report([])
    return _report([Violation(ConstraintKind.CAUSAL_CYCLE, cycle)])


def check_completeness(graph: EventGraph) -> ValidationReport:
    """Pass iff a unique Beginning reaches every node and every node reaches a
    unique Ending over flow edges."""
    violations: list[Violation] = []
    beginnings = tuple(n.id for n in graph.events if n.stage is StageLabel.BEGINNING)
    endings = tuple(n.id for n in graph.events if n.stage is StageLabel.ENDING)
    if len(beginnings) != 1:
        violations.append(Violation(ConstraintKind.MISSING_BEGINNING, beginnings))
    if len(endings) != 1:
        violations.append(Violation(ConstraintKind.MISSING_ENDING, endings))

    forward = _adjacency(graph, FLOW_LABELS)
    if len(beginnings) == 1:
        reached = _reachable(forward, beginnings[0])
        unreachable = tuple(n.id for n in graph.events if n.id not in reached)
        if unreachable:
            violations.append(Violation(ConstraintKind.UNREACHABLE_FROM_BEGINNING, unreachable))
    if len(endings) == 1:
        backward: dict[str, list[str]] = {nid: [] for nid in forward}
        for src, succs in forward.items():
            for dst in succs:
                backward[dst].append(src)
        reaches_end = _reachable(backward, endings[0])
        dead = tuple(n.id for n in graph.events if n.id not in reaches_end)
        if dead:
            violations.append(Violation(ConstraintKind.NO_PATH_TO_ENDING, dead))

    return _report(violations)


def validate(graph: EventGraph) -> ValidationReport:
    """Conjunction of both checks; violations are concatenated."""
    acyclic = check_causal_acyclicity(graph)
    complete = check_completeness(graph)
    return ValidationReport(
        passed=acyclic.passed and complete.passed,
        violations=acyclic.violations + complete.violations,
    )
