"""Stage 3 front half: event-graph serialization and character expansion.

The traversal is a deterministic depth-first walk of the flow subgraph
(causal and suspense edges). Roots are the zero-in-degree flow nodes in
chronological order; at every node the unvisited suspense successors are
explored before the causal ones, ties within a label resolved
chronologically (time index, then insertion order). Each event is emitted
exactly once. Foreshadowing edges are never traversed; they come out as
cross-event cues.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Any, Mapping

from . import prompts
from .graph import (
    CharacterGraph,
    EventGraph,
    EventRelationLabel,
    FLOW_LABELS,
    event_graph_hash,
)
from .provider import ChatClient, ExtractionError, request_structured

logger = logging.getLogger(__name__)


class UncoveredNodes(Exception):
    """The traversal missed nodes (possible only on graphs that fail validation)."""

    def __init__(self, missing: tuple[str, ...]):
        super().__init__(f"traversal did not reach: {', '.join(missing)}")
        self.missing = missing


@dataclass(frozen=True)
class EventPlan:
    """The serialized event sequence with its relation context.

    ``annotations[i]`` holds the labels of edges from ``ordered_events[i]`` to
    ``ordered_events[i+1]`` (empty when the neighbors are not directly
    linked). Flow edges not represented by an adjacent pair land in
    ``cross_refs``; every foreshadowing edge of the source graph is a cue.
    """

    ordered_events: tuple[str, ...]
    annotations: tuple[tuple[str, ...], ...]
    foreshadow_cues: tuple[tuple[str, str], ...]
    cross_refs: tuple[tuple[str, str, str], ...]
    graph_hash: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "ordered_events": list(self.ordered_events),
            "annotations": [list(a) for a in self.annotations],
            "foreshadow_cues": [{"from": f, "to": t} for f, t in self.foreshadow_cues],
            "cross_refs": [{"from": f, "to": t, "relation": r} for f, t, r in self.cross_refs],
            "source_graph_hash": self.graph_hash,
        }

    @classmethod
    def from_dict(cls, value: Mapping[str, Any]) -> "EventPlan":
        return cls(
            ordered_events=tuple(value["ordered_events"]),
            annotations=tuple(tuple(a) for a in value["annotations"]),
            foreshadow_cues=tuple((c["from"], c["to"]) for c in value["foreshadow_cues"]),
            cross_refs=tuple((c["from"], c["to"], c["relation"]) for c in value["cross_refs"]),
            graph_hash=value.get("source_graph_hash", ""),
        )


def serialize_events(graph: EventGraph) -> EventPlan:
    """Linearize a validated event graph into an :class:`EventPlan`."""
    chrono_rank = {
        node.id: i
        for i, node in enumerate(
            sorted(graph.events, key=lambda e: (e.time.sort_key(), graph.insertion_index(e.id)))
        )
    }

    suspense_succ: dict[str, list[str]] = {n.id: [] for n in graph.events}
    causal_succ: dict[str, list[str]] = {n.id: [] for n in graph.events}
    for rel in graph.relations:
        if rel.label is EventRelationLabel.SUSPENSE:
            if rel.to_id not in suspense_succ[rel.from_id]:
                suspense_succ[rel.from_id].append(rel.to_id)
        elif rel.label is EventRelationLabel.CAUSAL:
            if rel.to_id not in causal_succ[rel.from_id]:
                causal_succ[rel.from_id].append(rel.to_id)
    has_flow_in = {rel.to_id for rel in graph.relations if rel.label in FLOW_LABELS}

    order: list[str] = []
    visited: set[str] = set()

    def visit(node_id: str) -> None:
        if node_id in visited:
            return
        visited.add(node_id)
        order.append(node_id)
        suspense = sorted(suspense_succ[node_id], key=chrono_rank.__getitem__)
        causal = sorted(
            (t for t in causal_succ[node_id] if t not in suspense_succ[node_id]),
            key=chrono_rank.__getitem__,
        )
        for successor in suspense + causal:
            visit(successor)

    roots = sorted((n.id for n in graph.events if n.id not in has_flow_in), key=chrono_rank.__getitem__)
    for root in roots:
        visit(root)

    missing = tuple(n.id for n in graph.events if n.id not in visited)
    if missing:
        raise UncoveredNodes(missing)

    position = {node_id: i for i, node_id in enumerate(order)}
    annotations: list[tuple[str, ...]] = []
    for a, b in zip(order, order[1:]):
        labels = sorted({r.label.value for r in graph.relations if r.from_id == a and r.to_id == b})
        annotations.append(tuple(labels))

    cross_refs = tuple(
        (r.from_id, r.to_id, r.label.value)
        for r in graph.relations
        if r.label in FLOW_LABELS and position[r.to_id] != position[r.from_id] + 1
    )
    cues = tuple(
        (r.from_id, r.to_id) for r in graph.relations if r.label is EventRelationLabel.FORESHADOWING
    )
    return EventPlan(
        ordered_events=tuple(order),
        annotations=tuple(annotations),
        foreshadow_cues=cues,
        cross_refs=cross_refs,
        graph_hash=event_graph_hash(graph),
    )


def render_plan_text(plan: EventPlan, graph: EventGraph) -> str:
    """Human-readable event plan used inside generation prompts."""
    lines = []
    for i, event_id in enumerate(plan.ordered_events):
        node = graph.event(event_id)
        lines.append(f"{i + 1}. [{node.id}] ({node.stage.value}, {node.time.raw}) {node.description}")
        if i < len(plan.annotations) and plan.annotations[i]:
            lines.append(f"   -> leads to the next event via: {', '.join(plan.annotations[i])}")
    if plan.cross_refs:
        lines.append("Cross-links between non-adjacent events:")
        for f, t, label in plan.cross_refs:
            lines.append(f"   {f} -> {t} ({label})")
    if plan.foreshadow_cues:
        lines.append("Foreshadowing cues to honor:")
        for f, t in plan.foreshadow_cues:
            lines.append(f"   {f} plants a setup that pays off at {t}")
    return "\n".join(lines)


@dataclass(frozen=True)
class Profile:
    description: str
    source_node_id: str


@dataclass(frozen=True)
class CharacterProfiles:
    """Expanded character descriptions keyed by character name."""

    profiles: dict[str, Profile] = field(default_factory=dict)
    warnings: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "characters": {
                name: {"description": p.description, "source_node_id": p.source_node_id}
                for name, p in self.profiles.items()
            },
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, value: Mapping[str, Any]) -> "CharacterProfiles":
        return cls(
            profiles={
                name: Profile(description=v["description"], source_node_id=v.get("source_node_id", ""))
                for name, v in value.get("characters", {}).items()
            },
            warnings=tuple(value.get("warnings", ())),
        )


def _backfill(node) -> str:
    return node.motivation or f"{node.name}, a principal of this story."


def expand_characters(
    graph: CharacterGraph, title: str, storyline: str, provider: ChatClient
) -> CharacterProfiles:
    """One profile per character node; absent reply entries are backfilled
    from the node's motivation with a warning."""
    if not graph.characters:
        return CharacterProfiles()
    character_json = json.dumps(
        {
            "characters": [
                {"id": n.id, "name": n.name, "motivation": n.motivation} for n in graph.characters
            ],
            "relations": [
                {"from": r.from_id, "to": r.to_id, "relation": r.relation} for r in graph.relations
            ],
        },
        ensure_ascii=False,
        indent=2,
    )
    prompt = prompts.render(
        "character_expansion", title=title, storyline=storyline, character_graph=character_json
    )
    try:
        reply = request_structured(provider, prompt, stage="profiles")
        replied = reply.get("characters", {}) if isinstance(reply, Mapping) else {}
    except ExtractionError as exc:
        logger.warning("character expansion produced no usable reply; backfilling all: %s", exc)
        replied = {}

    profiles: dict[str, Profile] = {}
    warnings: list[str] = []
    if not replied:
        warnings.append("no usable expansion reply; every profile backfilled from its motivation")
    for node in graph.characters:
        entry = replied.get(node.name)
        description = None
        if isinstance(entry, Mapping):
            description = entry.get("description")
        elif isinstance(entry, str):
            description = entry
        if description:
            profiles[node.name] = Profile(description=str(description), source_node_id=node.id)
        else:
            if replied:
                warnings.append(f"character {node.name!r} missing from the reply; backfilled")
            profiles[node.name] = Profile(description=_backfill(node), source_node_id=node.id)
    for name in replied:
        if name not in profiles:
            warnings.append(f"reply names unknown character {name!r}; ignored")
    for warning in warnings:
        logger.warning("character expansion: %s", warning)
    return CharacterProfiles(profiles=profiles, warnings=tuple(warnings))
