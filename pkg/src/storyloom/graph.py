"""Typed event/character narrative graphs, their JSON wire format, and mutation primitives.

The event graph is a directed labeled graph of plot events (labels: causal,
foreshadowing, suspense); the character graph carries typed relationships
between characters. Both are immutable values: every mutation returns a new
graph and never aliases the input.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Iterable, Mapping, Union

logger = logging.getLogger(__name__)


class GraphError(Exception):
    """Base class for graph construction and mutation errors."""


class MalformedDocument(GraphError):
    """The input is not well-formed JSON."""


class SchemaViolation(GraphError):
    """The document parses as JSON but violates the graph schema.

    ``path`` points at the offending element, e.g. ``plot_graph.relations[2].to``.
    """

    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class MutationError(GraphError):
    """Base class for errors raised by :func:`mutate`."""


class UnknownTarget(MutationError):
    """A mutation referenced an id or relation that does not exist."""


class DuplicateId(MutationError):
    """An add introduced an id that already exists."""


class DuplicateRelation(MutationError):
    """An add introduced an exact (from, to, label) duplicate."""


class StageLabel(str, Enum):
    """The five narrative stages an event can occupy."""

    BEGINNING = "Beginning"
    RISING_ACTION = "Rising Action"
    CLIMAX = "Climax"
    FALLING_ACTION = "Falling Action"
    ENDING = "Ending"

    @classmethod
    def parse(cls, text: str, path: str = "") -> "StageLabel":
        key = re.sub(r"[\s_-]+", "", str(text)).lower()
        for member in cls:
            if re.sub(r"\s+", "", member.value).lower() == key:
                return member
        raise SchemaViolation(f"unknown narrative stage {text!r}", path)


class EventRelationLabel(str, Enum):
    """Labels an event relation can carry; serialized lowercase."""

    CAUSAL = "causal"
    FORESHADOWING = "foreshadowing"
    SUSPENSE = "suspense"

    @classmethod
    def parse(cls, text: str, path: str = "") -> "EventRelationLabel":
        key = str(text).strip().lower()
        for member in cls:
            if member.value == key:
                return member
        raise SchemaViolation(f"unknown relation label {text!r}", path)


#: Edge labels that participate in traversal and completeness checks.
FLOW_LABELS = frozenset({EventRelationLabel.CAUSAL, EventRelationLabel.SUSPENSE})

_SUB_ORDER = {"am": 0, "pm": 1, "night": 2, None: 3}
_SUB_ALIASES = {"am": "am", "morning": "am", "pm": "pm", "afternoon": "pm", "night": "night"}
_TIME_RE = re.compile(r"^\s*day\s*(\d+)\s*(am|pm|night|morning|afternoon)?\s*$", re.IGNORECASE)


@dataclass(frozen=True)
class TimeIndex:
    """A parsed event time such as ``Day 15`` or ``Day 15am``.

    Ordering is total: by day, then sub-order (am < pm < night < unmarked),
    then the raw string. Unparseable strings sort after every parsed day and
    fall back to raw-string comparison among themselves.
    """

    raw: str
    day: int | None = None
    sub: str | None = None

    @classmethod
    def parse(cls, text: str) -> "TimeIndex":
        raw = str(text)
        match = _TIME_RE.match(raw)
        if match is None:
            logger.warning("time string %r does not parse as 'Day N[am|pm|night]'", raw)
            return cls(raw=raw)
        sub = _SUB_ALIASES[match.group(2).lower()] if match.group(2) else None
        return cls(raw=raw, day=int(match.group(1)), sub=sub)

    def sort_key(self) -> tuple:
        return (self.day if self.day is not None else math.inf, _SUB_ORDER[self.sub], self.raw)

    def __lt__(self, other: "TimeIndex") -> bool:
        if not isinstance(other, TimeIndex):
            return NotImplemented
        return self.sort_key() < other.sort_key()

    def __le__(self, other: "TimeIndex") -> bool:
        if not isinstance(other, TimeIndex):
            return NotImplemented
        return self.sort_key() <= other.sort_key()

    def __gt__(self, other: "TimeIndex") -> bool:
        if not isinstance(other, TimeIndex):
            return NotImplemented
        return self.sort_key() > other.sort_key()

    def __ge__(self, other: "TimeIndex") -> bool:
        if not isinstance(other, TimeIndex):
            return NotImplemented
        return self.sort_key() >= other.sort_key()


@dataclass(frozen=True)
class EventNode:
    """One plot event: unique id, free-text description, stage, and time."""

    id: str
    description: str
    stage: StageLabel
    time: TimeIndex
    extra: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.id:
            raise ValueError("event id must be non-empty")
        if not self.description:
            raise ValueError(f"event {self.id!r} has an empty description")


@dataclass(frozen=True)
class EventRelation:
    """A directed labeled edge between two events."""

    from_id: str
    to_id: str
    label: EventRelationLabel
    extra: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.from_id == self.to_id:
            raise ValueError(f"self-loop on {self.from_id!r} is not allowed")

    def key(self) -> tuple[str, str, EventRelationLabel]:
        return (self.from_id, self.to_id, self.label)


@dataclass(frozen=True)
class EventGraph:
    """Ordered collection of events plus their labeled relations.

    Event insertion order is significant (it is the final tie-break for
    chronological ordering) and survives serialization round-trips.
    """

    events: tuple[EventNode, ...] = ()
    relations: tuple[EventRelation, ...] = ()
    extra: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        ids = set()
        for node in self.events:
            if node.id in ids:
                raise DuplicateId(f"duplicate event id {node.id!r}")
            ids.add(node.id)
        seen = set()
        for rel in self.relations:
            for endpoint in (rel.from_id, rel.to_id):
                if endpoint not in ids:
                    raise UnknownTarget(f"relation endpoint {endpoint!r} is not an event")
            if rel.key() in seen:
                raise DuplicateRelation(f"duplicate relation {rel.key()}")
            seen.add(rel.key())

    def event_ids(self) -> tuple[str, ...]:
        return tuple(node.id for node in self.events)

    def has_event(self, event_id: str) -> bool:
        return any(node.id == event_id for node in self.events)

    def event(self, event_id: str) -> EventNode:
        for node in self.events:
            if node.id == event_id:
                return node
        raise UnknownTarget(f"no event with id {event_id!r}")

    def insertion_index(self, event_id: str) -> int:
        for i, node in enumerate(self.events):
            if node.id == event_id:
                return i
        raise UnknownTarget(f"no event with id {event_id!r}")

    def successors(self, event_id: str, labels: Iterable[EventRelationLabel]) -> tuple[str, ...]:
        wanted = frozenset(labels)
        out, seen = [], set()
        for rel in self.relations:
            if rel.from_id == event_id and rel.label in wanted and rel.to_id not in seen:
                seen.add(rel.to_id)
                out.append(rel.to_id)
        return tuple(out)

    def predecessors(self, event_id: str, labels: Iterable[EventRelationLabel]) -> tuple[str, ...]:
        wanted = frozenset(labels)
        out, seen = [], set()
        for rel in self.relations:
            if rel.to_id == event_id and rel.label in wanted and rel.from_id not in seen:
                seen.add(rel.from_id)
                out.append(rel.from_id)
        return tuple(out)


class RelationCategory(str, Enum):
    """Typed categories for character relationships."""

    CONFLICT = "Conflict"
    COOPERATIVE = "Cooperative"
    EMOTIONAL = "Emotional"
    HIDDEN = "Hidden"

    @classmethod
    def parse(cls, text: str, path: str = "") -> "RelationCategory":
        key = str(text).strip().lower()
        for member in cls:
            if member.value.lower() == key:
                return member
        raise SchemaViolation(f"unknown relation category {text!r}", path)


@dataclass(frozen=True)
class CharacterNode:
    """A character: id, name, motivation, and optional persona slots.

    The persona slots are only populated once character expansion has run;
    the initial planning step guarantees id/name/motivation alone.
    """

    id: str
    name: str
    motivation: str = ""
    core_trait: str | None = None
    internal_conflict: str | None = None
    external_goal: str | None = None
    hidden_secret: str | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.id:
            raise ValueError("character id must be non-empty")
        if not self.name:
            raise ValueError(f"character {self.id!r} has an empty name")


@dataclass(frozen=True)
class CharacterRelation:
    from_id: str
    to_id: str
    relation: str
    category: RelationCategory | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.from_id == self.to_id:
            raise ValueError(f"self-loop on character {self.from_id!r} is not allowed")


@dataclass(frozen=True)
class CharacterGraph:
    characters: tuple[CharacterNode, ...] = ()
    relations: tuple[CharacterRelation, ...] = ()
    extra: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        ids = set()
        for node in self.characters:
            if node.id in ids:
                raise DuplicateId(f"duplicate character id {node.id!r}")
            ids.add(node.id)
        for rel in self.relations:
            for endpoint in (rel.from_id, rel.to_id):
                if endpoint not in ids:
                    raise UnknownTarget(f"relation endpoint {endpoint!r} is not a character")

    def character_ids(self) -> tuple[str, ...]:
        return tuple(node.id for node in self.characters)

    def has_character(self, character_id: str) -> bool:
        return any(node.id == character_id for node in self.characters)

    def character(self, character_id: str) -> CharacterNode:
        for node in self.characters:
            if node.id == character_id:
                return node
        raise UnknownTarget(f"no character with id {character_id!r}")


@dataclass(frozen=True)
class JointGraph:
    """The pair of event graph and character graph all stages operate on."""

    event_graph: EventGraph = field(default_factory=EventGraph)
    character_graph: CharacterGraph = field(default_factory=CharacterGraph)
    extra: dict[str, Any] = field(default_factory=dict)


# --------------------------------------------------------------------------
# Wire format
# --------------------------------------------------------------------------

_EVENT_KEYS = ("id", "description", "narrative_stage", "time")
_EVENT_REL_KEYS = ("from", "to", "relation")
_CHAR_KEYS = ("id", "name", "motivation")
_PERSONA_KEYS = ("core_trait", "internal_conflict", "external_goal", "hidden_secret")
_CHAR_REL_KEYS = ("from", "to", "relation", "category")


def _require(obj: Mapping[str, Any], key: str, path: str) -> Any:
    if key not in obj:
        raise SchemaViolation(f"missing required key {key!r}", path)
    return obj[key]


def _require_str(obj: Mapping[str, Any], key: str, path: str) -> str:
    value = _require(obj, key, path)
    if not isinstance(value, str) or not value:
        raise SchemaViolation(f"key {key!r} must be a non-empty string", f"{path}.{key}")
    return value


def _extras(obj: Mapping[str, Any], known: Iterable[str]) -> dict[str, Any]:
    known = set(known)
    return {k: v for k, v in obj.items() if k not in known}


def _parse_event(obj: Any, path: str) -> EventNode:
    if not isinstance(obj, Mapping):
        raise SchemaViolation("event must be an object", path)
    return EventNode(
        id=_require_str(obj, "id", path),
        description=_require_str(obj, "description", path),
        stage=StageLabel.parse(_require(obj, "narrative_stage", path), f"{path}.narrative_stage"),
        time=TimeIndex.parse(_require(obj, "time", path)),
        extra=_extras(obj, _EVENT_KEYS),
    )


def _parse_event_relation(obj: Any, path: str, ids: set[str]) -> EventRelation:
    if not isinstance(obj, Mapping):
        raise SchemaViolation("relation must be an object", path)
    from_id = _require_str(obj, "from", path)
    to_id = _require_str(obj, "to", path)
    for key, endpoint in (("from", from_id), ("to", to_id)):
        if endpoint not in ids:
            raise SchemaViolation(f"relation endpoint {endpoint!r} does not exist", f"{path}.{key}")
    if from_id == to_id:
        raise SchemaViolation(f"self-loop on {from_id!r}", path)
    label = EventRelationLabel.parse(_require(obj, "relation", path), f"{path}.relation")
    return EventRelation(from_id=from_id, to_id=to_id, label=label, extra=_extras(obj, _EVENT_REL_KEYS))


def _parse_character(obj: Any, path: str) -> CharacterNode:
    if not isinstance(obj, Mapping):
        raise SchemaViolation("character must be an object", path)
    persona = {}
    for key in _PERSONA_KEYS:
        value = obj.get(key)
        if value is not None and not isinstance(value, str):
            raise SchemaViolation(f"key {key!r} must be a string", f"{path}.{key}")
        persona[key] = value
    motivation = obj.get("motivation", "")
    if not isinstance(motivation, str):
        raise SchemaViolation("key 'motivation' must be a string", f"{path}.motivation")
    return CharacterNode(
        id=_require_str(obj, "id", path),
        name=_require_str(obj, "name", path),
        motivation=motivation,
        extra=_extras(obj, _CHAR_KEYS + _PERSONA_KEYS),
        **persona,
    )


def _parse_character_relation(obj: Any, path: str, ids: set[str]) -> CharacterRelation:
    if not isinstance(obj, Mapping):
        raise SchemaViolation("relation must be an object", path)
    from_id = _require_str(obj, "from", path)
    to_id = _require_str(obj, "to", path)
    for key, endpoint in (("from", from_id), ("to", to_id)):
        if endpoint not in ids:
            raise SchemaViolation(f"relation endpoint {endpoint!r} does not exist", f"{path}.{key}")
    if from_id == to_id:
        raise SchemaViolation(f"self-loop on {from_id!r}", path)
    category = obj.get("category")
    return CharacterRelation(
        from_id=from_id,
        to_id=to_id,
        relation=str(_require(obj, "relation", path)),
        category=RelationCategory.parse(category, f"{path}.category") if category is not None else None,
        extra=_extras(obj, _CHAR_REL_KEYS),
    )


def parse_joint_graph_value(value: Any) -> JointGraph:
    """Parse an already-decoded JSON value into a :class:`JointGraph`."""
    if not isinstance(value, Mapping):
        raise SchemaViolation("top level must be an object", "")
    plot = _require(value, "plot_graph", "")
    chars = _require(value, "character_graph", "")
    if not isinstance(plot, Mapping):
        raise SchemaViolation("must be an object", "plot_graph")
    if not isinstance(chars, Mapping):
        raise SchemaViolation("must be an object", "character_graph")

    events, event_ids = [], set()
    for i, item in enumerate(plot.get("events", ())):
        node = _parse_event(item, f"plot_graph.events[{i}]")
        if node.id in event_ids:
            raise SchemaViolation(f"duplicate event id {node.id!r}", f"plot_graph.events[{i}].id")
        event_ids.add(node.id)
        events.append(node)

    relations, seen = [], set()
    for i, item in enumerate(plot.get("relations", ())):
        rel = _parse_event_relation(item, f"plot_graph.relations[{i}]", event_ids)
        if rel.key() in seen:
            raise SchemaViolation(f"duplicate relation {rel.key()}", f"plot_graph.relations[{i}]")
        seen.add(rel.key())
        relations.append(rel)

    characters, char_ids = [], set()
    for i, item in enumerate(chars.get("characters", ())):
        node = _parse_character(item, f"character_graph.characters[{i}]")
        if node.id in char_ids:
            raise SchemaViolation(f"duplicate character id {node.id!r}", f"character_graph.characters[{i}].id")
        char_ids.add(node.id)
        characters.append(node)

    char_relations = []
    for i, item in enumerate(chars.get("relations", ())):
        char_relations.append(_parse_character_relation(item, f"character_graph.relations[{i}]", char_ids))

    return JointGraph(
        event_graph=EventGraph(
            events=tuple(events),
            relations=tuple(relations),
            extra=_extras(plot, ("events", "relations")),
        ),
        character_graph=CharacterGraph(
            characters=tuple(characters),
            relations=tuple(char_relations),
            extra=_extras(chars, ("characters", "relations")),
        ),
        extra=_extras(value, ("plot_graph", "character_graph")),
    )


def parse_joint_graph(text: str) -> JointGraph:
    """Parse a JSON document with top-level ``plot_graph`` and ``character_graph``.

    Relation labels and stages match case-insensitively; unknown extra fields
    are ignored but preserved so serialization round-trips.
    """
    try:
        value = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedDocument(f"not valid JSON: {exc}") from exc
    return parse_joint_graph_value(value)


def _event_to_dict(node: EventNode) -> dict[str, Any]:
    out: dict[str, Any] = {
        "id": node.id,
        "description": node.description,
        "narrative_stage": node.stage.value,
        "time": node.time.raw,
    }
    out.update(node.extra)
    return out


def _event_relation_to_dict(rel: EventRelation) -> dict[str, Any]:
    out: dict[str, Any] = {"from": rel.from_id, "to": rel.to_id, "relation": rel.label.value}
    out.update(rel.extra)
    return out


def _character_to_dict(node: CharacterNode) -> dict[str, Any]:
    out: dict[str, Any] = {"id": node.id, "name": node.name, "motivation": node.motivation}
    for key in _PERSONA_KEYS:
        value = getattr(node, key)
        if value is not None:
            out[key] = value
    out.update(node.extra)
    return out


def _character_relation_to_dict(rel: CharacterRelation) -> dict[str, Any]:
    out: dict[str, Any] = {"from": rel.from_id, "to": rel.to_id, "relation": rel.relation}
    if rel.category is not None:
        out["category"] = rel.category.value
    out.update(rel.extra)
    return out


def joint_graph_to_value(graph: JointGraph) -> dict[str, Any]:
    """Encode a joint graph into its wire-format dict with stable key order."""
    out: dict[str, Any] = {
        "plot_graph": {
            "events": [_event_to_dict(n) for n in graph.event_graph.events],
            "relations": [_event_relation_to_dict(r) for r in graph.event_graph.relations],
            **graph.event_graph.extra,
        },
        "character_graph": {
            "characters": [_character_to_dict(n) for n in graph.character_graph.characters],
            "relations": [_character_relation_to_dict(r) for r in graph.character_graph.relations],
            **graph.character_graph.extra,
        },
    }
    out.update(graph.extra)
    return out


def serialize_joint_graph(graph: JointGraph, *, compact: bool = False) -> str:
    value = joint_graph_to_value(graph)
    if compact:
        return json.dumps(value, ensure_ascii=False, separators=(",", ":"))
    return json.dumps(value, ensure_ascii=False, indent=2) + "\n"


def graph_hash(graph: JointGraph) -> str:
    return hashlib.sha256(serialize_joint_graph(graph, compact=True).encode("utf-8")).hexdigest()


def event_graph_hash(graph: EventGraph) -> str:
    value = {
        "events": [_event_to_dict(n) for n in graph.events],
        "relations": [_event_relation_to_dict(r) for r in graph.relations],
    }
    return hashlib.sha256(json.dumps(value, ensure_ascii=False, separators=(",", ":")).encode("utf-8")).hexdigest()


def subgraph(graph: EventGraph, labels: Iterable[EventRelationLabel]) -> EventGraph:
    """Restrict relations to the given label set; the event set is unchanged."""
    wanted = frozenset(labels)
    return replace(graph, relations=tuple(r for r in graph.relations if r.label in wanted))


# --------------------------------------------------------------------------
# Mutations
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AddEvent:
    node: EventNode


@dataclass(frozen=True)
class ModifyEvent:
    """Partial update of an existing event; ``None`` fields are kept as-is."""

    event_id: str
    description: str | None = None
    stage: StageLabel | None = None
    time: TimeIndex | None = None


@dataclass(frozen=True)
class DeleteEventRelation:
    """Remove every relation on the ordered pair, regardless of label."""

    from_id: str
    to_id: str


@dataclass(frozen=True)
class AddEventRelation:
    relation: EventRelation


@dataclass(frozen=True)
class AddCharacter:
    node: CharacterNode


@dataclass(frozen=True)
class ModifyCharacter:
    character_id: str
    name: str | None = None
    motivation: str | None = None
    core_trait: str | None = None
    internal_conflict: str | None = None
    external_goal: str | None = None
    hidden_secret: str | None = None


@dataclass(frozen=True)
class DeleteCharacterRelation:
    from_id: str
    to_id: str


@dataclass(frozen=True)
class AddCharacterRelation:
    relation: CharacterRelation


Mutation = Union[
    AddEvent,
    ModifyEvent,
    DeleteEventRelation,
    AddEventRelation,
    AddCharacter,
    ModifyCharacter,
    DeleteCharacterRelation,
    AddCharacterRelation,
]


def mutate(graph: JointGraph, mutation: Mutation) -> JointGraph:
    """Apply exactly one mutation, returning a new graph value.

    The input graph is never modified. Raises :class:`UnknownTarget`,
    :class:`DuplicateId`, or :class:`DuplicateRelation` on invalid mutations.
    """
    eg, cg = graph.event_graph, graph.character_graph

    if isinstance(mutation, AddEvent):
        if eg.has_event(mutation.node.id):
            raise DuplicateId(f"event id {mutation.node.id!r} already exists")
        eg = replace(eg, events=eg.events + (mutation.node,))
    elif isinstance(mutation, ModifyEvent):
        old = eg.event(mutation.event_id)
        new = replace(
            old,
            description=mutation.description if mutation.description is not None else old.description,
            stage=mutation.stage if mutation.stage is not None else old.stage,
            time=mutation.time if mutation.time is not None else old.time,
        )
        eg = replace(eg, events=tuple(new if n.id == mutation.event_id else n for n in eg.events))
    elif isinstance(mutation, DeleteEventRelation):
        kept = tuple(r for r in eg.relations if not (r.from_id == mutation.from_id and r.to_id == mutation.to_id))
        if len(kept) == len(eg.relations):
            raise UnknownTarget(f"no relation from {mutation.from_id!r} to {mutation.to_id!r}")
        eg = replace(eg, relations=kept)
    elif isinstance(mutation, AddEventRelation):
        rel = mutation.relation
        for endpoint in (rel.from_id, rel.to_id):
            if not eg.has_event(endpoint):
                raise UnknownTarget(f"relation endpoint {endpoint!r} is not an event")
        if any(r.key() == rel.key() for r in eg.relations):
            raise DuplicateRelation(f"relation {rel.key()} already exists")
        eg = replace(eg, relations=eg.relations + (rel,))
    elif isinstance(mutation, AddCharacter):
        if cg.has_character(mutation.node.id):
            raise DuplicateId(f"character id {mutation.node.id!r} already exists")
        cg = replace(cg, characters=cg.characters + (mutation.node,))
    elif isinstance(mutation, ModifyCharacter):
        old = cg.character(mutation.character_id)
        updates = {
            key: getattr(mutation, key)
            for key in ("name", "motivation", "core_trait", "internal_conflict", "external_goal", "hidden_secret")
            if getattr(mutation, key) is not None
        }
        new = replace(old, **updates)
        cg = replace(cg, characters=tuple(new if n.id == mutation.character_id else n for n in cg.characters))
    elif isinstance(mutation, DeleteCharacterRelation):
        kept = tuple(r for r in cg.relations if not (r.from_id == mutation.from_id and r.to_id == mutation.to_id))
        if len(kept) == len(cg.relations):
            raise UnknownTarget(f"no relation from {mutation.from_id!r} to {mutation.to_id!r}")
        cg = replace(cg, relations=kept)
    elif isinstance(mutation, AddCharacterRelation):
        rel = mutation.relation
        for endpoint in (rel.from_id, rel.to_id):
            if not cg.has_character(endpoint):
                raise UnknownTarget(f"relation endpoint {endpoint!r} is not a character")
        cg = replace(cg, relations=cg.relations + (rel,))
    else:
        raise TypeError(f"unknown mutation {mutation!r}")

    return replace(graph, event_graph=eg, character_graph=cg)
