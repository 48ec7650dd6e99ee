"""Compile issues into mutation batches and apply them under the validator gate.

A batch is per-issue atomic: its mutations apply to a working copy in a fixed
order (plot deletes, new events, event modifications, new relations, then the
character changes in the same internal order), the validator runs on the
result, and a failing batch leaves the input graph untouched.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Mapping

from . import prompts
from .critics import Issue
from .graph import (
    AddCharacter,
    AddCharacterRelation,
    AddEvent,
    AddEventRelation,
    CharacterNode,
    CharacterRelation,
    DeleteCharacterRelation,
    DeleteEventRelation,
    EventNode,
    EventRelation,
    EventRelationLabel,
    FLOW_LABELS,
    JointGraph,
    ModifyCharacter,
    ModifyEvent,
    MutationError,
    RelationCategory,
    SchemaViolation,
    StageLabel,
    TimeIndex,
    joint_graph_to_value,
    mutate,
)
from .provider import ChatClient, ExtractionError, request_structured
from .validation import ValidationReport, validate

logger = logging.getLogger(__name__)


class AtomicEditOp(str, Enum):
    ADD_PLOT_BRIDGE = "Add-Plot-Bridge"
    ADD_SUSPENSE = "Add-Suspense"
    ADD_FORESHADOW = "Add-Foreshadow"
    INSERT_TWIST = "Insert-Twist"
    REVISE_EVENT = "Revise-Event"

    @classmethod
    def parse(cls, text: str) -> "AtomicEditOp | None":
        key = str(text).strip().lower()
        for member in cls:
            if member.value.lower() == key:
                return member
        return None


class RejectionReason(str, Enum):
    SCOPE_VIOLATION = "ScopeViolation"
    VALIDATION_FAILED = "ValidationFailed"
    COMPILE_ERROR = "CompileError"


@dataclass(frozen=True)
class Rejection:
    reason: RejectionReason
    detail: str = ""
    report: ValidationReport | None = None

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"reason": self.reason.value, "detail": self.detail}
        if self.report is not None:
            out["report"] = self.report.to_dict()
        return out


@dataclass(frozen=True)
class EditOutcome:
    issue_id: int
    accepted: bool
    rejection: Rejection | None = None
    warnings: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"issue_id": self.issue_id, "accepted": self.accepted, "warnings": list(self.warnings)}
        if self.rejection is not None:
            out["rejection"] = self.rejection.to_dict()
        return out


@dataclass(frozen=True)
class PlotChanges:
    delete_relations: tuple[tuple[str, str], ...] = ()
    new_events: tuple[EventNode, ...] = ()
    modified_events: tuple[ModifyEvent, ...] = ()
    new_relations: tuple[EventRelation, ...] = ()


@dataclass(frozen=True)
class CharacterChanges:
    delete_relations: tuple[tuple[str, str], ...] = ()
    new_characters: tuple[CharacterNode, ...] = ()
    modified_characters: tuple[ModifyCharacter, ...] = ()
    new_relations: tuple[CharacterRelation, ...] = ()


@dataclass(frozen=True)
class MutationBatch:
    issue_id: int
    plot: PlotChanges = field(default_factory=PlotChanges)
    characters: CharacterChanges = field(default_factory=CharacterChanges)
    declared_op: AtomicEditOp | None = None

    def is_empty(self) -> bool:
        return self == MutationBatch(issue_id=self.issue_id, declared_op=self.declared_op)

    def new_ids(self) -> frozenset[str]:
        return frozenset(n.id for n in self.plot.new_events) | frozenset(n.id for n in self.characters.new_characters)

    def to_dict(self) -> dict[str, Any]:
        def event_dict(node: EventNode) -> dict[str, Any]:
            return {
                "id": node.id,
                "description": node.description,
                "narrative_stage": node.stage.value,
                "time": node.time.raw,
            }

        def modify_event_dict(m: ModifyEvent) -> dict[str, Any]:
            out: dict[str, Any] = {"id": m.event_id}
            if m.description is not None:
                out["description"] = m.description
            if m.stage is not None:
                out["narrative_stage"] = m.stage.value
            if m.time is not None:
                out["time"] = m.time.raw
            return out

        def character_dict(node: CharacterNode) -> dict[str, Any]:
            return {"id": node.id, "name": node.name, "motivation": node.motivation}

        def modify_character_dict(m: ModifyCharacter) -> dict[str, Any]:
            out: dict[str, Any] = {"id": m.character_id}
            if m.name is not None:
                out["name"] = m.name
            if m.motivation is not None:
                out["motivation"] = m.motivation
            return out

        out: dict[str, Any] = {
            "issue_id": self.issue_id,
            "plot_changes": {
                "Delete relation": [{"from": f, "to": t} for f, t in self.plot.delete_relations],
                "New event": [event_dict(n) for n in self.plot.new_events],
                "Modify event": [modify_event_dict(m) for m in self.plot.modified_events],
                "New relation": [
                    {"from": r.from_id, "to": r.to_id, "relation": r.label.value} for r in self.plot.new_relations
                ],
            },
            "character_changes": {
                "Delete relation": [{"from": f, "to": t} for f, t in self.characters.delete_relations],
                "New character": [character_dict(n) for n in self.characters.new_characters],
                "Modify character": [modify_character_dict(m) for m in self.characters.modified_characters],
                "New relation": [
                    {"from": r.from_id, "to": r.to_id, "relation": r.relation}
                    for r in self.characters.new_relations
                ],
            },
        }
        if self.declared_op is not None:
            out["operation"] = self.declared_op.value
        return out


@dataclass(frozen=True)
class CompiledEdit:
    """One issue's compile result: either a batch or the rejection that replaced it."""

    issue_id: int
    batch: MutationBatch | None = None
    error: Rejection | None = None
    warnings: tuple[str, ...] = ()


def _get_section(value: Mapping[str, Any], *names: str) -> list:
    for name in names:
        if name in value:
            section = value[name]
            return list(section) if isinstance(section, (list, tuple)) else []
    return []


def _parse_pair(item: Any) -> tuple[str, str]:
    if isinstance(item, Mapping):
        return (str(item["from"]), str(item["to"]))
    return (str(item[0]), str(item[1]))


def parse_batch_value(value: Mapping[str, Any], issue_id: int) -> MutationBatch:
    """Parse one edit-plan entry in the wire shape into a batch."""
    plot = value.get("plot_changes") or {}
    chars = value.get("character_changes") or {}
    if not isinstance(plot, Mapping) or not isinstance(chars, Mapping):
        raise ValueError("plot_changes and character_changes must be objects")

    new_events = []
    for item in _get_section(plot, "New event", "new_event", "new_events"):
        new_events.append(
            EventNode(
                id=str(item["id"]),
                description=str(item.get("description", "")),
                stage=StageLabel.parse(item.get("narrative_stage", "Rising Action")),
                time=TimeIndex.parse(str(item.get("time", ""))),
            )
        )
    modified_events = []
    for item in _get_section(plot, "Modify event", "modify_event", "modified_events"):
        modified_events.append(
            ModifyEvent(
                event_id=str(item["id"]),
                description=str(item["description"]) if "description" in item else None,
                stage=StageLabel.parse(item["narrative_stage"]) if "narrative_stage" in item else None,
                time=TimeIndex.parse(str(item["time"])) if "time" in item else None,
            )
        )
    new_relations = []
    for item in _get_section(plot, "New relation", "new_relation", "new_relations"):
        new_relations.append(
            EventRelation(
                from_id=str(item["from"]),
                to_id=str(item["to"]),
                label=EventRelationLabel.parse(item.get("relation", "causal")),
            )
        )

    new_characters = []
    for item in _get_section(chars, "New character", "new_character", "new_characters"):
        new_characters.append(
            CharacterNode(id=str(item["id"]), name=str(item["name"]), motivation=str(item.get("motivation", "")))
        )
    modified_characters = []
    for item in _get_section(chars, "Modify character", "modify_character", "modified_characters"):
        modified_characters.append(
            ModifyCharacter(
                character_id=str(item["id"]),
                name=str(item["name"]) if "name" in item else None,
                motivation=str(item["motivation"]) if "motivation" in item else None,
            )
        )
    new_char_relations = []
    for item in _get_section(chars, "New relation", "new_relation", "new_relations"):
        category = item.get("category")
        new_char_relations.append(
            CharacterRelation(
                from_id=str(item["from"]),
                to_id=str(item["to"]),
                relation=str(item.get("relation", "")),
                category=RelationCategory.parse(category) if category is not None else None,
            )
        )

    declared = value.get("operation") or value.get("op")
    return MutationBatch(
        issue_id=issue_id,
        plot=PlotChanges(
            delete_relations=tuple(_parse_pair(i) for i in _get_section(plot, "Delete relation", "delete_relation", "delete_relations")),
            new_events=tuple(new_events),
            modified_events=tuple(modified_events),
            new_relations=tuple(new_relations),
        ),
        characters=CharacterChanges(
            delete_relations=tuple(_parse_pair(i) for i in _get_section(chars, "Delete relation", "delete_relation", "delete_relations")),
            new_characters=tuple(new_characters),
            modified_characters=tuple(modified_characters),
            new_relations=tuple(new_char_relations),
        ),
        declared_op=AtomicEditOp.parse(declared) if declared is not None else None,
    )


def _existing_ids(graph: JointGraph) -> frozenset[str]:
    return frozenset(graph.event_graph.event_ids()) | frozenset(graph.character_graph.character_ids())


def _rename_collisions(batch: MutationBatch, taken: frozenset[str]) -> tuple[MutationBatch, tuple[str, ...]]:
    """Auto-suffix new ids that collide with existing or already-claimed ids.

    References to the renamed id inside the same batch are rewritten too.
    """
    renames: dict[str, str] = {}
    claimed = set(taken)
    for node_id in [n.id for n in batch.plot.new_events] + [n.id for n in batch.characters.new_characters]:
        if node_id in claimed:
            k = 1
            while f"{node_id}_{k}" in claimed:
                k += 1
            renames[node_id] = f"{node_id}_{k}"
            claimed.add(f"{node_id}_{k}")
        else:
            claimed.add(node_id)
    if not renames:
        return batch, ()

    def rid(node_id: str) -> str:
        return renames.get(node_id, node_id)

    from dataclasses import replace

    plot = PlotChanges(
        delete_relations=batch.plot.delete_relations,
        new_events=tuple(replace(n, id=rid(n.id)) for n in batch.plot.new_events),
        modified_events=batch.plot.modified_events,
        new_relations=tuple(
            replace(r, from_id=rid(r.from_id), to_id=rid(r.to_id)) for r in batch.plot.new_relations
        ),
    )
    characters = CharacterChanges(
        delete_relations=batch.characters.delete_relations,
        new_characters=tuple(replace(n, id=rid(n.id)) for n in batch.characters.new_characters),
        modified_characters=batch.characters.modified_characters,
        new_relations=tuple(
            replace(r, from_id=rid(r.from_id), to_id=rid(r.to_id)) for r in batch.characters.new_relations
        ),
    )
    warnings = tuple(f"new id {old!r} collided; renamed to {new!r}" for old, new in renames.items())
    return MutationBatch(batch.issue_id, plot, characters, batch.declared_op), warnings


def scope_check(batch: MutationBatch, issue: Issue, graph: JointGraph) -> str | None:
    """Return a scope-violation description, or None if the batch stays in scope.

    Every existing element a batch touches must be named in the issue's
    targets; ids the batch itself introduces are exempt.
    """
    allowed = issue.targets.referenced_ids() | batch.new_ids()
    existing = _existing_ids(graph)

    def check_id(node_id: str, role: str) -> str | None:
        if node_id in existing and node_id not in allowed:
            return f"{role} {node_id!r} is outside the issue's targets"
        return None

    for f, t in batch.plot.delete_relations + batch.characters.delete_relations:
        for endpoint in (f, t):
            problem = check_id(endpoint, "deleted relation endpoint")
            if problem:
                return problem
    for m in batch.plot.modified_events:
        problem = check_id(m.event_id, "modified event")
        if problem:
            return problem
    for m in batch.characters.modified_characters:
        problem = check_id(m.character_id, "modified character")
        if problem:
            return problem
    for r in batch.plot.new_relations:
        for endpoint in (r.from_id, r.to_id):
            problem = check_id(endpoint, "new relation endpoint")
            if problem:
                return problem
    for r in batch.characters.new_relations:
        for endpoint in (r.from_id, r.to_id):
            problem = check_id(endpoint, "new relation endpoint")
            if problem:
                return problem
    return None


def compile_edits(
    issues: Iterable[Issue], graph: JointGraph, provider: ChatClient
) -> list[CompiledEdit]:
    """One provider call for the whole issue list, one batch per issue.

    A batch that fails parsing, its own invariants, or the scope constraint is
    replaced by an error entry; the rest of the list is unaffected.
    """
    issues = list(issues)
    if not issues:
        return []
    value = joint_graph_to_value(graph)
    prompt = prompts.render(
        "edit_plan",
        event_graph=json.dumps(value["plot_graph"], ensure_ascii=False, indent=2),
        character_graph=json.dumps(value["character_graph"], ensure_ascii=False, indent=2),
        parsed_issues=json.dumps([i.to_dict() for i in issues], ensure_ascii=False, indent=2),
    )
    try:
        reply = request_structured(provider, prompt, stage="edit_plan")
    except ExtractionError as exc:
        rejection = Rejection(RejectionReason.COMPILE_ERROR, f"no parseable edit plan: {exc}")
        return [CompiledEdit(issue_id=i.issue_id, error=rejection) for i in issues]

    entries: dict[int, Mapping[str, Any]] = {}
    raw_entries = reply.get("issues", []) if isinstance(reply, Mapping) else []
    for item in raw_entries:
        if isinstance(item, Mapping) and "issue_id" in item:
            try:
                entries[int(item["issue_id"])] = item
            except (TypeError, ValueError):
                continue

    compiled: list[CompiledEdit] = []
    claimed: set[str] = set()
    for issue in issues:
        entry = entries.get(issue.issue_id)
        if entry is None:
            compiled.append(
                CompiledEdit(
                    issue_id=issue.issue_id,
                    error=Rejection(RejectionReason.COMPILE_ERROR, "edit plan has no entry for this issue"),
                )
            )
            continue
        try:
            batch = parse_batch_value(entry, issue.issue_id)
        except (KeyError, TypeError, ValueError, SchemaViolation) as exc:
            compiled.append(
                CompiledEdit(
                    issue_id=issue.issue_id,
                    error=Rejection(RejectionReason.COMPILE_ERROR, f"unparseable batch: {exc}"),
                )
            )
            continue
        duplicates = sorted({n for n in batch.new_ids() if _duplicate_within(batch, n)})
        if duplicates:
            compiled.append(
                CompiledEdit(
                    issue_id=issue.issue_id,
                    error=Rejection(
                        RejectionReason.COMPILE_ERROR, f"batch introduces duplicate new ids {duplicates}"
                    ),
                )
            )
            continue
        batch, warnings = _rename_collisions(batch, _existing_ids(graph) | frozenset(claimed))
        problem = scope_check(batch, issue, graph)
        if problem is not None:
            compiled.append(
                CompiledEdit(issue_id=issue.issue_id, error=Rejection(RejectionReason.SCOPE_VIOLATION, problem))
            )
            continue
        claimed.update(batch.new_ids())
        for warning in warnings:
            logger.warning("issue %d: %s", issue.issue_id, warning)
        compiled.append(CompiledEdit(issue_id=issue.issue_id, batch=batch, warnings=warnings))
    return compiled


def _duplicate_within(batch: MutationBatch, node_id: str) -> bool:
    count = sum(1 for n in batch.plot.new_events if n.id == node_id)
    count += sum(1 for n in batch.characters.new_characters if n.id == node_id)
    return count > 1


def _apply_mutations(graph: JointGraph, batch: MutationBatch) -> JointGraph:
    work = graph
    for f, t in batch.plot.delete_relations:
        work = mutate(work, DeleteEventRelation(f, t))
    for node in batch.plot.new_events:
        work = mutate(work, AddEvent(node))
    for m in batch.plot.modified_events:
        work = mutate(work, m)
    for rel in batch.plot.new_relations:
        work = mutate(work, AddEventRelation(rel))
    for f, t in batch.characters.delete_relations:
        work = mutate(work, DeleteCharacterRelation(f, t))
    for node in batch.characters.new_characters:
        work = mutate(work, AddCharacter(node))
    for m in batch.characters.modified_characters:
        work = mutate(work, m)
    for rel in batch.characters.new_relations:
        work = mutate(work, AddCharacterRelation(rel))
    return work


def _stage_consistent(candidate: JointGraph, batch: MutationBatch) -> tuple[bool, tuple[str, ...]]:
    eg = candidate.event_graph
    mismatched = []
    for node in batch.plot.new_events:
        neighbors = set(eg.successors(node.id, FLOW_LABELS)) | set(eg.predecessors(node.id, FLOW_LABELS))
        stages = {eg.event(n).stage for n in neighbors}
        if node.stage not in stages:
            mismatched.append(node.id)
    return (not mismatched, tuple(mismatched))


def stage_consistency_check(graph: JointGraph, batch: MutationBatch) -> bool:
    """True iff every new event matches the stage of a flow-adjacent neighbor
    after the batch is applied."""
    try:
        candidate = _apply_mutations(graph, batch)
    except MutationError:
        return False
    ok, _ = _stage_consistent(candidate, batch)
    return ok


def apply_batch(
    graph: JointGraph, batch: MutationBatch, *, strict_stage: bool = False
) -> tuple[EditOutcome, JointGraph]:
    """Apply one batch transactionally under the validator gate.

    Returns the outcome and the resulting graph: the edited value when
    accepted, the untouched input otherwise. Stage inconsistency is a warning
    by default and a rejection in strict mode.
    """
    try:
        candidate = _apply_mutations(graph, batch)
    except MutationError as exc:
        outcome = EditOutcome(
            issue_id=batch.issue_id,
            accepted=False,
            rejection=Rejection(RejectionReason.COMPILE_ERROR, f"mutation failed: {exc}"),
        )
        return outcome, graph

    report = validate(candidate.event_graph)
    if not report.passed:
        outcome = EditOutcome(
            issue_id=batch.issue_id,
            accepted=False,
            rejection=Rejection(RejectionReason.VALIDATION_FAILED, "post-edit constraints failed", report),
        )
        return outcome, graph

    stage_ok, mismatched = _stage_consistent(candidate, batch)
    warnings: tuple[str, ...] = ()
    if not stage_ok:
        detail = f"new events {list(mismatched)} match no flow-adjacent neighbor's stage"
        if strict_stage:
            outcome = EditOutcome(
                issue_id=batch.issue_id,
                accepted=False,
                rejection=Rejection(RejectionReason.VALIDATION_FAILED, f"stage consistency: {detail}"),
            )
            return outcome, graph
        warnings = (detail,)
        logger.warning("issue %d: %s", batch.issue_id, detail)

    return EditOutcome(issue_id=batch.issue_id, accepted=True, warnings=warnings), candidate
