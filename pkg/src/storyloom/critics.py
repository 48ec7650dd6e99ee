"""Stage 2 diagnosis: the three critique agents plus deterministic rule critics.

The prompt-driven agents run their sub-analyses through the provider and emit
structured issues. The rule critics are purely structural stand-ins so the
whole refinement loop can run and be tested offline; they implement only the
detectors that need no semantics.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Mapping

from . import prompts
from .graph import (
    EventRelationLabel,
    JointGraph,
    RelationCategory,
    StageLabel,
    joint_graph_to_value,
)
from .provider import ChatClient, ExtractionError, ProviderError, request_structured

logger = logging.getLogger(__name__)


class AgentKind(str, Enum):
    THEME = "Theme"
    CHARACTER = "Character"
    PLOT = "Plot"


#: Critics always execute in this order.
AGENT_ORDER = (AgentKind.THEME, AgentKind.CHARACTER, AgentKind.PLOT)


class IssueType(str, Enum):
    THEME_DIRECT = "Theme-Direct"
    THEME_VAGUE = "Theme-Vague"
    ARC_ABRUPT = "Arc-Abrupt"
    MOTIVE_WEAK = "Motive-Weak"
    ONE_DIMENSIONAL = "One-Dimensional"
    DISCONTINUITY = "Discontinuity"
    NO_SUSPENSE = "No-Suspense"
    NO_FORESHADOW = "No-Foreshadow"
    NO_TURNING_POINT = "No-Turning-Point"
    RELATION_INCONSISTENT = "Relation-Inconsistent"

    @classmethod
    def parse(cls, text: str) -> "IssueType":
        key = str(text).strip().lower()
        for member in cls:
            if member.value.lower() == key:
                return member
        raise ValueError(f"unknown issue type {text!r}")

    @property
    def owner(self) -> AgentKind:
        return _ISSUE_OWNERS[self]


_ISSUE_OWNERS = {
    IssueType.THEME_DIRECT: AgentKind.THEME,
    IssueType.THEME_VAGUE: AgentKind.THEME,
    IssueType.ARC_ABRUPT: AgentKind.CHARACTER,
    IssueType.MOTIVE_WEAK: AgentKind.CHARACTER,
    IssueType.ONE_DIMENSIONAL: AgentKind.CHARACTER,
    IssueType.DISCONTINUITY: AgentKind.PLOT,
    IssueType.NO_SUSPENSE: AgentKind.PLOT,
    IssueType.NO_FORESHADOW: AgentKind.PLOT,
    IssueType.NO_TURNING_POINT: AgentKind.PLOT,
    IssueType.RELATION_INCONSISTENT: AgentKind.PLOT,
}

TYPES_BY_AGENT = {
    kind: tuple(t for t, owner in _ISSUE_OWNERS.items() if owner is kind) for kind in AgentKind
}

# One sub-analysis per prompt family; each asks for at most one issue.
_SUB_ANALYSES: dict[AgentKind, tuple[str, ...]] = {
    AgentKind.THEME: ("critic_theme_vague", "critic_theme_direct"),
    AgentKind.CHARACTER: ("critic_character_motive", "critic_character_flat", "critic_character_arc"),
    AgentKind.PLOT: (
        "critic_plot_continuity",
        "critic_plot_suspense",
        "critic_plot_foreshadow",
        "critic_plot_reversal",
        "critic_plot_relations",
    ),
}


@dataclass(frozen=True)
class IssueTargets:
    node_ids: tuple[str, ...] = ()
    relation_refs: tuple[tuple[str, str], ...] = ()

    def referenced_ids(self) -> frozenset[str]:
        ids = set(self.node_ids)
        for from_id, to_id in self.relation_refs:
            ids.add(from_id)
            ids.add(to_id)
        return frozenset(ids)


@dataclass(frozen=True)
class Issue:
    """A structured diagnosis: all five components are always present."""

    issue_id: int
    type: IssueType
    description: str
    suggestion: str
    modification: str
    targets: IssueTargets = field(default_factory=IssueTargets)

    def to_dict(self) -> dict[str, Any]:
        return {
            "issue_id": self.issue_id,
            "type": self.type.value,
            "description": self.description,
            "suggestion": self.suggestion,
            "modification": self.modification,
            "involved_nodes": list(self.targets.node_ids),
            "involved_relations": [{"from": f, "to": t} for f, t in self.targets.relation_refs],
        }


@dataclass(frozen=True)
class CriticReport:
    agent: AgentKind
    issues: tuple[Issue, ...] = ()
    warnings: tuple[str, ...] = ()
    errors: tuple[str, ...] = ()


def _parse_issue_value(value: Any, issue_id: int) -> Issue:
    if not isinstance(value, Mapping):
        raise ValueError("issue must be an object")
    nodes = value.get("involved_nodes", [])
    relations = value.get("involved_relations", [])
    refs = []
    for item in relations:
        if isinstance(item, Mapping):
            refs.append((str(item["from"]), str(item["to"])))
        else:
            refs.append((str(item[0]), str(item[1])))
    for key in ("type", "description", "suggestion", "modification"):
        if key not in value:
            raise ValueError(f"issue is missing its {key!r} component")
    return Issue(
        issue_id=issue_id,
        type=IssueType.parse(value["type"]),
        description=str(value["description"]),
        suggestion=str(value["suggestion"]),
        modification=str(value["modification"]),
        targets=IssueTargets(node_ids=tuple(str(n) for n in nodes), relation_refs=tuple(refs)),
    )


def _targets_resolve(targets: IssueTargets, graph: JointGraph) -> bool:
    event_ids = set(graph.event_graph.event_ids())
    character_ids = set(graph.character_graph.character_ids())
    for node_id in targets.node_ids:
        if node_id not in event_ids and node_id not in character_ids:
            return False
    event_pairs = {(r.from_id, r.to_id) for r in graph.event_graph.relations}
    character_pairs = {(r.from_id, r.to_id) for r in graph.character_graph.relations}
    for ref in targets.relation_refs:
        if ref not in event_pairs and ref not in character_pairs:
            return False
    return True


def _graph_json(graph: JointGraph) -> tuple[str, str]:
    value = joint_graph_to_value(graph)
    return (
        json.dumps(value["plot_graph"], ensure_ascii=False, indent=2),
        json.dumps(value["character_graph"], ensure_ascii=False, indent=2),
    )


def run_critic(kind: AgentKind, graph: JointGraph, provider: ChatClient) -> CriticReport:
    """Run every sub-analysis of one agent; at most one issue per sub-prompt.

    Issues with a type not owned by this agent, missing components, or targets
    that do not resolve in the graph are dropped with a warning. Provider or
    extraction failures on a sub-prompt are recorded as errors and the
    remaining sub-prompts still run.
    """
    event_json, character_json = _graph_json(graph)
    issues: list[Issue] = []
    warnings: list[str] = []
    errors: list[str] = []
    for template in _SUB_ANALYSES[kind]:
        prompt = prompts.render(template, event_graph=event_json, character_graph=character_json)
        try:
            value = request_structured(provider, prompt, stage=f"critic_{kind.value.lower()}")
        except (ProviderError, ExtractionError) as exc:
            errors.append(f"{template}: {exc}")
            continue
        raw_issues = value.get("issues", []) if isinstance(value, Mapping) else []
        for raw in raw_issues[:1]:
            try:
                issue = _parse_issue_value(raw, issue_id=len(issues) + 1)
            except (ValueError, KeyError, TypeError) as exc:
                warnings.append(f"{template}: dropped malformed issue ({exc})")
                continue
            if issue.type.owner is not kind:
                warnings.append(
                    f"{template}: dropped issue of type {issue.type.value!r} not owned by {kind.value}"
                )
                continue
            if not _targets_resolve(issue.targets, graph):
                warnings.append(f"{template}: dropped issue with unresolvable targets {issue.targets}")
                continue
            issues.append(issue)
    for warning in warnings:
        logger.warning("%s critic: %s", kind.value, warning)
    return CriticReport(agent=kind, issues=tuple(issues), warnings=tuple(warnings), errors=tuple(errors))


def _rule_plot_issues(graph: JointGraph) -> list[Issue]:
    eg = graph.event_graph
    issues: list[Issue] = []

    def add(issue_type: IssueType, description: str, suggestion: str, modification: str, targets: IssueTargets):
        issues.append(
            Issue(
                issue_id=len(issues) + 1,
                type=issue_type,
                description=description,
                suggestion=suggestion,
                modification=modification,
                targets=targets,
            )
        )

    # Discontinuity: time-consecutive events with no flow edge either way.
    chrono = sorted(eg.events, key=lambda e: (e.time.sort_key(), eg.insertion_index(e.id)))
    flow_pairs = {(r.from_id, r.to_id) for r in eg.relations if r.label in (EventRelationLabel.CAUSAL, EventRelationLabel.SUSPENSE)}
    for a, b in zip(chrono, chrono[1:]):
        if (a.id, b.id) not in flow_pairs and (b.id, a.id) not in flow_pairs:
            add(
                IssueType.DISCONTINUITY,
                f"Events {a.id} and {b.id} are consecutive in time but share no causal or suspense link.",
                f"Bridge the gap between {a.id} and {b.id} with a connecting development.",
                "Add-Plot-Bridge: insert an intermediate event linking the pair causally.",
                IssueTargets(node_ids=(a.id, b.id)),
            )

    # No-Suspense: no suspense edges anywhere.
    if eg.events and not any(r.label is EventRelationLabel.SUSPENSE for r in eg.relations):
        first, last = eg.events[0].id, eg.events[-1].id
        add(
            IssueType.NO_SUSPENSE,
            "The event graph carries no suspense relations; every question is answered as soon as it is raised.",
            "Establish an open question early whose answer lands late.",
            "Add-Suspense: add a suspense relation spanning the setup and a later peak.",
            IssueTargets(node_ids=(first, last) if first != last else (first,)),
        )

    # No-Foreshadow: a Climax node with no incoming foreshadowing edge. The
    # chronologically first event is targeted too so a repair has an in-scope
    # anchor to plant the setup on.
    for node in eg.events:
        if node.stage is not StageLabel.CLIMAX:
            continue
        if not any(r.to_id == node.id and r.label is EventRelationLabel.FORESHADOWING for r in eg.relations):
            anchor = chrono[0].id if chrono and chrono[0].id != node.id else None
            targets = (anchor, node.id) if anchor else (node.id,)
            add(
                IssueType.NO_FORESHADOW,
                f"Climax {node.id} arrives with no planted setup pointing at it.",
                f"Seed an earlier event with a detail that pays off at {node.id}.",
                "Add-Foreshadow: add a foreshadowing relation from an earlier event into the climax.",
                IssueTargets(node_ids=targets),
            )

    # Relation-Inconsistent: same ordered character pair with both Conflict
    # and Cooperative relations.
    by_pair: dict[tuple[str, str], set[RelationCategory]] = {}
    for rel in graph.character_graph.relations:
        if rel.category is not None:
            by_pair.setdefault((rel.from_id, rel.to_id), set()).add(rel.category)
    for (from_id, to_id), categories in by_pair.items():
        if RelationCategory.CONFLICT in categories and RelationCategory.COOPERATIVE in categories:
            add(
                IssueType.RELATION_INCONSISTENT,
                f"Characters {from_id} and {to_id} are simultaneously in open conflict and open cooperation.",
                "Pick one face of the relationship to be real and make the other a cover or a phase.",
                "Revise-Event: adjust the contradictory relation or the events that establish it.",
                IssueTargets(node_ids=(from_id, to_id), relation_refs=((from_id, to_id),)),
            )
    return issues


def run_rule_critic(kind: AgentKind, graph: JointGraph) -> CriticReport:
    """Deterministic structural detectors; identical graphs yield identical issues.

    Theme and Character criteria are semantic, so those agents return nothing
    here. The Plot agent detects missing suspense, unforeshadowed climaxes,
    time-consecutive events with no flow link, and contradictory character pairs.
    """
    if kind is not AgentKind.PLOT:
        return CriticReport(agent=kind)
    return CriticReport(agent=kind, issues=tuple(_rule_plot_issues(graph)))


def run_all_critics(
    graph: JointGraph,
    provider: ChatClient | None,
    enabled: Iterable[AgentKind] = AGENT_ORDER,
    *,
    rule_based: bool = False,
) -> list[CriticReport]:
    """Run enabled agents in the fixed order, aggregating per-agent failures."""
    enabled_set = frozenset(enabled)
    reports = []
    for kind in AGENT_ORDER:
        if kind not in enabled_set:
            continue
        if rule_based:
            reports.append(run_rule_critic(kind, graph))
        else:
            if provider is None:
                raise ValueError("prompt-driven critics need a provider")
            reports.append(run_critic(kind, graph, provider))
    return reports


def issues_to_json(issues: Iterable[Issue]) -> str:
    return json.dumps([issue.to_dict() for issue in issues], ensure_ascii=False, indent=2)
