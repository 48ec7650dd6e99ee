"""Stage 1: premise intake, thematic title, and the initial joint graph draft."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

from . import prompts
from .graph import JointGraph, StageLabel, parse_joint_graph_value
from .provider import ChatClient, ExtractionError, request_structured

logger = logging.getLogger(__name__)

#: Structural template the initial graph is asked to follow.
TEMPLATE_EVENT_COUNT = 10
TEMPLATE_CLIMAX_COUNT = 2

TITLE_MAX_WORDS = 12


@dataclass(frozen=True)
class Premise:
    id: str
    text: str
    genre: str | None = None
    source: str | None = None

    def __post_init__(self):
        if not self.text:
            raise ValueError("premise text must be non-empty")


def load_premise(path: str | Path) -> Premise:
    """Read one premise file: a JSON object with id/text and optional genre/source."""
    value = json.loads(Path(path).read_text(encoding="utf-8"))
    try:
        return Premise(
            id=str(value["id"]),
            text=str(value["text"]),
            genre=value.get("genre"),
            source=value.get("source"),
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"premise file {path} is missing required fields: {exc}") from exc


@dataclass(frozen=True)
class Title:
    """A generated title; the prompt asks for <= 7 words, we tolerate drift to 12."""

    text: str

    def __post_init__(self):
        if not self.text:
            raise ValueError("title must be non-empty")
        if len(self.text.split()) > TITLE_MAX_WORDS:
            raise ValueError(f"title exceeds {TITLE_MAX_WORDS} words: {self.text!r}")


@dataclass(frozen=True)
class PlannedGraph:
    """The parsed initial graph plus any structural-template deviations."""

    graph: JointGraph
    warnings: tuple[str, ...] = ()


def generate_title(premise: Premise, provider: ChatClient) -> Title:
    prompt = prompts.render("title", storyline=premise.text)

    def parse(value) -> Title:
        return Title(text=str(value["title"]).strip())

    return request_structured(provider, prompt, parse, stage="title")


def template_warnings(graph: JointGraph) -> tuple[str, ...]:
    """Deviations from the requested 10-event / two-Climax structure.

    These are warnings, never errors: refinement changes counts anyway.
    """
    events = graph.event_graph.events
    warnings = []
    if len(events) != TEMPLATE_EVENT_COUNT:
        warnings.append(f"expected {TEMPLATE_EVENT_COUNT} events, got {len(events)}")
    if events and events[0].stage is not StageLabel.BEGINNING:
        warnings.append(f"first event {events[0].id!r} has stage {events[0].stage.value!r}, not Beginning")
    if events and events[-1].stage is not StageLabel.ENDING:
        warnings.append(f"last event {events[-1].id!r} has stage {events[-1].stage.value!r}, not Ending")
    climaxes = sum(1 for e in events if e.stage is StageLabel.CLIMAX)
    if climaxes != TEMPLATE_CLIMAX_COUNT:
        warnings.append(f"expected {TEMPLATE_CLIMAX_COUNT} Climax events, got {climaxes}")
    return tuple(warnings)


def generate_initial_graph(title: Title, premise: Premise, provider: ChatClient) -> PlannedGraph:
    """Draft the initial joint graph from the premise.

    Replies that are not JSON are re-asked within the retry budget; schema
    violations in otherwise well-formed replies propagate unchanged. The
    returned graph is exactly the parsed graph; template deviations are
    reported as warnings alongside it.
    """
    prompt = prompts.render("story_graph", title=title.text, premise=premise.text)
    graph = request_structured(
        provider,
        prompt,
        parse_joint_graph_value,
        stage="plan_graph",
        retry_on=(ExtractionError,),
    )
    warnings = template_warnings(graph)
    for warning in warnings:
        logger.warning("initial graph template deviation: %s", warning)
    return PlannedGraph(graph=graph, warnings=warnings)
