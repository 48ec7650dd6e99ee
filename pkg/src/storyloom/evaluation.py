"""Counterbalanced pairwise comparison of two scripts by a judge model.

Each comparison descriptor (premise, level, dimension) is assigned a
presentation order so position bias distributes evenly across methods; the
judge's slot verdict is mapped back through that order to a method identity
before tallying. Unparseable or failed judgments are abstentions: excluded
from percentages but counted.
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass
from enum import Enum
from typing import Any, Iterable, Mapping, Sequence

from . import prompts
from .provider import ChatClient, ExtractionError, ProviderError, request_structured
from .synthesis import Script

logger = logging.getLogger(__name__)


class Dimension(str, Enum):
    NARRATIVE = "Narrative"
    THEMATIC_EXPRESSION = "Thematic Expression"
    CHARACTERIZATION = "Characterization"
    DRAMATIC_ENGAGEMENT = "Dramatic Engagement"
    PREMISE_FIDELITY = "Premise Fidelity"

    @property
    def rubric(self) -> str:
        return RUBRICS[self]


RUBRICS: dict[Dimension, str] = {
    Dimension.NARRATIVE: (
        "Assess the narrative on these criteria:\n"
        "- Plot continuity: smooth transitions between events with clear causal linkage\n"
        "- Logical consistency: coherent setups, world-building, storyline progression, and character behavior\n"
        "- Dramatic structure: a complete arc (exposition, rising action, climax, falling action, resolution)"
    ),
    Dimension.THEMATIC_EXPRESSION: (
        "Assess the thematic development on these criteria:\n"
        "- Theme clarity: a clear, consistent central theme throughout\n"
        "- Theme depth: sophisticated, nuanced exploration of the theme\n"
        "- Artistic reinforcement: metaphor, symbolism, and narrative devices that enrich the theme"
    ),
    Dimension.CHARACTERIZATION: (
        "Assess character portrayal on these criteria:\n"
        "- Motivation credibility: clear, believable motivations driving actions\n"
        "- Character depth: emotional and psychological complexity; well-rounded figures\n"
        "- Character development: real growth or transformation with natural pacing"
    ),
    Dimension.DRAMATIC_ENGAGEMENT: (
        "Assess dramatic tension and engagement on these criteria:\n"
        "- Event design: compelling events that sustain interest\n"
        "- Suspense construction: effective foreshadowing, hints, and delayed revelations\n"
        "- Narrative pacing: significant turning points that shift stakes or trajectories\n"
        "- Tension management: skillful buildup and release of tension throughout"
    ),
    Dimension.PREMISE_FIDELITY: (
        "Assess adherence to the original premise on these criteria:\n"
        "- Conceptual fidelity: faithfulness to the premise's core idea and thematic direction\n"
        "- Element retention: primary settings, characters, and central conflicts are kept"
    ),
}


class ComparisonLevel(str, Enum):
    STORYLINE = "Storyline"
    FULL_SCRIPT = "FullScript"


class PresentedOrder(str, Enum):
    AB = "AB"
    BA = "BA"


class VerdictValue(str, Enum):
    A = "A"
    B = "B"
    SAME = "Same"

    @classmethod
    def parse(cls, text: str) -> "VerdictValue":
        key = str(text).strip().lower()
        for member in cls:
            if member.value.lower() == key:
                return member
        raise ValueError(f"unknown verdict {text!r}")


@dataclass(frozen=True)
class Verdict:
    value: VerdictValue
    explanation: str = ""


@dataclass(frozen=True)
class ComparisonInput:
    """One judging request before order assignment. ``method_x`` is the
    canonical first method (e.g. ours), ``method_y`` the other."""

    premise_id: str
    level: ComparisonLevel
    dimension: Dimension
    method_x: str
    method_y: str


@dataclass(frozen=True)
class ComparisonTask:
    """A judging request with its presentation order fixed for the audit trail."""

    premise_id: str
    level: ComparisonLevel
    dimension: Dimension
    presented_order: PresentedOrder
    method_a_slot: str
    method_b_slot: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "premise_id": self.premise_id,
            "level": self.level.value,
            "dimension": self.dimension.value,
            "presented_order": self.presented_order.value,
            "method_a_slot": self.method_a_slot,
            "method_b_slot": self.method_b_slot,
        }


@dataclass(frozen=True)
class JudgedTask:
    task: ComparisonTask
    verdict: Verdict | None
    winner: str | None  # method label; None means tie or abstention
    abstained: bool = False
    abstain_reason: str = ""

    def to_dict(self) -> dict[str, Any]:
        out = self.task.to_dict()
        out.update(
            {
                "verdict": self.verdict.value.value if self.verdict else None,
                "explanation": self.verdict.explanation if self.verdict else "",
                "winner": self.winner,
                "abstained": self.abstained,
                "abstain_reason": self.abstain_reason,
            }
        )
        return out


def counterbalance(inputs: Sequence[ComparisonInput], seed: int) -> list[ComparisonTask]:
    """Assign AB/BA orders: deterministic under the seed, split sizes differ by
    at most one, and the assignment never depends on method identity."""
    rng = random.Random(seed)
    n = len(inputs)
    n_ab = n // 2
    if n % 2:
        n_ab += rng.choice((0, 1))
    orders = [PresentedOrder.AB] * n_ab + [PresentedOrder.BA] * (n - n_ab)
    rng.shuffle(orders)
    tasks = []
    for item, order in zip(inputs, orders):
        if order is PresentedOrder.AB:
            slot_a, slot_b = item.method_x, item.method_y
        else:
            slot_a, slot_b = item.method_y, item.method_x
        tasks.append(
            ComparisonTask(
                premise_id=item.premise_id,
                level=item.level,
                dimension=item.dimension,
                presented_order=order,
                method_a_slot=slot_a,
                method_b_slot=slot_b,
            )
        )
    return tasks


def resolve(task: ComparisonTask, verdict: Verdict) -> str | None:
    """Map a slot verdict back to the winning method label; None is a tie."""
    if verdict.value is VerdictValue.A:
        return task.method_a_slot
    if verdict.value is VerdictValue.B:
        return task.method_b_slot
    return None


@dataclass(frozen=True)
class RenderedContent:
    premise: str
    title: str
    body: str


def render_storyline(script: Script) -> RenderedContent:
    body = "\n".join(f"{scene.index}. {scene.beat.beat}" for scene in script.scenes)
    return RenderedContent(premise=script.premise.text, title=script.title, body=body)


def render_full_script(script: Script) -> RenderedContent:
    parts = []
    for scene in script.scenes:
        parts.append(
            "\n".join(
                [
                    f"Scene {scene.index}",
                    f"Place: {scene.beat.place}",
                    f"Plot element: {scene.beat.plot_element}",
                    f"Beat: {scene.beat.beat}",
                    f"Description: {scene.scene_description}",
                    "Dialogue:",
                ]
                + list(scene.dialogue)
            )
        )
    return RenderedContent(premise=script.premise.text, title=script.title, body="\n\n".join(parts))


def judge_prompt(task: ComparisonTask, content_a: RenderedContent, content_b: RenderedContent) -> str:
    template = "judge_storyline" if task.level is ComparisonLevel.STORYLINE else "judge_full_script"
    return prompts.render(
        template,
        dimension=task.dimension.value,
        rubric=task.dimension.rubric,
        premise_a=content_a.premise,
        title_a=content_a.title,
        body_a=content_a.body,
        premise_b=content_b.premise,
        title_b=content_b.title,
        body_b=content_b.body,
    )


def judge(
    task: ComparisonTask,
    content_a: RenderedContent,
    content_b: RenderedContent,
    provider: ChatClient,
) -> JudgedTask:
    """One judge call; the slot verdict is resolved to a method identity.

    Failures become abstentions rather than aborting an evaluation run.
    """
    prompt = judge_prompt(task, content_a, content_b)

    def parse(value) -> Verdict:
        return Verdict(value=VerdictValue.parse(value["verdict"]), explanation=str(value.get("explanation", "")))

    try:
        verdict = request_structured(provider, prompt, parse, stage="judge")
    except (ProviderError, ExtractionError) as exc:
        logger.warning("judge abstained on %s/%s: %s", task.dimension.value, task.level.value, exc)
        return JudgedTask(task=task, verdict=None, winner=None, abstained=True, abstain_reason=str(exc))
    return JudgedTask(task=task, verdict=verdict, winner=resolve(task, verdict))


@dataclass(frozen=True)
class TallyCell:
    counts: dict[str, int]
    ties: int
    abstentions: int

    def percentages(self) -> dict[str, float]:
        judged = sum(self.counts.values()) + self.ties
        if judged == 0:
            return {label: 0.0 for label in self.counts} | {"ties": 0.0}
        out = {label: 100.0 * count / judged for label, count in self.counts.items()}
        out["ties"] = 100.0 * self.ties / judged
        return out


@dataclass(frozen=True)
class TallyTable:
    method_x: str
    method_y: str
    cells: dict[tuple[Dimension, ComparisonLevel], TallyCell]

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"methods": [self.method_x, self.method_y], "cells": {}}
        for (dimension, level), cell in sorted(
            self.cells.items(), key=lambda kv: (kv[0][0].value, kv[0][1].value)
        ):
            key = f"{dimension.value}/{level.value}"
            out["cells"][key] = {
                "wins": dict(cell.counts),
                "ties": cell.ties,
                "abstentions": cell.abstentions,
                "percentages": cell.percentages(),
            }
        return out


def tally(judged: Iterable[JudgedTask], method_x: str, method_y: str) -> TallyTable:
    cells: dict[tuple[Dimension, ComparisonLevel], dict[str, Any]] = {}
    for item in judged:
        key = (item.task.dimension, item.task.level)
        cell = cells.setdefault(key, {"counts": {method_x: 0, method_y: 0}, "ties": 0, "abstentions": 0})
        if item.abstained:
            cell["abstentions"] += 1
        elif item.winner is None:
            cell["ties"] += 1
        else:
            cell["counts"][item.winner] += 1
    return TallyTable(
        method_x=method_x,
        method_y=method_y,
        cells={
            key: TallyCell(counts=value["counts"], ties=value["ties"], abstentions=value["abstentions"])
            for key, value in cells.items()
        },
    )


def comparison_inputs(premise_id: str, method_x: str, method_y: str) -> list[ComparisonInput]:
    """The full 2x5 descriptor grid for one premise pair."""
    return [
        ComparisonInput(premise_id=premise_id, level=level, dimension=dimension, method_x=method_x, method_y=method_y)
        for level in ComparisonLevel
        for dimension in Dimension
    ]


def run_comparison(
    script_x: Script,
    script_y: Script,
    *,
    method_x: str,
    method_y: str,
    seed: int,
    provider: ChatClient | None = None,
    scripted_verdicts: Sequence[Mapping[str, Any]] | None = None,
) -> tuple[list[ComparisonTask], list[JudgedTask], TallyTable]:
    """Judge one pair of scripts across every level and dimension.

    ``scripted_verdicts`` replays canned slot-level verdicts in task order
    instead of calling a provider (the offline audit path).
    """
    if (provider is None) == (scripted_verdicts is None):
        raise ValueError("exactly one of provider/scripted_verdicts is required")
    tasks = counterbalance(comparison_inputs(script_x.premise.id, method_x, method_y), seed)
    contents = {
        method_x: {
            ComparisonLevel.STORYLINE: render_storyline(script_x),
            ComparisonLevel.FULL_SCRIPT: render_full_script(script_x),
        },
        method_y: {
            ComparisonLevel.STORYLINE: render_storyline(script_y),
            ComparisonLevel.FULL_SCRIPT: render_full_script(script_y),
        },
    }
    judged: list[JudgedTask] = []
    for i, task in enumerate(tasks):
        content_a = contents[task.method_a_slot][task.level]
        content_b = contents[task.method_b_slot][task.level]
        if scripted_verdicts is not None:
            judged.append(replay_verdict(task, scripted_verdicts[i] if i < len(scripted_verdicts) else None))
        else:
            judged.append(judge(task, content_a, content_b, provider))
    return tasks, judged, tally(judged, method_x, method_y)


def replay_verdict(task: ComparisonTask, value: Mapping[str, Any] | None) -> JudgedTask:
    """Turn one canned slot-level verdict record into a judged task."""
    if value is None:
        return JudgedTask(task=task, verdict=None, winner=None, abstained=True, abstain_reason="no fixture verdict")
    try:
        verdict = Verdict(value=VerdictValue.parse(value["verdict"]), explanation=str(value.get("explanation", "")))
    except (KeyError, ValueError, TypeError) as exc:
        return JudgedTask(task=task, verdict=None, winner=None, abstained=True, abstain_reason=str(exc))
    return JudgedTask(task=task, verdict=verdict, winner=resolve(task, verdict))


def load_verdict_fixture(text: str) -> list[dict[str, Any]]:
    """Parse a JSONL fixture of slot-level verdicts."""
    return [json.loads(line) for line in text.splitlines() if line.strip()]
