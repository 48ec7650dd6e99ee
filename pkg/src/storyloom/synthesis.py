"""Stage 3 back half: beat generation and memory-threaded scene realization.

Beats come from one provider call covering the whole plan. Scenes are then
realized strictly in order: a description call conditioned on the event's
graph context, a dialogue call conditioned on the rolling narrative memory,
then a memory update. The memory is never lost: if the provider cannot
summarize, a deterministic concatenation fallback steps in.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Any, Mapping

from . import prompts
from .planning import Premise, Title
from .provider import ChatClient, ExtractionError, ProviderError, request_structured
from .serialize import CharacterProfiles, EventPlan

logger = logging.getLogger(__name__)

MIN_DIALOGUE_LINES = 8
MEMORY_CHAR_BUDGET = 4000


class CountMismatch(Exception):
    """Beat count differs from the event count (strict mode only)."""


@dataclass(frozen=True)
class SceneBeat:
    place: str
    plot_element: str
    beat: str

    def __post_init__(self):
        for name in ("place", "plot_element", "beat"):
            if not getattr(self, name):
                raise ValueError(f"scene beat field {name!r} must be non-empty")

    def to_dict(self) -> dict[str, str]:
        return {"place": self.place, "plot_element": self.plot_element, "beat": self.beat}


@dataclass(frozen=True)
class Scene:
    index: int
    beat: SceneBeat
    scene_description: str
    dialogue: tuple[str, ...]

    def to_dict(self) -> dict[str, Any]:
        return {
            "index": self.index,
            "place": self.beat.place,
            "plot_element": self.beat.plot_element,
            "beat": self.beat.beat,
            "scene_description": self.scene_description,
            "dialogue": list(self.dialogue),
        }


@dataclass(frozen=True)
class NarrativeMemory:
    summary: str = ""
    scene_count_covered: int = 0


EMPTY_MEMORY = NarrativeMemory()


@dataclass(frozen=True)
class Script:
    title: str
    premise: Premise
    scenes: tuple[Scene, ...]
    memory_snapshots: tuple[NarrativeMemory, ...]

    def __post_init__(self):
        if [s.index for s in self.scenes] != list(range(1, len(self.scenes) + 1)):
            raise ValueError("scenes must be contiguous starting at 1")
        if len(self.memory_snapshots) != len(self.scenes):
            raise ValueError("one memory snapshot per scene is required")

    def to_dict(self) -> dict[str, Any]:
        return {
            "title": self.title,
            "premise": {
                "id": self.premise.id,
                "text": self.premise.text,
                "genre": self.premise.genre,
                "source": self.premise.source,
            },
            "scenes": [s.to_dict() for s in self.scenes],
            "memory_snapshots": [
                {"summary": m.summary, "scene_count_covered": m.scene_count_covered}
                for m in self.memory_snapshots
            ],
        }


def script_from_dict(value: Mapping[str, Any]) -> Script:
    premise = value["premise"]
    scenes = tuple(
        Scene(
            index=int(s["index"]),
            beat=SceneBeat(place=s["place"], plot_element=s["plot_element"], beat=s["beat"]),
            scene_description=s["scene_description"],
            dialogue=tuple(s["dialogue"]),
        )
        for s in value["scenes"]
    )
    return Script(
        title=value["title"],
        premise=Premise(
            id=premise["id"], text=premise["text"], genre=premise.get("genre"), source=premise.get("source")
        ),
        scenes=scenes,
        memory_snapshots=tuple(
            NarrativeMemory(summary=m["summary"], scene_count_covered=int(m["scene_count_covered"]))
            for m in value["memory_snapshots"]
        ),
    )


def _parse_beats(value: Any) -> list[SceneBeat]:
    if isinstance(value, Mapping):
        value = value.get("scenes", value.get("beats"))
    if not isinstance(value, (list, tuple)):
        raise ValueError("beat reply must be a JSON list")
    return [
        SceneBeat(
            place=str(item["place"]),
            plot_element=str(item["plot_element"]),
            beat=str(item["beat"]),
        )
        for item in value
    ]


def generate_beats(
    plan: EventPlan,
    profiles: CharacterProfiles,
    title: Title,
    premise: Premise,
    provider: ChatClient,
    *,
    plan_text: str | None = None,
    strict: bool = False,
) -> list[SceneBeat]:
    """One beat per planned event, in plan order.

    A count-mismatched reply is re-asked within the retry budget; after that,
    strict mode raises :class:`CountMismatch` while default mode truncates or
    pads with placeholder beats and warns.
    """
    expected = len(plan.ordered_events)
    prompt = prompts.render(
        "scene_beats",
        title=title.text,
        premise=premise.text,
        plot_description=plan_text if plan_text is not None else json.dumps(plan.to_dict(), indent=2),
        character_description=json.dumps(
            {name: p.description for name, p in profiles.profiles.items()}, ensure_ascii=False, indent=2
        ),
    )

    def parse(value) -> list[SceneBeat]:
        beats = _parse_beats(value)
        if len(beats) != expected:
            raise ValueError(f"expected {expected} beats, got {len(beats)}")
        return beats

    try:
        return request_structured(provider, prompt, parse, stage="beats")
    except ExtractionError as exc:
        # Salvage the last reply if it at least parsed as a beat list.
        try:
            beats = _parse_beats_from_raw(exc.raw)
        except (ValueError, KeyError, TypeError, ExtractionError):
            raise exc from None
        if strict:
            raise CountMismatch(f"expected {expected} beats, got {len(beats)} after retries") from exc
        logger.warning("beat count %d != %d events; adjusting", len(beats), expected)
        if len(beats) > expected:
            return beats[:expected]
        filler = [
            SceneBeat(place="(unspecified)", plot_element="(missing beat)", beat=f"Beat for event {event_id}")
            for event_id in plan.ordered_events[len(beats):]
        ]
        return beats + filler


def _parse_beats_from_raw(raw: str) -> list[SceneBeat]:
    from .provider import extract_json

    return _parse_beats(extract_json(raw))


def _graph_context(plan: EventPlan, index: int) -> str:
    event_id = plan.ordered_events[index - 1]
    lines = [f"This scene realizes event {event_id} (position {index} of {len(plan.ordered_events)})."]
    if index >= 2:
        prev = plan.ordered_events[index - 2]
        labels = plan.annotations[index - 2]
        if labels:
            lines.append(f"It follows {prev} via: {', '.join(labels)}.")
        else:
            lines.append(f"It follows {prev} in presentation order (no direct link).")
    for f, t, label in plan.cross_refs:
        if f == event_id or t == event_id:
            lines.append(f"Cross-link: {f} -> {t} ({label}).")
    for f, t in plan.foreshadow_cues:
        if f == event_id:
            lines.append(f"This event plants a setup that pays off at {t}.")
        if t == event_id:
            lines.append(f"A setup planted at {f} pays off here.")
    return "\n".join(lines)


def _scene_characters(
    beat: SceneBeat, profiles: CharacterProfiles, *, subset: bool
) -> dict[str, str]:
    everyone = {name: p.description for name, p in profiles.profiles.items()}
    if not subset:
        return everyone
    haystack = f"{beat.beat} {beat.plot_element}".lower()
    named = {
        name: desc
        for name, desc in everyone.items()
        if any(part and part.lower() in haystack for part in name.split())
    }
    return named or everyone


def realize_scene(
    beat: SceneBeat,
    index: int,
    plan: EventPlan,
    profiles: CharacterProfiles,
    memory: NarrativeMemory,
    provider: ChatClient,
    *,
    strict: bool = False,
    subset_characters: bool = True,
) -> tuple[Scene, list[str]]:
    """Two provider calls (description, then dialogue) assembled into a Scene.

    In non-strict mode an unusable sub-reply becomes an error marker carrying
    the raw text, so a scene always materializes. Fewer than
    ``MIN_DIALOGUE_LINES`` dialogue lines is a warning, never an error.
    """
    warnings: list[str] = []
    characters = _scene_characters(beat, profiles, subset=subset_characters)

    description_prompt = prompts.render(
        "scene_description",
        place=beat.place,
        plot_element=beat.plot_element,
        beat=beat.beat,
        scene_index=index,
        graph_context=_graph_context(plan, index),
    )
    try:
        description = str(
            request_structured(provider, description_prompt, lambda v: v["scene_description"], stage="scene_description")
        )
    except ExtractionError as exc:
        if strict:
            raise
        warnings.append(f"scene {index}: unusable description reply")
        description = f"[description unavailable] {exc.raw}".strip()

    constraints = {
        name: "Stay consistent with the narrative memory and this character's profile."
        for name in characters
    }
    dialogue_prompt = prompts.render(
        "dialogue",
        place=beat.place,
        plot_element=beat.plot_element,
        beat=beat.beat,
        characters=json.dumps(characters, ensure_ascii=False, indent=2),
        memory_summary=memory.summary or "(no prior scenes)",
        character_constraints=json.dumps(constraints, ensure_ascii=False, indent=2),
    )

    def parse_dialogue(value) -> tuple[str, ...]:
        lines = value["dialogue"]
        if not isinstance(lines, (list, tuple)):
            raise ValueError("dialogue must be a list of lines")
        return tuple(str(line) for line in lines)

    try:
        dialogue = request_structured(provider, dialogue_prompt, parse_dialogue, stage="dialogue")
    except ExtractionError as exc:
        if strict:
            raise
        warnings.append(f"scene {index}: unusable dialogue reply")
        dialogue = (f"[dialogue unavailable] {exc.raw}".strip(),)

    if len(dialogue) < MIN_DIALOGUE_LINES:
        warnings.append(
            f"scene {index}: {len(dialogue)} dialogue lines, below the {MIN_DIALOGUE_LINES}-line target"
        )
    for warning in warnings:
        logger.warning("%s", warning)
    return Scene(index=index, beat=beat, scene_description=description, dialogue=dialogue), warnings


def _fallback_summary(memory: NarrativeMemory, scene: Scene) -> str:
    entry = f"Scene {scene.index}: {scene.beat.beat}"
    combined = f"{memory.summary}\n{entry}".strip() if memory.summary else entry
    # Keep the most recent lines within budget.
    while len(combined) > MEMORY_CHAR_BUDGET and "\n" in combined:
        combined = combined.split("\n", 1)[1]
    return combined[-MEMORY_CHAR_BUDGET:]


def update_memory(
    memory: NarrativeMemory, scene: Scene, provider: ChatClient | None = None
) -> NarrativeMemory:
    """Fold one realized scene into the rolling memory.

    With no provider the deterministic concatenation summarizer runs; with a
    provider, its summarize reply is used and any failure falls back to the
    concatenation (with a warning) so memory is never lost.
    """
    summary: str | None = None
    if provider is not None:
        scene_text = scene.scene_description + "\n" + "\n".join(scene.dialogue)
        prompt = prompts.render(
            "memory_update",
            previous_summary=memory.summary or "(empty)",
            scene_index=scene.index,
            scene_text=scene_text,
        )
        try:
            summary = str(request_structured(provider, prompt, lambda v: v["summary"], stage="memory"))
        except (ProviderError, ExtractionError) as exc:
            logger.warning("memory update failed (%s); using concatenation fallback", exc)
            summary = None
    if summary is None:
        summary = _fallback_summary(memory, scene)
    return NarrativeMemory(summary=summary, scene_count_covered=memory.scene_count_covered + 1)


def synthesize(
    plan: EventPlan,
    profiles: CharacterProfiles,
    title: Title,
    premise: Premise,
    provider: ChatClient,
    *,
    plan_text: str | None = None,
    strict: bool = False,
    subset_characters: bool = True,
    provider_memory: bool = True,
) -> Script:
    """Beats once, then the sequential realize/update loop over every event."""
    beats = generate_beats(plan, profiles, title, premise, provider, plan_text=plan_text, strict=strict)
    scenes: list[Scene] = []
    snapshots: list[NarrativeMemory] = []
    memory = EMPTY_MEMORY
    for i, beat in enumerate(beats, start=1):
        scene, _warnings = realize_scene(
            beat, i, plan, profiles, memory, provider, strict=strict, subset_characters=subset_characters
        )
        memory = update_memory(memory, scene, provider if provider_memory else None)
        scenes.append(scene)
        snapshots.append(memory)
    return Script(
        title=title.text, premise=premise, scenes=tuple(scenes), memory_snapshots=tuple(snapshots)
    )


def render_script_markdown(script: Script) -> str:
    """Human-readable script: slugline, description, dialogue per scene."""
    lines = [f"# {script.title}", "", f"*Premise:* {script.premise.text}", ""]
    for scene in script.scenes:
        lines.append(f"## Scene {scene.index} - {scene.beat.place}")
        lines.append(f"*{scene.beat.plot_element}.* {scene.beat.beat}")
        lines.append("")
        lines.append(scene.scene_description)
        lines.append("")
        for line in scene.dialogue:
            lines.append(line)
        lines.append("")
    return "\n".join(lines)
