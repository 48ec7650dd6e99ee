"""Run-directory orchestration for the three-stage pipeline.

One run directory per premise. Every stage writes its artifacts and marks
itself complete in manifest.json; a rerun skips completed stages (unless
forced), so resuming changes no bytes. The manifest and usage ledger are only
written when at least one stage actually executes.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable

from .critics import AGENT_ORDER, AgentKind
from .graph import JointGraph, parse_joint_graph, serialize_joint_graph
from .metrics import report_for_script
from .planning import Premise, Title, generate_initial_graph, generate_title, load_premise
from .provider import ChatClient
from .refinement import IterationTrace, RefinementConfig, refine
from .serialize import CharacterProfiles, EventPlan, expand_characters, render_plan_text, serialize_events
from .synthesis import Script, render_script_markdown, script_from_dict, synthesize
from .validation import validate

logger = logging.getLogger(__name__)

STAGES = ("plan", "refine", "serialize", "synthesize", "metrics")


class StageFailure(Exception):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class RunPaths:
    root: Path

    @property
    def premise(self) -> Path:
        return self.root / "premise.json"

    @property
    def title(self) -> Path:
        return self.root / "title.json"

    @property
    def graph_initial(self) -> Path:
        return self.root / "graph_initial.json"

    @property
    def graph_refined(self) -> Path:
        return self.root / "graph_refined.json"

    @property
    def trace(self) -> Path:
        return self.root / "trace.json"

    @property
    def plan(self) -> Path:
        return self.root / "plan.json"

    @property
    def profiles(self) -> Path:
        return self.root / "profiles.json"

    @property
    def beats(self) -> Path:
        return self.root / "beats.json"

    @property
    def script(self) -> Path:
        return self.root / "script.json"

    @property
    def script_md(self) -> Path:
        return self.root / "script.md"

    @property
    def metrics(self) -> Path:
        return self.root / "metrics.json"

    @property
    def usage(self) -> Path:
        return self.root / "usage.json"

    @property
    def manifest(self) -> Path:
        return self.root / "manifest.json"


def _write_json(path: Path, value: Any) -> None:
    path.write_text(json.dumps(value, ensure_ascii=False, indent=2) + "\n", encoding="utf-8")


def _read_json(path: Path) -> Any:
    return json.loads(path.read_text(encoding="utf-8"))


def config_hash(value: Any) -> str:
    return hashlib.sha256(json.dumps(value, sort_keys=True).encode("utf-8")).hexdigest()[:16]


class Manifest:
    def __init__(self, path: Path):
        self.path = path
        self.data: dict[str, Any] = {"stages": {}}
        if path.exists():
            self.data = _read_json(path)
            self.data.setdefault("stages", {})

    def is_complete(self, stage: str) -> bool:
        return bool(self.data["stages"].get(stage, {}).get("completed"))

    def mark(self, stage: str, settings_hash: str, **extra: Any) -> None:
        self.data["stages"][stage] = {
            "completed": True,
            "completed_at": datetime.now(timezone.utc).isoformat(),
            "config_hash": settings_hash,
            **extra,
        }
        _write_json(self.path, self.data)


@dataclass
class PipelineSettings:
    refinement: RefinementConfig
    strict: bool = False
    subset_characters: bool = True
    provider_memory: bool = True

    def to_dict(self) -> dict[str, Any]:
        return {
            "refinement": self.refinement.to_dict(),
            "strict": self.strict,
            "subset_characters": self.subset_characters,
            "provider_memory": self.provider_memory,
        }


def _load_graph(path: Path) -> JointGraph:
    return parse_joint_graph(path.read_text(encoding="utf-8"))


def stage_plan(paths: RunPaths, premise: Premise, provider: ChatClient) -> tuple[Title, JointGraph, tuple[str, ...]]:
    title = generate_title(premise, provider)
    planned = generate_initial_graph(title, premise, provider)
    _write_json(paths.premise, {"id": premise.id, "text": premise.text, "genre": premise.genre, "source": premise.source})
    _write_json(paths.title, {"title": title.text})
    paths.graph_initial.write_text(serialize_joint_graph(planned.graph), encoding="utf-8")
    return title, planned.graph, planned.warnings


def _iteration_writer(paths: RunPaths, config: RefinementConfig) -> Callable[[int, IterationTrace, JointGraph], None]:
    completed: list[IterationTrace] = []

    def write(t: int, iteration: IterationTrace, _graph: JointGraph) -> None:
        for agent_trace in iteration.agents:
            _write_json(
                paths.root / f"issues_iter{t}_{agent_trace.agent.value}.json",
                [record.issue.to_dict() for record in agent_trace.records],
            )
        _write_json(
            paths.root / f"edits_iter{t}.json",
            [record.to_dict() for agent_trace in iteration.agents for record in agent_trace.records],
        )
        # Persist a partial trace so an interrupted run keeps its audit trail.
        completed.append(iteration)
        _write_json(
            paths.trace,
            {"config": config.to_dict(), "iterations": [it.to_dict() for it in completed], "partial": True},
        )

    return write


def stage_refine(paths: RunPaths, provider: ChatClient, config: RefinementConfig) -> JointGraph:
    graph = _load_graph(paths.graph_initial)
    refined, trace = refine(graph, config, provider, on_iteration=_iteration_writer(paths, config))
    paths.graph_refined.write_text(serialize_joint_graph(refined), encoding="utf-8")
    trace.write(paths.trace)
    return refined


def stage_serialize(paths: RunPaths, provider: ChatClient) -> tuple[EventPlan, CharacterProfiles]:
    graph = _load_graph(paths.graph_refined)
    plan = serialize_events(graph.event_graph)
    _write_json(paths.plan, plan.to_dict())
    title = _read_json(paths.title)["title"]
    premise = load_premise(paths.premise)
    profiles = expand_characters(graph.character_graph, title, premise.text, provider)
    _write_json(paths.profiles, profiles.to_dict())
    return plan, profiles


def stage_synthesize(paths: RunPaths, provider: ChatClient, settings: PipelineSettings) -> Script:
    plan = EventPlan.from_dict(_read_json(paths.plan))
    profiles = CharacterProfiles.from_dict(_read_json(paths.profiles))
    title = Title(_read_json(paths.title)["title"])
    premise = load_premise(paths.premise)
    graph = _load_graph(paths.graph_refined)
    script = synthesize(
        plan,
        profiles,
        title,
        premise,
        provider,
        plan_text=render_plan_text(plan, graph.event_graph),
        strict=settings.strict,
        subset_characters=settings.subset_characters,
        provider_memory=settings.provider_memory,
    )
    _write_json(paths.beats, [s.beat.to_dict() for s in script.scenes])
    _write_json(paths.script, script.to_dict())
    paths.script_md.write_text(render_script_markdown(script), encoding="utf-8")
    return script


def stage_metrics(paths: RunPaths) -> dict[str, Any]:
    script = script_from_dict(_read_json(paths.script))
    report = report_for_script(script).to_dict()
    _write_json(paths.metrics, report)
    return report


def generate_run(
    premise_path: str | Path,
    out_dir: str | Path,
    provider: ChatClient,
    settings: PipelineSettings,
    *,
    force: bool = False,
) -> dict[str, Any]:
    """Run plan -> refine -> serialize -> synthesize -> metrics, resumably.

    Raises :class:`StageFailure` naming the failing stage; artifacts of
    completed stages are preserved either way.
    """
    premise = load_premise(premise_path)
    paths = RunPaths(Path(out_dir))
    paths.root.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(paths.manifest)
    settings_hash = config_hash(settings.to_dict())
    executed: list[str] = []

    def run_stage(name: str, action: Callable[[], Any], **extra_fn: Callable[[Any], dict[str, Any]]) -> None:
        if manifest.is_complete(name) and not force:
            logger.info("stage %s already complete; skipping", name)
            return
        try:
            result = action()
        except Exception as exc:
            raise StageFailure(name, exc) from exc
        extra = {}
        for key, fn in extra_fn.items():
            extra[key] = fn(result)
        manifest.mark(name, settings_hash, **extra)
        executed.append(name)

    run_stage(
        "plan",
        lambda: stage_plan(paths, premise, provider),
        warnings=lambda result: list(result[2]),
    )
    run_stage("refine", lambda: stage_refine(paths, provider, settings.refinement))
    run_stage("serialize", lambda: stage_serialize(paths, provider))
    run_stage("synthesize", lambda: stage_synthesize(paths, provider, settings))
    run_stage("metrics", lambda: stage_metrics(paths))

    if executed:
        _write_json(paths.usage, provider.ledger.to_dict())
    return {"premise_id": premise.id, "out_dir": str(paths.root), "executed": executed}


def validate_graph_file(path: str | Path) -> dict[str, Any]:
    graph = parse_joint_graph(Path(path).read_text(encoding="utf-8"))
    return validate(graph.event_graph).to_dict()


def parse_agents(spec: str | None) -> frozenset[AgentKind]:
    if not spec or spec.strip().lower() == "all":
        return frozenset(AGENT_ORDER)
    out = set()
    for part in spec.split(","):
        name = part.strip().lower()
        match = next((k for k in AgentKind if k.value.lower() == name), None)
        if match is None:
            raise ValueError(f"unknown agent {part.strip()!r} (expected theme, character, plot)")
        out.add(match)
    return frozenset(out)
