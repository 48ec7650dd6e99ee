"""Stage 2 orchestration: the iterative diagnose-compile-apply loop.

Each iteration runs the enabled critics in their fixed order; every issue
compiles to a batch which applies under the validator gate. The loop breaks
early when a full iteration produces no activity. The trace records enough
(including every compiled batch) to replay accepted edits and reproduce the
final graph exactly.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .critics import AGENT_ORDER, AgentKind, CriticReport, Issue, run_critic, run_rule_critic
from .editing import (
    CompiledEdit,
    EditOutcome,
    MutationBatch,
    Rejection,
    RejectionReason,
    apply_batch,
    compile_edits,
    parse_batch_value,
)
from .graph import JointGraph, graph_hash
from .provider import ChatClient, ProviderError
from .validation import validate

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RefinementConfig:
    max_iterations: int = 3
    enabled_agents: frozenset[AgentKind] = frozenset(AGENT_ORDER)
    consensus_mode: bool = False
    strict_stage_gate: bool = False
    use_rule_critics: bool = False
    fail_fast: bool = False

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")

    def to_dict(self) -> dict[str, Any]:
        return {
            "max_iterations": self.max_iterations,
            "enabled_agents": [a.value for a in AGENT_ORDER if a in self.enabled_agents],
            "consensus_mode": self.consensus_mode,
            "strict_stage_gate": self.strict_stage_gate,
            "use_rule_critics": self.use_rule_critics,
            "fail_fast": self.fail_fast,
        }


@dataclass(frozen=True)
class EditRecord:
    """One issue's journey through an iteration: issue, batch (if compiled), outcome."""

    issue: Issue
    outcome: EditOutcome
    batch: MutationBatch | None = None

    def to_dict(self) -> dict[str, Any]:
        out = {"issue": self.issue.to_dict(), "outcome": self.outcome.to_dict()}
        if self.batch is not None:
            out["batch"] = self.batch.to_dict()
        return out


@dataclass(frozen=True)
class AgentTrace:
    agent: AgentKind
    records: tuple[EditRecord, ...] = ()
    errors: tuple[str, ...] = ()

    @property
    def issues(self) -> tuple[Issue, ...]:
        return tuple(r.issue for r in self.records)

    def to_dict(self) -> dict[str, Any]:
        return {
            "agent": self.agent.value,
            "records": [r.to_dict() for r in self.records],
            "errors": list(self.errors),
        }


@dataclass(frozen=True)
class IterationTrace:
    t: int
    agents: tuple[AgentTrace, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {"t": self.t, "agents": [a.to_dict() for a in self.agents]}


@dataclass
class RefinementTrace:
    iterations: list[IterationTrace] = field(default_factory=list)
    final_graph_hash: str = ""
    stopped_early: bool = False
    config: dict[str, Any] = field(default_factory=dict)

    def records(self) -> list[EditRecord]:
        return [r for it in self.iterations for agent in it.agents for r in agent.records]

    @property
    def edit_success_rate(self) -> float:
        return edit_success_rate(self)

    def to_dict(self) -> dict[str, Any]:
        return {
            "config": self.config,
            "iterations": [it.to_dict() for it in self.iterations],
            "final_graph_hash": self.final_graph_hash,
            "edit_success_rate": self.edit_success_rate,
            "stopped_early": self.stopped_early,
        }

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), ensure_ascii=False, indent=2) + "\n", encoding="utf-8")


def edit_success_rate(trace: RefinementTrace) -> float:
    """Accepted issues over issues with compiled batches; 0/0 is 1.0."""
    compiled = [r for r in trace.records() if r.batch is not None]
    if not compiled:
        return 1.0
    return sum(1 for r in compiled if r.outcome.accepted) / len(compiled)


def success_breakdown(trace: RefinementTrace) -> dict[str, Any]:
    """Edit-SR overall plus per-agent and per-issue-type splits."""

    def ratio(records: list[EditRecord]) -> float | None:
        compiled = [r for r in records if r.batch is not None]
        if not compiled:
            return None
        return sum(1 for r in compiled if r.outcome.accepted) / len(compiled)

    by_agent: dict[str, list[EditRecord]] = {}
    by_type: dict[str, list[EditRecord]] = {}
    for iteration in trace.iterations:
        for agent_trace in iteration.agents:
            for record in agent_trace.records:
                by_agent.setdefault(agent_trace.agent.value, []).append(record)
                by_type.setdefault(record.issue.type.value, []).append(record)
    return {
        "overall": edit_success_rate(trace),
        "by_agent": {k: ratio(v) for k, v in sorted(by_agent.items())},
        "by_issue_type": {k: ratio(v) for k, v in sorted(by_type.items())},
    }


def _diagnose(
    kind: AgentKind, graph: JointGraph, provider: ChatClient | None, config: RefinementConfig
) -> CriticReport:
    if config.use_rule_critics:
        return run_rule_critic(kind, graph)
    if provider is None:
        raise ValueError("prompt-driven critics need a provider")
    return run_critic(kind, graph, provider)


def _apply_compiled(
    graph: JointGraph, compiled: list[CompiledEdit], issues: list[Issue], config: RefinementConfig
) -> tuple[JointGraph, list[EditRecord]]:
    by_id = {issue.issue_id: issue for issue in issues}
    records = []
    current = graph
    for edit in compiled:
        issue = by_id[edit.issue_id]
        if edit.batch is None:
            outcome = EditOutcome(issue_id=edit.issue_id, accepted=False, rejection=edit.error)
            records.append(EditRecord(issue=issue, outcome=outcome))
            continue
        outcome, current = apply_batch(current, edit.batch, strict_stage=config.strict_stage_gate)
        records.append(EditRecord(issue=issue, outcome=outcome, batch=edit.batch))
    return current, records


def _consensus_filter(reports: list[CriticReport]) -> dict[AgentKind, list[Issue]]:
    """Keep issues with at least one target id flagged by >= 2 distinct agents."""
    flagged: dict[str, set[AgentKind]] = {}
    for report in reports:
        for issue in report.issues:
            for target_id in issue.targets.referenced_ids():
                flagged.setdefault(target_id, set()).add(report.agent)
    surviving: dict[AgentKind, list[Issue]] = {}
    for report in reports:
        kept = [
            issue
            for issue in report.issues
            if any(len(flagged[tid]) >= 2 for tid in issue.targets.referenced_ids())
        ]
        surviving[report.agent] = kept
    return surviving


def refine(
    graph: JointGraph,
    config: RefinementConfig,
    provider: ChatClient | None,
    *,
    on_iteration: Callable[[int, IterationTrace, JointGraph], None] | None = None,
) -> tuple[JointGraph, RefinementTrace]:
    """Run up to ``max_iterations`` evaluate-plan-revise cycles.

    The activity flag is set as soon as an agent's non-empty issue list has
    been compiled, before any acceptance decision, so a round of entirely
    rejected edits does not stop the loop. The returned graph always passes
    validation because the input must and every accepted edit is gated.
    """
    report = validate(graph.event_graph)
    if not report.passed:
        raise ValueError(f"refine requires a valid input graph: {report.to_dict()['violations']}")

    trace = RefinementTrace(config=config.to_dict())
    current = graph
    enabled = [kind for kind in AGENT_ORDER if kind in config.enabled_agents]

    for t in range(1, config.max_iterations + 1):
        updated = False
        agent_traces: list[AgentTrace] = []

        consensus_issues: dict[AgentKind, list[Issue]] | None = None
        if config.consensus_mode:
            reports = {kind: _diagnose(kind, current, provider, config) for kind in enabled}
            consensus_issues = _consensus_filter([reports[k] for k in enabled])

        for kind in enabled:
            errors: list[str] = []
            if config.consensus_mode:
                issues = list(consensus_issues.get(kind, []))
            else:
                critic_report = _diagnose(kind, current, provider, config)
                issues = list(critic_report.issues)
                errors.extend(critic_report.errors)

            records: list[EditRecord] = []
            if issues and provider is None:
                # Rule critics without an editor provider: record the gap as
                # compile errors, but this is not loop activity (nothing was
                # compiled), so a pure-diagnosis run terminates.
                compiled = [
                    CompiledEdit(
                        issue_id=i.issue_id,
                        error=Rejection(RejectionReason.COMPILE_ERROR, "no provider to compile edits"),
                    )
                    for i in issues
                ]
                current, records = _apply_compiled(current, compiled, issues, config)
            elif issues:
                try:
                    compiled = compile_edits(issues, current, provider)
                except ProviderError as exc:
                    if config.fail_fast:
                        raise
                    errors.append(f"edit compilation failed: {exc}")
                    compiled = None
                if compiled is not None:
                    updated = True
                    current, records = _apply_compiled(current, compiled, issues, config)

            agent_traces.append(AgentTrace(agent=kind, records=tuple(records), errors=tuple(errors)))

        iteration = IterationTrace(t=t, agents=tuple(agent_traces))
        trace.iterations.append(iteration)
        if on_iteration is not None:
            on_iteration(t, iteration, current)
        if not updated:
            trace.stopped_early = True
            break

    trace.final_graph_hash = graph_hash(current)
    assert validate(current.event_graph).passed
    return current, trace


def replay_trace(initial: JointGraph, trace: RefinementTrace | dict[str, Any]) -> JointGraph:
    """Re-apply the trace's accepted batches in order; reproduces the final graph."""
    if isinstance(trace, RefinementTrace):
        value = trace.to_dict()
    else:
        value = trace
    current = initial
    for iteration in value["iterations"]:
        for agent in iteration["agents"]:
            for record in agent["records"]:
                if not record["outcome"]["accepted"] or "batch" not in record:
                    continue
                batch = parse_batch_value(record["batch"], record["outcome"]["issue_id"])
                outcome, current = apply_batch(current, batch)
                if not outcome.accepted:
                    raise ValueError(f"replayed batch for issue {batch.issue_id} was rejected: {outcome.rejection}")
    return current
