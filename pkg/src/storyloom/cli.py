"""Command-line entry point for the narrative pipeline and evaluation harness."""

from __future__ import annotations

import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from importlib import resources
from pathlib import Path

import click

from .evaluation import load_verdict_fixture, run_comparison
from .graph import GraphError, parse_joint_graph, serialize_joint_graph
from .metrics import report_for_script
from .pipeline import (
    PipelineSettings,
    StageFailure,
    generate_run,
    parse_agents,
    validate_graph_file,
)
from .provider import ChatClient, ProviderError, build_provider
from .refinement import RefinementConfig, refine
from .serialize import UncoveredNodes, serialize_events
from .synthesis import script_from_dict

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1


def _echo_json(value) -> None:
    click.echo(json.dumps(value, ensure_ascii=False, indent=2))


def _provider(source: str) -> ChatClient:
    if source == "demo":
        spec = json.loads(
            (resources.files("storyloom.data") / "stub_demo.json").read_text(encoding="utf-8")
        )
        return build_provider({"type": "stub", **spec})
    return build_provider(source)


def _bundled_premise(name: str) -> Path | None:
    candidate = resources.files("storyloom.data") / "premises" / f"{name}.json"
    try:
        return Path(str(candidate)) if candidate.is_file() else None
    except (OSError, TypeError):
        return None


@click.group()
@click.option("--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose: bool) -> None:
    """Graph-grounded narrative planning, refinement, and script synthesis."""
    logging.basicConfig(
        stream=sys.stderr, level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )


@main.command()
@click.option("--premise", "premises", multiple=True, required=True, help="Premise JSON file, or a bundled premise name.")
@click.option("--out", "out_dir", required=True, type=click.Path(path_type=Path), help="Run directory (per-premise subdirs when several premises are given).")
@click.option("--provider", "provider_source", required=True, help="Provider config (TOML/JSON) or 'demo' for the bundled offline stub.")
@click.option("--k", default=3, show_default=True, help="Maximum refinement iterations.")
@click.option("--agents", default="all", show_default=True, help="Comma-separated critic agents (theme,character,plot).")
@click.option("--consensus", is_flag=True, help="Only apply edits whose targets at least two agents flagged.")
@click.option("--strict-stage", is_flag=True, help="Reject edits whose new events match no neighbor's stage.")
@click.option("--rule-critics", is_flag=True, help="Use the deterministic structural critics instead of prompt-driven ones.")
@click.option("--strict", is_flag=True, help="Fail on count mismatches and unusable replies instead of degrading.")
@click.option("--pass-all-characters", is_flag=True, help="Give every scene's dialogue prompt the full character roster.")
@click.option("--no-provider-memory", is_flag=True, help="Use the deterministic concatenation memory instead of summarize calls.")
@click.option("--force", is_flag=True, help="Re-run stages even when the manifest marks them complete.")
@click.option("--jobs", default=1, show_default=True, help="Parallel premises (each premise's pipeline stays sequential).")
def generate(
    premises, out_dir, provider_source, k, agents, consensus, strict_stage, rule_critics,
    strict, pass_all_characters, no_provider_memory, force, jobs,
):
    """Run the full pipeline: plan, refine, serialize, synthesize, metrics."""
    try:
        settings = PipelineSettings(
            refinement=RefinementConfig(
                max_iterations=k,
                enabled_agents=parse_agents(agents),
                consensus_mode=consensus,
                strict_stage_gate=strict_stage,
                use_rule_critics=rule_critics,
            ),
            strict=strict,
            subset_characters=not pass_all_characters,
            provider_memory=not no_provider_memory,
        )
    except ValueError as exc:
        raise click.UsageError(str(exc))

    resolved: list[Path] = []
    for item in premises:
        path = Path(item)
        if not path.exists():
            bundled = _bundled_premise(item)
            if bundled is None:
                raise click.UsageError(f"premise {item!r} is neither a file nor a bundled premise name")
            path = bundled
        resolved.append(path)

    def run_one(path: Path) -> dict:
        target = out_dir if len(resolved) == 1 else out_dir / path.stem
        provider = _provider(provider_source)
        return generate_run(path, target, provider, settings, force=force)

    failures = []
    if jobs > 1 and len(resolved) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = {pool.submit(run_one, p): p for p in resolved}
            for future, path in futures.items():
                try:
                    _echo_json(future.result())
                except (StageFailure, ProviderError, GraphError, OSError, ValueError) as exc:
                    failures.append((path, exc))
    else:
        for path in resolved:
            try:
                _echo_json(run_one(path))
            except (StageFailure, ProviderError, GraphError, OSError, ValueError) as exc:
                failures.append((path, exc))

    for path, exc in failures:
        click.echo(f"error: {path}: {exc}", err=True)
    sys.exit(EXIT_FAILURE if failures else EXIT_OK)


@main.command()
@click.argument("graph_file", type=click.Path(exists=True, path_type=Path))
def validate(graph_file: Path):
    """Check the structural constraints of a joint graph file."""
    try:
        report = validate_graph_file(graph_file)
    except GraphError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_FAILURE)
    _echo_json(report)
    sys.exit(EXIT_OK if report["passed"] else EXIT_FAILURE)


@main.command("refine")
@click.option("--in", "in_file", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--out", "out_file", required=True, type=click.Path(path_type=Path))
@click.option("--trace", "trace_file", type=click.Path(path_type=Path), help="Where to write the refinement trace.")
@click.option("--provider", "provider_source", required=True, help="Provider config or 'demo'.")
@click.option("--k", default=3, show_default=True)
@click.option("--agents", default="all", show_default=True)
@click.option("--consensus", is_flag=True)
@click.option("--strict-stage", is_flag=True)
@click.option("--rule-critics", is_flag=True)
def refine_command(in_file, out_file, trace_file, provider_source, k, agents, consensus, strict_stage, rule_critics):
    """Refine a joint graph under the structural constraints."""
    try:
        config = RefinementConfig(
            max_iterations=k,
            enabled_agents=parse_agents(agents),
            consensus_mode=consensus,
            strict_stage_gate=strict_stage,
            use_rule_critics=rule_critics,
        )
    except ValueError as exc:
        raise click.UsageError(str(exc))
    try:
        graph = parse_joint_graph(in_file.read_text(encoding="utf-8"))
        refined, trace = refine(graph, config, _provider(provider_source))
    except (GraphError, ProviderError, ValueError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_FAILURE)
    out_file.write_text(serialize_joint_graph(refined), encoding="utf-8")
    if trace_file is not None:
        trace.write(trace_file)
    click.echo(
        f"refined: {len(graph.event_graph.events)} -> {len(refined.event_graph.events)} events, "
        f"edit success rate {trace.edit_success_rate:.3f}"
    )
    sys.exit(EXIT_OK)


@main.command()
@click.option("--in", "in_file", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--out", "out_file", required=True, type=click.Path(path_type=Path))
def serialize(in_file, out_file):
    """Write the deterministic event plan for a joint graph file."""
    try:
        graph = parse_joint_graph(in_file.read_text(encoding="utf-8"))
        plan = serialize_events(graph.event_graph)
    except (GraphError, UncoveredNodes, ValueError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_FAILURE)
    out_file.write_text(json.dumps(plan.to_dict(), ensure_ascii=False, indent=2) + "\n", encoding="utf-8")
    click.echo(f"planned {len(plan.ordered_events)} events")
    sys.exit(EXIT_OK)


@main.command()
@click.argument("script_file", type=click.Path(exists=True, path_type=Path))
@click.option("--out", "out_file", type=click.Path(path_type=Path), help="Where to write metrics.json.")
def metrics(script_file, out_file):
    """Compute diversity metrics for a script.json file."""
    try:
        script = script_from_dict(json.loads(script_file.read_text(encoding="utf-8")))
        report = report_for_script(script).to_dict()
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_FAILURE)
    if out_file is not None:
        out_file.write_text(json.dumps(report, ensure_ascii=False, indent=2) + "\n", encoding="utf-8")
    _echo_json({k: v for k, v in report.items() if k != "per_scene"})
    sys.exit(EXIT_OK)


@main.command()
@click.option("--a", "dir_a", required=True, type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--b", "dir_b", required=True, type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--seed", required=True, type=int, help="Counterbalancing seed.")
@click.option("--judge", "judge_config", type=click.Path(exists=True, path_type=Path), help="Judge provider config.")
@click.option("--stub-judge", "stub_judge", type=click.Path(exists=True, path_type=Path), help="JSONL fixture of slot-level verdicts to replay.")
@click.option("--out", "out_file", required=True, type=click.Path(path_type=Path), help="Where to write tally.json.")
@click.option("--records", "records_file", type=click.Path(path_type=Path), help="Where to write per-task verdict records (default: alongside the tally).")
@click.option("--label-a", default=None, help="Method label for run A (default: directory name).")
@click.option("--label-b", default=None, help="Method label for run B (default: directory name).")
def evaluate(dir_a, dir_b, seed, judge_config, stub_judge, out_file, records_file, label_a, label_b):
    """Pairwise-judge two run directories across five dimensions and two levels."""
    if (judge_config is None) == (stub_judge is None):
        raise click.UsageError("provide exactly one of --judge or --stub-judge")
    label_a = label_a or dir_a.name
    label_b = label_b or dir_b.name
    if label_a == label_b:
        raise click.UsageError("the two runs need distinct labels; pass --label-a/--label-b")
    try:
        script_a = script_from_dict(json.loads((dir_a / "script.json").read_text(encoding="utf-8")))
        script_b = script_from_dict(json.loads((dir_b / "script.json").read_text(encoding="utf-8")))
        scripted = load_verdict_fixture(stub_judge.read_text(encoding="utf-8")) if stub_judge else None
        provider = _provider(str(judge_config)) if judge_config else None
        _tasks, judged, table = run_comparison(
            script_a,
            script_b,
            method_x=label_a,
            method_y=label_b,
            seed=seed,
            provider=provider,
            scripted_verdicts=scripted,
        )
    except (GraphError, ProviderError, ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_FAILURE)
    records_path = records_file or out_file.parent / "verdicts.jsonl"
    records_path.parent.mkdir(parents=True, exist_ok=True)
    with records_path.open("w", encoding="utf-8") as handle:
        for item in judged:
            handle.write(json.dumps(item.to_dict(), ensure_ascii=False) + "\n")
    out_file.parent.mkdir(parents=True, exist_ok=True)
    out_file.write_text(json.dumps(table.to_dict(), ensure_ascii=False, indent=2) + "\n", encoding="utf-8")
    _echo_json(table.to_dict())
    sys.exit(EXIT_OK)


if __name__ == "__main__":
    main()
