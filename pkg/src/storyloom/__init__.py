"""Graph-grounded narrative planning, constrained refinement, and script synthesis."""

__version__ = "0.1.0"

from .critics import AgentKind, Issue, IssueType, run_all_critics, run_critic, run_rule_critic
from .editing import AtomicEditOp, EditOutcome, MutationBatch, apply_batch, compile_edits
from .evaluation import Dimension, counterbalance, judge, run_comparison, tally
from .graph import (
    EventGraph,
    EventNode,
    EventRelation,
    EventRelationLabel,
    JointGraph,
    StageLabel,
    TimeIndex,
    mutate,
    parse_joint_graph,
    serialize_joint_graph,
    subgraph,
)
from .metrics import MetricReport, distinct_n, mattr, report_for_script, self_bleu, tokenize
from .planning import Premise, Title, generate_initial_graph, generate_title
from .provider import ChatClient, ProviderConfig, StubTransport, build_provider, extract_json, stub_client
from .refinement import RefinementConfig, RefinementTrace, edit_success_rate, refine, replay_trace
from .serialize import CharacterProfiles, EventPlan, expand_characters, serialize_events
from .synthesis import Scene, SceneBeat, Script, synthesize
from .validation import ValidationReport, check_causal_acyclicity, check_completeness, validate

__all__ = [
    "AgentKind",
    "AtomicEditOp",
    "ChatClient",
    "CharacterProfiles",
    "Dimension",
    "EditOutcome",
    "EventGraph",
    "EventNode",
    "EventPlan",
    "EventRelation",
    "EventRelationLabel",
    "Issue",
    "IssueType",
    "JointGraph",
    "MetricReport",
    "MutationBatch",
    "Premise",
    "ProviderConfig",
    "RefinementConfig",
    "RefinementTrace",
    "Scene",
    "SceneBeat",
    "Script",
    "StageLabel",
    "StubTransport",
    "TimeIndex",
    "Title",
    "ValidationReport",
    "apply_batch",
    "build_provider",
    "check_causal_acyclicity",
    "check_completeness",
    "compile_edits",
    "counterbalance",
    "distinct_n",
    "edit_success_rate",
    "expand_characters",
    "extract_json",
    "generate_initial_graph",
    "generate_title",
    "judge",
    "mattr",
    "mutate",
    "parse_joint_graph",
    "refine",
    "replay_trace",
    "report_for_script",
    "run_all_critics",
    "run_comparison",
    "run_critic",
    "run_rule_critic",
    "self_bleu",
    "serialize_events",
    "serialize_joint_graph",
    "stub_client",
    "subgraph",
    "synthesize",
    "tally",
    "tokenize",
    "validate",
]
