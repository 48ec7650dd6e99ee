import json
import random

from storyloom.critics import Issue, IssueTargets, IssueType
from storyloom.editing import (
    AtomicEditOp,
    MutationBatch,
    PlotChanges,
    RejectionReason,
    apply_batch,
    compile_edits,
    parse_batch_value,
    stage_consistency_check,
)
from storyloom.graph import (
    EventNode,
    EventRelation,
    EventRelationLabel,
    ModifyEvent,
    StageLabel,
    TimeIndex,
)
from storyloom.provider import stub_client
from storyloom.validation import ConstraintKind, validate

from conftest import chain_graph, joint

from test_validation import oracle_completeness, oracle_is_acyclic


def discontinuity_issue(a="E2", b="E3", issue_id=1):
    return Issue(
        issue_id=issue_id,
        type=IssueType.DISCONTINUITY,
        description=f"gap between {a} and {b}",
        suggestion="bridge it",
        modification="Add-Plot-Bridge",
        targets=IssueTargets(node_ids=(a, b), relation_refs=((a, b),)),
    )


def bridge_plan_entry(issue_id=1, new_id="E2a", a="E2", b="E3", stage="Rising Action"):
    return {
        "issue_id": issue_id,
        "operation": "Add-Plot-Bridge",
        "plot_changes": {
            "Delete relation": [{"from": a, "to": b}],
            "New event": [{"id": new_id, "description": "a connecting step", "narrative_stage": stage, "time": "Day 2"}],
            "Modify event": [],
            "New relation": [
                {"from": a, "to": new_id, "relation": "causal"},
                {"from": new_id, "to": b, "relation": "causal"},
            ],
        },
        "character_changes": {
            "Delete relation": [],
            "New character": [],
            "Modify character": [],
            "New relation": [],
        },
    }


def plan_reply(*entries):
    return json.dumps({"issues": list(entries)})


TEN_CHAIN = joint(chain_graph([f"E{i}" for i in range(1, 11)]))


class TestCompile:
    def test_bridge_pattern(self):
        client = stub_client([plan_reply(bridge_plan_entry())])
        compiled = compile_edits([discontinuity_issue()], TEN_CHAIN, client)
        assert len(compiled) == 1
        batch = compiled[0].batch
        assert batch is not None
        assert batch.declared_op is AtomicEditOp.ADD_PLOT_BRIDGE
        assert batch.plot.delete_relations == (("E2", "E3"),)
        assert [n.id for n in batch.plot.new_events] == ["E2a"]
        assert [(r.from_id, r.to_id) for r in batch.plot.new_relations] == [("E2", "E2a"), ("E2a", "E3")]

    def test_empty_issue_list(self):
        client = stub_client([])
        assert compile_edits([], TEN_CHAIN, client) == []
        assert client.ledger.total_calls == 0

    def test_scope_violation(self):
        entry = bridge_plan_entry()
        entry["plot_changes"]["Modify event"] = [{"id": "E7", "description": "out of scope"}]
        client = stub_client([plan_reply(entry)])
        compiled = compile_edits([discontinuity_issue()], TEN_CHAIN, client)
        assert compiled[0].batch is None
        assert compiled[0].error.reason is RejectionReason.SCOPE_VIOLATION
        assert "E7" in compiled[0].error.detail

    def test_missing_entry_is_compile_error(self):
        client = stub_client([plan_reply(bridge_plan_entry(issue_id=1))])
        issues = [discontinuity_issue(issue_id=1), discontinuity_issue("E5", "E6", issue_id=2)]
        compiled = compile_edits(issues, TEN_CHAIN, client)
        assert compiled[0].batch is not None
        assert compiled[1].error.reason is RejectionReason.COMPILE_ERROR

    def test_unparseable_plan_degrades_to_per_issue_errors(self):
        client = stub_client(["not json"] * 3)
        compiled = compile_edits([discontinuity_issue()], TEN_CHAIN, client)
        assert compiled[0].error.reason is RejectionReason.COMPILE_ERROR

    def test_new_id_collision_autosuffixed(self):
        entry = bridge_plan_entry(new_id="E5")  # E5 already exists in the chain
        client = stub_client([plan_reply(entry)])
        compiled = compile_edits([discontinuity_issue()], TEN_CHAIN, client)
        batch = compiled[0].batch
        assert batch is not None
        assert [n.id for n in batch.plot.new_events] == ["E5_1"]
        assert [(r.from_id, r.to_id) for r in batch.plot.new_relations] == [("E2", "E5_1"), ("E5_1", "E3")]
        assert compiled[0].warnings

    def test_within_batch_duplicate_rejected(self):
        entry = bridge_plan_entry()
        entry["plot_changes"]["New event"].append(
            {"id": "E2a", "description": "twin", "narrative_stage": "Rising Action", "time": "Day 2"}
        )
        client = stub_client([plan_reply(entry)])
        compiled = compile_edits([discontinuity_issue()], TEN_CHAIN, client)
        assert compiled[0].error.reason is RejectionReason.COMPILE_ERROR

    def test_order_preserved(self):
        issues = [discontinuity_issue(issue_id=1), discontinuity_issue("E5", "E6", issue_id=2)]
        client = stub_client(
            [plan_reply(bridge_plan_entry(issue_id=2, new_id="E5a", a="E5", b="E6"), bridge_plan_entry(issue_id=1))]
        )
        compiled = compile_edits(issues, TEN_CHAIN, client)
        assert [c.issue_id for c in compiled] == [1, 2]


class TestApply:
    def test_bridge_accepted(self):
        batch = parse_batch_value(bridge_plan_entry(), 1)
        outcome, result = apply_batch(TEN_CHAIN, batch)
        assert outcome.accepted
        assert len(result.event_graph.events) == 11
        # Re-check with the independent oracles, not just the validator.
        assert oracle_is_acyclic(result.event_graph)
        ok, _, _ = oracle_completeness(result.event_graph)
        assert ok
        assert validate(result.event_graph).passed

    def test_cycle_rejected_with_witness_and_snapshot(self):
        batch = MutationBatch(
            issue_id=1,
            plot=PlotChanges(new_relations=(EventRelation("E5", "E1", EventRelationLabel.CAUSAL),)),
        )
        before = TEN_CHAIN
        outcome, result = apply_batch(before, batch)
        assert not outcome.accepted
        assert outcome.rejection.reason is RejectionReason.VALIDATION_FAILED
        kinds = {v.constraint for v in outcome.rejection.report.violations}
        assert ConstraintKind.CAUSAL_CYCLE in kinds
        assert result == before
        assert result is before

    def test_deleting_only_edge_into_ending_rejected(self):
        batch = MutationBatch(issue_id=2, plot=PlotChanges(delete_relations=(("E9", "E10"),)))
        outcome, result = apply_batch(TEN_CHAIN, batch)
        assert not outcome.accepted
        kinds = {v.constraint for v in outcome.rejection.report.violations}
        assert ConstraintKind.NO_PATH_TO_ENDING in kinds
        assert result == TEN_CHAIN

    def test_unknown_target_is_compile_error_rejection(self):
        batch = MutationBatch(issue_id=3, plot=PlotChanges(modified_events=(ModifyEvent("E99", description="x"),)))
        outcome, result = apply_batch(TEN_CHAIN, batch)
        assert not outcome.accepted
        assert outcome.rejection.reason is RejectionReason.COMPILE_ERROR
        assert result == TEN_CHAIN

    def test_determinism(self):
        batch = parse_batch_value(bridge_plan_entry(), 1)
        first = apply_batch(TEN_CHAIN, batch)
        second = apply_batch(TEN_CHAIN, batch)
        assert first[0] == second[0]
        assert first[1] == second[1]

    def test_strict_stage_gate_rejects(self):
        # A Climax bridge between two Rising Action nodes passes validation
        # but matches neither neighbor's stage.
        batch = parse_batch_value(bridge_plan_entry(stage="Climax"), 1)
        outcome, result = apply_batch(TEN_CHAIN, batch, strict_stage=True)
        assert not outcome.accepted
        assert "stage consistency" in outcome.rejection.detail
        assert result == TEN_CHAIN

    def test_default_stage_gate_warns(self):
        batch = parse_batch_value(bridge_plan_entry(stage="Climax"), 1)
        outcome, result = apply_batch(TEN_CHAIN, batch)
        assert outcome.accepted
        assert outcome.warnings
        assert len(result.event_graph.events) == 11


class TestStageConsistency:
    def test_matching_neighbors(self):
        batch = parse_batch_value(bridge_plan_entry(), 1)
        assert stage_consistency_check(TEN_CHAIN, batch) is True

    def test_mismatched_insert(self):
        batch = parse_batch_value(bridge_plan_entry(stage="Ending"), 1)
        assert stage_consistency_check(TEN_CHAIN, batch) is False

    def test_matches_predecessor_only(self, espionage_initial):
        # A Falling Action node inserted between a Falling Action predecessor
        # and a Rising Action successor matches its predecessor's stage.
        entry = bridge_plan_entry(new_id="K7P", a="M4V", b="H9B", stage="Falling Action")
        batch = parse_batch_value(entry, 1)
        assert stage_consistency_check(espionage_initial, batch) is True


class TestTransactionalityProperty:
    def test_randomized_failing_batches_leave_graph_intact(self):
        rng = random.Random(42)
        rejected = 0
        trials = 0
        while rejected < 120 and trials < 2000:
            trials += 1
            ids = [f"E{i}" for i in range(1, rng.randint(4, 9))]
            graph = joint(chain_graph(ids))
            kind = rng.choice(["cycle", "orphan_sink", "orphan_source"])
            if kind == "cycle":
                a, b = sorted(rng.sample(range(len(ids)), 2))
                batch = MutationBatch(
                    issue_id=1,
                    plot=PlotChanges(new_relations=(EventRelation(ids[b], ids[a], EventRelationLabel.CAUSAL),)),
                )
            elif kind == "orphan_sink":
                cut = rng.randint(0, len(ids) - 2)
                batch = MutationBatch(
                    issue_id=1, plot=PlotChanges(delete_relations=((ids[cut], ids[cut + 1]),))
                )
            else:
                batch = MutationBatch(
                    issue_id=1,
                    plot=PlotChanges(
                        new_events=(
                            EventNode(
                                id="ZZ",
                                description="floating",
                                stage=StageLabel.RISING_ACTION,
                                time=TimeIndex.parse("Day 9"),
                            ),
                        )
                    ),
                )
            outcome, result = apply_batch(graph, batch)
            assert not outcome.accepted
            assert result == graph
            rejected += 1
        assert rejected == 120
