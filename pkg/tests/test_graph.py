import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from storyloom.graph import (
    AddEvent,
    AddEventRelation,
    DeleteEventRelation,
    DuplicateId,
    DuplicateRelation,
    EventGraph,
    EventNode,
    EventRelation,
    EventRelationLabel,
    JointGraph,
    MalformedDocument,
    ModifyEvent,
    SchemaViolation,
    StageLabel,
    TimeIndex,
    UnknownTarget,
    joint_graph_to_value,
    mutate,
    parse_joint_graph,
    serialize_joint_graph,
    subgraph,
)

from conftest import as_document, chain_graph, joint, make_event, random_event_graph


def document(events, relations, characters=(), char_relations=()):
    return json.dumps(
        {
            "plot_graph": {"events": events, "relations": relations},
            "character_graph": {"characters": list(characters), "relations": list(char_relations)},
        }
    )


def event_dict(eid, stage="Rising Action", time="Day 1"):
    return {"id": eid, "description": f"event {eid}", "narrative_stage": stage, "time": time}


class TestParse:
    def test_causal_chain(self):
        events = [event_dict(f"E{i}") for i in range(1, 11)]
        relations = [{"from": f"E{i}", "to": f"E{i+1}", "relation": "causal"} for i in range(1, 10)]
        graph = parse_joint_graph(document(events, relations))
        assert len(graph.event_graph.events) == 10
        assert len(graph.event_graph.relations) == 9

    def test_dangling_endpoint_names_offender(self):
        events = [event_dict("E1"), event_dict("E2")]
        relations = [{"from": "E1", "to": "E99", "relation": "causal"}]
        with pytest.raises(SchemaViolation) as err:
            parse_joint_graph(document(events, relations))
        assert "E99" in str(err.value)
        assert "relations[0]" in err.value.path

    def test_espionage_sample(self, espionage_initial):
        eg = espionage_initial.event_graph
        assert eg.events[0].id == "A3K"
        assert eg.events[9].id == "E2N"
        assert eg.events[3].stage is StageLabel.CLIMAX
        assert len(eg.relations) == 9
        climaxes = [e.id for e in eg.events if e.stage is StageLabel.CLIMAX]
        assert climaxes == ["J6T", "D5Z"]

    def test_not_json(self):
        with pytest.raises(MalformedDocument):
            parse_joint_graph("this is not json")

    def test_missing_top_level_key(self):
        with pytest.raises(SchemaViolation):
            parse_joint_graph(json.dumps({"plot_graph": {"events": [], "relations": []}}))

    def test_duplicate_event_id(self):
        with pytest.raises(SchemaViolation) as err:
            parse_joint_graph(document([event_dict("E1"), event_dict("E1")], []))
        assert "E1" in str(err.value)

    def test_labels_and_stages_normalized(self):
        events = [event_dict("E1", stage="rising action"), event_dict("E2", stage="CLIMAX")]
        relations = [{"from": "E1", "to": "E2", "relation": "Causal"}]
        graph = parse_joint_graph(document(events, relations))
        assert graph.event_graph.events[0].stage is StageLabel.RISING_ACTION
        assert graph.event_graph.events[1].stage is StageLabel.CLIMAX
        assert graph.event_graph.relations[0].label is EventRelationLabel.CAUSAL

    def test_unknown_label_rejected(self):
        relations = [{"from": "E1", "to": "E2", "relation": "temporal"}]
        with pytest.raises(SchemaViolation):
            parse_joint_graph(document([event_dict("E1"), event_dict("E2")], relations))

    def test_duplicate_triple_rejected_parallel_labels_allowed(self):
        events = [event_dict("E1"), event_dict("E2")]
        ok = [
            {"from": "E1", "to": "E2", "relation": "causal"},
            {"from": "E1", "to": "E2", "relation": "foreshadowing"},
        ]
        graph = parse_joint_graph(document(events, ok))
        assert len(graph.event_graph.relations) == 2
        dup = ok + [{"from": "E1", "to": "E2", "relation": "causal"}]
        with pytest.raises(SchemaViolation):
            parse_joint_graph(document(events, dup))


class TestSerialize:
    def test_empty_graphs(self):
        text = serialize_joint_graph(JointGraph())
        value = json.loads(text)
        assert value["plot_graph"] == {"events": [], "relations": []}
        assert value["character_graph"] == {"characters": [], "relations": []}

    def test_round_trip_sample(self, espionage_initial_text, espionage_initial):
        assert parse_joint_graph(serialize_joint_graph(espionage_initial)) == espionage_initial

    def test_insertion_order_preserved(self, espionage_initial):
        value = json.loads(serialize_joint_graph(espionage_initial))
        assert value["plot_graph"]["events"][0]["id"] == "A3K"

    def test_extras_preserved(self):
        events = [dict(event_dict("E1"), location="Prague"), event_dict("E2")]
        relations = [{"from": "E1", "to": "E2", "relation": "causal", "note": "setup"}]
        doc = json.dumps(
            {
                "plot_graph": {"events": events, "relations": relations},
                "character_graph": {"characters": [], "relations": []},
                "schema_version": 3,
            }
        )
        graph = parse_joint_graph(doc)
        assert graph.event_graph.events[0].extra == {"location": "Prague"}
        assert graph.extra == {"schema_version": 3}
        assert parse_joint_graph(serialize_joint_graph(graph)) == graph


@st.composite
def joint_graphs(draw):
    n = draw(st.integers(min_value=0, max_value=6))
    ids = [f"E{i}" for i in range(n)]
    stages = list(StageLabel)
    labels = list(EventRelationLabel)
    picks = draw(st.lists(st.integers(0, 10**6), min_size=2 * n, max_size=2 * n))
    descriptions = draw(st.lists(st.text(min_size=1, max_size=12), min_size=n, max_size=n))
    events = tuple(
        EventNode(
            id=ids[i],
            description=descriptions[i],
            stage=stages[picks[2 * i] % len(stages)],
            time=TimeIndex.parse(f"Day {picks[2 * i + 1] % 20}"),
        )
        for i in range(n)
    )
    relations = []
    if n >= 2:
        seen = set()
        for code in draw(st.lists(st.integers(0, 10**6), max_size=10)):
            f, t = ids[code % n], ids[(code // n) % n]
            label = labels[(code // (n * n)) % len(labels)]
            if f != t and (f, t, label) not in seen:
                seen.add((f, t, label))
                relations.append(EventRelation(f, t, label))
    return JointGraph(event_graph=EventGraph(events=events, relations=tuple(relations)))


@given(joint_graphs())
@settings(max_examples=60)
def test_round_trip_identity(graph):
    assert parse_joint_graph(serialize_joint_graph(graph)) == graph


class TestTimeIndex:
    def test_parse_plain(self):
        t = TimeIndex.parse("Day 15")
        assert (t.day, t.sub) == (15, None)

    @pytest.mark.parametrize("raw,sub", [("Day 15am", "am"), ("Day 15pm", "pm"), ("Day 15night", "night")])
    def test_parse_sub(self, raw, sub):
        t = TimeIndex.parse(raw)
        assert (t.day, t.sub) == (15, sub)

    def test_sub_order_unmarked_last(self):
        ordered = [TimeIndex.parse(s) for s in ("Day 15am", "Day 15pm", "Day 15night", "Day 15")]
        assert ordered == sorted(ordered)
        assert TimeIndex.parse("Day 15") > TimeIndex.parse("Day 15night")

    def test_day_dominates(self):
        assert TimeIndex.parse("Day 2night") < TimeIndex.parse("Day 3am")

    def test_unparseable_sorts_last(self, caplog):
        with caplog.at_level("WARNING"):
            odd = TimeIndex.parse("sometime later")
        assert odd.day is None
        assert any("does not parse" in r.message for r in caplog.records)
        assert TimeIndex.parse("Day 99") < odd
        assert TimeIndex.parse("a stray time") < TimeIndex.parse("b stray time")


@given(
    st.lists(
        st.one_of(
            st.builds(
                lambda d, s: f"Day {d}{s}",
                st.integers(0, 30),
                st.sampled_from(["", "am", "pm", "night"]),
            ),
            st.text(min_size=1, max_size=8),
        ),
        min_size=1,
        max_size=8,
    )
)
@settings(max_examples=120)
def test_time_index_total_order(raws):
    times = [TimeIndex.parse(r) for r in raws]
    for a in times:
        for b in times:
            assert (a < b) + (b < a) + (a.sort_key() == b.sort_key()) == 1
            for c in times:
                if a < b and b < c:
                    assert a < c


class TestSubgraph:
    def test_filter_counts(self):
        g = chain_graph(["A", "B", "C", "D"])
        extra = (
            EventRelation("A", "C", EventRelationLabel.SUSPENSE),
            EventRelation("B", "D", EventRelationLabel.SUSPENSE),
        )
        g = EventGraph(events=g.events, relations=g.relations + extra)
        causal_only = subgraph(g, {EventRelationLabel.CAUSAL})
        assert len(causal_only.relations) == 3
        assert causal_only.event_ids() == g.event_ids()

    def test_identity_and_empty(self):
        g = chain_graph(["A", "B", "C"])
        assert subgraph(g, set(EventRelationLabel)) == g
        empty = subgraph(g, set())
        assert empty.relations == ()
        assert empty.event_ids() == g.event_ids()

    def test_disjoint_union(self):
        rng = random.Random(7)
        for _ in range(25):
            g = random_event_graph(rng)
            l1 = {EventRelationLabel.CAUSAL}
            l2 = {EventRelationLabel.SUSPENSE}
            union_keys = {r.key() for r in subgraph(g, l1 | l2).relations}
            split_keys = {r.key() for r in subgraph(g, l1).relations} | {
                r.key() for r in subgraph(g, l2).relations
            }
            assert union_keys == split_keys


class TestMutate:
    def test_add_relation(self):
        g = joint(chain_graph(["E1", "E2", "E3"]))
        out = mutate(g, AddEventRelation(EventRelation("E1", "E3", EventRelationLabel.SUSPENSE)))
        assert len(out.event_graph.relations) == len(g.event_graph.relations) + 1

    def test_modify_unknown_target(self):
        g = joint(chain_graph(["E1", "E2"]))
        with pytest.raises(UnknownTarget):
            mutate(g, ModifyEvent("E99", description="nope"))

    def test_value_semantics(self):
        g = joint(chain_graph(["E1", "E2", "E3"]))
        snapshot = parse_joint_graph(as_document(g))
        mutate(g, ModifyEvent("E2", description="changed"))
        mutate(g, DeleteEventRelation("E1", "E2"))
        assert g == snapshot

    def test_bridge_pattern(self):
        g = joint(chain_graph(["E1", "E2", "E3", "E4"]))
        n_nodes = len(g.event_graph.events)
        n_rel = len(g.event_graph.relations)
        g = mutate(g, DeleteEventRelation("E2", "E3"))
        g = mutate(g, AddEvent(make_event("E2a", day=2)))
        g = mutate(g, AddEventRelation(EventRelation("E2", "E2a", EventRelationLabel.CAUSAL)))
        g = mutate(g, AddEventRelation(EventRelation("E2a", "E3", EventRelationLabel.CAUSAL)))
        assert len(g.event_graph.events) == n_nodes + 1
        assert len(g.event_graph.relations) == n_rel + 1

    def test_duplicate_id(self):
        g = joint(chain_graph(["E1", "E2"]))
        with pytest.raises(DuplicateId):
            mutate(g, AddEvent(make_event("E1")))

    def test_duplicate_relation(self):
        g = joint(chain_graph(["E1", "E2"]))
        with pytest.raises(DuplicateRelation):
            mutate(g, AddEventRelation(EventRelation("E1", "E2", EventRelationLabel.CAUSAL)))

    def test_delete_removes_parallel_labels(self):
        g = joint(chain_graph(["E1", "E2"]))
        g = mutate(g, AddEventRelation(EventRelation("E1", "E2", EventRelationLabel.FORESHADOWING)))
        g = mutate(g, DeleteEventRelation("E1", "E2"))
        assert g.event_graph.relations == ()

    def test_delete_missing_relation(self):
        g = joint(chain_graph(["E1", "E2"]))
        with pytest.raises(UnknownTarget):
            mutate(g, DeleteEventRelation("E2", "E1"))


def test_joint_graph_to_value_is_plain_json(espionage_refined):
    value = joint_graph_to_value(espionage_refined)
    json.dumps(value)
    assert value["plot_graph"]["events"][5]["id"] == "K7P"
