import json
import random
import socket
from importlib import resources

import pytest

from storyloom.graph import (
    EventGraph,
    EventNode,
    EventRelation,
    EventRelationLabel,
    JointGraph,
    StageLabel,
    TimeIndex,
    parse_joint_graph,
)

STAGES = list(StageLabel)
LABELS = list(EventRelationLabel)


@pytest.fixture(autouse=True)
def no_network(monkeypatch):
    """The whole suite must run without any network access."""

    def guard(*args, **kwargs):
        raise AssertionError("network access attempted during offline test run")

    monkeypatch.setattr(socket.socket, "connect", guard)


def load_sample(name: str) -> str:
    return (resources.files("storyloom.data") / "samples" / name).read_text(encoding="utf-8")


@pytest.fixture
def espionage_initial() -> JointGraph:
    return parse_joint_graph(load_sample("espionage_graph_initial.json"))


@pytest.fixture
def espionage_refined() -> JointGraph:
    return parse_joint_graph(load_sample("espionage_graph_refined.json"))


@pytest.fixture
def espionage_initial_text() -> str:
    return load_sample("espionage_graph_initial.json")


def make_event(event_id: str, stage=StageLabel.RISING_ACTION, day=1, description=None) -> EventNode:
    return EventNode(
        id=event_id,
        description=description or f"event {event_id}",
        stage=stage,
        time=TimeIndex.parse(f"Day {day}"),
    )


def chain_graph(ids, stages=None, label=EventRelationLabel.CAUSAL) -> EventGraph:
    """A linear graph over the given ids; stages default to B, RA..., E."""
    n = len(ids)
    if stages is None:
        stages = [StageLabel.BEGINNING] + [StageLabel.RISING_ACTION] * (n - 2) + [StageLabel.ENDING]
    events = tuple(make_event(i, stage=s, day=k + 1) for k, (i, s) in enumerate(zip(ids, stages)))
    relations = tuple(EventRelation(a, b, label) for a, b in zip(ids, ids[1:]))
    return EventGraph(events=events, relations=relations)


def random_event_graph(rng: random.Random, max_nodes: int = 8, edge_prob: float = 0.3) -> EventGraph:
    """An arbitrary labeled graph (cycles allowed) satisfying type invariants."""
    n = rng.randint(2, max_nodes)
    ids = [f"E{i}" for i in range(n)]
    events = tuple(
        make_event(ids[i], stage=rng.choice(STAGES), day=rng.randint(1, 6)) for i in range(n)
    )
    relations = []
    seen = set()
    for a in ids:
        for b in ids:
            if a == b:
                continue
            for label in LABELS:
                if rng.random() < edge_prob / len(LABELS) and (a, b, label) not in seen:
                    seen.add((a, b, label))
                    relations.append(EventRelation(a, b, label))
    return EventGraph(events=events, relations=tuple(relations))


def random_valid_graph(rng: random.Random, max_nodes: int = 10) -> EventGraph:
    """A graph guaranteed to pass both structural checks.

    Node 0 is the unique Beginning, node n-1 the unique Ending; every node
    gets a flow in-edge from an earlier node and a flow out-edge to a later
    node, so reachability holds and the causal subgraph is a forward DAG.
    """
    n = rng.randint(2, max_nodes)
    ids = [f"N{i}" for i in range(n)]
    middle = [StageLabel.RISING_ACTION, StageLabel.CLIMAX, StageLabel.FALLING_ACTION]
    stages = (
        [StageLabel.BEGINNING]
        + [rng.choice(middle) for _ in range(n - 2)]
        + [StageLabel.ENDING]
    )
    events = tuple(make_event(ids[i], stage=stages[i], day=rng.randint(1, n)) for i in range(n))
    flow = [EventRelationLabel.CAUSAL, EventRelationLabel.SUSPENSE]
    seen = set()
    relations = []

    def add(a, b, label):
        if (a, b, label) not in seen and a != b:
            seen.add((a, b, label))
            relations.append(EventRelation(a, b, label))

    for i in range(1, n):
        add(ids[rng.randint(0, i - 1)], ids[i], rng.choice(flow))
    for i in range(n - 1):
        if not any(r.from_id == ids[i] and r.label in flow for r in relations):
            add(ids[i], ids[rng.randint(i + 1, n - 1)], rng.choice(flow))
    for _ in range(rng.randint(0, n)):
        i = rng.randint(0, n - 2)
        j = rng.randint(i + 1, n - 1)
        add(ids[i], ids[j], rng.choice(LABELS))
    return EventGraph(events=events, relations=tuple(relations))


def joint(event_graph: EventGraph) -> JointGraph:
    return JointGraph(event_graph=event_graph)


def as_document(graph: JointGraph) -> str:
    from storyloom.graph import joint_graph_to_value

    return json.dumps(joint_graph_to_value(graph))
