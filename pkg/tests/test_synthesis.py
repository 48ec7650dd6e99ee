import json

import pytest

from storyloom.planning import Premise, Title
from storyloom.provider import StubTransport, ChatClient, ProviderConfig, stub_client
from storyloom.serialize import CharacterProfiles, Profile, serialize_events
from storyloom.synthesis import (
    CountMismatch,
    EMPTY_MEMORY,
    NarrativeMemory,
    Scene,
    SceneBeat,
    Script,
    generate_beats,
    realize_scene,
    render_script_markdown,
    script_from_dict,
    synthesize,
    update_memory,
)

from conftest import chain_graph

PREMISE = Premise(id="p1", text="A story about keeping promises.")
TITLE = Title("The Kept Word")
PROFILES = CharacterProfiles(
    profiles={
        "Mara Voss": Profile("The resolute lead.", "C1"),
        "Aiden Cole": Profile("The compromised partner.", "C2"),
    }
)


def ten_plan():
    return serialize_events(chain_graph([f"E{i}" for i in range(1, 11)]))


def beats_json(n, prefix="Beat"):
    return json.dumps(
        [
            {"place": f"Place {i}", "plot_element": "Development", "beat": f"{prefix} {i} with Mara Voss"}
            for i in range(1, n + 1)
        ]
    )


def scene_replies(n, lines=8):
    out = []
    for i in range(1, n + 1):
        out.append(json.dumps({"scene_description": f"Description of scene {i}."}))
        out.append(json.dumps({"dialogue": [f"Mara Voss: (steady) line {j} of scene {i}" for j in range(1, lines + 1)]}))
    return out


class TestGenerateBeats:
    def test_count_contract(self):
        plan = ten_plan()
        client = stub_client([beats_json(10)])
        beats = generate_beats(plan, PROFILES, TITLE, PREMISE, client)
        assert len(beats) == 10
        assert beats[0].place == "Place 1"

    def test_retry_on_count_mismatch(self):
        plan = ten_plan()
        client = stub_client([beats_json(9), beats_json(9), beats_json(10)])
        beats = generate_beats(plan, PROFILES, TITLE, PREMISE, client)
        assert len(beats) == 10
        assert client.ledger.total_calls == 3

    def test_strict_mode_raises_count_mismatch(self):
        plan = ten_plan()
        client = stub_client([beats_json(9)] * 3)
        with pytest.raises(CountMismatch):
            generate_beats(plan, PROFILES, TITLE, PREMISE, client, strict=True)

    def test_non_strict_pads(self):
        plan = ten_plan()
        client = stub_client([beats_json(8)] * 3)
        beats = generate_beats(plan, PROFILES, TITLE, PREMISE, client)
        assert len(beats) == 10
        assert beats[9].plot_element == "(missing beat)"

    def test_non_strict_truncates(self):
        plan = ten_plan()
        client = stub_client([beats_json(12)] * 3)
        beats = generate_beats(plan, PROFILES, TITLE, PREMISE, client)
        assert len(beats) == 10

    def test_unusable_reply_raises_extraction(self):
        from storyloom.provider import ExtractionError

        plan = ten_plan()
        client = stub_client(["nonsense"] * 3)
        with pytest.raises(ExtractionError):
            generate_beats(plan, PROFILES, TITLE, PREMISE, client)


class TestRealizeScene:
    def test_assembly(self):
        plan = ten_plan()
        beat = SceneBeat("Docks", "Setup", "Mara Voss makes a promise.")
        client = stub_client(scene_replies(1))
        scene, warnings = realize_scene(beat, 1, plan, PROFILES, EMPTY_MEMORY, client)
        assert scene.index == 1
        assert len(scene.dialogue) == 8
        assert warnings == []

    def test_short_dialogue_warns(self):
        plan = ten_plan()
        beat = SceneBeat("Docks", "Setup", "A promise.")
        client = stub_client(scene_replies(1, lines=5))
        scene, warnings = realize_scene(beat, 1, plan, PROFILES, EMPTY_MEMORY, client)
        assert len(scene.dialogue) == 5
        assert any("below the 8-line target" in w for w in warnings)

    def test_memory_injected_into_dialogue_prompt(self):
        plan = ten_plan()
        beat = SceneBeat("Docks", "Setup", "A promise.")
        transport = StubTransport(scene_replies(1))
        client = ChatClient(transport, ProviderConfig(), sleep=lambda _t: None)
        memory = NarrativeMemory(summary="Scene 1: the promise was made.", scene_count_covered=1)
        realize_scene(beat, 2, plan, PROFILES, memory, client)
        dialogue_prompt = transport.calls[-1]
        assert "Scene 1: the promise was made." in dialogue_prompt

    def test_reflect_stub_echo_containment(self):
        # With a reflecting stub the dialogue reply cannot parse, so the raw
        # echo (which embeds the whole prompt, memory included) lands in the
        # assembled scene.
        plan = ten_plan()
        beat = SceneBeat("Docks", "Setup", "A promise.")
        client = stub_client(None, reflect=True, max_retries=0)
        memory = NarrativeMemory(summary="the promise was made", scene_count_covered=1)
        scene, warnings = realize_scene(beat, 2, plan, PROFILES, memory, client)
        assert "the promise was made" in scene.dialogue[0]
        assert any("unusable dialogue" in w for w in warnings)

    def test_character_subset_by_beat_mention(self):
        plan = ten_plan()
        beat = SceneBeat("Docks", "Setup", "Aiden stands alone.")
        transport = StubTransport(scene_replies(1))
        client = ChatClient(transport, ProviderConfig(), sleep=lambda _t: None)
        realize_scene(beat, 1, plan, PROFILES, EMPTY_MEMORY, client)
        dialogue_prompt = transport.calls[-1]
        assert "Aiden Cole" in dialogue_prompt
        assert "Mara Voss" not in dialogue_prompt.split("Narrative memory")[0]

    def test_pass_all_characters_flag(self):
        plan = ten_plan()
        beat = SceneBeat("Docks", "Setup", "Nobody is named here.")
        transport = StubTransport(scene_replies(1))
        client = ChatClient(transport, ProviderConfig(), sleep=lambda _t: None)
        realize_scene(beat, 1, plan, PROFILES, EMPTY_MEMORY, client, subset_characters=False)
        assert "Mara Voss" in transport.calls[-1]


class TestUpdateMemory:
    def scene(self, index=1, beat_text="the promise"):
        return Scene(
            index=index,
            beat=SceneBeat("Docks", "Setup", beat_text),
            scene_description="desc",
            dialogue=("Mara Voss: (soft) ok",),
        )

    def test_counter_increments(self):
        memory = update_memory(EMPTY_MEMORY, self.scene(1))
        assert memory.scene_count_covered == 1

    def test_concatenation_contract(self):
        memory = EMPTY_MEMORY
        for i in range(1, 4):
            memory = update_memory(memory, self.scene(i, beat_text=f"beat {i}"))
        assert memory.scene_count_covered == 3
        assert memory.summary.index("beat 1") < memory.summary.index("beat 2") < memory.summary.index("beat 3")

    def test_provider_summarize(self):
        client = stub_client(['{"summary": "compact"}'])
        memory = update_memory(EMPTY_MEMORY, self.scene(1), client)
        assert memory.summary == "compact"
        assert memory.scene_count_covered == 1

    def test_provider_failure_falls_back(self):
        client = stub_client(["garbage"] * 3)
        memory = update_memory(EMPTY_MEMORY, self.scene(2), client)
        assert "Scene 2: the promise" in memory.summary
        assert memory.scene_count_covered == 1

    def test_budget_keeps_recent(self):
        memory = EMPTY_MEMORY
        for i in range(1, 200):
            memory = update_memory(memory, self.scene(i, beat_text="x" * 100))
        assert len(memory.summary) <= 4000
        assert f"Scene 199" in memory.summary


class TestSynthesize:
    def client_for(self, n, lines=8):
        return stub_client([beats_json(n)] + scene_replies(n, lines=lines))

    def test_loop_contract(self):
        plan = ten_plan()
        script = synthesize(plan, PROFILES, TITLE, PREMISE, self.client_for(10), provider_memory=False)
        assert len(script.scenes) == 10
        assert script.memory_snapshots[9].scene_count_covered == 10
        assert [s.index for s in script.scenes] == list(range(1, 11))

    def test_sixteen_event_espionage_plan(self, espionage_refined):
        plan = serialize_events(espionage_refined.event_graph)
        client = self.client_for(16)
        script = synthesize(plan, PROFILES, TITLE, PREMISE, client, provider_memory=False)
        assert len(script.scenes) == 16

    def test_memory_snapshot_of_prior_scenes_in_each_dialogue_prompt(self, espionage_refined):
        plan = serialize_events(espionage_refined.event_graph)
        transport = StubTransport([beats_json(16)] + scene_replies(16))
        client = ChatClient(transport, ProviderConfig(), sleep=lambda _t: None)
        script = synthesize(plan, PROFILES, TITLE, PREMISE, client, provider_memory=False)
        dialogue_prompts = [p for p in transport.calls if "cinematic dialogue" in p]
        assert len(dialogue_prompts) == 16
        for i, prompt in enumerate(dialogue_prompts, start=1):
            if i == 1:
                assert "(no prior scenes)" in prompt
            else:
                assert script.memory_snapshots[i - 2].summary in prompt
                assert script.memory_snapshots[i - 2].scene_count_covered == i - 1

    def test_replay_determinism(self):
        plan = ten_plan()
        first = synthesize(plan, PROFILES, TITLE, PREMISE, self.client_for(10), provider_memory=False)
        second = synthesize(plan, PROFILES, TITLE, PREMISE, self.client_for(10), provider_memory=False)
        assert json.dumps(first.to_dict()) == json.dumps(second.to_dict())

    def test_script_round_trip(self):
        plan = ten_plan()
        script = synthesize(plan, PROFILES, TITLE, PREMISE, self.client_for(10), provider_memory=False)
        assert script_from_dict(script.to_dict()) == script

    def test_markdown_rendering(self):
        plan = ten_plan()
        script = synthesize(plan, PROFILES, TITLE, PREMISE, self.client_for(10), provider_memory=False)
        text = render_script_markdown(script)
        assert "# The Kept Word" in text
        assert "## Scene 10" in text


class TestScriptInvariants:
    def test_contiguity_enforced(self):
        beat = SceneBeat("a", "b", "c")
        scene = Scene(index=2, beat=beat, scene_description="d", dialogue=())
        with pytest.raises(ValueError):
            Script(title="T", premise=PREMISE, scenes=(scene,), memory_snapshots=(EMPTY_MEMORY,))

    def test_snapshot_count_enforced(self):
        beat = SceneBeat("a", "b", "c")
        scene = Scene(index=1, beat=beat, scene_description="d", dialogue=())
        with pytest.raises(ValueError):
            Script(title="T", premise=PREMISE, scenes=(scene,), memory_snapshots=())
