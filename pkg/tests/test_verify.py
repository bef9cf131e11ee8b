import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import example_scene
from oracles import bit_patterns, brute_select
from verinav.backend import GREEDY, BackendError, FunctionBackend, ScriptedBackend
from verinav.cot import CotTriple
from verinav.textualizer import Direction, ObservationDescription, ObservationOption, build_observation
from verinav.verify import (
    MASK_TOKEN,
    Candidate,
    VerificationError,
    VerificationTrace,
    VerifyContext,
    build_mev_prompt,
    build_tfv_prompt,
    consensus_check,
    dedupe_candidates,
    entity_match,
    parse_tfv,
    parse_tfv_detail,
    prepare_masks,
    score_candidate,
    select_action,
)
from verinav.world import NavEdge

HISTORY = "Step 1. go forward to <a sofa>"


@pytest.fixture
def scene():
    graph, captions, episode = example_scene()
    return episode, build_observation(graph, "sofa", 0.0, 0.0, captions)


def _cand(i, action, prediction="x", view_match=None):
    return Candidate(i, CotTriple(prediction, view_match or action, action, f"raw{i}"))


def test_tfv_prompt_golden(scene, fixtures):
    episode, obs = scene
    prompt = build_tfv_prompt(episode.instruction, HISTORY, obs, _cand(0, "C", "bathroom door"))
    assert prompt + "\n" == (fixtures / "tfv_prompt_example.txt").read_text()


def test_mev_prompt_golden(scene, fixtures):
    episode, obs = scene
    mask = prepare_masks(episode.instruction, 2, ["sofa", "bathroom door"])[1]
    prompt = build_mev_prompt(mask, HISTORY, obs, _cand(0, "C", "bathroom door"))
    assert prompt + "\n" == (fixtures / "mev_prompt_example.txt").read_text()
    assert prompt.count(MASK_TOKEN) == 1
    assert "bathroom door" not in prompt.split("Instruction:")[1].split("\n")[0]


def test_action_only_candidate_block(scene):
    episode, obs = scene
    prompt = build_tfv_prompt(episode.instruction, HISTORY, obs, _cand(0, "C", "bathroom door"), full_cot=False)
    assert "Proposed step: Action: C (turn right to <a bathroom door>)." in prompt
    assert "Prediction:" not in prompt


@pytest.mark.parametrize(
    "text, verdict, unparsed",
    [
        ("True", True, False),
        ("true.", True, False),
        (" **True**", True, False),
        ("Yes, it is", True, False),
        ("False", False, False),
        ("no", False, False),
        ("Truly", False, True),
        ("", False, True),
        ("I think True", False, True),
    ],
)
def test_parse_tfv(text, verdict, unparsed):
    assert parse_tfv_detail(text) == (verdict, unparsed)
    assert parse_tfv(text) is verdict


def test_entity_match_hand_pairs(fixtures):
    pairs = json.loads((fixtures / "entity_match_pairs.json").read_text())
    assert len(pairs) == 20
    for predicted, gold, expected in pairs:
        assert entity_match(predicted, gold) is expected, (predicted, gold)


def test_prepare_masks():
    instruction = "Walk past the sofa and stop at the bathroom door."
    masks = prepare_masks(instruction, 2, ["sofa", "bathroom door"])
    assert [m.text for m in masks] == [
        "Walk past the [MASK] and stop at the bathroom door.",
        "Walk past the sofa and stop at the [MASK].",
    ]
    assert [m.masked_entity for m in masks] == ["sofa", "bathroom door"]
    assert len(prepare_masks(instruction, 5, ["sofa", "bathroom door"])) == 2
    assert prepare_masks(instruction, 0, ["sofa"]) == []
    # only the first occurrence is masked
    twice = prepare_masks("Pass the sofa, then the other sofa.", 1, ["sofa"])[0]
    assert twice.text == "Pass the [MASK], then the other sofa."
    with pytest.raises(ValueError):
        prepare_masks(instruction, 1, ["piano"])


def _stairs_observation():
    edges = {
        "B": NavEdge("here", "up", 0, 30, "k1"),
        "C": NavEdge("here", "lounge", 90, 0, "k2"),
        "D": NavEdge("here", "hall", 180, 0, "k3"),
    }
    return ObservationDescription(
        (
            ObservationOption("A", "stop"),
            ObservationOption("B", "go up to <stairs>", edges["B"], Direction.GO_UP),
            ObservationOption("C", "turn right to <a lounge>", edges["C"], Direction.TURN_RIGHT),
            ObservationOption("D", "go back to <a hallway>", edges["D"], Direction.GO_BACK),
        )
    )


def _scripted_scores(candidate, tfv_answers, mev_answers, context, masks):
    backend = ScriptedBackend()
    backend.add(build_tfv_prompt(context.instruction, context.history, context.observation, candidate), tfv_answers)
    backend.add(build_mev_prompt(masks[0], context.history, context.observation, candidate), mev_answers)
    return score_candidate(candidate, context, masks, 4, backend, GREEDY), backend


def test_worked_verification_scores():
    instruction = "Go up the stairs and wait at the top."
    context = VerifyContext(instruction, "none", _stairs_observation())
    masks = prepare_masks(instruction, 1, ["stairs"])
    wrong = _cand(3, "D", "hallway")
    right = _cand(1, "B", "stairs")
    t_wrong, b1 = _scripted_scores(wrong, ["False", "False", "True", "False"], ["hallway"] * 4, context, masks)
    t_right, b2 = _scripted_scores(right, ["True", "True", "True", "False"], ["stairs"] * 4, context, masks)
    assert t_wrong.tfv_outcomes == [False, False, True, False]
    assert t_wrong.mev_outcomes == [[False] * 4]
    assert t_wrong.total == 1
    assert t_right.tfv_score == 3 and t_right.mev_score == 4 and t_right.total == 7
    assert b1.remaining() == b2.remaining() == 0
    assert select_action([right, wrong], [t_right, t_wrong]) is right


def test_minimal_budget(scene):
    episode, obs = scene
    context = VerifyContext(episode.instruction, HISTORY, obs)
    backend = FunctionBackend(lambda prompt, params: "True")
    trace = score_candidate(_cand(0, "C"), context, [], 1, backend, GREEDY)
    assert trace.total == trace.tfv_score == 1
    assert trace.mev_outcomes == []
    assert len(backend.calls) == 1


def test_query_count_and_channels(scene):
    episode, obs = scene
    context = VerifyContext(episode.instruction, HISTORY, obs)
    masks = prepare_masks(episode.instruction, 2, ["sofa", "bathroom door"])
    backend = FunctionBackend(lambda prompt, params: "sofa")
    trace = score_candidate(_cand(0, "C"), context, masks, 3, backend, GREEDY)
    assert len(backend.calls) == 3 + 2 * 3
    assert trace.mev_outcomes == [[True] * 3, [False] * 3]
    assert trace.tfv_unparsed == [True] * 3
    only_mev = score_candidate(_cand(0, "C"), context, masks, 3, backend, GREEDY, tfv=False)
    assert only_mev.tfv_outcomes == [] and only_mev.total == 3


def test_parallel_dispatch_matches_sequential(scene):
    episode, obs = scene
    context = VerifyContext(episode.instruction, HISTORY, obs)
    masks = prepare_masks(episode.instruction, 2, ["sofa", "bathroom door"])

    def answer(prompt, params):
        return "bathroom door" if "[MASK]." in prompt else ("True" if "Action: C" in prompt else "sofa")

    seq = score_candidate(_cand(0, "C"), context, masks, 4, FunctionBackend(answer), GREEDY)
    par = score_candidate(_cand(0, "C"), context, masks, 4, FunctionBackend(answer), GREEDY, max_workers=4)
    assert seq.to_dict() == par.to_dict()


def test_backend_failure_is_attributed(scene):
    episode, obs = scene
    context = VerifyContext(episode.instruction, HISTORY, obs)

    def boom(prompt, params):
        raise BackendError("down")

    with pytest.raises(VerificationError) as err:
        score_candidate(_cand(2, "C"), context, [], 2, FunctionBackend(boom), GREEDY)
    assert (err.value.candidate_index, err.value.channel, err.value.p) == (2, "tfv", 0)


def test_trace_round_trip_and_consistency():
    trace = VerificationTrace(0, [True, False], [[True, True]], [False, False], [["a", "a"]], [])
    again = VerificationTrace.from_dict(json.loads(json.dumps(trace.to_dict())))
    assert again == trace
    bad = trace.to_dict()
    bad["total"] = 99
    with pytest.raises(ValueError):
        VerificationTrace.from_dict(bad)


def _trace(i, tfv, rows):
    return VerificationTrace(i, list(tfv), [list(r) for r in rows], [False] * len(tfv), [[""] * len(r) for r in rows], [])


def test_select_ties():
    cands = [_cand(0, "B"), _cand(1, "C"), _cand(2, "D")]
    # equal totals: more true/false passes wins
    traces = [_trace(0, [True, False], [[True, True]]), _trace(1, [True, True], [[True, False]]), _trace(2, [False, False], [[False, False]])]
    assert select_action(cands, traces).index == 1
    # full tie: earliest index
    traces = [_trace(k, [True, False], [[True, False]]) for k in range(3)]
    assert select_action(cands, traces).index == 0
    with pytest.raises(ValueError):
        select_action([], [])


def test_select_matches_brute_force_exhaustively():
    # two candidates, P=2, R=1: every one of the 2**8 outcome patterns
    cands = [_cand(0, "B"), _cand(1, "C")]
    for bits in bit_patterns(8):
        outcomes = [(bits[0:2], [bits[2:4]]), (bits[4:6], [bits[6:8]])]
        traces = [_trace(k, tfv, rows) for k, (tfv, rows) in enumerate(outcomes)]
        assert select_action(cands, traces).index == brute_select(outcomes)


outcome = st.integers(1, 4).flatmap(
    lambda P: st.integers(0, 2).flatmap(
        lambda R: st.lists(
            st.tuples(st.lists(st.booleans(), min_size=P, max_size=P), st.lists(st.lists(st.booleans(), min_size=P, max_size=P), min_size=R, max_size=R)),
            min_size=1,
            max_size=5,
        ).map(lambda cs: (P, R, cs))
    )
)


@settings(max_examples=200, deadline=None)
@given(outcome)
def test_selection_properties(data):
    P, R, outcomes = data
    cands = [_cand(k, "ABCDE"[k]) for k in range(len(outcomes))]
    traces = [_trace(k, tfv, rows) for k, (tfv, rows) in enumerate(outcomes)]
    for t in traces:
        assert 0 <= t.total <= P * (1 + R)
    chosen = select_action(cands, traces)
    assert chosen.index == brute_select(outcomes)
    # presenting candidates in another order does not change the winner
    order = list(reversed(range(len(cands))))
    assert select_action([cands[i] for i in order], [traces[i] for i in order]).index == chosen.index
    # flipping a False of the winner to True keeps it the winner
    tfv, rows = outcomes[chosen.index]
    if False in tfv:
        j = tfv.index(False)
        boosted = list(outcomes)
        boosted[chosen.index] = (tfv[:j] + [True] + tfv[j + 1 :], rows)
        traces2 = [_trace(k, t, r) for k, (t, r) in enumerate(boosted)]
        assert select_action(cands, traces2).index == chosen.index


def test_consensus_and_dedupe():
    same = [_cand(0, "B", "sofa"), _cand(1, "B", "chair")]
    assert consensus_check(same) == "B"
    assert consensus_check([_cand(0, "B"), _cand(1, "C")]) is None
    with pytest.raises(ValueError):
        consensus_check([])
    dup = [_cand(0, "B", "sofa"), _cand(1, "B", "sofa"), _cand(2, "C", "sofa")]
    assert [c.index for c in dedupe_candidates(dup)] == [0, 2]
