"""Calibrated stochastic backend for synthetic worlds.

It answers navigation, true/false and masked-entity prompts by reading them,
replaying the agent's history from the episode start to find its position,
and consulting the graph for the correct next option. Navigation samples are
correct with probability ``p_candidate``; a verifier query about a correct
candidate succeeds with probability ``p_verify_correct`` and about an
incorrect one with ``p_verify_incorrect``.
"""

from __future__ import annotations

import hashlib
import random
import re
import threading
from collections import defaultdict
from dataclasses import dataclass
from typing import Mapping, Sequence

from verinav.backend import BaseBackend, BackendError, BackendResponse, SamplingParams, fingerprint
from verinav.textualizer import STOP_LETTER, CaptionProvider, ObservationDescription, build_observation, pose_after
from verinav.verify import MASK_TOKEN
from verinav.world import Episode, NavGraph, Unreachable, shortest_path_length

_NAV = re.compile(
    r"Input: Instruction: (?P<instruction>.*) Observation: (?P<obs>\[.*\])\. History: (?P<history>.*)\.\nOutput:\Z", re.S
)
_VERIFY = re.compile(
    r"Instruction: (?P<instruction>.*?)\nHistory: (?P<history>.*?)\nObservation: (?P<obs>\[.*?\])\n"
    r"(?:Proposed step|Assume this step is executed): (?P<candidate>.*?)\nQuestion", re.S
)
_ACTION = re.compile(r"Action: ([A-Z])\b")
_HISTORY_LINE = re.compile(r"Step \d+\. (.*)")
_CAPTION = re.compile(r"<([^<>]*)>")


class SimulationError(BackendError):
    pass


@dataclass(frozen=True)
class Calibration:
    p_candidate: float = 0.5
    p_verify_correct: float = 0.8
    p_verify_incorrect: float = 0.3


class SimulatedNavigator(BaseBackend):
    backend_id = "simulated"

    def __init__(
        self,
        graphs: Mapping[str, NavGraph],
        episodes: Sequence[Episode],
        captions: CaptionProvider | Mapping[str, CaptionProvider],
        calibration: Calibration = Calibration(),
        seed: int = 0,
    ):
        self.graphs = graphs
        self.captions = captions
        self.calibration = calibration
        self.seed = seed
        self._episodes: dict[str, list[Episode]] = defaultdict(list)
        for ep in episodes:
            self._episodes[ep.instruction].append(ep)
        self._lock = threading.Lock()
        self._seen: dict[str, int] = defaultdict(int)
        self.calls = 0

    def _captions_for(self, scan: str) -> CaptionProvider:
        return self.captions if hasattr(self.captions, "caption") else self.captions[scan]

    def _rng(self, prompt: str, params: SamplingParams) -> random.Random:
        fp = fingerprint(prompt)
        with self._lock:
            self.calls += 1
            if params.temperature == 0:
                n = 0
            else:
                n = self._seen[fp]
                self._seen[fp] += 1
        digest = hashlib.sha256(f"{self.seed}:{params.seed}:{fp}:{n}".encode()).digest()
        return random.Random(int.from_bytes(digest[:8], "big"))

    def _locate(self, instruction: str, history: str, observation: str) -> tuple[Episode, NavGraph, ObservationDescription, str]:
        """Episode, graph, observation and correct letter at the replayed position.

        Episodes sharing an instruction are told apart by the observation.
        """
        texts = [] if history.strip() == "none" else [_HISTORY_LINE.match(line).group(1) for line in history.split("\n")]
        for ep in self._episodes.get(instruction, []):
            graph = self.graphs[ep.scan]
            captions = self._captions_for(ep.scan)
            at, heading, elevation = ep.start, ep.start_heading, 0.0
            ok = True
            for text in texts:
                obs = build_observation(graph, at, heading, elevation, captions)
                match = next((o for o in obs.options if o.text == text and not o.is_stop), None)
                if match is None:
                    ok = False
                    break
                heading, elevation = pose_after(match)
                at = match.edge.target
            if not ok:
                continue
            obs = build_observation(graph, at, heading, elevation, captions)
            if obs.rendered != observation:
                continue
            return ep, graph, obs, self._correct_letter(graph, obs, at, ep.goal)
        raise SimulationError(f"cannot place agent for instruction {instruction[:60]!r}")

    @staticmethod
    def _correct_letter(graph: NavGraph, obs: ObservationDescription, at: str, goal: str) -> str:
        """Stop at the goal, otherwise the first hop of a shortest path to it."""
        if at == goal:
            return STOP_LETTER
        best, best_d = None, float("inf")
        for o in obs.options:
            if o.is_stop:
                continue
            try:
                d = graph.euclidean(at, o.edge.target) + shortest_path_length(graph, o.edge.target, goal)
            except Unreachable:
                continue
            if d < best_d - 1e-9:
                best, best_d = o.letter, d
        return best or STOP_LETTER

    @staticmethod
    def _prediction(obs: ObservationDescription, letter: str) -> str:
        m = _CAPTION.search(obs.option(letter).text)
        return m.group(1) if m else "the goal"

    def generate(self, prompt: str, params: SamplingParams) -> BackendResponse:
        rng = self._rng(prompt, params)
        cal = self.calibration
        m = _VERIFY.search(prompt)
        if m is not None:
            masked = m.group("instruction")
            if "Which phrase was hidden" in prompt:
                return self._mev(rng, masked, m.group("history"), m.group("obs"), m.group("candidate"))
            _, _, _, correct = self._locate(masked, m.group("history"), m.group("obs"))
            action = _ACTION.search(m.group("candidate")).group(1)
            p = cal.p_verify_correct if action == correct else cal.p_verify_incorrect
            return BackendResponse("True" if rng.random() < p else "False", 0.0, self.backend_id)
        m = _NAV.match(prompt, max(prompt.rfind("Input: Instruction: "), 0))
        if m is None:
            raise SimulationError("unrecognized prompt")
        _, _, obs, correct = self._locate(m.group("instruction"), m.group("history"), m.group("obs"))
        letters = list(obs.letters)
        wrong = [x for x in letters if x != correct]
        letter = correct if not wrong or rng.random() < cal.p_candidate else rng.choice(wrong)
        pred = self._prediction(obs, letter)
        text = f"Prediction: {pred}. View match: {letter} supports the prediction. Action: {letter}."
        return BackendResponse(text, 0.0, self.backend_id)

    def _mev(self, rng: random.Random, masked: str, history: str, observation: str, candidate: str) -> BackendResponse:
        pos = masked.find(MASK_TOKEN)
        tail = len(masked) - pos - len(MASK_TOKEN)
        for instruction in self._episodes:
            if not (instruction[:pos] == masked[:pos] and instruction[len(instruction) - tail :] == masked[pos + len(MASK_TOKEN) :]):
                continue
            try:
                _, _, _, correct = self._locate(instruction, history, observation)
            except SimulationError:
                continue
            entity = instruction[pos : len(instruction) - tail]
            action = _ACTION.search(candidate).group(1)
            p = self.calibration.p_verify_correct if action == correct else self.calibration.p_verify_incorrect
            return BackendResponse(entity if rng.random() < p else "hallway", 0.0, self.backend_id)
        raise SimulationError("masked instruction matches no episode")
