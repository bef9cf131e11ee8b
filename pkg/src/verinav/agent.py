"""Episode runner: observe, sample chains of thought, decide, move."""

from __future__ import annotations

import dataclasses
import enum
import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

from verinav import metrics
from verinav.backend import Backend, BackendError, SamplingParams
from verinav.cot import CotParseError, EntityList, build_nav_prompt, extract_entities_rule_based, parse_cot
from verinav.textualizer import (
    STOP_LETTER,
    CaptionProvider,
    Direction,
    ObservationDescription,
    ObservationOption,
    build_observation,
    pose_after,
)
from verinav.verify import (
    Candidate,
    VerificationTrace,
    VerifyContext,
    consensus_check,
    dedupe_candidates,
    prepare_masks,
    score_candidate,
    select_action,
)
from verinav.world import Episode, NavEdge, NavGraph

logger = logging.getLogger(__name__)


class Mode(str, enum.Enum):
    GREEDY = "greedy"
    SAMPLE_VOTE = "sample_vote"
    VERIFY = "verify"


@dataclass(frozen=True)
class AgentConfig:
    mode: Mode = Mode.VERIFY
    num_candidates: int = 4
    verification_samples: int = 4
    masked_entities: int = 2
    max_steps: int = 15
    sampling: SamplingParams = field(default_factory=SamplingParams)
    tfv_enabled: bool = True
    mev_enabled: bool = True
    full_cot_verification: bool = True
    strict_parse: bool = False
    verify_workers: int = 1

    def __post_init__(self):
        mode = Mode(self.mode)
        object.__setattr__(self, "mode", mode)
        if mode is Mode.GREEDY:
            object.__setattr__(self, "num_candidates", 1)
            object.__setattr__(self, "sampling", dataclasses.replace(self.sampling, temperature=0.0))
        if self.num_candidates < 1 or self.verification_samples < 1 or self.max_steps < 1:
            raise ValueError("num_candidates, verification_samples and max_steps must be positive")
        if self.masked_entities < 0:
            raise ValueError("masked_entities must be nonnegative")
        if mode is Mode.VERIFY and not (self.tfv_enabled or self.mev_enabled):
            raise ValueError("verify mode needs at least one verification channel")

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["mode"] = self.mode.value
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "AgentConfig":
        d = dict(d)
        if isinstance(d.get("sampling"), Mapping):
            d["sampling"] = SamplingParams(**d["sampling"])
        return cls(**d)


class Termination(str, enum.Enum):
    STOP = "stop_action"
    MAX_STEPS = "max_steps"
    ERROR = "error"


# --- records -----------------------------------------------------------------


def _option_to_dict(o: ObservationOption) -> dict[str, Any]:
    return {"letter": o.letter, "text": o.text, "edge": o.edge.to_dict() if o.edge else None}


def _option_from_dict(d: Mapping[str, Any]) -> ObservationOption:
    edge = NavEdge.from_dict(d["edge"]) if d["edge"] else None
    direction = None
    if edge is not None:
        direction = next(x for x in Direction if d["text"].startswith(x.rendered + " "))
    return ObservationOption(d["letter"], d["text"], edge, direction)


def _cot_to_dict(c: Candidate) -> dict[str, Any]:
    return {
        "index": c.index,
        "prediction": c.cot.prediction,
        "view_match": c.cot.view_match,
        "action": c.cot.action,
        "raw": c.cot.raw,
    }


def _cot_from_dict(d: Mapping[str, Any]) -> Candidate:
    from verinav.cot import CotTriple

    return Candidate(d["index"], CotTriple(d["prediction"], d["view_match"], d["action"], d["raw"]))


@dataclass
class StepRecord:
    t: int
    viewpoint: str
    heading: float
    elevation: float
    observation: ObservationDescription
    samples: list[str]
    candidates: list[Candidate]
    parse_failures: list[dict[str, Any]]
    traces: list[VerificationTrace]
    chosen: str
    executed_edge: NavEdge | None
    history_line: str
    consensus: str | None = None
    degenerate: bool = False

    def __post_init__(self):
        if self.chosen not in self.observation.letters:
            raise ValueError(f"step {self.t}: chosen letter {self.chosen!r} not in observation")
        if (self.executed_edge is None) != (self.chosen == STOP_LETTER):
            raise ValueError(f"step {self.t}: executed edge must be absent exactly when stopping")

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": "step",
            "t": self.t,
            "viewpoint": self.viewpoint,
            "heading": self.heading,
            "elevation": self.elevation,
            "observation": self.observation.rendered,
            "options": [_option_to_dict(o) for o in self.observation.options],
            "samples": self.samples,
            "candidates": [_cot_to_dict(c) for c in self.candidates],
            "parse_failures": self.parse_failures,
            "consensus": self.consensus,
            "traces": [tr.to_dict() for tr in self.traces],
            "chosen": self.chosen,
            "executed_edge": self.executed_edge.to_dict() if self.executed_edge else None,
            "history_line": self.history_line,
            "degenerate": self.degenerate,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "StepRecord":
        obs = ObservationDescription(tuple(_option_from_dict(o) for o in d["options"]))
        if obs.rendered != d["observation"]:
            raise ValueError(f"step {d['t']}: options do not reproduce the rendered observation")
        return cls(
            t=d["t"],
            viewpoint=d["viewpoint"],
            heading=d["heading"],
            elevation=d["elevation"],
            observation=obs,
            samples=list(d["samples"]),
            candidates=[_cot_from_dict(c) for c in d["candidates"]],
            parse_failures=list(d["parse_failures"]),
            traces=[VerificationTrace.from_dict(t) for t in d["traces"]],
            chosen=d["chosen"],
            executed_edge=NavEdge.from_dict(d["executed_edge"]) if d["executed_edge"] else None,
            history_line=d["history_line"],
            consensus=d["consensus"],
            degenerate=d["degenerate"],
        )

    @property
    def verification_queries(self) -> int:
        return sum(len(tr.transcripts) for tr in self.traces)


@dataclass
class EpisodeResult:
    episode_id: str
    scan: str
    instruction: str
    gt_path: tuple[str, ...]
    trajectory: list[str]
    steps: list[StepRecord]
    terminated_by: Termination
    metrics: metrics.MetricRecord | None = None
    error: str | None = None

    def header(self) -> dict[str, Any]:
        return {
            "kind": "episode",
            "episode_id": self.episode_id,
            "scan": self.scan,
            "instruction": self.instruction,
            "gt_path": list(self.gt_path),
            "trajectory": self.trajectory,
            "terminated_by": self.terminated_by.value,
            "metrics": self.metrics.to_dict() if self.metrics else None,
            "error": self.error,
        }

    @classmethod
    def from_records(cls, header: Mapping[str, Any], steps: Sequence[Mapping[str, Any]]) -> "EpisodeResult":
        m = header["metrics"]
        return cls(
            episode_id=header["episode_id"],
            scan=header["scan"],
            instruction=header["instruction"],
            gt_path=tuple(header["gt_path"]),
            trajectory=list(header["trajectory"]),
            steps=[StepRecord.from_dict(s) for s in steps],
            terminated_by=Termination(header["terminated_by"]),
            metrics=metrics.MetricRecord.from_dict(m) if m else None,
            error=header["error"],
        )


class EpisodeAborted(Exception):
    def __init__(self, partial: EpisodeResult, cause: BaseException):
        self.partial = partial
        self.cause = cause
        super().__init__(f"episode {partial.episode_id} aborted at step {len(partial.steps)}: {cause}")


def render_history(steps: Sequence[StepRecord]) -> str:
    lines = [s.history_line for s in steps if s.history_line]
    return "\n".join(lines) if lines else "none"


# --- decisions ---------------------------------------------------------------


def majority_action(candidates: Sequence[Candidate]) -> str:
    """Most frequent action letter; ties go to the one sampled first."""
    counts = Counter(c.action for c in candidates)
    best = max(counts.values())
    for c in sorted(candidates, key=lambda c: c.index):
        if counts[c.action] == best:
            return c.action
    raise ValueError("no candidates")


class Agent:
    """Runs episodes against one backend with a fixed configuration."""

    def __init__(
        self,
        config: AgentConfig,
        backend: Backend,
        example: str | None = None,
        entity_extractor=extract_entities_rule_based,
    ):
        self.config = config
        self.backend = backend
        self.example = example
        self.entity_extractor = entity_extractor

    def _sample(self, prompt: str, observation: ObservationDescription):
        responses = self.backend.generate_n(prompt, self.config.num_candidates, self.config.sampling)
        samples = [r.text for r in responses]
        candidates, failures = [], []
        for k, text in enumerate(samples):
            try:
                cot = parse_cot(text, observation, strict_only=self.config.strict_parse)
            except CotParseError as exc:
                failures.append({"sample": k, "error": type(exc).__name__, "detail": str(exc)})
                continue
            candidates.append(Candidate(len(candidates), cot))
        return samples, candidates, failures

    def _verify(self, candidates, context: VerifyContext, masks) -> tuple[str, list[VerificationTrace]]:
        cfg = self.config
        unique = dedupe_candidates(candidates)
        traces = [
            score_candidate(
                c,
                context,
                masks,
                cfg.verification_samples,
                self.backend,
                cfg.sampling,
                tfv=cfg.tfv_enabled,
                mev=cfg.mev_enabled,
                full_cot=cfg.full_cot_verification,
                max_workers=cfg.verify_workers,
            )
            for c in unique
        ]
        return select_action(unique, traces).action, traces

    def run_episode(self, graph: NavGraph, episode: Episode, captions: CaptionProvider) -> EpisodeResult:
        cfg = self.config
        problems = episode.problems(graph)
        if problems:
            raise ValueError(f"episode {episode.id} invalid: {'; '.join(problems)}")
        masks = []
        if cfg.mode is Mode.VERIFY and cfg.mev_enabled and cfg.masked_entities > 0:
            entities: EntityList = self.entity_extractor(episode.instruction)
            masks = prepare_masks(episode.instruction, cfg.masked_entities, entities)

        result = EpisodeResult(episode.id, episode.scan, episode.instruction, episode.gt_path, [episode.start], [], Termination.MAX_STEPS)
        at, heading, elevation = episode.start, episode.start_heading, 0.0
        try:
            for t in range(cfg.max_steps):
                obs = build_observation(graph, at, heading, elevation, captions)
                history = render_history(result.steps)
                prompt = build_nav_prompt(episode.instruction, obs, history, self.example)
                samples, candidates, failures = self._sample(prompt, obs)
                traces: list[VerificationTrace] = []
                consensus = None
                degenerate = not candidates
                if degenerate:
                    chosen = STOP_LETTER
                elif cfg.mode is Mode.GREEDY:
                    chosen = candidates[0].action
                elif cfg.mode is Mode.SAMPLE_VOTE:
                    chosen = majority_action(candidates)
                else:
                    consensus = consensus_check(candidates)
                    if consensus is not None:
                        chosen = consensus
                    else:
                        chosen, traces = self._verify(candidates, VerifyContext(episode.instruction, history, obs), masks)
                option = obs.option(chosen)
                line = "" if option.is_stop else f"Step {len(result.steps) + 1}. {option.text}"
                result.steps.append(
                    StepRecord(t, at, heading, elevation, obs, samples, candidates, failures, traces, chosen, option.edge, line, consensus, degenerate)
                )
                if option.is_stop:
                    result.terminated_by = Termination.STOP
                    break
                heading, elevation = pose_after(option)
                at = option.edge.target
                result.trajectory.append(at)
        except BackendError as exc:
            result.terminated_by = Termination.ERROR
            result.error = f"{type(exc).__name__}: {exc}"
            raise EpisodeAborted(result, exc) from exc
        result.metrics = metrics.evaluate(graph, result.trajectory, episode.gt_path)
        return result


def run_episode(
    graph: NavGraph,
    episode: Episode,
    config: AgentConfig,
    backend: Backend,
    captions: CaptionProvider,
    example: str | None = None,
) -> EpisodeResult:
    return Agent(config, backend, example).run_episode(graph, episode, captions)


def run_split(
    graphs: Mapping[str, NavGraph],
    episodes: Sequence[Episode],
    config: AgentConfig,
    backend: Backend,
    captions: CaptionProvider | Mapping[str, CaptionProvider],
    jobs: int = 1,
    example: str | None = None,
) -> list[EpisodeResult]:
    """Run every episode; failures become results with ``terminated_by=error``.

    Results come back in input order whatever ``jobs`` is.
    """
    agent = Agent(config, backend, example)

    def one(ep: Episode) -> EpisodeResult:
        graph = graphs[ep.scan]
        provider = captions if hasattr(captions, "caption") else captions[ep.scan]
        try:
            return agent.run_episode(graph, ep, provider)
        except EpisodeAborted as exc:
            partial = exc.partial
        except Exception as exc:  # noqa: BLE001 - one bad episode must not sink the split
            logger.exception("episode %s failed", ep.id)
            partial = EpisodeResult(ep.id, ep.scan, ep.instruction, ep.gt_path, [ep.start], [], Termination.ERROR, error=f"{type(exc).__name__}: {exc}")
        try:
            partial.metrics = metrics.evaluate(graph, partial.trajectory, ep.gt_path)
        except Exception:  # noqa: BLE001
            logger.warning("no metrics for failed episode %s", ep.id)
        return partial

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(one, episodes))
    return [one(ep) for ep in episodes]
