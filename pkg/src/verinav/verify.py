"""Dual verification of sampled candidates: true/false judgement and masked-entity recovery."""

from __future__ import annotations

import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, NamedTuple, Sequence

from verinav.backend import Backend, BackendError, SamplingParams
from verinav.cot import CotTriple, EntityList, load_template
from verinav.textualizer import ObservationDescription

MASK_TOKEN = "[MASK]"

TFV = "tfv"
MEV = "mev"


@dataclass(frozen=True)
class Candidate:
    index: int
    cot: CotTriple

    @property
    def action(self) -> str:
        return self.cot.action

    def dedup_key(self) -> tuple[str, str, str]:
        return (" ".join(self.cot.prediction.lower().split()), self.cot.view_match, self.cot.action)


@dataclass(frozen=True)
class MaskedInstruction:
    text: str
    masked_entity: str
    entity_index: int
    span: tuple[int, int]
    mask_token: str = MASK_TOKEN


class VerifyContext(NamedTuple):
    instruction: str
    history: str
    observation: ObservationDescription


def _candidate_block(candidate: Candidate, observation: ObservationDescription, full_cot: bool) -> str:
    cot = candidate.cot
    try:
        option = observation.option(cot.action).text
    except KeyError:
        raise ValueError(f"candidate action {cot.action!r} is not an option") from None
    if not full_cot:
        return f"Action: {cot.action} ({option})."
    return (
        f"Prediction: {cot.prediction}. View match: {cot.view_match} supports the prediction. "
        f"Action: {cot.action} ({option})."
    )


def build_tfv_prompt(
    instruction: str,
    history: str,
    observation: ObservationDescription,
    candidate: Candidate,
    full_cot: bool = True,
) -> str:
    return load_template("tfv_v1.txt").substitute(
        instruction=instruction,
        history=history,
        observation=observation.rendered,
        candidate=_candidate_block(candidate, observation, full_cot),
    )


def build_mev_prompt(
    masked: MaskedInstruction,
    history: str,
    observation: ObservationDescription,
    candidate: Candidate,
    full_cot: bool = True,
) -> str:
    return load_template("mev_v1.txt").substitute(
        instruction=masked.text,
        history=history,
        observation=observation.rendered,
        candidate=_candidate_block(candidate, observation, full_cot),
    )


_TRUE = frozenset({"true", "yes"})
_FALSE = frozenset({"false", "no"})
_LEADING = re.compile(r"[\W_]*([A-Za-z]+)")


def parse_tfv_detail(response: str) -> tuple[bool, bool]:
    """``(verdict, unparsed)``; anything but a leading true/false/yes/no is False."""
    m = _LEADING.match(response or "")
    word = m.group(1).lower() if m else ""
    if word in _TRUE:
        return True, False
    if word in _FALSE:
        return False, False
    return False, True


def parse_tfv(response: str) -> bool:
    return parse_tfv_detail(response)[0]


_LEADING_ARTICLE = re.compile(r"^(?:a|an|the)\s+")


def normalize_entity(text: str) -> str:
    text = " ".join(text.lower().split())
    text = text.rstrip(".,;:!?\"'` ").lstrip("\"'` ")
    return _LEADING_ARTICLE.sub("", text)


def entity_match(predicted: str, gold: str) -> bool:
    return normalize_entity(predicted) == normalize_entity(gold)


def prepare_masks(instruction: str, R: int, entities: EntityList | Sequence[str], mask_token: str = MASK_TOKEN) -> list[MaskedInstruction]:
    """Mask the first ``min(R, M)`` entities, one at a time, at their first occurrence."""
    out = []
    lowered = instruction.lower()
    for r, entity in enumerate(tuple(entities)[: max(R, 0)]):
        pos = lowered.find(entity.lower())
        if pos < 0:
            raise ValueError(f"entity {entity!r} does not occur in the instruction")
        end = pos + len(entity)
        text = instruction[:pos] + mask_token + instruction[end:]
        out.append(MaskedInstruction(text, instruction[pos:end], r, (pos, end), mask_token))
    return out


@dataclass
class VerificationTrace:
    candidate_index: int
    tfv_outcomes: list[bool]
    mev_outcomes: list[list[bool]]
    tfv_unparsed: list[bool] = field(default_factory=list)
    mev_predictions: list[list[str]] = field(default_factory=list)
    transcripts: list[dict[str, Any]] = field(default_factory=list)

    @property
    def tfv_score(self) -> int:
        return sum(self.tfv_outcomes)

    @property
    def mev_score(self) -> int:
        return sum(sum(row) for row in self.mev_outcomes)

    @property
    def total(self) -> int:
        return self.tfv_score + self.mev_score

    def to_dict(self) -> dict[str, Any]:
        return {
            "candidate_index": self.candidate_index,
            "tfv_outcomes": self.tfv_outcomes,
            "tfv_unparsed": self.tfv_unparsed,
            "mev_outcomes": self.mev_outcomes,
            "mev_predictions": self.mev_predictions,
            "tfv_score": self.tfv_score,
            "mev_score": self.mev_score,
            "total": self.total,
            "transcripts": self.transcripts,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "VerificationTrace":
        trace = cls(
            d["candidate_index"],
            list(d["tfv_outcomes"]),
            [list(row) for row in d["mev_outcomes"]],
            list(d.get("tfv_unparsed", [])),
            [list(row) for row in d.get("mev_predictions", [])],
            list(d.get("transcripts", [])),
        )
        for name in ("tfv_score", "mev_score", "total"):
            if name in d and d[name] != getattr(trace, name):
                raise ValueError(f"stored {name} {d[name]} disagrees with outcomes ({getattr(trace, name)})")
        return trace


class VerificationError(BackendError):
    def __init__(self, candidate_index: int, channel: str, r: int | None, p: int, cause: BaseException):
        self.candidate_index = candidate_index
        self.channel, self.r, self.p = channel, r, p
        self.cause = cause
        super().__init__(f"candidate {candidate_index} {channel} query (r={r}, p={p}) failed: {cause}")


def score_candidate(
    candidate: Candidate,
    context: VerifyContext,
    masks: Sequence[MaskedInstruction],
    P: int,
    backend: Backend,
    params: SamplingParams,
    tfv: bool = True,
    mev: bool = True,
    full_cot: bool = True,
    max_workers: int = 1,
) -> VerificationTrace:
    """Issue ``P`` true/false queries and ``len(masks) * P`` recovery queries.

    Results are stored by (channel, r, p), so a concurrent dispatch yields the
    same trace as a sequential one for a backend whose answers do not depend
    on call order.
    """
    if P < 1:
        raise ValueError("P must be >= 1")
    instruction, history, observation = context
    jobs: list[tuple[str, int | None, int, str]] = []
    if tfv:
        prompt = build_tfv_prompt(instruction, history, observation, candidate, full_cot)
        jobs += [(TFV, None, p, prompt) for p in range(P)]
    if mev:
        for mask in masks:
            prompt = build_mev_prompt(mask, history, observation, candidate, full_cot)
            jobs += [(MEV, mask.entity_index, p, prompt) for p in range(P)]

    def run(job):
        channel, r, p, prompt = job
        try:
            return backend.generate(prompt, params).text
        except BackendError as exc:
            raise VerificationError(candidate.index, channel, r, p, exc) from exc

    if max_workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            texts = list(pool.map(run, jobs))
    else:
        texts = [run(job) for job in jobs]

    R = len(masks) if mev else 0
    tfv_out, tfv_unparsed = [], []
    mev_out = [[False] * P for _ in range(R)]
    mev_pred = [[""] * P for _ in range(R)]
    row_of = {m.entity_index: i for i, m in enumerate(masks)}
    transcripts = []
    for (channel, r, p, prompt), text in zip(jobs, texts):
        transcripts.append({"channel": channel, "r": r, "p": p, "prompt": prompt, "response": text})
        if channel == TFV:
            verdict, unparsed = parse_tfv_detail(text)
            tfv_out.append(verdict)
            tfv_unparsed.append(unparsed)
        else:
            row = row_of[r]
            mev_out[row][p] = entity_match(text, masks[row].masked_entity)
            mev_pred[row][p] = text
    return VerificationTrace(candidate.index, tfv_out, mev_out, tfv_unparsed, mev_pred, transcripts)


def selection_key(trace: VerificationTrace) -> tuple[int, int, int]:
    """Sort key, smallest first: higher total, then higher TFV, then earlier index."""
    return (-trace.total, -trace.tfv_score, trace.candidate_index)


def select_action(candidates: Sequence[Candidate], traces: Sequence[VerificationTrace]) -> Candidate:
    if not candidates:
        raise ValueError("no candidates to select from")
    if len(candidates) != len(traces):
        raise ValueError("candidates and traces must align")
    by_index = {}
    for cand, trace in zip(candidates, traces):
        if cand.index != trace.candidate_index:
            raise ValueError(f"trace for candidate {trace.candidate_index} paired with candidate {cand.index}")
        by_index[cand.index] = cand
    best = min(traces, key=selection_key)
    return by_index[best.candidate_index]


def consensus_check(candidates: Sequence[Candidate]) -> str | None:
    if not candidates:
        raise ValueError("consensus over an empty candidate set")
    actions = {c.action for c in candidates}
    return candidates[0].action if len(actions) == 1 else None


def dedupe_candidates(candidates: Sequence[Candidate]) -> list[Candidate]:
    """Drop candidates whose full chain of thought repeats an earlier one."""
    seen, out = set(), []
    for c in sorted(candidates, key=lambda c: c.index):
        key = c.dedup_key()
        if key not in seen:
            seen.add(key)
            out.append(c)
    return out
