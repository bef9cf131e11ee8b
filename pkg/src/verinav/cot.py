"""Navigational chain-of-thought: prompts, output parsing, ground-truth labels."""

from __future__ import annotations

import enum
import functools
import json
import logging
import re
from dataclasses import dataclass
from importlib import resources
from string import Template
from typing import IO, TYPE_CHECKING, Callable, Iterable, Sequence

from verinav.textualizer import (
    STOP_LETTER,
    CaptionProvider,
    DirectionRules,
    DEFAULT_RULES,
    ObservationDescription,
    build_observation,
    pose_after,
)
from verinav.world import Episode, NavGraph, WorldError

if TYPE_CHECKING:
    from verinav.backend import Backend, SamplingParams

logger = logging.getLogger(__name__)


@functools.lru_cache(maxsize=None)
def load_template(name: str) -> Template:
    text = resources.files("verinav").joinpath("prompts", name).read_text(encoding="utf-8")
    return Template(text.rstrip("\n"))


@functools.lru_cache(maxsize=None)
def default_example() -> str:
    return load_template("example_v1.txt").template


# --- prompt ------------------------------------------------------------------


def format_history(option_texts: Sequence[str]) -> str:
    if not option_texts:
        return "none"
    return "\n".join(f"Step {i}. {text}" for i, text in enumerate(option_texts, 1))


def _obs_text(observation: ObservationDescription | str) -> str:
    return observation if isinstance(observation, str) else observation.rendered


def input_block(instruction: str, observation: ObservationDescription | str, history: str) -> str:
    return f"Input: Instruction: {instruction} Observation: {_obs_text(observation)}. History: {history}."


def build_nav_prompt(
    instruction: str,
    observation: ObservationDescription | str,
    history: str,
    example: str | None = None,
) -> str:
    return load_template("nav_v1.txt").substitute(
        example=default_example() if example is None else example.strip(),
        instruction=instruction,
        observation=_obs_text(observation),
        history=history or "none",
    )


# --- parsing -----------------------------------------------------------------


@dataclass(frozen=True)
class CotTriple:
    prediction: str
    view_match: str
    action: str
    raw: str

    def render(self) -> str:
        return f"Prediction: {self.prediction}. View match: {self.view_match} supports the prediction. Action: {self.action}."


class CotParseError(ValueError):
    """Structured failure to read a chain-of-thought output."""

    def __init__(self, message: str, raw: str):
        self.raw = raw
        super().__init__(message)


class MissingField(CotParseError):
    def __init__(self, name: str, raw: str):
        self.name = name
        super().__init__(f"missing field {name!r}", raw)


class InvalidLetter(CotParseError):
    def __init__(self, letter: str, raw: str, field: str = "action"):
        self.letter = letter
        self.field = field
        super().__init__(f"{field} letter {letter!r} is not an available option", raw)


_FIELDS = ("prediction", "view_match", "action")

_STRICT_LABELS = {
    "prediction": re.compile(r"Prediction:"),
    "view_match": re.compile(r"View match:"),
    "action": re.compile(r"Action:"),
}
_LENIENT_LABELS = {
    "prediction": re.compile(r"\**\bprediction\b\**\s*:\**", re.I),
    "view_match": re.compile(r"\**\bview[\s_-]?match\b\**\s*:\**", re.I),
    "action": re.compile(r"\**\baction\b\**\s*:\**", re.I),
}
_STRICT_LETTER = re.compile(r"\s*([A-Z])(?![A-Za-z])")
_LENIENT_LETTER = re.compile(r"(?<![A-Za-z])(?:option\s+)?([A-Za-z])(?![A-Za-z])", re.I)
_TRAILING = " \t\r\n.,;:!?\"'`*<>"


def _split_fields(raw: str, labels: dict[str, re.Pattern[str]]) -> dict[str, str]:
    found = []
    for name, pattern in labels.items():
        m = pattern.search(raw)
        if m is not None:
            found.append((m.start(), m.end(), name))
    found.sort()
    values = {}
    for i, (_, end, name) in enumerate(found):
        stop = found[i + 1][0] if i + 1 < len(found) else len(raw)
        values[name] = raw[end:stop] if stop >= end else ""
    return values


def _letter(value: str, strict: bool) -> str | None:
    if strict:
        m = _STRICT_LETTER.match(value)
        return m.group(1) if m else None
    m = re.search(r"(?<![A-Za-z])([A-Z])(?![A-Za-z])", value)
    if m is None:
        m = _LENIENT_LETTER.search(value)
    return m.group(1).upper() if m else None


def _parse(raw: str, valid: set[str], strict: bool) -> CotTriple:
    fields = _split_fields(raw, _STRICT_LABELS if strict else _LENIENT_LABELS)
    if "prediction" not in fields:
        raise MissingField("prediction", raw)
    prediction = " ".join(fields["prediction"].split()).strip(_TRAILING if not strict else " .")
    if not prediction:
        raise MissingField("prediction", raw)
    letters = {}
    for name in ("view_match", "action"):
        if name not in fields:
            raise MissingField(name, raw)
        letter = _letter(fields[name], strict)
        if letter is None:
            raise MissingField(name, raw)
        if letter not in valid:
            raise InvalidLetter(letter, raw, name)
        letters[name] = letter
    return CotTriple(prediction, letters["view_match"], letters["action"], raw)


def parse_cot(raw: str, observation: ObservationDescription | Iterable[str], strict_only: bool = False) -> CotTriple:
    """Read Prediction / View match / Action from a model output.

    A strict pass wants the exact labels and a bare option letter; if it
    fails, a lenient pass accepts case and punctuation drift. Letters are
    checked against the options of ``observation``.
    """
    if not isinstance(raw, str):
        raw = raw.decode("utf-8", errors="replace") if isinstance(raw, (bytes, bytearray)) else str(raw)
    valid = set(observation.letters if isinstance(observation, ObservationDescription) else observation)
    try:
        return _parse(raw, valid, strict=True)
    except CotParseError:
        if strict_only:
            raise
    return _parse(raw, valid, strict=False)


# --- entities ----------------------------------------------------------------


@dataclass(frozen=True)
class EntityList:
    entities: tuple[str, ...]
    source_instruction: str

    def __len__(self) -> int:
        return len(self.entities)

    def __iter__(self):
        return iter(self.entities)


@functools.lru_cache(maxsize=None)
def default_lexicon() -> frozenset[str]:
    text = resources.files("verinav").joinpath("data", "landmarks.txt").read_text(encoding="utf-8")
    return frozenset(_norm(line) for line in text.splitlines() if line.strip() and not line.startswith("#"))


def load_lexicon(path) -> frozenset[str]:
    with open(path, encoding="utf-8") as fh:
        return frozenset(_norm(line) for line in fh if line.strip() and not line.startswith("#"))


def _norm(text: str) -> str:
    return " ".join(text.lower().split())


_WORD = re.compile(r"[A-Za-z0-9']+")
_BRACKETED = re.compile(r"<([^<>]+)>")


def _dedupe(spans: Iterable[tuple[int, str]], instruction: str) -> EntityList:
    seen, out = set(), []
    for _, text in sorted(spans, key=lambda s: s[0]):
        key = _norm(text)
        if key and key not in seen:
            seen.add(key)
            out.append(text.strip())
    return EntityList(tuple(out), instruction)


def extract_entities_rule_based(instruction: str, lexicon: frozenset[str] | None = None) -> EntityList:
    lexicon = default_lexicon() if lexicon is None else lexicon
    longest = max((len(p.split()) for p in lexicon), default=1)
    words = list(_WORD.finditer(instruction))
    bracketed = list(_BRACKETED.finditer(instruction))
    spans = [(m.start(1), m.group(1)) for m in bracketed]
    i = 0
    while i < len(words):
        if any(m.start() <= words[i].start() < m.end() for m in bracketed):
            i += 1
            continue
        for n in range(min(longest, len(words) - i), 0, -1):
            phrase = " ".join(w.group().lower() for w in words[i : i + n])
            if phrase in lexicon:
                start, end = words[i].start(), words[i + n - 1].end()
                spans.append((start, instruction[start:end]))
                i += n
                break
        else:
            i += 1
    return _dedupe(spans, instruction)


_BULLET = re.compile(r"^\s*(?:[-*•]|\d+[.)])\s*")


def parse_entity_lines(text: str, instruction: str) -> EntityList:
    """Keep listed phrases that occur in the instruction, in instruction order."""
    lowered = instruction.lower()
    spans = []
    for line in text.splitlines():
        phrase = _BULLET.sub("", line).strip().strip("\"'").rstrip(".,;")
        if not phrase:
            continue
        pos = lowered.find(phrase.lower())
        if pos < 0:
            logger.debug("dropping extracted entity %r not found in instruction", phrase)
            continue
        spans.append((pos, instruction[pos : pos + len(phrase)]))
    return _dedupe(spans, instruction)


def extract_entities(
    instruction: str,
    backend: "Backend | None" = None,
    params: "SamplingParams | None" = None,
    lexicon: frozenset[str] | None = None,
) -> EntityList:
    """Entities of an instruction; rule-based unless a backend is given."""
    if not instruction.strip():
        raise ValueError("instruction is empty")
    if backend is None:
        return extract_entities_rule_based(instruction, lexicon)
    from verinav.backend import SamplingParams

    prompt = load_template("entities_v1.txt").substitute(instruction=instruction)
    response = backend.generate(prompt, params or SamplingParams(temperature=0.0))
    return parse_entity_lines(response.text, instruction)


# --- ground-truth labels -----------------------------------------------------

Scorer = Callable[[str, str], float]

_ARTICLES = frozenset({"a", "an", "the"})


def _tokens(text: str) -> set[str]:
    return {t for t in (w.lower() for w in _WORD.findall(text)) if t not in _ARTICLES}


def token_overlap(entity: str, caption: str) -> float:
    """Number of distinct entity tokens that also occur in the caption."""
    return float(len(_tokens(entity) & _tokens(caption)))


def gt_prediction_label(entities: EntityList | Sequence[str], next_view_caption: str, scorer: Scorer = token_overlap) -> str:
    items = tuple(entities)
    if not items:
        raise ValueError("entity list is empty")
    best, best_score = items[0], scorer(items[0], next_view_caption)
    for entity in items[1:]:
        score = scorer(entity, next_view_caption)
        if score > best_score:
            best, best_score = entity, score
    return best


@dataclass(frozen=True)
class CotLabel:
    prediction_label: str
    action_label: str

    @property
    def rendered(self) -> str:
        return (
            f"Prediction: {self.prediction_label}. View match: {self.action_label} matches the imagination. "
            f"Action: {self.action_label}."
        )


class Task(str, enum.Enum):
    PRED = "pred"
    VM = "vm"
    ACT = "act"
    FULL_COT = "full_cot"


_TASK_LINES = {
    Task.PRED: "Task: predict the next landmark.",
    Task.VM: "Task: select the option that matches the predicted landmark.",
    Task.ACT: "Task: select the action option.",
    Task.FULL_COT: "Task: give the prediction, view match and action.",
}


@dataclass(frozen=True)
class TrainingRecord:
    task: Task
    input: str
    target: str

    def to_dict(self) -> dict[str, str]:
        return {"task": self.task.value, "input": self.input, "target": self.target}


def _task_target(task: Task, label: CotLabel) -> str:
    if task is Task.PRED:
        return f"Prediction: {label.prediction_label}."
    if task is Task.VM:
        return f"View match: {label.action_label} matches the imagination."
    if task is Task.ACT:
        return f"Action: {label.action_label}."
    return label.rendered


class LabelError(WorldError):
    pass


@dataclass(frozen=True)
class ExpertStep:
    t: int
    viewpoint: str
    observation: ObservationDescription
    history: str
    gt_letter: str
    next_caption: str


def expert_steps(
    episode: Episode,
    graph: NavGraph,
    captions: CaptionProvider,
    rules: DirectionRules = DEFAULT_RULES,
) -> list[ExpertStep]:
    """Replay the ground-truth path; the last step is the stop at the goal.

    At the stop step the caption of the arrival view stands in for the next
    view (empty when the path has a single viewpoint).
    """
    heading, elevation = episode.start_heading, 0.0
    taken: list[str] = []
    last_caption = ""
    steps = []
    for t, at in enumerate(episode.gt_path):
        obs = build_observation(graph, at, heading, elevation, captions, rules)
        if t + 1 < len(episode.gt_path):
            nxt = episode.gt_path[t + 1]
            letter = obs.letter_for(nxt)
            if letter is None:
                raise LabelError(f"episode {episode.id}: no edge {at}->{nxt}")
            option = obs.option(letter)
            caption = captions.caption(option.edge.caption_key)
        else:
            letter, option, caption = STOP_LETTER, None, last_caption
        steps.append(ExpertStep(t, at, obs, format_history(taken), letter, caption))
        if option is not None:
            heading, elevation = pose_after(option)
            taken.append(option.text)
            last_caption = caption
    return steps


def emit_training_examples(
    episode: Episode,
    graph: NavGraph,
    captions: CaptionProvider,
    scorer: Scorer = token_overlap,
    entities: EntityList | None = None,
    rules: DirectionRules = DEFAULT_RULES,
) -> list[TrainingRecord]:
    entities = extract_entities_rule_based(episode.instruction) if entities is None else entities
    records = []
    for step in expert_steps(episode, graph, captions, rules):
        prediction = gt_prediction_label(entities, step.next_caption, scorer) if len(entities) else step.next_caption
        label = CotLabel(prediction, step.gt_letter)
        block = input_block(episode.instruction, step.observation, step.history)
        for task in Task:
            records.append(TrainingRecord(task, f"{block}\n{_TASK_LINES[task]}\nOutput:", _task_target(task, label)))
    return records


def write_training_records(records: Iterable[TrainingRecord], stream: IO[str]) -> int:
    """Write a header line then one JSON record per line; returns the record count."""
    stream.write(json.dumps({"format": "verinav-training-records", "version": 1}) + "\n")
    n = 0
    for rec in records:
        stream.write(json.dumps(rec.to_dict(), ensure_ascii=False) + "\n")
        n += 1
    return n
