"""Render a viewpoint's navigable options as a lettered textual observation."""

from __future__ import annotations

import enum
import json
import logging
import re
import string
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Protocol

from verinav.world import NavEdge, NavGraph, navigable_from

logger = logging.getLogger(__name__)

STOP_LETTER = "A"


class Direction(enum.Enum):
    TURN_LEFT = "turn left"
    TURN_RIGHT = "turn right"
    GO_FORWARD = "go forward"
    GO_BACK = "go back"
    GO_UP = "go up"
    GO_DOWN = "go down"

    @property
    def rendered(self) -> str:
        return self.value

    @property
    def vertical(self) -> bool:
        return self in (Direction.GO_UP, Direction.GO_DOWN)


@dataclass(frozen=True)
class DirectionRules:
    """Thresholds (degrees) of the direction decision table."""

    elevation: float = 15.0
    forward: float = 45.0
    back: float = 135.0


DEFAULT_RULES = DirectionRules()


def wrap_angle(deg: float) -> float:
    """Wrap an angle into (-180, 180]."""
    w = deg % 360.0
    return w - 360.0 if w > 180.0 else w


def map_direction(
    agent_heading: float,
    agent_elevation: float,
    edge_heading: float,
    edge_elevation: float,
    rules: DirectionRules = DEFAULT_RULES,
) -> Direction:
    d_heading = wrap_angle(edge_heading - agent_heading)
    d_elev = edge_elevation - agent_elevation
    if abs(d_elev) > rules.elevation:
        return Direction.GO_UP if d_elev > 0 else Direction.GO_DOWN
    if abs(d_heading) <= rules.forward:
        return Direction.GO_FORWARD
    if abs(d_heading) >= rules.back:
        return Direction.GO_BACK
    return Direction.TURN_RIGHT if d_heading > 0 else Direction.TURN_LEFT


class CaptionError(ValueError):
    pass


def render_option(phrase: Direction | None, caption: str = "") -> str:
    """``None`` stands for the stop option."""
    if phrase is None:
        return "stop"
    caption = caption.strip()
    if not caption:
        raise CaptionError("caption is empty")
    return f"{phrase.rendered} to <{caption}>"


class CaptionProvider(Protocol):
    def caption(self, key: str) -> str: ...


_SENTENCE_END = re.compile(r"(?<=[.!?])\s+")


class StaticCaptions:
    """Captions read from a ``caption_key -> caption`` mapping.

    Multi-sentence captions keep only their first sentence.
    """

    def __init__(self, mapping: Mapping[str, str]):
        self._captions: dict[str, str] = {}
        for key, text in mapping.items():
            parts = _SENTENCE_END.split(text.strip(), maxsplit=1)
            if len(parts) > 1:
                logger.warning("caption %r has several sentences; keeping the first", key)
            self._captions[key] = parts[0].rstrip(".!? ")

    @classmethod
    def from_file(cls, path: str | Path) -> "StaticCaptions":
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        if not isinstance(doc, dict):
            raise CaptionError(f"{path}: caption file must be a JSON object")
        return cls(doc)

    def caption(self, key: str) -> str:
        try:
            return self._captions[key]
        except KeyError:
            raise CaptionError(f"no caption for key {key!r}") from None

    def as_dict(self) -> dict[str, str]:
        return dict(self._captions)


@dataclass(frozen=True)
class ObservationOption:
    letter: str
    text: str
    edge: NavEdge | None = None
    direction: Direction | None = None

    @property
    def is_stop(self) -> bool:
        return self.edge is None


@dataclass(frozen=True)
class ObservationDescription:
    options: tuple[ObservationOption, ...]

    @property
    def letters(self) -> tuple[str, ...]:
        return tuple(o.letter for o in self.options)

    @property
    def rendered(self) -> str:
        return "[" + ", ".join(f"{o.letter}. {o.text}" for o in self.options) + "]"

    def option(self, letter: str) -> ObservationOption:
        for o in self.options:
            if o.letter == letter:
                return o
        raise KeyError(letter)

    def letter_for(self, target: str) -> str | None:
        for o in self.options:
            if o.edge is not None and o.edge.target == target:
                return o.letter
        return None

    def __str__(self) -> str:
        return self.rendered


def letters(n: int) -> str:
    if n > len(string.ascii_uppercase):
        raise ValueError(f"{n} options exceed the letter range A-Z")
    return string.ascii_uppercase[:n]


def build_observation(
    graph: NavGraph,
    at: str,
    agent_heading: float,
    agent_elevation: float,
    captions: CaptionProvider,
    rules: DirectionRules = DEFAULT_RULES,
) -> ObservationDescription:
    edges = navigable_from(graph, at)
    labels = letters(len(edges) + 1)
    options = [ObservationOption(STOP_LETTER, render_option(None))]
    for letter, edge in zip(labels[1:], edges):
        phrase = map_direction(agent_heading, agent_elevation, edge.heading, edge.elevation, rules)
        options.append(ObservationOption(letter, render_option(phrase, captions.caption(edge.caption_key)), edge, phrase))
    return ObservationDescription(tuple(options))


_OPTION_RE = re.compile(r"([A-Z])\. (stop|[a-z]+ [a-z]+ to <[^<>]*>)(?:, |\]$)")


def parse_observation(rendered: str) -> list[tuple[str, str]]:
    """Recover ``(letter, text)`` pairs from a rendered observation."""
    if not (rendered.startswith("[") and rendered.endswith("]")):
        raise ValueError("observation must be bracketed")
    pairs = []
    pos = 1
    while pos < len(rendered):
        m = _OPTION_RE.match(rendered, pos)
        if m is None:
            raise ValueError(f"unparseable option at offset {pos}")
        pairs.append((m.group(1), m.group(2)))
        pos = m.end()
    return pairs


def pose_after(option: ObservationOption) -> tuple[float, float]:
    """Agent heading and elevation after executing a move option.

    Elevation resets to level unless the move itself was vertical.
    """
    if option.edge is None:
        raise ValueError("stop has no resulting pose")
    elevation = option.edge.elevation if option.direction is not None and option.direction.vertical else 0.0
    return option.edge.heading, elevation
