"""Per-episode trace files: an episode header line followed by one line per step."""

from __future__ import annotations

import json
import os
import re
import tempfile
from pathlib import Path
from typing import Any, Iterable

from verinav.agent import EpisodeResult


def dumps(record: Any) -> str:
    return json.dumps(record, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def atomic_write(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def serialize(result: EpisodeResult) -> str:
    lines = [dumps(result.header())] + [dumps(step.to_dict()) for step in result.steps]
    return "\n".join(lines) + "\n"


def parse(text: str) -> EpisodeResult:
    records = [json.loads(line) for line in text.splitlines() if line.strip()]
    if not records or records[0].get("kind") != "episode":
        raise ValueError("trace must start with an episode header")
    steps = records[1:]
    if any(r.get("kind") != "step" for r in steps):
        raise ValueError("trace body must hold step records only")
    return EpisodeResult.from_records(records[0], steps)


_UNSAFE = re.compile(r"[^A-Za-z0-9._-]+")


def trace_name(episode_id: str) -> str:
    return _UNSAFE.sub("_", episode_id) + ".jsonl"


def write_trace(directory: str | Path, result: EpisodeResult) -> Path:
    path = Path(directory) / trace_name(result.episode_id)
    atomic_write(path, serialize(result))
    return path


def read_trace(path: str | Path) -> EpisodeResult:
    return parse(Path(path).read_text(encoding="utf-8"))


def read_traces(directory: str | Path) -> list[EpisodeResult]:
    return [read_trace(p) for p in sorted(Path(directory).glob("*.jsonl"))]


def write_traces(directory: str | Path, results: Iterable[EpisodeResult]) -> list[Path]:
    return [write_trace(directory, r) for r in results]
