"""Trajectory metrics: TL, NE, SR, OSR, SPL, nDTW, sDTW and CLS.

Adopted formulas, with ``d`` the point distance (geodesic by default) and
``th`` the success threshold (3 m):

* nDTW(R, Q) = exp(-DTW(R, Q) / (|R| * th)), DTW summing ``d`` over the
  optimal monotone alignment of reference R and query Q.
* sDTW = success * nDTW.
* CLS(R, Q) = PC * LS where PC = mean over r in R of exp(-min_q d(r, q) / th),
  EPL = PC * len(R), LS = EPL / (EPL + |EPL - len(Q)|) and len() is path length.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Callable, Iterable, Sequence

from verinav.world import NavGraph, shortest_path_length

SUCCESS_THRESHOLD = 3.0

Distance = Callable[[str, str], float]


def geodesic(graph: NavGraph) -> Distance:
    return lambda a, b: shortest_path_length(graph, a, b)


def euclidean(graph: NavGraph) -> Distance:
    return graph.euclidean


def _distance(graph: NavGraph, mode: str) -> Distance:
    if mode == "geodesic":
        return geodesic(graph)
    if mode == "euclidean":
        return euclidean(graph)
    raise ValueError(f"unknown distance mode {mode!r}")


@dataclass(frozen=True)
class MetricRecord:
    tl: float
    ne: float
    success: bool
    oracle_success: bool
    spl: float
    ndtw: float
    sdtw: float
    cls: float

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricRecord":
        return cls(**{f.name: d[f.name] for f in fields(cls)})


def trajectory_length(dist: Distance, trajectory: Sequence[str]) -> float:
    return sum(dist(a, b) for a, b in zip(trajectory, trajectory[1:]))


def navigation_error(graph: NavGraph, trajectory: Sequence[str], goal: str, mode: str = "geodesic") -> float:
    if not trajectory:
        raise ValueError("trajectory is empty")
    return _distance(graph, mode)(trajectory[-1], goal)


def success(ne: float, threshold: float = SUCCESS_THRESHOLD) -> bool:
    return ne <= threshold


def oracle_success(
    graph: NavGraph,
    trajectory: Sequence[str],
    goal: str,
    threshold: float = SUCCESS_THRESHOLD,
    mode: str = "geodesic",
) -> bool:
    dist = _distance(graph, mode)
    return any(dist(v, goal) <= threshold for v in trajectory)


def spl(succeeded: bool, shortest: float, taken: float) -> float:
    if not succeeded:
        return 0.0
    denom = max(shortest, taken)
    return 1.0 if denom == 0 else shortest / denom


def dtw(dist: Distance, reference: Sequence[str], query: Sequence[str]) -> float:
    if not reference or not query:
        raise ValueError("paths must be non-empty")
    n, m = len(reference), len(query)
    inf = math.inf
    prev = [0.0] + [inf] * m
    for i in range(1, n + 1):
        cur = [inf] * (m + 1)
        for j in range(1, m + 1):
            cur[j] = dist(reference[i - 1], query[j - 1]) + min(prev[j], cur[j - 1], prev[j - 1])
        prev = cur
    return prev[m]


def ndtw(reference: Sequence[str], query: Sequence[str], graph: NavGraph, threshold: float = SUCCESS_THRESHOLD, mode: str = "geodesic") -> float:
    return math.exp(-dtw(_distance(graph, mode), reference, query) / (len(reference) * threshold))


def sdtw(
    reference: Sequence[str],
    query: Sequence[str],
    graph: NavGraph,
    threshold: float = SUCCESS_THRESHOLD,
    mode: str = "geodesic",
) -> float:
    ne = _distance(graph, mode)(query[-1], reference[-1])
    return ndtw(reference, query, graph, threshold, mode) if success(ne, threshold) else 0.0


def cls(reference: Sequence[str], query: Sequence[str], graph: NavGraph, threshold: float = SUCCESS_THRESHOLD, mode: str = "geodesic") -> float:
    if not reference or not query:
        raise ValueError("paths must be non-empty")
    dist = _distance(graph, mode)
    coverage = sum(math.exp(-min(dist(r, q) for q in query) / threshold) for r in reference) / len(reference)
    expected = coverage * trajectory_length(dist, reference)
    taken = trajectory_length(dist, query)
    denom = expected + abs(expected - taken)
    length_score = 1.0 if denom == 0 else expected / denom
    return coverage * length_score


def evaluate(
    graph: NavGraph,
    trajectory: Sequence[str],
    reference: Sequence[str],
    threshold: float = SUCCESS_THRESHOLD,
    mode: str = "geodesic",
) -> MetricRecord:
    """All metrics of one executed trajectory against its reference path.

    SPL's shortest length is the graph distance from start to goal.
    """
    dist = _distance(graph, mode)
    goal = reference[-1]
    tl = trajectory_length(dist, trajectory)
    ne = dist(trajectory[-1], goal)
    ok = success(ne, threshold)
    shortest = dist(reference[0], goal)
    n = ndtw(reference, trajectory, graph, threshold, mode)
    return MetricRecord(
        tl=tl,
        ne=ne,
        success=ok,
        oracle_success=any(dist(v, goal) <= threshold for v in trajectory),
        spl=spl(ok, shortest, tl),
        ndtw=n,
        sdtw=n if ok else 0.0,
        cls=cls(reference, trajectory, graph, threshold, mode),
    )


SUMMARY_COLUMNS = ("episodes", "tl", "ne", "sr", "osr", "spl", "ndtw", "sdtw", "cls")


def aggregate(records: Iterable[MetricRecord]) -> dict[str, float]:
    """Split means; SR and OSR are percentages, the rest plain means."""
    records = list(records)
    n = len(records)
    if n == 0:
        return {"episodes": 0, **{k: 0.0 for k in SUMMARY_COLUMNS[1:]}}

    def mean(values):
        return sum(values) / n

    return {
        "episodes": n,
        "tl": mean(r.tl for r in records),
        "ne": mean(r.ne for r in records),
        "sr": 100.0 * mean(float(r.success) for r in records),
        "osr": 100.0 * mean(float(r.oracle_success) for r in records),
        "spl": mean(r.spl for r in records),
        "ndtw": mean(r.ndtw for r in records),
        "sdtw": mean(r.sdtw for r in records),
        "cls": mean(r.cls for r in records),
    }


def format_table(rows: Sequence[dict], columns: Sequence[str] = SUMMARY_COLUMNS, label: str | None = None) -> str:
    """Plain-text aligned table; ``label`` names an extra leading column."""
    cols = ([label] if label else []) + list(columns)

    def cell(v):
        if isinstance(v, float):
            return f"{v:.2f}"
        return str(v)

    body = [[cell(row.get(c, "")) for c in cols] for row in rows]
    widths = [max(len(c), *(len(r[i]) for r in body)) if body else len(c) for i, c in enumerate(cols)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in body]
    return "\n".join(lines)
