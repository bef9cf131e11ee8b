"""Navigable graph world, episodes and geometry queries."""

from __future__ import annotations

import heapq
import json
import logging
import math
import random
import threading
from dataclasses import dataclass
from typing import IO, Any, Iterable, Mapping, NamedTuple, Sequence

logger = logging.getLogger(__name__)

NATIVE = "native"
MATTERPORT = "matterport_connectivity"


class WorldError(Exception):
    """Base class for graph and episode errors."""


class MalformedRecord(WorldError):
    def __init__(self, message: str, index: int | None = None):
        self.index = index
        where = f"record {index}: " if index is not None else ""
        super().__init__(where + message)


class DanglingEdge(WorldError):
    def __init__(self, source: str, target: str, missing: str, index: int | None = None):
        self.source, self.target, self.missing, self.index = source, target, missing, index
        super().__init__(f"edge {source}->{target} (record {index}) references unknown viewpoint {missing!r}")


class UnknownViewpoint(WorldError, KeyError):
    def __init__(self, viewpoint: str):
        self.viewpoint = viewpoint
        super().__init__(viewpoint)

    def __str__(self) -> str:
        return f"unknown viewpoint {self.viewpoint!r}"


class Unreachable(WorldError):
    def __init__(self, a: str, b: str):
        self.a, self.b = a, b
        super().__init__(f"no path from {a!r} to {b!r}")


@dataclass(frozen=True)
class Viewpoint:
    id: str
    position: tuple[float, float, float]

    def __post_init__(self):
        if len(self.position) != 3 or not all(math.isfinite(c) for c in self.position):
            raise ValueError(f"viewpoint {self.id!r} has a non-finite or malformed position")


@dataclass(frozen=True)
class NavEdge:
    source: str
    target: str
    heading: float
    elevation: float
    caption_key: str

    def __post_init__(self):
        if self.source == self.target:
            raise ValueError(f"self-loop edge at {self.source!r}")
        if not (0.0 <= self.heading < 360.0):
            raise ValueError(f"heading {self.heading} outside [0, 360)")
        if not (-90.0 <= self.elevation <= 90.0):
            raise ValueError(f"elevation {self.elevation} outside [-90, 90]")

    def to_dict(self) -> dict[str, Any]:
        return {
            "from": self.source,
            "to": self.target,
            "heading_deg": self.heading,
            "elevation_deg": self.elevation,
            "caption_key": self.caption_key,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "NavEdge":
        return cls(d["from"], d["to"], float(d["heading_deg"]), float(d["elevation_deg"]), d["caption_key"])


def _option_key(edge: NavEdge) -> tuple[float, float, str]:
    return (edge.heading, edge.elevation, edge.target)


class NavGraph:
    """Immutable viewpoint graph with directed navigable edges.

    Outgoing edges are kept in option order (heading, elevation, target id),
    which fixes the lettering of observation options downstream.
    """

    def __init__(self, viewpoints: Iterable[Viewpoint], edges: Iterable[NavEdge], scan: str | None = None):
        self.scan = scan
        vps: dict[str, Viewpoint] = {}
        for vp in viewpoints:
            if vp.id in vps:
                raise ValueError(f"duplicate viewpoint id {vp.id!r}")
            vps[vp.id] = vp
        self._viewpoints = vps
        out: dict[str, list[NavEdge]] = {v: [] for v in vps}
        seen: set[tuple[str, str]] = set()
        kept = []
        for i, e in enumerate(edges):
            for end in (e.source, e.target):
                if end not in vps:
                    raise DanglingEdge(e.source, e.target, end, i)
            if (e.source, e.target) in seen:
                logger.warning("duplicate edge %s->%s dropped", e.source, e.target)
                continue
            seen.add((e.source, e.target))
            kept.append(e)
            out[e.source].append(e)
        for lst in out.values():
            lst.sort(key=_option_key)
        self._edges = tuple(sorted(kept, key=lambda e: (e.source, e.target)))
        self._out = {k: tuple(v) for k, v in out.items()}
        self._dist_cache: dict[str, dict[str, float]] = {}
        self._lock = threading.Lock()

    @property
    def viewpoints(self) -> Mapping[str, Viewpoint]:
        return self._viewpoints

    @property
    def edges(self) -> tuple[NavEdge, ...]:
        return self._edges

    def __contains__(self, viewpoint_id: str) -> bool:
        return viewpoint_id in self._viewpoints

    def __len__(self) -> int:
        return len(self._viewpoints)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, NavGraph):
            return NotImplemented
        return self._viewpoints == other._viewpoints and self._edges == other._edges

    def __hash__(self) -> int:
        return hash((tuple(sorted(self._viewpoints)), self._edges))

    def __repr__(self) -> str:
        return f"NavGraph(scan={self.scan!r}, viewpoints={len(self._viewpoints)}, edges={len(self._edges)})"

    def position(self, viewpoint_id: str) -> tuple[float, float, float]:
        try:
            return self._viewpoints[viewpoint_id].position
        except KeyError:
            raise UnknownViewpoint(viewpoint_id) from None

    def edge(self, source: str, target: str) -> NavEdge | None:
        for e in navigable_from(self, source):
            if e.target == target:
                return e
        return None

    def euclidean(self, a: str, b: str) -> float:
        return math.dist(self.position(a), self.position(b))

    def distances_from(self, source: str) -> Mapping[str, float]:
        """Single-source shortest path lengths (Dijkstra, Euclidean edge weights)."""
        if source not in self._viewpoints:
            raise UnknownViewpoint(source)
        cached = self._dist_cache.get(source)
        if cached is not None:
            return cached
        dist = {source: 0.0}
        heap = [(0.0, source)]
        done: set[str] = set()
        while heap:
            d, u = heapq.heappop(heap)
            if u in done:
                continue
            done.add(u)
            for e in self._out[u]:
                nd = d + self.euclidean(u, e.target)
                if nd < dist.get(e.target, math.inf):
                    dist[e.target] = nd
                    heapq.heappush(heap, (nd, e.target))
        with self._lock:
            self._dist_cache[source] = dist
        return dist

    def to_native(self) -> dict[str, Any]:
        doc: dict[str, Any] = {}
        if self.scan is not None:
            doc["scan"] = self.scan
        doc["viewpoints"] = [{"id": v.id, "xyz": list(v.position)} for v in self._viewpoints.values()]
        doc["edges"] = [e.to_dict() for e in self._edges]
        return doc

    def dump(self, stream: IO[str]) -> None:
        json.dump(self.to_native(), stream, indent=1)
        stream.write("\n")


def navigable_from(graph: NavGraph, at: str) -> list[NavEdge]:
    try:
        return list(graph._out[at])
    except KeyError:
        raise UnknownViewpoint(at) from None


def shortest_path_length(graph: NavGraph, a: str, b: str) -> float:
    if b not in graph:
        raise UnknownViewpoint(b)
    if a == b:
        graph.position(a)
        return 0.0
    try:
        return graph.distances_from(a)[b]
    except KeyError:
        raise Unreachable(a, b) from None


def path_length(graph: NavGraph, path: Sequence[str]) -> float:
    """Sum of straight-line segment lengths along a walk."""
    return sum(graph.euclidean(u, v) for u, v in zip(path, path[1:]))


# --- loading -----------------------------------------------------------------


def _read_json(source: IO[Any]) -> Any:
    raw = source.read()
    if isinstance(raw, bytes):
        raw = raw.decode("utf-8")
    try:
        return json.loads(raw)
    except json.JSONDecodeError as exc:
        raise MalformedRecord(f"invalid JSON at line {exc.lineno}: {exc.msg}") from exc


def _heading_elevation(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    dx, dy, dz = b[0] - a[0], b[1] - a[1], b[2] - a[2]
    heading = math.degrees(math.atan2(dx, dy)) % 360.0
    if heading >= 360.0:
        heading = 0.0
    elevation = math.degrees(math.atan2(dz, math.hypot(dx, dy)))
    return heading, elevation


def load_graph(source: IO[Any], format: str = NATIVE) -> NavGraph:
    doc = _read_json(source)
    if format == NATIVE:
        return _load_native(doc)
    if format == MATTERPORT:
        return _load_matterport(doc)
    raise ValueError(f"unknown graph format {format!r}")


def _load_native(doc: Any) -> NavGraph:
    if not isinstance(doc, dict):
        raise MalformedRecord("native graph document must be an object")
    viewpoints = []
    for i, rec in enumerate(doc.get("viewpoints", [])):
        try:
            xyz = tuple(float(c) for c in rec["xyz"])
            viewpoints.append(Viewpoint(str(rec["id"]), xyz))
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedRecord(f"bad viewpoint: {exc}", i) from exc
    ids = {v.id for v in viewpoints}
    edges = []
    for i, rec in enumerate(doc.get("edges", [])):
        try:
            src, dst = str(rec["from"]), str(rec["to"])
            heading = float(rec["heading_deg"]) % 360.0
            edge = NavEdge(src, dst, heading, float(rec["elevation_deg"]), str(rec["caption_key"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedRecord(f"bad edge: {exc}", i) from exc
        for end in (src, dst):
            if end not in ids:
                raise DanglingEdge(src, dst, end, i)
        edges.append(edge)
    return NavGraph(viewpoints, edges, scan=doc.get("scan"))


_MP_FIELDS = {"image_id", "pose", "included", "unobstructed", "visible", "height"}


def _load_matterport(doc: Any, scan: str | None = None) -> NavGraph:
    if not isinstance(doc, list):
        raise MalformedRecord("connectivity document must be a list")
    positions: list[tuple[float, float, float] | None] = []
    ids: list[str] = []
    ignored: set[str] = set()
    for i, rec in enumerate(doc):
        try:
            ids.append(str(rec["image_id"]))
            pose = [float(x) for x in rec["pose"]]
            if len(pose) != 16:
                raise ValueError("pose must have 16 entries")
            positions.append((pose[3], pose[7], pose[11]) if rec.get("included", True) else None)
            if len(rec.get("unobstructed", [])) != len(doc):
                raise ValueError("unobstructed flags must cover every record")
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedRecord(f"bad connectivity entry: {exc}", i) from exc
        ignored.update(set(rec) - _MP_FIELDS)
    if ignored:
        logger.warning("ignoring unsupported connectivity fields: %s", ", ".join(sorted(ignored)))
    viewpoints = [Viewpoint(vid, pos) for vid, pos in zip(ids, positions) if pos is not None]
    edges = []
    for i, rec in enumerate(doc):
        if positions[i] is None:
            continue
        for j, open_ in enumerate(rec["unobstructed"]):
            if not open_ or i == j or positions[j] is None:
                continue
            heading, elevation = _heading_elevation(positions[i], positions[j])
            edges.append(NavEdge(ids[i], ids[j], heading, elevation, f"{ids[i]}_{ids[j]}"))
    return NavGraph(viewpoints, edges, scan=scan)


# --- episodes ----------------------------------------------------------------


@dataclass(frozen=True)
class Episode:
    id: str
    scan: str
    instruction: str
    start: str
    start_heading: float
    gt_path: tuple[str, ...]

    def __post_init__(self):
        if not self.instruction.strip():
            raise ValueError(f"episode {self.id!r} has an empty instruction")
        if not self.gt_path:
            raise ValueError(f"episode {self.id!r} has an empty path")
        if self.gt_path[0] != self.start:
            raise ValueError(f"episode {self.id!r} path does not begin at its start viewpoint")

    @property
    def goal(self) -> str:
        return self.gt_path[-1]

    def problems(self, graph: NavGraph) -> list[str]:
        """Invariant violations of this episode against ``graph`` (empty when valid)."""
        out = [f"unknown viewpoint {v!r}" for v in self.gt_path if v not in graph]
        if out:
            return out
        for u, v in zip(self.gt_path, self.gt_path[1:]):
            if graph.edge(u, v) is None:
                out.append(f"no edge {u}->{v}")
        return out

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "scan": self.scan,
            "instruction": self.instruction,
            "start": self.start,
            "start_heading_deg": self.start_heading,
            "path": list(self.gt_path),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Episode":
        return cls(
            id=str(d["id"]),
            scan=str(d["scan"]),
            instruction=str(d["instruction"]),
            start=str(d["start"]),
            start_heading=float(d["start_heading_deg"]),
            gt_path=tuple(str(v) for v in d["path"]),
        )


class Rejection(NamedTuple):
    index: int
    episode_id: str
    reason: str


class EpisodeLoad(NamedTuple):
    episodes: list[Episode]
    rejected: list[Rejection]


def load_episodes(source: IO[Any], graphs: Mapping[str, NavGraph] | None = None) -> EpisodeLoad:
    """Parse an episode split; records failing graph validation are rejected, not raised."""
    doc = _read_json(source)
    if not isinstance(doc, list):
        raise MalformedRecord("episode file must hold a list of records")
    episodes, rejected = [], []
    for i, rec in enumerate(doc):
        try:
            ep = Episode.from_dict(rec)
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedRecord(str(exc), i) from exc
        if graphs is not None:
            graph = graphs.get(ep.scan)
            problems = [f"unknown scan {ep.scan!r}"] if graph is None else ep.problems(graph)
            if problems:
                rejected.append(Rejection(i, ep.id, "; ".join(problems)))
                continue
        episodes.append(ep)
    return EpisodeLoad(episodes, rejected)


def dump_episodes(episodes: Iterable[Episode], stream: IO[str]) -> None:
    json.dump([ep.to_dict() for ep in episodes], stream, indent=1)
    stream.write("\n")


# --- synthetic worlds --------------------------------------------------------

# Token-disjoint so a planted landmark is the unique overlap argmax of its caption.
SYNTH_LANDMARKS = (
    "sofa", "piano", "fireplace", "bathtub", "washing machine", "dining table",
    "bookshelf", "armchair", "refrigerator", "wardrobe", "mirror", "potted plant",
    "television", "kitchen counter", "bunk bed", "ceiling fan", "grandfather clock",
    "treadmill", "wine rack", "coat hook", "fish tank", "ottoman", "chandelier",
    "dresser", "sink", "toilet", "stove", "microwave", "painting", "rug", "curtains",
    "lamp", "bench", "desk", "crib", "statue", "vase", "aquarium", "stairs",
    "balcony", "laundry basket", "globe", "harp", "pillar", "archway", "skylight",
    "radiator", "hammock",
)
_ADJECTIVES = ("wooden", "white", "large", "small", "dark", "bright", "old", "modern", "grey", "tall")


class SyntheticWorld(NamedTuple):
    graph: NavGraph
    episodes: list[Episode]
    captions: dict[str, str]
    landmarks: dict[str, str]


def _instruction_for(landmarks: Sequence[str]) -> str:
    if len(landmarks) == 1:
        return f"Walk to the {landmarks[0]} and wait there."
    parts = [f"Walk toward the {landmarks[0]}"]
    parts += [f"then head to the {lm}" for lm in landmarks[1:-1]]
    return ", ".join(parts) + f", and wait by the {landmarks[-1]}."


def synth_world(
    seed: int,
    n_viewpoints: int,
    branching: int,
    n_episodes: int | None = None,
    max_hops: int = 5,
) -> SyntheticWorld:
    """Build a deterministic tree-shaped world with planted-landmark episodes.

    Every viewpoint shows one landmark; the caption of each edge names the
    landmark at its target. Episode instructions mention the landmark of every
    viewpoint after the start, in path order.
    """
    if n_viewpoints < 2:
        raise ValueError("n_viewpoints must be >= 2")
    if branching < 1:
        raise ValueError("branching must be >= 1")
    rng = random.Random(seed)
    ids = [f"v{i:03d}" for i in range(n_viewpoints)]
    positions = [(0.0, 0.0, 0.0)]
    children = [0]
    parent = [-1]
    for i in range(1, n_viewpoints):
        p = rng.choice([j for j in range(i) if children[j] < branching])
        base = positions[p]
        pos = None
        for _ in range(64):
            theta = rng.uniform(0.0, 2.0 * math.pi)
            r = rng.uniform(4.0, 6.0)
            dz = rng.choice((3.0, -3.0)) if rng.random() < 0.1 else 0.0
            cand = (round(base[0] + r * math.sin(theta), 3), round(base[1] + r * math.cos(theta), 3), base[2] + dz)
            pos = cand
            if all(math.dist(cand, q) >= 3.5 for q in positions):
                break
        children[p] += 1
        children.append(0)
        parent.append(p)
        positions.append(pos)

    if n_viewpoints <= len(SYNTH_LANDMARKS):
        landmarks = rng.sample(SYNTH_LANDMARKS, n_viewpoints)
    else:
        landmarks = [rng.choice(SYNTH_LANDMARKS) for _ in ids]

    viewpoints = [Viewpoint(v, p) for v, p in zip(ids, positions)]
    edges, captions = [], {}
    for i in range(1, n_viewpoints):
        for a, b in ((parent[i], i), (i, parent[i])):
            heading, elevation = _heading_elevation(positions[a], positions[b])
            key = f"{ids[a]}_{ids[b]}"
            captions[key] = f"a {rng.choice(_ADJECTIVES)} {landmarks[b]}"
            edges.append(NavEdge(ids[a], ids[b], round(heading, 6) % 360.0, round(elevation, 6), key))
    scan = f"synth{seed}"
    graph = NavGraph(viewpoints, edges, scan=scan)

    def tree_path(a: int, b: int) -> list[int]:
        up_a, x = [a], a
        while parent[x] >= 0:
            x = parent[x]
            up_a.append(x)
        up_b, y = [b], b
        while y not in up_a:
            y = parent[y]
            up_b.append(y)
        return up_a[: up_a.index(y)] + up_b[::-1]

    n_episodes = n_viewpoints if n_episodes is None else n_episodes
    episodes: list[Episode] = []
    attempts = 0
    while len(episodes) < n_episodes and attempts < 50 * max(n_episodes, 1):
        attempts += 1
        a, b = rng.randrange(n_viewpoints), rng.randrange(n_viewpoints)
        if a == b:
            continue
        path = tree_path(a, b)
        if len(path) - 1 > max_hops:
            continue
        planted = [landmarks[v] for v in path[1:]]
        if len(set(planted)) != len(planted) or landmarks[path[0]] in planted:
            continue
        episodes.append(
            Episode(
                id=f"{scan}_ep{len(episodes):04d}",
                scan=scan,
                instruction=_instruction_for(planted),
                start=ids[path[0]],
                start_heading=float(rng.randrange(0, 360, 30)),
                gt_path=tuple(ids[v] for v in path),
            )
        )
    return SyntheticWorld(graph, episodes, captions, dict(zip(ids, landmarks)))
