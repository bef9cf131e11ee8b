from pathlib import Path

import pytest

from verinav.textualizer import StaticCaptions
from verinav.world import Episode, NavEdge, NavGraph, Viewpoint, load_graph

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures():
    return FIXTURES


@pytest.fixture
def five_graph():
    with open(FIXTURES / "five_node.json", "rb") as fh:
        return load_graph(fh)


@pytest.fixture
def five_captions():
    return StaticCaptions.from_file(FIXTURES / "five_captions.json")


def line_graph(lengths, scan="line"):
    """Chain v0 -> v1 -> ... along +y with the given segment lengths, edges both ways."""
    ys = [0.0]
    for length in lengths:
        ys.append(ys[-1] + length)
    vps = [Viewpoint(f"v{i}", (0.0, y, 0.0)) for i, y in enumerate(ys)]
    edges = []
    for i in range(len(lengths)):
        edges.append(NavEdge(f"v{i}", f"v{i + 1}", 0.0, 0.0, f"v{i}_v{i + 1}"))
        edges.append(NavEdge(f"v{i + 1}", f"v{i}", 180.0, 0.0, f"v{i + 1}_v{i}"))
    return NavGraph(vps, edges, scan=scan)


def example_scene():
    """The sofa / bathroom-door scene: the agent stands at the sofa facing north."""
    vps = [
        Viewpoint("start", (0.0, -4.0, 0.0)),
        Viewpoint("sofa", (0.0, 0.0, 0.0)),
        Viewpoint("hall", (0.0, 4.0, 0.0)),
        Viewpoint("bath", (4.0, 0.0, 0.0)),
    ]
    edges = [
        NavEdge("start", "sofa", 0.0, 0.0, "start_sofa"),
        NavEdge("sofa", "hall", 0.0, 0.0, "sofa_hall"),
        NavEdge("sofa", "bath", 90.0, 0.0, "sofa_bath"),
        NavEdge("bath", "sofa", 270.0, 0.0, "bath_sofa"),
    ]
    captions = StaticCaptions(
        {"start_sofa": "a sofa", "sofa_hall": "a sofa", "sofa_bath": "a bathroom door", "bath_sofa": "a sofa"}
    )
    episode = Episode(
        "example", "scene", "Walk past the sofa and stop at the bathroom door.", "start", 0.0, ("start", "sofa", "bath")
    )
    return NavGraph(vps, edges, scan="scene"), captions, episode


# --- acceptance reporting ----------------------------------------------------

_ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


def pytest_runtest_logreport(report):
    marker = next((v for k, v in report.user_properties if k == "criterion"), None)
    if marker is None:
        return
    number, title = marker
    detail = next((v for k, v in report.user_properties if k == "detail"), "")
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _ACCEPTANCE[number] = (title, "PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, verdict, detail = _ACCEPTANCE[number]
        line = f"criterion {number} {verdict}: {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
