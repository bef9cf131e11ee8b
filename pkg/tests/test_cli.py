import json

import pytest

from verinav.agent import AgentConfig, run_split
from verinav.backend import RecordingBackend
from verinav.cli import main
from verinav.simulated import SimulatedNavigator
from verinav.textualizer import StaticCaptions
from verinav.traces import read_traces, serialize
from verinav.world import load_episodes, load_graph


@pytest.fixture
def world_args(fixtures):
    return [
        "--graph", str(fixtures / "five_node.json"),
        "--episodes", str(fixtures / "five_episodes.json"),
        "--captions", str(fixtures / "five_captions.json"),
    ]


def _tree(directory):
    return {p.relative_to(directory).as_posix(): p.read_bytes() for p in sorted(directory.rglob("*")) if p.is_file()}


def test_run_writes_traces_and_summary(tmp_path, world_args):
    assert main(["run", *world_args, "--out", str(tmp_path / "a")]) == 0
    traces = sorted(p.name for p in (tmp_path / "a" / "traces").iterdir())
    assert traces == ["ep1.jsonl", "ep2.jsonl", "ep3.jsonl", "ep4.jsonl", "ep6.jsonl"]
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert summary["episodes"] == 5 and summary["failed"] == 0
    assert (tmp_path / "a" / "summary.txt").read_text().startswith("episodes")


def test_rerun_is_byte_identical(tmp_path, world_args):
    for name in ("a", "b"):
        assert main(["run", *world_args, "--seed", "3", "--out", str(tmp_path / name)]) == 0
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")


def test_missing_caption_is_a_data_error(tmp_path, fixtures, world_args, capsys):
    caps = json.loads((fixtures / "five_captions.json").read_text())
    caps.pop("a_b")
    (tmp_path / "c.json").write_text(json.dumps(caps))
    args = world_args[:4] + ["--captions", str(tmp_path / "c.json")]
    assert main(["run", *args, "--out", str(tmp_path / "o")]) == 3
    assert "a_b" in capsys.readouterr().err
    assert not (tmp_path / "o" / "traces").exists()


def test_missing_file_is_a_config_error(tmp_path, world_args, capsys):
    args = world_args[:2] + ["--episodes", str(tmp_path / "nope.json")] + world_args[4:]
    assert main(["run", *args]) == 2
    assert capsys.readouterr().err.startswith("error[config]")


def test_config_file_and_flag_precedence(tmp_path, world_args):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"mode": "greedy", "out": str(tmp_path / "from_config")}))
    assert main(["run", "--config", str(cfg), *world_args]) == 0
    assert (tmp_path / "from_config" / "summary.json").exists()
    assert main(["run", "--config", str(cfg), *world_args, "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "flag" / "summary.json").exists()
    step = json.loads((tmp_path / "flag" / "traces" / "ep1.jsonl").read_text().splitlines()[1])
    assert len(step["samples"]) == 1


def test_sweep_cells(tmp_path, world_args):
    out = tmp_path / "sw"
    assert main(["sweep", *world_args, "--k-values", "1,2", "--p-values", "1,4", "--out", str(out)]) == 0
    cells = json.loads((out / "sweep.json").read_text())
    assert [(c["K"], c["P"]) for c in cells] == [(1, 1), (1, 4), (2, 1), (2, 4)]
    for c in cells:
        assert len(list((out / f"K{c['K']}_P{c['P']}" / "traces").iterdir())) == 5
    assert (out / "sweep.txt").read_text().split()[:5] == ["K", "P", "osr", "sr", "spl"]


def test_labels(tmp_path, world_args, fixtures):
    assert main(["labels", *world_args, "--out", str(tmp_path / "l")]) == 0
    lines = (tmp_path / "l" / "training_records.jsonl").read_text().splitlines()
    with open(fixtures / "five_episodes.json", "rb") as fh:
        graph = load_graph(open(fixtures / "five_node.json", "rb"))
        eps = load_episodes(fh, {"five": graph}).episodes
    assert len(lines) == 1 + 4 * sum(len(ep.gt_path) for ep in eps)


def test_synth_then_run(tmp_path):
    w = tmp_path / "w"
    assert main(["synth", "--seed", "4", "--viewpoints", "12", "--branching", "2", "--num-episodes", "6", "--out", str(w)]) == 0
    with open(w / "graph.json", "rb") as fh:
        graph = load_graph(fh)
    assert len(graph) == 12
    args = ["--graph", str(w / "graph.json"), "--episodes", str(w / "episodes.json"), "--captions", str(w / "captions.json")]
    assert main(["run", *args, "--out", str(tmp_path / "r")]) == 0
    assert len(list((tmp_path / "r" / "traces").iterdir())) == 6


def test_score_recomputes_metrics(tmp_path, world_args):
    assert main(["run", *world_args, "--out", str(tmp_path / "a")]) == 0
    original = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert main(["score", "--traces", str(tmp_path / "a" / "traces"), "--graph", world_args[1]]) == 0
    rescored = json.loads((tmp_path / "a" / "rescored_summary.json").read_text())
    assert rescored == original
    assert main(["score", "--traces", str(tmp_path / "missing")]) == 2


def test_scripted_replay_through_cli(tmp_path, fixtures, world_args):
    with open(fixtures / "five_node.json", "rb") as fh:
        graph = load_graph(fh)
    with open(fixtures / "five_episodes.json", "rb") as fh:
        eps = load_episodes(fh, {"five": graph}).episodes
    caps = StaticCaptions.from_file(fixtures / "five_captions.json")
    recorder = RecordingBackend(SimulatedNavigator({"five": graph}, eps, caps, seed=9))
    live = run_split({"five": graph}, eps, AgentConfig(), recorder, caps)
    recorder.dump(tmp_path / "script.json")
    out = tmp_path / "replay"
    assert main(["run", *world_args, "--backend", "scripted", "--script", str(tmp_path / "script.json"), "--out", str(out)]) == 0
    replayed = read_traces(out / "traces")
    assert [serialize(r) for r in replayed] == [serialize(r) for r in live]
