"""Command-line entry point: run, sweep, labels, synth, score."""

from __future__ import annotations

import argparse
import io
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from verinav import metrics, traces
from verinav.agent import AgentConfig, EpisodeResult, Mode, run_split
from verinav.backend import Backend, BackendError, HttpBackend, HttpConfig, SamplingParams, ScriptedBackend
from verinav.cot import CotParseError, emit_training_examples, write_training_records
from verinav.simulated import Calibration, SimulatedNavigator
from verinav.textualizer import CaptionError, StaticCaptions
from verinav.world import (
    MATTERPORT,
    NATIVE,
    Episode,
    NavGraph,
    WorldError,
    dump_episodes,
    load_episodes,
    load_graph,
    synth_world,
)

logger = logging.getLogger("verinav")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_BACKEND = 4

DEFAULTS: dict[str, Any] = {
    "graph": [],
    "graph_format": NATIVE,
    "episodes": None,
    "captions": None,
    "backend": "simulated",
    "script": None,
    "base_url": None,
    "model": None,
    "api_key_env": "VERINAV_API_KEY",
    "timeout": 60.0,
    "max_retries": 3,
    "mode": "verify",
    "num_candidates": 4,
    "verification_samples": 4,
    "masked_entities": 2,
    "max_steps": 15,
    "temperature": 0.7,
    "top_p": 0.95,
    "max_new_tokens": 128,
    "no_tfv": False,
    "no_mev": False,
    "action_only_verification": False,
    "strict_parse": False,
    "example": None,
    "p_candidate": 0.5,
    "p_verify_correct": 0.8,
    "p_verify_incorrect": 0.3,
    "seed": 0,
    "out": "out",
    "jobs": 1,
    "k_values": [1, 2, 4, 6, 8],
    "p_values": [1, 2, 4, 6, 8],
    "viewpoints": 40,
    "branching": 3,
    "num_episodes": None,
    "max_hops": 5,
}


class ConfigError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_world_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; command-line flags override it")
    p.add_argument("--graph", action="append", help="graph file (repeatable)")
    p.add_argument("--graph-format", choices=[NATIVE, MATTERPORT])
    p.add_argument("--episodes", help="episode split file")
    p.add_argument("--captions", help="caption_key -> caption JSON file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)


def _add_agent_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--backend", choices=["scripted", "http", "simulated"])
    p.add_argument("--script", help="scripted backend response file")
    p.add_argument("--base-url", help="OpenAI-compatible endpoint base URL")
    p.add_argument("--model")
    p.add_argument("--api-key-env", help="environment variable holding the API key")
    p.add_argument("--timeout", type=float)
    p.add_argument("--max-retries", type=int)
    p.add_argument("--mode", choices=[m.value for m in Mode])
    p.add_argument("-K", "--num-candidates", type=int)
    p.add_argument("-P", "--verification-samples", type=int)
    p.add_argument("-R", "--masked-entities", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--temperature", type=float)
    p.add_argument("--top-p", type=float)
    p.add_argument("--max-new-tokens", type=int)
    p.add_argument("--no-tfv", action="store_const", const=True, help="disable true/false verification")
    p.add_argument("--no-mev", action="store_const", const=True, help="disable masked-entity verification")
    p.add_argument("--action-only-verification", action="store_const", const=True)
    p.add_argument("--strict-parse", action="store_const", const=True)
    p.add_argument("--example", help="file with a replacement in-context example")
    p.add_argument("--p-candidate", type=float, help="simulated backend: chance a sample is correct")
    p.add_argument("--p-verify-correct", type=float)
    p.add_argument("--p-verify-incorrect", type=float)
    p.add_argument("--jobs", type=int, help="episodes run concurrently")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="verinav", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="evaluate an agent over a split")
    _add_world_args(p)
    _add_agent_args(p)

    p = sub.add_parser("sweep", help="evaluate a grid of candidate and verification sample counts")
    _add_world_args(p)
    _add_agent_args(p)
    p.add_argument("--k-values", type=_int_list, help="comma-separated K values")
    p.add_argument("--p-values", type=_int_list, help="comma-separated P values")

    p = sub.add_parser("labels", help="emit chain-of-thought training records from expert paths")
    _add_world_args(p)

    p = sub.add_parser("synth", help="generate a synthetic world")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--viewpoints", type=int)
    p.add_argument("--branching", type=int)
    p.add_argument("--num-episodes", type=int)
    p.add_argument("--max-hops", type=int)
    p.add_argument("--out")

    p = sub.add_parser("score", help="recompute a split summary from trace files")
    p.add_argument("--config")
    p.add_argument("--traces", required=True, help="directory of trace files")
    p.add_argument("--graph", action="append")
    p.add_argument("--graph-format", choices=[NATIVE, MATTERPORT])
    p.add_argument("--out")
    return parser


def resolve(args: argparse.Namespace) -> dict[str, Any]:
    """Defaults, then the config file, then explicit flags."""
    opts = dict(DEFAULTS)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        with open(path, encoding="utf-8") as fh:
            opts.update(json.load(fh))
    for key, value in vars(args).items():
        if value is not None and key != "config":
            opts[key] = value
    return opts


def _require_file(opts: dict[str, Any], key: str, what: str) -> Path:
    value = opts.get(key)
    if not value:
        raise ConfigError(f"--{key.replace('_', '-')} is required")
    path = Path(value)
    if not path.is_file():
        raise ConfigError(f"{what} not found: {path}")
    return path


def load_graphs(opts: dict[str, Any]) -> dict[str, NavGraph]:
    paths = opts.get("graph") or []
    if not paths:
        raise ConfigError("--graph is required")
    graphs = {}
    for value in paths:
        path = Path(value)
        if not path.is_file():
            raise ConfigError(f"graph file not found: {path}")
        with open(path, "rb") as fh:
            graph = load_graph(fh, opts["graph_format"])
        scan = graph.scan or path.stem.removesuffix("_connectivity")
        graph.scan = scan
        graphs[scan] = graph
    return graphs


def load_world(opts: dict[str, Any]) -> tuple[dict[str, NavGraph], list[Episode], StaticCaptions]:
    episodes_path = _require_file(opts, "episodes", "episode file")
    captions_path = _require_file(opts, "captions", "caption file")
    graphs = load_graphs(opts)
    with open(episodes_path, "rb") as fh:
        loaded = load_episodes(fh, graphs)
    for rej in loaded.rejected:
        logger.warning("rejected episode %s (record %d): %s", rej.episode_id, rej.index, rej.reason)
    captions = StaticCaptions.from_file(captions_path)
    check_captions(graphs, loaded.episodes, captions)
    return graphs, loaded.episodes, captions


def check_captions(graphs: dict[str, NavGraph], episodes: Sequence[Episode], captions: StaticCaptions) -> None:
    """Fail before running if any edge of a used scan lacks a caption."""
    known = captions.as_dict()
    for scan in sorted({ep.scan for ep in episodes}):
        missing = sorted({e.caption_key for e in graphs[scan].edges} - known.keys())
        if missing:
            more = f" (and {len(missing) - 1} more)" if len(missing) > 1 else ""
            raise CaptionError(f"scan {scan}: no caption for key {missing[0]!r}{more}")


def agent_config(opts: dict[str, Any]) -> AgentConfig:
    return AgentConfig(
        mode=Mode(opts["mode"]),
        num_candidates=opts["num_candidates"],
        verification_samples=opts["verification_samples"],
        masked_entities=opts["masked_entities"],
        max_steps=opts["max_steps"],
        sampling=SamplingParams(opts["temperature"], opts["top_p"], opts["max_new_tokens"], opts["seed"]),
        tfv_enabled=not opts["no_tfv"],
        mev_enabled=not opts["no_mev"],
        full_cot_verification=not opts["action_only_verification"],
        strict_parse=opts["strict_parse"],
    )


def make_backend(opts: dict[str, Any], graphs, episodes, captions) -> Backend:
    kind = opts["backend"]
    if kind == "scripted":
        return ScriptedBackend.from_file(_require_file(opts, "script", "script file"))
    if kind == "http":
        if not opts.get("base_url") or not opts.get("model"):
            raise ConfigError("the http backend needs --base-url and --model")
        return HttpBackend(
            HttpConfig(
                base_url=opts["base_url"],
                model=opts["model"],
                api_key_env=opts["api_key_env"],
                timeout=opts["timeout"],
                max_retries=opts["max_retries"],
            )
        )
    if kind == "simulated":
        cal = Calibration(opts["p_candidate"], opts["p_verify_correct"], opts["p_verify_incorrect"])
        return SimulatedNavigator(graphs, episodes, captions, cal, seed=opts["seed"])
    raise ConfigError(f"unknown backend {kind!r}")


def _example(opts: dict[str, Any]) -> str | None:
    if not opts.get("example"):
        return None
    return _require_file(opts, "example", "example file").read_text(encoding="utf-8")


def summarize(results: Sequence[EpisodeResult]) -> dict[str, Any]:
    summary = metrics.aggregate(r.metrics for r in results if r.metrics is not None)
    summary["failed"] = sum(r.error is not None for r in results)
    summary["max_steps_terminations"] = sum(r.terminated_by.value == "max_steps" for r in results)
    return summary


def write_summary(out: Path, summary: dict[str, Any], stem: str = "summary") -> None:
    traces.atomic_write(out / f"{stem}.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    traces.atomic_write(out / f"{stem}.txt", metrics.format_table([summary]) + "\n")


def evaluate_split(opts, graphs, episodes, captions, out: Path | None) -> dict[str, Any]:
    config = agent_config(opts)
    backend = make_backend(opts, graphs, episodes, captions)
    results = run_split(graphs, episodes, config, backend, captions, jobs=opts["jobs"], example=_example(opts))
    if out is not None:
        traces.write_traces(out / "traces", results)
    return summarize(results)


def cmd_run(opts: dict[str, Any]) -> int:
    graphs, episodes, captions = load_world(opts)
    out = Path(opts["out"])
    summary = evaluate_split(opts, graphs, episodes, captions, out)
    write_summary(out, summary)
    print(metrics.format_table([summary]))
    return EXIT_OK if summary["failed"] == 0 else EXIT_BACKEND


def cmd_sweep(opts: dict[str, Any]) -> int:
    graphs, episodes, captions = load_world(opts)
    out = Path(opts["out"])
    cells = []
    for k in opts["k_values"]:
        for p in opts["p_values"]:
            cell_opts = dict(opts, num_candidates=k, verification_samples=p)
            summary = evaluate_split(cell_opts, graphs, episodes, captions, out / f"K{k}_P{p}")
            cells.append({"K": k, "P": p, **summary})
    traces.atomic_write(out / "sweep.json", json.dumps(cells, indent=2, sort_keys=True) + "\n")
    table = metrics.format_table(cells, ("K", "P", "osr", "sr", "spl"))
    traces.atomic_write(out / "sweep.txt", table + "\n")
    print(table)
    return EXIT_OK


def cmd_labels(opts: dict[str, Any]) -> int:
    graphs, episodes, captions = load_world(opts)
    records = []
    for ep in episodes:
        records += emit_training_examples(ep, graphs[ep.scan], captions)
    out = Path(opts["out"])
    path = out if out.suffix == ".jsonl" else out / "training_records.jsonl"
    buf = io.StringIO()
    n = write_training_records(records, buf)
    traces.atomic_write(path, buf.getvalue())
    print(f"wrote {n} records to {path}")
    return EXIT_OK


def cmd_synth(opts: dict[str, Any]) -> int:
    world = synth_world(opts["seed"], opts["viewpoints"], opts["branching"], opts.get("num_episodes"), opts["max_hops"])
    out = Path(opts["out"])
    buf = io.StringIO()
    world.graph.dump(buf)
    traces.atomic_write(out / "graph.json", buf.getvalue())
    buf = io.StringIO()
    dump_episodes(world.episodes, buf)
    traces.atomic_write(out / "episodes.json", buf.getvalue())
    traces.atomic_write(out / "captions.json", json.dumps(world.captions, indent=1, sort_keys=True) + "\n")
    print(f"wrote {len(world.graph)} viewpoints, {len(world.graph.edges)} edges, {len(world.episodes)} episodes to {out}")
    return EXIT_OK


def cmd_score(opts: dict[str, Any]) -> int:
    directory = Path(opts["traces"])
    if not directory.is_dir():
        raise ConfigError(f"trace directory not found: {directory}")
    results = traces.read_traces(directory)
    if opts.get("graph"):
        graphs = load_graphs(opts)
        for r in results:
            r.metrics = metrics.evaluate(graphs[r.scan], r.trajectory, r.gt_path)
    summary = summarize(results)
    out = Path(opts["out"]) if opts.get("out") and opts["out"] != DEFAULTS["out"] else directory.parent
    write_summary(out, summary, "rescored_summary")
    print(metrics.format_table([summary]))
    return EXIT_OK


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "labels": cmd_labels, "synth": cmd_synth, "score": cmd_score}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        opts = resolve(args)
        return COMMANDS[args.command](opts)
    except ConfigError as exc:
        print(f"error[config]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (WorldError, CaptionError, CotParseError, ValueError) as exc:
        print(f"error[data]: {exc}", file=sys.stderr)
        return EXIT_DATA
    except BackendError as exc:
        print(f"error[backend]: {exc}", file=sys.stderr)
        return EXIT_BACKEND


if __name__ == "__main__":
    sys.exit(main())
