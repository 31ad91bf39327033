"""Command-line entry point: staged commands and the end-to-end run.

Exit codes: 0 success (possibly with warnings), 2 input or validation error,
3 gateway error, 4 configuration error. Every invocation writes a manifest
into the output directory, including failed ones.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any, Callable, Sequence

from . import __version__
from .config import STAGES, ConfigError, PipelineConfig, load_config
from .gateway import Backend, Gateway, GatewayError, HttpBackend, ReplayStore
from .generator import FewShotStore, generate_document
from .graph import (
    ConceptGraph,
    Plan,
    dumps,
    graph_from_json,
    graph_to_json,
    plan_from_json,
    plan_to_json,
    validate_graph,
    validate_plan,
)
from .induction import Document, InductionError, build_candidates, run_reasoning_chain
from .merge import merge_with_model, merge_with_report
from .planner import gate, propose_plans

log = logging.getLogger("patdraft")

EXIT_OK, EXIT_INPUT, EXIT_GATEWAY, EXIT_CONFIG = 0, 2, 3, 4


class InputError(Exception):
    """Unreadable or invalid input artifact (exit 2)."""


class _Collector(logging.Handler):
    def __init__(self) -> None:
        super().__init__(logging.WARNING)
        self.messages: list[str] = []

    def emit(self, record: logging.LogRecord) -> None:
        self.messages.append(f"{record.name}: {record.getMessage()}")


class Run:
    """Artifact writer and manifest bookkeeping for one invocation."""

    def __init__(self, command: str, out_dir: Path, config: PipelineConfig | None):
        self.command = command
        self.out_dir = out_dir
        self.config = config
        self.artifacts: list[str] = []
        self.timing: dict[str, float] = {}
        self.gateway: Gateway | None = None
        self.error: str | None = None
        self.exit_code = EXIT_OK
        self.collector = _Collector()

    def write(self, name: str, payload: Any) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / name
        text = payload if isinstance(payload, str) else dumps(payload)
        path.write_text(text, encoding="utf-8")
        if name not in self.artifacts:
            self.artifacts.append(name)
        return path

    def stage(self, name: str, fn: Callable[[], Any]) -> Any:
        start = time.perf_counter()
        try:
            return fn()
        finally:
            self.timing[name] = round(time.perf_counter() - start, 6)

    @property
    def manifest_name(self) -> str:
        return "manifest.json" if self.command == "run" else f"manifest.{self.command}.json"

    def write_manifest(self) -> None:
        manifest = {
            "command": self.command,
            "version": __version__,
            "exit_code": self.exit_code,
            "error": self.error,
            "config": self.config.snapshot() if self.config else None,
            "artifacts": sorted(self.artifacts + [self.manifest_name]),
            "warnings": list(self.collector.messages),
            "warning_count": len(self.collector.messages),
            "gateway_calls": self.gateway.call_counts() if self.gateway else {},
            "timing": {"seconds": self.timing},
        }
        self.out_dir.mkdir(parents=True, exist_ok=True)
        (self.out_dir / self.manifest_name).write_text(dumps(manifest), encoding="utf-8")


def make_gateway(config: PipelineConfig, backend: Backend | None = None) -> Gateway:
    g = config.gateway
    mode = g["mode"]
    store = ReplayStore(config.paths["cache_dir"]) if mode in ("record", "replay") else None
    if mode in ("live", "record") and backend is None:
        backend = HttpBackend.from_env()
    return Gateway(
        backend=backend,
        store=store,
        mode=mode,
        temperature=float(g["temperature"]),
        top_k=int(g["top_k"]),
        overrides=g["overrides"],
        max_retries=int(g["max_retries"]),
    )


def _read_json(path: str | Path) -> Any:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{path} is not valid JSON: {exc}") from exc


def read_graph(path: str | Path) -> ConceptGraph:
    try:
        graph = graph_from_json(_read_json(path))
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from exc
    problems = validate_graph(graph)
    if problems:
        raise InputError(f"{path} is not a valid graph:\n" + "\n".join(f"  - {p}" for p in problems))
    return graph


def read_plan(path: str | Path, graph: ConceptGraph) -> Plan:
    try:
        plan = plan_from_json(_read_json(path))
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from exc
    problems = validate_plan(plan, graph)
    if problems:
        raise InputError(f"{path} does not partition the graph:\n" + "\n".join(f"  - {p}" for p in problems))
    return plan


# -- stages -------------------------------------------------------------------


def stage_induce(run: Run, input_path: str | Path) -> list[ConceptGraph]:
    assert run.config is not None and run.gateway is not None
    try:
        document = Document.load(input_path)
    except OSError as exc:
        raise InputError(f"cannot read input {input_path}: {exc.strerror or exc}") from exc
    except (InductionError, UnicodeDecodeError) as exc:
        raise InputError(f"{input_path}: {exc}") from exc
    steps = run.stage("induce.reasoning", lambda: run_reasoning_chain(document, run.gateway, run.config.char_budget))
    run.write("steps.json", [s.to_json() for s in steps])
    candidates = run.stage("induce.candidates", lambda: build_candidates(steps, run.gateway))
    for i, graph in enumerate(candidates, start=1):
        run.write(f"graph.candidate{i}.json", graph_to_json(graph))
    return candidates


def stage_merge(run: Run, candidates: Sequence[ConceptGraph]) -> ConceptGraph:
    assert run.config is not None
    cfg = run.config.merge
    if cfg.backend == "model":
        assert run.gateway is not None
        merged, report = run.stage("merge", lambda: merge_with_model(candidates, run.gateway, cfg))
    else:
        merged, report = run.stage("merge", lambda: merge_with_report(candidates, cfg))
    run.write("graph.json", graph_to_json(merged))
    run.write("merge_report.json", report.to_json())
    return merged


def stage_plan(run: Run, graph: ConceptGraph) -> Plan:
    assert run.config is not None and run.gateway is not None
    cfg = run.config.planner
    plans = run.stage("plan.propose", lambda: propose_plans(graph, run.gateway, cfg))
    result = run.stage("plan.gate", lambda: gate(plans, graph, cfg))
    run.write("plan.json", plan_to_json(result.plan))
    run.write("gate_report.json", result.to_json())
    return result.plan


def stage_generate(run: Run, plan: Plan, graph: ConceptGraph) -> None:
    assert run.config is not None and run.gateway is not None
    g = run.config.settings["generator"]
    store = FewShotStore(run.config.paths["few_shot_dir"] or None, int(g["max_examples"]))
    doc = run.stage(
        "generate", lambda: generate_document(plan, graph, run.gateway, run.config.generator, store)
    )
    run.write("description.md", doc.to_markdown())
    run.write("validation.json", doc.report_json())
    if doc.flagged_count:
        log.warning("%d of %d paragraphs flagged by validation", doc.flagged_count, len(doc.paragraphs))


# -- commands -----------------------------------------------------------------


def cmd_induce(run: Run, args: argparse.Namespace) -> None:
    stage_induce(run, args.input)


def cmd_merge(run: Run, args: argparse.Namespace) -> None:
    if len(args.candidates) != 3:
        raise InputError(f"merge needs exactly 3 candidate graph files, got {len(args.candidates)}")
    stage_merge(run, [read_graph(p) for p in args.candidates])


def cmd_plan(run: Run, args: argparse.Namespace) -> None:
    if args.merge:
        if len(args.graphs) != 3:
            raise InputError(f"--merge needs exactly 3 candidate graph files, got {len(args.graphs)}")
        graph = stage_merge(run, [read_graph(p) for p in args.graphs])
    else:
        if len(args.graphs) != 1:
            raise InputError("plan takes one merged graph file (or three candidates with --merge)")
        graph = read_graph(args.graphs[0])
    stage_plan(run, graph)


def cmd_generate(run: Run, args: argparse.Namespace) -> None:
    graph = read_graph(args.graph)
    stage_generate(run, read_plan(args.plan, graph), graph)


def cmd_run(run: Run, args: argparse.Namespace) -> None:
    assert run.config is not None
    stop = run.config.stop_after
    candidates = stage_induce(run, args.input)
    if stop == "induce":
        return
    graph = stage_merge(run, candidates)
    if stop == "merge":
        return
    plan = stage_plan(run, graph)
    if stop == "plan":
        return
    stage_generate(run, plan, graph)


def cmd_validate(run: Run, args: argparse.Namespace) -> None:
    data = _read_json(args.file)
    if isinstance(data, dict) and "sections" in data:
        if not args.graph:
            raise InputError("validating a plan needs --graph")
        read_plan(args.file, read_graph(args.graph))
        print(f"{args.file}: valid plan")
    else:
        read_graph(args.file)
        print(f"{args.file}: valid graph")


COMMANDS: dict[str, Callable[[Run, argparse.Namespace], None]] = {
    "induce": cmd_induce,
    "merge": cmd_merge,
    "plan": cmd_plan,
    "generate": cmd_generate,
    "run": cmd_run,
    "validate": cmd_validate,
}

# commands that never touch the model
_OFFLINE = {"merge", "validate"}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--mode", choices=["live", "record", "replay"], help="gateway mode")
    common.add_argument("--cache", help="replay cache directory")
    common.add_argument("-o", "--out", help="output directory")
    common.add_argument("--k", type=int, help="number of candidate plans")
    common.add_argument("--tau-c", type=float, help="connectivity threshold")
    common.add_argument("--tau-s", type=float, help="semantic-consistency threshold")
    common.add_argument("--max-attempts", type=int, help="generation attempts per section")
    common.add_argument("--few-shot", help="few-shot exemplar directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="patdraft", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("induce", parents=[common], help="reasoning chain and three candidate graphs")
    p.add_argument("input")
    p = sub.add_parser("merge", parents=[common], help="merge three candidate graphs")
    p.add_argument("candidates", nargs="+")
    p = sub.add_parser("plan", parents=[common], help="propose, gate and select a section plan")
    p.add_argument("graphs", nargs="+", help="merged graph, or three candidates with --merge")
    p.add_argument("--merge", action="store_true", help="merge three candidate graphs first")
    p = sub.add_parser("generate", parents=[common], help="generate the description from a plan")
    p.add_argument("plan")
    p.add_argument("graph")
    p = sub.add_parser("run", parents=[common], help="full pipeline")
    p.add_argument("input")
    p.add_argument("--stop-after", choices=STAGES)
    p = sub.add_parser("validate", parents=[common], help="check a graph or plan file")
    p.add_argument("file")
    p.add_argument("--graph", help="graph the plan must partition")
    return parser


def _flags(args: argparse.Namespace) -> dict[str, Any]:
    return {
        "gateway.mode": args.mode,
        "paths.cache_dir": args.cache,
        "paths.output_dir": args.out,
        "paths.few_shot_dir": args.few_shot,
        "planner.k": args.k,
        "planner.tau_c": args.tau_c,
        "planner.tau_s": args.tau_s,
        "generator.max_attempts": args.max_attempts,
        "stages.stop_after": getattr(args, "stop_after", None),
    }


def main(argv: Sequence[str] | None = None, backend: Backend | None = None) -> int:
    """Run one command; ``backend`` replaces the HTTP client in live/record mode."""
    args = build_parser().parse_args(argv)
    out_dir = Path(args.out or "out")
    run = Run(args.command, out_dir, None)
    pkg_log = logging.getLogger("patdraft")
    pkg_log.addHandler(run.collector)
    stderr = logging.StreamHandler(sys.stderr)
    stderr.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    pkg_log.addHandler(stderr)
    pkg_log.setLevel(logging.INFO if args.verbose else logging.WARNING)
    try:
        run.config = load_config(args.config, _flags(args))
        run.out_dir = Path(run.config.paths["output_dir"])
        if args.command not in _OFFLINE:
            run.gateway = make_gateway(run.config, backend)
        COMMANDS[args.command](run, args)
    except ConfigError as exc:
        run.exit_code, run.error = EXIT_CONFIG, f"config error: {exc}"
    except GatewayError as exc:
        run.exit_code, run.error = EXIT_GATEWAY, f"gateway error [{exc.tag or 'unknown'}]: {exc}"
    except InputError as exc:
        run.exit_code, run.error = EXIT_INPUT, str(exc)
    except (OSError, ValueError) as exc:
        run.exit_code, run.error = EXIT_INPUT, f"input error: {exc}"
    finally:
        pkg_log.removeHandler(run.collector)
        pkg_log.removeHandler(stderr)
    if run.error:
        print(run.error, file=sys.stderr)
    try:
        run.write_manifest()
    except OSError as exc:
        print(f"cannot write manifest: {exc}", file=sys.stderr)
    if run.exit_code == EXIT_OK and args.command != "validate":
        warned = len(run.collector.messages)
        print(f"{args.command}: wrote {len(run.artifacts)} artifacts to {run.out_dir} ({warned} warnings)")
    return run.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
