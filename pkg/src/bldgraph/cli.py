"""Command-line front end: ``bldgraph <subcommand> --config run.json [--set key=value ...]``.

Exit codes: 0 success, 1 data or validation error, 2 usage error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .config import ConfigError, PipelineConfig, apply_overrides, config_from_dict, parse_config
from .evaluation import compare_models, export_embeddings
from .graphbuild import GraphBuildError, load_graph, save_graph
from .ingest import IngestError
from .neuralcore import load_checkpoint, save_checkpoint
from .neuralcore.checkpoint import CheckpointError
from .pipeline import graph_for, load_region, scenario_for
from .synth import write_scenario
from .training import TrainingError, evaluate, fit

log = logging.getLogger("bldgraph")

DATA_ERRORS = (ConfigError, IngestError, GraphBuildError, CheckpointError, TrainingError, ValueError, OSError)


class _Parser(argparse.ArgumentParser):
    """Usage errors exit 2 with the message on stderr (argparse default), kept explicit here."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON pipeline configuration (default: all defaults)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one configuration field, e.g. train.epochs=50 (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bldgraph", description="Building damage graph pipeline.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic disaster scenario directory")
    _common(p)
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("build-graph", help="build the weighted Delaunay building graph")
    _common(p)
    p.add_argument("--scenario", type=Path, help="scenario directory written by 'synth' (overrides data paths)")
    p.add_argument("--graph-out", type=Path, required=True)

    p = sub.add_parser("train", help="train the node classifier on a graph")
    _common(p)
    p.add_argument("--graph-in", type=Path, required=True)
    p.add_argument("--checkpoint-out", type=Path, required=True)
    p.add_argument("--history-out", type=Path, help="per-epoch loss and test metrics (JSON lines)")

    p = sub.add_parser("eval", help="write the metrics report for a trained checkpoint")
    _common(p)
    p.add_argument("--graph-in", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--report-out", type=Path, required=True)

    p = sub.add_parser("compare", help="repeated paired runs of the model against the baseline")
    _common(p)
    p.add_argument("--graph-in", type=Path, required=True)
    p.add_argument("--report-out", type=Path, required=True)
    p.add_argument("--split", default="hold", choices=("train", "test", "hold", "full"))
    p.add_argument("--workers", type=int, default=1, help="parallel worker processes")

    p = sub.add_parser("export-embeddings", help="write per-node GCN embeddings as CSV")
    _common(p)
    p.add_argument("--graph-in", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    return parser


def load_config(args) -> PipelineConfig:
    cfg = parse_config(args.config) if args.config else config_from_dict({})
    return apply_overrides(cfg, args.overrides) if args.overrides else cfg


def cmd_synth(cfg: PipelineConfig, args) -> None:
    paths = write_scenario(scenario_for(cfg), args.out)
    log.info("scenario written to %s", paths["manifest"].parent)


def cmd_build_graph(cfg: PipelineConfig, args) -> None:
    if args.scenario is not None:
        d = args.scenario
        cfg = cfg.model_copy(update={"data": cfg.data.model_copy(update={
            "footprints": str(d / "footprints.geojson"), "pre": str(d / "pre.png"), "post": str(d / "post.png")})})
    graph = graph_for(load_region(cfg), cfg)
    save_graph(graph, args.graph_out)


def cmd_train(cfg: PipelineConfig, args) -> None:
    graph = load_graph(args.graph_in)
    ck, hist = fit(graph, cfg.train_config(graph.num_classes),
                   progress=lambda e, loss, m: log.info("epoch %d loss %.4f test %s", e, loss, m))
    save_checkpoint(ck, args.checkpoint_out)
    if args.history_out is not None:
        hist.save(args.history_out)


def cmd_eval(cfg: PipelineConfig, args) -> None:
    report = evaluate(load_graph(args.graph_in), load_checkpoint(args.checkpoint))
    report.save(args.report_out)
    sys.stdout.write(report.dumps())


def cmd_compare(cfg: PipelineConfig, args) -> None:
    graph = load_graph(args.graph_in)
    k = graph.num_classes
    cfg_a = cfg.train_config(k)
    cfg_b = cfg.train_config(k, model=cfg.baseline_model())
    report = compare_models(cfg_a, cfg_b, graph, runs=cfg.compare.runs, seed=cfg_a.seed, split=args.split,
                            workers=args.workers)
    report.extra["baseline"] = dict(cfg.compare.baseline)
    report.save(args.report_out)
    for m, c in report.metrics.items():
        sys.stdout.write(f"{m:12s} mean diff {c.mean_difference:+.4f}  t p={c.t_p:.4g}  wilcoxon p={c.w_p:.4g}\n")


def cmd_export_embeddings(cfg: PipelineConfig, args) -> None:
    export_embeddings(load_graph(args.graph_in), load_checkpoint(args.checkpoint), args.out)


COMMANDS = {"synth": cmd_synth, "build-graph": cmd_build_graph, "train": cmd_train, "eval": cmd_eval,
            "compare": cmd_compare, "export-embeddings": cmd_export_embeddings}


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        parser.print_help(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_help(sys.stderr)
        return 2
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        COMMANDS[args.command](cfg, args)
    except DATA_ERRORS as err:
        sys.stderr.write(f"bldgraph {args.command}: error: {err}\n")
        return 1
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
