"""Command-line entry point.

Every :class:`RunConfig` key is accepted as ``--key-name``; values from ``--config``
are read first and flags win. Exit codes: 0 success, 1 invalid input, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields

from . import experiment
from .config import ConfigError, RunConfig, load_config
from .graph import GraphError, generate_synthetic, ingest, write_graph
from .linearize import check_well_formed, render_debug
from .pipeline import build_pipeline, infer_batch, load_graph, load_pipeline
from .ppr import build_normalized_adjacency, ppr_vector, select_neighbors

logger = logging.getLogger("mmagen")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def _add_config_flags(p):
    p.add_argument("--config", help="INI file with run keys")
    for f in fields(RunConfig):
        kind = {"int": int, "float": float}.get(f.type if isinstance(f.type, str) else f.type.__name__, str)
        p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=kind, default=None)


def _config(args, **extra):
    overrides = {f.name: getattr(args, f.name, None) for f in fields(RunConfig)}
    overrides.update({k: v for k, v in extra.items() if v is not None})
    return load_config(args.config, overrides)


def _emit(obj):
    print(json.dumps(obj, sort_keys=True))


def cmd_ingest(args):
    res = ingest(args.nodes, args.edges)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        write_graph(res.graph, os.path.join(args.out, "nodes.jsonl"), os.path.join(args.out, "edges.tsv"))
    _emit(
        {
            "nodes": res.graph.n,
            "edges": len(res.graph.edges),
            "d_img": res.graph.d_img,
            "self_loops_dropped": res.self_loops_dropped,
            "duplicates_dropped": res.duplicates_dropped,
            "components": int(res.graph.connected_components()[0]),
        }
    )


def cmd_synth(args):
    cfg = _config(args)
    graph = generate_synthetic(cfg.synthetic_spec())
    os.makedirs(args.out, exist_ok=True)
    nodes, edges = os.path.join(args.out, "nodes.jsonl"), os.path.join(args.out, "edges.tsv")
    write_graph(graph, nodes, edges)
    _emit({"nodes": graph.n, "edges": len(graph.edges), "nodes_path": nodes, "edges_path": edges})


def cmd_sample(args):
    cfg = _config(args, top_k=args.k)
    graph = load_graph(cfg)
    ppr = ppr_vector(build_normalized_adjacency(graph), args.node, cfg.ppr_config())
    nbrs = select_neighbors(ppr, cfg.top_k)
    _emit(
        {
            "source": nbrs.source,
            "members": list(nbrs.members),
            "scores": list(nbrs.scores),
            "converged": ppr.converged,
            "iterations": ppr.iterations,
        }
    )


def cmd_linearize(args):
    cfg = _config(args)
    pipe = build_pipeline(cfg.replace(graph_mode="hard") if cfg.graph_mode == "soft" else cfg)
    seq = pipe.sequence(args.node, training=args.training)
    check_well_formed(seq, cfg.image_tokens)
    _emit({"node": args.node, "length": len(seq), "target_span": list(seq.target_span), "tokens": render_debug(seq, pipe.vocab)})


def cmd_train(args):
    cfg = _config(args)
    res = experiment.train(cfg, out_dir=cfg.output_dir)
    _emit(
        {
            "output_dir": cfg.output_dir,
            "steps": len(res.losses),
            "initial_loss": res.losses[0] if res.losses else None,
            "final_loss": res.losses[-1] if res.losses else None,
        }
    )


def _run_dir(args):
    return args.run or args.output_dir or RunConfig.output_dir


def _inference_overrides(args):
    keys = ("strategy", "temperature", "max_new", "seed")
    return {k: getattr(args, k) for k in keys if getattr(args, k) is not None}


def cmd_eval(args):
    run = _run_dir(args)
    pipe = load_pipeline(run, overrides=_inference_overrides(args))
    res, table = experiment.run_eval(pipe.cfg, pipe, out_dir=args.out or run)
    sys.stdout.write(table)
    _emit(json.loads(res.report.record(mode=pipe.cfg.graph_mode, strategy=pipe.cfg.strategy)))


def cmd_infer(args):
    run = _run_dir(args)
    pipe = load_pipeline(run, overrides=_inference_overrides(args))
    targets = args.node or pipe.test_ids
    for g in infer_batch(pipe, targets):
        _emit(g.record())


def cmd_grid(args):
    cfg = _config(args)
    axes = tuple(args.axes.split(","))
    rows, table = experiment.grid(cfg, axes=axes, out_dir=cfg.output_dir)
    sys.stdout.write(table)


def build_parser():
    parser = argparse.ArgumentParser(prog="mmagen", description="Graph-context multimodal node generation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate a node/edge file pair and report statistics")
    p.add_argument("nodes")
    p.add_argument("edges", nargs="?")
    p.add_argument("--out", help="write the canonical graph here")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="write a planted-cluster synthetic graph")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("sample", help="top-K PPR neighbors of one node")
    p.add_argument("--node", type=int, required=True)
    p.add_argument("--k", type=int)
    _add_config_flags(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("linearize", help="render the prompt sequence of one node")
    p.add_argument("--node", type=int, required=True)
    p.add_argument("--training", action="store_true", help="include the target span")
    _add_config_flags(p)
    p.set_defaults(func=cmd_linearize)

    p = sub.add_parser("train", help="train and write a checkpoint to --output-dir")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    for name, func, hlp in (("eval", cmd_eval, "score a trained run"), ("infer", cmd_infer, "generate nodes")):
        p = sub.add_parser(name, help=hlp)
        p.add_argument("--run", help="run directory (default: --output-dir)")
        p.add_argument("--output-dir", dest="output_dir")
        p.add_argument("--strategy")
        p.add_argument("--temperature", type=float)
        p.add_argument("--max-new", dest="max_new", type=int)
        p.add_argument("--seed", type=int)
        if name == "eval":
            p.add_argument("--out", help="report directory (default: the run directory)")
        else:
            p.add_argument("--node", type=int, action="append", help="target id (repeatable)")
        p.set_defaults(func=func)

    p = sub.add_parser("grid", help="train and evaluate a grid of configurations")
    p.add_argument("--axes", default="design,ablation,neighbors")
    _add_config_flags(p)
    p.set_defaults(func=cmd_grid)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (ConfigError, GraphError, ValueError, KeyError, IndexError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
