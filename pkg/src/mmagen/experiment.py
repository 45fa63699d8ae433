"""Training loop, evaluation, and experiment grids."""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .aligner import Ablation
from .inference import Strategy, write_generated
from .linearize import GraphMode, Modality, Order, TargetOrder
from .metrics import ScoreReport, SharedEmbedder, format_table, kl_dv, proxy_clip_i2, proxy_clip_it, sequence_nll
from .nn import Adam, save_checkpoint
from .pipeline import CHECKPOINT, _ORDER, build_pipeline, infer_batch, save_pipeline, stream

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainResult:
    pipeline: object
    losses: list = field(default_factory=list)


def warmup_factor(step, cfg):
    """Linear warmup over ``warmup_ratio * steps`` steps, then constant."""
    warm = math.ceil(cfg.warmup_ratio * cfg.steps)
    if warm and step < warm:
        return (step + 1) / warm
    return 1.0


def _optimizers(pipe, cfg):
    """One Adam for the sequence model and adapter, one for the aligner (own learning rate).

    A fast-moving aligner collapses its output to a constant soft prompt before the
    sequence model learns to read it, so it gets a separate, usually smaller, rate.
    """
    params = pipe.named_parameters()
    aligner = {k: p for k, p in params.items() if k.startswith(("nfq.", "gsq."))}
    rest = {k: p for k, p in params.items() if k not in aligner}
    opts = [(Adam(rest, lr=cfg.lr), cfg.lr)]
    if aligner:
        opts.append((Adam(aligner, lr=cfg.aligner_lr), cfg.aligner_lr))
    return opts


def _target_orders(cfg, rng, n):
    if cfg.target_order == "mixed":
        return [TargetOrder.TEXT_FIRST if b else TargetOrder.IMAGE_FIRST for b in rng.random(n) < 0.5]
    return [TargetOrder(cfg.target_order)] * n


def mean_train_loss(pipeline, ids=None, target_order=TargetOrder.TEXT_FIRST):
    """Average target-span loss over ``ids`` (default: training nodes), without gradients."""
    ids = pipeline.train_ids if ids is None else ids
    w = pipeline.cfg.image_loss_weight
    with T.no_grad():
        vals = [float(pipeline.model.loss(pipeline.sequence(i, True, target_order), w).data) for i in ids]
    return float(np.mean(vals))


def train(cfg, graph=None, pipeline=None, out_dir=None):
    """Seeded single-threaded training. Returns the pipeline and the per-step losses.

    Each step draws ``batch_size`` training nodes (epoch-wise shuffled), accumulates the
    weighted target-span loss, and applies one Adam update to the sequence model and, in
    soft mode, the aligner.
    """
    pipe = build_pipeline(cfg, graph) if pipeline is None else pipeline
    opts = _optimizers(pipe, cfg)
    rng = stream(cfg.seed, _ORDER)
    queue = []
    losses = []
    for step in range(cfg.steps):
        for opt, _ in opts:
            opt.zero_grad()
        total = 0.0
        for _ in range(cfg.batch_size):
            if not queue:
                queue = rng.permutation(pipe.train_ids).tolist()
            node = queue.pop()
            order = _target_orders(cfg, rng, 1)[0]
            loss = pipe.model.loss(pipe.sequence(node, True, order), cfg.image_loss_weight)
            if cfg.batch_size > 1:
                loss = T.scale(loss, 1.0 / cfg.batch_size)
            val = float(loss.data)
            if not math.isfinite(val):
                raise TrainingError(f"non-finite loss at step {step} (node {node}); last checkpoint kept")
            loss.backward()
            total += val
        scale = warmup_factor(step, cfg)
        for opt, lr in opts:
            opt.step(lr * scale)
        losses.append(total)
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            logger.info("step %d loss %.4f", step + 1, float(np.mean(losses[-cfg.log_every :])))
        if out_dir and cfg.ckpt_every and (step + 1) % cfg.ckpt_every == 0:
            save_pipeline(pipe, out_dir)
    if out_dir:
        save_pipeline(pipe, out_dir)
    return TrainResult(pipe, losses)


def _safe_clip_it(feat, text, embedder):
    if not text.strip():
        return 0.0
    return proxy_clip_it(feat, text, embedder)


@dataclass
class EvalResult:
    report: ScoreReport
    generated: list
    neighbor_scores: list
    generated_scores: list
    per_target_kl: list


def evaluate(pipeline, targets=None, strategy=None, seed=None, temperature=None, embedder=None):
    """Run inference over ``targets`` (default: held-out nodes) and score the outputs.

    Perplexity is the exponentiated mean NLL of the generated words, conditioned on the
    target's own prompt. KL-DV pools neighbor and generated image-text scores over all
    targets.
    """
    cfg = pipeline.cfg
    graph = pipeline.graph
    targets = (pipeline.test_ids or pipeline.train_ids) if targets is None else list(targets)
    seed = cfg.seed if seed is None else seed
    embedder = SharedEmbedder.fit(graph, pipeline.train_ids) if embedder is None else embedder
    from .pipeline import node_seed

    gens = infer_batch(pipeline, targets, strategy, [node_seed(seed, t) for t in targets], temperature)
    i2, it, nll, nbr_scores, per_kl = [], [], [], [], []
    k = pipeline.spec.k_neighbors
    for t, g in zip(targets, gens):
        truth = graph.nodes[t]
        i2.append(proxy_clip_i2(g.image_feat, truth.image_feat))
        it.append(_safe_clip_it(g.image_feat, g.text, embedder))
        if g.text_tokens:
            nll.extend(sequence_nll(pipeline.model, g.text, pipeline.context(t)).tolist())
        nb = [_safe_clip_it(graph.nodes[j].image_feat, graph.nodes[j].text, embedder) for j in pipeline.neighbors(t).members[:k]]
        nbr_scores.extend(nb)
        per_kl.append(kl_dv(nb, [it[-1]]) if nb else float("nan"))
    ppl = math.exp(float(np.mean(nll))) if nll else float("nan")
    report = ScoreReport(
        clip_i2=float(np.mean(i2)),
        perplexity=ppl,
        clip_it=float(np.mean(it)),
        kl_dv=kl_dv(nbr_scores, it),
        n_samples=len(targets),
    )
    return EvalResult(report, gens, nbr_scores, it, per_kl)


def ground_truth_report(pipeline, targets=None, embedder=None):
    """Score the true node contents through the metric path (a harness self-check)."""
    graph = pipeline.graph
    targets = (pipeline.test_ids or pipeline.train_ids) if targets is None else list(targets)
    embedder = SharedEmbedder.fit(graph, pipeline.train_ids) if embedder is None else embedder
    i2 = [proxy_clip_i2(graph.nodes[t].image_feat, graph.nodes[t].image_feat) for t in targets]
    it = [_safe_clip_it(graph.nodes[t].image_feat, graph.nodes[t].text, embedder) for t in targets]
    return ScoreReport(float(np.mean(i2)), float("nan"), float(np.mean(it)), kl_dv(it, it), len(targets))


def write_report(rows, label_cols, out_dir, name="report"):
    """Write ``{name}.txt`` (aligned table) and ``{name}.jsonl`` (one record per row)."""
    os.makedirs(out_dir, exist_ok=True)
    table = format_table(rows, label_cols)
    with open(os.path.join(out_dir, f"{name}.txt"), "w", encoding="utf-8") as fh:
        fh.write(table)
    with open(os.path.join(out_dir, f"{name}.jsonl"), "w", encoding="utf-8") as fh:
        for labels, rep, note in rows:
            if rep is None:
                fh.write(ScoreReport(math.nan, math.nan, math.nan, math.nan, 0).record(**labels, note=note) + "\n")
            else:
                fh.write(rep.record(**labels, note=note) + "\n")
    return table


def run_eval(cfg, pipeline, out_dir=None):
    res = evaluate(pipeline)
    rows = [({"mode": cfg.graph_mode, "strategy": cfg.strategy}, res.report, "")]
    if out_dir:
        table = write_report(rows, ["mode", "strategy"], out_dir, "eval")
        with open(os.path.join(out_dir, "generated.jsonl"), "w", encoding="utf-8") as fh:
            write_generated(res.generated, fh)
    else:
        table = format_table(rows, ["mode", "strategy"])
    return res, table


# ---------------------------------------------------------------- grids

MODALITIES = (Modality.TEXT, Modality.IMAGE, Modality.BOTH)
ORDERS = (Order.TEXT_FIRST, Order.IMAGE_FIRST, Order.INTERLEAVED)
STRATEGIES = (Strategy.TEXT_FIRST, Strategy.IMAGE_FIRST, Strategy.PARALLEL)
NEIGHBOR_SWEEP = (1, 2, 5, 10)


class Cell(NamedTuple):
    modality: Modality
    orders: tuple  # one order for a runnable cell, the invalid orders for a skipped one
    strategy: Strategy
    skipped: bool = False


def design_cells():
    """Rows of the modality x order x inference grid.

    Orders other than text-first need both modalities; for a single modality they are
    reported as one skipped row per inference strategy.
    """
    forced = tuple(o for o in ORDERS if o is not Order.TEXT_FIRST)
    cells = []
    for mod in MODALITIES:
        for order in ORDERS if mod is Modality.BOTH else (Order.TEXT_FIRST,):
            cells.extend(Cell(mod, (order,), s) for s in STRATEGIES)
        if mod is not Modality.BOTH:
            cells.extend(Cell(mod, forced, s, True) for s in STRATEGIES)
    return cells


def _run_cell(cfg, graph, strategies):
    """Train once, evaluate each inference strategy (training does not depend on it)."""
    pipe = train(cfg, graph).pipeline
    return {s: evaluate(pipe, strategy=s).report for s in strategies}


def grid(cfg, graph=None, axes=("design", "ablation", "neighbors"), out_dir=None):
    """Run the requested grids; per-cell failures are recorded, not raised."""
    from .pipeline import load_graph

    graph = load_graph(cfg) if graph is None else graph
    rows = []
    label_cols = ["grid", "modality", "order", "inference", "mode", "ablation", "k"]

    def base_labels(c, grid_name, strategy):
        return {
            "grid": grid_name,
            "modality": c.modality,
            "order": c.order,
            "inference": strategy,
            "mode": c.graph_mode,
            "ablation": c.ablation,
            "k": c.k_neighbors,
        }

    if "design" in axes:
        cells = design_cells()
        done = {}
        for cell in cells:
            c = cfg.replace(modality=cell.modality.value, order=cell.orders[0].value, graph_mode=GraphMode.HARD.value)
            labels = base_labels(c, "design", cell.strategy.value)
            if cell.skipped:
                labels["order"] = "|".join(o.value for o in cell.orders)
                rows.append((labels, None, "skipped: order needs both modalities"))
                continue
            key = (cell.modality, cell.orders[0])
            if key not in done:
                strats = [x.strategy for x in cells if not x.skipped and (x.modality, x.orders[0]) == key]
                try:
                    done[key] = (_run_cell(c, graph, strats), "")
                except Exception as exc:  # keep the grid going
                    done[key] = ({}, f"error: {exc}")
            reports, note = done[key]
            rows.append((labels, reports.get(cell.strategy), note))

    if "ablation" in axes:
        variants = [(GraphMode.NONE, Ablation.FULL), (GraphMode.HARD, Ablation.FULL)]
        variants += [(GraphMode.SOFT, a) for a in Ablation]
        for mode, abl in variants:
            c = cfg.replace(graph_mode=mode.value, ablation=abl.value)
            rows.append(_single(c, graph, "ablation", base_labels))

    if "neighbors" in axes:
        for k in NEIGHBOR_SWEEP:
            c = cfg.replace(k_neighbors=k, top_k=max(cfg.top_k, k))
            rows.append(_single(c, graph, "neighbors", base_labels))

    table = write_report(rows, label_cols, out_dir, "grid") if out_dir else format_table(rows, label_cols)
    return rows, table


def _single(c, graph, grid_name, base_labels):
    labels = base_labels(c, grid_name, c.strategy)
    try:
        return labels, _run_cell(c, graph, [Strategy(c.strategy)])[Strategy(c.strategy)], ""
    except Exception as exc:  # keep the grid going
        return labels, None, f"error: {exc}"


def checkpoint_bytes(out_dir):
    with open(os.path.join(out_dir, CHECKPOINT), "rb") as fh:
        return fh.read()


__all__ = [
    "TrainingError",
    "train",
    "evaluate",
    "ground_truth_report",
    "grid",
    "design_cells",
    "mean_train_loss",
    "save_checkpoint",
]
