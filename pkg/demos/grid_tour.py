"""A miniature version of the full experiment grid.

Tiny models and few steps, so the numbers are noise; the point is the table layout
(skipped cells, ablation flags, the neighbor sweep). Writes ``grid.txt`` and
``grid.jsonl`` under ``runs/grid_tour``.
"""

from mmagen import RunConfig
from mmagen.experiment import grid

cfg = RunConfig(
    n_nodes=48, n_clusters=4, d_img=16, d_model=16, n_heads=2, n_layers=1,
    aligner_d_model=16, aligner_heads=2, node_layers=1, graph_layers=1,
    image_codes=16, steps=60, lr=1e-3, log_every=0, max_new=12,
).validate()

rows, table = grid(cfg, out_dir="runs/grid_tour")
print(table)
print(f"{len(rows)} rows, {sum(r[1] is None for r in rows)} without scores")
