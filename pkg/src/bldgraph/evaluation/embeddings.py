"""Per-node embedding export for external visualisation."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from ..graphbuild import BuildingGraph
from ..neuralcore import Checkpoint


def embedding_table(graph: BuildingGraph, ck: Checkpoint) -> tuple[list[str], list[list]]:
    """Header and rows: id, first-GCN-layer activations (inference mode), true and predicted label."""
    from ..training import node_embeddings
    h1, probs = node_embeddings(graph, ck)
    pred = probs.argmax(axis=1)
    header = ["id"] + [f"h{j}" for j in range(h1.shape[1])] + ["label", "predicted"]
    rows = [[graph.ids[i]] + [repr(float(v)) for v in h1[i]] + [int(graph.labels[i]), int(pred[i])]
            for i in range(graph.n)]
    return header, rows


def export_embeddings(graph: BuildingGraph, ck: Checkpoint, path: str | Path) -> Path:
    """Write the embedding table as CSV (unlabelled nodes carry label -1)."""
    header, rows = embedding_table(graph, ck)
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def read_embeddings(path: str | Path):
    """(ids, activations (n, hidden), labels, predictions) from an exported CSV."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    body = rows[1:]
    ids = [r[0] for r in body]
    h = np.array([[float(v) for v in r[1:-2]] for r in body]).reshape(len(body), -1)
    return ids, h, np.array([int(r[-2]) for r in body]), np.array([int(r[-1]) for r in body])
