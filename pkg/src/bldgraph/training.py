"""Full-graph semi-supervised training with per-epoch model selection."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .evaluation.metrics import METRICS, REPORT_SPLITS, MetricsReport, confusion, macro_metrics, metrics_report
from .graphbuild import DEFAULT_FRACTIONS, BuildingGraph
from .neuralcore import AdamState, Checkpoint, ModelConfig, adam_step, adjacency_for, init_params
from .neuralcore.model import (check_features, encode_pairs, gcn_head, gcn_input, loss_and_gradients,
                               pair_patches, rescale_embedding, split_inputs)

log = logging.getLogger(__name__)

WEIGHT_MODES = ("inverse-frequency", "none")


class TrainingError(RuntimeError):
    pass


class DivergenceError(TrainingError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    fractions: tuple[float, float, float] = DEFAULT_FRACTIONS
    class_weights: str = "inverse-frequency"
    selection: str = "f1"  # any of METRICS, measured on the test split
    chunk: int = 16  # node pairs encoded per backbone batch
    patch_cache_mb: float = 1536.0  # first-layer patch cache budget; 0 disables it
    calibrate: bool = True  # data-dependent init: unit RMS siamese differences at epoch 0
    center: bool = True  # subtract the epoch-0 node mean of the GCN input (a fixed buffer)
    scale_meta: bool = False  # divide each meta column by its epoch-0 node standard deviation

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.class_weights not in WEIGHT_MODES:
            raise ValueError(f"class_weights must be one of {WEIGHT_MODES}")
        if self.selection not in METRICS:
            raise ValueError(f"selection metric must be one of {METRICS}")
        if self.chunk < 1:
            raise ValueError("chunk must be >= 1")

    def to_json(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_json()
        d["fractions"] = list(self.fractions)
        return d


@dataclass
class History:
    loss: list[float] = field(default_factory=list)
    test: list[dict[str, float]] = field(default_factory=list)
    selected: int = -1

    def __len__(self) -> int:
        return len(self.loss)

    def lines(self) -> list[str]:
        return [json.dumps({"epoch": e, "loss": l, "test": t, "selected": e == self.selected}, sort_keys=True)
                for e, (l, t) in enumerate(zip(self.loss, self.test))]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(s + "\n" for s in self.lines()))

    @classmethod
    def load(cls, path: str | Path) -> "History":
        h = cls()
        for line in Path(path).read_text().splitlines():
            d = json.loads(line)
            h.loss.append(d["loss"])
            h.test.append(d["test"])
            if d["selected"]:
                h.selected = d["epoch"]
        return h


def class_weights(labels, train_mask, k: int, mode: str = "inverse-frequency") -> np.ndarray:
    """w_c = n_train / (K * n_c) over the labelled training nodes; all ones for ``mode="none"``."""
    if mode == "none":
        return np.ones(k)
    y = np.asarray(labels)[np.asarray(train_mask, dtype=bool)]
    counts = np.bincount(y, minlength=k)[:k] if len(y) else np.zeros(k, dtype=int)
    if np.any(counts == 0):
        missing = [c for c in range(k) if counts[c] == 0]
        raise TrainingError(f"classes {missing} have no training nodes")
    return len(y) / (k * counts.astype(np.float64))


def _check_graph(graph: BuildingGraph, model: ModelConfig) -> None:
    if model.num_classes != graph.num_classes:
        raise TrainingError(f"model has {model.num_classes} classes, graph {graph.num_classes}")
    if model.crop_size != graph.crop_size:
        raise TrainingError(f"model crop size {model.crop_size} != graph crop size {graph.crop_size}")
    if model.meta_dim and graph.meta_dim != model.meta_dim:
        raise TrainingError(f"model expects {model.meta_dim} meta features, graph has {graph.meta_dim}")
    check_features(model, graph.features)


class _Encoder:
    """Siamese differences for one graph, reusing cached first-layer patches."""

    def __init__(self, graph: BuildingGraph, cfg: TrainConfig):
        self.features = graph.features
        self.pre, self.post, self.meta = split_inputs(graph.features, graph.crop_size)
        self.chunk = cfg.chunk
        need = graph.n * 2 * graph.crop_size ** 2 * 27 * 4 / 2 ** 20
        self.patches = pair_patches(self.pre, self.post, cfg.chunk) if need <= cfg.patch_cache_mb else None

    def loss_and_gradients(self, params, model, adj, labels, mask, weights, rng, shift, scale):
        return loss_and_gradients(params, model, self.features, adj, labels, mask, weights, rng,
                                  training=True, chunk=self.chunk, patches=self.patches, shift=shift, scale=scale)

    def diff(self, params):
        return encode_pairs(params, self.pre, self.post, self.chunk, patches=self.patches)[0]


def _calibration_factor(diff: np.ndarray) -> float:
    """1 / RMS of the centred differences; 1 when they carry no spread at all."""
    rms = float(np.sqrt(np.mean((diff - diff.mean(axis=0)) ** 2, dtype=np.float64)))
    return 1.0 / rms if rms > 1e-12 else 1.0


def _meta_scale(model: ModelConfig, meta: np.ndarray) -> Optional[np.ndarray]:
    """Ones for the embedding columns, 1 / node standard deviation for each meta column.

    Constant meta columns keep a scale of one.
    """
    if not model.meta_dim:
        return None
    sd = meta[:, : model.meta_dim].std(axis=0, dtype=np.float64)
    inv = np.where(sd > 1e-12, 1.0 / np.where(sd > 1e-12, sd, 1.0), 1.0)
    return np.concatenate([np.ones(model.embedding_dim), inv]).astype(np.float32)


def _infer(params, model, diff, meta, adj, shift=None, scale=None):
    return gcn_head(params, model, diff, meta, adj, shift=shift, scale=scale)


def fit(graph: BuildingGraph, cfg: TrainConfig, progress: Optional[Callable[[int, float, dict], None]] = None
        ) -> tuple[Checkpoint, History]:
    """Train on the graph's train split, selecting the epoch with the best test metric.

    Without test nodes there is nothing to select on and the final epoch is
    kept (its history entries carry empty metric dicts). Every epoch runs one full-graph forward/backward pass and one Adam step.
    The test split is then scored at the updated parameters; the backbone
    pass that starts the next epoch doubles as that evaluation pass.
    """
    model = cfg.model
    _check_graph(graph, model)
    train = graph.mask("train")
    test = graph.mask("test")
    if not train.any():
        raise TrainingError("graph has no training nodes")
    if not test.any():
        log.warning("graph has no test nodes; keeping the final epoch")
    k = graph.num_classes
    labels = np.where(graph.labels >= 0, graph.labels, 0)
    weights = class_weights(graph.labels, train, k, cfg.class_weights)
    adj = adjacency_for(model, graph.edges, graph.weights, graph.n).astype(np.float32)

    init_seed, drop_seed = np.random.SeedSequence(cfg.seed).spawn(2)
    params = init_params(model, np.random.default_rng(init_seed))
    drop_rng = np.random.default_rng(drop_seed)
    state = AdamState.zeros_like(params)

    enc = _Encoder(graph, cfg)
    shift = None
    if cfg.calibrate or cfg.center:
        diff = enc.diff(params)
        if cfg.calibrate:
            factor = _calibration_factor(diff)
            params = rescale_embedding(params, factor)
            diff = diff * np.float32(factor)
        if cfg.center:
            shift = gcn_input(model, diff, enc.meta).mean(axis=0, dtype=np.float64).astype(np.float32)
    scale = _meta_scale(model, enc.meta) if cfg.scale_meta else None
    buffers = {k: v for k, v in (("input_shift", shift), ("input_scale", scale)) if v is not None}
    hist = History()
    best = None
    t0 = time.perf_counter()

    def score(p, diff):
        if not test.any():
            return {}
        probs, _ = _infer(p, model, diff, enc.meta, adj, shift, scale)
        pred = probs.argmax(axis=1)
        return macro_metrics(confusion(pred[test], graph.labels[test], k))

    for epoch in range(cfg.epochs):
        loss, grads, diff = enc.loss_and_gradients(params, model, adj, labels, train, weights, drop_rng, shift, scale)
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise DivergenceError(f"non-finite loss or gradient at epoch {epoch} (loss={loss}); "
                                  "lower the learning rate or check the input features")
        if epoch > 0:
            # diff was computed with the parameters produced by the previous epoch
            hist.test.append(score(params, diff))
            best = _track(hist, epoch - 1, cfg, prev, best)
        params, state = adam_step(params, grads, state)
        prev = (params, state)
        hist.loss.append(float(loss))
        if progress is not None and epoch > 0:
            progress(epoch - 1, hist.loss[epoch - 1], hist.test[-1])
    hist.test.append(score(params, enc.diff(params)))
    best = _track(hist, cfg.epochs - 1, cfg, prev, best)
    if progress is not None:
        progress(cfg.epochs - 1, hist.loss[-1], hist.test[-1])
    log.info("trained %d epochs in %.1fs; selected epoch %d", cfg.epochs, time.perf_counter() - t0,
             hist.selected)
    sel_epoch, (bp, bs) = best
    ck = Checkpoint(model, bp, bs, sel_epoch, {"test": hist.test[sel_epoch], "metric": cfg.selection},
                    {"train": cfg.to_json()}, buffers)
    return ck, hist


def _track(hist: History, epoch: int, cfg: TrainConfig, snapshot, best):
    """Keep the first epoch reaching the highest selection metric (the latest without a test split)."""
    if not hist.test[epoch]:
        hist.selected = epoch
        return epoch, snapshot
    value = hist.test[epoch][cfg.selection]
    if best is None or value > hist.test[best[0]][cfg.selection]:
        hist.selected = epoch
        return epoch, snapshot
    return best


def predict(graph: BuildingGraph, ck: Checkpoint, chunk: int = 16):
    """Per-node predicted class (argmax, ties to the lowest index) and class probabilities."""
    probs, _ = _forward(graph, ck, chunk)
    return probs.argmax(axis=1), probs


def node_embeddings(graph: BuildingGraph, ck: Checkpoint, chunk: int = 16):
    """First GCN layer activations at inference, plus probabilities."""
    probs, h1 = _forward(graph, ck, chunk)
    return h1, probs


def _forward(graph: BuildingGraph, ck: Checkpoint, chunk: int):
    try:
        _check_graph(graph, ck.config)
    except (TrainingError, ValueError) as err:
        raise ValueError(f"checkpoint does not fit graph: {err}") from err
    pre, post, meta = split_inputs(graph.features, graph.crop_size)
    adj = adjacency_for(ck.config, graph.edges, graph.weights, graph.n).astype(np.float32)
    diff, _ = encode_pairs(ck.params, pre, post, chunk)
    return _infer(ck.params, ck.config, diff, meta, adj, ck.buffers.get("input_shift"), ck.buffers.get("input_scale"))


def evaluate(graph: BuildingGraph, ck: Checkpoint, splits: Sequence[str] = REPORT_SPLITS) -> MetricsReport:
    pred, _ = predict(graph, ck)
    report = metrics_report(pred, graph.labels, {s: graph.mask(s) for s in splits}, graph.num_classes)
    report.extra = {"selected_epoch": ck.epoch}
    return report


def run_experiment(source, cfg: TrainConfig, graph_cfg=None, meta: bool = False, progress=None):
    """Build the graph (unless ``source`` already is one), fit, and report on all four node sets.

    ``source`` may be a :class:`BuildingGraph`, a synthetic ``Scenario`` or
    ``CityConfig``, or a directory written by :func:`bldgraph.synth.write_scenario`.
    Returns (report, checkpoint, history, graph).
    """
    if not isinstance(source, BuildingGraph):
        from .pipeline import graph_from_source
        source = graph_from_source(source, graph_cfg, meta=meta, fractions=cfg.fractions, seed=cfg.seed)
    ck, hist = fit(source, cfg, progress)
    return evaluate(source, ck), ck, hist, source


__all__ = ["TrainConfig", "History", "TrainingError", "DivergenceError", "class_weights", "fit", "predict",
           "evaluate", "node_embeddings", "run_experiment"]
