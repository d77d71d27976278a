"""Siamese encoder + two-layer GCN node classifier with hand-written backprop."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .backbone import (backbone_backward, backbone_forward, encode_channel_major, first_layer_patches,
                       to_channel_major)

ACTIVATIONS = ("relu", "softmax", "none")
LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class ModelConfig:
    channels: tuple[int, ...] = (16, 32, 64, 128)
    meta_dim: int = 0
    hidden: int = 32
    num_classes: int = 3
    dropout: float = 0.5
    crop_size: int = 128
    adjacency: str = "graph"  # "identity" removes neighbourhood aggregation

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.num_classes < 2:
            raise ValueError("need at least two output classes")
        if not 0 <= self.dropout < 1:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.meta_dim not in (0, 20):
            raise ValueError("meta_dim must be 0 or 20")
        if not self.channels or self.crop_size % (2 ** len(self.channels)):
            raise ValueError(f"crop size {self.crop_size} must be divisible by 2^{len(self.channels)}")
        if self.adjacency not in ("graph", "identity"):
            raise ValueError(f"unknown adjacency mode {self.adjacency!r}")

    @property
    def embedding_dim(self) -> int:
        return self.channels[-1]

    def to_json(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_json(cls, d) -> "ModelConfig":
        return cls(**{**d, "channels": tuple(d["channels"])})


def init_params(cfg: ModelConfig, seed: int | np.random.Generator = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    """He-normal conv kernels, Glorot-uniform GCN weights, zero biases."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    params = {}
    cin = 3
    for l, cout in enumerate(cfg.channels):
        params[f"conv{l}.w"] = rng.normal(0.0, np.sqrt(2.0 / (9 * cin)), (3, 3, cin, cout)).astype(dtype)
        params[f"conv{l}.b"] = np.zeros(cout, dtype=dtype)
        cin = cout
    dims = [(cfg.embedding_dim + cfg.meta_dim, cfg.hidden), (cfg.hidden, cfg.num_classes)]
    for l, (a, b) in enumerate(dims, start=1):
        lim = np.sqrt(6.0 / (a + b))
        params[f"gcn{l}.w"] = rng.uniform(-lim, lim, (a, b)).astype(dtype)
        params[f"gcn{l}.b"] = np.zeros(b, dtype=dtype)
    return params


def rescale_embedding(params, factor: float) -> dict[str, np.ndarray]:
    """Scale the last conv block so every embedding is multiplied by ``factor`` (> 0).

    Exact because ReLU, max-pool and average-pool are positively homogeneous.
    """
    if not factor > 0:
        raise ValueError("embedding scale factor must be positive")
    last = sum(1 for k in params if k.startswith("conv") and k.endswith(".w")) - 1
    out = dict(params)
    for k in (f"conv{last}.w", f"conv{last}.b"):
        out[k] = (params[k] * factor).astype(params[k].dtype)
    return out


# -- graph operator ----------------------------------------------------------

def gcn_normalize(edges, weights, n: int) -> sp.csr_matrix:
    """Renormalised adjacency D^-1/2 (A + I) D^-1/2 with edge weights in A."""
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if len(e) and (e.min() < 0 or e.max() >= n):
        raise IndexError(f"edge index out of range for {n} nodes")
    if np.any(w <= 0):
        raise ValueError("edge weights must be positive")
    rows = np.concatenate([e[:, 0], e[:, 1], np.arange(n)])
    cols = np.concatenate([e[:, 1], e[:, 0], np.arange(n)])
    vals = np.concatenate([w, w, np.ones(n)])
    a = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    d = np.asarray(a.sum(axis=1)).ravel()
    s = sp.diags(1.0 / np.sqrt(d))
    return (s @ a @ s).tocsr()


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def gcn_layer(h, adj, w, b, activation: str = "none"):
    if h.shape[1] != w.shape[0] or w.shape[1] != np.shape(b)[-1] or adj.shape != (h.shape[0], h.shape[0]):
        raise ValueError(f"shape mismatch: H {h.shape}, W {w.shape}, b {np.shape(b)}, A {adj.shape}")
    z = np.asarray(adj @ (h @ w), dtype=h.dtype) + b
    if activation == "relu":
        return np.maximum(z, 0)
    if activation == "softmax":
        return softmax(z)
    if activation == "none":
        return z
    raise ValueError(f"unknown activation {activation!r}")


def dropout_mask(shape, rate: float, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    if rate == 0:
        return np.ones(shape, dtype=dtype)
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / np.asarray(1.0 - rate, dtype=dtype)


def dropout(h: np.ndarray, rate: float, rng: np.random.Generator, training: bool) -> np.ndarray:
    """Inverted dropout; identity at inference or when ``rate == 0``."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0:
        return h
    return h * dropout_mask(h.shape, rate, rng, h.dtype.type)


def weighted_masked_ce(probs, labels, mask, class_weights) -> float:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("loss mask selects no nodes")
    y = np.asarray(labels)[mask]
    p = np.asarray(probs, dtype=np.float64)[mask, y]
    w = np.asarray(class_weights, dtype=np.float64)[y]
    return float(-(w * np.log(np.maximum(p, LOG_FLOOR))).sum() / mask.sum())


def split_inputs(features: np.ndarray, crop_size: int):
    m = crop_size * crop_size * 3
    pre = features[:, :m].reshape(-1, crop_size, crop_size, 3)
    post = features[:, m:2 * m].reshape(-1, crop_size, crop_size, 3)
    meta = features[:, 2 * m:]
    return pre, post, meta


def check_features(cfg: ModelConfig, features: np.ndarray) -> None:
    need = 2 * cfg.crop_size ** 2 * 3
    have = features.shape[1]
    if have not in (need, need + 20) or (cfg.meta_dim and have != need + cfg.meta_dim):
        raise ValueError(f"feature dimension {have} does not fit model config "
                         f"(crop {cfg.crop_size}, meta {cfg.meta_dim})")


def adjacency_for(cfg: ModelConfig, edges, weights, n: int) -> sp.csr_matrix:
    if cfg.adjacency == "identity":
        return sp.identity(n, format="csr")
    return gcn_normalize(edges, weights, n)


# -- forward / backward ------------------------------------------------------

@dataclass
class ForwardCache:
    backbone: list = field(default_factory=list)  # (start, stop, cache) per chunk
    x0: Optional[np.ndarray] = None
    m1: Optional[np.ndarray] = None
    z1: Optional[np.ndarray] = None
    h1d: Optional[np.ndarray] = None
    m2: Optional[np.ndarray] = None


def siamese_difference(params, pre: np.ndarray, post: np.ndarray) -> np.ndarray:
    """Embedding of the pre crop minus embedding of the post crop (shared weights)."""
    a, _ = backbone_forward(params, pre)
    b, _ = backbone_forward(params, post)
    return a - b


def _pair_batch(pre, post, s, e, dtype):
    return to_channel_major(np.concatenate([pre[s:e], post[s:e]]).astype(dtype, copy=False))


def pair_patches(pre, post, chunk: int = 16, dtype=np.float32) -> list[np.ndarray]:
    """First-layer patches for every chunk of node pairs.

    The crops never change during training, so computing these once saves
    the most memory-bound step of every epoch. Costs 27 floats per pixel.
    """
    return [first_layer_patches(_pair_batch(pre, post, s, min(s + chunk, len(pre)), dtype))
            for s in range(0, len(pre), chunk)]


def encode_pairs(params, pre, post, chunk: int = 16, keep_cache: bool = False, patches=None):
    """Siamese differences for all nodes, processed in chunks of node pairs."""
    n = len(pre)
    dtype = params["conv0.w"].dtype
    out, caches = [], []
    for i, s in enumerate(range(0, n, chunk)):
        e = min(s + chunk, n)
        if patches is None:
            emb, cache = encode_channel_major(params, _pair_batch(pre, post, s, e, dtype), keep_cache)
        else:
            emb, cache = encode_channel_major(params, None, keep_cache, patches[i], 2 * (e - s))
        out.append(emb[: e - s] - emb[e - s:])
        if keep_cache:
            caches.append((s, e, cache))
    return np.concatenate(out), caches


def gcn_input(cfg: ModelConfig, diff, meta, dtype=np.float32) -> np.ndarray:
    """[diff | meta] as fed to the first GCN layer."""
    x0 = diff.astype(dtype, copy=False)
    if cfg.meta_dim:
        x0 = np.concatenate([x0, np.asarray(meta[:, : cfg.meta_dim], dtype=dtype)], axis=1)
    return x0


def gcn_head(params, cfg: ModelConfig, diff, meta, adj, rng=None, training=False, cache=None, shift=None,
             scale=None):
    """Two GCN layers on ([diff | meta] - shift) * scale; returns (probs, first-layer activations).

    ``shift`` and ``scale`` are fixed per-column vectors (no gradient);
    :func:`bldgraph.training.fit` derives them from the inputs at
    initialisation.
    """
    dtype = params["gcn1.w"].dtype
    x0 = gcn_input(cfg, diff, meta, dtype)
    if shift is not None:
        x0 = x0 - np.asarray(shift, dtype=dtype)
    if scale is not None:
        x0 = x0 * np.asarray(scale, dtype=dtype)
    if training and cfg.dropout > 0:
        m1 = dropout_mask(x0.shape, cfg.dropout, rng, dtype.type)
    else:
        m1 = None
    x0d = x0 if m1 is None else x0 * m1
    z1 = np.asarray(adj @ (x0d @ params["gcn1.w"]), dtype=dtype) + params["gcn1.b"]
    h1 = np.maximum(z1, 0)
    m2 = dropout_mask(h1.shape, cfg.dropout, rng, dtype.type) if m1 is not None else None
    h1d = h1 if m2 is None else h1 * m2
    z2 = np.asarray(adj @ (h1d @ params["gcn2.w"]), dtype=dtype) + params["gcn2.b"]
    probs = softmax(z2)
    if cache is not None:
        cache.x0, cache.m1, cache.z1, cache.h1d, cache.m2 = x0d, m1, z1, h1d, m2
    return probs, h1


def forward(params, cfg: ModelConfig, features, adj, rng=None, training=False, chunk=16, patches=None,
            shift=None, scale=None):
    """Class probabilities (n, K) and first-GCN-layer activations (n, hidden)."""
    check_features(cfg, features)
    pre, post, meta = split_inputs(features, cfg.crop_size)
    diff, _ = encode_pairs(params, pre, post, chunk, patches=patches)
    return gcn_head(params, cfg, diff, meta, adj, rng, training, shift=shift, scale=scale)


def loss_and_gradients(params, cfg: ModelConfig, features, adj, labels, mask, class_weights,
                       rng=None, training=True, chunk=16, patches=None, shift=None, scale=None):
    """Masked weighted cross-entropy and its exact gradient for every parameter.

    Dropout masks are drawn once from ``rng``; re-seeding ``rng`` reproduces
    them. ``patches`` optionally supplies :func:`pair_patches` output for
    the same ``chunk``. Also returns the siamese differences.
    """
    check_features(cfg, features)
    pre, post, meta = split_inputs(features, cfg.crop_size)
    diff, bcaches = encode_pairs(params, pre, post, chunk, keep_cache=True, patches=patches)
    cache = ForwardCache()
    probs, _ = gcn_head(params, cfg, diff, meta, adj, rng, training, cache, shift, scale)
    loss = weighted_masked_ce(probs, labels, mask, class_weights)

    mask = np.asarray(mask, dtype=bool)
    labels = np.asarray(labels)
    n_mask = mask.sum()
    dtype = probs.dtype
    idx = np.flatnonzero(mask)
    y = labels[idx]
    w = np.asarray(class_weights, dtype=np.float64)[y]
    alive = probs[idx, y] >= LOG_FLOOR  # clamped log has zero slope
    dz2 = np.zeros_like(probs)
    coef = (w * alive / n_mask).astype(dtype)
    dz2[idx] = probs[idx] * coef[:, None]
    dz2[idx, y] -= coef

    grads = {k: np.zeros_like(v) for k, v in params.items()}
    ah1 = np.asarray(adj @ cache.h1d, dtype=dtype)
    grads["gcn2.w"] = ah1.T @ dz2
    grads["gcn2.b"] = dz2.sum(axis=0)
    dh1 = np.asarray(adj @ (dz2 @ params["gcn2.w"].T), dtype=dtype)
    if cache.m2 is not None:
        dh1 *= cache.m2
    dz1 = np.where(cache.z1 > 0, dh1, 0).astype(dtype)
    ax0 = np.asarray(adj @ cache.x0, dtype=dtype)
    grads["gcn1.w"] = ax0.T @ dz1
    grads["gcn1.b"] = dz1.sum(axis=0)
    dx0 = np.asarray(adj @ (dz1 @ params["gcn1.w"].T), dtype=dtype)
    if cache.m1 is not None:
        dx0 *= cache.m1
    ddiff = dx0[:, : cfg.embedding_dim]
    if scale is not None:
        ddiff = ddiff * np.asarray(scale[: cfg.embedding_dim], dtype=dtype)
    for s, e, bc in bcaches:
        demb = np.concatenate([ddiff[s:e], -ddiff[s:e]])
        backbone_backward(params, bc, demb, grads)
    return loss, grads, diff
