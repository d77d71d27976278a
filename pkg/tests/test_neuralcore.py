import numpy as np
import pytest

from bldgraph.neuralcore import (AdamState, Checkpoint, ModelConfig, adam_step, backbone_forward, dropout,
                                 gcn_layer, gcn_normalize, init_params, load_checkpoint, loss_and_gradients,
                                 save_checkpoint, siamese_difference, softmax, weighted_masked_ce)
from bldgraph.neuralcore.checkpoint import CheckpointError
from bldgraph.neuralcore.model import encode_pairs, forward, pair_patches, rescale_embedding


def naive_block(x, w, b):
    """Direct nested-loop 3x3 same convolution, ReLU and 2x2 max-pool on one (S, S, C) image."""
    s, _, cin = x.shape
    cout = w.shape[-1]
    pad = np.zeros((s + 2, s + 2, cin))
    pad[1:-1, 1:-1] = x
    z = np.zeros((s, s, cout))
    for i in range(s):
        for j in range(s):
            for f in range(cout):
                acc = b[f]
                for di in range(3):
                    for dj in range(3):
                        for c in range(cin):
                            acc += pad[i + di, j + dj, c] * w[di, dj, c, f]
                z[i, j, f] = max(acc, 0.0)
    out = np.zeros((s // 2, s // 2, cout))
    for i in range(s // 2):
        for j in range(s // 2):
            out[i, j] = z[2 * i:2 * i + 2, 2 * j:2 * j + 2].reshape(-1, cout).max(axis=0)
    return out


def naive_backbone(params, x):
    h = x
    l = 0
    while f"conv{l}.w" in params:
        h = naive_block(h, params[f"conv{l}.w"], params[f"conv{l}.b"])
        l += 1
    return h.mean(axis=(0, 1))


def test_backbone_micro_config_matches_direct_convolution():
    cfg = ModelConfig(channels=(1, 1), crop_size=4, num_classes=2)
    p = init_params(cfg, 0, np.float64)
    p["conv0.w"][:] = 0
    p["conv0.w"][:, :, 0, 0] = [[1, -2, 0.5], [0, 3, -1], [2, 0, 1]]
    p["conv0.b"][:] = 0.1
    p["conv1.w"][:, :, 0, 0] = [[0.5, 1, -1], [1, 2, 0.25], [-0.5, 1, 1]]
    p["conv1.b"][:] = -0.2
    x = np.zeros((4, 4, 3))
    x[..., 0] = np.arange(16).reshape(4, 4) / 10.0
    emb, _ = backbone_forward(p, x)
    np.testing.assert_allclose(emb[0], naive_backbone(p, x), atol=1e-6)


def test_backbone_random_matches_direct_convolution(rng):
    cfg = ModelConfig(channels=(3, 4), crop_size=8, num_classes=2)
    p = init_params(cfg, 1, np.float64)
    p["conv0.b"] = rng.normal(0, 0.1, 3)
    x = rng.random((2, 8, 8, 3))
    emb, _ = backbone_forward(p, x)
    for i in range(2):
        np.testing.assert_allclose(emb[i], naive_backbone(p, x[i]), atol=1e-10)


def test_backbone_zero_input_and_shape():
    cfg = ModelConfig(channels=(4, 8, 16, 128), crop_size=128)
    p = init_params(cfg, 0)
    emb, _ = backbone_forward(p, np.zeros((128, 128, 3), np.float32))
    assert emb.shape == (1, 128) and not emb.any()
    emb, _ = backbone_forward(p, np.random.default_rng(0).random((128, 128, 3), dtype=np.float32))
    assert emb.shape == (1, 128)
    with pytest.raises(ValueError):
        backbone_forward(p, np.zeros((100, 100, 3)))


def test_default_embedding_dimension():
    assert ModelConfig().embedding_dim == 128


def test_siamese_difference_properties(rng):
    cfg = ModelConfig(channels=(4, 8), crop_size=16)
    p = init_params(cfg, 2, np.float64)
    a, b = rng.random((2, 3, 16, 16, 3))
    d = siamese_difference(p, a, b)
    assert not siamese_difference(p, a, a).any()
    np.testing.assert_array_equal(siamese_difference(p, b, a), -d)
    np.testing.assert_allclose(d, backbone_forward(p, a)[0] - backbone_forward(p, b)[0], atol=1e-7)
    enc, _ = encode_pairs(p, a, b, chunk=2)
    np.testing.assert_allclose(enc, d, atol=1e-12)
    cached, _ = encode_pairs(p, a, b, chunk=2, patches=pair_patches(a, b, 2, np.float64))
    np.testing.assert_allclose(cached, d, atol=1e-12)


def test_rescale_embedding_is_exact(rng):
    cfg = ModelConfig(channels=(4, 8), crop_size=16)
    p = init_params(cfg, 2, np.float64)
    x = rng.random((2, 16, 16, 3))
    np.testing.assert_allclose(backbone_forward(rescale_embedding(p, 3.5), x)[0],
                               3.5 * backbone_forward(p, x)[0], rtol=1e-12)
    with pytest.raises(ValueError):
        rescale_embedding(p, 0.0)


def test_gcn_normalize_examples():
    np.testing.assert_array_equal(gcn_normalize([], [], 3).toarray(), np.eye(3))
    np.testing.assert_allclose(gcn_normalize([(0, 1)], [1.0], 2).toarray(), [[0.5, 0.5], [0.5, 0.5]])
    a = gcn_normalize([(0, 1), (1, 2), (0, 3), (2, 3)], [0.3, 1.0, 0.7, 0.2], 4).toarray()
    np.testing.assert_allclose(a, a.T, atol=1e-9)
    with pytest.raises(IndexError):
        gcn_normalize([(0, 5)], [1.0], 3)


def test_gcn_layer_identity_and_locality(rng):
    h = rng.random((3, 2))
    eye = gcn_normalize([], [], 3)
    np.testing.assert_allclose(gcn_layer(h, eye, np.eye(2), np.zeros(2)), h)
    adj = gcn_normalize([(0, 1)], [1.0], 3)
    w, b = rng.random((2, 4)), rng.random(4)
    out = gcn_layer(h, adj, w, b, "relu")
    np.testing.assert_allclose(out[2], np.maximum(h[2] @ w + b, 0))


def test_gcn_layer_chain_matches_dense_oracle():
    h = np.array([[1.0, 2.0], [0.5, -1.0], [3.0, 0.0]])
    w = np.array([[1.0, -1.0], [0.5, 2.0]])
    b = np.array([0.1, -0.2])
    a = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], float) + np.eye(3)
    dinv = np.diag(1 / np.sqrt(a.sum(1)))
    expect = dinv @ a @ dinv @ h @ w + b
    np.testing.assert_allclose(gcn_layer(h, gcn_normalize([(0, 1), (1, 2)], [1, 1], 3), w, b), expect, atol=1e-6)


def test_dropout(rng):
    h = np.ones((1000, 1000), np.float32)
    assert dropout(h, 0.5, rng, training=False) is h
    assert dropout(h, 0.0, rng, training=True) is h
    out = dropout(h, 0.5, rng, training=True)
    assert abs((out > 0).mean() - 0.5) < 0.01
    assert abs(out.mean() - 1.0) < 0.01
    with pytest.raises(ValueError):
        dropout(h, 1.0, rng, True)


def test_weighted_masked_ce():
    labels = np.array([0, 2, 1])
    mask = np.ones(3, bool)
    assert weighted_masked_ce(np.eye(3)[labels], labels, mask, np.ones(3)) == 0.0
    uniform = np.full((3, 3), 1 / 3)
    assert weighted_masked_ce(uniform, labels, mask, np.ones(3)) == pytest.approx(np.log(3))
    w = np.array([0.5, 1.5, 2.0])
    assert weighted_masked_ce(uniform, labels, mask, 2 * w) == 2 * weighted_masked_ce(uniform, labels, mask, w)
    with pytest.raises(ValueError):
        weighted_masked_ce(uniform, labels, np.zeros(3, bool), w)


def _micro(meta=20, adjacency="graph", dropout_rate=0.5):
    cfg = ModelConfig(channels=(2, 3), crop_size=8, num_classes=2, meta_dim=meta, adjacency=adjacency,
                      dropout=dropout_rate)
    rng = np.random.default_rng(5)
    feats = rng.random((4, 8 * 8 * 3 * 2 + meta))
    adj = gcn_normalize([(0, 1), (1, 2), (2, 3)], [1.0, 0.5, 0.8], 4)
    return cfg, init_params(cfg, 3, np.float64), feats, adj


def _fd_check(cfg, p, feats, adj, eps, **kw):
    labels, mask, cw = np.array([0, 1, 1, 0]), np.array([1, 1, 0, 1], bool), np.array([1.0, 2.0])
    f = lambda q: loss_and_gradients(q, cfg, feats, adj, labels, mask, cw, np.random.default_rng(9), **kw)
    _, grads, _ = f(p)
    worst = 0.0
    for k in p:
        fd = np.zeros_like(p[k])
        for i in np.ndindex(p[k].shape):
            q = dict(p)
            q[k] = p[k].copy()
            q[k][i] += eps
            lp = f(q)[0]
            q[k][i] -= 2 * eps
            fd[i] = (lp - f(q)[0]) / (2 * eps)
        worst = max(worst, np.abs(fd - grads[k]).max() / max(np.abs(fd).max(), np.abs(grads[k]).max(), 1e-12))
    return worst


def test_gradients_identity_adjacency_without_meta():
    cfg, p, feats, adj = _micro(meta=0, adjacency="identity", dropout_rate=0.0)
    assert _fd_check(cfg, p, feats, gcn_normalize([], [], 4), 1e-5) < 1e-6


def test_gradients_with_input_shift_and_scale():
    cfg, p, feats, adj = _micro(dropout_rate=0.0)
    width = cfg.embedding_dim + cfg.meta_dim
    shift = np.linspace(-0.5, 0.5, width)
    scale = np.linspace(0.5, 3.0, width)
    assert _fd_check(cfg, p, feats, adj, 1e-5, shift=shift, scale=scale) < 1e-6


def test_gradients_zero_signal():
    cfg = ModelConfig(channels=(2,), crop_size=2, num_classes=2, dropout=0.0)
    p = init_params(cfg, 0, np.float64)
    p["gcn2.w"][:] = 0
    p["gcn2.b"][:] = [60.0, -60.0]
    feats = np.random.default_rng(0).random((3, 2 * 2 * 2 * 3))
    adj = gcn_normalize([(0, 1)], [1.0], 3)
    loss, grads, _ = loss_and_gradients(p, cfg, feats, adj, np.zeros(3, int), np.ones(3, bool), np.ones(2))
    assert loss < 1e-20
    assert np.sqrt(sum((g ** 2).sum() for g in grads.values())) < 1e-6


def test_forward_probabilities_are_normalised(rng):
    cfg, p, feats, adj = _micro()
    probs, h1 = forward(p, cfg, feats, adj)
    np.testing.assert_allclose(probs.sum(1), 1.0)
    assert h1.shape == (4, 32)


def test_input_shift_is_constant_offset(rng):
    cfg, p, feats, adj = _micro(dropout_rate=0.0)
    labels, mask, cw = np.array([0, 1, 1, 0]), np.ones(4, bool), np.ones(2)
    base = loss_and_gradients(p, cfg, feats, adj, labels, mask, cw)
    shift = rng.normal(size=cfg.embedding_dim + cfg.meta_dim)
    moved = forward(p, cfg, feats, adj, shift=shift)[0]
    x_shifted = feats.copy()
    x_shifted[:, -20:] -= shift[-20:]
    p2 = dict(p)
    p2["gcn1.b"] = p["gcn1.b"] - shift[:-20] @ p["gcn1.w"][:-20]
    # only the meta part can be folded into the features; the embedding part goes into the bias,
    # which is exact for the identity adjacency but not for a normalised graph operator
    eye = gcn_normalize([], [], 4)
    np.testing.assert_allclose(forward(p, cfg, feats, eye, shift=shift)[0],
                               forward(p2, cfg, x_shifted, eye)[0], atol=1e-10)
    assert not np.allclose(moved, forward(p, cfg, feats, adj)[0])
    # the gradient of a fixed shift is not a parameter: the parameter set is unchanged
    assert set(base[1]) == set(p)


def test_adam_step():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    st = AdamState.zeros_like(p)
    same, _ = adam_step(p, {"w": np.zeros(3)}, st)
    np.testing.assert_array_equal(same["w"], p["w"])
    g = {"w": np.array([0.3, -5.0, 1e-3])}
    new, st1 = adam_step(p, g, st)
    delta = np.abs(new["w"] - p["w"])
    assert np.all((delta >= 0.99 * st.lr) & (delta <= st.lr))
    assert np.all(np.sign(p["w"] - new["w"]) == np.sign(g["w"]))
    again, st2 = adam_step(p, g, st)
    np.testing.assert_array_equal(again["w"], new["w"])
    assert st1.t == st2.t == 1


def test_softmax_stable():
    z = np.array([[1000.0, 1000.0], [-1000.0, 0.0]])
    np.testing.assert_allclose(softmax(z), [[0.5, 0.5], [0.0, 1.0]])


def test_checkpoint_round_trip(tmp_path):
    cfg, p, _, _ = _micro()
    p32 = {k: v.astype(np.float32) for k, v in p.items()}
    _, st = adam_step(p32, {k: np.ones_like(v) for k, v in p32.items()}, AdamState.zeros_like(p32))
    shift = np.linspace(-1, 1, cfg.embedding_dim + cfg.meta_dim).astype(np.float32)
    ck = Checkpoint(cfg, p32, st, 7, {"metric": "f1"}, {"note": 1}, {"input_shift": shift})
    save_checkpoint(ck, tmp_path / "a.bldc")
    back = load_checkpoint(tmp_path / "a.bldc")
    assert back.config == cfg and back.epoch == 7 and back.best == {"metric": "f1"}
    assert np.array_equal(back.buffers["input_shift"], shift)
    for k in p32:
        assert np.array_equal(back.params[k], p32[k])
        assert np.array_equal(back.adam.m[k], st.m[k]) and np.array_equal(back.adam.v[k], st.v[k])
    save_checkpoint(back, tmp_path / "b.bldc")
    assert (tmp_path / "a.bldc").read_bytes() == (tmp_path / "b.bldc").read_bytes()


def test_checkpoint_errors(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "none.bldc")
    (tmp_path / "x.bldc").write_bytes(b"BLDG\x01\x00")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x.bldc")


def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(meta_dim=5)
    with pytest.raises(ValueError):
        ModelConfig(channels=(4, 8, 16, 32, 64, 128, 256, 512), crop_size=128)
    assert ModelConfig.from_json(ModelConfig().to_json()) == ModelConfig()
