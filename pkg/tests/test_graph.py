"""Dilated KNN, max-relative aggregation, node gating, and the full block."""

import numpy as np
import pytest

from graphskip.errors import GraphError, ShapeError
from graphskip.gradcheck import grad_check
from graphskip.graph import (GnnBlock, GnnStage, build_dilated_knn,
                             graph_to_json, max_relative, mrconv,
                             node_attention)
from graphskip.tensor import Tensor


def t64(data, rg=False):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=rg)


def knn_oracle(feats, k, d):
    """Per-node python loop: sort all j != i by (distance, index), stride by d."""
    c, n = feats.shape
    rows = []
    for i in range(n):
        cand = []
        for j in range(n):
            if j == i:
                continue
            dist = sum((feats[ci][i] - feats[ci][j]) ** 2 for ci in range(c))
            cand.append((dist, j))
        cand.sort()
        rows.append([cand[r * d][1] for r in range(k)])
    return np.asarray(rows)


def test_knn_three_points():
    feats = np.array([[0.0, 1.0, 10.0]])
    g = build_dilated_knn(feats, k=1)
    np.testing.assert_array_equal(g.neighbors, [[1], [0], [1]])


def test_knn_all_identical_tiebreak():
    feats = np.ones((3, 6))
    g = build_dilated_knn(feats, k=3)
    np.testing.assert_array_equal(g.neighbors[0], [1, 2, 3])
    np.testing.assert_array_equal(g.neighbors[2], [0, 1, 3])
    np.testing.assert_array_equal(g.neighbors[5], [0, 1, 2])


def test_knn_matches_bruteforce_default_k():
    rng = np.random.default_rng(0)
    feats = rng.standard_normal((4, 64))
    g = build_dilated_knn(feats, k=11)
    np.testing.assert_array_equal(g.neighbors, knn_oracle(feats, 11, 1))


@pytest.mark.parametrize("d", [2, 3])
def test_knn_dilated_matches_bruteforce(d):
    rng = np.random.default_rng(d)
    for _ in range(10):
        n = int(rng.integers(20, 50))
        k = int(rng.integers(1, min(6, (n - 1) // d) + 1))
        feats = rng.standard_normal((3, n))
        g = build_dilated_knn(feats, k=k, dilation=d)
        np.testing.assert_array_equal(g.neighbors, knn_oracle(feats, k, d))


def test_knn_duplicate_ties_match_bruteforce():
    rng = np.random.default_rng(5)
    for _ in range(20):
        n = int(rng.integers(8, 24))
        feats = rng.integers(0, 3, size=(2, n)).astype(np.float64)
        k = int(rng.integers(1, 5))
        g = build_dilated_knn(feats, k=k)
        np.testing.assert_array_equal(g.neighbors, knn_oracle(feats, k, 1))


def test_knn_scale_invariance():
    rng = np.random.default_rng(6)
    feats = rng.standard_normal((4, 30))
    a = build_dilated_knn(feats, k=5).neighbors
    b = build_dilated_knn(4.0 * feats, k=5).neighbors
    np.testing.assert_array_equal(a, b)


def test_knn_row_invariants():
    rng = np.random.default_rng(7)
    feats = rng.standard_normal((3, 40))
    g = build_dilated_knn(feats, k=7, dilation=2)
    for i in range(40):
        row = g.neighbors[i]
        assert len(set(row.tolist())) == 7
        assert i not in row
        assert np.all(row >= 0) and np.all(row < 40)


def test_knn_preconditions():
    feats = np.zeros((2, 10))
    with pytest.raises(GraphError):
        build_dilated_knn(feats, k=5, dilation=2)
    with pytest.raises(GraphError):
        build_dilated_knn(feats, k=0)
    bad = feats.copy()
    bad[0, 0] = np.nan
    with pytest.raises(GraphError):
        build_dilated_knn(bad, k=2)
    with pytest.raises(ShapeError):
        build_dilated_knn(np.zeros((2, 3, 4)), k=1)


# -- max_relative / mrconv ---------------------------------------------------

def test_max_relative_identical_features_zero():
    x = t64(np.ones((3, 8)))
    g = build_dilated_knn(x.numpy(), k=3)
    assert np.all(max_relative(x, g).numpy() == 0)


def test_max_relative_loop_oracle():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((4, 12))
    g = build_dilated_knn(x, k=3)
    got = max_relative(t64(x), g).numpy()
    want = np.zeros_like(x)
    for i in range(12):
        for c in range(4):
            want[c, i] = max(x[c, j] - x[c, i] for j in g.neighbors[i])
    np.testing.assert_allclose(got, want, atol=1e-15)


def test_max_relative_grad():
    rng = np.random.default_rng(9)
    x = t64(rng.standard_normal((3, 10)), rg=True)
    g = build_dilated_knn(x.numpy(), k=4)
    coeff = rng.standard_normal((3, 10))
    report = grad_check(lambda: (max_relative(x, g) * t64(coeff)).sum(), [x],
                        eps=1e-6)
    assert report["max_rel_err"] < 1e-6


def test_max_relative_node_count_mismatch():
    x = t64(np.zeros((2, 8)))
    g = build_dilated_knn(np.random.default_rng(1).standard_normal((2, 10)), k=2)
    with pytest.raises(GraphError):
        max_relative(x, g)


def test_mrconv_identity_projection():
    rng = np.random.default_rng(10)
    x = t64(rng.standard_normal((4, 9)))
    g = build_dilated_knn(x.numpy(), k=2)
    update = t64(np.concatenate([np.eye(4), np.zeros((4, 4))], axis=1))
    out = mrconv(x, g, update, t64(np.zeros(4)))
    np.testing.assert_array_equal(out.numpy(), x.numpy())


def test_mrconv_loop_oracle():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((3, 10))
    w = rng.standard_normal((3, 6))
    b = rng.standard_normal(3)
    g = build_dilated_knn(x, k=3)
    got = mrconv(t64(x), g, t64(w), t64(b)).numpy()
    for i in range(10):
        m = np.array([max(x[c, j] - x[c, i] for j in g.neighbors[i])
                      for c in range(3)])
        want = w @ np.concatenate([x[:, i], m]) + b
        np.testing.assert_allclose(got[:, i], want, atol=1e-12)


def test_mrconv_weight_shape_validation():
    x = t64(np.zeros((3, 8)))
    g = build_dilated_knn(np.random.default_rng(2).standard_normal((3, 8)), k=2)
    with pytest.raises(ShapeError):
        mrconv(x, g, t64(np.zeros((3, 5))))


def test_mrconv_grad():
    rng = np.random.default_rng(12)
    x = t64(rng.standard_normal((3, 8)), rg=True)
    w = t64(rng.standard_normal((3, 6)), rg=True)
    b = t64(rng.standard_normal(3), rg=True)
    g = build_dilated_knn(x.numpy(), k=2)
    coeff = rng.standard_normal((3, 8))
    report = grad_check(lambda: (mrconv(x, g, w, b) * t64(coeff)).sum(),
                        [x, w, b], eps=1e-6)
    assert report["max_rel_err"] < 1e-5


# -- node_attention ----------------------------------------------------------

def _conv1d_oracle(sig, w):
    k = len(w)
    pad = (k - 1) // 2
    sp = np.zeros(len(sig) + 2 * pad)
    sp[pad:pad + len(sig)] = sig
    return np.array([sum(w[t] * sp[i + t] for t in range(k))
                     for i in range(len(sig))])


def test_node_attention_zero_weights_halve():
    rng = np.random.default_rng(13)
    x = t64(rng.standard_normal((5, 12)))
    out = node_attention(x, t64(np.zeros((1, 1, 3))))
    np.testing.assert_allclose(out.numpy(), 0.5 * x.numpy(), atol=1e-7)


def test_node_attention_annihilates_zero_input():
    out = node_attention(t64(np.zeros((4, 6))), t64(np.ones((1, 1, 3))))
    assert np.all(out.numpy() == 0)


def test_node_attention_composition_oracle():
    rng = np.random.default_rng(14)
    x = rng.standard_normal((4, 10))
    w = rng.standard_normal(3)
    got = node_attention(t64(x), t64(w.reshape(1, 1, 3))).numpy()
    z_avg, z_max = x.mean(axis=0), x.max(axis=0)
    logits = _conv1d_oracle(z_avg, w) + _conv1d_oracle(z_max, w)
    a = 1.0 / (1.0 + np.exp(-logits))
    assert np.all((a > 0) & (a < 1))
    np.testing.assert_allclose(got, x * a, atol=1e-12)


def test_node_attention_grad():
    rng = np.random.default_rng(15)
    x = t64(rng.standard_normal((3, 8)), rg=True)
    w = t64(0.3 * rng.standard_normal((1, 1, 3)), rg=True)
    coeff = rng.standard_normal((3, 8))
    report = grad_check(lambda: (node_attention(x, w) * t64(coeff)).sum(),
                        [x, w], eps=1e-6)
    assert report["max_rel_err"] < 1e-5


# -- GnnStage / GnnBlock -----------------------------------------------------

def _block(channels=3, grid=3, k=2, g=1, na=True, seed=0):
    rng = np.random.default_rng(seed)
    return GnnBlock(channels, grid * grid, k, 1, 3, na, g, rng, np.float64,
                    "gnn")


def test_block_preserves_shape():
    rng = np.random.default_rng(16)
    block = _block()
    x = t64(rng.standard_normal((2, 3, 3, 3)))
    assert block.forward(x, "train").shape == (2, 3, 3, 3)


def test_block_zero_input_deterministic_ties():
    block = _block()
    x = t64(np.zeros((2, 3, 3, 3)))
    capture = []
    out = block.forward(x, "train", capture=capture)
    assert np.all(np.isfinite(out.numpy()))
    # zero features + zero positional table force pure index tie-break rows
    np.testing.assert_array_equal(capture[0][0].neighbors[0], [1, 2])
    out2 = _block().forward(t64(np.zeros((2, 3, 3, 3))), "train").numpy()
    np.testing.assert_array_equal(out.numpy(), out2)


def test_ffn_residual_zero_final_conv_bitwise():
    rng = np.random.default_rng(17)
    stage = _block().stages[0]
    stage.ffn2_w.value.data[:] = 0.0
    x = t64(rng.standard_normal((2, 3, 3, 3)))
    out = stage.ffn(x, "train")
    np.testing.assert_array_equal(out.numpy(), x.numpy())


def test_block_capture_replay_identical():
    rng = np.random.default_rng(18)
    block = _block(g=2)
    x = t64(rng.standard_normal((2, 3, 3, 3)))
    capture = []
    out1 = block.forward(x, "train", capture=capture).numpy()
    assert len(capture) == 2 and len(capture[0]) == 2
    out2 = block.forward(x, "train", graphs=capture).numpy()
    np.testing.assert_array_equal(out1, out2)


def test_block_grad_frozen_topology():
    rng = np.random.default_rng(19)
    block = _block(channels=2, grid=2, k=2, na=True, seed=3)
    x = t64(rng.standard_normal((2, 2, 2, 2)))
    capture = []
    block.forward(x, "train", capture=capture)
    params = block.parameters()
    coeff = rng.standard_normal((2, 2, 2, 2))

    def f():
        out = block.forward(x, "train", graphs=capture)
        return (out * t64(coeff)).sum()

    report = grad_check(f, params, eps=1e-6, mode="directional")
    assert report["max_rel_err"] < 1e-5, report["per_param"]


def test_block_parameter_counts():
    one = sum(p.value.size for p in _block(g=1).parameters())
    two = sum(p.value.size for p in _block(g=2).parameters())
    assert two == 2 * one
    with_na = sum(p.value.size for p in _block(na=True).parameters())
    without = sum(p.value.size for p in _block(na=False).parameters())
    assert with_na - without == 3


def test_block_needs_at_least_one_repetition():
    with pytest.raises(GraphError):
        _block(g=0)


def test_stage_rejects_wrong_geometry():
    block = _block()
    with pytest.raises(ShapeError):
        block.forward(t64(np.zeros((1, 3, 4, 4))), "train")


# -- graph_to_json -----------------------------------------------------------

def test_graph_json_counts_and_coords():
    rng = np.random.default_rng(20)
    feats = rng.standard_normal((4, 25))
    g = build_dilated_knn(feats, k=5)
    dump = graph_to_json(g, (5, 5), seeds=[0, 7, 24], top=5)
    assert len(dump["nodes"]) == 3
    assert len(dump["edges"]) == 15
    assert dump["nodes"][1] == {"index": 7, "row": 1, "col": 2}
    ranks = [e["rank"] for e in dump["edges"][:5]]
    assert ranks == [0, 1, 2, 3, 4]


def test_graph_json_grid_mismatch():
    g = build_dilated_knn(np.random.default_rng(3).standard_normal((2, 9)), k=2)
    with pytest.raises(ShapeError):
        graph_to_json(g, (2, 4))
