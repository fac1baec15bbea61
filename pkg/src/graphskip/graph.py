"""Patch graph construction and the graph block used on concatenated features.

Nodes are flattened spatial positions of a (C, H_t, W_t) map.  The graph is
rebuilt from the current features on every forward pass (hard index selection,
non-differentiable); gradients flow through gathered values only.
"""

from __future__ import annotations

from typing import List, Optional

import numpy as np

from .errors import GraphError, ShapeError
from .nn import BatchNormState, batchnorm, conv1d, conv2d_1x1, kaiming_uniform, pool_global
from .tensor import (Parameter, Tensor, _node, concat, mul, narrow, relu,
                     reshape, sigmoid, transpose)


class PatchGraph:
    """N-node neighbor table: row i holds K indices sorted by (distance, index)."""

    __slots__ = ("neighbors", "n_nodes", "k", "dilation")

    def __init__(self, neighbors: np.ndarray, n_nodes: int, k: int, dilation: int):
        self.neighbors = neighbors
        self.n_nodes = n_nodes
        self.k = k
        self.dilation = dilation


def build_dilated_knn(features, k: int, dilation: int = 1) -> PatchGraph:
    """Dilated KNN over columns of a (C, N) feature matrix.

    For node i all j != i are ranked by (squared Euclidean distance, index)
    ascending; the neighbor row takes ranks 0, d, 2d, ... until K entries.
    """
    data = features.data if isinstance(features, Tensor) else np.asarray(features)
    if data.ndim != 2:
        raise ShapeError(f"expected (C, N) features, got shape {data.shape}")
    if not np.all(np.isfinite(data)):
        raise GraphError("non-finite features cannot be ranked")
    n = data.shape[1]
    if k < 1 or dilation < 1:
        raise GraphError(f"need K >= 1 and dilation >= 1, got K={k}, d={dilation}")
    if n <= k * dilation:
        raise GraphError(f"need N > K*d for dilated selection, got N={n}, "
                         f"K={k}, d={dilation}")
    diff = data[:, :, None] - data[:, None, :]
    dist = (diff * diff).sum(axis=0)
    np.fill_diagonal(dist, np.inf)
    idx = np.broadcast_to(np.arange(n), (n, n))
    order = np.lexsort((idx, dist), axis=-1)
    neighbors = np.ascontiguousarray(order[:, 0:k * dilation:dilation])
    return PatchGraph(neighbors, n, k, dilation)


def max_relative(x: Tensor, graph: PatchGraph) -> Tensor:
    """m_i = elementwise max over neighbors j of (x_j - x_i); no parameters."""
    c, n = x.shape
    if graph.n_nodes != n:
        raise GraphError(f"graph has {graph.n_nodes} nodes, features have {n}")
    if graph.neighbors.shape[1] == 0:
        raise GraphError("empty neighbor rows")
    nbr = x.data[:, graph.neighbors]
    diffs = nbr - x.data[:, :, None]
    m = diffs.max(axis=2)
    out = _node(m, (x,), "max_relative")
    if out.requires_grad:
        arg = diffs.argmax(axis=2)
        winners = graph.neighbors[np.arange(n)[None, :], arg]

        def _bw(g):
            buf = np.zeros_like(x.data)
            np.add.at(buf, (np.arange(c)[:, None], winners), g)
            buf -= g
            x._accum(buf)
        out._backward = _bw
    return out


def mrconv(x: Tensor, graph: PatchGraph, update_weight: Tensor,
           update_bias: Optional[Tensor] = None) -> Tensor:
    """Max-relative aggregation followed by a learnable 2C -> C update."""
    c = x.shape[0]
    if update_weight.shape != (c, 2 * c):
        raise ShapeError(f"update weight must be ({c}, {2 * c}), "
                         f"got {update_weight.shape}")
    h = concat([x, max_relative(x, graph)], axis=0)
    out = update_weight @ h
    if update_bias is not None:
        out = out + reshape(update_bias, (c, 1))
    return out


def node_attention(x: Tensor, weight: Tensor) -> Tensor:
    """Gate each node by sigmoid of shared 1D convs over avg/max channel stats."""
    _, n = x.shape
    z_avg = reshape(pool_global(x, "avg", axis=0, keepdims=True), (1, 1, n))
    z_max = reshape(pool_global(x, "max", axis=0, keepdims=True), (1, 1, n))
    gate = sigmoid(conv1d(z_avg, weight) + conv1d(z_max, weight))
    return mul(x, reshape(gate, (1, n)))


class GnnStage:
    """One repetition: pre conv+BN, graph aggregation, post conv+BN, FFN."""

    def __init__(self, channels: int, n_nodes: int, k: int, dilation: int,
                 conv1d_width: int, with_node_attention: bool, rng, dtype,
                 prefix: str):
        self.channels = channels
        self.n_nodes = n_nodes
        self.k = k
        self.dilation = dilation
        self.with_node_attention = with_node_attention
        c = channels

        def conv_param(name, shape, fan_in):
            return Parameter(Tensor(kaiming_uniform(rng, shape, fan_in, dtype),
                                    requires_grad=True), f"{prefix}.{name}")

        def const_param(name, shape, value):
            return Parameter(Tensor(np.full(shape, value, dtype=dtype),
                                    requires_grad=True), f"{prefix}.{name}")

        self.pre_w = conv_param("pre.weight", (c, c), c)
        self.pre_gamma = const_param("pre.bn.gamma", (c,), 1.0)
        self.pre_beta = const_param("pre.bn.beta", (c,), 0.0)
        self.pre_state = BatchNormState(c, dtype)
        self.pos = const_param("pos", (n_nodes, c), 0.0)
        self.update_w = conv_param("update.weight", (c, 2 * c), 2 * c)
        self.update_b = const_param("update.bias", (c,), 0.0)
        if with_node_attention:
            self.na_w = conv_param("na.weight", (1, 1, conv1d_width), conv1d_width)
        self.post_w = conv_param("post.weight", (c, c), c)
        self.post_gamma = const_param("post.bn.gamma", (c,), 1.0)
        self.post_beta = const_param("post.bn.beta", (c,), 0.0)
        self.post_state = BatchNormState(c, dtype)
        self.ffn1_w = conv_param("ffn1.weight", (c, c), c)
        self.ffn1_gamma = const_param("ffn1.bn.gamma", (c,), 1.0)
        self.ffn1_beta = const_param("ffn1.bn.beta", (c,), 0.0)
        self.ffn1_state = BatchNormState(c, dtype)
        self.ffn2_w = conv_param("ffn2.weight", (c, c), c)
        self.ffn2_gamma = const_param("ffn2.bn.gamma", (c,), 1.0)
        self.ffn2_beta = const_param("ffn2.bn.beta", (c,), 0.0)
        self.ffn2_state = BatchNormState(c, dtype)

    def parameters(self) -> List[Parameter]:
        out = [self.pre_w, self.pre_gamma, self.pre_beta, self.pos,
               self.update_w, self.update_b]
        if self.with_node_attention:
            out.append(self.na_w)
        out += [self.post_w, self.post_gamma, self.post_beta,
                self.ffn1_w, self.ffn1_gamma, self.ffn1_beta,
                self.ffn2_w, self.ffn2_gamma, self.ffn2_beta]
        return out

    def bn_states(self) -> List[BatchNormState]:
        return [self.pre_state, self.post_state, self.ffn1_state, self.ffn2_state]

    def ffn(self, x: Tensor, mode: str) -> Tensor:
        h = batchnorm(conv2d_1x1(x, self.ffn1_w.value),
                      self.ffn1_gamma.value, self.ffn1_beta.value,
                      self.ffn1_state, mode)
        h = batchnorm(conv2d_1x1(relu(h), self.ffn2_w.value),
                      self.ffn2_gamma.value, self.ffn2_beta.value,
                      self.ffn2_state, mode)
        return h + x

    def forward(self, f: Tensor, mode: str,
                graphs: Optional[List[PatchGraph]] = None,
                capture: Optional[list] = None) -> Tensor:
        b, c, ht, wt = f.shape
        n = ht * wt
        if c != self.channels or n != self.n_nodes:
            raise ShapeError(f"stage built for ({self.channels}, {self.n_nodes}) "
                             f"got ({c}, {n})")
        h = batchnorm(conv2d_1x1(f, self.pre_w.value),
                      self.pre_gamma.value, self.pre_beta.value,
                      self.pre_state, mode)
        pos = transpose(self.pos.value, (1, 0))
        items = []
        for bi in range(b):
            x = reshape(narrow(h, 0, bi, 1), (c, n)) + pos
            if graphs is not None:
                graph = graphs[bi]
            else:
                graph = build_dilated_knn(x.data, self.k, self.dilation)
            if capture is not None:
                capture.append(graph)
            y = mrconv(x, graph, self.update_w.value, self.update_b.value)
            if self.with_node_attention:
                y = node_attention(y, self.na_w.value)
            items.append(reshape(y, (1, c, ht, wt)))
        h = concat(items, axis=0) if len(items) > 1 else items[0]
        h = batchnorm(conv2d_1x1(h, self.post_w.value),
                      self.post_gamma.value, self.post_beta.value,
                      self.post_state, mode)
        return self.ffn(h, mode)


class GnnBlock:
    """G sequential stages, each with its own parameter set."""

    def __init__(self, channels: int, n_nodes: int, k: int, dilation: int,
                 conv1d_width: int, with_node_attention: bool, repetitions: int,
                 rng, dtype, prefix: str):
        if repetitions < 1:
            raise GraphError(f"need G >= 1 repetitions, got {repetitions}")
        self.stages = [GnnStage(channels, n_nodes, k, dilation, conv1d_width,
                                with_node_attention, rng, dtype, f"{prefix}.{g}")
                       for g in range(repetitions)]

    def parameters(self) -> List[Parameter]:
        return [p for stage in self.stages for p in stage.parameters()]

    def bn_states(self) -> List[BatchNormState]:
        return [s for stage in self.stages for s in stage.bn_states()]

    def forward(self, f: Tensor, mode: str,
                graphs: Optional[List[List[PatchGraph]]] = None,
                capture: Optional[list] = None) -> Tensor:
        out = f
        for gi, stage in enumerate(self.stages):
            stage_capture = None
            if capture is not None:
                stage_capture = []
                capture.append(stage_capture)
            out = stage.forward(out, mode,
                                graphs[gi] if graphs is not None else None,
                                stage_capture)
        return out


def graph_to_json(graph: PatchGraph, grid: tuple, seeds=None, top: Optional[int] = None) -> dict:
    """Adjacency dump: nodes with grid coordinates, edges with neighbor rank."""
    ht, wt = grid
    if ht * wt != graph.n_nodes:
        raise ShapeError(f"grid {grid} does not cover {graph.n_nodes} nodes")
    node_ids = range(graph.n_nodes) if seeds is None else seeds
    limit = graph.k if top is None else min(top, graph.k)
    nodes, edges = [], []
    for i in node_ids:
        i = int(i)
        nodes.append({"index": i, "row": i // wt, "col": i % wt})
        for rank in range(limit):
            edges.append({"src": i, "dst": int(graph.neighbors[i, rank]),
                          "rank": rank})
    return {"nodes": nodes, "edges": edges}
