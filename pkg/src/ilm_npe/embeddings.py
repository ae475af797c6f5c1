"""Observation encoders: a 1-D CNN over the incidence curve and a GraphSAGE GNN.

Both map an observed epidemic to a fixed-length summary vector that
conditions the flow. The CNN sees only the incidence curve. The GNN sees
every individual as a node with features
``(observed indicator, t_obs / T, x / side, y / side)`` on the k-nearest-
neighbour graph of the population; unobserved nodes carry indicator 0 and
time 0.

Batches of graphs are processed as one disjoint union: neighbour means are
a sparse row-normalised adjacency product and the readout is a per-graph
``scatter_mean``.
"""
from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .autodiff import DTYPE, ShapeError, scatter_mean
from .epidemic import NEVER, ObservedEpidemic
from .population import Population, SpatialGraph

__all__ = [
    "SD_FLOOR",
    "incidence_features",
    "node_features",
    "GraphBatch",
    "CnnEmbedding",
    "GnnEmbedding",
    "embed_cnn",
    "embed_gnn",
    "check_graph",
]

SD_FLOOR = 1e-6


def incidence_features(incidence) -> torch.Tensor:
    """``log(1 + count)`` standardised per curve; shape (N, 1, T).

    A constant curve (including all zeros) maps to a zero vector.
    """
    x = np.log1p(np.atleast_2d(np.asarray(incidence, dtype=np.float64)))
    mu = x.mean(axis=1, keepdims=True)
    sd = np.maximum(x.std(axis=1, keepdims=True), SD_FLOOR)
    z = (x - mu) / sd
    z[np.ptp(x, axis=1) == 0.0] = 0.0   # rounding in the mean must not leak through
    return torch.from_numpy(z)[:, None, :]


def node_features(node_obs_time, population: Population, T: int) -> np.ndarray:
    """Per-node features, shape (N, M, 4)."""
    t = np.atleast_2d(np.asarray(node_obs_time))
    if t.shape[1] != population.size:
        raise ShapeError(f"node times have {t.shape[1]} nodes, population has {population.size}")
    seen = t != NEVER
    xy = population.normalised_coords()
    out = np.empty(t.shape + (4,))
    out[..., 0] = seen
    out[..., 1] = np.where(seen, t / T, 0.0)
    out[..., 2] = xy[:, 0]
    out[..., 3] = xy[:, 1]
    return out


class GraphBatch:
    """Disjoint union of ``n_graphs`` copies of one k-NN graph with different node features.

    ``x`` has shape (n_graphs * M, F); ``adj`` is the sparse mean-aggregation
    operator (row i averages the features of node i's neighbours);
    ``graph_index`` maps each node row to its graph.
    """

    def __init__(self, features: np.ndarray, graph: SpatialGraph):
        features = np.asarray(features, dtype=np.float64)
        if features.ndim == 2:
            features = features[None]
        n, M, F = features.shape
        if graph.n_nodes != M:
            raise ValueError(f"graph has {graph.n_nodes} nodes, features have {M}")
        self.n_graphs, self.n_nodes = n, M
        self.x = torch.from_numpy(features.reshape(n * M, F))
        self.graph_index = torch.arange(n).repeat_interleave(M)
        self.adj = _mean_operator(graph, n)


_ADJ_CACHE: dict = {}


def _mean_operator(graph: SpatialGraph, copies: int) -> torch.Tensor:
    key = (id(graph), graph.neighbours.shape, copies)
    hit = _ADJ_CACHE.get(key)
    if hit is not None and hit[0] is graph:
        return hit[1]
    M, k = graph.neighbours.shape
    offs = (np.arange(copies) * M)[:, None, None]
    rows = np.broadcast_to(np.arange(M)[None, :, None] + offs, (copies, M, k)).ravel()
    cols = (graph.neighbours[None] + offs).ravel()
    idx = torch.from_numpy(np.stack([rows, cols]).astype(np.int64))
    vals = torch.full((rows.size,), 1.0 / k, dtype=DTYPE)
    adj = torch.sparse_coo_tensor(idx, vals, (copies * M, copies * M),
                                  check_invariants=False).coalesce()
    if len(_ADJ_CACHE) > 8:
        _ADJ_CACHE.clear()
    _ADJ_CACHE[key] = (graph, adj)
    return adj


class CnnEmbedding(nn.Module):
    """Conv1d stack, adaptive average pooling to ``pooled`` steps, MLP head."""

    def __init__(self, k_emb: int = 32, channels=(32, 64, 64), kernel: int = 5, pooled: int = 8,
                 hidden: int = 64):
        super().__init__()
        layers, c_in = [], 1
        for c in channels:
            layers += [nn.Conv1d(c_in, c, kernel, padding=kernel // 2, dtype=DTYPE), nn.ReLU()]
            c_in = c
        self.conv = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool1d(pooled)
        self.head = nn.Sequential(
            nn.Flatten(), nn.Linear(c_in * pooled, hidden, dtype=DTYPE), nn.ReLU(),
            nn.Linear(hidden, k_emb, dtype=DTYPE),
        )
        self.k_emb = k_emb

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 3 or x.shape[1] != 1:
            raise ShapeError(f"CNN input must be (N, 1, T), got {tuple(x.shape)}")
        return self.head(self.pool(self.conv(x)))


class SageLayer(nn.Module):
    """``h_i' = relu(W_self h_i + W_neigh mean_{j in N(i)} h_j)``."""

    def __init__(self, width: int):
        super().__init__()
        self.self_lin = nn.Linear(width, width, dtype=DTYPE)
        self.neigh_lin = nn.Linear(width, width, bias=False, dtype=DTYPE)

    def forward(self, h, adj):
        return torch.relu(self.self_lin(h) + self.neigh_lin(torch.sparse.mm(adj, h)))


class GnnEmbedding(nn.Module):
    """Linear node encoder, GraphSAGE mean layers, mean-pool readout, MLP head."""

    def __init__(self, k_emb: int = 32, width: int = 64, n_layers: int = 3, in_features: int = 4):
        super().__init__()
        self.encoder = nn.Linear(in_features, width, dtype=DTYPE)
        self.layers = nn.ModuleList(SageLayer(width) for _ in range(n_layers))
        self.head = nn.Sequential(nn.Linear(width, width, dtype=DTYPE), nn.ReLU(),
                                  nn.Linear(width, k_emb, dtype=DTYPE))
        self.k_emb = k_emb

    def forward(self, batch: GraphBatch) -> torch.Tensor:
        h = torch.relu(self.encoder(batch.x))
        for layer in self.layers:
            h = layer(h, batch.adj)
        pooled = scatter_mean(h, batch.graph_index, batch.n_graphs)
        return self.head(pooled)


def check_graph(graph: SpatialGraph, population: Population) -> None:
    """Raise ValueError unless ``graph`` is a k-NN graph of ``population``."""
    if graph.n_nodes != population.size:
        raise ValueError(f"graph has {graph.n_nodes} nodes but the population has {population.size}")
    d = population.distances
    rows = np.arange(population.size)
    if not np.allclose(d[rows, graph.neighbours[:, 0]], d.min(axis=1)):
        raise ValueError("graph was not built on this population (nearest neighbours differ)")


def embed_cnn(obs: ObservedEpidemic, net: CnnEmbedding) -> np.ndarray:
    with torch.no_grad():
        return net(incidence_features(obs.incidence))[0].numpy()


def embed_gnn(obs: ObservedEpidemic, graph: SpatialGraph, net: GnnEmbedding) -> np.ndarray:
    check_graph(graph, obs.population)
    batch = GraphBatch(node_features(obs.node_obs_time, obs.population, obs.T), graph)
    with torch.no_grad():
        return net(batch)[0].numpy()
