"""Torch views of a :class:`~drgw.graph.Graph` shared by every neural module."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .graph import Graph

DTYPE = torch.float64
NUM_DEGREE_BUCKETS = 16
DENSE_NODE_LIMIT = 2048


def degree_buckets(degrees, num_buckets: int = NUM_DEGREE_BUCKETS) -> np.ndarray:
    """Log2-spaced degree buckets: 0 -> 0, 1-2 -> 1, 3-6 -> 2, ... capped at ``num_buckets - 1``."""
    d = np.asarray(degrees, dtype=np.float64)
    return np.minimum(np.floor(np.log2(d + 1.0)), num_buckets - 1).astype(np.int64)


def degree_features(degrees, num_buckets: int = NUM_DEGREE_BUCKETS, dtype=DTYPE) -> torch.Tensor:
    idx = torch.as_tensor(degree_buckets(degrees, num_buckets))
    return torch.nn.functional.one_hot(idx, num_buckets).to(dtype)


def gcn_normalize(adj: torch.Tensor) -> torch.Tensor:
    """``D^-1/2 (A + I) D^-1/2`` for a dense (possibly differentiable) or sparse adjacency."""
    n = adj.shape[0]
    if adj.is_sparse:
        adj = adj.coalesce()
        idx = adj.indices()
        loops = torch.arange(n).repeat(2, 1)
        idx = torch.cat([idx, loops], dim=1)
        vals = torch.cat([adj.values(), torch.ones(n, dtype=adj.dtype)])
        deg = torch.zeros(n, dtype=adj.dtype).index_add_(0, idx[0], vals)
        inv = deg.rsqrt()
        vals = inv[idx[0]] * vals * inv[idx[1]]
        return torch.sparse_coo_tensor(idx, vals, (n, n), check_invariants=False).coalesce()
    a = adj + torch.eye(n, dtype=adj.dtype)
    inv = a.sum(dim=1).rsqrt()
    return inv[:, None] * a * inv[None, :]


@dataclass
class GraphTensors:
    """Node features plus raw and GCN-normalized adjacency for one graph."""

    x: torch.Tensor
    adj: torch.Tensor
    adj_norm: torch.Tensor

    @property
    def num_nodes(self) -> int:
        return int(self.x.shape[0])


def node_features(g: Graph, num_buckets: int = NUM_DEGREE_BUCKETS, dtype=DTYPE) -> torch.Tensor:
    if g.features is not None:
        return torch.as_tensor(g.features, dtype=dtype)
    return degree_features(g.degrees(), num_buckets, dtype)


def to_tensors(g: Graph, dense: bool | None = None, dtype=DTYPE,
               num_buckets: int = NUM_DEGREE_BUCKETS) -> GraphTensors:
    if g.num_nodes == 0:
        raise ValueError("cannot encode an empty graph")
    if dense is None:
        dense = g.num_nodes <= DENSE_NODE_LIMIT
    n = g.num_nodes
    if dense:
        adj = torch.as_tensor(g.adjacency(), dtype=dtype)
    else:
        e = torch.as_tensor(g.edges.T.copy())
        idx = torch.cat([e, e.flip(0)], dim=1)
        ones = torch.ones(idx.shape[1], dtype=dtype)
        adj = torch.sparse_coo_tensor(idx, ones, (n, n), check_invariants=False).coalesce()
    return GraphTensors(node_features(g, num_buckets, dtype), adj, gcn_normalize(adj))


def tensors_from_dense(adj: torch.Tensor, features: torch.Tensor | None = None,
                       num_buckets: int = NUM_DEGREE_BUCKETS) -> GraphTensors:
    """Build tensors from a dense, possibly differentiable adjacency.

    Degree-bucket features are read off the detached (rounded) adjacency; the
    message passing itself stays differentiable in ``adj``.
    """
    if features is None:
        deg = adj.detach().round().sum(dim=1).cpu().numpy()
        features = degree_features(deg, num_buckets, adj.dtype)
    return GraphTensors(features, adj, gcn_normalize(adj))
