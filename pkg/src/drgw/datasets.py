"""Synthetic desk-scale corpora."""
from __future__ import annotations

import networkx as nx
import numpy as np

from .graph import Graph


def synthetic_corpus(num_graphs: int = 200, min_nodes: int = 100, max_nodes: int = 500,
                     ba_fraction: float = 0.5, ba_m: int = 3, er_mean_degree: float = 6.0,
                     seed: int = 0) -> list[Graph]:
    """Mix of Barabasi-Albert and Erdos-Renyi graphs with uniform node counts."""
    rng = np.random.default_rng(seed)
    graphs = []
    for _ in range(num_graphs):
        n = int(rng.integers(min_nodes, max_nodes + 1))
        gseed = int(rng.integers(2 ** 31))
        if rng.random() < ba_fraction:
            nxg = nx.barabasi_albert_graph(n, ba_m, seed=gseed)
        else:
            nxg = nx.gnp_random_graph(n, er_mean_degree / (n - 1), seed=gseed)
        graphs.append(Graph.from_networkx(nxg))
    return graphs


def split_corpus(graphs, test_fraction: float = 0.2, seed: int = 0):
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(graphs))
    n_test = int(round(test_fraction * len(graphs)))
    test = [graphs[i] for i in sorted(order[:n_test])]
    train = [graphs[i] for i in sorted(order[n_test:])]
    return train, test
