"""Detectability, robustness and transparency metrics."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from scipy import sparse
from scipy.optimize import linprog
from torch import nn

from .graph import AttackSpec, Graph, attack, sample_non_edges
from .models import WatermarkModels
from .tensors import gcn_normalize
from .verification import WatermarkKey, extract_latent, statistic


@dataclass(frozen=True)
class Undefined:
    """Returned instead of NaN when a metric has no meaningful value."""

    reason: str

    def __bool__(self) -> bool:
        return False

    def __str__(self) -> str:
        return "-"


def is_undefined(value) -> bool:
    return isinstance(value, Undefined)


def auc(pos_scores: Sequence[float], neg_scores: Sequence[float]) -> float:
    """Fraction of (positive, negative) pairs with ``pos > neg``; ties count 0."""
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ValueError("auc needs non-empty positive and negative score lists")
    neg_sorted = np.sort(neg)
    # number of negatives strictly below each positive
    below = np.searchsorted(neg_sorted, pos, side="left")
    return float(below.sum() / (pos.size * neg.size))


def _require_same_nodes(g: Graph, gw: Graph) -> None:
    if g.num_nodes != gw.num_nodes:
        raise ValueError(f"node counts differ: {g.num_nodes} vs {gw.num_nodes}")


def flipped_edges_pct(g: Graph, gw: Graph):
    _require_same_nodes(g, gw)
    if g.num_edges == 0:
        return Undefined("reference graph has no edges")
    changed = np.setxor1d(g.edge_keys(), gw.edge_keys()).size
    return 100.0 * changed / g.num_edges


def degree_assortativity(g: Graph):
    """Pearson correlation of endpoint degrees over both edge orientations."""
    if g.num_edges == 0:
        return Undefined("graph has no edges")
    deg = g.degrees().astype(np.float64)
    u, v = g.edges[:, 0], g.edges[:, 1]
    a = np.concatenate([deg[u], deg[v]])
    b = np.concatenate([deg[v], deg[u]])
    a_c, b_c = a - a.mean(), b - b.mean()
    den = np.sqrt((a_c ** 2).sum() * (b_c ** 2).sum())
    if den <= 1e-12 * max(1.0, float((a ** 2).sum())):
        return Undefined("endpoint degrees have zero variance")
    return float((a_c * b_c).sum() / den)


def _relative_change(before, after, name: str):
    if is_undefined(before):
        return before
    if is_undefined(after):
        return after
    if before == 0:
        return Undefined(f"reference {name} is zero")
    return 100.0 * abs(before - after) / abs(before)


def assortativity_change_pct(g: Graph, gw: Graph):
    return _relative_change(degree_assortativity(g), degree_assortativity(gw), "assortativity")


def triangle_and_triple_counts(g: Graph) -> tuple[int, int]:
    deg = g.degrees().astype(np.int64)
    triples = int((deg * (deg - 1) // 2).sum())
    if g.num_edges == 0:
        return 0, triples
    a = g.adjacency()
    if g.num_nodes <= 4096:
        triangles = int(round(np.trace(a @ a @ a) / 6))
    else:
        nbrs = [set() for _ in range(g.num_nodes)]
        for u, v in g.edges:
            nbrs[u].add(v)
            nbrs[v].add(u)
        triangles = sum(len(nbrs[u] & nbrs[v]) for u, v in g.edges) // 3
    return triangles, triples


def global_clustering(g: Graph):
    triangles, triples = triangle_and_triple_counts(g)
    if triples == 0:
        return Undefined("graph has no connected triples")
    return 3.0 * triangles / triples


def clustering_change_pct(g: Graph, gw: Graph):
    return _relative_change(global_clustering(g), global_clustering(gw), "clustering")


def dk2_distribution(g: Graph) -> tuple[np.ndarray, np.ndarray]:
    """Support (sorted degree pairs) and probabilities of the joint degree distribution."""
    if g.num_edges == 0:
        raise ValueError("dK-2 distribution needs at least one edge")
    deg = g.degrees()
    pairs = np.sort(np.stack([deg[g.edges[:, 0]], deg[g.edges[:, 1]]], axis=1), axis=1)
    support, counts = np.unique(pairs, axis=0, return_counts=True)
    return support.astype(np.float64), counts / counts.sum()


def transport_cost(xs: np.ndarray, p: np.ndarray, ys: np.ndarray, q: np.ndarray) -> float:
    """Exact 1-Wasserstein distance between discrete measures under the L1 ground metric."""
    cost = np.abs(xs[:, None, :] - ys[None, :, :]).sum(axis=2)
    n, m = cost.shape
    rows = np.concatenate([np.repeat(np.arange(n), m), n + np.tile(np.arange(m), n)])
    cols = np.concatenate([np.arange(n * m), np.arange(n * m)])
    a_eq = sparse.csr_matrix((np.ones(2 * n * m), (rows, cols)), shape=(n + m, n * m))
    b_eq = np.concatenate([p, q])
    # one marginal constraint is redundant; dropping it keeps the LP full rank
    res = linprog(cost.ravel(), A_eq=a_eq[:-1], b_eq=b_eq[:-1], bounds=(0, None), method="highs")
    if not res.success:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return max(0.0, float(res.fun))


def dk2_deviation(g: Graph, gw: Graph) -> float:
    if g.num_edges == 0 or gw.num_edges == 0:
        raise ValueError("dK-2 deviation needs non-empty edge sets on both graphs")
    xs, p = dk2_distribution(g)
    ys, q = dk2_distribution(gw)
    if xs.shape == ys.shape and np.array_equal(xs, ys) and np.allclose(p, q, atol=0, rtol=0):
        return 0.0
    return transport_cost(xs, p, ys, q)


class _LinkGCN(nn.Module):
    def __init__(self, in_dim: int, hidden: int = 32, out: int = 16):
        super().__init__()
        self.lin1 = nn.Linear(in_dim, hidden, dtype=torch.float64)
        self.lin2 = nn.Linear(hidden, out, dtype=torch.float64)

    def forward(self, x, a_norm):
        h = torch.relu(a_norm @ self.lin1(x))
        return a_norm @ self.lin2(h)


def _link_split(g: Graph, rng: np.random.Generator):
    n_test = max(1, int(round(0.1 * g.num_edges)))
    order = rng.permutation(g.num_edges)
    test_pos = g.edges[order[:n_test]]
    train_pos = g.edges[order[n_test:]]
    negatives = sample_non_edges(g, 2 * n_test, rng)
    return train_pos, test_pos, negatives[:n_test], negatives[n_test:]


def link_prediction_auc(g: Graph, seed: int = 0, epochs: int = 100, lr: float = 0.01):
    """Held-out AUC of a small GCN link predictor trained on ``g`` alone."""
    if g.num_edges < 20:
        return Undefined(f"link prediction needs at least 20 edges, got {g.num_edges}")
    rng = np.random.default_rng(seed)
    train_pos, test_pos, test_neg, _ = _link_split(g, rng)
    train_graph = Graph(g.num_nodes, train_pos)
    # one-hot node identities: a free embedding per node, as in a transductive graph autoencoder
    x = torch.eye(g.num_nodes, dtype=torch.float64)
    a = torch.as_tensor(train_graph.adjacency(), dtype=torch.float64)
    a_norm = gcn_normalize(a)
    gen = torch.Generator().manual_seed(int(rng.integers(2 ** 62)))
    model = _LinkGCN(x.shape[1])
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * (1.0 / np.sqrt(p.shape[-1])))
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    pos = torch.as_tensor(train_pos, dtype=torch.long)
    bce = nn.BCEWithLogitsLoss()
    for _ in range(epochs):
        neg = torch.as_tensor(sample_non_edges(g, len(train_pos), rng), dtype=torch.long)
        h = model(x, a_norm)
        logits = torch.cat([(h[pos[:, 0]] * h[pos[:, 1]]).sum(1), (h[neg[:, 0]] * h[neg[:, 1]]).sum(1)])
        labels = torch.cat([torch.ones(len(pos)), torch.zeros(len(neg))]).to(torch.float64)
        opt.zero_grad()
        bce(logits, labels).backward()
        opt.step()
    with torch.no_grad():
        h = model(x, a_norm)
        score = lambda e: (h[e[:, 0]] * h[e[:, 1]]).sum(1).numpy()
        return auc(score(torch.as_tensor(test_pos)), score(torch.as_tensor(test_neg)))


def link_pred_drop_pct(g: Graph, gw: Graph, seed: int = 0):
    before = link_prediction_auc(g, seed)
    after = link_prediction_auc(gw, seed)
    if is_undefined(before):
        return before
    if is_undefined(after):
        return after
    return auc_drop_pct(before, after)


def auc_drop_pct(auc_before: float, auc_after: float):
    if auc_before == 0:
        return Undefined("reference link-prediction AUC is zero")
    return (1.0 - auc_after / auc_before) * 100.0


def cosine_rows(a: torch.Tensor, b: torch.Tensor) -> float:
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    if a.shape[0] == 0:
        raise ValueError("empty alignment")
    return float(nn.functional.cosine_similarity(a, b, dim=1, eps=1e-12).mean())


@torch.no_grad()
def embedding_cosine(g: Graph, gw: Graph, alignment, models: WatermarkModels) -> float:
    """Mean cosine between structural node embeddings of aligned nodes.

    ``alignment[i]`` is the node of ``g`` that node ``i`` of ``gw`` came from.
    """
    from .encoder import encode
    from .pipeline import graph_tensors

    alignment = np.asarray(alignment, dtype=np.int64)
    if alignment.size == 0:
        raise ValueError("empty alignment")
    if alignment.size != gw.num_nodes:
        raise ValueError("alignment must give one source node per node of gw")
    hs = encode(graph_tensors(g, models), models.encoder).hs_nodes
    hs_w = encode(graph_tensors(gw, models), models.encoder).hs_nodes
    return cosine_rows(hs[torch.as_tensor(alignment)], hs_w)


@torch.no_grad()
def statistics_for(graphs: Sequence[Graph], key: WatermarkKey, models: WatermarkModels,
                   attack_spec: Optional[AttackSpec] = None, seed: int = 0) -> np.ndarray:
    w = key.vector()
    out = []
    for i, g in enumerate(graphs):
        if attack_spec is not None:
            spec = AttackSpec(attack_spec.kind, attack_spec.intensity,
                              int(np.random.SeedSequence([seed, attack_spec.seed, i]).generate_state(1)[0]))
            g = attack(g, spec)
        out.append(statistic(extract_latent(g, models), w))
    return np.asarray(out)


def detect_auc(watermarked: Sequence[Graph], unwatermarked: Sequence[Graph], key: WatermarkKey,
               models: WatermarkModels, attack_spec: Optional[AttackSpec] = None, seed: int = 0) -> float:
    """AUC of the detection statistic, optionally after attacking both corpora alike."""
    if len(watermarked) == 0 or len(unwatermarked) == 0:
        raise ValueError("detect_auc needs non-empty corpora")
    pos = statistics_for(watermarked, key, models, attack_spec, seed)
    neg = statistics_for(unwatermarked, key, models, attack_spec, seed + 1)
    if pos.size == neg.size and np.array_equal(np.sort(pos), np.sort(neg)):
        warnings.warn("watermarked and unwatermarked statistics coincide; AUC is degenerate", stacklevel=2)
    return auc(pos, neg)
