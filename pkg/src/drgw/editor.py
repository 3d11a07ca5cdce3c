"""Pair scorer and budgeted top-k discretization of the watermarked carrier."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .graph import EditPlan, Graph, InvalidPlanError, apply_edit_plan, canonical_pairs
from .tensors import DTYPE


class PairEditor(nn.Module):
    """3-layer GELU perceptron on ``[h_s(u) | h~_w(u) | h_s(v) | h~_w(v)]``.

    The first layer is evaluated blockwise: per-node projections are computed
    once and summed per pair, which is algebraically the same affine map as
    applying it to the concatenation.
    """

    def __init__(self, struct_dim: int = 256, carrier_dim: int = 256, hidden_dim: int = 256,
                 dtype=DTYPE):
        super().__init__()
        self.struct_dim = struct_dim
        self.carrier_dim = carrier_dim
        self.lin1 = nn.Linear(2 * (struct_dim + carrier_dim), hidden_dim, dtype=dtype)
        self.lin2 = nn.Linear(hidden_dim, hidden_dim, dtype=dtype)
        self.lin3 = nn.Linear(hidden_dim, 1, dtype=dtype)

    def node_projections(self, hs, hw):
        node = torch.cat([hs, hw], dim=1)
        d = node.shape[1]
        w = self.lin1.weight
        return node @ w[:, :d].T, node @ w[:, d:].T

    def pair_logits(self, hs, hw, pairs: torch.Tensor) -> torch.Tensor:
        left, right = self.node_projections(hs, hw)
        u, v = pairs[:, 0], pairs[:, 1]

        def head(pre):
            h = F.gelu(pre + self.lin1.bias)
            return self.lin3(F.gelu(self.lin2(h))).squeeze(-1)

        return 0.5 * (head(left[u] + right[v]) + head(left[v] + right[u]))


def score_pairs(hs_nodes, hw_mod_nodes, candidates, editor: PairEditor) -> torch.Tensor:
    """One symmetric score per candidate pair, in candidate order."""
    n = hs_nodes.shape[0]
    if hw_mod_nodes.shape[0] != n:
        raise ValueError("structural and carrier latents must be row-aligned")
    pairs = torch.as_tensor(canonical_pairs(candidates, n))
    if pairs.shape[0] == 0:
        return torch.zeros(0, dtype=hs_nodes.dtype)
    return editor.pair_logits(hs_nodes, hw_mod_nodes, pairs)


def topk_order(pairs: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Indices sorted by descending score, ties by ascending canonical pair."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((pairs[:, 1], pairs[:, 0], -scores))


def topk_plan(pairs, scores, k: int) -> EditPlan:
    """Select the ``k`` highest-scoring pairs (deterministic tie-break)."""
    if k < 0:
        raise ValueError("k must be non-negative")
    pairs = canonical_pairs(pairs, int(np.max(pairs)) + 1 if np.size(pairs) else 1)
    scores = _to_numpy(scores)
    if scores.shape[0] != pairs.shape[0]:
        raise ValueError("one score per pair required")
    order = topk_order(pairs, scores)[: min(k, pairs.shape[0])]
    return EditPlan(pairs[order], k)


def budget_from_fraction(num_edges: int, k_fraction: float) -> int:
    """``floor(k_fraction * |E|)``, at least 1 when the graph has edges."""
    if num_edges <= 0:
        return 0
    return max(1, math.floor(k_fraction * num_edges + 1e-9))


def _to_numpy(scores) -> np.ndarray:
    if isinstance(scores, torch.Tensor):
        return scores.detach().cpu().numpy().astype(np.float64)
    return np.asarray(scores, dtype=np.float64)


@dataclass
class MaskHandle:
    """Straight-through selection mask over candidates.

    ``mask`` equals the hard 0/1 top-k indicator in the forward pass while its
    gradient is that of ``soft_selection(scores, *surrogate_frame(scores, k))``.
    """

    pairs: torch.Tensor
    mask: torch.Tensor
    plan: EditPlan

    @property
    def num_selected(self) -> int:
        return int(self.mask.detach().sum().round())


def surrogate_frame(scores, k: int) -> tuple[float, float]:
    """Centre and width of the soft selection: the top-k boundary and the score spread.

    Top-k ignores a common shift or rescaling of the scores, so the surrogate
    does too; a raw sigmoid saturates once scores drift far from zero.
    """
    s = np.sort(_to_numpy(scores))[::-1]
    if s.size == 0:
        return 0.0, 1.0
    spread = float(s.std())
    if spread < 1e-12:
        spread = 1.0
    if k <= 0:
        return float(s[0]) + spread, spread
    if k >= s.size:
        return float(s[-1]) - spread, spread
    return 0.5 * float(s[k - 1] + s[k]), spread


def soft_selection(scores: torch.Tensor, centre: float, spread: float) -> torch.Tensor:
    return torch.sigmoid((scores - centre) / spread)


def straight_through_mask(pairs, scores: torch.Tensor, k: int) -> MaskHandle:
    plan = topk_plan(pairs, scores, k)
    pairs_np = np.sort(np.asarray(pairs, dtype=np.int64).reshape(-1, 2), axis=1)
    order = topk_order(pairs_np, _to_numpy(scores))[: len(plan)]
    hard = torch.zeros_like(scores)
    hard[torch.as_tensor(order, dtype=torch.long)] = 1.0
    soft = soft_selection(scores, *surrogate_frame(scores, k))
    mask = hard + (soft - soft.detach())
    return MaskHandle(torch.as_tensor(pairs_np), mask, plan)


def flip_dense(adj: torch.Tensor, pairs: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Differentiable ``A xor M``: ``A + M * (1 - 2A)`` on the listed pairs, kept symmetric."""
    if pairs.shape[0] == 0:
        return adj
    n = adj.shape[0]
    u, v = pairs[:, 0], pairs[:, 1]
    delta = torch.zeros(n, n, dtype=adj.dtype)
    cur = adj[u, v]
    delta = delta.index_put((u, v), mask * (1.0 - 2.0 * cur))
    return adj + delta + delta.T


def straight_through_apply(g: Graph, candidates, scores: torch.Tensor, k: int,
                           adj: torch.Tensor | None = None):
    """Apply the top-k plan to ``g``; also return a differentiable handle.

    Returns ``(graph, handle, dense_adjacency)`` where ``dense_adjacency`` is
    the flipped adjacency as a function of ``handle.mask``.
    """
    pairs = canonical_pairs(candidates, g.num_nodes)
    if np.any(pairs >= g.num_nodes):
        raise InvalidPlanError("candidate pair outside the graph")
    handle = straight_through_mask(pairs, scores, k)
    if adj is None:
        adj = torch.as_tensor(g.adjacency(), dtype=scores.dtype)
    return apply_edit_plan(g, handle.plan), handle, flip_dense(adj, handle.pairs, handle.mask)
