"""Disentangled GIN encoder: a shared message-passing backbone with two linear heads.

``h_s`` (structure) is trained to be invariant under augmentation, ``h_w``
(carrier) is pushed towards orthogonality with ``h_s`` across a batch.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .graph import Graph, augment
from .tensors import DTYPE, NUM_DEGREE_BUCKETS, GraphTensors, to_tensors


class GINLayer(nn.Module):
    """``h' = LayerNorm(MLP((1 + eps) * h + sum_{u in N(v)} h_u))``."""

    def __init__(self, in_dim: int, out_dim: int, dtype=DTYPE):
        super().__init__()
        self.eps = nn.Parameter(torch.zeros((), dtype=dtype))
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, out_dim, dtype=dtype),
            nn.ReLU(),
            nn.Linear(out_dim, out_dim, dtype=dtype),
        )
        self.norm = nn.LayerNorm(out_dim, dtype=dtype)

    def forward(self, h, adj):
        return self.norm(self.mlp((1.0 + self.eps) * h + adj @ h))


@dataclass
class NodeLatents:
    hs_nodes: torch.Tensor
    hw_nodes: torch.Tensor

    @property
    def hs_pooled(self) -> torch.Tensor:
        return self.hs_nodes.mean(dim=0)

    @property
    def hw_pooled(self) -> torch.Tensor:
        return self.hw_nodes.mean(dim=0)

    @property
    def num_nodes(self) -> int:
        return int(self.hs_nodes.shape[0])


class DisentangledEncoder(nn.Module):
    """4-layer GIN backbone followed by independent projection heads.

    With ``single_head=True`` both outputs come from one head; this is the
    entangled autoencoder used by the naive baseline.
    """

    def __init__(self, in_dim: int = NUM_DEGREE_BUCKETS, hidden_dim: int = 256,
                 latent_dim: int = 256, num_layers: int = 4, single_head: bool = False,
                 dtype=DTYPE):
        super().__init__()
        self.in_dim = in_dim
        self.hidden_dim = hidden_dim
        self.latent_dim = latent_dim
        self.single_head = single_head
        dims = [in_dim] + [hidden_dim] * num_layers
        self.layers = nn.ModuleList(GINLayer(a, b, dtype) for a, b in zip(dims[:-1], dims[1:]))
        self.head_s = nn.Linear(hidden_dim, latent_dim, dtype=dtype)
        self.head_w = None if single_head else nn.Linear(hidden_dim, latent_dim, dtype=dtype)

    def backbone(self, x, adj):
        h = x
        for i, layer in enumerate(self.layers):
            h = layer(h, adj)
            if i < len(self.layers) - 1:
                h = torch.relu(h)
        return h

    def forward(self, gt: GraphTensors) -> NodeLatents:
        h = self.backbone(gt.x, gt.adj)
        hs = self.head_s(h)
        hw = hs if self.head_w is None else self.head_w(h)
        return NodeLatents(hs, hw)


def check_finite_params(module: nn.Module, name: str = "module") -> None:
    for pname, p in module.named_parameters():
        if not torch.isfinite(p).all():
            raise FloatingPointError(f"{name} parameter {pname!r} is not finite")


def encode(g, encoder: DisentangledEncoder) -> NodeLatents:
    """Encode a :class:`Graph` (or prebuilt :class:`GraphTensors`)."""
    check_finite_params(encoder, "encoder")
    gt = g if isinstance(g, GraphTensors) else to_tensors(g, dtype=_dtype_of(encoder))
    return encoder(gt)


def _dtype_of(module: nn.Module):
    return next(module.parameters()).dtype


def loss_invariance(hs_g: torch.Tensor, hs_gprime: torch.Tensor) -> torch.Tensor:
    """Squared Euclidean distance between two structural readouts."""
    if hs_g.shape != hs_gprime.shape:
        raise ValueError(f"dimension mismatch: {tuple(hs_g.shape)} vs {tuple(hs_gprime.shape)}")
    return ((hs_g - hs_gprime) ** 2).sum()


def loss_orthogonality(hs: torch.Tensor, hw: torch.Tensor) -> torch.Tensor:
    """Squared Frobenius norm of ``Hs^T Hw`` for batch-stacked readouts."""
    if hs.shape[0] != hw.shape[0]:
        raise ValueError(f"row-count mismatch: {hs.shape[0]} vs {hw.shape[0]}")
    return ((hs.T @ hw) ** 2).sum()


def normalized_cross_correlation(hs: torch.Tensor, hw: torch.Tensor) -> float:
    num = torch.linalg.matrix_norm(hs.T @ hw)
    den = torch.linalg.matrix_norm(hs) * torch.linalg.matrix_norm(hw)
    return float(num / den) if float(den) > 0 else 0.0


def encoder_loss(graphs: Sequence[Graph], encoder: DisentangledEncoder, lambda_mi: float = 0.1,
                 seed=0, node_drop_frac: float = 0.1, edge_perturb_frac: float = 0.1,
                 return_parts: bool = False):
    """Invariance loss (mean over the batch) plus ``lambda_mi`` times the orthogonality loss.

    One augmented view is drawn per graph from a seed derived from ``seed``.
    """
    if len(graphs) == 0:
        raise ValueError("encoder_loss needs a non-empty batch")
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    seeds = ss.spawn(len(graphs))
    inv_terms, hs_rows, hw_rows = [], [], []
    for g, ss in zip(graphs, seeds):
        view = augment(g, node_drop_frac, edge_perturb_frac, ss)
        lat = encode(g, encoder)
        lat_view = encode(view, encoder)
        inv_terms.append(loss_invariance(lat.hs_pooled, lat_view.hs_pooled))
        hs_rows.append(lat.hs_pooled)
        hw_rows.append(lat.hw_pooled)
    l_inv = torch.stack(inv_terms).mean()
    l_ortho = loss_orthogonality(torch.stack(hs_rows), torch.stack(hw_rows))
    total = l_inv + lambda_mi * l_ortho
    if return_parts:
        return total, {"inv": l_inv.item(), "ortho": l_ortho.item()}
    return total
