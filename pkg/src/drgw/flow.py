"""Structure-conditioned invertible flow over per-node carrier vectors.

Each coupling layer keeps one half of the channels fixed and applies an
affine map to the other half. Scale and shift come from a 2-layer GCN that
reads the fixed half together with the structural latents ``h_s``, so the
map is exactly invertible given ``h_s`` and the graph.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import torch
from torch import nn

from .tensors import DTYPE


class GCNConditioner(nn.Module):
    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int, dtype=DTYPE):
        super().__init__()
        self.lin1 = nn.Linear(in_dim, hidden_dim, dtype=dtype)
        self.lin2 = nn.Linear(hidden_dim, out_dim, dtype=dtype)
        nn.init.zeros_(self.lin2.weight)
        nn.init.zeros_(self.lin2.bias)

    def forward(self, x, adj_norm):
        h = torch.relu(adj_norm @ self.lin1(x))
        return adj_norm @ self.lin2(h)


class AffineCoupling(nn.Module):
    def __init__(self, dim: int, cond_dim: int, hidden_dim: int, transform_first: bool,
                 clamp: float = 2.0, dtype=DTYPE):
        super().__init__()
        if dim % 2:
            raise ValueError("carrier dimension must be even")
        self.half = dim // 2
        self.transform_first = transform_first
        self.clamp = clamp
        self.net = GCNConditioner(self.half + cond_dim, hidden_dim, 2 * self.half, dtype)

    def _split(self, x):
        a, b = x[:, : self.half], x[:, self.half:]
        return (b, a) if self.transform_first else (a, b)

    def _join(self, fixed, moved):
        return torch.cat([moved, fixed] if self.transform_first else [fixed, moved], dim=1)

    def _scale_shift(self, fixed, hs, adj_norm):
        raw = self.net(torch.cat([fixed, hs], dim=1), adj_norm)
        raw_s, shift = raw[:, : self.half], raw[:, self.half:]
        log_s = self.clamp * torch.tanh(raw_s / self.clamp)
        return log_s, shift

    def forward(self, x, hs, adj_norm):
        fixed, moved = self._split(x)
        log_s, shift = self._scale_shift(fixed, hs, adj_norm)
        return self._join(fixed, moved * torch.exp(log_s) + shift), log_s.sum(dim=1)

    def inverse(self, y, hs, adj_norm):
        fixed, moved = self._split(y)
        log_s, shift = self._scale_shift(fixed, hs, adj_norm)
        return self._join(fixed, (moved - shift) * torch.exp(-log_s))


class ConditionalFlow(nn.Module):
    """Stack of affine couplings alternating which half is transformed."""

    def __init__(self, dim: int = 256, cond_dim: int = 256, hidden_dim: int = 256,
                 num_layers: int = 8, clamp: float = 2.0, dtype=DTYPE):
        super().__init__()
        self.dim = dim
        self.cond_dim = cond_dim
        self.clamp = clamp
        self.layers = nn.ModuleList(
            AffineCoupling(dim, cond_dim, hidden_dim, transform_first=bool(i % 2), clamp=clamp, dtype=dtype)
            for i in range(num_layers)
        )

    @property
    def split_schedule(self) -> list[bool]:
        return [layer.transform_first for layer in self.layers]

    def randomize_(self, generator: torch.Generator, std: float = 0.1) -> "ConditionalFlow":
        """Give the zero-initialised output layers random weights (for tests and probes)."""
        with torch.no_grad():
            for layer in self.layers:
                for p in layer.net.lin2.parameters():
                    p.copy_(torch.randn(p.shape, generator=generator, dtype=p.dtype) * std)
        return self


@dataclass
class LatentVector:
    """Per-node latents plus log|det J| (per node and total)."""

    z_nodes: torch.Tensor
    logdet_nodes: torch.Tensor

    @property
    def logdet(self) -> torch.Tensor:
        return self.logdet_nodes.sum()

    @property
    def z_mean(self) -> torch.Tensor:
        return self.z_nodes.mean(dim=0)


def _check(t: torch.Tensor, where: str) -> None:
    if not torch.isfinite(t).all():
        raise FloatingPointError(f"non-finite values after {where}")


def _validate(hw, hs, flow):
    if hw.shape[0] != hs.shape[0]:
        raise ValueError(f"row-count mismatch: carrier {hw.shape[0]} vs structure {hs.shape[0]}")
    if hw.shape[1] != flow.dim or hs.shape[1] != flow.cond_dim:
        raise ValueError("latent width does not match the flow")
    _check(hw, "input")
    _check(hs, "conditioning input")


def flow_forward(hw_nodes, hs_nodes, adj_norm, flow: ConditionalFlow, return_layers: bool = False):
    """Map carriers to the Gaussian latent space, accumulating ``sum log scale``."""
    _validate(hw_nodes, hs_nodes, flow)
    x = hw_nodes
    total = torch.zeros(hw_nodes.shape[0], dtype=hw_nodes.dtype)
    per_layer = []
    for i, layer in enumerate(flow.layers):
        x, ld = layer(x, hs_nodes, adj_norm)
        _check(x, f"coupling layer {i}")
        per_layer.append(ld)
        total = total + ld
    out = LatentVector(x, total)
    return (out, per_layer) if return_layers else out


def flow_inverse(z_nodes, hs_nodes, adj_norm, flow: ConditionalFlow):
    """Exact inverse of :func:`flow_forward`, layer by layer in reverse order."""
    _validate(z_nodes, hs_nodes, flow)
    x = z_nodes
    for i in reversed(range(len(flow.layers))):
        x = flow.layers[i].inverse(x, hs_nodes, adj_norm)
        _check(x, f"inverse of coupling layer {i}")
    return x


def nll_from_latent(latent: LatentVector) -> torch.Tensor:
    return (0.5 * (latent.z_nodes ** 2).sum(dim=1) - latent.logdet_nodes).mean()


def nll_loss(hw_nodes, hs_nodes, adj_norm, flow: ConditionalFlow) -> torch.Tensor:
    """Node-mean of ``||z||^2 / 2 - log|det J|`` (constant terms dropped)."""
    return nll_from_latent(flow_forward(hw_nodes, hs_nodes, adj_norm, flow))


def inject_watermark(latent: LatentVector, w: torch.Tensor, alpha: float) -> LatentVector:
    """Add ``alpha * w`` to every node row; the log-determinant is unchanged."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    w = torch.as_tensor(w, dtype=latent.z_nodes.dtype)
    if w.shape != latent.z_nodes.shape[1:]:
        raise ValueError(f"watermark has shape {tuple(w.shape)}, latents have width {latent.z_nodes.shape[1]}")
    if not torch.isfinite(w).all():
        raise ValueError("watermark must be finite")
    return replace(latent, z_nodes=latent.z_nodes + alpha * w)
