"""End-to-end embedding: encode, flow, inject, invert, score and edit."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .editor import budget_from_fraction, score_pairs, topk_order, topk_plan
from .encoder import NodeLatents, encode
from .flow import flow_forward, flow_inverse, inject_watermark
from .graph import EditPlan, Graph, apply_edit_plan, sample_candidates
from .models import WatermarkModels
from .tensors import GraphTensors, to_tensors
from .verification import WatermarkKey

log = logging.getLogger(__name__)

DEFAULT_K_FRACTION = 0.001


@dataclass
class EmbedRecord:
    plan: EditPlan
    budget_k: int
    warnings: list = field(default_factory=list)


def graph_tensors(g: Graph, models: WatermarkModels) -> GraphTensors:
    dtype = next(models.encoder.parameters()).dtype
    return to_tensors(g, dtype=dtype, num_buckets=models.dims.in_dim)


def modified_carrier(lat: NodeLatents, gt: GraphTensors, w: torch.Tensor, alpha: float,
                     models: WatermarkModels) -> torch.Tensor:
    """``f^-1(f(h_w; h_s) + alpha w; h_s)``, or ``h_w + alpha w`` without a flow."""
    if models.flow is None:
        return lat.hw_nodes + alpha * w
    z = flow_forward(lat.hw_nodes, lat.hs_nodes, gt.adj_norm, models.flow)
    return flow_inverse(inject_watermark(z, w, alpha).z_nodes, lat.hs_nodes, gt.adj_norm, models.flow)


def decoder_logits(h: torch.Tensor, pairs: np.ndarray) -> torch.Tensor:
    p = torch.as_tensor(pairs, dtype=torch.long)
    return (h[p[:, 0]] * h[p[:, 1]]).sum(dim=1)


def decoder_plan(h: torch.Tensor, h_mod: torch.Tensor, candidates: np.ndarray, k: int,
                 present: np.ndarray) -> EditPlan:
    """Flips from an inner-product decoder thresholded at probability 0.5.

    A candidate is flipped when the decoding of the modified carrier
    disagrees with the graph (``present`` marks existing edges); at most
    ``k`` disagreements are kept, largest logit change first.
    """
    after_logits = decoder_logits(h_mod, candidates)
    changed = np.flatnonzero((after_logits > 0).numpy() != present)
    if changed.size == 0:
        return EditPlan(np.zeros((0, 2), dtype=np.int64), k)
    delta = (after_logits - decoder_logits(h, candidates)).abs().numpy()[changed]
    order = topk_order(candidates[changed], delta)[:k]
    return EditPlan(candidates[changed][order], k)


def embed_seed(key: WatermarkKey) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(key.seed), 0x5EED])


@torch.no_grad()
def watermark_embed(g: Graph, key: WatermarkKey, models: WatermarkModels,
                    k_fraction: float = DEFAULT_K_FRACTION, k: int | None = None,
                    return_record: bool = False):
    """Embed ``key`` into ``g``; returns ``(watermarked_graph, plan)``.

    ``k`` overrides the budget derived from ``k_fraction``. A fractional
    budget that floors to zero on a graph with edges is raised to one and a
    warning is recorded.
    """
    if g.num_nodes == 0:
        raise ValueError("cannot embed into an empty graph")
    if g.num_edges == 0:
        raise ValueError("cannot embed into a graph without edges")
    warnings = []
    if k is None:
        k = budget_from_fraction(g.num_edges, k_fraction)
        if int(k_fraction * g.num_edges + 1e-9) == 0:
            warnings.append(f"budget {k_fraction} * {g.num_edges} edges floors to 0; using k=1")
            log.debug(warnings[-1])
    gt = graph_tensors(g, models)
    lat = encode(gt, models.encoder)
    w = key.tensor(lat.hw_nodes.dtype)
    hw_mod = modified_carrier(lat, gt, w, key.alpha, models)
    candidates = sample_candidates(g, g.num_edges, embed_seed(key))
    if models.editor is not None:
        scores = score_pairs(lat.hs_nodes, hw_mod, candidates, models.editor)
        plan = topk_plan(candidates, scores, k)
    else:
        present = np.arange(len(candidates)) < g.num_edges
        plan = decoder_plan(lat.hw_nodes, hw_mod, candidates, k, present)
    out = apply_edit_plan(g, plan)
    if return_record:
        return out, plan, EmbedRecord(plan, k, warnings)
    return out, plan


@torch.no_grad()
def latent_noise_attack(g: Graph, sigma: float, models: WatermarkModels, seed=0,
                        k_fraction: float = DEFAULT_K_FRACTION, k: int | None = None) -> Graph:
    """Adaptive attack stand-in: perturb carriers with Gaussian noise, then flip
    the pairs the scorer ranks lowest under the same budget as embedding."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if g.num_edges == 0:
        return g
    rng = np.random.default_rng(seed)
    k = budget_from_fraction(g.num_edges, k_fraction) if k is None else k
    gt = graph_tensors(g, models)
    lat = encode(gt, models.encoder)
    noise = torch.as_tensor(rng.standard_normal(tuple(lat.hw_nodes.shape)), dtype=lat.hw_nodes.dtype)
    hw_noisy = lat.hw_nodes + sigma * noise
    candidates = sample_candidates(g, g.num_edges, rng.integers(2 ** 63))
    if models.editor is not None:
        scores = score_pairs(lat.hs_nodes, hw_noisy, candidates, models.editor)
        plan = topk_plan(candidates, -scores, k)
    else:
        logits = decoder_logits(hw_noisy, candidates)
        plan = topk_plan(candidates, -logits.abs(), k)
    return apply_edit_plan(g, plan)
