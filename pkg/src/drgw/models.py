"""Model bundle shared by embedding, verification, training and persistence."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import torch

from .editor import PairEditor
from .encoder import DisentangledEncoder
from .flow import ConditionalFlow
from .tensors import NUM_DEGREE_BUCKETS

VARIANTS = ("full", "no_disentanglement", "no_inn", "no_editor", "naive_baseline")


@dataclass(frozen=True)
class ModelDims:
    in_dim: int = NUM_DEGREE_BUCKETS
    hidden_dim: int = 256
    latent_dim: int = 256
    gin_layers: int = 4
    flow_layers: int = 8
    flow_hidden: int = 256
    flow_clamp: float = 2.0
    editor_hidden: int = 256


@dataclass
class WatermarkModels:
    """Encoder, optional flow and optional editor for one variant.

    ``flow is None`` means the identity map (``no_inn`` and the naive
    baseline); ``editor is None`` means discretization by a thresholded
    inner-product decoder (``no_editor`` and the naive baseline).
    """

    encoder: DisentangledEncoder
    flow: Optional[ConditionalFlow]
    editor: Optional[PairEditor]
    variant: str = "full"
    dims: ModelDims = field(default_factory=ModelDims)

    def modules(self) -> dict[str, torch.nn.Module]:
        out = {"encoder": self.encoder}
        if self.flow is not None:
            out["flow"] = self.flow
        if self.editor is not None:
            out["editor"] = self.editor
        return out

    def parameters(self):
        for m in self.modules().values():
            yield from m.parameters()

    def eval(self) -> "WatermarkModels":
        for m in self.modules().values():
            m.eval()
        return self

    def state(self) -> dict:
        out = {"variant": self.variant, "dims": asdict(self.dims)}
        for name, m in self.modules().items():
            out[name] = {k: v.detach().clone() for k, v in m.state_dict().items()}
        if self.flow is not None:
            out["flow_meta"] = {"clamp": self.flow.clamp, "split_schedule": self.flow.split_schedule}
        return out

    @classmethod
    def from_state(cls, state: dict) -> "WatermarkModels":
        models = build_models(state["variant"], ModelDims(**state["dims"]))
        for name, m in models.modules().items():
            m.load_state_dict(state[name])
        if models.flow is not None and "flow_meta" in state:
            if list(state["flow_meta"]["split_schedule"]) != models.flow.split_schedule:
                raise ValueError("checkpoint split schedule does not match the flow layout")
        return models


def build_models(variant: str = "full", dims: ModelDims | None = None, seed: int = 0) -> WatermarkModels:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    dims = dims or ModelDims()
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        encoder = DisentangledEncoder(dims.in_dim, dims.hidden_dim, dims.latent_dim, dims.gin_layers,
                                      single_head=variant == "naive_baseline")
        flow = None
        if variant in ("full", "no_disentanglement", "no_editor"):
            flow = ConditionalFlow(dims.latent_dim, dims.latent_dim, dims.flow_hidden,
                                   dims.flow_layers, dims.flow_clamp)
        editor = None
        if variant in ("full", "no_disentanglement", "no_inn"):
            editor = PairEditor(dims.latent_dim, dims.latent_dim, dims.editor_hidden)
    finally:
        torch.random.set_rng_state(gen_state)
    return WatermarkModels(encoder, flow, editor, variant, dims)
