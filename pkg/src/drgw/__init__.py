"""Keyed, invisible watermarks for graphs via disentangled latents and an invertible flow."""
from .estimator import GraphWatermarker
from .graph import AttackSpec, EditPlan, Graph, apply_edit_plan, attack, read_graph, write_graph
from .metrics import Undefined, auc, detect_auc
from .models import ModelDims, WatermarkModels, build_models
from .pipeline import watermark_embed
from .training import TrainConfig, VariantSpec, build_variant, train_variant
from .verification import DetectionResult, WatermarkKey, calibrate_null, verify

__version__ = "0.1.0"

__all__ = [
    "AttackSpec", "DetectionResult", "EditPlan", "Graph", "GraphWatermarker", "ModelDims",
    "TrainConfig", "Undefined", "VariantSpec", "WatermarkKey", "WatermarkModels", "apply_edit_plan",
    "attack", "auc", "build_models", "build_variant", "calibrate_null", "detect_auc", "read_graph",
    "train_variant", "verify", "watermark_embed", "write_graph",
]
