"""Matched-filter watermark detection with analytic or calibrated Gaussian nulls."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import torch
from scipy.stats import norm

from .encoder import encode
from .flow import flow_forward
from .graph import Graph
from .models import WatermarkModels
from .tensors import GraphTensors, to_tensors

KEY_SCHEMA = 1
MIN_CALIBRATION_GRAPHS = 100


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class WatermarkKey:
    """Secret detection key. The watermark vector is regenerated from ``seed``.

    ``lift`` chooses how the ``base_dim`` Gaussian draw is placed in the
    ``lifted_dim`` latent space: ``"pad"`` appends zeros, ``"orthonormal"``
    applies a seed-derived isometry. Both preserve the norm.
    """

    seed: int
    base_dim: int = 128
    lifted_dim: int = 256
    alpha: float = 0.1
    beta: float = 0.05
    null_std_scale: Optional[float] = None
    lift: str = "pad"

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if self.base_dim < 1 or self.lifted_dim < self.base_dim:
            raise ValueError("need 1 <= base_dim <= lifted_dim")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if not 0.0 < self.beta <= 0.5:
            raise ValueError("beta must lie in (0, 0.5]")
        if self.lift not in ("pad", "orthonormal"):
            raise ValueError(f"unknown lift {self.lift!r}")

    def base_vector(self) -> np.ndarray:
        return np.random.default_rng(int(self.seed)).standard_normal(self.base_dim)

    def vector(self) -> np.ndarray:
        base = self.base_vector()
        if self.lift == "pad" or self.lifted_dim == self.base_dim:
            return np.concatenate([base, np.zeros(self.lifted_dim - self.base_dim)])
        rng = np.random.default_rng([int(self.seed), 1])
        q, _ = np.linalg.qr(rng.standard_normal((self.lifted_dim, self.base_dim)))
        return q @ base

    def tensor(self, dtype=torch.float64) -> torch.Tensor:
        return torch.as_tensor(self.vector(), dtype=dtype)

    @property
    def w_norm(self) -> float:
        return float(np.linalg.norm(self.base_vector()))

    def with_calibration(self, scale: Optional[float]) -> "WatermarkKey":
        return replace(self, null_std_scale=None if scale is None else float(scale))

    def to_dict(self) -> dict:
        return {"schema": KEY_SCHEMA, **asdict(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "WatermarkKey":
        if d.get("schema") != KEY_SCHEMA:
            raise ValueError(f"unsupported key schema {d.get('schema')!r}")
        fields = {k: d[k] for k in ("seed", "base_dim", "lifted_dim", "alpha", "beta") if k in d}
        return cls(null_std_scale=d.get("null_std_scale"), lift=d.get("lift", "pad"), **fields)


@dataclass
class DetectionResult:
    statistic: float
    p_value: float
    threshold: float
    decision: bool
    beta: float
    w_norm: float
    null_mean: float = 0.0
    null_std: float = 1.0
    null_std_scale: float = 1.0
    calibrated: bool = False
    z_test: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"schema": 1, **asdict(self)}


def _tensors(g, models: WatermarkModels) -> GraphTensors:
    if isinstance(g, GraphTensors):
        return g
    if g.num_nodes == 0:
        raise ValueError("cannot extract a latent from an empty graph")
    dtype = next(models.encoder.parameters()).dtype
    return to_tensors(g, dtype=dtype, num_buckets=models.dims.in_dim)


def node_latents(g, models: WatermarkModels) -> torch.Tensor:
    """Per-node Gaussian latents ``z`` (identity flow when the variant has none)."""
    gt = _tensors(g, models)
    lat = encode(gt, models.encoder)
    if models.flow is None:
        return lat.hw_nodes
    return flow_forward(lat.hw_nodes, lat.hs_nodes, gt.adj_norm, models.flow).z_nodes


def extract_latent(g, models: WatermarkModels) -> torch.Tensor:
    """Node-mean of the flow output for a suspect graph."""
    return node_latents(g, models).mean(dim=0)


def statistic(z_test, w) -> float:
    """Matched-filter statistic ``<z_test, w>``."""
    z = np.asarray(z_test.detach() if isinstance(z_test, torch.Tensor) else z_test, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if z.shape != w.shape:
        raise ValueError(f"dimension mismatch: {z.shape} vs {w.shape}")
    return float(z @ w)


def analytic_threshold(beta: float, w_norm: float, null_std_scale: float = 1.0) -> float:
    if not 0.0 < beta < 1.0:
        raise ValueError("beta must lie in (0, 1)")
    if w_norm <= 0:
        raise ValueError("w_norm must be positive")
    return float(null_std_scale * w_norm * norm.isf(beta))


def p_value(t_obs: float, w_norm: float, null_std_scale: float = 1.0) -> float:
    if w_norm <= 0:
        raise ValueError("w_norm must be positive")
    return float(norm.sf(t_obs / (null_std_scale * w_norm)))


def null_scale_from_statistics(stats: Sequence[float], w_norm: float, beta: float = 0.05) -> float:
    """Null scale such that the threshold at ``beta`` covers the calibration sample.

    The declared null is ``N(0, (scale * ||w||)^2)``. A trained model can give
    clean graphs a nonzero mean statistic for a fixed key, and then the RMS
    alone under-covers the upper tail. The scale is therefore the larger of
    the RMS about 0 and the scale whose threshold equals the conformal
    ``(1 - beta)`` order statistic, ``ceil((n + 1)(1 - beta))``-th smallest.
    """
    stats = np.asarray(stats, dtype=np.float64)
    if stats.size < MIN_CALIBRATION_GRAPHS:
        raise CalibrationError(
            f"calibration needs at least {MIN_CALIBRATION_GRAPHS} null samples, got {stats.size}"
        )
    if not 0.0 < beta < 1.0:
        raise ValueError("beta must lie in (0, 1)")
    rms = float(np.sqrt(np.mean(stats ** 2)) / w_norm)
    if not math.isfinite(rms) or rms <= 1e-12:
        raise CalibrationError("degenerate null: statistics are (numerically) constant zero")
    rank = min(math.ceil((stats.size + 1) * (1.0 - beta)), stats.size)
    tail = float(np.sort(stats)[rank - 1] / (w_norm * norm.isf(beta)))
    return max(rms, tail)


@torch.no_grad()
def calibrate_null(unwatermarked: Sequence[Graph], models: WatermarkModels, key: WatermarkKey) -> float:
    """Empirical null scale of the statistic over graphs known to be unwatermarked."""
    if len(unwatermarked) < MIN_CALIBRATION_GRAPHS:
        raise CalibrationError(
            f"calibration needs at least {MIN_CALIBRATION_GRAPHS} graphs, got {len(unwatermarked)}"
        )
    w = key.vector()
    stats = [statistic(extract_latent(g, models), w) for g in unwatermarked]
    return null_scale_from_statistics(stats, key.w_norm, key.beta)


def decide(t_obs: float, key: WatermarkKey, analytic: bool = False, z_test=None) -> DetectionResult:
    if analytic:
        scale, calibrated = 1.0, False
    elif key.null_std_scale is None:
        raise CalibrationError("key carries no calibrated null; calibrate it or use the analytic null")
    else:
        scale, calibrated = key.null_std_scale, True
    w_norm = key.w_norm
    p = p_value(t_obs, w_norm, scale)
    return DetectionResult(
        statistic=float(t_obs),
        p_value=p,
        threshold=analytic_threshold(key.beta, w_norm, scale) if key.beta < 1 else math.inf,
        decision=bool(p < key.beta),
        beta=key.beta,
        w_norm=w_norm,
        null_std=scale * w_norm,
        null_std_scale=scale,
        calibrated=calibrated,
        z_test=[] if z_test is None else [float(v) for v in z_test],
    )


@torch.no_grad()
def verify(g, key: WatermarkKey, models: WatermarkModels, analytic: bool = False) -> DetectionResult:
    """Extract, score and test one suspect graph."""
    z = extract_latent(g, models)
    return decide(statistic(z, key.vector()), key, analytic=analytic, z_test=z.tolist())
