"""Three-stage training curriculum and ablation variants.

Stage 1 trains the encoder alone (invariance + orthogonality). Stage 2
freezes it and fits the flow and editor on reconstruction, likelihood and
cycle consistency. Stage 3 fine-tunes everything to maximize the detection
statistic on attacked, watermarked graphs, backpropagating through the
top-k selection with a straight-through estimator.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch.nn import functional as F

from .editor import budget_from_fraction, flip_dense, score_pairs, straight_through_mask
from .encoder import encode, encoder_loss
from .flow import flow_forward, flow_inverse, inject_watermark, nll_from_latent
from .graph import AttackSpec, Graph, apply_edit_plan, attack, sample_candidates
from .models import VARIANTS, ModelDims, WatermarkModels, build_models
from .pipeline import decoder_logits, graph_tensors
from .tensors import tensors_from_dense
from .verification import WatermarkKey

log = logging.getLogger(__name__)

DEFAULT_ATTACK_POOL = (
    ("edge_flip", 0.1),
    ("edge_flip", 0.3),
    ("node_delete", 0.1),
    ("node_delete", 0.3),
    ("isomorphism", 0.0),
)


class TrainingDivergence(RuntimeError):
    """Non-finite loss; ``last_good`` holds the model state before the failing step."""

    def __init__(self, message: str, last_good: dict | None = None):
        super().__init__(message)
        self.last_good = last_good


class StageOrderError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    lr_min: float = 1e-5
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 1e-4
    epochs: tuple = (1000, 2000, 3000)
    batch_size: int = 32
    lambda_mi: float = 0.1
    lambda_recon: float = 1.0
    lambda_inn: float = 5.0
    lambda_cycle: float = 10.0
    lambda_robust: float = 1.0
    alpha: float = 0.1
    k_fraction: float = 0.001
    key_base_dim: int = 128
    node_drop_frac: float = 0.1
    edge_perturb_frac: float = 0.1
    attack_pool: tuple = DEFAULT_ATTACK_POOL
    freeze_encoder_stage3: bool = False
    centred_robust: bool = False
    seed: int = 0

    def __post_init__(self):
        self.epochs = tuple(int(e) for e in self.epochs)
        self.betas = tuple(float(b) for b in self.betas)
        self.attack_pool = tuple((str(k), float(i)) for k, i in self.attack_pool)
        if len(self.epochs) != 3 or any(e < 0 for e in self.epochs):
            raise ValueError("epochs must be three non-negative integers")
        for name in ("lambda_mi", "lambda_recon", "lambda_inn", "lambda_cycle", "lambda_robust"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        for kind, intensity in self.attack_pool:
            if kind not in ("edge_flip", "node_delete", "isomorphism", "identity"):
                raise ValueError(f"unsupported training attack {kind!r}")
            if not 0.0 <= intensity <= 1.0:
                raise ValueError("attack intensity must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["epochs"] = list(self.epochs)
        d["betas"] = list(self.betas)
        d["attack_pool"] = [list(p) for p in self.attack_pool]
        return d


@dataclass
class VariantSpec:
    name: str

    def __post_init__(self):
        if self.name not in VARIANTS:
            raise ValueError(f"unknown variant {self.name!r}; expected one of {VARIANTS}")

    @property
    def stages(self) -> tuple[bool, bool, bool]:
        """Which of the three stages this variant runs."""
        return {
            "full": (True, True, True),
            "no_disentanglement": (False, True, True),
            "no_inn": (True, True, True),
            "no_editor": (True, True, False),
            "naive_baseline": (False, True, False),
        }[self.name]


@dataclass
class TrainState:
    """Models plus curriculum bookkeeping and per-epoch loss traces."""

    models: WatermarkModels
    config: TrainConfig
    completed: list = field(default_factory=list)
    traces: dict = field(default_factory=dict)

    def require(self, stage: int) -> None:
        missing = [s for s in range(1, stage) if s not in self.completed]
        if missing:
            raise StageOrderError(f"stage {stage} needs completed stage(s) {missing}")

    def to_checkpoint(self) -> dict:
        return {
            "models": self.models.state(),
            "config": self.config.to_dict(),
            "completed": list(self.completed),
            "stage": max(self.completed) if self.completed else 0,
            "traces": self.traces,
        }

    @classmethod
    def from_checkpoint(cls, payload: dict) -> "TrainState":
        return cls(
            WatermarkModels.from_state(payload["models"]),
            TrainConfig.from_dict(payload["config"]),
            list(payload["completed"]),
            dict(payload.get("traces", {})),
        )


def build_variant(spec, cfg: TrainConfig | None = None, dims: ModelDims | None = None) -> TrainState:
    """Fresh models and a training plan for an ablation variant."""
    spec = spec if isinstance(spec, VariantSpec) else VariantSpec(spec)
    cfg = cfg or TrainConfig()
    models = build_models(spec.name, dims, seed=cfg.seed)
    return TrainState(models, cfg)


# --------------------------------------------------------------------------- #
# Shared helpers                                                              #
# --------------------------------------------------------------------------- #

def _optimizer(params, cfg: TrainConfig, total_steps: int):
    params = [p for p in params if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(total_steps, 1), eta_min=cfg.lr_min)
    return opt, sched


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i: i + batch_size]


def _snapshot(models: WatermarkModels) -> dict:
    return models.state()


def _check_finite(value: torch.Tensor, stage: int, epoch: int, models: WatermarkModels, last_good):
    if not torch.isfinite(value):
        raise TrainingDivergence(f"stage {stage}: non-finite loss at epoch {epoch}", last_good)


def _set_trainable(models: WatermarkModels, encoder: bool, flow: bool, editor: bool) -> None:
    for flag, module in ((encoder, models.encoder), (flow, models.flow), (editor, models.editor)):
        if module is not None:
            for p in module.parameters():
                p.requires_grad_(flag)


def _run_stage(state: TrainState, stage: int, corpus: Sequence[Graph], params, step_loss: Callable,
               epochs: int, log_path=None, on_epoch: Callable | None = None):
    cfg = state.config
    steps_per_epoch = math.ceil(len(corpus) / cfg.batch_size)
    opt, sched = _optimizer(params, cfg, epochs * steps_per_epoch)
    trace: list[dict] = []
    step = 0
    for epoch in range(epochs):
        rng = np.random.default_rng([cfg.seed, stage, epoch])
        sums: dict[str, float] = {}
        count = 0
        t0 = time.perf_counter()
        for batch in _batches(len(corpus), cfg.batch_size, rng):
            last_good = None
            opt.zero_grad(set_to_none=True)
            loss, parts = step_loss([corpus[i] for i in batch], batch, np.random.SeedSequence([cfg.seed, stage, step]))
            if not torch.isfinite(loss):
                last_good = _snapshot(state.models)
                _check_finite(loss, stage, epoch, state.models, last_good)
            loss.backward()
            opt.step()
            sched.step()
            step += 1
            for name, val in {"loss": loss.item(), **parts}.items():
                sums[name] = sums.get(name, 0.0) + val * len(batch)
            count += len(batch)
        row = {"stage": stage, "epoch": epoch, **{k: v / count for k, v in sums.items()},
               "lr": sched.get_last_lr()[0], "seconds": time.perf_counter() - t0}
        trace.append(row)
        log.info("stage %d epoch %d loss %.6g", stage, epoch, row["loss"])
        if on_epoch is not None:
            on_epoch(row)
    state.traces[f"stage{stage}"] = trace
    if log_path is not None:
        append_trace_csv(log_path, trace)
    return trace


def append_trace_csv(path, trace: list[dict]) -> None:
    """Append trace rows in long form (stage, epoch, component, value) so stages share one header."""
    if not trace:
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not path.exists()
    with path.open("a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(["stage", "epoch", "component", "value"])
        for row in trace:
            for name, value in row.items():
                if name not in ("stage", "epoch"):
                    writer.writerow([row["stage"], row["epoch"], name, repr(float(value))])


# --------------------------------------------------------------------------- #
# Stage 1                                                                     #
# --------------------------------------------------------------------------- #

def stage1_train(corpus: Sequence[Graph], state: TrainState, log_path=None, epochs: int | None = None):
    """Fit the encoder on ``L_inv + lambda_mi * L_ortho``."""
    if not corpus:
        raise ValueError("stage 1 needs a non-empty corpus")
    cfg = state.config
    epochs = cfg.epochs[0] if epochs is None else epochs
    models = state.models
    _set_trainable(models, True, False, False)
    models.encoder.train()

    def step_loss(batch, _idx, ss):
        loss, parts = encoder_loss(batch, models.encoder, cfg.lambda_mi, ss,
                                   cfg.node_drop_frac, cfg.edge_perturb_frac, return_parts=True)
        return loss, parts

    trace = _run_stage(state, 1, corpus, models.encoder.parameters(), step_loss, epochs, log_path)
    _mark(state, 1)
    return trace


def skip_stage(state: TrainState, stage: int) -> None:
    state.require(stage)
    state.traces[f"stage{stage}"] = []
    _mark(state, stage)


def _mark(state: TrainState, stage: int) -> None:
    if stage not in state.completed:
        state.completed.append(stage)
        state.completed.sort()


# --------------------------------------------------------------------------- #
# Stage 2                                                                     #
# --------------------------------------------------------------------------- #

def reconstruction_bce(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(logits, labels)


def candidate_labels(g: Graph, candidates: np.ndarray, dtype=torch.float64) -> torch.Tensor:
    keys = candidates[:, 0] * g.num_nodes + candidates[:, 1]
    return torch.as_tensor(np.isin(keys, g.edge_keys()), dtype=dtype)


def stage2_losses(g: Graph, models: WatermarkModels, cfg: TrainConfig, seed, cache: dict | None = None,
                  train_encoder: bool = False) -> dict[str, torch.Tensor]:
    """Reconstruction, likelihood and cycle terms for one graph."""
    key = id(g)
    if cache is not None and key in cache:
        gt, hs, hw = cache[key]
    else:
        gt = graph_tensors(g, models)
        with torch.set_grad_enabled(train_encoder):
            lat = encode(gt, models.encoder)
        hs, hw = lat.hs_nodes, lat.hw_nodes
        if cache is not None and not train_encoder:
            cache[key] = (gt, hs.detach(), hw.detach())
    cands = sample_candidates(g, g.num_edges, seed)
    labels = candidate_labels(g, cands, hw.dtype)
    out = {}
    carrier = hw
    if models.flow is not None:
        latent = flow_forward(hw, hs, gt.adj_norm, models.flow)
        out["nll"] = nll_from_latent(latent)
        carrier = flow_inverse(latent.z_nodes, hs, gt.adj_norm, models.flow)
        out["cycle"] = ((carrier - hw) ** 2).sum(dim=1).mean()
    if models.editor is not None:
        logits = score_pairs(hs, carrier, cands, models.editor)
    else:
        logits = decoder_logits(carrier, cands)
    out["recon"] = reconstruction_bce(logits, labels)
    return out


def stage2_objective(parts: dict, cfg: TrainConfig) -> torch.Tensor:
    total = cfg.lambda_recon * parts["recon"]
    if "nll" in parts:
        total = total + cfg.lambda_inn * parts["nll"] + cfg.lambda_cycle * parts["cycle"]
    return total


def stage2_train(corpus: Sequence[Graph], state: TrainState, log_path=None, epochs: int | None = None):
    """Fit flow and editor with the encoder frozen.

    The naive baseline is an autoencoder, so its encoder is trained here on
    reconstruction instead of being frozen.
    """
    state.require(2)
    cfg = state.config
    epochs = cfg.epochs[1] if epochs is None else epochs
    models = state.models
    train_encoder = models.variant == "naive_baseline"
    _set_trainable(models, train_encoder, True, True)
    models.encoder.train(train_encoder)
    cache: dict = {}
    params = list(models.encoder.parameters()) if train_encoder else []
    for m in (models.flow, models.editor):
        if m is not None:
            params += list(m.parameters())

    def step_loss(batch, _idx, ss):
        seeds = ss.spawn(len(batch))
        per = [stage2_losses(g, models, cfg, s, cache, train_encoder) for g, s in zip(batch, seeds)]
        parts = {k: torch.stack([p[k] for p in per]).mean() for k in per[0]}
        return stage2_objective(parts, cfg), {k: v.item() for k, v in parts.items()}

    trace = _run_stage(state, 2, corpus, params, step_loss, epochs, log_path)
    _mark(state, 2)
    return trace


# --------------------------------------------------------------------------- #
# Stage 3                                                                     #
# --------------------------------------------------------------------------- #

def _attack_dense(gw: Graph, adj_w: torch.Tensor, spec: AttackSpec):
    """Apply ``spec`` to both the discrete graph and its differentiable adjacency."""
    if spec.kind == "identity":
        return gw, adj_w
    out, align = attack(gw, spec, return_alignment=True)
    if spec.kind == "edge_flip":
        keys = np.setxor1d(gw.edge_keys(), out.edge_keys())
        pairs = torch.as_tensor(np.stack([keys // gw.num_nodes, keys % gw.num_nodes], axis=1))
        return out, flip_dense(adj_w, pairs, torch.ones(pairs.shape[0], dtype=adj_w.dtype))
    idx = torch.as_tensor(align, dtype=torch.long)
    return out, adj_w[idx][:, idx]


def robust_statistic(g: Graph, w: torch.Tensor, alpha: float, k: int, models: WatermarkModels,
                     spec, seed, centred: bool = False) -> tuple[torch.Tensor, torch.Tensor]:
    """Differentiable ``T(A(G + dE), w)`` for one graph; also returns the clean NLL.

    ``centred`` subtracts the same key's statistic on the unedited graph.
    For a zero-mean key that term has zero expectation (and zero expected
    gradient), so the objective is unchanged on average while the
    graph-to-graph spread of the pooled latent cancels out of each step.
    """
    gt = graph_tensors(g, models)
    lat = encode(gt, models.encoder)
    hs, hw = lat.hs_nodes, lat.hw_nodes
    if models.flow is not None:
        latent = flow_forward(hw, hs, gt.adj_norm, models.flow)
        nll = nll_from_latent(latent)
        clean_z = latent.z_nodes
        hw_mod = flow_inverse(inject_watermark(latent, w, alpha).z_nodes, hs, gt.adj_norm, models.flow)
    else:
        nll = torch.zeros((), dtype=hw.dtype)
        clean_z = hw
        hw_mod = hw + alpha * w
    cands = sample_candidates(g, g.num_edges, seed)
    scores = score_pairs(hs, hw_mod, cands, models.editor)
    handle = straight_through_mask(cands, scores, k)
    gw = apply_edit_plan(g, handle.plan)
    adj_w = flip_dense(gt.adj, handle.pairs, handle.mask)
    if spec is not None:
        _, adj_att = _attack_dense(gw, adj_w, spec)
    else:
        adj_att = adj_w
    gt_att = tensors_from_dense(adj_att, num_buckets=models.dims.in_dim)
    lat_att = encode(gt_att, models.encoder)
    if models.flow is not None:
        z = flow_forward(lat_att.hw_nodes, lat_att.hs_nodes, gt_att.adj_norm, models.flow).z_nodes
    else:
        z = lat_att.hw_nodes
    t = z.mean(dim=0) @ w
    if centred:
        t = t - clean_z.mean(dim=0) @ w
    return t, nll


def stage3_train(corpus: Sequence[Graph], state: TrainState, log_path=None, epochs: int | None = None,
                 attack_pool=None):
    """Fine-tune for attacked-statistic maximization plus flow likelihood."""
    state.require(3)
    cfg = state.config
    models = state.models
    if models.editor is None:
        raise ValueError(f"variant {models.variant!r} has no trainable discretizer for stage 3")
    epochs = cfg.epochs[2] if epochs is None else epochs
    pool = tuple(cfg.attack_pool if attack_pool is None else attack_pool)
    train_encoder = not cfg.freeze_encoder_stage3
    _set_trainable(models, train_encoder, True, True)
    models.encoder.train(train_encoder)
    params = [p for m in models.modules().values() for p in m.parameters()]
    dim = models.dims.latent_dim
    base_dim = min(cfg.key_base_dim, dim)

    def step_loss(batch, _idx, ss):
        rng = np.random.default_rng(ss)
        key = WatermarkKey(int(rng.integers(2 ** 63)), base_dim, dim, cfg.alpha)
        w = key.tensor(next(models.encoder.parameters()).dtype)
        stats, nlls = [], []
        for g in batch:
            kind, intensity = pool[rng.integers(len(pool))] if pool else ("identity", 0.0)
            spec = None if kind == "identity" else AttackSpec(kind, intensity, int(rng.integers(2 ** 63)))
            k = budget_from_fraction(g.num_edges, cfg.k_fraction)
            t, nll = robust_statistic(g, w, cfg.alpha, k, models, spec, rng.integers(2 ** 63),
                                      centred=cfg.centred_robust)
            stats.append(t)
            nlls.append(nll)
        robust = -torch.stack(stats).mean()
        nll = torch.stack(nlls).mean()
        loss = cfg.lambda_robust * robust
        if models.flow is not None:
            loss = loss + cfg.lambda_inn * nll
        return loss, {"robust": robust.item(), "nll": nll.item()}

    trace = _run_stage(state, 3, corpus, params, step_loss, epochs, log_path)
    _mark(state, 3)
    return trace


def train_variant(corpus: Sequence[Graph], state: TrainState, log_path=None, epochs=None,
                  checkpoint_cb: Callable | None = None) -> TrainState:
    """Run every stage enabled for the state's variant, in order."""
    spec = VariantSpec(state.models.variant)
    epochs = state.config.epochs if epochs is None else tuple(epochs)
    runners = (stage1_train, stage2_train, stage3_train)
    for stage, (enabled, runner) in enumerate(zip(spec.stages, runners), start=1):
        if stage in state.completed:
            continue
        if enabled and epochs[stage - 1] > 0:
            runner(corpus, state, log_path, epochs=epochs[stage - 1])
        else:
            skip_stage(state, stage)
        if checkpoint_cb is not None:
            checkpoint_cb(state, stage)
    for m in state.models.modules().values():
        m.eval()
        for p in m.parameters():
            p.requires_grad_(False)
    return state
