"""Experiment configuration, training orchestration, evaluation grids and report tables."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .datasets import split_corpus, synthetic_corpus
from .graph import AttackSpec, Graph, attack, read_graph
from .io import atomic_write_text, load_checkpoint, read_json, save_checkpoint, write_json
from .metrics import (assortativity_change_pct, clustering_change_pct, detect_auc, dk2_deviation,
                      embedding_cosine, flipped_edges_pct, is_undefined, link_pred_drop_pct,
                      statistics_for, auc)
from .models import VARIANTS, ModelDims, WatermarkModels
from .pipeline import latent_noise_attack, watermark_embed
from .training import (StageOrderError, TrainConfig, TrainState, VariantSpec, append_trace_csv,
                       build_variant, train_variant)
from .verification import WatermarkKey, calibrate_null

log = logging.getLogger(__name__)

CONFIG_SCHEMA = 1
MANIFEST_SCHEMA = 1

DEFAULT_EVAL_ATTACKS = (
    ("clean", 0.0),
    ("edge_flip", 0.1),
    ("edge_flip", 0.3),
    ("node_delete", 0.1),
    ("node_delete", 0.3),
    ("isomorphism", 0.0),
    ("latent_noise", 0.5),
)


class ConfigError(ValueError):
    pass


@dataclass
class CorpusConfig:
    num_graphs: int = 200
    min_nodes: int = 100
    max_nodes: int = 500
    ba_fraction: float = 0.5
    paths: list = field(default_factory=list)
    test_fraction: float = 0.2
    calibration_graphs: int = 200


@dataclass
class EvalConfig:
    key_seed: Optional[int] = None
    beta: float = 0.05
    attacks: list = field(default_factory=lambda: [list(a) for a in DEFAULT_EVAL_ATTACKS])
    link_prediction: bool = True


@dataclass
class SweepConfig:
    alphas: list = field(default_factory=lambda: [0.05, 0.1, 0.2])
    k_fractions: list = field(default_factory=lambda: [0.001, 0.01, 0.05])


@dataclass
class ExperimentConfig:
    seed: int = 0
    variants: list = field(default_factory=lambda: ["full", "no_editor", "naive_baseline"])
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelDims = field(default_factory=ModelDims)
    training: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def to_dict(self) -> dict:
        return {
            "schema": CONFIG_SCHEMA,
            "seed": self.seed,
            "variants": list(self.variants),
            "corpus": asdict(self.corpus),
            "model": asdict(self.model),
            "training": self.training.to_dict(),
            "evaluation": asdict(self.evaluation),
            "sweep": asdict(self.sweep),
        }

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _section(cls, raw, name: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"[{name}] must be a table/object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"[{name}] unknown field(s): {', '.join(unknown)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}] {exc}") from exc


def config_from_dict(d: dict, seed: Optional[int] = None) -> ExperimentConfig:
    if not isinstance(d, dict):
        raise ConfigError("config root must be an object")
    schema = d.get("schema", CONFIG_SCHEMA)
    if schema != CONFIG_SCHEMA:
        raise ConfigError(f"unsupported config schema {schema!r}")
    allowed = {"schema", "seed", "variants", "corpus", "model", "training", "evaluation", "sweep"}
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(f"unknown top-level field(s): {', '.join(unknown)}")
    root_seed = int(d.get("seed", 0) if seed is None else seed)
    variants = list(d.get("variants", ["full", "no_editor", "naive_baseline"]))
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"variants: unknown variant {v!r}; expected one of {list(VARIANTS)}")
    training_raw = dict(d.get("training") or {})
    training_raw.setdefault("seed", root_seed)
    if seed is not None:
        training_raw["seed"] = root_seed
    return ExperimentConfig(
        seed=root_seed,
        variants=variants,
        corpus=_section(CorpusConfig, d.get("corpus"), "corpus"),
        model=_section(ModelDims, d.get("model"), "model"),
        training=_section(TrainConfig, training_raw, "training"),
        evaluation=_section(EvalConfig, d.get("evaluation"), "evaluation"),
        sweep=_section(SweepConfig, d.get("sweep"), "sweep"),
    )


def load_config(path=None, seed: Optional[int] = None) -> ExperimentConfig:
    """Read a JSON or TOML config; parse errors carry line and column."""
    if path is None:
        return config_from_dict({}, seed)
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        try:
            raw = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    else:
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    try:
        return config_from_dict(raw, seed)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def set_deterministic_from_env() -> bool:
    if os.environ.get("DRGW_DETERMINISTIC", "") not in ("", "0"):
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
        return True
    return False


def derived_seed(root: int, *tags) -> int:
    """Child seed for a named purpose; every random stream descends from ``root``."""
    words = [int(root)] + [int.from_bytes(hashlib.sha256(str(t).encode()).digest()[:4], "little") for t in tags]
    return int(np.random.SeedSequence(words).generate_state(1, dtype=np.uint64)[0] >> 1)


def model_dims_for_key(dims: ModelDims, base_dim: int) -> tuple[int, int]:
    return min(base_dim, dims.latent_dim), dims.latent_dim


# --------------------------------------------------------------------------- #
# Corpora                                                                     #
# --------------------------------------------------------------------------- #

def build_corpus(cfg: ExperimentConfig) -> list[Graph]:
    c = cfg.corpus
    graphs = []
    if c.num_graphs:
        graphs += synthetic_corpus(c.num_graphs, c.min_nodes, c.max_nodes, c.ba_fraction,
                                   seed=derived_seed(cfg.seed, "corpus"))
    for p in c.paths:
        p = Path(p)
        if not p.exists():
            raise FileNotFoundError(f"corpus path {p} does not exist")
        files = sorted(q for q in p.iterdir() if q.is_file()) if p.is_dir() else [p]
        graphs += [read_graph(q) for q in files]
    if not graphs:
        raise ConfigError("corpus is empty")
    return graphs


def corpus_split(cfg: ExperimentConfig):
    return split_corpus(build_corpus(cfg), cfg.corpus.test_fraction, seed=derived_seed(cfg.seed, "split"))


def calibration_corpus(cfg: ExperimentConfig, count: Optional[int] = None, tag: str = "calibration") -> list[Graph]:
    c = cfg.corpus
    return synthetic_corpus(c.calibration_graphs if count is None else count, c.min_nodes, c.max_nodes,
                            c.ba_fraction, seed=derived_seed(cfg.seed, tag))


def experiment_key(cfg: ExperimentConfig) -> WatermarkKey:
    base, lifted = model_dims_for_key(cfg.model, cfg.training.key_base_dim)
    seed = cfg.evaluation.key_seed
    if seed is None:
        seed = derived_seed(cfg.seed, "key")
    return WatermarkKey(int(seed), base, lifted, cfg.training.alpha, cfg.evaluation.beta)


# --------------------------------------------------------------------------- #
# Training and checkpoints                                                    #
# --------------------------------------------------------------------------- #

def checkpoint_path(out: Path, variant: str, stage: int) -> Path:
    return Path(out) / "checkpoints" / variant / f"stage{stage}.pt"


def final_checkpoint(out: Path, variant: str) -> Path:
    return checkpoint_path(out, variant, 3)


def load_models(path) -> WatermarkModels:
    payload = load_checkpoint(path)
    return TrainState.from_checkpoint(payload).models.eval()


def _latest_checkpoint(out: Path, variant: str) -> Optional[Path]:
    for stage in (3, 2, 1):
        p = checkpoint_path(out, variant, stage)
        if p.exists():
            return p
    return None


def train_variants(cfg: ExperimentConfig, out, resume: bool = False, start_stage: int = 1,
                   variants: Optional[Sequence[str]] = None) -> dict[str, TrainState]:
    """Train each configured variant, writing stage checkpoints and loss CSVs under ``out``."""
    out = Path(out)
    train, _test = corpus_split(cfg)
    states = {}
    for variant in variants or cfg.variants:
        state = None
        if resume or start_stage > 1:
            prior = _latest_checkpoint(out, variant)
            if prior is not None:
                state = TrainState.from_checkpoint(load_checkpoint(prior))
            elif start_stage > 1:
                raise StageOrderError(
                    f"{variant}: cannot start at stage {start_stage} without a prior stage checkpoint")
        if state is None:
            state = build_variant(VariantSpec(variant), cfg.training, cfg.model)
        if start_stage > 1:
            state.require(start_stage)
        log_path = out / "losses" / f"{variant}.csv"

        def save(st: TrainState, stage: int, _variant=variant):
            save_checkpoint(checkpoint_path(out, _variant, stage), st.to_checkpoint())

        log.info("training %s on %d graphs", variant, len(train))
        train_variant(train, state, log_path=log_path, checkpoint_cb=save)
        save(state, 3)
        states[variant] = state
    write_manifest(cfg, out, {"trained": list(states)})
    return states


def final_losses(state: TrainState) -> dict[str, float]:
    out = {}
    for stage, rows in sorted(state.traces.items()):
        if rows:
            out[stage] = float(rows[-1]["loss"])
    return out


def write_manifest(cfg: ExperimentConfig, out, extra: Optional[dict] = None) -> Path:
    path = Path(out) / "manifest.json"
    manifest = {"schema": MANIFEST_SCHEMA, "root_seed": cfg.seed, "config_digest": cfg.digest(),
                "config": cfg.to_dict(), "torch": torch.__version__, "numpy": np.__version__}
    if path.exists():
        try:
            old = read_json(path, MANIFEST_SCHEMA)
            manifest.update({k: v for k, v in old.items() if k not in manifest})
        except Exception:  # unreadable manifests are simply replaced
            pass
    manifest.update(extra or {})
    write_json(path, manifest)
    return path


def calibrated_key(cfg: ExperimentConfig, models: WatermarkModels) -> WatermarkKey:
    key = experiment_key(cfg)
    return key.with_calibration(calibrate_null(calibration_corpus(cfg), models, key))


# --------------------------------------------------------------------------- #
# Evaluation                                                                  #
# --------------------------------------------------------------------------- #

def _attack_label(kind: str, intensity: float) -> str:
    return kind if kind in ("clean", "isomorphism") else f"{kind}@{intensity:g}"


def attacked_statistics(graphs, key, models, kind: str, intensity: float, seed: int, cfg) -> np.ndarray:
    if kind == "clean":
        return statistics_for(graphs, key, models)
    if kind == "latent_noise":
        noisy = [latent_noise_attack(g, intensity, models, seed=derived_seed(seed, i),
                                     k_fraction=cfg.training.k_fraction) for i, g in enumerate(graphs)]
        return statistics_for(noisy, key, models)
    return statistics_for(graphs, key, models, AttackSpec(kind, intensity, seed), seed)


def _mean(values) -> object:
    vals = [v for v in values if not is_undefined(v)]
    return float(np.mean(vals)) if vals else "-"


def transparency_row(pairs, models, seed: int, link_prediction: bool = True) -> dict:
    """Mean fidelity metrics over (original, watermarked) pairs."""
    row = {
        "flipped_edges_pct": _mean(flipped_edges_pct(g, gw) for g, gw in pairs),
        "assortativity_change_pct": _mean(assortativity_change_pct(g, gw) for g, gw in pairs),
        "clustering_change_pct": _mean(clustering_change_pct(g, gw) for g, gw in pairs),
        "dk2_deviation": _mean(dk2_deviation(g, gw) for g, gw in pairs),
        "embedding_cosine": _mean(embedding_cosine(g, gw, np.arange(g.num_nodes), models) for g, gw in pairs),
    }
    if link_prediction:
        row["link_pred_drop_pct"] = _mean(link_pred_drop_pct(g, gw, seed) for g, gw in pairs)
    return row


def evaluate_variant(variant: str, models: WatermarkModels, test: Sequence[Graph], key: WatermarkKey,
                     cfg: ExperimentConfig) -> tuple[list[dict], dict]:
    """Per-attack AUC rows plus one transparency row for a trained variant."""
    watermarked = [watermark_embed(g, key, models, cfg.training.k_fraction)[0] for g in test]
    rows = []
    for kind, intensity in cfg.evaluation.attacks:
        seed = derived_seed(cfg.seed, "eval", kind, intensity)
        label = _attack_label(kind, float(intensity))
        try:
            pos = attacked_statistics(watermarked, key, models, kind, float(intensity), seed, cfg)
            neg = attacked_statistics(test, key, models, kind, float(intensity), seed + 1, cfg)
            rows.append({"variant": variant, "attack": kind, "intensity": float(intensity),
                         "label": label, "auc": auc(pos, neg), "error": ""})
        except Exception as exc:  # one failing cell must not sink the grid
            log.warning("evaluation cell %s/%s failed: %s", variant, label, exc)
            rows.append({"variant": variant, "attack": kind, "intensity": float(intensity),
                         "label": label, "auc": "-", "error": str(exc)})
    fidelity = {"variant": variant,
                **transparency_row(list(zip(test, watermarked)), models, cfg.seed,
                                   cfg.evaluation.link_prediction)}
    return rows, fidelity


def evaluate(cfg: ExperimentConfig, out, variants: Optional[Sequence[str]] = None) -> dict[str, Path]:
    out = Path(out)
    _train, test = corpus_split(cfg)
    auc_rows, fidelity_rows = [], []
    for variant in variants or cfg.variants:
        path = final_checkpoint(out, variant)
        if not path.exists():
            log.warning("no trained checkpoint for %s at %s; skipping", variant, path)
            continue
        models = load_models(path)
        rows, fid = evaluate_variant(variant, models, test, experiment_key(cfg), cfg)
        auc_rows += rows
        fidelity_rows.append(fid)
    paths = {"auc": out / "tables" / "detection_auc.csv", "fidelity": out / "tables" / "transparency.csv"}
    write_csv(paths["auc"], auc_rows)
    write_csv(paths["fidelity"], fidelity_rows)
    return paths


def sweep(cfg: ExperimentConfig, out, variant: str = "full") -> Path:
    """Robustness/fidelity trade-off over embedding strength and edit budget."""
    out = Path(out)
    _train, test = corpus_split(cfg)
    models = load_models(final_checkpoint(out, variant))
    base = experiment_key(cfg)
    rows = []
    for alpha in cfg.sweep.alphas:
        key = WatermarkKey(base.seed, base.base_dim, base.lifted_dim, float(alpha), base.beta)
        for kf in cfg.sweep.k_fractions:
            wm = [watermark_embed(g, key, models, float(kf))[0] for g in test]
            pos = statistics_for(wm, key, models, AttackSpec("edge_flip", 0.3, derived_seed(cfg.seed, "sweep")))
            neg = statistics_for(test, key, models, AttackSpec("edge_flip", 0.3, derived_seed(cfg.seed, "sweep") + 1))
            rows.append({
                "alpha": float(alpha), "k_fraction": float(kf),
                "clean_auc": auc(statistics_for(wm, key, models), statistics_for(test, key, models)),
                "edge_flip_0.3_auc": auc(pos, neg),
                **transparency_row(list(zip(test, wm)), models, cfg.seed, link_prediction=False),
            })
    path = out / "tables" / "sweep.csv"
    write_csv(path, rows)
    return path


# --------------------------------------------------------------------------- #
# Tables                                                                      #
# --------------------------------------------------------------------------- #

def write_csv(path, rows: Sequence[dict]) -> None:
    buf = io.StringIO()
    if rows:
        header = list(dict.fromkeys(k for r in rows for k in r))
        writer = csv.DictWriter(buf, fieldnames=header)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: ("-" if is_undefined(v) else v) for k, v in r.items()})
    atomic_write_text(Path(path), buf.getvalue())


def _fmt(v: str) -> str:
    try:
        return f"{float(v):.4f}"
    except ValueError:
        return v or "-"


def markdown_table(path) -> str:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return "_empty_\n"
    header, body = rows[0], rows[1:]
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(_fmt(c) for c in r) + " |" for r in body]
    return "\n".join(lines) + "\n"


def pivot_auc(path) -> str:
    """Variant-by-attack AUC grid in the shape of a detection results table."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return "_empty_\n"
    labels = list(dict.fromkeys(r["label"] for r in rows))
    variants = list(dict.fromkeys(r["variant"] for r in rows))
    cell = {(r["variant"], r["label"]): r["auc"] for r in rows}
    lines = ["| variant | " + " | ".join(labels) + " |", "|" + "---|" * (len(labels) + 1)]
    for v in variants:
        lines.append(f"| {v} | " + " | ".join(_fmt(cell.get((v, l), "-")) for l in labels) + " |")
    return "\n".join(lines) + "\n"


def report(out) -> str:
    out = Path(out)
    tables = out / "tables"
    parts = ["# Results\n"]
    if (tables / "detection_auc.csv").exists():
        parts += ["## Detection AUC\n", pivot_auc(tables / "detection_auc.csv")]
    if (tables / "transparency.csv").exists():
        parts += ["## Transparency\n", markdown_table(tables / "transparency.csv")]
    if (tables / "sweep.csv").exists():
        parts += ["## Strength and budget sweep\n", markdown_table(tables / "sweep.csv")]
    if (tables / "disentanglement.csv").exists():
        parts += ["## Disentanglement\n", markdown_table(tables / "disentanglement.csv")]
    text = "\n".join(parts)
    atomic_write_text(out / "report.md", text)
    return text
