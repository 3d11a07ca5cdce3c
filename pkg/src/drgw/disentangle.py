"""Controlled-clustering benchmark for latent disentanglement (MIG and DCI)."""
from __future__ import annotations

import csv
import random
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import networkx as nx
import numpy as np
import torch
from scipy.stats import entropy as _entropy
from sklearn.ensemble import GradientBoostingClassifier
from sklearn.metrics import mutual_info_score
from sklearn.model_selection import train_test_split

from .encoder import encode
from .graph import Graph, read_graph, write_graph
from .models import WatermarkModels
from .pipeline import graph_tensors


class CorpusGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    num_graphs: int = 2000
    nodes_per_graph: int = 100
    attachment_m: int = 3
    clustering_bins: int = 10
    seed: int = 0
    max_retries: int = 20
    pilot_graphs: int = 20

    def __post_init__(self):
        if self.clustering_bins < 2:
            raise ValueError("need at least two clustering bins")
        if self.num_graphs < 1 or self.nodes_per_graph <= self.attachment_m:
            raise ValueError("need num_graphs >= 1 and nodes_per_graph > attachment_m")


class _TriangleTracker:
    """Adjacency sets with running triangle and connected-triple counts."""

    def __init__(self, nxg: nx.Graph):
        self.adj = {u: set(nxg.neighbors(u)) for u in nxg.nodes}
        self.triangles = sum(nx.triangles(nxg).values()) // 3
        self.triples = sum(len(s) * (len(s) - 1) // 2 for s in self.adj.values())
        self.num_edges = nxg.number_of_edges()

    @property
    def clustering(self) -> float:
        return 3.0 * self.triangles / self.triples if self.triples else 0.0

    def add(self, u, v):
        self.triangles += len(self.adj[u] & self.adj[v])
        self.triples += len(self.adj[u]) + len(self.adj[v])
        self.adj[u].add(v)
        self.adj[v].add(u)
        self.num_edges += 1

    def remove(self, u, v):
        self.adj[u].discard(v)
        self.adj[v].discard(u)
        self.triangles -= len(self.adj[u] & self.adj[v])
        self.triples -= len(self.adj[u]) + len(self.adj[v])
        self.num_edges -= 1

    def close_wedge(self, rng: random.Random, tries: int = 200) -> bool:
        centers = [c for c, s in self.adj.items() if len(s) >= 2]
        for _ in range(tries):
            c = rng.choice(centers)
            u, v = rng.sample(sorted(self.adj[c]), 2)
            if v not in self.adj[u]:
                self.add(u, v)
                return True
        return False

    def break_triangle(self, rng: random.Random, tries: int = 200) -> bool:
        edges = [(u, v) for u, s in self.adj.items() for v in s if u < v]
        if not edges:
            return False
        for _ in range(tries):
            u, v = rng.choice(edges)
            if self.adj[u] & self.adj[v]:
                self.remove(u, v)
                return True
        return False

    def to_graph(self) -> Graph:
        edges = [(u, v) for u, s in self.adj.items() for v in s if u < v]
        return Graph(len(self.adj), np.asarray(edges, dtype=np.int64).reshape(-1, 2))


def _steer(tracker: _TriangleTracker, lo: float, hi: float, rng: random.Random, cap: int) -> bool:
    """Greedy triangle edits until ``lo <= C <= hi`` or the edit cap is spent."""
    for _ in range(cap):
        c = tracker.clustering
        if lo <= c <= hi:
            return True
        moved = tracker.close_wedge(rng) if c < lo else tracker.break_triangle(rng)
        if not moved:
            return False
    return lo <= tracker.clustering <= hi


def _ba(spec: SyntheticSpec, rng: random.Random) -> nx.Graph:
    return nx.barabasi_albert_graph(spec.nodes_per_graph, spec.attachment_m, seed=rng.randrange(2 ** 31))


def clustering_range(spec: SyntheticSpec) -> tuple[float, float]:
    """Clustering interval every pilot graph reaches within the edit cap."""
    rng = random.Random(spec.seed * 7919 + 1)
    lows, highs = [], []
    for _ in range(spec.pilot_graphs):
        nxg = _ba(spec, rng)
        cap = 3 * nxg.number_of_edges()
        down = _TriangleTracker(nxg)
        _steer(down, -1.0, -1.0, rng, cap)
        up = _TriangleTracker(nxg)
        _steer(up, 2.0, 2.0, rng, cap)
        lows.append(down.clustering)
        highs.append(up.clustering)
    lo, hi = max(lows), min(highs)
    if not hi > lo:
        raise CorpusGenerationError("pilot graphs share no reachable clustering range")
    return lo, hi


def bin_edges(spec: SyntheticSpec, lo: float, hi: float) -> np.ndarray:
    return np.linspace(lo, hi, spec.clustering_bins + 1)


def generate_corpus(spec: SyntheticSpec, return_edges: bool = False):
    """Barabasi-Albert graphs steered into equally spaced clustering bins.

    Bins are assigned round-robin so every label gets the same share of graphs.
    """
    lo, hi = clustering_range(spec)
    edges = bin_edges(spec, lo, hi)
    rng = random.Random(spec.seed)
    out = []
    for i in range(spec.num_graphs):
        label = i % spec.clustering_bins
        for _attempt in range(spec.max_retries):
            tracker = _TriangleTracker(_ba(spec, rng))
            if _steer(tracker, edges[label], edges[label + 1], rng, 3 * tracker.num_edges):
                out.append((tracker.to_graph(), label))
                break
        else:
            raise CorpusGenerationError(f"graph {i}: bin {label} unreachable after {spec.max_retries} retries")
    return (out, edges) if return_edges else out


def save_corpus(corpus, directory) -> Path:
    """One edge-list file per graph plus ``labels.csv`` mapping file names to bins."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, (g, label) in enumerate(corpus):
        name = f"graph_{i:05d}.txt"
        write_graph(g, directory / name)
        rows.append(f"{name},{label}")
    (directory / "labels.csv").write_text("file,bin\n" + "\n".join(rows) + "\n")
    return directory


def load_corpus(directory) -> list:
    directory = Path(directory)
    with (directory / "labels.csv").open(newline="") as fh:
        return [(read_graph(directory / r["file"]), int(r["bin"])) for r in csv.DictReader(fh)]


def _check_labels(latents, labels) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(latents, dtype=np.float64)
    y = np.asarray(labels)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError("latents must be a (graphs, dims) matrix with one label per row")
    if np.unique(y).size < 2:
        raise ValueError("labels are constant; disentanglement scores are undefined")
    return x, y


def equal_frequency_bins(column: np.ndarray, num_bins: int = 20) -> np.ndarray:
    """Quantile binning; tied values always share a bin."""
    inner = np.unique(np.quantile(column, np.linspace(0, 1, num_bins + 1)[1:-1]))
    return np.searchsorted(inner, column, side="right")


def mig_score(latents, labels, num_bins: int = 20) -> float:
    """Normalized gap between the two most label-informative latent dimensions."""
    x, y = _check_labels(latents, labels)
    with warnings.catch_warnings():
        # bin ids are categorical; sklearn's "looks like regression" heuristic does not apply
        warnings.filterwarnings("ignore", message="The number of unique classes")
        mi = np.array([mutual_info_score(y, equal_frequency_bins(x[:, j], num_bins)) for j in range(x.shape[1])])
    top = np.sort(mi)[::-1]
    second = top[1] if top.size > 1 else 0.0
    h = _entropy(np.unique(y, return_counts=True)[1])
    return float(np.clip((top[0] - second) / h, 0.0, 1.0))


def _class_importances(model: GradientBoostingClassifier, num_features: int) -> np.ndarray:
    """Feature-by-class importance matrix from the per-class boosting trees."""
    trees = model.estimators_
    r = np.zeros((num_features, trees.shape[1]))
    for k in range(trees.shape[1]):
        r[:, k] = np.mean([t.feature_importances_ for t in trees[:, k]], axis=0)
    if trees.shape[1] == 1:
        r = np.concatenate([r, r], axis=1)
    return r


def _one_minus_entropy(p: np.ndarray, base: int) -> np.ndarray:
    if base <= 1:
        return np.ones(p.shape[0])
    return 1.0 - _entropy(p.T, base=base)


def dci_from_importance(r: np.ndarray) -> tuple[float, float]:
    """(disentanglement, completeness) of a features-by-factors importance matrix."""
    r = np.abs(np.asarray(r, dtype=np.float64))
    total = r.sum()
    if total <= 0:
        return 0.0, 0.0
    rows = r.sum(axis=1)
    keep = rows > 0
    p_rows = r[keep] / rows[keep, None]
    disent = float(np.sum(rows[keep] / total * _one_minus_entropy(p_rows, r.shape[1])))
    cols = r.sum(axis=0)
    keepc = cols > 0
    p_cols = (r[:, keepc] / cols[keepc]).T
    complete = float(np.sum(cols[keepc] / total * _one_minus_entropy(p_cols, r.shape[0])))
    return float(np.clip(disent, 0, 1)), float(np.clip(complete, 0, 1))


@dataclass
class DCIResult:
    disentanglement: float
    completeness: float
    informativeness: float


def dci_scores(latents, labels, seed: int = 0, n_estimators: int = 50) -> DCIResult:
    """Gradient-boosting DCI; each class of the binned factor counts as one factor."""
    x, y = _check_labels(latents, labels)
    seed = int(seed) % 2 ** 32
    x_tr, x_te, y_tr, y_te = train_test_split(x, y, test_size=0.2, random_state=seed, stratify=y)
    model = GradientBoostingClassifier(n_estimators=n_estimators, max_depth=3, random_state=seed)
    model.fit(x_tr, y_tr)
    d, c = dci_from_importance(_class_importances(model, x.shape[1]))
    return DCIResult(d, c, float(model.score(x_te, y_te)))


@torch.no_grad()
def pooled_latents(graphs: Sequence[Graph], models: WatermarkModels) -> tuple[np.ndarray, np.ndarray]:
    hs, hw = [], []
    for g in graphs:
        lat = encode(graph_tensors(g, models), models.encoder)
        hs.append(lat.hs_pooled.numpy())
        hw.append(lat.hw_pooled.numpy())
    return np.stack(hs), np.stack(hw)


@dataclass
class DisentangleRow:
    name: str
    mig: float
    dci_disentanglement: float
    dci_completeness: float
    dci_informativeness: float


def score_row(name: str, latents, labels, seed: int = 0) -> DisentangleRow:
    dci = dci_scores(latents, labels, seed)
    return DisentangleRow(name, mig_score(latents, labels), dci.disentanglement, dci.completeness,
                          dci.informativeness)


def run_disentangle_eval(models: WatermarkModels, spec: SyntheticSpec,
                         naive_models: Optional[WatermarkModels] = None, corpus=None) -> list[dict]:
    """Three report rows: structural head, carrier head, entangled baseline latent."""
    if corpus is None:
        corpus = generate_corpus(spec)
    graphs = [g for g, _ in corpus]
    labels = np.array([b for _, b in corpus])
    hs, hw = pooled_latents(graphs, models)
    rows = [score_row("DRGW(h_s)", hs, labels, spec.seed), score_row("DRGW(h_w)", hw, labels, spec.seed)]
    if naive_models is not None:
        naive, _ = pooled_latents(graphs, naive_models)
        rows.append(score_row("naive-entangled", naive, labels, spec.seed))
    else:
        rows.append(DisentangleRow("naive-entangled", float("nan"), float("nan"), float("nan"), float("nan")))
    return [asdict(r) for r in rows]
