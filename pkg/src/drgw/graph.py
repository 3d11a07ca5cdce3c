"""Undirected simple graphs, edit plans, augmentations and structural attacks.

Every operation here is pure: inputs are never mutated and randomness is
drawn from a ``numpy.random.Generator`` seeded by the caller.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

ATTACK_KINDS = ("edge_flip", "node_delete", "isomorphism", "latent_noise")

# Above this many node pairs, non-edges are drawn by rejection sampling
# instead of enumerating the complement.
_ENUMERATE_PAIR_LIMIT = 4_000_000


class GraphError(ValueError):
    """Raised when a graph or a graph file violates the simple-graph invariants."""


class InvalidPlanError(ValueError):
    pass


class DegenerateAugmentationError(ValueError):
    pass


class UnsupportedAttackError(ValueError):
    pass


def _canonical_edges(edges, num_nodes: int) -> np.ndarray:
    arr = np.asarray(edges, dtype=np.int64)
    if arr.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise GraphError(f"edges must have shape (M, 2), got {arr.shape}")
    if np.any(arr < 0) or np.any(arr >= num_nodes):
        raise GraphError(f"edge endpoint outside [0, {num_nodes})")
    if np.any(arr[:, 0] == arr[:, 1]):
        raise GraphError("self-loops are not allowed")
    arr = np.sort(arr, axis=1)
    keys = arr[:, 0] * num_nodes + arr[:, 1]
    uniq = np.unique(keys)
    if uniq.size != keys.size:
        raise GraphError("duplicate edges are not allowed")
    return np.stack([uniq // num_nodes, uniq % num_nodes], axis=1)


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected simple graph with canonical ``(u, v)``, ``u < v`` edge rows.

    ``edges`` is stored sorted lexicographically so two graphs with the same
    edge set compare equal. ``features`` is an optional ``(N, F)`` array; when
    absent the encoder synthesizes degree-bucket one-hots.
    """

    num_nodes: int
    edges: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    features: Optional[np.ndarray] = None

    def __post_init__(self):
        if int(self.num_nodes) < 0:
            raise GraphError("num_nodes must be non-negative")
        object.__setattr__(self, "num_nodes", int(self.num_nodes))
        edges = _canonical_edges(self.edges, self.num_nodes)
        edges.setflags(write=False)
        object.__setattr__(self, "edges", edges)
        if self.features is not None:
            feats = np.array(self.features, dtype=np.float64)
            if feats.ndim != 2 or feats.shape[0] != self.num_nodes:
                raise GraphError(
                    f"features must have shape ({self.num_nodes}, F), got {feats.shape}"
                )
            feats.setflags(write=False)
            object.__setattr__(self, "features", feats)

    @property
    def num_edges(self) -> int:
        return int(self.edges.shape[0])

    def edge_keys(self) -> np.ndarray:
        """Sorted int64 keys ``u * N + v`` of the canonical edges."""
        return self.edges[:, 0] * self.num_nodes + self.edges[:, 1]

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.num_nodes, dtype=np.int64)
        if self.num_edges:
            np.add.at(deg, self.edges.ravel(), 1)
        return deg

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.num_nodes, self.num_nodes), dtype=np.float64)
        if self.num_edges:
            a[self.edges[:, 0], self.edges[:, 1]] = 1.0
            a[self.edges[:, 1], self.edges[:, 0]] = 1.0
        return a

    def has_edge(self, u: int, v: int) -> bool:
        u, v = min(u, v), max(u, v)
        key = u * self.num_nodes + v
        keys = self.edge_keys()
        i = np.searchsorted(keys, key)
        return bool(i < keys.size and keys[i] == key)

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        if self.num_nodes != other.num_nodes or not np.array_equal(self.edges, other.edges):
            return False
        if (self.features is None) != (other.features is None):
            return False
        return self.features is None or np.array_equal(self.features, other.features)

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self):
        feat = "" if self.features is None else f", features={self.features.shape[1]}d"
        return f"Graph(num_nodes={self.num_nodes}, num_edges={self.num_edges}{feat})"

    def to_networkx(self):
        import networkx as nx

        nxg = nx.Graph()
        nxg.add_nodes_from(range(self.num_nodes))
        nxg.add_edges_from(map(tuple, self.edges.tolist()))
        return nxg

    @classmethod
    def from_networkx(cls, nxg) -> "Graph":
        nodes = list(nxg.nodes())
        index = {n: i for i, n in enumerate(nodes)}
        edges = [(index[u], index[v]) for u, v in nxg.edges() if u != v]
        return cls(len(nodes), np.array(edges, dtype=np.int64).reshape(-1, 2))


def _from_keys(keys: np.ndarray, num_nodes: int, features=None) -> Graph:
    keys = np.asarray(keys, dtype=np.int64)
    edges = np.stack([keys // max(num_nodes, 1), keys % max(num_nodes, 1)], axis=1)
    return Graph(num_nodes, edges, features)


def canonical_pairs(pairs, num_nodes: int) -> np.ndarray:
    """Return pairs as an ``(K, 2)`` int64 array with ``u < v``, validating range."""
    arr = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if arr.size and (np.any(arr < 0) or np.any(arr >= num_nodes)):
        raise InvalidPlanError(f"pair references a node id outside [0, {num_nodes})")
    if arr.size and np.any(arr[:, 0] == arr[:, 1]):
        raise InvalidPlanError("pair (u, u) is not a valid edge")
    return np.sort(arr, axis=1)


@dataclass(frozen=True, eq=False)
class EditPlan:
    """Ordered node-pair flips, at most ``budget_k`` of them, applied by symmetric difference."""

    flips: np.ndarray
    budget_k: int

    def __post_init__(self):
        flips = np.asarray(self.flips, dtype=np.int64).reshape(-1, 2)
        flips = np.sort(flips, axis=1)
        if int(self.budget_k) < 0:
            raise InvalidPlanError("budget_k must be non-negative")
        if flips.shape[0] > int(self.budget_k):
            raise InvalidPlanError(f"{flips.shape[0]} flips exceed budget {self.budget_k}")
        if flips.size and np.any(flips[:, 0] == flips[:, 1]):
            raise InvalidPlanError("pair (u, u) is not a valid edge")
        if np.unique(flips, axis=0).shape[0] != flips.shape[0]:
            raise InvalidPlanError("duplicate pairs in edit plan")
        flips.setflags(write=False)
        object.__setattr__(self, "flips", flips)
        object.__setattr__(self, "budget_k", int(self.budget_k))

    def __len__(self):
        return int(self.flips.shape[0])

    def __eq__(self, other):
        if not isinstance(other, EditPlan):
            return NotImplemented
        return self.budget_k == other.budget_k and np.array_equal(self.flips, other.flips)

    __hash__ = None  # type: ignore[assignment]

    def to_dict(self) -> dict:
        return {"schema": 1, "budget_k": self.budget_k, "flips": self.flips.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "EditPlan":
        if d.get("schema") != 1:
            raise ValueError(f"unsupported edit plan schema {d.get('schema')!r}")
        return cls(np.array(d["flips"], dtype=np.int64).reshape(-1, 2), d["budget_k"])


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    intensity: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}; expected one of {ATTACK_KINDS}")
        if not 0.0 <= float(self.intensity) <= 1.0:
            raise ValueError(f"attack intensity must lie in [0, 1], got {self.intensity}")

    @property
    def label(self) -> str:
        if self.kind == "isomorphism":
            return "isomorphism"
        return f"{self.kind}_{round(100 * self.intensity)}"


def apply_edit_plan(g: Graph, plan: EditPlan) -> Graph:
    """Toggle every pair of ``plan`` in ``g`` (edge set ``E xor flips``)."""
    if len(plan) == 0:
        return g
    if np.any(plan.flips >= g.num_nodes):
        raise InvalidPlanError(f"plan references a node id >= {g.num_nodes}")
    keys = plan.flips[:, 0] * g.num_nodes + plan.flips[:, 1]
    return _from_keys(np.setxor1d(g.edge_keys(), keys), g.num_nodes, g.features)


def sample_non_edges(g: Graph, count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly sample ``min(count, available)`` distinct non-edges without replacement."""
    n = g.num_nodes
    total = n * (n - 1) // 2
    available = total - g.num_edges
    count = int(min(max(count, 0), available))
    if count == 0:
        return np.zeros((0, 2), dtype=np.int64)
    edge_keys = g.edge_keys()
    if total <= _ENUMERATE_PAIR_LIMIT or count > available // 2:
        iu, ju = np.triu_indices(n, k=1)
        keys = iu.astype(np.int64) * n + ju
        keys = keys[~np.isin(keys, edge_keys, assume_unique=True)]
        chosen = rng.choice(keys.size, size=count, replace=False)
        picked = keys[chosen]
    else:
        picked = np.zeros(0, dtype=np.int64)
        taken = set(edge_keys.tolist())
        out = []
        while len(out) < count:
            need = count - len(out)
            u = rng.integers(0, n, size=2 * need + 16)
            v = rng.integers(0, n, size=2 * need + 16)
            for a, b in zip(u.tolist(), v.tolist()):
                if a == b:
                    continue
                key = min(a, b) * n + max(a, b)
                if key in taken:
                    continue
                taken.add(key)
                out.append(key)
                if len(out) == count:
                    break
        picked = np.array(out, dtype=np.int64)
    return np.stack([picked // n, picked % n], axis=1)


def sample_candidates(g: Graph, non_edge_count: int, seed) -> np.ndarray:
    """All existing edges followed by ``min(non_edge_count, available)`` sampled non-edges."""
    if non_edge_count < 0:
        raise ValueError("non_edge_count must be >= 0")
    rng = np.random.default_rng(seed)
    non_edges = sample_non_edges(g, non_edge_count, rng)
    if non_edges.size:
        order = np.lexsort((non_edges[:, 1], non_edges[:, 0]))
        non_edges = non_edges[order]
    return np.concatenate([g.edges, non_edges], axis=0)


def _toggle_random_pairs(g: Graph, count: int, rng: np.random.Generator) -> Graph:
    # Pool of all edges plus an equal-size uniform sample of non-edges, so the
    # expected number of additions and deletions is balanced.
    if count <= 0:
        return g
    non_edges = sample_non_edges(g, g.num_edges, rng)
    pool = np.concatenate([g.edges, non_edges], axis=0)
    count = min(count, pool.shape[0])
    chosen = pool[rng.choice(pool.shape[0], size=count, replace=False)]
    return apply_edit_plan(g, EditPlan(chosen, count))


def induced_subgraph(g: Graph, keep: np.ndarray) -> Graph:
    """Subgraph on ``keep`` (old ids, ascending) with ids compacted to ``0..len(keep)-1``."""
    keep = np.asarray(keep, dtype=np.int64)
    remap = np.full(g.num_nodes, -1, dtype=np.int64)
    remap[keep] = np.arange(keep.size)
    e = remap[g.edges] if g.num_edges else g.edges
    e = e[(e >= 0).all(axis=1)] if e.size else e
    feats = None if g.features is None else g.features[keep]
    return Graph(int(keep.size), e, feats)


def delete_nodes(g: Graph, count: int, rng: np.random.Generator):
    """Remove ``count`` uniformly chosen nodes; returns ``(graph, kept_old_ids)``."""
    dropped = rng.choice(g.num_nodes, size=count, replace=False) if count else []
    mask = np.ones(g.num_nodes, dtype=bool)
    mask[np.asarray(dropped, dtype=np.int64)] = False
    keep = np.flatnonzero(mask)
    return induced_subgraph(g, keep), keep


def permute(g: Graph, perm: np.ndarray) -> Graph:
    """Relabel node ``i`` as ``perm[i]``."""
    perm = np.asarray(perm, dtype=np.int64)
    feats = None
    if g.features is not None:
        feats = np.empty_like(g.features)
        feats[perm] = g.features
    return Graph(g.num_nodes, perm[g.edges] if g.num_edges else g.edges, feats)


def augment(g: Graph, node_drop_frac: float, edge_perturb_frac: float, seed) -> Graph:
    """Random node dropping followed by balanced edge toggling."""
    for name, frac in (("node_drop_frac", node_drop_frac), ("edge_perturb_frac", edge_perturb_frac)):
        if not 0.0 <= frac < 1.0:
            raise ValueError(f"{name} must lie in [0, 1), got {frac}")
    rng = np.random.default_rng(seed)
    n_drop = math.floor(node_drop_frac * g.num_nodes)
    if g.num_nodes - n_drop <= 0:
        raise DegenerateAugmentationError("augmentation would leave an empty graph")
    out, _ = delete_nodes(g, n_drop, rng)
    return _toggle_random_pairs(out, math.floor(edge_perturb_frac * out.num_edges), rng)


def attack(g: Graph, spec: AttackSpec, *, return_alignment: bool = False):
    """Apply a structural attack.

    With ``return_alignment=True`` also returns ``alignment`` where
    ``alignment[i]`` is the id in ``g`` of node ``i`` of the attacked graph.
    """
    rng = np.random.default_rng(spec.seed)
    alignment = np.arange(g.num_nodes)
    if spec.kind == "edge_flip":
        out = _toggle_random_pairs(g, math.floor(spec.intensity * g.num_edges), rng)
    elif spec.kind == "node_delete":
        out, alignment = delete_nodes(g, math.floor(spec.intensity * g.num_nodes), rng)
    elif spec.kind == "isomorphism":
        perm = rng.permutation(g.num_nodes)
        out = permute(g, perm)
        alignment = np.argsort(perm)
    else:
        raise UnsupportedAttackError(
            "latent_noise attacks need trained models; use drgw.pipeline.latent_noise_attack"
        )
    return (out, alignment) if return_alignment else out


# --------------------------------------------------------------------------- #
# File formats                                                                #
# --------------------------------------------------------------------------- #

def parse_edge_list(text: str, source: str = "<string>") -> Graph:
    """Parse the ``N M`` header + ``u v`` lines format."""
    header = None
    edges: list[tuple[int, int]] = []
    seen: dict[tuple[int, int], int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            nums = [int(p) for p in parts]
        except ValueError:
            raise GraphError(f"{source}:{lineno}: expected integers, got {line!r}") from None
        if len(nums) != 2:
            raise GraphError(f"{source}:{lineno}: expected two integers, got {line!r}")
        if header is None:
            header = (nums[0], nums[1])
            if nums[0] < 0 or nums[1] < 0:
                raise GraphError(f"{source}:{lineno}: negative header values")
            continue
        u, v = nums
        if u == v:
            raise GraphError(f"{source}:{lineno}: self-loop ({u}, {v})")
        if not (0 <= u < header[0] and 0 <= v < header[0]):
            raise GraphError(f"{source}:{lineno}: node id out of range [0, {header[0]})")
        key = (min(u, v), max(u, v))
        if key in seen:
            raise GraphError(f"{source}:{lineno}: duplicate edge {key} (first at line {seen[key]})")
        seen[key] = lineno
        edges.append(key)
    if header is None:
        raise GraphError(f"{source}: missing 'N M' header")
    if len(edges) != header[1]:
        raise GraphError(f"{source}: header declares {header[1]} edges, found {len(edges)}")
    return Graph(header[0], np.array(edges, dtype=np.int64).reshape(-1, 2))


def format_edge_list(g: Graph) -> str:
    lines = [f"{g.num_nodes} {g.num_edges}"]
    lines.extend(f"{u} {v}" for u, v in g.edges.tolist())
    return "\n".join(lines) + "\n"


def graph_to_dict(g: Graph) -> dict:
    d = {"num_nodes": g.num_nodes, "edges": g.edges.tolist()}
    if g.features is not None:
        d["features"] = g.features.tolist()
    return d


def graph_from_dict(d: dict, source: str = "<json>") -> Graph:
    try:
        n = int(d["num_nodes"])
        raw = d["edges"]
    except (KeyError, TypeError) as exc:
        raise GraphError(f"{source}: missing field {exc}") from None
    seen: dict[tuple[int, int], int] = {}
    for i, pair in enumerate(raw):
        if len(pair) != 2:
            raise GraphError(f"{source}: edges[{i}] must be a pair")
        u, v = int(pair[0]), int(pair[1])
        if u == v:
            raise GraphError(f"{source}: edges[{i}] is a self-loop ({u}, {v})")
        key = (min(u, v), max(u, v))
        if key in seen:
            raise GraphError(f"{source}: edges[{i}] duplicates edges[{seen[key]}] {key}")
        seen[key] = i
    return Graph(n, np.array(raw, dtype=np.int64).reshape(-1, 2), d.get("features"))


def read_graph(path) -> Graph:
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".json":
        return graph_from_dict(json.loads(text), str(path))
    return parse_edge_list(text, str(path))


def write_graph(g: Graph, path) -> None:
    from .io import atomic_write_text

    path = Path(path)
    if path.suffix.lower() == ".json":
        atomic_write_text(path, json.dumps(graph_to_dict(g)))
    else:
        atomic_write_text(path, format_edge_list(g))


def check_graph(g) -> Graph:
    """Coerce ``g`` (Graph, networkx graph or square 0/1 array) to a :class:`Graph`."""
    if isinstance(g, Graph):
        return g
    if hasattr(g, "nodes") and hasattr(g, "edges") and hasattr(g, "is_directed"):
        if g.is_directed():
            raise GraphError("directed graphs are not supported")
        return Graph.from_networkx(g)
    arr = np.asarray(g)
    if arr.ndim == 2 and arr.shape[0] == arr.shape[1]:
        if not np.array_equal(arr, arr.T):
            raise GraphError("adjacency matrix must be symmetric")
        if np.any(np.diag(arr) != 0):
            raise GraphError("self-loops are not allowed")
        iu, ju = np.nonzero(np.triu(arr, k=1))
        return Graph(arr.shape[0], np.stack([iu, ju], axis=1))
    raise TypeError(f"cannot interpret {type(g).__name__} as a graph")


def check_graphs(graphs: Iterable) -> list[Graph]:
    if isinstance(graphs, (Graph, np.ndarray)) or hasattr(graphs, "is_directed"):
        raise TypeError("expected a sequence of graphs, got a single graph")
    out = [check_graph(g) for g in graphs]
    if not out:
        raise ValueError("expected at least one graph")
    return out


def degree_sequence(g: Graph) -> np.ndarray:
    return np.sort(g.degrees())


def relabel_pairs(pairs: Sequence, perm: np.ndarray) -> np.ndarray:
    perm = np.asarray(perm, dtype=np.int64)
    arr = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    return np.sort(perm[arr], axis=1)
