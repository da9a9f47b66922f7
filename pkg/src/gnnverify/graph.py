"""Graph container, JSON I/O, GCN normalization and perturbation primitives."""
from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

MASK_NAMES = ("train", "test", "candidates")


class GraphFormatError(ValueError):
    """Raised when a graph file or structure violates the graph invariants."""


class DeltaConflictError(ValueError):
    """Raised when a delta adds an existing edge or removes a missing one."""


def _canon_edge(i: int, j: int) -> tuple[int, int]:
    return (i, j) if i < j else (j, i)


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected node-attributed graph with dense integer node ids.

    ``features`` may be ``None`` for attribute-free graphs, in which case
    :attr:`X` is the identity matrix.
    """

    num_nodes: int
    num_classes: int
    edges: frozenset
    features: np.ndarray | None
    labels: np.ndarray
    masks: dict = field(default_factory=dict)
    id_map: tuple | None = None

    def __post_init__(self):
        n = int(self.num_nodes)
        if n < 1:
            raise GraphFormatError("graph needs at least one node")
        if self.num_classes < 1:
            raise GraphFormatError("num_classes must be >= 1")
        edges = frozenset(_canon_edge(int(i), int(j)) for i, j in self.edges)
        for i, j in edges:
            if i == j:
                raise GraphFormatError(f"self-loop on node {i}")
            if not (0 <= i < n and 0 <= j < n):
                raise GraphFormatError(f"edge ({i}, {j}) out of range")
        object.__setattr__(self, "edges", edges)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if labels.shape[0] != n:
            raise GraphFormatError(f"expected {n} labels, got {labels.shape[0]}")
        bad = np.flatnonzero((labels < 0) | (labels >= self.num_classes))
        if bad.size:
            raise GraphFormatError(
                f"label {labels[bad[0]]} of node {bad[0]} outside [0, {self.num_classes})"
            )
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        if self.features is not None:
            feats = np.array(self.features, dtype=np.float64)
            if feats.ndim != 2 or feats.shape[0] != n:
                raise GraphFormatError(f"features must be {n} x d")
            feats.setflags(write=False)
            object.__setattr__(self, "features", feats)
        masks = {}
        for name, nodes in (self.masks or {}).items():
            arr = np.asarray(sorted(set(int(x) for x in nodes)), dtype=np.int64)
            if arr.size and (arr[0] < 0 or arr[-1] >= n):
                raise GraphFormatError(f"mask {name!r} references nodes outside [0, {n})")
            arr.setflags(write=False)
            masks[name] = arr
        object.__setattr__(self, "masks", masks)

    @property
    def num_features(self) -> int:
        return self.num_nodes if self.features is None else self.features.shape[1]

    @property
    def X(self) -> np.ndarray:
        if self.features is None:
            return np.eye(self.num_nodes)
        return self.features

    @cached_property
    def X_sparse(self) -> sp.csr_matrix:
        if self.features is None:
            return sp.identity(self.num_nodes, format="csr")
        return sp.csr_matrix(self.features)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def has_edge(self, i: int, j: int) -> bool:
        return _canon_edge(i, j) in self.edges

    def mask(self, name: str, default_all: bool = False) -> np.ndarray:
        if name in self.masks:
            return self.masks[name]
        if default_all:
            return np.arange(self.num_nodes)
        raise KeyError(name)

    def adjacency(self) -> sp.csr_matrix:
        """Binary symmetric adjacency without self-loops."""
        n = self.num_nodes
        if not self.edges:
            return sp.csr_matrix((n, n))
        e = np.array(sorted(self.edges), dtype=np.int64)
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        return sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))

    def neighbors(self) -> list[set[int]]:
        nbrs: list[set[int]] = [set() for _ in range(self.num_nodes)]
        for i, j in self.edges:
            nbrs[i].add(j)
            nbrs[j].add(i)
        return nbrs

    def replace(self, **changes) -> "Graph":
        kw = dict(
            num_nodes=self.num_nodes,
            num_classes=self.num_classes,
            edges=self.edges,
            features=self.features,
            labels=self.labels,
            masks=self.masks,
            id_map=self.id_map,
        )
        kw.update(changes)
        return Graph(**kw)

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        if (self.num_nodes, self.num_classes, self.edges) != (
            other.num_nodes,
            other.num_classes,
            other.edges,
        ):
            return False
        if (self.features is None) != (other.features is None):
            return False
        if self.features is not None and not np.array_equal(self.features, other.features):
            return False
        if not np.array_equal(self.labels, other.labels):
            return False
        if self.masks.keys() != other.masks.keys():
            return False
        return all(np.array_equal(self.masks[k], other.masks[k]) for k in self.masks)

    __hash__ = None

    def to_dict(self) -> dict:
        return {
            "num_nodes": self.num_nodes,
            "num_classes": self.num_classes,
            "edges": [list(e) for e in sorted(self.edges)],
            "features": None if self.features is None else self.features.tolist(),
            "labels": self.labels.tolist(),
            "masks": {k: v.tolist() for k, v in self.masks.items()},
        }

    def content_hash(self) -> str:
        """SHA-256 over the canonical JSON form (ids, edges, features, labels)."""
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()


def graph_from_dict(doc: dict, symmetrize: bool = True) -> Graph:
    """Build a :class:`Graph` from the canonical JSON document.

    Each undirected edge is listed once. Directed inputs that list both
    ``[i, j]`` and ``[j, i]`` are merged when ``symmetrize`` is true and
    rejected otherwise; a repeated identical record is always rejected.
    """
    try:
        n = int(doc["num_nodes"])
        c = int(doc["num_classes"])
        raw_edges = doc.get("edges", [])
        labels = doc["labels"]
    except (KeyError, TypeError, ValueError) as exc:
        raise GraphFormatError(f"malformed graph document: {exc}") from exc

    id_map = None
    if "node_ids" in doc and doc["node_ids"] is not None:
        id_map = tuple(str(x) for x in doc["node_ids"])
        lookup = {name: k for k, name in enumerate(id_map)}
        try:
            raw_edges = [(lookup[str(a)], lookup[str(b)]) for a, b in raw_edges]
        except KeyError as exc:
            raise GraphFormatError(f"unknown node id {exc}") from exc

    seen_directed = set()
    edges = set()
    merged = 0
    for rec in raw_edges:
        try:
            i, j = int(rec[0]), int(rec[1])
        except (TypeError, ValueError, IndexError) as exc:
            raise GraphFormatError(f"malformed edge record {rec!r}") from exc
        if i == j:
            raise GraphFormatError(f"self-loop on node {i}")
        if (i, j) in seen_directed:
            raise GraphFormatError(f"duplicate edge ({i}, {j})")
        seen_directed.add((i, j))
        e = _canon_edge(i, j)
        if e in edges:
            if not symmetrize:
                raise GraphFormatError(f"duplicate edge ({i}, {j}) (reverse direction listed)")
            merged += 1
        edges.add(e)
    if merged:
        warnings.warn(f"directed edge list symmetrized ({merged} reverse pairs merged)", stacklevel=2)
    return Graph(
        num_nodes=n,
        num_classes=c,
        edges=frozenset(edges),
        features=doc.get("features"),
        labels=labels,
        masks=doc.get("masks") or {},
        id_map=id_map,
    )


def load_graph(path, fmt: str = "json", symmetrize: bool = True) -> Graph:
    if fmt != "json":
        raise GraphFormatError(f"unsupported graph format {fmt!r}")
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise GraphFormatError(f"{path}: {exc}") from exc
    return graph_from_dict(doc, symmetrize=symmetrize)


def save_graph(g: Graph, path) -> None:
    doc = g.to_dict()
    if g.id_map is not None:
        doc["node_ids"] = list(g.id_map)
        doc["edges"] = [[g.id_map[i], g.id_map[j]] for i, j in sorted(g.edges)]
    Path(path).write_text(json.dumps(doc))


def normalize_adjacency(g: Graph) -> sp.csr_matrix:
    """Return D^-1/2 (A + I) D^-1/2 as a CSR matrix."""
    return normalize_raw(g.adjacency() + sp.identity(g.num_nodes, format="csr"))


def normalize_raw(a_tilde: sp.spmatrix) -> sp.csr_matrix:
    a_tilde = sp.csr_matrix(a_tilde, dtype=np.float64)
    deg = np.asarray(a_tilde.sum(axis=1)).ravel()
    inv_sqrt = 1.0 / np.sqrt(deg)
    coo = a_tilde.tocoo()
    # elementwise product keeps entry(i, j) and entry(j, i) bit-identical
    vals = coo.data * (inv_sqrt[coo.row] * inv_sqrt[coo.col])
    out = sp.csr_matrix((vals, (coo.row, coo.col)), shape=a_tilde.shape)
    out.sort_indices()
    return out


def two_hop_neighborhood(g: Graph, v: int, nbrs: list[set[int]] | None = None) -> set[int]:
    if not 0 <= v < g.num_nodes:
        raise IndexError(f"node {v} out of range [0, {g.num_nodes})")
    nbrs = g.neighbors() if nbrs is None else nbrs
    out = {v} | nbrs[v]
    for u in nbrs[v]:
        out |= nbrs[u]
    return out


@dataclass(frozen=True)
class GraphDelta:
    """Discrete graph edit: edge flips ``(i, j, "add"|"remove")`` and feature
    edits ``(node, dim, new_value)``."""

    edge_flips: tuple = ()
    feature_edits: tuple = ()

    def __len__(self) -> int:
        return len(self.edge_flips) + len(self.feature_edits)

    def to_dict(self) -> dict:
        return {
            "edge_flips": [[int(i), int(j), op] for i, j, op in self.edge_flips],
            "feature_edits": [[int(n), int(d), float(x)] for n, d, x in self.feature_edits],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GraphDelta":
        return cls(
            edge_flips=tuple((int(i), int(j), str(op)) for i, j, op in doc.get("edge_flips", [])),
            feature_edits=tuple(
                (int(n), int(d), float(x)) for n, d, x in doc.get("feature_edits", [])
            ),
        )

    def inverse(self, base: Graph) -> "GraphDelta":
        """Delta that undoes this one when applied to ``apply_delta(base, self)``."""
        flips = tuple(
            (i, j, "remove" if op == "add" else "add") for i, j, op in reversed(self.edge_flips)
        )
        X = base.X
        edits = tuple((n, d, float(X[n, d])) for n, d, _ in reversed(self.feature_edits))
        return GraphDelta(flips, edits)


def apply_delta(g: Graph, d: GraphDelta) -> Graph:
    """Apply ``d`` to ``g`` and return a new graph; ``g`` is left untouched."""
    n = g.num_nodes
    edges = set(g.edges)
    for i, j, op in d.edge_flips:
        if not (0 <= i < n and 0 <= j < n) or i == j:
            raise DeltaConflictError(f"invalid edge ({i}, {j})")
        e = _canon_edge(i, j)
        if op == "add":
            if e in edges:
                raise DeltaConflictError(f"edge {e} already present")
            edges.add(e)
        elif op == "remove":
            if e not in edges:
                raise DeltaConflictError(f"edge {e} not present")
            edges.remove(e)
        else:
            raise DeltaConflictError(f"unknown edge op {op!r}")
    features = g.features
    if d.feature_edits:
        features = np.array(g.X, dtype=np.float64)
        for node, dim, value in d.feature_edits:
            if not (0 <= node < n and 0 <= dim < features.shape[1]):
                raise DeltaConflictError(f"feature edit ({node}, {dim}) out of range")
            features[node, dim] = value
    return g.replace(edges=frozenset(edges), features=features)


def sample_shadow_graph(g: Graph, fraction: float, seed: int) -> Graph:
    """Induced subgraph on a uniform node sample, relabeled to [0, n)."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    m = max(1, int(round(fraction * g.num_nodes)))
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(g.num_nodes, size=m, replace=False))
    relabel = {int(old): new for new, old in enumerate(keep)}
    edges = frozenset(
        _canon_edge(relabel[i], relabel[j])
        for i, j in g.edges
        if i in relabel and j in relabel
    )
    feats = None if g.features is None else g.features[keep]
    masks = {
        name: [relabel[int(v)] for v in nodes if int(v) in relabel]
        for name, nodes in g.masks.items()
    }
    return Graph(
        num_nodes=m,
        num_classes=g.num_classes,
        edges=edges,
        features=feats,
        labels=g.labels[keep],
        masks=masks,
    )


def make_sbm_graph(
    block_sizes=(40, 40),
    p_in: float = 0.2,
    p_out: float = 0.02,
    num_features: int = 16,
    feature_p_on: float = 0.2,
    feature_p_off: float = 0.05,
    train_fraction: float = 0.5,
    seed: int = 0,
) -> Graph:
    """Stochastic block model with class-correlated binary features.

    Each block owns a disjoint slice of the feature dimensions, switched on
    with probability ``feature_p_on``; every other dimension fires with
    ``feature_p_off``.
    """
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(len(block_sizes)), block_sizes)
    n = labels.size
    c = len(block_sizes)
    same = labels[:, None] == labels[None, :]
    prob = np.where(same, p_in, p_out)
    draw = rng.random((n, n)) < prob
    ii, jj = np.nonzero(np.triu(draw, k=1))
    edges = frozenset(zip(ii.tolist(), jj.tolist()))
    owner = np.arange(num_features) * c // max(num_features, 1)
    p = np.where(owner[None, :] == labels[:, None], feature_p_on, feature_p_off)
    feats = (rng.random((n, num_features)) < p).astype(np.float64)
    perm = rng.permutation(n)
    n_train = int(round(train_fraction * n))
    train, test = perm[:n_train], perm[n_train:]
    return Graph(
        num_nodes=n,
        num_classes=c,
        edges=edges,
        features=feats,
        labels=labels,
        masks={"train": train.tolist(), "test": test.tolist(), "candidates": list(range(n))},
    )
