"""Transductive fingerprint scoring and selection, plus the two baselines."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..gcn import Model, forward_cache, node_param_gradients, predict_all, softmax
from ..graph import Graph, normalize_adjacency

TRANS_METHODS = ("F", "L", "random", "manc")


class NonFiniteScoreError(ValueError):
    pass


@dataclass
class Fingerprint:
    node_id: int
    expected_label: int
    mode: str = "transductive"
    score: float = 0.0
    attached_graph: Graph | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode == "transductive" and self.attached_graph is not None:
            raise ValueError("transductive fingerprints carry no graph")


@dataclass
class ScoreTable:
    scores: dict
    method: str

    def __len__(self):
        return len(self.scores)


def _context(m: Model, g: Graph, adj=None):
    adj = normalize_adjacency(g) if adj is None else adj
    return adj, g.X_sparse


def score_transductive_f(m: Model, g: Graph, v: int, adj=None, label: int | None = None) -> float:
    """Sum over W1, b1, W2, b2 of the L2 norm of d loss_v / d block.

    The loss is the NLL of node ``v`` against the clean model's own
    prediction unless ``label`` is given.
    """
    adj, X = _context(m, g, adj)
    if not 0 <= v < g.num_nodes:
        raise IndexError(f"node {v} out of range")
    params = m.params64()
    cache = forward_cache(params, adj, X)
    if label is None:
        label = int(predict_all(m, adj, X)[v])
    return _f_score(params, cache, adj, X, v, label)


def _f_score(params, cache, adj, X, v: int, label: int) -> float:
    grads = node_param_gradients(params, cache, adj, X, v, label)
    score = float(sum(np.linalg.norm(b) for b in grads.blocks()))
    if not np.isfinite(score):
        raise NonFiniteScoreError(f"non-finite gradient for node {v}")
    return score


def score_transductive_l(posteriors: np.ndarray, v: int | None = None, atol: float = 1e-6) -> float:
    """One minus the top-class probability of a posterior row."""
    row = np.asarray(posteriors, dtype=np.float64)
    if row.ndim == 2:
        row = row[v]
    if row.ndim != 1 or not np.all(np.isfinite(row)) or np.any(row < -atol) or np.any(row > 1 + atol):
        raise ValueError("malformed posterior row")
    if abs(row.sum() - 1.0) > atol:
        raise ValueError(f"posterior row sums to {row.sum()}")
    return float(max(0.0, 1.0 - row.max()))


def score_table(m: Model, g: Graph, pool, method: str, adj=None) -> ScoreTable:
    adj, X = _context(m, g, adj)
    pool = [int(v) for v in pool]
    labels = predict_all(m, adj, X)
    if method == "F":
        params = m.params64()
        cache = forward_cache(params, adj, X)
        scores = {v: _f_score(params, cache, adj, X, v, int(labels[v])) for v in pool}
    elif method == "L":
        P = softmax(forward_cache(m.params64(), adj, X)["Z"])
        scores = {v: score_transductive_l(P[v]) for v in pool}
    else:
        raise ValueError(f"unknown scoring method {method!r}")
    return ScoreTable(scores, method)


def select_fingerprints(table: ScoreTable, k: int) -> list:
    """Top-``k`` node ids by descending score, ties to the smaller id."""
    if not 0 <= k <= len(table.scores):
        raise ValueError(f"k={k} exceeds pool of {len(table.scores)}")
    ranked = sorted(table.scores.items(), key=lambda kv: (-kv[1], kv[0]))
    return [v for v, _ in ranked[:k]]


def default_pool(g: Graph) -> np.ndarray:
    return g.mask("candidates", default_all=True)


def generate_randomized(
    m: Model,
    g: Graph,
    pool=None,
    sample_size: int | None = None,
    k: int = 5,
    seed: int = 0,
    method: str = "F",
    adj=None,
) -> list:
    """Uniformly sample ``sample_size`` candidates, score them, keep the top ``k``."""
    adj, X = _context(m, g, adj)
    pool = np.asarray(default_pool(g) if pool is None else sorted(set(int(v) for v in pool)))
    s = len(pool) if sample_size is None else int(sample_size)
    if not 0 < k <= s <= len(pool):
        raise ValueError(f"need 0 < k <= sample_size <= |pool|, got k={k}, s={s}, |pool|={len(pool)}")
    if s == len(pool):
        sample = pool
    else:
        rng = np.random.default_rng(seed)
        sample = np.sort(rng.choice(pool, size=s, replace=False))
    table = score_table(m, g, sample, method, adj)
    labels = predict_all(m, adj, X)
    prov = {"method": method, "seed": seed, "pool_size": int(len(pool)), "sample_size": s}
    return [
        Fingerprint(v, int(labels[v]), score=table.scores[v], provenance=prov)
        for v in select_fingerprints(table, k)
    ]


def baseline_random(m: Model, g: Graph, pool=None, k: int = 1, seed: int = 0, adj=None) -> list:
    adj, X = _context(m, g, adj)
    pool = np.asarray(default_pool(g) if pool is None else list(pool))
    if not 0 <= k <= len(pool):
        raise ValueError(f"k={k} exceeds pool of {len(pool)}")
    rng = np.random.default_rng(seed)
    picks = rng.choice(pool, size=k, replace=False)
    labels = predict_all(m, adj, X)
    prov = {"method": "random", "seed": seed, "pool_size": int(len(pool))}
    return [Fingerprint(int(v), int(labels[v]), provenance=prov) for v in picks]


def hidden_activations(m: Model, g: Graph, adj=None) -> np.ndarray:
    adj, X = _context(m, g, adj)
    return forward_cache(m.params64(), adj, X)["Hpre"] > 0


def baseline_manc(m: Model, g: Graph, pool=None, k: int = 1, adj=None) -> list:
    """Greedy maximum activated-neuron coverage over the hidden layer."""
    adj, X = _context(m, g, adj)
    pool = sorted(int(v) for v in (default_pool(g) if pool is None else pool))
    if not 0 <= k <= len(pool):
        raise ValueError(f"k={k} exceeds pool of {len(pool)}")
    active = hidden_activations(m, g, adj)
    covered = np.zeros(active.shape[1], dtype=bool)
    remaining = list(pool)
    chosen = []
    for _ in range(k):
        gains = [int(np.sum(active[v] & ~covered)) for v in remaining]
        best = int(np.argmax(gains))
        v = remaining.pop(best)
        covered |= active[v]
        chosen.append((v, gains[best]))
    labels = predict_all(m, adj, X)
    prov = {"method": "manc", "pool_size": len(pool)}
    return [Fingerprint(v, int(labels[v]), score=float(gain), provenance=prov) for v, gain in chosen]


def coverage_fraction(m: Model, g: Graph, nodes, adj=None) -> float:
    active = hidden_activations(m, g, adj)
    return float(active[list(nodes)].any(axis=0).mean())


def save_fingerprints(fps: list, path, method: str, seed: int = 0, sample_size: int | None = None):
    doc = {
        "mode": "transductive",
        "method": method,
        "seed": int(seed),
        "sample_size": sample_size,
        "items": [{"node": f.node_id, "label": f.expected_label, "score": f.score} for f in fps],
    }
    Path(path).write_text(json.dumps(doc, indent=2))


def load_fingerprints(path) -> list:
    doc = json.loads(Path(path).read_text())
    if doc.get("mode") != "transductive":
        raise ValueError("not a transductive fingerprint file")
    prov = {"method": doc["method"], "seed": doc.get("seed"), "sample_size": doc.get("sample_size")}
    return [
        Fingerprint(int(it["node"]), int(it["label"]), score=float(it.get("score", 0.0)), provenance=prov)
        for it in doc["items"]
    ]
