"""Inductive fingerprint graphs built by constrained greedy perturbation.

Every variant grows a :class:`GraphDelta` on a shadow graph one move at a
time (a feature edit on a fingerprint node or an edge flip incident to
one) and never accepts a move that changes any clean-model prediction.
"""
from __future__ import annotations

import json
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.sparse as sp

from ..gcn import (
    Model,
    argmax_total_order,
    edge_gradients_from,
    forward_cache,
    logits_rows,
    predict_all,
    softmax,
)
from ..graph import Graph, GraphDelta, apply_delta, normalize_adjacency, normalize_raw, two_hop_neighborhood
from .transductive import Fingerprint, ScoreTable, _f_score, score_transductive_l, select_fingerprints

IND_METHODS = ("F", "L", "randF", "randL")

Oracle = Callable[[Graph], np.ndarray]


class OracleError(RuntimeError):
    pass


def model_oracle(m: Model) -> Oracle:
    """Posterior access to ``m`` on arbitrary graphs."""

    def query(g: Graph) -> np.ndarray:
        return softmax(forward_cache(m.params64(), normalize_adjacency(g), g.X_sparse)["Z"])

    return query


@dataclass
class InductiveFingerprintSet:
    """A perturbed shadow graph plus the fingerprint nodes queried on it.

    ``objective_trace`` records the maximized objective after each accepted
    move: the summed fingerprint NLL, or its negation when pulling toward
    random targets.
    """

    graph: Graph
    base: Graph
    fingerprints: list
    delta: GraphDelta
    budget: int
    objective_trace: list
    method: str
    seed: int
    stop_reason: str
    targets: dict = field(default_factory=dict)

    @property
    def budget_used(self) -> int:
        return len(self.delta)

    @property
    def nodes(self) -> list:
        return [f.node_id for f in self.fingerprints]

    def to_dict(self) -> dict:
        return {
            "mode": "inductive",
            "method": self.method,
            "seed": int(self.seed),
            "budget": int(self.budget),
            "base_graph_hash": self.base.content_hash(),
            "delta": self.delta.to_dict(),
            "items": [{"node": f.node_id, "label": f.expected_label} for f in self.fingerprints],
            "objective_trace": [float(x) for x in self.objective_trace],
            "targets": {str(k): int(v) for k, v in self.targets.items()},
            "stop_reason": self.stop_reason,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def load_inductive(path, base: Graph) -> InductiveFingerprintSet:
    doc = json.loads(Path(path).read_text())
    if doc.get("mode") != "inductive":
        raise ValueError("not an inductive fingerprint file")
    if doc["base_graph_hash"] != base.content_hash():
        raise ValueError("base graph hash mismatch")
    delta = GraphDelta.from_dict(doc["delta"])
    graph = apply_delta(base, delta)
    fps = [
        Fingerprint(int(it["node"]), int(it["label"]), mode="inductive", attached_graph=graph,
                    provenance={"method": doc["method"], "seed": doc["seed"]})
        for it in doc["items"]
    ]
    return InductiveFingerprintSet(
        graph=graph, base=base, fingerprints=fps, delta=delta, budget=int(doc["budget"]),
        objective_trace=list(doc["objective_trace"]), method=doc["method"], seed=int(doc["seed"]),
        stop_reason=doc.get("stop_reason", ""),
        targets={int(k): int(v) for k, v in doc.get("targets", {}).items()},
    )


def check_constraint(m: Model, base: Graph, perturbed: Graph, touched, full: bool = False):
    """Compare clean-model predictions on ``base`` and ``perturbed``.

    With ``full=False`` only the 2-hop neighborhoods of ``touched`` (in either
    graph) are recomputed, which is exact for a 2-layer GCN. Returns
    ``(ok, violated_nodes)``.
    """
    adj_b = normalize_adjacency(base)
    adj_p = normalize_adjacency(perturbed)
    if full:
        rows = np.arange(base.num_nodes)
    else:
        nb, np_ = base.neighbors(), perturbed.neighbors()
        region = set()
        for v in touched:
            region |= two_hop_neighborhood(base, int(v), nb)
            region |= two_hop_neighborhood(perturbed, int(v), np_)
        rows = np.array(sorted(region), dtype=np.int64)
    if rows.size == 0:
        return True, []
    before = argmax_total_order(logits_rows(m, adj_b, base.X_sparse, rows))
    after = argmax_total_order(logits_rows(m, adj_p, perturbed.X_sparse, rows))
    bad = rows[before != after].tolist()
    return not bad, bad


class _Search:
    """Mutable working copy of the shadow graph during a greedy search."""

    def __init__(self, shadow: Graph, fp_nodes, feature_step: float | None):
        self.base = shadow
        self.n = shadow.num_nodes
        self.X = np.array(shadow.X, dtype=np.float64)
        self.A = shadow.adjacency().tolil()
        self.fp = list(fp_nodes)
        self.binary = bool(np.all((self.X == 0) | (self.X == 1)))
        lo, hi = self.X.min(axis=0), self.X.max(axis=0)
        self.lo, self.hi = lo, hi
        std = self.X.std(axis=0)
        self.step = (0.1 * std) if feature_step is None else np.full(self.X.shape[1], feature_step)
        self.edge_flips: list = []
        self.feature_edits: list = []
        self.used_feat: set = set()
        self.used_edge: set = set()
        self.nbrs = shadow.neighbors()
        self._adj = None

    def adj(self) -> sp.csr_matrix:
        if self._adj is None:
            self._adj = normalize_raw(sp.csr_matrix(self.A) + sp.identity(self.n, format="csr"))
        return self._adj

    def candidate_moves(self):
        moves = []
        for v in self.fp:
            for f in range(self.X.shape[1]):
                if (v, f) in self.used_feat:
                    continue
                if self.binary:
                    moves.append(("feat", v, f, 1.0 - self.X[v, f]))
                elif self.step[f] > 0:
                    for sgn in (1.0, -1.0):
                        new = float(np.clip(self.X[v, f] + sgn * self.step[f], self.lo[f], self.hi[f]))
                        if new != self.X[v, f]:
                            moves.append(("feat", v, f, new))
            for u in range(self.n):
                if u == v:
                    continue
                key = (min(u, v), max(u, v))
                if key in self.used_edge:
                    continue
                moves.append(("edge", v, u, "remove" if self.A[v, u] else "add"))
        # an edge between two fingerprint nodes shows up twice
        seen, out = set(), []
        for mv in moves:
            key = mv if mv[0] == "feat" else ("edge", min(mv[1], mv[2]), max(mv[1], mv[2]))
            if key not in seen:
                seen.add(key)
                out.append(mv)
        return out

    @contextmanager
    def trial(self, mv):
        """Temporarily apply ``mv`` in place; yields ``(adjacency, X)``."""
        if mv[0] == "feat":
            _, v, f, new = mv
            old = self.X[v, f]
            self.X[v, f] = new
            try:
                yield self.adj(), self.X
            finally:
                self.X[v, f] = old
            return
        _, v, u, op = mv
        old, saved = self.A[v, u], self._adj
        val = 1.0 if op == "add" else 0.0
        self.A[v, u] = val
        self.A[u, v] = val
        self._adj = None
        try:
            yield self.adj(), self.X
        finally:
            self.A[v, u] = old
            self.A[u, v] = old
            self._adj = saved

    def region(self, mv) -> np.ndarray:
        """2-hop receptive field of the move's endpoints, edge included."""
        if mv[0] == "feat":
            ends, extra = (mv[1],), None
        else:
            ends, extra = (mv[1], mv[2]), (mv[1], mv[2])

        def nb(w):
            out = self.nbrs[w]
            if extra is not None and w in extra:
                out = out | {extra[0] if w == extra[1] else extra[1]}
            return out

        out = set()
        for w in ends:
            first = nb(w)
            out |= {w} | first
            for x in first:
                out |= nb(x)
        return np.array(sorted(out))

    def delta_with(self, mv) -> GraphDelta:
        if mv[0] == "feat":
            return GraphDelta(tuple(self.edge_flips), tuple(self.feature_edits) + ((mv[1], mv[2], float(mv[3])),))
        edge = (min(mv[1], mv[2]), max(mv[1], mv[2]), mv[3])
        return GraphDelta(tuple(self.edge_flips) + (edge,), tuple(self.feature_edits))

    def apply(self, mv):
        if mv[0] == "feat":
            _, v, f, new = mv
            self.feature_edits.append((v, f, float(new)))
            self.used_feat.add((v, f))
            self.X[v, f] = new
            return
        _, v, u, op = mv
        self.edge_flips.append((min(v, u), max(v, u), op))
        self.used_edge.add((min(v, u), max(v, u)))
        val = 1.0 if op == "add" else 0.0
        self.A[v, u] = val
        self.A[u, v] = val
        self._adj = None
        if op == "add":
            self.nbrs[v].add(u)
            self.nbrs[u].add(v)
        else:
            self.nbrs[v].discard(u)
            self.nbrs[u].discard(v)

    def delta(self) -> GraphDelta:
        return GraphDelta(tuple(self.edge_flips), tuple(self.feature_edits))


def _first_order_gain(mv, search: _Search, dX, dE, row_of) -> float:
    if mv[0] == "feat":
        _, v, f, new = mv
        return float(dX[v, f] * (new - search.X[v, f]))
    _, v, u, op = mv
    return float(dE[row_of[v], u] * (1.0 if op == "add" else -1.0))


def _loss_sum(P, nodes, targets) -> float:
    with np.errstate(divide="ignore"):
        return float(-sum(np.log(P[v, targets[v]]) for v in nodes))


def _finish(shadow, search, fp_nodes, labels, budget, trace, method, seed, reason, targets=None):
    delta = search.delta()
    graph = apply_delta(shadow, delta)
    fps = [
        Fingerprint(int(v), int(labels[v]), mode="inductive", attached_graph=graph,
                    provenance={"method": method, "seed": seed})
        for v in fp_nodes
    ]
    return InductiveFingerprintSet(
        graph=graph, base=shadow, fingerprints=fps, delta=delta, budget=budget,
        objective_trace=trace, method=method, seed=seed, stop_reason=reason,
        targets=dict(targets or {}),
    )


def _check_model_dims(m: Model, shadow: Graph):
    if shadow.num_features != m.input_dim:
        raise ValueError(f"shadow graph has {shadow.num_features} features, model expects {m.input_dim}")


def _gradient_greedy(m, shadow, fp_nodes, labels, budget, move_pool_size, targets, minimize,
                     feature_step, method, seed):
    """Greedy loop that screens moves by the input gradient of the node losses.

    Each round walks the moves in order of first-order gain, skips those
    that flip any prediction, keeps the first ``move_pool_size`` feasible
    ones, and applies whichever of them improves the exact objective most.
    A pool of one is plain gradient-order greedy.
    """
    params = m.params64()
    search = _Search(shadow, fp_nodes, feature_step)
    loss_targets = targets if minimize else {v: int(labels[v]) for v in fp_nodes}
    active = [v for v in fp_nodes if not minimize or targets[v] != labels[v]]
    pool = np.inf if move_pool_size is None else max(1, int(move_pool_size))

    def objective(adj, X):
        P = softmax(forward_cache(params, adj, X)["Z"])
        return _loss_sum(P, active, loss_targets)

    sign = -1.0 if minimize else 1.0
    current = objective(search.adj(), search.X)
    trace = [sign * current]
    if not active:
        return _finish(shadow, search, fp_nodes, labels, budget, trace, method, seed, "no active node", targets)
    reason = "budget"
    while len(search.edge_flips) + len(search.feature_edits) < budget:
        adj = search.adj()
        dX, dE = edge_gradients_from(params, adj, search.X, active, [loss_targets[v] for v in active], active)
        row_of = {v: i for i, v in enumerate(active)}
        search_fp, search.fp = search.fp, active
        moves = search.candidate_moves()
        search.fp = search_fp
        scored = [(sign * _first_order_gain(mv, search, dX, dE, row_of), i, mv) for i, mv in enumerate(moves)]
        scored.sort(key=lambda s: (-s[0], s[1]))
        best = None
        feasible = 0
        for _, _, mv in scored:
            rows = search.region(mv)
            with search.trial(mv) as (adj_t, X_t):
                pred = argmax_total_order(logits_rows(m, adj_t, X_t, rows))
                if np.any(pred != labels[rows]):
                    continue
                val = objective(adj_t, X_t)
            feasible += 1
            if best is None or sign * (val - best[1]) > 0:
                best = (mv, val)
            if feasible >= pool:
                break
        if best is None or not sign * (best[1] - current) > 0:
            reason = "stall"
            break
        search.apply(best[0])
        current = best[1]
        trace.append(sign * current)
    return _finish(shadow, search, fp_nodes, labels, budget, trace, method, seed, reason, targets)


def _query_oracle(oracle, g: Graph) -> np.ndarray:
    try:
        P = np.asarray(oracle(g), dtype=np.float64)
    except Exception as exc:  # noqa: BLE001 - any oracle failure aborts the search
        raise OracleError(f"oracle failed: {exc}") from exc
    if P.shape != (g.num_nodes, g.num_classes) or not np.all(np.isfinite(P)):
        raise OracleError("oracle returned malformed posteriors")
    return P


def _oracle_greedy(oracle, shadow, fp_nodes, labels, budget, move_pool_size, targets, minimize,
                   feature_step, method, seed):
    """Greedy loop that scores a seeded sample of moves by direct oracle evaluation."""
    rng = np.random.default_rng(seed)
    search = _Search(shadow, fp_nodes, feature_step)
    loss_targets = targets if minimize else {v: labels[v] for v in fp_nodes}
    active = [v for v in fp_nodes if not minimize or targets[v] != labels[v]]

    def query(g):
        return _query_oracle(oracle, g)

    sign = -1.0 if minimize else 1.0
    current = _loss_sum(query(shadow), active, loss_targets)
    trace = [sign * current]
    if not active:
        return _finish(shadow, search, fp_nodes, labels, budget, trace, method, seed, "no active node", targets)
    reason = "budget"
    while len(search.edge_flips) + len(search.feature_edits) < budget:
        search_fp, search.fp = search.fp, active
        moves = search.candidate_moves()
        search.fp = search_fp
        if not moves:
            reason = "stall"
            break
        if move_pool_size is not None and move_pool_size < len(moves):
            picks = np.sort(rng.choice(len(moves), size=move_pool_size, replace=False))
            moves = [moves[i] for i in picks]
        best = None
        for mv in moves:
            trial = apply_delta(shadow, search.delta_with(mv))
            P = query(trial)
            if np.any(argmax_total_order(P) != labels):
                continue
            val = _loss_sum(P, active, loss_targets)
            better = (val < current) if minimize else (val > current)
            if better and (best is None or ((val < best[1]) if minimize else (val > best[1]))):
                best = (mv, val)
        if best is None:
            reason = "stall"
            break
        search.apply(best[0])
        current = best[1]
        trace.append(sign * current)
    return _finish(shadow, search, fp_nodes, labels, budget, trace, method, seed, reason, targets)


def _fscores(m, shadow, nodes, labels, adj):
    params = m.params64()
    X = shadow.X_sparse
    cache = forward_cache(params, adj, X)
    return {int(v): _f_score(params, cache, adj, X, int(v), int(labels[v])) for v in nodes}


def construct_inductive_f(
    m: Model,
    shadow: Graph,
    k: int,
    budget: int,
    move_pool_size: int | None = 16,
    seed: int = 0,
    feature_step: float | None = None,
) -> InductiveFingerprintSet:
    """Top-``k`` shadow nodes by gradient-norm score, then gradient-screened loss ascent."""
    _check_model_dims(m, shadow)
    if not 0 < k <= shadow.num_nodes or budget < 0:
        raise ValueError("need 0 < k <= N and budget >= 0")
    adj = normalize_adjacency(shadow)
    labels = predict_all(m, adj, shadow.X_sparse)
    table = ScoreTable(_fscores(m, shadow, range(shadow.num_nodes), labels, adj), "F")
    fp_nodes = select_fingerprints(table, k)
    return _gradient_greedy(m, shadow, fp_nodes, labels, budget, move_pool_size, None, False,
                            feature_step, "F", seed)


def construct_inductive_l(
    oracle: Oracle,
    shadow: Graph,
    k: int,
    budget: int,
    move_pool_size: int | None = 32,
    seed: int = 0,
    feature_step: float | None = None,
) -> InductiveFingerprintSet:
    """Top-``k`` least-confident shadow nodes, then greedy loss ascent by direct evaluation."""
    if not 0 < k <= shadow.num_nodes or budget < 0:
        raise ValueError("need 0 < k <= N and budget >= 0")
    P = _query_oracle(oracle, shadow)
    labels = argmax_total_order(P)
    table = ScoreTable({v: score_transductive_l(P[v]) for v in range(shadow.num_nodes)}, "L")
    fp_nodes = select_fingerprints(table, k)
    return _oracle_greedy(oracle, shadow, fp_nodes, labels, budget, move_pool_size, None, False,
                          feature_step, "L", seed)


def construct_inductive_randomized(
    model_or_oracle,
    shadow: Graph,
    k: int,
    budget: int,
    seed: int = 0,
    method: str = "F",
    sample_size: int | None = None,
    move_pool_size: int | None = None,
    feature_step: float | None = None,
) -> InductiveFingerprintSet:
    """Sample candidates, keep the top ``k``, then pull each toward a random target class.

    ``method`` is ``"F"`` (gradient ranking, needs a :class:`Model`) or
    ``"L"`` (direct evaluation through an oracle). Predictions stay fixed;
    only the loss toward the random target is minimized.
    """
    if method not in ("F", "L"):
        raise ValueError(f"unknown method {method!r}")
    n = shadow.num_nodes
    s = min(n, 4 * k) if sample_size is None else int(sample_size)
    if not 0 < k <= s <= n or budget < 0:
        raise ValueError("need 0 < k <= sample_size <= N and budget >= 0")
    rng = np.random.default_rng(seed)
    sample = np.sort(rng.choice(n, size=s, replace=False)) if s < n else np.arange(n)
    if method == "F":
        m = model_or_oracle
        _check_model_dims(m, shadow)
        adj = normalize_adjacency(shadow)
        labels = predict_all(m, adj, shadow.X_sparse)
        table = ScoreTable(_fscores(m, shadow, sample, labels, adj), "F")
    else:
        oracle = model_or_oracle if callable(model_or_oracle) else model_oracle(model_or_oracle)
        P = _query_oracle(oracle, shadow)
        labels = argmax_total_order(P)
        table = ScoreTable({int(v): score_transductive_l(P[v]) for v in sample}, "L")
    fp_nodes = select_fingerprints(table, k)
    targets = {v: int(rng.integers(shadow.num_classes)) for v in fp_nodes}
    name = "rand" + method
    if method == "F":
        pool = 16 if move_pool_size is None else move_pool_size
        return _gradient_greedy(m, shadow, fp_nodes, labels, budget, pool, targets, True,
                                feature_step, name, seed)
    pool = 32 if move_pool_size is None else move_pool_size
    return _oracle_greedy(oracle, shadow, fp_nodes, labels, budget, pool, targets, True,
                          feature_step, name, seed)


def ordinary_inference_fingerprints(m_or_oracle, shadow: Graph, k: int, seed: int = 0) -> list:
    """Baseline: ``k`` uniformly drawn nodes queried on the unmodified shadow graph."""
    if not 0 < k <= shadow.num_nodes:
        raise ValueError("need 0 < k <= N")
    if isinstance(m_or_oracle, Model):
        labels = predict_all(m_or_oracle, normalize_adjacency(shadow), shadow.X_sparse)
    else:
        labels = argmax_total_order(np.asarray(m_or_oracle(shadow), dtype=np.float64))
    rng = np.random.default_rng(seed)
    picks = rng.choice(shadow.num_nodes, size=k, replace=False)
    prov = {"method": "ordinary", "seed": seed}
    return [Fingerprint(int(v), int(labels[v]), mode="inductive", attached_graph=shadow, provenance=prov)
            for v in picks]
