"""Online verification client and the detection/query metrics built on it."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .serving import TransportError

UNBOUNDED = "unbounded"


@dataclass
class VerificationItem:
    query: dict
    response: dict
    expected: int
    predicted: int
    match: bool

    def to_dict(self) -> dict:
        return {"query": self.query, "response": self.response, "expected": self.expected,
                "predicted": self.predicted, "match": self.match}


@dataclass
class VerificationReport:
    fingerprints: list
    items: list
    b: int | None
    endpoint: dict
    seed: int | None = None
    timestamp: float = field(default_factory=time.time)
    inconclusive: bool = False
    error: str | None = None

    @property
    def passed(self) -> bool:
        return self.b == 1

    @property
    def first_mismatch(self) -> int | None:
        for j, it in enumerate(self.items):
            if not it.match:
                return j
        return None

    def to_dict(self, with_timestamp: bool = True) -> dict:
        out = {
            "fingerprints": self.fingerprints,
            "items": [it.to_dict() for it in self.items],
            "b": self.b,
            "endpoint": self.endpoint,
            "seed": self.seed,
            "inconclusive": self.inconclusive,
            "error": self.error,
        }
        if with_timestamp:
            out["timestamp"] = self.timestamp
        return out


def _describe(fp) -> dict:
    d = {"node": fp.node_id, "label": fp.expected_label, "mode": fp.mode}
    if fp.attached_graph is not None:
        d["graph_hash"] = fp.attached_graph.content_hash()
    return d


def verify(endpoint, fingerprints, fail_fast: bool = False, seed: int | None = None) -> VerificationReport:
    """Query every fingerprint and set ``b = 1`` iff all responses match."""
    fingerprints = list(fingerprints)
    if not fingerprints:
        raise ValueError("need at least one fingerprint")
    modes = {fp.mode for fp in fingerprints}
    if len(modes) != 1:
        raise ValueError(f"mixed fingerprint modes {sorted(modes)}")
    mode = modes.pop()
    described = [_describe(fp) for fp in fingerprints]
    items = []
    health = {}
    try:
        health = endpoint.request("GET", "/healthz")
        if health.get("mode") != mode:
            raise ValueError(f"{mode} fingerprints cannot verify a {health.get('mode')} endpoint")
        graph_docs = {}
        for fp in fingerprints:
            if mode == "transductive":
                query = {"node": fp.node_id}
                resp = endpoint.request("POST", "/predict", query)
                pred = resp["label"]
            else:
                key = id(fp.attached_graph)
                if key not in graph_docs:
                    graph_docs[key] = fp.attached_graph.to_dict()
                query = {"graph": graph_docs[key], "nodes": [fp.node_id]}
                resp = endpoint.request("POST", "/predict", query)
                pred = resp["labels"][0]
            if not isinstance(pred, int) or isinstance(pred, bool):
                raise TransportError(f"non-integer label in response {resp!r}")
            match = pred == fp.expected_label
            items.append(VerificationItem(query, resp, fp.expected_label, pred, match))
            if fail_fast and not match:
                break
    except (TransportError, KeyError, IndexError, TypeError) as exc:
        return VerificationReport(described, items, None, health, seed, inconclusive=True,
                                  error=f"{type(exc).__name__}: {exc}")
    b = int(all(it.match for it in items))
    return VerificationReport(described, items, b, health, seed)


@dataclass
class DetectionResult:
    """Detection statistics over one battery of attacks.

    ``matrix[t, j]`` is True when fingerprint ``j`` mismatched on valid attack
    ``t``; ``curve[k]`` is DR using only the first ``k`` fingerprints.
    """

    dr: float | None
    detections: int
    valid: int
    attempted: int
    inconclusive: int
    curve: dict
    matrix: np.ndarray
    reports: list = field(default_factory=list)

    @property
    def undefined(self) -> bool:
        return self.dr is None

    def detected(self, k: int | None = None) -> np.ndarray:
        k = self.matrix.shape[1] if k is None else k
        return self.matrix[:, :k].any(axis=1)

    def min_queries(self) -> int | None:
        """Smallest k whose DR is 1.0 on this trial set, or None."""
        for k in sorted(self.curve):
            if self.curve[k] == 1.0:
                return k
        return None

    def to_dict(self) -> dict:
        mq = self.min_queries()
        return {
            "dr": "undefined" if self.dr is None else self.dr,
            "detections": self.detections,
            "valid_attacks": self.valid,
            "trials_attempted": self.attempted,
            "inconclusive": self.inconclusive,
            "curve": {str(k): v for k, v in sorted(self.curve.items())},
            "min_queries_full_detection": UNBOUNDED if mq is None else mq,
            "probe_budget": int(self.matrix.shape[1]),
        }


def detection_rate(attacks, fingerprints, endpoint_factory, keep_reports: bool = False) -> DetectionResult:
    """Serve every valid attack, verify with the full transcript, count b = 0.

    Invalid attacks are left out of the denominator and so are inconclusive
    verifications, which are counted separately.
    """
    fingerprints = list(fingerprints)
    attacks = list(attacks)
    rows, reports, inconclusive = [], [], 0
    for a in attacks:
        if not a.valid:
            continue
        rep = verify(endpoint_factory(a.tampered), fingerprints, seed=a.seed)
        if rep.inconclusive:
            inconclusive += 1
            continue
        rows.append([not it.match for it in rep.items])
        if keep_reports:
            reports.append(rep)
    K = len(fingerprints)
    matrix = np.array(rows, dtype=bool).reshape(len(rows), K)
    n = len(rows)
    if n == 0:
        return DetectionResult(None, 0, 0, len(attacks), inconclusive, {}, matrix, reports)
    hits = np.logical_or.accumulate(matrix, axis=1)
    curve = {k: float(hits[:, k - 1].mean()) for k in range(1, K + 1)}
    det = int(hits[:, -1].sum())
    return DetectionResult(det / n, det, n, len(attacks), inconclusive, curve, matrix, reports)


def query_improvement(queries_a: int | None, queries_b: int | None) -> float:
    """``queries_a / queries_b``; infinite when either method never reaches DR 1.0."""
    if queries_a is None or queries_b is None:
        return math.inf
    if queries_a < 1 or queries_b < 1:
        raise ValueError("query counts must be positive")
    return queries_a / queries_b


def qi_entry(name_a: str, res_a: DetectionResult, name_b: str, res_b: DetectionResult) -> dict:
    qa, qb = res_a.min_queries(), res_b.min_queries()
    ratio = query_improvement(qa, qb)
    return {
        "method_a": name_a,
        "method_b": name_b,
        "queries_a": UNBOUNDED if qa is None else qa,
        "queries_b": UNBOUNDED if qb is None else qb,
        "ratio": UNBOUNDED if math.isinf(ratio) else ratio,
        "probe_budget": int(max(res_a.matrix.shape[1], res_b.matrix.shape[1])),
    }


def paired_dr_lower_bound(ours, theirs, confidence: float = 0.95, n_resamples: int = 9999,
                          seed: int = 0) -> float:
    """One-sided percentile-bootstrap lower bound on mean(ours) - mean(theirs).

    ``ours`` and ``theirs`` are per-trial 0/1 detection indicators over the
    same attacks.
    """
    a = np.asarray(ours, dtype=np.float64)
    b = np.asarray(theirs, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("need two equal-length indicator vectors with >= 2 trials")
    if np.all(a - b == (a - b)[0]):
        return float((a - b)[0])

    def diff(x, y, axis):
        return x.mean(axis=axis) - y.mean(axis=axis)

    res = stats.bootstrap((a, b), diff, paired=True, vectorized=True, n_resamples=n_resamples,
                          confidence_level=confidence, alternative="greater", method="percentile",
                          rng=np.random.default_rng(seed))
    return float(res.confidence_interval.low)
