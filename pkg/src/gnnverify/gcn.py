"""Two-layer GCN with analytic reverse-mode gradients.

Parameters live in float32 (the checkpoint layout bit flips act on); every
computation upcasts to float64.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .graph import Graph, normalize_adjacency

MAGIC = b"GCNF"
VERSION = 1
_HEADER = struct.Struct("<4sHIIIQ")
PARAM_BLOCKS = ("W1", "b1", "W2", "b2")


class DimensionError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.02
    epochs: int = 200
    dropout: float = 0.5
    hidden_dim: int = 16
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.hidden_dim < 1:
            raise ValueError("hidden_dim must be >= 1")


@dataclass(frozen=True, eq=False)
class Model:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    seed: int = 0
    epochs: int = 0
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in PARAM_BLOCKS:
            arr = np.array(getattr(self, name), dtype="<f4")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        d, h = self.W1.shape
        if self.b1.shape != (h,) or self.W2.shape[0] != h or self.b2.shape != (self.W2.shape[1],):
            raise DimensionError("inconsistent parameter shapes")

    @property
    def input_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def num_classes(self) -> int:
        return self.W2.shape[1]

    @property
    def num_params(self) -> int:
        return sum(getattr(self, b).size for b in PARAM_BLOCKS)

    def params64(self) -> tuple:
        # flipped exponents can yield signalling NaNs; the cast is still exact
        with np.errstate(invalid="ignore"):
            return tuple(getattr(self, b).astype(np.float64) for b in PARAM_BLOCKS)

    def with_params(self, **blocks) -> "Model":
        kw = {b: blocks.get(b, getattr(self, b)) for b in PARAM_BLOCKS}
        return Model(**kw, seed=self.seed, epochs=self.epochs, info=dict(self.info))

    def to_bytes(self) -> bytes:
        d, h = self.W1.shape
        head = _HEADER.pack(MAGIC, VERSION, d, h, self.num_classes, self.seed & (2**64 - 1))
        return head + b"".join(getattr(self, b).tobytes(order="C") for b in PARAM_BLOCKS)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Model":
        if len(data) < _HEADER.size:
            raise ValueError("checkpoint truncated")
        magic, version, d, h, c, seed = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        shapes = {"W1": (d, h), "b1": (h,), "W2": (h, c), "b2": (c,)}
        expected = _HEADER.size + 4 * sum(int(np.prod(s)) for s in shapes.values())
        if len(data) != expected:
            raise ValueError(f"checkpoint size {len(data)} != expected {expected}")
        off = _HEADER.size
        blocks = {}
        for name in PARAM_BLOCKS:
            count = int(np.prod(shapes[name]))
            blocks[name] = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(
                shapes[name]
            )
            off += 4 * count
        return cls(**blocks, seed=int(seed))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Model":
        return cls.from_bytes(Path(path).read_bytes())

    def hash(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def is_finite(self) -> bool:
        return all(np.isfinite(getattr(self, b)).all() for b in PARAM_BLOCKS)


@dataclass
class GradientSet:
    dW1: np.ndarray
    db1: np.ndarray
    dW2: np.ndarray
    db2: np.ndarray
    dX: np.ndarray | None = None
    dA: dict | None = None

    def blocks(self):
        return (self.dW1, self.db1, self.dW2, self.db2)


def glorot_init(d: int, h: int, c: int, rng: np.random.Generator) -> tuple:
    def uni(fan_in, fan_out):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-lim, lim, size=(fan_in, fan_out))

    return uni(d, h), np.zeros(h), uni(h, c), np.zeros(c)


def _check_dims(params, adj, X):
    W1 = params[0]
    if X.shape[0] != adj.shape[0]:
        raise DimensionError(f"features have {X.shape[0]} rows, adjacency {adj.shape[0]}")
    if X.shape[1] != W1.shape[0]:
        raise DimensionError(f"features have {X.shape[1]} columns, model expects {W1.shape[0]}")


def as_feature_matrix(X) -> sp.csr_matrix:
    """Features as CSR so zero entries never multiply a (possibly non-finite) weight."""
    if sp.issparse(X):
        return sp.csr_matrix(X, dtype=np.float64)
    return sp.csr_matrix(np.asarray(X, dtype=np.float64))


def forward_cache(params, adj, X, drop=None) -> dict:
    """Run the forward pass on float64 ``params`` and keep intermediates."""
    W1, b1, W2, b2 = params
    _check_dims(params, adj, X)
    X = as_feature_matrix(X)
    with np.errstate(all="ignore"):
        V = X @ W1
        Hpre = adj @ V + b1
        H = np.maximum(Hpre, 0.0)
        Hd = H if drop is None else H * drop
        U = Hd @ W2
        Z = adj @ U + b2
    return {"V": V, "Hpre": Hpre, "H": H, "Hd": Hd, "U": U, "Z": Z}


def softmax(Z: np.ndarray) -> np.ndarray:
    with np.errstate(all="ignore"):
        shifted = Z - Z.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)


def backward(params, cache, adj, X, dZ, drop=None, want_input=False) -> GradientSet:
    """Reverse pass for a loss whose gradient w.r.t. the logits is ``dZ``."""
    W1, b1, W2, b2 = params
    dU = adj.T @ dZ
    dW2 = cache["Hd"].T @ dU
    db2 = dZ.sum(axis=0)
    dH = dU @ W2.T
    if drop is not None:
        dH = dH * drop
    dHpre = dH * (cache["Hpre"] > 0)
    db1 = dHpre.sum(axis=0)
    dV = adj.T @ dHpre
    dW1 = as_feature_matrix(X).T @ dV
    grads = GradientSet(np.asarray(dW1), db1, np.asarray(dW2), db2)
    if want_input:
        grads.dX = dV @ W1.T
        grads.dHpre = dHpre
    return grads


def logits(m: Model, adj, X) -> np.ndarray:
    return forward_cache(m.params64(), adj, X)["Z"]


def forward(m: Model, adj, X) -> np.ndarray:
    """Posterior matrix softmax(Â ReLU(Â X W1 + b1) W2 + b2)."""
    return softmax(logits(m, adj, X))


def argmax_total_order(rows: np.ndarray) -> np.ndarray:
    """Row-wise argmax under NaN < -inf < finite < +inf, ties to the smallest index."""
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    cat = np.where(
        np.isnan(rows), 0, np.where(np.isneginf(rows), 1, np.where(np.isposinf(rows), 3, 2))
    )
    val = np.where(cat == 2, rows, 0.0)
    top = cat.max(axis=1, keepdims=True)
    keyed = np.where(cat == top, val, -np.inf)
    out = np.empty(rows.shape[0], dtype=np.int64)
    for r in range(rows.shape[0]):
        # first occurrence of the max is the smallest class id
        best = keyed[r].max()
        out[r] = int(np.flatnonzero(keyed[r] == best)[0])
    return out


def predict_all(m: Model, adj, X) -> np.ndarray:
    return argmax_total_order(logits(m, adj, X))


def predict(m: Model, adj, X, v: int) -> int:
    n = adj.shape[0]
    if not 0 <= v < n:
        raise IndexError(f"node {v} out of range [0, {n})")
    return int(predict_all(m, adj, X)[v])


def logits_rows(m: Model, adj: sp.csr_matrix, X, rows) -> np.ndarray:
    """Logits for ``rows`` only, touching just their 2-hop receptive field."""
    W1, b1, W2, b2 = m.params64()
    rows = np.asarray(sorted(rows), dtype=np.int64)
    sub = adj[rows]
    hid = np.unique(sub.indices)
    mid = adj[hid]
    src = np.unique(mid.indices)
    with np.errstate(all="ignore"):
        H = np.maximum((mid[:, src] @ as_feature_matrix(X[src])) @ W1 + b1, 0.0)
        U = H @ W2
        Z = sub[:, hid] @ U + b2
    return np.asarray(Z)


def predict_rows(m: Model, adj, X, rows) -> dict:
    rows = sorted(rows)
    labels = argmax_total_order(logits_rows(m, adj, X, rows))
    return dict(zip(rows, labels.tolist()))


def _node_dz(Z: np.ndarray, nodes, targets) -> np.ndarray:
    P = softmax(Z)
    dZ = np.zeros_like(Z)
    for v, y in zip(nodes, targets):
        dZ[v] = P[v]
        dZ[v, y] -= 1.0
    return dZ


def node_loss(m_or_params, adj, X, nodes, targets) -> float:
    params = m_or_params.params64() if isinstance(m_or_params, Model) else m_or_params
    Z = forward_cache(params, adj, X)["Z"]
    P = softmax(Z)
    with np.errstate(divide="ignore"):
        return float(-sum(np.log(P[v, y]) for v, y in zip(nodes, targets)))


def _check_node(adj, v):
    if not 0 <= v < adj.shape[0]:
        raise IndexError(f"node {v} out of range [0, {adj.shape[0]})")


def param_gradients_arrays(params, adj, X, nodes, targets) -> GradientSet:
    X = as_feature_matrix(X)
    cache = forward_cache(params, adj, X)
    dZ = _node_dz(cache["Z"], nodes, targets)
    return backward(params, cache, adj, X, dZ)


def node_param_gradients(params, cache, adj, X, v: int, y: int) -> GradientSet:
    """Single-node parameter gradient using only ``v``'s receptive field.

    Reuses a no-dropout ``forward_cache``; agrees with
    :func:`param_gradients_arrays` up to summation order.
    """
    W1, b1, W2, b2 = params
    row = adj[v]
    n1, a1 = row.indices, row.data
    with np.errstate(all="ignore"):
        g = softmax(cache["Z"][v:v + 1])[0]
        g[y] -= 1.0
        hbar = a1 @ cache["H"][n1]
        dW2 = np.outer(hbar, g)
        w2g = W2 @ g
        dHpre = a1[:, None] * w2g[None, :] * (cache["Hpre"][n1] > 0)
        db1 = dHpre.sum(axis=0)
        sub = adj[n1]
        n2 = np.unique(sub.indices)
        dV = sub[:, n2].T @ dHpre
        dW1 = as_feature_matrix(X)[n2].T @ dV
    return GradientSet(np.asarray(dW1), db1, dW2, g)


def param_gradients(m: Model, adj, X, v: int, y: int) -> GradientSet:
    """Gradient of -log softmax(z_v)[y] w.r.t. W1, b1, W2, b2."""
    _check_node(adj, v)
    return param_gradients_arrays(m.params64(), adj, X, [v], [y])


def input_gradients_arrays(params, adj, X, nodes, targets, candidate_pairs=()) -> GradientSet:
    """Gradients of the summed node losses w.r.t. features and relaxed edges.

    Edge gradients are taken w.r.t. the symmetric raw entry (A+I)[u, w] and
    propagated through the degree normalization.
    """
    X = as_feature_matrix(X)
    adj = sp.csr_matrix(adj)
    n = adj.shape[0]
    cache = forward_cache(params, adj, X)
    dZ = _node_dz(cache["Z"], nodes, targets)
    grads = backward(params, cache, adj, X, dZ, want_input=True)
    dHpre = grads.dHpre
    V, U = cache["V"], cache["U"]
    deg = 1.0 / adj.diagonal()
    coo = adj.tocoo()
    r, c, a = coo.row, coo.col, coo.data
    g_rc = np.einsum("ij,ij->i", dHpre[r], V[c]) + np.einsum("ij,ij->i", dZ[r], U[c])
    # sum_j (G_ij + G_ji) Â_ij; Â symmetric so G_ji terms come from the transposed entries
    contrib = g_rc * a
    rsum = np.bincount(r, weights=contrib, minlength=n) + np.bincount(c, weights=contrib, minlength=n)
    d_deg = -rsum / (2.0 * deg)
    dA = {}
    for u, w in candidate_pairs:
        u, w = int(u), int(w)
        if not (0 <= u < n and 0 <= w < n) or u == w:
            raise IndexError(f"candidate pair ({u}, {w}) invalid for {n} nodes")
        g_uw = dHpre[u] @ V[w] + dZ[u] @ U[w]
        g_wu = dHpre[w] @ V[u] + dZ[w] @ U[u]
        dA[(u, w)] = float((g_uw + g_wu) / np.sqrt(deg[u] * deg[w]) + d_deg[u] + d_deg[w])
    grads.dA = dA
    return grads


def edge_gradients_from(params, adj, X, nodes, targets, sources) -> tuple:
    """Feature gradients plus relaxed-edge gradients for every pair (s, u), s in ``sources``.

    Returns ``(dX, dE)`` where ``dE[k, u]`` is the gradient for the pair
    ``(sources[k], u)``; the diagonal entries are meaningless and set to 0.
    """
    X = as_feature_matrix(X)
    adj = sp.csr_matrix(adj)
    n = adj.shape[0]
    cache = forward_cache(params, adj, X)
    dZ = _node_dz(cache["Z"], nodes, targets)
    grads = backward(params, cache, adj, X, dZ, want_input=True)
    dHpre = grads.dHpre
    V, U = cache["V"], cache["U"]
    deg = 1.0 / adj.diagonal()
    coo = adj.tocoo()
    r, c, a = coo.row, coo.col, coo.data
    g_rc = np.einsum("ij,ij->i", dHpre[r], V[c]) + np.einsum("ij,ij->i", dZ[r], U[c])
    contrib = g_rc * a
    rsum = np.bincount(r, weights=contrib, minlength=n) + np.bincount(c, weights=contrib, minlength=n)
    d_deg = -rsum / (2.0 * deg)
    src = np.asarray(sources, dtype=np.int64)
    g_su = dHpre[src] @ V.T + dZ[src] @ U.T
    g_us = (dHpre @ V[src].T + dZ @ U[src].T).T
    dE = (g_su + g_us) / np.sqrt(deg[src][:, None] * deg[None, :]) + d_deg[src][:, None] + d_deg[None, :]
    dE[np.arange(src.size), src] = 0.0
    return grads.dX, dE


def input_gradients(m: Model, adj, X, v: int, y: int, candidate_pairs=()) -> GradientSet:
    _check_node(adj, v)
    return input_gradients_arrays(m.params64(), adj, X, [v], [y], candidate_pairs)


def accuracy(m: Model, g: Graph, mask, adj=None) -> float:
    mask = np.asarray(mask, dtype=np.int64)
    if mask.size == 0:
        raise ValueError("accuracy over an empty mask")
    adj = normalize_adjacency(g) if adj is None else adj
    pred = predict_all(m, adj, g.X)
    return float(np.mean(pred[mask] == g.labels[mask]))


def train(g: Graph, cfg: TrainConfig = TrainConfig(), adj=None) -> Model:
    """Full-batch Adam on the mean NLL over the train mask.

    Parameters are rounded to float32 after every step so the trained model
    is exactly what its checkpoint stores.
    """
    train_idx = np.asarray(g.masks.get("train", []), dtype=np.int64)
    if train_idx.size == 0:
        raise TrainingError("empty train mask")
    adj = normalize_adjacency(g) if adj is None else adj
    X = g.X_sparse
    rng = np.random.default_rng(cfg.seed)
    params = [p.astype(np.float32).astype(np.float64) for p in glorot_init(
        X.shape[1], cfg.hidden_dim, g.num_classes, rng)]
    m1 = [np.zeros_like(p) for p in params]
    m2 = [np.zeros_like(p) for p in params]
    keep = 1.0 - cfg.dropout
    y = g.labels[train_idx]
    for epoch in range(1, cfg.epochs + 1):
        drop = None
        if cfg.dropout > 0:
            drop = (rng.random((g.num_nodes, cfg.hidden_dim)) < keep) / keep
        cache = forward_cache(params, adj, X, drop)
        P = softmax(cache["Z"])
        loss = -np.mean(np.log(P[train_idx, y]))
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss at epoch {epoch}")
        dZ = np.zeros_like(P)
        dZ[train_idx] = P[train_idx]
        dZ[train_idx, y] -= 1.0
        dZ /= train_idx.size
        grads = backward(params, cache, adj, X, dZ, drop).blocks()
        t = epoch
        for k, gk in enumerate(grads):
            m1[k] = cfg.beta1 * m1[k] + (1 - cfg.beta1) * gk
            m2[k] = cfg.beta2 * m2[k] + (1 - cfg.beta2) * gk * gk
            mhat = m1[k] / (1 - cfg.beta1**t)
            vhat = m2[k] / (1 - cfg.beta2**t)
            params[k] = (params[k] - cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.eps)).astype(
                np.float32
            ).astype(np.float64)
    model = Model(*params, seed=cfg.seed, epochs=cfg.epochs)
    model.info["train_acc"] = accuracy(model, g, train_idx, adj)
    if g.masks.get("test") is not None and len(g.masks["test"]):
        model.info["test_acc"] = accuracy(model, g, g.masks["test"], adj)
    return model
