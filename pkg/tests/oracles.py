"""Independent dense reference implementations used as test oracles."""
import numpy as np


def dense_norm(a_tilde):
    d = a_tilde.sum(axis=1)
    s = 1.0 / np.sqrt(d)
    return s[:, None] * a_tilde * s[None, :]


def dense_logits(params, a_tilde, X):
    W1, b1, W2, b2 = params
    a = dense_norm(a_tilde)
    H = np.maximum(a @ X @ W1 + b1, 0.0)
    return a @ H @ W2 + b2


def dense_loss(params, a_tilde, X, nodes, targets):
    Z = dense_logits(params, a_tilde, X)
    Z = Z - Z.max(axis=1, keepdims=True)
    logp = Z - np.log(np.exp(Z).sum(axis=1, keepdims=True))
    return -sum(logp[v, y] for v, y in zip(nodes, targets))


def a_tilde_of(g):
    return g.adjacency().toarray() + np.eye(g.num_nodes)


def fd_param_grads(params, a_tilde, X, nodes, targets, h=1e-4):
    out = []
    for k, p in enumerate(params):
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            plus = [q.copy() for q in params]
            minus = [q.copy() for q in params]
            plus[k][idx] += h
            minus[k][idx] -= h
            g[idx] = (dense_loss(plus, a_tilde, X, nodes, targets)
                      - dense_loss(minus, a_tilde, X, nodes, targets)) / (2 * h)
        out.append(g)
    return out


def fd_feature_grads(params, a_tilde, X, nodes, targets, h=1e-4):
    g = np.zeros_like(X)
    for idx in np.ndindex(X.shape):
        Xp, Xm = X.copy(), X.copy()
        Xp[idx] += h
        Xm[idx] -= h
        g[idx] = (dense_loss(params, a_tilde, Xp, nodes, targets)
                  - dense_loss(params, a_tilde, Xm, nodes, targets)) / (2 * h)
    return g


def fd_edge_grad(params, a_tilde, X, nodes, targets, u, w, h=1e-4):
    """Derivative w.r.t. the symmetric relaxed entry (A+I)[u, w] = (A+I)[w, u]."""
    ap, am = a_tilde.copy(), a_tilde.copy()
    ap[u, w] += h
    ap[w, u] += h
    am[u, w] -= h
    am[w, u] -= h
    return (dense_loss(params, ap, X, nodes, targets) - dense_loss(params, am, X, nodes, targets)) / (2 * h)


def rel_err(a, b, floor=1e-6):
    """Max-norm relative error; ``floor`` keeps zero-gradient blocks from amplifying FD noise."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), floor))
