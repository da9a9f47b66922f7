"""scikit-learn style wrappers around the GCN and the fingerprint generators.

Graphs, not feature matrices, are the ``X`` argument throughout; labels
and masks travel inside the graph, so ``y`` is accepted and ignored.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from .fingerprint.inductive import (
    construct_inductive_f,
    construct_inductive_l,
    construct_inductive_randomized,
    model_oracle,
)
from .fingerprint.transductive import (
    baseline_manc,
    baseline_random,
    generate_randomized,
    save_fingerprints,
    score_table,
)
from .gcn import DimensionError, Model, TrainConfig, accuracy, forward, predict_all, train
from .graph import Graph, graph_from_dict, load_graph, normalize_adjacency


def check_graph(X, require_labels: bool = False) -> Graph:
    """Coerce a Graph, a Graph JSON dict or a path to a validated :class:`Graph`."""
    if isinstance(X, Graph):
        g = X
    elif isinstance(X, dict):
        g = graph_from_dict(X)
    elif isinstance(X, (str, Path)):
        g = load_graph(X)
    else:
        raise TypeError(f"expected a Graph, dict or path, got {type(X).__name__}")
    if require_labels and g.labels is None:
        raise ValueError("graph has no labels")
    return g


def check_model(model) -> Model:
    if isinstance(model, Model):
        return model
    if isinstance(model, GCNClassifier):
        check_is_fitted(model, "model_")
        return model.model_
    if isinstance(model, (str, Path)):
        return Model.load(model)
    raise TypeError(f"expected a Model, GCNClassifier or checkpoint path, got {type(model).__name__}")


def _check_dims(m: Model, g: Graph):
    if g.num_features != m.input_dim:
        raise DimensionError(f"graph has {g.num_features} features, model expects {m.input_dim}")


class GCNClassifier(ClassifierMixin, BaseEstimator):
    """Two-layer GCN node classifier trained full-batch on one graph."""

    def __init__(self, hidden_dim=16, learning_rate=0.02, epochs=200, dropout=0.5, seed=0):
        self.hidden_dim = hidden_dim
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.dropout = dropout
        self.seed = seed

    def fit(self, X, y=None):
        g = check_graph(X, require_labels=True)
        cfg = TrainConfig(learning_rate=self.learning_rate, epochs=self.epochs, dropout=self.dropout,
                          hidden_dim=self.hidden_dim, seed=self.seed)
        self.model_ = train(g, cfg)
        self.graph_ = g
        self.n_features_in_ = g.num_features
        self.classes_ = np.arange(g.num_classes)
        return self

    @classmethod
    def from_model(cls, model: Model, graph: Graph | None = None) -> "GCNClassifier":
        est = cls(hidden_dim=model.hidden_dim, seed=model.seed, epochs=model.epochs)
        est.model_ = model
        est.graph_ = graph
        est.n_features_in_ = model.input_dim
        est.classes_ = np.arange(model.num_classes)
        return est

    def _graph(self, X):
        check_is_fitted(self, "model_")
        if X is None:
            if self.graph_ is None:
                raise NotFittedError("no graph attached; pass one explicitly")
            return self.graph_
        g = check_graph(X)
        _check_dims(self.model_, g)
        return g

    def predict(self, X=None):
        g = self._graph(X)
        return predict_all(self.model_, normalize_adjacency(g), g.X_sparse)

    def predict_proba(self, X=None):
        g = self._graph(X)
        return forward(self.model_, normalize_adjacency(g), g.X_sparse)

    def score(self, X=None, y=None, mask: str = "test"):
        """Accuracy over the graph's ``mask`` (every node if the mask is absent)."""
        g = self._graph(X)
        return accuracy(self.model_, g, g.mask(mask, default_all=True))


class TransductiveFingerprinter(TransformerMixin, BaseEstimator):
    """Select transductive fingerprint nodes for a fitted model.

    ``transform`` returns the per-node fingerprint score (NaN outside the
    candidate pool); ``fit`` keeps the chosen ``fingerprints_``.
    """

    def __init__(self, model=None, method="F", k=5, sample_size=None, seed=0):
        self.model = model
        self.method = method
        self.k = k
        self.sample_size = sample_size
        self.seed = seed

    def fit(self, X, y=None):
        g = check_graph(X)
        m = check_model(self.model)
        _check_dims(m, g)
        if self.method in ("F", "L"):
            self.fingerprints_ = generate_randomized(m, g, sample_size=self.sample_size, k=self.k,
                                                     seed=self.seed, method=self.method)
        elif self.method == "random":
            self.fingerprints_ = baseline_random(m, g, k=self.k, seed=self.seed)
        elif self.method == "manc":
            self.fingerprints_ = baseline_manc(m, g, k=self.k)
        else:
            raise ValueError(f"unknown method {self.method!r}")
        return self

    def transform(self, X):
        g = check_graph(X)
        m = check_model(self.model)
        _check_dims(m, g)
        if self.method not in ("F", "L"):
            raise ValueError("only the F and L methods define a score")
        pool = g.mask("candidates", default_all=True)
        table = score_table(m, g, pool, self.method)
        out = np.full(g.num_nodes, np.nan)
        for v, s in table.scores.items():
            out[v] = s
        return out

    def save(self, path):
        check_is_fitted(self, "fingerprints_")
        save_fingerprints(self.fingerprints_, path, self.method, self.seed, self.sample_size)


class InductiveFingerprinter(BaseEstimator):
    """Build a perturbed fingerprint graph from a shadow graph."""

    def __init__(self, model=None, method="F", k=3, budget=5, randomized=False, sample_size=None,
                 move_pool_size=None, seed=0):
        self.model = model
        self.method = method
        self.k = k
        self.budget = budget
        self.randomized = randomized
        self.sample_size = sample_size
        self.move_pool_size = move_pool_size
        self.seed = seed

    def fit(self, X, y=None):
        shadow = check_graph(X)
        m = check_model(self.model)
        _check_dims(m, shadow)
        pool = {} if self.move_pool_size is None else {"move_pool_size": self.move_pool_size}
        if self.method not in ("F", "L"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.randomized:
            target = m if self.method == "F" else model_oracle(m)
            res = construct_inductive_randomized(target, shadow, self.k, self.budget, seed=self.seed,
                                                 method=self.method, sample_size=self.sample_size, **pool)
        elif self.method == "F":
            res = construct_inductive_f(m, shadow, self.k, self.budget, seed=self.seed, **pool)
        else:
            res = construct_inductive_l(model_oracle(m), shadow, self.k, self.budget, seed=self.seed, **pool)
        self.result_ = res
        self.fingerprints_ = res.fingerprints
        self.graph_ = res.graph
        return self

    def save(self, path):
        check_is_fitted(self, "result_")
        self.result_.save(path)

    def to_json(self) -> str:
        check_is_fitted(self, "result_")
        return json.dumps(self.result_.to_dict(), indent=2)
