"""Model-centric attacks: exponent-MSB bit flips and edge-poisoning retrains."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .gcn import PARAM_BLOCKS, Model, TrainConfig, accuracy, edge_gradients_from, train
from .graph import Graph, normalize_adjacency

EXPONENT_MSB = 30
DEFAULT_THRESHOLD = 0.05

KINDS = ("BFA", "BFA-F", "BFA-L", "PoisonRandom", "PoisonGrad")


def bit_flip_value(x):
    """Flip bit 30 (the exponent MSB) of a float32 value or array."""
    arr = np.asarray(x, dtype="<f4")
    flipped = (arr.view("<u4") ^ np.uint32(1 << EXPONENT_MSB)).view("<f4")
    return flipped if flipped.ndim else np.float32(flipped[()])


def is_valid_attack(clean_acc: float, attacked_acc: float, threshold: float = DEFAULT_THRESHOLD) -> bool:
    """Strict ``drop > threshold``; a drop equal to it up to rounding does not count."""
    drop = clean_acc - attacked_acc
    return drop > threshold and not math.isclose(drop, threshold, rel_tol=0.0, abs_tol=1e-12)


@dataclass
class AttackOutcome:
    tampered: Model
    kind: str
    detail: dict
    clean_acc: float
    attacked_acc: float
    valid: bool
    seed: int
    threshold: float = DEFAULT_THRESHOLD
    extra: dict = field(default_factory=dict)

    def manifest(self, checkpoint_path=None) -> dict:
        return {
            "checkpoint": None if checkpoint_path is None else str(checkpoint_path),
            "kind": self.kind,
            "detail": self.detail,
            "clean_acc": self.clean_acc,
            "attacked_acc": self.attacked_acc,
            "valid": self.valid,
            "threshold": self.threshold,
            "seed": self.seed,
            "model_hash": self.tampered.hash(),
        }


def flip_parameter(m: Model, block: str, index: int, bit: int = EXPONENT_MSB) -> Model:
    arr = np.array(getattr(m, block), dtype="<f4")
    flat = arr.reshape(-1).view("<u4")
    flat[index] ^= np.uint32(1 << bit)
    return m.with_params(**{block: arr})


def _eval_mask(g: Graph) -> np.ndarray:
    return g.mask("test", default_all=True)


def _bfa(m: Model, g: Graph, seed: int, blocks, kind: str, threshold: float, adj=None) -> AttackOutcome:
    rng = np.random.default_rng(seed)
    sizes = np.array([getattr(m, b).size for b in blocks])
    flat = int(rng.integers(sizes.sum()))
    k = int(np.searchsorted(np.cumsum(sizes), flat, side="right"))
    block = blocks[k]
    index = flat - int(sizes[:k].sum())
    tampered = flip_parameter(m, block, index)
    adj = normalize_adjacency(g) if adj is None else adj
    mask = _eval_mask(g)
    clean = accuracy(m, g, mask, adj)
    attacked = accuracy(tampered, g, mask, adj)
    before = float(getattr(m, block).reshape(-1)[index])
    after = float(getattr(tampered, block).reshape(-1)[index])
    return AttackOutcome(
        tampered=tampered,
        kind=kind,
        detail={"block": block, "index": index, "bit": EXPONENT_MSB, "before": before, "after": after},
        clean_acc=clean,
        attacked_acc=attacked,
        valid=is_valid_attack(clean, attacked, threshold),
        seed=seed,
        threshold=threshold,
    )


def bfa_random(m: Model, g: Graph, seed: int, threshold: float = DEFAULT_THRESHOLD, adj=None):
    """Flip the exponent MSB of one parameter drawn uniformly from all blocks."""
    return _bfa(m, g, seed, PARAM_BLOCKS, "BFA", threshold, adj)


def bfa_first_bias(m: Model, g: Graph, seed: int, threshold: float = DEFAULT_THRESHOLD, adj=None):
    return _bfa(m, g, seed, ("b1",), "BFA-F", threshold, adj)


def bfa_last_bias(m: Model, g: Graph, seed: int, threshold: float = DEFAULT_THRESHOLD, adj=None):
    return _bfa(m, g, seed, ("b2",), "BFA-L", threshold, adj)


def _absent_pairs(g: Graph) -> np.ndarray:
    n = g.num_nodes
    iu, ju = np.triu_indices(n, k=1)
    present = g.adjacency().toarray()[iu, ju] > 0
    return np.stack([iu[~present], ju[~present]], axis=1)


def _poison_outcome(g, edges, cfg, seed, kind, threshold, clean_model, extra=None):
    poisoned = g.replace(edges=g.edges | frozenset(map(tuple, edges)))
    tampered = train(poisoned, cfg)
    clean_model = train(g, cfg) if clean_model is None else clean_model
    adj = normalize_adjacency(g)
    mask = _eval_mask(g)
    clean = accuracy(clean_model, g, mask, adj)
    attacked = accuracy(tampered, g, mask, adj)
    return AttackOutcome(
        tampered=tampered,
        kind=kind,
        detail={"edges": [[int(i), int(j)] for i, j in edges], "retrain_seed": cfg.seed},
        clean_acc=clean,
        attacked_acc=attacked,
        valid=is_valid_attack(clean, attacked, threshold),
        seed=seed,
        threshold=threshold,
        extra=extra or {},
    )


def poison_random(
    g: Graph,
    n_edges: int,
    retrain_cfg: TrainConfig = TrainConfig(),
    seed: int = 0,
    threshold: float = DEFAULT_THRESHOLD,
    clean_model: Model | None = None,
) -> AttackOutcome:
    """Add ``n_edges`` uniformly chosen absent edges and retrain."""
    absent = _absent_pairs(g)
    if not 0 <= n_edges <= len(absent):
        raise ValueError(f"cannot add {n_edges} edges; {len(absent)} absent pairs")
    rng = np.random.default_rng(seed)
    pick = absent[np.sort(rng.choice(len(absent), size=n_edges, replace=False))]
    return _poison_outcome(g, pick, retrain_cfg, seed, "PoisonRandom", threshold, clean_model)


def _train_loss_edge_scores(m: Model, g: Graph) -> np.ndarray:
    """Gradient of the summed training NLL w.r.t. every relaxed (A+I) entry."""
    adj = normalize_adjacency(g)
    train_idx = g.mask("train")
    params = m.params64()
    targets = g.labels[train_idx]
    _, dE = edge_gradients_from(params, adj, g.X, train_idx, targets, np.arange(g.num_nodes))
    return 0.5 * (dE + dE.T)


def poison_grad(
    g: Graph,
    n_edges: int,
    retrain_cfg: TrainConfig = TrainConfig(),
    seed: int = 0,
    threshold: float = DEFAULT_THRESHOLD,
    clean_model: Model | None = None,
) -> AttackOutcome:
    """Gradient-guided edge-insertion poisoning (a first-order stand-in for Mettack).

    Each step trains a surrogate on the current graph, adds the absent edge
    whose relaxed-entry gradient of the training loss is largest, and
    repeats; the final model is retrained once on the poisoned graph.
    """
    absent = _absent_pairs(g)
    if not 0 <= n_edges <= len(absent):
        raise ValueError(f"cannot add {n_edges} edges; {len(absent)} absent pairs")
    current = g
    chosen = []
    for step in range(n_edges):
        surrogate = train(current, TrainConfig(**{**retrain_cfg.__dict__, "seed": retrain_cfg.seed + step}))
        scores = _train_loss_edge_scores(surrogate, current)
        adjm = current.adjacency().toarray()
        iu, ju = np.triu_indices(g.num_nodes, k=1)
        free = adjm[iu, ju] == 0
        vals = np.where(free, scores[iu, ju], -np.inf)
        best = int(np.argmax(vals))
        e = (int(iu[best]), int(ju[best]))
        chosen.append(e)
        current = current.replace(edges=current.edges | {e})
    return _poison_outcome(g, chosen, retrain_cfg, seed, "PoisonGrad", threshold, clean_model)


ATTACKS = {
    "bfa": bfa_random,
    "bfa-f": bfa_first_bias,
    "bfa-l": bfa_last_bias,
    "poison-rand": poison_random,
    "poison-grad": poison_grad,
}


def save_outcome(outcome: AttackOutcome, directory, stem: str) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ckpt = directory / f"{stem}.gcnf"
    outcome.tampered.save(ckpt)
    path = directory / f"{stem}.json"
    path.write_text(json.dumps(outcome.manifest(ckpt), indent=2))
    return path
