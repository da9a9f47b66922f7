import json

import numpy as np
import pytest

from gnnverify.attacks import (
    ATTACKS,
    bfa_first_bias,
    bfa_last_bias,
    bfa_random,
    bit_flip_value,
    flip_parameter,
    is_valid_attack,
    poison_grad,
    poison_random,
    save_outcome,
)
from gnnverify.gcn import Model, TrainConfig


def test_ieee_examples():
    assert bit_flip_value(np.float32(2.0)) == np.float32(0.0)
    assert bit_flip_value(np.float32(1.0)) == np.float32(np.inf)
    assert bit_flip_value(np.float32(0.5)) == np.float32(2.0**127)


def test_flip_is_involution_on_arrays():
    rng = np.random.default_rng(0)
    bits = rng.integers(0, 2**32, size=1000, dtype=np.uint64).astype(np.uint32)
    x = bits.view(np.float32)
    back = bit_flip_value(bit_flip_value(x))
    assert np.array_equal(back.view(np.uint32), bits)


def test_validity_threshold_is_strict():
    assert not is_valid_attack(0.9, 0.85)
    assert is_valid_attack(0.9, 0.849)


def test_flip_parameter_changes_one_entry(model):
    t = flip_parameter(model, "W2", 3)
    diff = np.flatnonzero(t.W2.view(np.uint32) != model.W2.view(np.uint32))
    assert diff.tolist() == [3]
    assert np.array_equal(t.W1, model.W1)


@pytest.mark.parametrize("fn,blocks", [(bfa_random, {"W1", "b1", "W2", "b2"}),
                                       (bfa_first_bias, {"b1"}), (bfa_last_bias, {"b2"})])
def test_bfa_targets_and_determinism(fn, blocks, sbm, model, adj):
    seen = set()
    for s in range(30):
        o = fn(model, sbm, s, adj=adj)
        seen.add(o.detail["block"])
        assert o.valid == (o.clean_acc - o.attacked_acc > 0.05)
        again = fn(model, sbm, s, adj=adj)
        assert again.tampered.hash() == o.tampered.hash()
    assert seen <= blocks


def test_manifest_round_trip(tmp_path, sbm, model, adj):
    o = bfa_last_bias(model, sbm, 1, adj=adj)
    path = save_outcome(o, tmp_path, "t")
    doc = json.loads(path.read_text())
    assert doc["kind"] == "BFA-L" and doc["model_hash"] == o.tampered.hash()
    assert Model.load(doc["checkpoint"]).hash() == o.tampered.hash()


def test_poisoning_adds_edges_and_retrains(sbm, model):
    cfg = TrainConfig(seed=3, epochs=50)
    o = poison_random(sbm, 10, cfg, seed=4, clean_model=model)
    assert len(o.detail["edges"]) == 10
    assert all(not sbm.has_edge(i, j) for i, j in o.detail["edges"])
    assert poison_random(sbm, 10, cfg, seed=4, clean_model=model).tampered.hash() == o.tampered.hash()
    with pytest.raises(ValueError):
        poison_random(sbm, 10**6, cfg)


def test_gradient_poisoning_picks_absent_edges(sbm, model):
    o = poison_grad(sbm, 3, TrainConfig(seed=0, epochs=30), seed=0, clean_model=model)
    edges = [tuple(e) for e in o.detail["edges"]]
    assert len(set(edges)) == 3
    assert all(not sbm.has_edge(i, j) for i, j in edges)


def test_registry_covers_cli_kinds():
    assert set(ATTACKS) == {"bfa", "bfa-f", "bfa-l", "poison-rand", "poison-grad"}
