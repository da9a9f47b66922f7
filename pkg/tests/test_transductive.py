import numpy as np
import pytest

from gnnverify.fingerprint.transductive import (
    Fingerprint,
    ScoreTable,
    baseline_manc,
    baseline_random,
    coverage_fraction,
    generate_randomized,
    load_fingerprints,
    save_fingerprints,
    score_table,
    score_transductive_f,
    score_transductive_l,
    select_fingerprints,
)
from gnnverify.gcn import forward, param_gradients_arrays, predict_all


def test_l_score_examples():
    assert score_transductive_l(np.array([0.5, 0.5])) == pytest.approx(0.5)
    assert score_transductive_l(np.array([1.0, 0.0])) == 0.0
    with pytest.raises(ValueError):
        score_transductive_l(np.array([0.7, 0.7]))
    with pytest.raises(ValueError):
        score_transductive_l(np.array([np.nan, 1.0]))


def test_f_score_is_sum_of_block_norms(sbm, model, adj):
    v = 11
    y = int(predict_all(model, adj, sbm.X)[v])
    grads = param_gradients_arrays(model.params64(), adj, sbm.X, [v], [y])
    expected = sum(np.linalg.norm(b) for b in grads.blocks())
    assert score_transductive_f(model, sbm, v, adj) == pytest.approx(expected, rel=1e-12)
    with pytest.raises(IndexError):
        score_transductive_f(model, sbm, 10_000, adj)


def test_selection_order_and_ties():
    t = ScoreTable({3: 1.0, 1: 1.0, 2: 5.0, 0: 0.1}, "F")
    assert select_fingerprints(t, 3) == [2, 1, 3]
    with pytest.raises(ValueError):
        select_fingerprints(t, 5)


def test_l_scores_follow_posteriors(sbm, model, adj):
    P = forward(model, adj, sbm.X)
    tab = score_table(model, sbm, range(sbm.num_nodes), "L", adj)
    top = select_fingerprints(tab, 1)[0]
    assert top == int(np.argmin(P.max(axis=1)))


def test_randomized_generation(sbm, model, adj):
    a = generate_randomized(model, sbm, sample_size=20, k=3, seed=5, adj=adj)
    b = generate_randomized(model, sbm, sample_size=20, k=3, seed=5, adj=adj)
    assert [f.node_id for f in a] == [f.node_id for f in b]
    labels = predict_all(model, adj, sbm.X)
    assert all(f.expected_label == labels[f.node_id] for f in a)
    full = generate_randomized(model, sbm, k=3, adj=adj)
    tab = score_table(model, sbm, range(sbm.num_nodes), "F", adj)
    assert [f.node_id for f in full] == select_fingerprints(tab, 3)
    with pytest.raises(ValueError):
        generate_randomized(model, sbm, sample_size=2, k=3, adj=adj)


def test_baselines(sbm, model, adj):
    r = baseline_random(model, sbm, k=4, seed=1, adj=adj)
    assert len({f.node_id for f in r}) == 4
    m = baseline_manc(model, sbm, k=3, adj=adj)
    gains = [f.score for f in m]
    assert gains == sorted(gains, reverse=True)
    assert coverage_fraction(model, sbm, [f.node_id for f in m], adj) >= coverage_fraction(
        model, sbm, [m[0].node_id], adj)


def test_transductive_fingerprints_carry_no_graph(sbm):
    with pytest.raises(ValueError):
        Fingerprint(0, 0, attached_graph=sbm)


def test_file_round_trip(tmp_path, sbm, model, adj):
    fps = generate_randomized(model, sbm, k=3, adj=adj)
    save_fingerprints(fps, tmp_path / "f.json", "F")
    back = load_fingerprints(tmp_path / "f.json")
    assert [(f.node_id, f.expected_label) for f in back] == [(f.node_id, f.expected_label) for f in fps]
