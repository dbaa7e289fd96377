import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cases import g2g_case, random_adjacency, rel_err
from dtg.entity_graph import EntityGraph
from dtg.g2g import (CLAMP, AdaptationRecord, G2GModel, TrainConfig, adapt_pair,
                     adjacency_from_graph, apply_g2g, decode, encode, feature_loss,
                     grad_total_loss, pair_loss, sparsity_weight, topology_loss,
                     topology_loss_from_logits, total_loss, train_g2g)
from dtg.numerics import DimensionError, finite_diff_grad, sigmoid


def graph(E, feats=None, ids=None):
    E = np.asarray(E, dtype=float)
    n = E.shape[0]
    feats = np.arange(n * 4, dtype=float).reshape(n, 4) if feats is None else feats
    return EntityGraph("e", "t", ids or [f"f{i}" for i in range(n)], feats, E, "pearson")


def test_adjacency_threshold_is_strict():
    E = np.array([[1.0, 0.3, -0.31], [0.3, 1.0, 0.0], [-0.31, 0.0, 1.0]])
    np.testing.assert_array_equal(adjacency_from_graph(E, 0.3),
                                  [[1, 0, 1], [0, 1, 0], [1, 0, 1]])


def test_adjacency_diagonal_always_set():
    np.testing.assert_array_equal(adjacency_from_graph(np.zeros((3, 3)), 0.5), np.eye(3))


def test_adjacency_rejects_bad_delta():
    with pytest.raises(ValueError):
        adjacency_from_graph(np.eye(2), 1.0)


def test_adapt_same_size_is_noop():
    g = graph(np.eye(3))
    out, rec = adapt_pair(g, graph(np.eye(3)))
    assert out is g and rec.mode == "none"


def test_adapt_padding():
    src = graph([[1, 0.5], [0.5, 1]])
    out, rec = adapt_pair(src, graph(np.eye(4)))
    assert rec.mode == "padded" and rec.pseudo_indices == [2, 3]
    assert out.arc_weights.shape == (4, 4)
    np.testing.assert_array_equal(out.arc_weights[2:, :2], 1.0)   # real -> pseudo
    np.testing.assert_array_equal(out.arc_weights[:2, 2:], 0.0)   # nothing back
    np.testing.assert_array_equal(np.diag(out.arc_weights), 1.0)
    np.testing.assert_array_equal(out.features[2:], 0.0)
    np.testing.assert_array_equal(rec.apply(src.features), out.features)


def test_adapt_clustering_hyper_arcs():
    feats = np.array([[0, 0, 0, 0], [0.1, 0, 0, 0], [10, 10, 10, 10], [10, 10.1, 10, 10]], float)
    E = np.array([[1.0, 0.9, -0.6, -0.4],
                  [0.9, 1.0, -0.8, 0.2],
                  [-0.6, -0.8, 1.0, 0.7],
                  [-0.4, 0.2, 0.7, 1.0]])
    out, rec = adapt_pair(graph(E, feats), graph(np.eye(2)))
    assert rec.mode == "clustered" and rec.n_adapted == 2
    a = rec.assignments
    assert a[0] == a[1] and a[2] == a[3] and a[0] != a[2]
    # cross weights -0.6 -0.4 -0.8 0.2: mean -0.4 -> negative sign, mean |E| = 0.5
    assert out.arc_weights[a[0], a[2]] == pytest.approx(-0.5)
    np.testing.assert_allclose(out.features[a[0]], [0.05, 0, 0, 0])
    np.testing.assert_allclose(rec.apply(feats), out.features)


def test_adaptation_record_round_trip():
    rec = AdaptationRecord("clustered", 4, assignments=[0, 1, 1, 0])
    assert AdaptationRecord.from_dict(rec.to_dict()) == rec


def test_encode_hand_oracle():
    # two nodes, T = 2, two layers; node 0 reads from both, node 1 only itself
    A = np.array([[1.0, 1.0], [0.0, 1.0]])
    W0 = np.array([[1.0, -1.0], [0.5, 2.0]])
    W1 = np.array([[1.0, 0.0], [-1.0, 1.0]])
    X = np.array([[1.0, 2.0], [-3.0, 1.0]])
    m = G2GModel("s", "t", [2, 2, 2], [W0, W1], 0.3, A)
    # layer 0: AX = [[-2, 3], [-3, 1]]; AX W0 = [[-0.5, 8], [-2.5, 5]]; relu -> [[0, 8], [0, 5]]
    # layer 1: A H = [[0, 13], [0, 5]]; times W1 = [[-13, 13], [-5, 5]]  (no relu)
    np.testing.assert_allclose(encode(m, X), [[-13.0, 13.0], [-5.0, 5.0]])


def test_encode_shape_check():
    m, Xs, _, _ = g2g_case(0, 2, 3, 4)
    with pytest.raises(DimensionError):
        encode(m, Xs[:, :3])


def test_decode_zero_latent():
    out = decode(np.zeros((3, 2)), 0.3)
    np.testing.assert_array_equal(out.P, 0.5)
    np.testing.assert_array_equal(out.A_hat, 1.0)
    assert decode(np.zeros((3, 2)), 0.6).A_hat.sum() == 0


def test_decode_symmetric_and_bounded(rng):
    out = decode(rng.normal(size=(5, 3)) * 4, 0.3)
    np.testing.assert_array_equal(out.P, out.P.T)
    assert np.all((out.P >= 0) & (out.P <= 1))


def test_decode_hand_value():
    Z = np.array([[1.0, 0.0], [1.0, 1.0]])
    out = decode(Z, 0.7)
    np.testing.assert_allclose(out.P, sigmoid(np.array([[1.0, 1.0], [1.0, 2.0]])))
    np.testing.assert_array_equal(out.A_hat, [[1, 1], [1, 1]])


def test_sparsity_weight_values():
    assert sparsity_weight(np.eye(3)) == pytest.approx(6 / 9)
    assert sparsity_weight(np.ones((3, 3))) == 0.0


def test_topology_loss_hand_value():
    P = np.array([[0.9, 0.2], [0.2, 0.8]])
    A = np.eye(2)
    S = 0.5
    expected = -S * (np.log(0.9) + np.log(0.8)) - 2 * np.log(0.8)
    assert topology_loss(P, A) == pytest.approx(expected, rel=1e-12)


def test_topology_loss_vanishes_at_target():
    A = random_adjacency(np.random.default_rng(1), 4)
    P = np.clip(A, CLAMP, 1 - CLAMP)
    assert topology_loss(P, A) < 1e-9


def test_topology_loss_from_logits_agrees(rng):
    Q = rng.normal(size=(4, 4)) * 3
    Q = 0.5 * (Q + Q.T)
    A = random_adjacency(rng, 4)
    assert topology_loss_from_logits(Q, A) == pytest.approx(topology_loss(sigmoid(Q), A), rel=1e-10)


def test_topology_loss_clamps_saturated_logits():
    A = np.eye(2)
    Q = np.array([[-100.0, 100.0], [100.0, -100.0]])
    expected = -0.5 * 2 * np.log(CLAMP) - 2 * np.log(CLAMP)
    assert topology_loss_from_logits(Q, A) == pytest.approx(expected, rel=1e-9)


def test_feature_loss_is_sum_of_row_norms():
    Z = np.array([[3.0, 4.0], [0.0, 0.0]])
    assert feature_loss(Z, np.zeros((2, 2))) == pytest.approx(5.0)
    assert feature_loss(Z, Z) == 0.0


def test_total_loss_linear_in_lambda(rng):
    Z = rng.normal(size=(3, 4))
    P = sigmoid(Z @ Z.T)
    A, X = np.eye(3), rng.normal(size=(3, 4))
    l0, l1, l3 = (total_loss(P, Z, A, X, lam) for lam in (0.0, 1.0, 3.0))
    assert l3 - l0 == pytest.approx(3 * (l1 - l0), rel=1e-12)


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("layers", [2, 3])
def test_gradient_matches_finite_differences(seed, layers):
    model, Xs, At, Xt = g2g_case(seed, layers, 3, 4)
    analytic = grad_total_loss(model, Xs, At, Xt, 1.0)

    def f(ws):
        model.weights = ws
        return pair_loss(model, Xs, At, Xt, 1.0)

    numeric = finite_diff_grad(f, [w.copy() for w in model.weights])
    for a, n in zip(analytic, numeric):
        assert np.max(rel_err(a, n)) < 1e-4


def test_gradient_linear_in_lambda():
    model, Xs, At, Xt = g2g_case(7, 2, 3, 4)
    g0, g1, g2 = (grad_total_loss(model, Xs, At, Xt, lam) for lam in (0.0, 1.0, 2.0))
    for a, b, c in zip(g0, g1, g2):
        np.testing.assert_allclose(c - a, 2 * (b - a), atol=1e-10)


def identity_pairs():
    X = np.array([[2, 3, 2, 3], [2.1, 3, 2, 2.9], [-1, -1, -2, -2]], float)
    A = np.array([[1, 1, 0], [1, 1, 0], [0, 0, 1]], float)
    return [(X, A, X, A)]


def test_training_is_deterministic():
    cfg = TrainConfig(learning_rate=0.001, epochs=50)
    a, b = train_g2g(identity_pairs(), cfg), train_g2g(identity_pairs(), cfg)
    assert a.loss_history == b.loss_history
    for wa, wb in zip(a.weights, b.weights):
        np.testing.assert_array_equal(wa, wb)


def test_training_history_and_best_loss():
    m = train_g2g(identity_pairs(), TrainConfig(learning_rate=0.001, epochs=30))
    assert len(m.loss_history) == 31
    best = m.best_loss_history
    assert all(b2 <= b1 for b1, b2 in zip(best, best[1:]))
    assert m.param_count() == 2 * 16


def test_zero_epochs_keeps_initial_weights():
    from dtg.g2g import xavier_init
    m = train_g2g(identity_pairs(), TrainConfig(epochs=0, seed=3))
    for w, w0 in zip(m.weights, xavier_init([4, 4, 4], 3)):
        np.testing.assert_array_equal(w, w0)
    assert len(m.loss_history) == 1


def test_fully_connected_target_has_zero_sparsity_weight():
    X = identity_pairs()[0][0]
    A = np.ones((3, 3))
    m = train_g2g([(X, A, X, A)], TrainConfig(learning_rate=0.001, epochs=20, lam=0.0))
    # S = 0 and no absent arcs: the topology term is identically zero
    assert m.loss_history == [0.0] * 21


def test_training_rejects_mixed_source_adjacency():
    X, A, _, _ = identity_pairs()[0]
    with pytest.raises(ValueError):
        train_g2g([(X, A, X, A), (X, np.eye(3), X, A)], TrainConfig(epochs=1))


def test_training_rejects_shape_mismatch():
    X, A, _, _ = identity_pairs()[0]
    with pytest.raises(DimensionError):
        train_g2g([(X, A, X[:, :3], A)], TrainConfig(epochs=1))


def test_non_finite_weights_raise():
    X, A, _, _ = identity_pairs()[0]
    X = X.copy()
    X[0, 0] = np.nan
    with pytest.raises(FloatingPointError):
        with np.errstate(all="ignore"):
            train_g2g([(X, A, X, A)], TrainConfig(epochs=5))


def test_identity_task_learns_topology():
    m = train_g2g(identity_pairs(), TrainConfig(learning_rate=0.001, epochs=500))
    assert m.loss_history[-1] < 0.1 * m.loss_history[0]
    X, A, _, _ = identity_pairs()[0]
    np.testing.assert_array_equal(apply_g2g(m, X).A_hat, A)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 4), st.integers(1, 3), st.integers(2, 4))
def test_pseudo_rows_do_not_touch_real_rows(seed, n_real, n_pseudo, layers):
    rng = np.random.default_rng(seed)
    T = 4
    E = rng.uniform(-1, 1, (n_real, n_real))
    E = 0.5 * (E + E.T)
    np.fill_diagonal(E, 1.0)
    src = graph(E, rng.normal(size=(n_real, T)))
    padded, _ = adapt_pair(src, graph(np.eye(n_real + n_pseudo)))
    dims = [T] * (layers + 1)
    ws = [rng.normal(size=(T, T)) for _ in range(layers)]
    small = G2GModel("s", "t", dims, ws, 0.3, adjacency_from_graph(src, 0.3))
    big = G2GModel("s", "t", dims, ws, 0.3, adjacency_from_graph(padded, 0.3))
    Zs, Zb = encode(small, src.features), encode(big, padded.features)
    assert np.array_equal(Zb[:n_real], Zs)
