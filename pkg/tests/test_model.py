import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from breaker import engine, model


def _stochastic(rows, cols, seed):
    rng = np.random.default_rng(seed)
    q = rng.random((rows, cols)) + 0.05
    return q / q.sum(axis=1, keepdims=True)


# ----------------------------------------------------------------------- REM


def test_rem_zero_weights_give_zero_representation(small_spec, small_params, small_batch):
    params = {k: v.copy() for k, v in small_params.items()}
    for n in params:
        if n.startswith("user_rem."):
            params[n][...] = 0.0
    feats, items, _ = small_batch
    e_u, _ = model.rem_forward(params, small_spec, feats, items)
    assert np.all(e_u == 0.0)


def test_rem_identity_layer_returns_embedding_row():
    spec = model.ModelSpec((4,), n_items=2, embedding_dim=3, rem_widths=(3,), tower_widths=(2,), n_clusters=1)
    params = model.init_params(spec, np.random.default_rng(0))
    params["user_rem.0.W"] = np.eye(3)
    e_u, _ = model.rem_forward(params, spec, np.array([[2]]), np.array([0]))
    np.testing.assert_array_equal(e_u[0], params["user_emb"][2])


def test_rem_feature_out_of_range(small_spec, small_params):
    with pytest.raises(engine.IndexRangeError, match="position 1.*cardinality 3"):
        model.user_forward(small_params, small_spec, np.array([[0, 3, 0]]))


def test_init_is_seeded(small_spec):
    a = model.init_params(small_spec, np.random.default_rng(5))
    b = model.init_params(small_spec, np.random.default_rng(5))
    assert list(a) == list(b)
    assert all(a[n].tobytes() == b[n].tobytes() for n in a)


# ---------------------------------------------------------------------- URCM


def test_soft_assign_equidistant_is_uniform():
    mu = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
    q = model.soft_assign(np.zeros((1, 2)), mu, 1.0)
    np.testing.assert_allclose(q, 0.25, atol=1e-15)


def test_soft_assign_hand_example():
    # kernels (1+0)^-1 = 1 and (1+3)^-1 = 1/4 -> [0.8, 0.2]
    mu = np.array([[0.0, 0.0], [math.sqrt(3.0), 0.0]])
    q = model.soft_assign(np.zeros((1, 2)), mu, 1.0)
    np.testing.assert_allclose(q[0], [0.8, 0.2], atol=1e-12)


def test_soft_assign_far_centroids_give_hard_assignment():
    mu = np.array([[0.0, 0.0], [1e6, 0.0], [0.0, -1e6]])
    q = model.soft_assign(np.zeros((1, 2)), mu, 1.0)
    assert q[0, 0] >= 1 - 1e-10


def test_target_distribution_single_row_is_identity():
    q = _stochastic(1, 4, 0)
    np.testing.assert_array_equal(model.target_distribution(q), q)


def test_target_distribution_hand_example():
    q = np.array([[0.8, 0.2], [0.4, 0.6]])
    # f = [1.2, 0.8]; q^2/f rows: [8/15, 1/20] and [2/15, 9/20]
    expected = np.array([[32 / 35, 3 / 35], [8 / 35, 27 / 35]])
    np.testing.assert_allclose(model.target_distribution(q), expected, atol=1e-12)


def test_target_distribution_uniform_fixed_point():
    q = np.full((5, 3), 1 / 3)
    np.testing.assert_allclose(model.target_distribution(q), q, atol=1e-15)


def test_clustering_loss_values():
    q = _stochastic(3, 4, 1)
    loss, _ = model.clustering_loss(q, q)
    assert loss == 0.0
    loss, _ = model.clustering_loss(np.array([[1.0, 0.0]]), np.array([[0.5, 0.5]]))
    assert loss == pytest.approx(math.log(2.0), abs=1e-15)


@settings(max_examples=60)
@given(st.integers(1, 8), st.integers(1, 5), st.integers(0, 10_000))
def test_clustering_loss_nonnegative(n, k, seed):
    p = _stochastic(n, k, seed)
    q = _stochastic(n, k, seed + 1)
    assert model.clustering_loss(p, q)[0] >= 0.0


@settings(max_examples=60)
@given(
    arrays(np.float64, (6, 3), elements=st.floats(-50, 50)),
    arrays(np.float64, (4, 3), elements=st.floats(-50, 50)),
    st.floats(0.1, 5.0),
)
def test_assignment_rows_are_stochastic(e, mu, alpha):
    q = model.soft_assign(e, mu, alpha)
    p = model.target_distribution(q)
    for m in (q, p):
        assert np.all(m >= 0)
        np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(q > 0)


def test_soft_assign_backward_matches_finite_differences():
    rng = np.random.default_rng(2)
    ps = {"e": rng.normal(size=(5, 3)), "mu": rng.normal(size=(3, 3))}
    g = rng.normal(size=(5, 3))
    q = model.soft_assign(ps["e"], ps["mu"], 1.5)
    de, dmu = model.soft_assign_backward(g, ps["e"], ps["mu"], 1.5, q)
    loss = lambda p: float(np.sum(model.soft_assign(p["e"], p["mu"], 1.5) * g))
    assert engine.finite_diff_check(loss, ps, {"e": de, "mu": dmu}) <= 1e-8


# ---------------------------------------------------------- closed-form oracle


def test_closed_form_zero_when_p_equals_q():
    rng = np.random.default_rng(0)
    e, mu = rng.normal(size=(6, 4)), rng.normal(size=(3, 4))
    q = model.soft_assign(e, mu)
    de, dmu = model.closed_form_cluster_gradients(e, mu, q, q)
    assert np.max(np.abs(de)) <= 1e-12 and np.max(np.abs(dmu)) <= 1e-12


def test_closed_form_single_centroid_at_point():
    e = np.array([[1.0, 2.0]])
    de, dmu = model.closed_form_cluster_gradients(e, e.copy(), np.ones((1, 1)), np.ones((1, 1)))
    assert np.all(de == 0) and np.all(dmu == 0)


def test_closed_form_matches_finite_differences():
    rng = np.random.default_rng(12)
    ps = {"e": rng.normal(size=(4, 3)), "mu": rng.normal(size=(2, 3))}
    p = model.target_distribution(model.soft_assign(ps["e"] + 0.3, ps["mu"]))
    q = model.soft_assign(ps["e"], ps["mu"])
    de, dmu = model.closed_form_cluster_gradients(ps["e"], ps["mu"], p, q)
    loss = lambda x: model.clustering_loss(p, model.soft_assign(x["e"], x["mu"]))[0]
    for name, g in (("e", de), ("mu", dmu)):
        num = np.zeros_like(ps[name])
        for idx in np.ndindex(*ps[name].shape):
            orig = ps[name][idx]
            ps[name][idx] = orig + 1e-6
            fp = loss(ps)
            ps[name][idx] = orig - 1e-6
            fm = loss(ps)
            ps[name][idx] = orig
            num[idx] = (fp - fm) / 2e-6
        np.testing.assert_allclose(g, num, atol=1e-6)


@pytest.mark.parametrize("seed,n,k,d,alpha", [(0, 16, 4, 8, 1.0), (1, 5, 2, 3, 1.0), (2, 9, 3, 6, 2.5), (3, 1, 4, 2, 0.7)])
def test_engine_backward_agrees_with_closed_form(seed, n, k, d, alpha):
    rng = np.random.default_rng(seed)
    e, mu = rng.normal(size=(n, d)), rng.normal(size=(k, d))
    p = model.target_distribution(model.soft_assign(e + rng.normal(scale=0.5, size=e.shape), mu, alpha))
    q = model.soft_assign(e, mu, alpha)
    _, g_q = model.clustering_loss(p, q)
    de, dmu = model.soft_assign_backward(g_q, e, mu, alpha, q)
    de_cf, dmu_cf = model.closed_form_cluster_gradients(e, mu, p, q, alpha)
    np.testing.assert_allclose(de, de_cf, atol=1e-8, rtol=0)
    np.testing.assert_allclose(dmu, dmu_cf, atol=1e-8, rtol=0)


# ---------------------------------------------------------------------- CPMM


def test_zero_towers_output_half(small_spec, small_params):
    params = {k: (np.zeros_like(v) if k.startswith("tower.") else v) for k, v in small_params.items()}
    yc, _ = model.cpmm_forward(params, small_spec, np.ones((2, 10)))
    assert np.all(yc == 0.5)


def test_single_tower_is_plain_head():
    spec = model.ModelSpec((3,), n_items=2, embedding_dim=2, rem_widths=(4,), tower_widths=(3,), n_clusters=1)
    params = model.init_params(spec, np.random.default_rng(1))
    e_in = np.random.default_rng(2).normal(size=(4, 8))
    yc, _ = model.cpmm_forward(params, spec, e_in)
    z, _ = engine.mlp_forward(e_in, [(params["tower.0.0.W"], params["tower.0.0.b"]),
                                     (params["tower.0.1.W"], params["tower.0.1.b"])])
    np.testing.assert_array_equal(yc[:, 0], engine.sigmoid(z[:, 0]))
    # with one cluster the mixture weight is exactly 1
    q = model.soft_assign(np.ones((4, 4)), np.zeros((1, 4)))
    np.testing.assert_array_equal(model.aggregate(yc, q), yc[:, 0])


def test_copied_towers_agree(small_spec, small_params):
    params = dict(small_params)
    for n in model.tower_param_names(params, 0):
        for k in range(1, small_spec.n_clusters):
            params[n.replace("tower.0.", f"tower.{k}.", 1)] = params[n].copy()
    yc, _ = model.cpmm_forward(params, small_spec, np.random.default_rng(0).normal(size=(5, 10)))
    for k in range(1, small_spec.n_clusters):
        np.testing.assert_array_equal(yc[:, k], yc[:, 0])


def test_tower_width_checked(small_spec, small_params):
    with pytest.raises(model.ModelError, match="width"):
        model.cpmm_forward(small_params, small_spec, np.ones((1, 7)))


def test_aggregate_examples():
    yc = np.array([[0.2, 0.6, 0.9]])
    np.testing.assert_array_equal(model.aggregate(yc, np.array([[0.0, 1.0, 0.0]])), [0.6])
    assert model.aggregate(np.array([0.2, 0.6]), np.array([0.5, 0.5])) == pytest.approx(0.4, abs=1e-15)


@settings(max_examples=60)
@given(st.floats(0.01, 0.99), st.integers(1, 6), st.integers(0, 1000))
def test_aggregate_of_equal_towers(v, k, seed):
    q = _stochastic(3, k, seed)
    np.testing.assert_allclose(model.aggregate(np.full((3, k), v), q), v, atol=1e-12)


@settings(max_examples=60)
@given(st.integers(1, 6), st.integers(0, 1000))
def test_aggregate_is_the_mixture(k, seed):
    rng = np.random.default_rng(seed)
    yc = rng.random((4, k))
    q = _stochastic(4, k, seed + 7)
    mixture = np.array([sum(yc[i, c] * q[i, c] for c in range(k)) for i in range(4)])
    np.testing.assert_allclose(model.aggregate(yc, q), mixture, atol=1e-12)


# --------------------------------------------------------------------- losses


def test_classification_loss_examples():
    loss, _ = model.classification_loss(np.array([1.0]), np.array([1]))
    assert loss == pytest.approx(-math.log(1 - 1e-7), rel=1e-9)
    loss, _ = model.classification_loss(np.array([0.5]), np.array([1]))
    assert loss == pytest.approx(math.log(2.0), abs=1e-15)
    loss, _ = model.classification_loss(np.array([0.5, 0.5]), np.array([1, 0]))
    assert loss == pytest.approx(math.log(2.0), abs=1e-15)


def test_classification_loss_rejects_bad_label():
    with pytest.raises(model.ModelError, match="0 or 1"):
        model.classification_loss(np.array([0.5]), np.array([2]))


def test_total_loss():
    assert model.total_loss(0.7, 0.3, 0.0) == 0.7
    assert model.total_loss(0.7, 0.3, 0.1) == pytest.approx(0.73, abs=1e-15)
    assert model.total_loss(0.7, 0.0, 1.0) == 0.7


# ------------------------------------------------------------ full backward


@pytest.mark.parametrize("reduction", ["sum", "mean"])
def test_total_loss_gradient_all_groups(small_spec, small_params, small_batch, reduction):
    feats, items, labels = small_batch
    target = {k: v + 0.05 for k, v in model.make_target(small_params).items()}
    p = model.pseudo_labels(target, small_spec, feats, small_params["centroids"])
    out = model.loss_and_grads(small_params, small_spec, feats, items, labels, lam=0.7, p=p,
                               cluster_reduction=reduction)
    f = lambda ps: model.loss_and_grads(ps, small_spec, feats, items, labels, lam=0.7, p=p,
                                        cluster_reduction=reduction).losses.total
    assert set(out.grads) == set(small_params)
    assert engine.finite_diff_check(f, small_params, out.grads, max_coords=25, seed=1) <= 1e-4


def test_uniform_weights_skip_clustering(small_spec, small_params, small_batch):
    feats, items, labels = small_batch
    out = model.loss_and_grads(small_params, small_spec, feats, items, labels, lam=0.1,
                               weights=np.full(3, 1 / 3))
    assert out.losses.cluster == 0.0
    assert "centroids" not in out.grads
    f = lambda ps: model.loss_and_grads(ps, small_spec, feats, items, labels,
                                        weights=np.full(3, 1 / 3)).losses.total
    assert engine.finite_diff_check(f, small_params, out.grads, max_coords=10) <= 1e-4


def test_one_hot_weights_isolate_tower(small_spec, small_params, small_batch):
    feats, items, labels = small_batch
    out = model.loss_and_grads(small_params, small_spec, feats, items, labels,
                               weights=np.array([0.0, 1.0, 0.0]))
    for k in (0, 2):
        for n in model.tower_param_names(small_params, k):
            assert np.all(out.grads[n] == 0.0), n
    assert any(np.any(out.grads[n] != 0) for n in model.tower_param_names(small_params, 1))


# ------------------------------------------------------------- target / rank


def test_sync_target_copies_and_stays_stale(small_params):
    params = {k: v.copy() for k, v in small_params.items()}
    target = model.make_target(params)
    assert set(target) == {"user_emb", "user_rem.0.W", "user_rem.0.b", "user_rem.1.W", "user_rem.1.b"}
    params["user_emb"] += 1.0
    assert model.target_gap(params, target) == pytest.approx(1.0)
    model.sync_target(params, target)
    assert model.target_gap(params, target) == 0.0
    before = {k: v.copy() for k, v in target.items()}
    state = engine.AdamState.zeros_like(params)
    engine.adam_step(params, {k: np.ones_like(v) for k, v in params.items()}, state, 1e-3)
    assert all(np.array_equal(before[k], target[k]) for k in target)
    assert model.target_gap(params, target) > 0


def test_sync_target_shape_mismatch(small_params):
    target = model.make_target(small_params)
    target["user_emb"] = np.zeros((2, 2))
    with pytest.raises(model.ModelError, match="shape"):
        model.sync_target(small_params, target)


def test_predict_rank_orders_and_ties(small_spec, small_params):
    feats = np.array([0, 1, 2])
    ranked = model.predict_rank(small_params, small_spec, feats, [4])
    assert ranked[0][0] == 4
    ranked = model.predict_rank(small_params, small_spec, feats, [0, 1, 2, 3, 4, 5])
    scores = [s for _, s in ranked]
    assert scores == sorted(scores, reverse=True)

    params = {k: v.copy() for k, v in small_params.items()}
    params["item_emb"][3] = params["item_emb"][1]
    tied = model.predict_rank(params, small_spec, feats, [3, 1])
    assert tied[0][1] == tied[1][1]
    assert [i for i, _ in tied] == [1, 3]


def test_predict_rank_unknown_item(small_spec, small_params):
    with pytest.raises(model.ModelError, match="unknown item id 6"):
        model.predict_rank(small_params, small_spec, np.array([0, 0, 0]), [1, 6])


def test_predict_rank_prefers_higher_score():
    spec = model.ModelSpec((2,), n_items=2, embedding_dim=1, rem_widths=(1,), tower_widths=(1,), n_clusters=1)
    params = {k: np.zeros(s) for k, s in spec.param_shapes().items()}
    # hidden unit = item_emb + 2, so item 0 -> logit w and item 1 -> logit 3w
    params["item_emb"][:] = [[-1.0], [1.0]]
    params["item_rem.0.W"][:] = 1.0
    params["tower.0.0.W"][:] = [[0.0, 1.0]]
    params["tower.0.0.b"][:] = 2.0
    params["tower.0.1.W"][:] = math.log(1.5)
    ranked = model.predict_rank(params, spec, np.array([0]), [0, 1])
    assert [i for i, _ in ranked] == [1, 0]
    assert ranked[0][1] == pytest.approx(1.5**3 / (1 + 1.5**3), rel=1e-12)
    assert ranked[1][1] == pytest.approx(0.6, rel=1e-12)
