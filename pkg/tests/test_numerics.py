import math

import numpy as np
import pytest

from mvrec import numerics as nx
from mvrec.errors import IndexOutOfRange, ShapeMismatch, ZeroVector


# ---------------------------------------------------------------------------
# independent oracles (kept deliberately naive: loops + math, no numpy tricks)


def oracle_cosine(a, b):
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(x * x for x in b))
    return dot / (na * nb)


def oracle_batch_hard_triplet(features, labels, alpha):
    """Brute force over every anchor/pos/neg triple; hardest per anchor."""
    b = len(features)
    dist = [[1.0 - oracle_cosine(features[i], features[j]) for j in range(b)]
            for i in range(b)]
    losses = []
    for a in range(b):
        pos = [p for p in range(b) if p != a and labels[p] == labels[a]]
        neg = [n for n in range(b) if labels[n] != labels[a]]
        if not pos or not neg:
            continue
        hardest_pos = max(dist[a][p] for p in pos)
        hardest_neg = min(dist[a][n] for n in neg)
        losses.append(max(hardest_pos - hardest_neg + alpha, 0.0))
    if not losses:
        return 0.0, True
    return sum(losses) / len(losses), False


def oracle_adamw_unrolled(w0, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8, wd=0.0):
    """Scalar AdamW recurrence on plain Python floats."""
    w, m, v = w0, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        w = w - lr * mhat / (math.sqrt(vhat) + eps) - lr * wd * w
    return w


# ---------------------------------------------------------------------------
# cosine_sim


def test_cosine_identical():
    assert nx.cosine_sim([1.0, 0.0], [1.0, 0.0]) == 1.0


def test_cosine_orthogonal():
    assert nx.cosine_sim([1.0, 0.0], [0.0, 1.0]) == 0.0


def test_cosine_45_degrees():
    assert nx.cosine_sim([1.0, 1.0], [1.0, 0.0]) == pytest.approx(math.sqrt(0.5), abs=1e-12)


def test_cosine_random_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a = rng.normal(size=7)
        b = rng.normal(size=7)
        assert nx.cosine_sim(a, b) == pytest.approx(oracle_cosine(a, b), abs=1e-12)


def test_cosine_clamped_to_unit_interval():
    v = np.full(64, 0.1)
    assert nx.cosine_sim(v, v) == 1.0
    assert nx.cosine_sim(v, -v) == -1.0


def test_cosine_zero_vector_raises():
    with pytest.raises(ZeroVector):
        nx.cosine_sim([0.0, 0.0], [1.0, 0.0])
    with pytest.raises(ZeroVector):
        nx.cosine_sim([1.0, 0.0], [1e-13, 0.0])


def test_cosine_shape_mismatch_raises():
    with pytest.raises(ShapeMismatch):
        nx.cosine_sim([1.0, 0.0], [1.0, 0.0, 0.0])


# ---------------------------------------------------------------------------
# psi / silu


def test_psi_examples():
    assert nx.psi(1.0, 32.0) == 1.0
    assert float(nx.psi(0.0, 1.0)) == pytest.approx(math.exp(-1.0), abs=1e-12)
    assert float(nx.psi(0.5, 1.0)) == pytest.approx(math.exp(-0.5), abs=1e-12)


def test_psi_range_and_monotonicity():
    xs = np.linspace(-1.0, 1.0, 101)
    for beta in (0.5, 1.0, 32.0):
        vals = nx.psi(xs, beta)
        assert np.all(vals > 0.0) and np.all(vals <= 1.0)
        assert np.all(np.diff(vals) > 0.0)  # strictly increasing in x
    # strictly decreasing in beta for x < 1
    assert float(nx.psi(0.3, 2.0)) < float(nx.psi(0.3, 1.0))


def test_psi_rejects_nonpositive_beta():
    with pytest.raises(ValueError):
        nx.psi(0.5, 0.0)


def test_silu_examples():
    assert nx.silu(0.0) == 0.0
    assert float(nx.silu(1.0)) == pytest.approx(1.0 / (1.0 + math.exp(-1.0)), abs=1e-12)
    assert float(nx.silu(50.0)) == pytest.approx(50.0, abs=1e-9)


def test_silu_grad_matches_finite_difference():
    xs = np.linspace(-4.0, 4.0, 33)
    h = 1e-6
    numeric = (nx.silu(xs + h) - nx.silu(xs - h)) / (2 * h)
    assert np.allclose(nx.silu_grad(xs), numeric, atol=1e-8)


# ---------------------------------------------------------------------------
# cross entropy


def test_ce_uniform_two_class():
    assert nx.cross_entropy([0.0, 0.0], 0) == pytest.approx(math.log(2.0), abs=1e-12)


def test_ce_saturated_correct_class():
    assert nx.cross_entropy([20.0, -20.0], 0) == pytest.approx(0.0, abs=1e-12)


def test_ce_uniform_five_class():
    assert nx.cross_entropy([0.0] * 5, 2) == pytest.approx(math.log(5.0), abs=1e-12)


def test_ce_shift_invariance():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=6)
    base = nx.cross_entropy(logits, 3)
    assert nx.cross_entropy(logits + 123.456, 3) == pytest.approx(base, abs=1e-10)


def test_ce_label_out_of_range():
    with pytest.raises(IndexOutOfRange):
        nx.cross_entropy([0.0, 0.0], 2)
    with pytest.raises(IndexOutOfRange):
        nx.cross_entropy([0.0, 0.0], -1)


def test_ce_batch_grad_matches_finite_difference():
    rng = np.random.default_rng(2)
    logits = rng.normal(size=(4, 3))
    labels = np.array([0, 2, 1, 1])

    def loss_fn(params):
        value, grad = nx.cross_entropy_batch(params["z"], labels)
        return value, {"z": grad}

    assert nx.check_gradients(loss_fn, {"z": logits}, epsilon=1e-5) < 1e-8


# ---------------------------------------------------------------------------
# triplet loss


def test_triplet_easy_batch_is_zero():
    # tight cluster far from the negative: hinge inactive for every anchor
    feats = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    labels = np.array([0, 0, 1])
    res = nx.triplet_loss(feats, labels, alpha=0.5)
    assert res.value == 0.0
    assert not res.degenerate


def test_triplet_single_hinge_arithmetic():
    # designated triple: d(a,p)=1, d(a,n)=0 -> hinge = 1 - 0 + 0.5
    d_ap = 1.0 - nx.cosine_sim([1.0, 0.0], [0.0, 1.0])
    d_an = 1.0 - nx.cosine_sim([1.0, 0.0], [1.0, 0.0])
    assert max(d_ap - d_an + 0.5, 0.0) == pytest.approx(1.5, abs=1e-12)


def test_triplet_matches_bruteforce_oracle():
    rng = np.random.default_rng(3)
    for trial in range(20):
        feats = rng.normal(size=(8, 5))
        labels = rng.integers(0, 2, size=8)
        want, want_degen = oracle_batch_hard_triplet(feats.tolist(), labels.tolist(), 0.5)
        got = nx.triplet_loss(feats, labels, alpha=0.5)
        assert got.degenerate == want_degen
        assert got.value == pytest.approx(want, abs=1e-10), f"trial {trial}"


def test_triplet_degenerate_single_class():
    feats = np.array([[1.0, 0.0], [0.9, 0.1]])
    res = nx.triplet_loss(feats, np.array([0, 0]), alpha=0.5)
    assert res.value == 0.0
    assert res.degenerate


def test_triplet_degenerate_all_singletons():
    feats = np.array([[1.0, 0.0], [0.0, 1.0]])
    res = nx.triplet_loss(feats, np.array([0, 1]), alpha=0.5)
    assert res.value == 0.0
    assert res.degenerate


def test_triplet_gradient_from_distances():
    # gradient of the batch-hard value w.r.t. the distance matrix itself
    rng = np.random.default_rng(4)
    dist = rng.uniform(0.1, 1.9, size=(6, 6))
    dist = (dist + dist.T) / 2
    np.fill_diagonal(dist, 0.0)
    labels = np.array([0, 0, 1, 1, 2, 2])

    def loss_fn(params):
        value, grad, _ = nx.batch_hard_triplet_from_distances(params["d"], labels, 0.5)
        return value, {"d": grad}

    assert nx.check_gradients(loss_fn, {"d": dist}, epsilon=1e-5) < 1e-8


def test_triplet_batch_all_counts_every_triple():
    # 2 anchors of class 0 and one negative: 2 valid triples, both active
    feats = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    labels = np.array([0, 0, 1])
    dist = nx.pairwise_distances(feats, "cosine")
    value, _, degen = nx.batch_all_triplet_from_distances(dist, labels, 0.5)
    # triples: (0,1,2): 1-0+0.5=1.5 ; (1,0,2): 1-1+0.5=0.5
    assert not degen
    assert value == pytest.approx((1.5 + 0.5) / 2, abs=1e-12)


# ---------------------------------------------------------------------------
# AdamW


def test_adamw_zero_grad_is_identity():
    params = {"w": np.array([1.0, -2.0, 3.0])}
    state = nx.adamw_init(params, lr=1e-4)
    new_params, new_state = nx.adamw_step(params, {"w": np.zeros(3)}, state)
    assert np.array_equal(new_params["w"], params["w"])
    assert new_state.step == 1


def test_adamw_first_step_closed_form():
    # m_hat = g, v_hat = g^2 -> update = g / (|g| + eps)
    lr, g, eps = 1e-4, 0.5, 1e-8
    params = {"w": np.array([1.0])}
    state = nx.adamw_init(params, lr=lr)
    new_params, _ = nx.adamw_step(params, {"w": np.array([g])}, state)
    want = 1.0 - lr * g / (abs(g) + eps)
    assert new_params["w"][0] == pytest.approx(want, abs=1e-15)
    assert new_params["w"][0] == pytest.approx(0.9999, abs=1e-8)


def test_adamw_matches_unrolled_recurrence():
    lr = 1e-3
    grads = [0.5, 0.5, -0.25, 1.0, 0.0]
    params = {"w": np.array([1.0])}
    state = nx.adamw_init(params, lr=lr)
    for g in grads:
        params, state = nx.adamw_step(params, {"w": np.array([g])}, state)
    want = oracle_adamw_unrolled(1.0, grads, lr)
    assert params["w"][0] == pytest.approx(want, abs=1e-15)
    assert state.step == len(grads)


def test_adamw_weight_decay_decoupled():
    # with zero grad, decay shrinks params by exactly lr*wd*p
    params = {"w": np.array([2.0])}
    state = nx.adamw_init(params, lr=0.01, weight_decay=0.1)
    new_params, _ = nx.adamw_step(params, {"w": np.zeros(1)}, state)
    assert new_params["w"][0] == pytest.approx(2.0 - 0.01 * 0.1 * 2.0, abs=1e-15)


def test_adamw_does_not_mutate_inputs():
    params = {"w": np.array([1.0, 2.0])}
    grads = {"w": np.array([0.3, -0.7])}
    state = nx.adamw_init(params)
    before = params["w"].copy()
    nx.adamw_step(params, grads, state)
    assert np.array_equal(params["w"], before)
    assert np.all(state.m["w"] == 0.0)


def test_adamw_shape_mismatch():
    params = {"w": np.zeros(3)}
    state = nx.adamw_init(params)
    with pytest.raises(ShapeMismatch):
        nx.adamw_step(params, {"w": np.zeros(4)}, state)
    with pytest.raises(ShapeMismatch):
        nx.adamw_step(params, {"b": np.zeros(3)}, state)


# ---------------------------------------------------------------------------
# gradient checker


def test_check_gradients_quadratic():
    rng = np.random.default_rng(5)
    w0 = rng.normal(size=(3, 4))

    def loss_fn(params):
        w = params["w"]
        return 0.5 * float(np.sum(w * w)), {"w": w.copy()}

    assert nx.check_gradients(loss_fn, {"w": w0}, epsilon=1e-5) < 1e-8


def test_check_gradients_constant_loss():
    def loss_fn(params):
        return 7.0, {"w": np.zeros_like(params["w"])}

    assert nx.check_gradients(loss_fn, {"w": np.ones(4)}, epsilon=1e-5) == 0.0


def test_check_gradients_flags_wrong_gradient():
    def loss_fn(params):
        w = params["w"]
        return 0.5 * float(np.sum(w * w)), {"w": 2.0 * w}  # off by a factor

    assert nx.check_gradients(loss_fn, {"w": np.ones(3)}, epsilon=1e-5) > 0.1


def test_check_gradients_rejects_bad_epsilon():
    def loss_fn(params):
        return 0.0, {"w": np.zeros_like(params["w"])}

    with pytest.raises(ValueError):
        nx.check_gradients(loss_fn, {"w": np.ones(2)}, epsilon=1e-7)
