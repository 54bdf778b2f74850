import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clust3 import losses
from clust3 import tensor as T
from clust3.errors import ContractError, LabelError, ShapeError, SizeError
from clust3.nn import ModelBundle, ModelSpec

from gradcheck import analytic_grads, max_rel_error

TOL = 1e-4


def random_stochastic(rng, n, k, sharp=1.0):
    x = rng.normal(0, sharp, size=(n, k))
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def joint_mi_loop(z_list):
    """Independent oracle: enumerate every joint outcome tuple explicitly."""
    n = z_list[0].shape[0]
    sizes = [z.shape[1] for z in z_list]
    h_cond = 0.0
    marg = {}
    for outcome in itertools.product(*[range(k) for k in sizes]):
        total = 0.0
        for i in range(n):
            p = 1.0
            for z, c in zip(z_list, outcome):
                p *= z[i, c]
            if p > 0:
                h_cond -= p * math.log(p) / n
            total += p / n
        marg[outcome] = total
    h_marg = -sum(p * math.log(p) for p in marg.values() if p > 0)
    return h_marg - h_cond


# --- analytic cases ----------------------------------------------------------


def test_im_balanced_one_hot():
    k = 5
    z = np.eye(k)[np.arange(20) % k]
    loss, hc, hm = losses.im_loss(z)
    assert abs(float(hc.data)) < 1e-6
    assert abs(float(hm.data) - math.log(k)) < 1e-6
    assert abs(float(loss.data) + math.log(k)) < 1e-6


def test_im_single_cluster():
    z = np.zeros((12, 4))
    z[:, 1] = 1.0
    loss, hc, hm = losses.im_loss(z)
    assert abs(float(hc.data)) < 1e-6 and abs(float(hm.data)) < 1e-6 and abs(float(loss.data)) < 1e-6


def test_im_uniform():
    k = 7
    loss, hc, hm = losses.im_loss(np.full((9, k), 1.0 / k))
    assert abs(float(hc.data) - math.log(k)) < 1e-6
    assert abs(float(hm.data) - math.log(k)) < 1e-6
    assert abs(float(loss.data)) < 1e-6


def test_im_per_head_matches_single_head():
    rng = np.random.default_rng(0)
    heads = [random_stochastic(rng, 10, 4) for _ in range(3)]
    stacked = np.stack(heads, axis=1)
    loss, _, _ = losses.im_loss(stacked)
    for h, z in enumerate(heads):
        assert float(loss.data[h]) == pytest.approx(float(losses.im_loss(z)[0].data), abs=1e-12)


def test_im_rejects_non_stochastic():
    with pytest.raises(ContractError):
        losses.im_loss(np.full((3, 2), 0.7))
    with pytest.raises(ShapeError):
        losses.im_loss(np.ones(3))


def test_im_bounds_on_1000_random_matrices():
    rng = np.random.default_rng(1)
    for trial in range(1000):
        n, k = rng.integers(1, 30), rng.integers(2, 12)
        z = random_stochastic(rng, n, k, sharp=rng.uniform(0.1, 10))
        loss, hc, hm = (float(v.data) for v in losses.im_loss(z))
        assert -math.log(k) - 1e-9 <= loss <= math.log(k) + 1e-9
        assert hc >= -1e-12 and -1e-12 <= hm <= math.log(k) + 1e-9


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 20), st.integers(2, 8), st.floats(0.01, 20.0), st.integers(0, 2**31))
def test_im_entropy_properties(n, k, sharp, seed):
    z = random_stochastic(np.random.default_rng(seed), n, k, sharp)
    loss, hc, hm = (float(v.data) for v in losses.im_loss(z))
    assert hc >= -1e-12
    assert hm <= math.log(k) + 1e-9
    # H(Z) >= H(Z|X): mutual information is non-negative
    assert loss <= 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 20), st.integers(2, 8), st.integers(0, 2**31))
def test_im_invariant_to_row_and_cluster_permutation(n, k, seed):
    rng = np.random.default_rng(seed)
    z = random_stochastic(rng, n, k)
    perm = z[rng.permutation(n)][:, rng.permutation(k)]
    assert float(losses.im_loss(perm)[0].data) == pytest.approx(float(losses.im_loss(z)[0].data), abs=1e-12)


# --- cross-entropy and totals ---------------------------------------------------


def test_cross_entropy_value():
    logits = np.array([[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]])
    labels = np.array([1, 2])
    ref = -np.mean([logits[i, labels[i]] - np.log(np.exp(logits[i]).sum()) for i in range(2)])
    assert float(losses.cross_entropy(T.Tensor(logits, dtype="f64"), labels).data) == pytest.approx(ref, abs=1e-12)


def test_cross_entropy_label_errors():
    logits = T.Tensor(np.zeros((2, 3)))
    with pytest.raises(LabelError):
        losses.cross_entropy(logits, [0, 3])
    with pytest.raises(ShapeError):
        losses.cross_entropy(logits, [0])


def test_total_loss_single_projector():
    rng = np.random.default_rng(2)
    logits = T.Tensor(rng.normal(size=(4, 3)), dtype="f64")
    z = T.Tensor(random_stochastic(rng, 8, 5), dtype="f64")
    rep = losses.total_loss(logits, [0, 1, 2, 0], {1: z})
    expected = float(losses.cross_entropy(logits, [0, 1, 2, 0]).data) + float(losses.im_loss(z)[0].data)
    assert float(rep.total.data) == pytest.approx(expected, abs=1e-12)


def test_total_loss_weights_and_heads():
    rng = np.random.default_rng(3)
    logits = T.Tensor(rng.normal(size=(4, 3)), dtype="f64")
    z1 = np.stack([random_stochastic(rng, 6, 4) for _ in range(2)], axis=1)
    z2 = np.stack([random_stochastic(rng, 3, 4) for _ in range(2)], axis=1)
    rep = losses.total_loss(logits, [0, 1, 2, 0], {1: T.Tensor(z1, dtype="f64"), 2: T.Tensor(z2, dtype="f64")},
                            {1: 0.5, 2: 2.0})
    ce = float(losses.cross_entropy(logits, [0, 1, 2, 0]).data)
    im1 = sum(float(losses.im_loss(z1[:, h])[0].data) for h in range(2))
    im2 = sum(float(losses.im_loss(z2[:, h])[0].data) for h in range(2))
    assert float(rep.total.data) == pytest.approx(ce + 0.5 * im1 + 2.0 * im2, abs=1e-12)
    assert len(rep.per_head()[0]) == 4


def test_total_loss_without_projectors_is_ce():
    logits = T.Tensor(np.random.default_rng(4).normal(size=(3, 2)), dtype="f64")
    rep = losses.total_loss(logits, [0, 1, 1], {})
    assert float(rep.total.data) == float(losses.cross_entropy(logits, [0, 1, 1]).data)


# --- gradients -----------------------------------------------------------------


def test_cross_entropy_grad():
    rng = np.random.default_rng(5)
    x, labels = rng.normal(size=(5, 4)), rng.integers(0, 4, size=5)
    assert max_rel_error(lambda a: losses.cross_entropy(a, labels), [x]) < TOL


def test_im_loss_grad_through_softmax():
    x = np.random.default_rng(6).normal(size=(2, 6, 3, 4))

    def f(a):
        z = T.softmax_rows(T.reshape(a, (12, 3, 4)))
        return T.tsum(losses.im_loss(z)[0])

    assert max_rel_error(f, [x]) < TOL


def test_ct3_end_to_end_grad():
    spec = ModelSpec(channels=(2, 3, 3, 2), num_classes=3, heads=2, clusters=3, dtype="f64")
    model = ModelBundle(spec, seed=0)
    rng = np.random.default_rng(7)
    x = rng.uniform(0, 1, size=(2, 1, 16, 16))
    labels = np.array([0, 2])
    params = model.parameters()
    names = ["extractor.block1.conv.weight", "extractor.block2.bn.gamma", "classifier.linear.weight",
             "projectors.layer1.head0.out.weight", "projectors.layer2.head1.out.bias"]

    # swap the caller's leaves into the model so backward reaches them
    def wrapped(*leaves):
        saved = {n: params[n] for n in names}
        try:
            for name, leaf in zip(names, leaves):
                _replace_parameter(model, name, leaf)
            out = model.forward(x, "train")
            return losses.total_loss(out.logits, labels, out.z).total
        finally:
            for name in names:
                _replace_parameter(model, name, saved[name])

    arrays = [params[n].data.astype(np.float64).copy() for n in names]
    # guard against a silently disconnected parameter
    assert all(np.any(g) for g in analytic_grads(wrapped, arrays))
    assert max_rel_error(wrapped, arrays) < TOL


def _replace_parameter(model, name, tensor):
    parts = name.split(".")
    if parts[0] == "extractor":
        block = model.extractor.blocks[int(parts[1][5:]) - 1]
        attr = {"conv.weight": "conv", "bn.gamma": "gamma", "bn.beta": "beta"}[".".join(parts[2:])]
        setattr(block, attr, tensor)
    elif parts[0] == "classifier":
        setattr(model.classifier, {"weight": "weight", "bias": "bias"}[parts[-1]], tensor)
    else:
        layer, head = int(parts[1][5:]), int(parts[2][4:])
        proj = next(p for p in model.projectors if p.layer == layer and p.head == head)
        setattr(proj, "weight" if parts[-1] == "weight" else "bias", tensor)


def test_im_gives_no_classifier_gradient():
    model = ModelBundle(ModelSpec(channels=(2, 3, 3, 2), heads=2, clusters=3), seed=1)
    model.set_trainable(model.parameters())
    x = np.random.default_rng(8).uniform(0, 1, size=(4, 1, 16, 16))
    out = model.forward(x, "train")
    T.backward(losses.im_total(out.z)[0])
    for name, p in model.parameters().items():
        if name.startswith("classifier"):
            assert p.grad is None or not np.any(p.grad)


# --- lemma bounds ----------------------------------------------------------------


def test_joint_mi_oracles_agree():
    rng = np.random.default_rng(9)
    for _ in range(20):
        c, k, n = rng.integers(1, 4), rng.integers(2, 5), rng.integers(1, 7)
        zs = [random_stochastic(rng, n, k, 3.0) for _ in range(c)]
        assert losses.joint_mi_bruteforce(zs) == pytest.approx(joint_mi_loop(zs), abs=1e-12)


def test_lemma_sandwich_200_instances():
    rng = np.random.default_rng(10)
    for _ in range(200):
        c, k, n = rng.integers(1, 4), rng.integers(2, 6), rng.integers(1, 9)
        zs = [random_stochastic(rng, n, k, rng.uniform(0.2, 8.0)) for _ in range(c)]
        lower, upper = losses.lemma_bounds(zs)
        mi = joint_mi_loop(zs)
        assert lower - 1e-9 <= mi <= upper + 1e-9


def test_lemma_lower_tight_for_duplicated_one_hot_heads():
    z = np.eye(4)[[0, 1, 2, 3, 0, 1]]
    lower, upper = losses.lemma_bounds([z, z, z])
    assert joint_mi_loop([z, z, z]) == pytest.approx(lower, abs=1e-9)
    assert upper > lower


def test_lemma_upper_tight_for_independent_one_hot_heads():
    # rows enumerate the product space so the two hard partitions are independent
    rows = list(itertools.product(range(2), range(3)))
    z1 = np.eye(2)[[a for a, _ in rows]]
    z2 = np.eye(3)[[b for _, b in rows]]
    lower, upper = losses.lemma_bounds([z1, z2])
    assert joint_mi_loop([z1, z2]) == pytest.approx(upper, abs=1e-9)
    assert upper == pytest.approx(math.log(2) + math.log(3), abs=1e-12)


def test_lemma_errors():
    with pytest.raises(ContractError):
        losses.lemma_bounds([np.ones((2, 2)) / 2, np.ones((3, 2)) / 2])
    with pytest.raises(SizeError):
        losses.joint_mi_bruteforce([np.ones((1, 100)) / 100] * 4)
