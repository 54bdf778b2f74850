import numpy as np
import pytest

from clust3 import losses
from clust3 import tensor as T
from clust3.errors import BatchSizeError, ContractError, StructureError
from clust3.nn import ModelBundle, ModelSpec, bn_affine_paths, restore, select_trainable, snapshot

TINY = ModelSpec(channels=(4, 6, 6, 4), heads=3, clusters=5)


def images(n, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, size=(n, 1, 16, 16)).astype(np.float32)


def test_shapes_and_names():
    model = ModelBundle(TINY, seed=0)
    out = model.forward(images(2), "train")
    assert [t.shape for t in out.taps] == [(2, 4, 8, 8), (2, 6, 4, 4), (2, 6, 2, 2), (2, 4, 1, 1)]
    assert out.logits.shape == (2, 8)
    assert out.z[1].shape == (2 * 64, 3, 5) and out.z[2].shape == (2 * 16, 3, 5)
    names = list(model.parameters())
    assert "extractor.block1.conv.weight" in names and "projectors.layer2.head2.out.bias" in names
    assert len(model.projectors) == 6


def test_batched_heads_match_single_projectors():
    model = ModelBundle(ModelSpec(channels=(4, 6, 6, 4), heads=3, clusters=5, projector_kind="large"), seed=1)
    out = model.forward(images(3), "eval")
    for proj in model.projectors:
        single = proj.forward(out.taps[proj.layer - 1]).data
        np.testing.assert_allclose(out.assignment(proj.layer, proj.head).data, single, atol=1e-6)
    hidden = model.parameters()["projectors.layer1.head0.hidden.weight"]
    assert hidden.shape == (4, 2)


def test_seeded_init_is_reproducible():
    a, b = ModelBundle(TINY, seed=5), ModelBundle(TINY, seed=5)
    for (n, p), q in zip(a.parameters().items(), b.parameters().values()):
        np.testing.assert_array_equal(p.data, q.data)


def test_spec_validation():
    with pytest.raises(ContractError):
        ModelSpec(projector_layers=(5,))
    with pytest.raises(ContractError):
        ModelSpec(projector_kind="huge")
    with pytest.raises(ContractError):
        ModelSpec(clusters=1)


def test_batch_stats_need_two_samples():
    model = ModelBundle(TINY)
    with pytest.raises(BatchSizeError):
        model.forward(images(1), "train")
    model.forward(images(1), "eval")


def test_select_trainable():
    model = ModelBundle(TINY)
    assert select_trainable(model, "joint") == set(model.parameters())
    adapt = select_trainable(model, "adapt", 2)
    assert adapt and all(n.startswith(("extractor.block1.", "extractor.block2.")) for n in adapt)
    assert len(adapt) == 6
    assert select_trainable(model, "adapt") == adapt  # J defaults to the highest projector layer
    with pytest.raises(ContractError):
        select_trainable(model, "adapt", 0)
    assert bn_affine_paths(model) == {n for n in model.parameters() if n.endswith((".gamma", ".beta"))}


def test_projector_gradients_stay_out_of_classifier():
    model = ModelBundle(TINY, seed=2)
    model.set_trainable(model.parameters())
    out = model.forward(images(4), "train")
    T.backward(losses.im_total(out.z)[0])
    grads = {n: p.grad for n, p in model.parameters().items()}
    assert all(g is None or not np.any(g) for n, g in grads.items() if n.startswith("classifier"))
    assert np.any(grads["extractor.block1.conv.weight"])
    # layer-2 heads see blocks 1-2 only
    assert grads["extractor.block3.conv.weight"] is None or not np.any(grads["extractor.block3.conv.weight"])


def test_snapshot_restore_bit_exact():
    model = ModelBundle(TINY, seed=3)
    snap = snapshot(model)
    model.forward(images(4), "train")  # moves running stats
    for p in model.parameters().values():
        p.data += 1.0
    restore(model, snap)
    for name, arr in model.state_arrays().items():
        np.testing.assert_array_equal(arr, snap.arrays[name])


def test_save_load_round_trip(tmp_path):
    model = ModelBundle(TINY, seed=4)
    model.forward(images(4), "train")
    model.save(tmp_path / "m.ckpt")
    other = ModelBundle(TINY, seed=9)
    other.load(tmp_path / "m.ckpt")
    for name, arr in model.state_arrays().items():
        np.testing.assert_array_equal(arr, other.state_arrays()[name])
    mismatched = ModelBundle(ModelSpec(channels=(4, 6, 6, 4), heads=2, clusters=5))
    with pytest.raises(StructureError):
        mismatched.load(tmp_path / "m.ckpt")


def test_no_projector_bundle():
    model = ModelBundle(TINY, use_projectors=False)
    out = model.forward(images(2), "train")
    assert out.z == {} and model.J == 0
