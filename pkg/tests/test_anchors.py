import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scdl import autodiff as ad
from scdl.anchors import (AnchorMemory, AnchorSet, NoAnchorsError, compute_anchors, loss_sac,
                          mask_class_image, token_mask)
from scdl.autodiff import ShapeError, Tensor
from scdl.gradcheck import grad_check_params
from scdl.model import SegNet
from scdl.proxy import ProxyBank


def pixel_encoder(x):
    # one token per pixel with features (v, 1 - v)
    v = np.asarray(x, dtype=np.float64)[:, 0].reshape(x.shape[0], -1, 1)
    return Tensor(np.concatenate([v, 1 - v], axis=-1))


def random_batch(seed, n=3, C=4, size=16):
    rng = np.random.default_rng(seed)
    images = rng.normal(size=(n, 1, size, size))
    labels = rng.integers(0, C, size=(n, size, size))
    return rng, images, labels


# -- masking -----------------------------------------------------------------

def test_mask_full_and_empty():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 4))
    np.testing.assert_array_equal(mask_class_image(x, np.full((4, 4), 2), 2), x)
    np.testing.assert_array_equal(mask_class_image(x, np.ones((4, 4), dtype=int), 2), 0.0)


def test_mask_single_pixel():
    x = np.arange(1.0, 17.0).reshape(4, 4)
    y = np.zeros((4, 4), dtype=int)
    y[2, 1] = 3
    out = mask_class_image(x, y, 3)
    assert np.count_nonzero(out) == 1 and out[2, 1] == x[2, 1]


def test_mask_rejects_background_and_shape():
    with pytest.raises(ValueError):
        mask_class_image(np.zeros((2, 2)), np.zeros((2, 2), dtype=int), 0)
    with pytest.raises(ShapeError):
        mask_class_image(np.zeros((2, 2)), np.zeros((3, 2), dtype=int), 1)


def test_token_mask_any_rule():
    y = np.zeros((1, 8, 8), dtype=bool)
    y[0, 5, 6] = True  # one pixel in cell (1, 1) of a 2x2 grid
    np.testing.assert_array_equal(token_mask(y, (2, 2)), [[False, False, False, True]])


# -- anchors -----------------------------------------------------------------

def test_anchor_is_mean_of_class_tokens():
    images = np.array([[[[1.0, 0.0]]]])
    labels = np.array([[[1, 1]]])
    aset = compute_anchors(pixel_encoder, images, labels, 2, (1, 2))
    np.testing.assert_allclose(aset.anchors[1], [0.5, 0.5])
    assert aset.present.tolist() == [False, True]
    assert aset.counts.tolist() == [0, 2]


def test_absent_class_flagged():
    _, images, labels = random_batch(0, C=3)
    net = SegNet(np.random.default_rng(0), num_classes=4, dim=6, width=4)
    aset = compute_anchors(net.encode, images, labels, 4, (4, 4))
    assert aset.present.tolist() == [False, True, True, False]
    np.testing.assert_array_equal(aset.anchors[3], 0.0)
    np.testing.assert_array_equal(aset.present, aset.counts > 0)


def test_anchors_invariant_to_duplication():
    _, images, labels = random_batch(1)
    net = SegNet(np.random.default_rng(1), num_classes=4, dim=6, width=4)
    a = compute_anchors(net.encode, images, labels, 4, (4, 4))
    b = compute_anchors(net.encode, np.concatenate([images, images]),
                        np.concatenate([labels, labels]), 4, (4, 4))
    np.testing.assert_allclose(a.anchors, b.anchors, rtol=0, atol=1e-13)


def test_anchors_match_per_class_encoding():
    _, images, labels = random_batch(2)
    net = SegNet(np.random.default_rng(2), num_classes=4, dim=6, width=4)
    aset = compute_anchors(net.encode, images, labels, 4, (4, 4))
    for c in (1, 2, 3):
        Z = net.encode(mask_class_image(images, labels[:, None], c)).data
        sel = token_mask(labels == c, (4, 4))
        np.testing.assert_allclose(aset.anchors[c], Z[sel].mean(axis=0), atol=1e-12)


def test_anchors_need_samples():
    with pytest.raises(ValueError):
        compute_anchors(pixel_encoder, np.zeros((0, 1, 2, 2)), np.zeros((0, 2, 2), dtype=int), 2, (1, 1))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_anchor_equivariance(seed):
    rng, images, labels = random_batch(seed, n=2)
    net = SegNet(np.random.default_rng(seed), num_classes=4, dim=6, width=4)
    perm = np.concatenate([[0], 1 + rng.permutation(3)])
    a = compute_anchors(net.encode, images, labels, 4, (4, 4))
    b = compute_anchors(net.encode, images, perm[labels], 4, (4, 4))
    np.testing.assert_allclose(b.anchors[perm], a.anchors, atol=1e-13)
    np.testing.assert_array_equal(b.present[perm], a.present)


# -- loss --------------------------------------------------------------------

def _aset(anchors, present):
    present = np.asarray(present)
    return AnchorSet(np.asarray(anchors, dtype=np.float64), present, present.astype(int))


def test_sac_zero_and_two():
    rng = np.random.default_rng(0)
    mu = rng.normal(size=(3, 4))
    bank = ProxyBank(Tensor(mu), Tensor(np.zeros_like(mu)))
    assert loss_sac(bank, _aset(mu, [False, True, True])).item() == pytest.approx(0.0, abs=1e-15)
    assert loss_sac(bank, _aset(-mu, [False, True, True])).item() == pytest.approx(2.0, abs=1e-15)


def test_sac_no_present_classes():
    bank = ProxyBank.init(3, 4, np.random.default_rng(0))
    with pytest.raises(NoAnchorsError):
        loss_sac(bank, _aset(np.zeros((3, 4)), [False, False, False]))


def test_sac_backward_touches_only_present_means():
    _, images, labels = random_batch(3, C=3)
    net = SegNet(np.random.default_rng(3), num_classes=4, dim=6, width=4)
    bank = ProxyBank.init(4, 6, np.random.default_rng(4))
    aset = compute_anchors(net.encode, images, labels, 4, (4, 4))
    loss_sac(bank, aset).backward()
    for p in net.parameters():
        assert not np.any(p.grad)
    assert not np.any(bank.log_sigma.grad)
    assert not np.any(bank.mu.grad[[0, 3]])
    assert np.any(bank.mu.grad[1])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_sac_bounds(seed):
    rng = np.random.default_rng(seed)
    bank = ProxyBank.init(4, 5, rng)
    present = rng.random(4) < 0.7
    present[rng.integers(4)] = True
    value = loss_sac(bank, _aset(rng.normal(size=(4, 5)), present)).item()
    assert 0.0 <= value <= 2.0 + 1e-12


@pytest.mark.parametrize("seed", range(3))
def test_sac_gradient(seed):
    rng = np.random.default_rng(seed)
    bank = ProxyBank.init(4, 5, rng)
    aset = _aset(rng.normal(size=(4, 5)), [False, True, True, True])
    assert grad_check_params(lambda: loss_sac(bank, aset), [bank.mu]) < 1e-4


# -- memory ------------------------------------------------------------------

def test_memory_fills_absent_classes():
    mem = AnchorMemory(3, 2, decay=0.9)
    first = mem.update(_aset([[0, 0], [1, 0], [0, 1]], [False, True, True]))
    np.testing.assert_array_equal(first.anchors[1], [1, 0])
    second = mem.update(_aset([[0, 0], [0, 0], [1, 1]], [False, False, True]))
    assert second.present.tolist() == [False, True, True]
    np.testing.assert_allclose(second.anchors[2], [0.1, 1.0])
    np.testing.assert_array_equal(second.anchors[1], [1, 0])
    assert "sac.ema_anchors" in mem.state_dict()
