import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scdl import autodiff as ad
from scdl.autodiff import ShapeError, Tensor
from scdl.gradcheck import grad_check_params
from scdl.priors import (FusionHead, build_priors, fuse_priors, prior_center, prior_dist,
                         prior_dist_weights, prior_token_sampling, project_and_inject)
from scdl.proxy import ProxyBank, sample_proxies, soft_assign


def setup(seed, B=2, L=4, C=3, D=5, width=3, bounds=(-6.0, 2.0)):
    rng = np.random.default_rng(seed)
    Z = Tensor(rng.normal(size=(B, L, D)), requires_grad=True)
    bank = ProxyBank.init(C, D, rng, log_sigma_bounds=bounds)
    head = FusionHead.init(D, width, rng)
    return rng, Z, bank, head


# -- prior_dist --------------------------------------------------------------

def test_dist_single_class_returns_mean():
    rng, Z, bank, _ = setup(0, C=1)
    r = prior_dist(Z, bank, sample_proxies(bank, 5, rng)).data
    np.testing.assert_array_equal(r, np.broadcast_to(bank.mu.data[0], r.shape))


def test_dist_equals_center_when_sigma_vanishes():
    rng, Z, bank, _ = setup(1, bounds=(-40.0, 2.0))
    bank.log_sigma.data[:] = -40.0
    r_dist = prior_dist(Z, bank, sample_proxies(bank, 5, rng)).data
    r_center = prior_center(Z, bank).data
    assert np.max(np.abs(r_dist - r_center)) < 1e-5


def test_dist_sample_count_mismatch():
    rng, Z, bank, _ = setup(0)
    with pytest.raises(ValueError):
        prior_dist(Z, bank, sample_proxies(bank, 3, rng), S=5)


def test_dist_weights_use_sample_average():
    rng, Z, bank, _ = setup(2, B=1, L=1, C=2, D=3)
    u = sample_proxies(bank, 4, rng)
    z = Z.data[0, 0]
    avg = [np.mean([z @ s / (np.linalg.norm(z) * np.linalg.norm(s)) for s in u.data[c]]) for c in range(2)]
    expected = np.exp(avg) / np.sum(np.exp(avg))
    np.testing.assert_allclose(prior_dist_weights(Z, bank, u).data[0, 0], expected, atol=1e-14)


# -- prior_center ------------------------------------------------------------

def test_center_single_class():
    _, Z, bank, _ = setup(0, C=1)
    r = prior_center(Z, bank).data
    np.testing.assert_array_equal(r, np.broadcast_to(bank.mu.data[0], r.shape))


def test_center_orthogonal_pair():
    mu = np.array([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]])
    bank = ProxyBank(Tensor(mu), Tensor(np.zeros_like(mu)))
    Z = Tensor(np.array([[[1.0, 0.0, 0.0]]]))
    p = np.e / (np.e + 1)
    np.testing.assert_allclose(prior_center(Z, bank).data[0, 0], p * mu[0] + (1 - p) * mu[1], atol=1e-15)
    np.testing.assert_allclose(prior_center(Z, bank).data[0, 0], 0.7311 * mu[0] + 0.2689 * mu[1], atol=2e-4)


def test_center_weights_are_soft_assign():
    _, Z, bank, _ = setup(3)
    _, w = prior_center(Z, bank, return_weights=True)
    np.testing.assert_allclose(w.data, soft_assign(Z, bank).data, rtol=0, atol=1e-12)


def test_center_dim_mismatch():
    rng, _, bank, _ = setup(0)
    with pytest.raises(ShapeError):
        prior_center(Tensor(rng.normal(size=(1, 2, 7))), bank)


# -- token sampling ----------------------------------------------------------

def test_sampling_without_noise_normalises():
    rng, Z, _, _ = setup(4)
    head = FusionHead.init(5, 3, rng, log_eta_bounds=(-40.0, 2.0))
    head.log_eta.data[:] = -40.0
    z = prior_token_sampling(Z, head, rng).data
    np.testing.assert_allclose(z, Z.data / np.linalg.norm(Z.data, axis=-1, keepdims=True), atol=1e-6)


def test_sampling_deterministic_per_seed():
    _, Z, _, head = setup(5)
    a = prior_token_sampling(Z, head, np.random.default_rng(9)).data
    b = prior_token_sampling(Z, head, np.random.default_rng(9)).data
    assert np.array_equal(a, b)


def test_sampling_needs_k():
    rng, Z, _, head = setup(0)
    head.K = 0
    with pytest.raises(ValueError):
        prior_token_sampling(Z, head, rng)


def test_eta_initialised_positive():
    head = FusionHead.init(6, 2, np.random.default_rng(0))
    np.testing.assert_allclose(head.eta().data, 0.1)
    assert head.K == 4


# -- fusion ------------------------------------------------------------------

def test_fuse_small_concat():
    a, b, c = (Tensor(np.array([[[v, v + 1]]])) for v in (1.0, 3.0, 5.0))
    np.testing.assert_array_equal(fuse_priors(a, b, c).data[0, 0], [1, 2, 3, 4, 5, 6])


def test_fuse_roundtrip_and_shape():
    rng = np.random.default_rng(0)
    parts = [rng.normal(size=(2, 4, 5)) for _ in range(3)]
    z = fuse_priors(*(Tensor(p) for p in parts)).data
    assert z.shape == (2, 4, 15)
    for k in range(3):
        assert np.array_equal(z[..., 5 * k:5 * (k + 1)], parts[k])


def test_fuse_shape_mismatch():
    with pytest.raises(ShapeError):
        fuse_priors(Tensor(np.zeros((1, 2, 3))), Tensor(np.zeros((1, 2, 3))), Tensor(np.zeros((1, 3, 3))))


# -- projection / injection --------------------------------------------------

def test_inject_identity_resize():
    rng, _, _, head = setup(0, D=2, width=3)
    z = Tensor(rng.normal(size=(2, 4, 6)))
    (out,) = project_and_inject(z, head, (2, 2), [(2, 2, 3)])
    proj = z.data @ head.proj_w.data + head.proj_b.data
    expected = proj.reshape(2, 2, 2, 3).transpose(0, 3, 1, 2)
    assert np.array_equal(out.data, expected)


def test_inject_nearest_blocks():
    rng, _, _, head = setup(0, D=2, width=1)
    z = Tensor(rng.normal(size=(1, 16, 6)))
    base, up = project_and_inject(z, head, (4, 4), [(4, 4, 1), (8, 8, 1)])
    for dy in range(2):
        for dx in range(2):
            assert np.array_equal(up.data[..., dy::2, dx::2], base.data)


def test_inject_zero_projection_is_zero():
    rng, _, _, head = setup(0, D=2, width=3)
    head.proj_w.data[:] = 0
    head.proj_b.data[:] = 0
    outs = project_and_inject(Tensor(rng.normal(size=(1, 4, 6))), head, (2, 2), [(2, 2, 3), (8, 8, 3)])
    assert all(not np.any(o.data) for o in outs)


@pytest.mark.parametrize("shape", [(5, 5, 3), (4, 8, 3), (4, 4, 2)])
def test_inject_rejects_unreachable_shape(shape):
    rng, _, _, head = setup(0, D=2, width=3)
    with pytest.raises(ShapeError):
        project_and_inject(Tensor(rng.normal(size=(1, 4, 6))), head, (2, 2), [shape])


# -- invariants --------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.integers(2, 6))
def test_priors_are_simplex_combinations(seed, C, D):
    rng, Z, bank, _ = setup(seed, C=C, D=D)
    u = sample_proxies(bank, 5, rng)
    for r, w in (prior_dist(Z, bank, u, return_weights=True), prior_center(Z, bank, return_weights=True)):
        assert np.all(w.data >= 0)
        np.testing.assert_allclose(w.data.sum(-1), 1.0, atol=1e-9)
        np.testing.assert_allclose(r.data, w.data @ bank.mu.data, atol=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_dist_close_to_center_for_tiny_sigma(seed):
    rng, Z, bank, _ = setup(seed, bounds=(-40.0, 2.0))
    bank.log_sigma.data[:] = -30.0
    diff = prior_dist(Z, bank, sample_proxies(bank, 5, rng)).data - prior_center(Z, bank).data
    assert np.max(np.abs(diff)) < 1e-5


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 10.0))
def test_sampled_prior_norm_at_most_one(seed, eta):
    rng, Z, _, head = setup(seed)
    head.log_eta.data[:] = np.log(eta)
    z = prior_token_sampling(Z, head, rng).data
    assert np.all(np.linalg.norm(z, axis=-1) <= 1 + 1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_class_permutation_leaves_priors(seed):
    rng, Z, bank, _ = setup(seed)
    u = sample_proxies(bank, 5, rng)
    perm = rng.permutation(bank.num_classes)
    pbank = ProxyBank(Tensor(bank.mu.data[perm]), Tensor(bank.log_sigma.data[perm]))
    pu = Tensor(u.data[perm])
    np.testing.assert_allclose(prior_center(Z, pbank).data, prior_center(Z, bank).data, atol=1e-14)
    np.testing.assert_allclose(prior_dist(Z, pbank, pu).data, prior_dist(Z, bank, u).data, atol=1e-14)


# -- gradients ---------------------------------------------------------------

@pytest.mark.parametrize("seed", range(3))
def test_end_to_end_gradient(seed):
    _, Z, bank, head = setup(seed)
    bank.log_sigma.data = np.random.default_rng(seed).normal(size=bank.log_sigma.shape) * 0.2
    weights = Tensor(np.random.default_rng(seed + 100).normal(size=(2, 3, 4, 4)))

    def loss():
        # fresh generators each call freeze the Monte-Carlo draws
        samples = sample_proxies(bank, 3, np.random.default_rng(1))
        pri = build_priors(Z, bank, head, samples, np.random.default_rng(2))
        (out,) = project_and_inject(pri.z_prior, head, (2, 2), [(4, 4, 3)])
        return ad.sum_(out * weights)

    params = [Z, bank.mu, bank.log_sigma, head.log_eta, head.proj_w, head.proj_b]
    assert grad_check_params(loss, params) < 1e-4


def test_state_dict_names():
    head = FusionHead.init(4, 2, np.random.default_rng(0))
    assert set(head.state_dict()) == {"fusion.proj_w", "fusion.proj_b", "fusion.log_eta"}
