"""Finite-difference verification of every loss and prior against its
analytic gradient.

Each check rebuilds its function from fixed inputs and a freshly seeded
generator per call, so the Monte-Carlo draws are frozen and the finite
differences see a deterministic function.
"""
import time

import numpy as np

from . import autodiff as ad
from .anchors import AnchorSet, loss_sac
from .autodiff import Tensor
from .data import SyntheticDatasetSpec, generate_dataset
from .gradcheck import grad_check_params
from .priors import (FusionHead, fuse_priors, prior_center, prior_dist, prior_token_sampling,
                     project_and_inject)
from .proxy import ProxyBank, loss_e2p, loss_p2e, sample_proxies, soft_assign
from .train import TrainConfig, Trainer

TOLERANCE = 1e-4
COMPOSITE_TOLERANCE = 1e-3


def _small_problem(seed, B=2, L=4, C=3, D=5):
    rng = np.random.default_rng(seed)
    Z = Tensor(rng.uniform(-1, 1, (B, L, D)), requires_grad=True)
    bank = ProxyBank(Tensor(rng.uniform(-1, 1, (C, D)), requires_grad=True),
                     Tensor(rng.uniform(-1, 0.5, (C, D)), requires_grad=True))
    return Z, bank


def check_e2p(seed=0):
    Z, bank = _small_problem(seed)
    return grad_check_params(lambda: loss_e2p(Z, bank, soft_assign(Z, bank)), [Z, bank.mu])


def check_p2e(seed=0):
    Z, bank = _small_problem(seed)
    return grad_check_params(lambda: loss_p2e(Z, bank, soft_assign(Z, bank)), [Z, bank.mu])


def check_sac(seed=0):
    _, bank = _small_problem(seed)
    rng = np.random.default_rng(seed + 1)
    anchors = AnchorSet(rng.uniform(-1, 1, bank.mu.shape), np.array([False, True, True]),
                        np.array([0, 3, 1]))
    return grad_check_params(lambda: loss_sac(bank, anchors), [bank.mu])


def check_prior_dist(seed=0, S=3):
    Z, bank = _small_problem(seed)
    weights = Tensor(np.random.default_rng(seed + 2).uniform(-1, 1, (2, 4, 5)))

    def f():
        samples = sample_proxies(bank, S, np.random.default_rng(seed + 3))
        return ad.sum_(prior_dist(Z, bank, samples, S) * weights)

    return grad_check_params(f, [Z, bank.mu, bank.log_sigma])


def check_prior_center(seed=0):
    Z, bank = _small_problem(seed)
    weights = Tensor(np.random.default_rng(seed + 2).uniform(-1, 1, (2, 4, 5)))
    return grad_check_params(lambda: ad.sum_(prior_center(Z, bank) * weights), [Z, bank.mu])


def check_token_sampling(seed=0):
    Z, _ = _small_problem(seed)
    head = FusionHead.init(5, 3, np.random.default_rng(seed + 4), K=3)
    weights = Tensor(np.random.default_rng(seed + 2).uniform(-1, 1, (2, 4, 5)))

    def f():
        return ad.sum_(prior_token_sampling(Z, head, np.random.default_rng(seed + 5)) * weights)

    return grad_check_params(f, [Z, head.log_eta])


def check_fusion_injection(seed=0, S=2):
    """End to end through all three priors, fusion, projection and resize."""
    rng = np.random.default_rng(seed)
    Z = Tensor(rng.uniform(-1, 1, (2, 4, 5)), requires_grad=True)
    bank = ProxyBank(Tensor(rng.uniform(-1, 1, (3, 5)), requires_grad=True),
                     Tensor(rng.uniform(-1, 0.5, (3, 5)), requires_grad=True))
    head = FusionHead.init(5, 3, np.random.default_rng(seed + 4), K=2)
    weights = [Tensor(rng.uniform(-1, 1, (2, 3, 2, 2))), Tensor(rng.uniform(-1, 1, (2, 3, 4, 4)))]

    def f():
        draw = np.random.default_rng(seed + 6)
        samples = sample_proxies(bank, S, draw)
        z_prior = fuse_priors(prior_dist(Z, bank, samples), prior_center(Z, bank),
                              prior_token_sampling(Z, head, draw))
        maps = project_and_inject(z_prior, head, (2, 2), [(2, 2, 3), (4, 4, 3)])
        return ad.sum_(maps[0] * weights[0]) + ad.sum_(maps[1] * weights[1])

    return grad_check_params(f, [Z, bank.mu, bank.log_sigma, head.log_eta, head.proj_w, head.proj_b])


def check_composite(seed=0, n_coords=20, image_size=32):
    """Full train-step loss w.r.t. a random subset of all trainable scalars."""
    spec = SyntheticDatasetSpec(height=image_size, width=image_size, num_samples=4,
                                labeled_frac=0.5, seed=seed)
    ds = generate_dataset(spec)
    cfg = TrainConfig(seed=seed, lambda_e2p=0.5, lambda_p2e=0.5, lambda_sac=0.5)
    trainer = Trainer(cfg, spec.num_classes, (image_size, image_size))
    labels = ds.labels.astype(np.int64)
    anchors = trainer.batch_anchors(ds.images[ds.labeled][:, None].astype(np.float64),
                                    labels[ds.labeled])
    params = trainer.net.parameters() + trainer.bank.parameters() + trainer.head.parameters()

    def f():
        total, _ = trainer.compute_losses(ds.images, labels, ds.labeled,
                                          rng=np.random.default_rng(seed + 7), anchors=anchors)
        return total

    rng = np.random.default_rng(seed + 8)
    sizes = np.array([p.size for p in params])
    flat = rng.choice(sizes.sum(), size=n_coords, replace=False)
    bounds = np.cumsum(sizes)
    coords = []
    for idx in sorted(flat):
        k = int(np.searchsorted(bounds, idx, side="right"))
        coords.append((k, int(idx - (bounds[k - 1] if k else 0))))
    return grad_check_params(f, params, coords)


CHECKS = {
    "e2p": (check_e2p, TOLERANCE),
    "p2e": (check_p2e, TOLERANCE),
    "sac": (check_sac, TOLERANCE),
    "prior_dist": (check_prior_dist, TOLERANCE),
    "prior_center": (check_prior_center, TOLERANCE),
    "token_sampling": (check_token_sampling, TOLERANCE),
    "fusion_injection": (check_fusion_injection, TOLERANCE),
    "composite": (check_composite, COMPOSITE_TOLERANCE),
}


def run_suite(seed=0):
    """Returns {name: (max_relative_error, tolerance, seconds)}."""
    out = {}
    for name, (fn, tol) in CHECKS.items():
        t0 = time.perf_counter()
        err = fn(seed)
        out[name] = (err, tol, time.perf_counter() - t0)
    return out
