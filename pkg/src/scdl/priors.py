"""Token-wise priors built from the proxy bank, their fusion, and projection
into additive decoder residuals."""
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .proxy import soft_assign, token_cosines

LOG_ETA_BOUNDS = (-6.0, 2.0)


@dataclass
class FusionHead:
    proj_w: Tensor  # 3D x D'
    proj_b: Tensor  # D'
    log_eta: Tensor  # D
    K: int = 4
    log_eta_bounds: tuple = LOG_ETA_BOUNDS

    @classmethod
    def init(cls, dim, out_channels, rng, K=4, eta=0.1, log_eta_bounds=LOG_ETA_BOUNDS):
        fan_in = 3 * dim
        w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, out_channels))
        return cls(Tensor(w, requires_grad=True),
                   Tensor(np.zeros(out_channels), requires_grad=True),
                   Tensor(np.full(dim, np.log(eta)), requires_grad=True),
                   K, tuple(log_eta_bounds))

    def eta(self):
        lo, hi = self.log_eta_bounds
        return ad.exp(ad.clamp(self.log_eta, lo, hi))

    def parameters(self):
        return [self.proj_w, self.proj_b, self.log_eta]

    def state_dict(self):
        return {"fusion.proj_w": self.proj_w.data, "fusion.proj_b": self.proj_b.data,
                "fusion.log_eta": self.log_eta.data}

    def load_state_dict(self, state):
        for name, t in (("fusion.proj_w", self.proj_w), ("fusion.proj_b", self.proj_b),
                        ("fusion.log_eta", self.log_eta)):
            t.data = np.array(state[name], dtype=np.float64)
            t.zero_grad()


def prior_dist_weights(Z, bank, samples, S=None):
    """Softmax over classes of the sample-averaged token/sample cosines (B x L x C)."""
    C, n_samples, D = samples.shape
    if S is not None and n_samples != S:
        raise ValueError(f"got {n_samples} samples per proxy, config says {S}")
    if C != bank.num_classes or D != bank.dim or Z.shape[-1] != D:
        raise ShapeError(f"samples {samples.shape} do not match bank {bank.mu.shape} / tokens {Z.shape}")
    B, L, _ = Z.shape
    cos = ad.pairwise_cosine(Z, ad.reshape(samples, (C * n_samples, D)))
    avg = ad.mean(ad.reshape(cos, (B, L, C, n_samples)), axis=-1)
    return ad.softmax(avg, axis=-1)


def prior_dist(Z, bank, samples, S=None, return_weights=False):
    """Distribution-weighted prior: proxy means mixed by sample-based similarity."""
    w = prior_dist_weights(Z, bank, samples, S)
    r = ad.matmul(w, bank.mu)
    return (r, w) if return_weights else r


def prior_center(Z, bank, return_weights=False, cosines=None):
    """Center-similarity prior: proxy means mixed by soft_assign weights."""
    if cosines is None:
        cosines = token_cosines(Z, bank)
    w = soft_assign(Z, bank, cosines)
    r = ad.matmul(w, bank.mu)
    return (r, w) if return_weights else r


def prior_token_sampling(Z, head, rng):
    """Mean of K unit-normalised perturbations z + eta * eps of every token."""
    if head.K < 1:
        raise ValueError("need at least one perturbation sample")
    B, L, D = Z.shape
    eps = rng.standard_normal((head.K, B, L, D))
    noisy = ad.reshape(Z, (1, B, L, D)) + head.eta() * Tensor(eps)
    norms = ad.reshape(ad.l2norm(noisy), (head.K, B, L, 1))
    return ad.mean(noisy / ad.clamp(norms, ad.COS_EPS, np.inf), axis=0)


def fuse_priors(r_dist, r_center, z_sam):
    if not (r_dist.shape == r_center.shape == z_sam.shape):
        raise ShapeError(f"prior shapes differ: {r_dist.shape}, {r_center.shape}, {z_sam.shape}")
    return ad.concat([r_dist, r_center, z_sam], axis=-1)


def project_and_inject(z_prior, head, grid, stage_shapes):
    """Project the fused prior to decoder width and resize to every stage.

    ``grid`` is the token grid (H', W'); ``stage_shapes`` lists (H_s, W_s, D')
    per decoder stage.  Returns one B x D' x H_s x W_s residual per stage.
    """
    B, L, F = z_prior.shape
    gh, gw = grid
    if gh * gw != L:
        raise ShapeError(f"{L} tokens do not fill a {gh}x{gw} grid")
    if F != head.proj_w.shape[0]:
        raise ShapeError(f"fused width {F} != projection input {head.proj_w.shape[0]}")
    width = head.proj_w.shape[1]
    proj = ad.matmul(z_prior, head.proj_w) + head.proj_b
    maps = ad.transpose(ad.reshape(proj, (B, gh, gw, width)), (0, 3, 1, 2))
    out = []
    for hs, ws, ds in stage_shapes:
        if ds != width:
            raise ShapeError(f"stage width {ds} != projection width {width}")
        if hs % gh or ws % gw or hs // gh != ws // gw:
            raise ShapeError(f"stage {hs}x{ws} is not an integer upscale of grid {gh}x{gw}")
        out.append(ad.upsample_nearest(maps, hs // gh))
    return out


@dataclass
class PriorBundle:
    r_dist: Tensor
    r_center: Tensor
    z_sam: Tensor
    z_prior: Tensor


def build_priors(Z, bank, head, samples, rng, cosines=None):
    r_dist = prior_dist(Z, bank, samples)
    r_center = prior_center(Z, bank, cosines=cosines)
    z_sam = prior_token_sampling(Z, head, rng)
    return PriorBundle(r_dist, r_center, z_sam, fuse_priors(r_dist, r_center, z_sam))
