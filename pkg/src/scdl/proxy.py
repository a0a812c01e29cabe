"""Learnable Gaussian class proxies and the two alignment losses between
token embeddings and proxies."""
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

LOG_SIGMA_BOUNDS = (-6.0, 2.0)


@dataclass
class ProxyBank:
    """Per-class diagonal Gaussians N(mu_c, diag(sigma_c^2)).

    ``log_sigma`` is clamped to ``log_sigma_bounds`` before exponentiation.
    """

    mu: Tensor
    log_sigma: Tensor
    log_sigma_bounds: tuple = LOG_SIGMA_BOUNDS

    @classmethod
    def init(cls, num_classes, dim, rng, log_sigma_bounds=LOG_SIGMA_BOUNDS):
        mu = rng.normal(0.0, 1.0 / np.sqrt(dim), size=(num_classes, dim))
        # a zero row would make every cosine against it undefined
        for c in range(num_classes):
            while not np.any(mu[c]):
                mu[c] = rng.normal(0.0, 1.0 / np.sqrt(dim), size=dim)
        return cls(Tensor(mu, requires_grad=True),
                   Tensor(np.zeros((num_classes, dim)), requires_grad=True),
                   tuple(log_sigma_bounds))

    @property
    def num_classes(self):
        return self.mu.shape[0]

    @property
    def dim(self):
        return self.mu.shape[1]

    def sigma(self):
        lo, hi = self.log_sigma_bounds
        return ad.exp(ad.clamp(self.log_sigma, lo, hi))

    def parameters(self):
        return [self.mu, self.log_sigma]

    def state_dict(self):
        return {"proxy.mu": self.mu.data, "proxy.log_sigma": self.log_sigma.data}

    def load_state_dict(self, state):
        self.mu.data = np.array(state["proxy.mu"], dtype=np.float64)
        self.log_sigma.data = np.array(state["proxy.log_sigma"], dtype=np.float64)
        self.mu.zero_grad()
        self.log_sigma.zero_grad()


def _check_dims(Z, bank):
    if Z.ndim != 3:
        raise ShapeError(f"token batch must be B x L x D, got {Z.shape}")
    if Z.shape[-1] != bank.dim:
        raise ShapeError(f"embedding width {Z.shape[-1]} != proxy width {bank.dim}")


def token_cosines(Z, bank):
    """cos(z_{i,l}, mu_c) as a B x L x C tensor."""
    _check_dims(Z, bank)
    return ad.pairwise_cosine(Z, bank.mu)


def soft_assign(Z, bank, cosines=None):
    """P(c | z_{i,l}): softmax over classes of token-to-mean cosines."""
    if cosines is None:
        cosines = token_cosines(Z, bank)
    return ad.softmax(cosines, axis=-1)


def loss_e2p(Z, bank, P, cosines=None):
    """sum_{i,l,c} P[i,l,c] * (1 - cos(z_{i,l}, mu_c))."""
    if cosines is None:
        cosines = token_cosines(Z, bank)
    if P.shape != cosines.shape:
        raise ShapeError(f"assignment shape {P.shape} != {cosines.shape}")
    return ad.sum_(P * (1.0 - cosines))


def loss_e2p_mean(Z, bank, P, cosines=None):
    """E2P divided by the token count B*L, for resolution-independent weighting."""
    n = Z.shape[0] * Z.shape[1]
    return loss_e2p(Z, bank, P, cosines) * (1.0 / n)


def loss_p2e(Z, bank, P, cosines=None):
    """(1/C) sum_c exp(-m_c), m_c = mean over tokens of (2P - 1) * cos."""
    if Z.shape[0] * Z.shape[1] < 1:
        raise ShapeError("P2E needs at least one token")
    if cosines is None:
        cosines = token_cosines(Z, bank)
    if P.shape != cosines.shape:
        raise ShapeError(f"assignment shape {P.shape} != {cosines.shape}")
    margin = ad.mean((2.0 * P - 1.0) * cosines, axis=(0, 1))
    return ad.mean(ad.exp(-margin))


def sample_proxies(bank, S, rng):
    """Reparameterised draws u = mu + sigma * eps, shape C x S x D."""
    if S < 1:
        raise ValueError("need at least one sample per proxy")
    C, D = bank.mu.shape
    eps = rng.standard_normal((C, S, D))
    mu = ad.reshape(bank.mu, (C, 1, D))
    sigma = ad.reshape(bank.sigma(), (C, 1, D))
    return mu + sigma * Tensor(eps)
