"""Perturbation generators and their regularization terms.

The generator maps a sample x to a multiplicative perturbation alpha and an
additive one beta; the perturbed sample is x * alpha + beta. The default
generator is variational: an encoder produces a per-sample Gaussian
(mu, logvar), a reparameterized draw z feeds a decoder whose 2d-wide output
splits into (alpha, beta). No layer changes width except the final doubling,
so the generator never compresses the input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import ContractError, Tensor


@dataclass
class PerturbationOutput:
    """Per-batch alpha, beta and the latent quantities they came from."""

    alpha: Tensor
    beta: Tensor
    mu: Tensor
    logvar: Tensor
    z: Tensor


class VaePerturbator:
    """Encoder with Gaussian heads, reparameterized draw, doubling decoder.

    Layer stack for input dim d (serialized in this order):
      encoder d->d + activation, mu head d->d, logvar head d->d,
      decoder hidden d->d + activation, decoder out d->2d.
    """

    mode = "vae"

    def __init__(self, dim, activation="leaky_relu", seed=0, leaky_slope=0.01):
        rng = np.random.default_rng(seed)
        self.dim = dim
        head = nn.MlpSpec([dim, dim], ["none"], [True])
        self.encoder = nn.Mlp.build(nn.MlpSpec([dim, dim], [activation], [True]), rng, leaky_slope)
        self.mu_head = nn.Mlp.build(head, rng, leaky_slope)
        self.logvar_head = nn.Mlp.build(head, rng, leaky_slope)
        self.decoder = nn.Mlp.build(
            nn.MlpSpec([dim, dim, 2 * dim], [activation, "none"], [True, True]), rng, leaky_slope
        )

    def parameters(self):
        return (self.encoder.parameters() + self.mu_head.parameters()
                + self.logvar_head.parameters() + self.decoder.parameters())

    def layer_list(self):
        return (self.encoder.layers + self.mu_head.layers
                + self.logvar_head.layers + self.decoder.layers)


class AePerturbator:
    """Deterministic variant: the Gaussian heads become one linear map."""

    mode = "ae"

    def __init__(self, dim, activation="leaky_relu", seed=0, leaky_slope=0.01):
        rng = np.random.default_rng(seed)
        self.dim = dim
        self.encoder = nn.Mlp.build(nn.MlpSpec([dim, dim], [activation], [True]), rng, leaky_slope)
        self.bottleneck = nn.Mlp.build(nn.MlpSpec([dim, dim], ["none"], [True]), rng, leaky_slope)
        self.decoder = nn.Mlp.build(
            nn.MlpSpec([dim, dim, 2 * dim], [activation, "none"], [True, True]), rng, leaky_slope
        )

    def parameters(self):
        return self.encoder.parameters() + self.bottleneck.parameters() + self.decoder.parameters()

    def layer_list(self):
        return self.encoder.layers + self.bottleneck.layers + self.decoder.layers


def forward_perturb(p, x, noise):
    """Run the variational path: heads, reparameterized z, decoder split.

    ``noise`` must be an (n, d) tensor of standard normals; gradients flow
    to mu and logvar through z = mu + exp(logvar / 2) * noise.
    """
    if noise.shape != x.shape:
        raise ContractError(f"noise shape {noise.shape} must match batch {x.shape}")
    h = p.encoder(x)
    mu = p.mu_head(h)
    logvar = p.logvar_head(h)
    std = ad.exp(ad.scale(logvar, 0.5))
    z = ad.add(mu, ad.hadamard(std, noise))
    alpha, beta = ad.split(p.decoder(z), parts=2, axis=1)
    return PerturbationOutput(alpha=alpha, beta=beta, mu=mu, logvar=logvar, z=z)


def forward_perturb_ae(p, x):
    """Deterministic path: encoder -> bottleneck -> decoder -> split."""
    z = p.bottleneck(p.encoder(x))
    alpha, beta = ad.split(p.decoder(z), parts=2, axis=1)
    return alpha, beta


def apply_perturbation(x, alpha, beta):
    """x * alpha + beta, elementwise, no clamping."""
    if x.shape != alpha.shape or x.shape != beta.shape:
        raise ad.DimensionError(
            f"apply_perturbation: shapes {x.shape}, {alpha.shape}, {beta.shape} differ")
    return ad.add(ad.hadamard(x, alpha), beta)


def kl_standard_normal(mu, logvar):
    """Batch-mean KL of N(mu, exp(logvar)) against the standard normal.

    Per sample: -0.5 * sum_dims(1 + logvar - mu^2 - exp(logvar)).
    """
    if mu.shape != logvar.shape:
        raise ad.DimensionError(f"kl: shapes {mu.shape}, {logvar.shape} differ")
    n = mu.shape[0] if mu.data.ndim == 2 else 1
    inner = ad.add(ad.add(ad.add(logvar, 1.0), ad.scale(ad.square(mu), -1.0)),
                   ad.scale(ad.exp(logvar), -1.0))
    return ad.scale(ad.sum_all(inner), -0.5 / n)


def reconstruction_penalty(alpha, beta):
    """Batch mean of ||alpha - 1||^2 + ||beta||^2."""
    if alpha.shape != beta.shape:
        raise ad.DimensionError(f"recon: shapes {alpha.shape}, {beta.shape} differ")
    n = alpha.shape[0] if alpha.data.ndim == 2 else 1
    a_term = ad.sum_all(ad.square(ad.add(alpha, -1.0)))
    b_term = ad.sum_all(ad.square(beta))
    return ad.scale(ad.add(a_term, b_term), 1.0 / n)
