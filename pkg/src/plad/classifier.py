"""Binary classifier, its stable cross-entropy and the anomaly score."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import ContractError, Tensor


@dataclass
class ScoredSample:
    index: int
    score: float
    true_label: Optional[int] = None


class ClassifierNet:
    """An MLP ending in a single raw logit; sigmoid(logit) is the score."""

    def __init__(self, dims, activation, bias=True, seed=0, leaky_slope=0.01):
        if dims[-1] != 1:
            raise ContractError(f"classifier must end in one logit, got dims {dims}")
        spec = nn.MlpSpec.uniform(dims, activation, bias=bias)
        self.mlp = nn.Mlp.build(spec, np.random.default_rng(seed), leaky_slope)

    @classmethod
    def tabular_default(cls, dim, seed=0):
        return cls([dim, 20, 1], "relu", bias=True, seed=seed)

    @classmethod
    def image_default(cls, dim, seed=0, leaky_slope=0.01):
        return cls([dim, 128, 64, 1], "leaky_relu", bias=False, seed=seed,
                   leaky_slope=leaky_slope)

    @property
    def input_dim(self):
        return self.mlp.spec.dims[0]

    def parameters(self):
        return self.mlp.parameters()

    def layer_list(self):
        return self.mlp.layers


def classifier_logit(net, x):
    """Raw (n, 1) logits for a batch tensor."""
    return net.mlp(x)


def anomaly_score(net, x):
    """Sigmoid of the logit per sample; above 0.5 classifies abnormal.

    ``x`` is a plain (n, d) float array; no tape is recorded.
    """
    logits = classifier_logit(net, Tensor(np.atleast_2d(x))).data.ravel()
    return _sigmoid(logits)


def penultimate_embedding(net, x):
    """Activations entering the final linear layer, one row per sample."""
    h = Tensor(np.atleast_2d(x))
    spec, layers = net.mlp.spec, net.mlp.layers
    for layer, act in zip(layers[:-1], spec.activations[:-1]):
        h = nn._apply_activation(nn.linear_forward(layer, h), act, net.mlp.leaky_slope)
    return h.data.copy()


def _sigmoid(t):
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def binary_cross_entropy(label, logit):
    """Stable scalar BCE: max(t, 0) - t*y + log(1 + exp(-|t|))."""
    if label not in (0, 1):
        raise ContractError(f"label must be 0 or 1, got {label!r}")
    t = float(logit)
    if not math.isfinite(t):
        raise ContractError("logit must be finite")
    return max(t, 0.0) - t * label + math.log1p(math.exp(-abs(t)))


def bce_mean(logits, label):
    """Taped batch-mean BCE of an (n, 1) logit tensor against one label."""
    return ad.mean_all(ad.bce_with_logits(logits, label))
