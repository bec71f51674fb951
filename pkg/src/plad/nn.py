"""Linear layers, MLP assembly, parameter init, SGD/Adam and checkpoints."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, NumericError, Tensor

ACTIVATIONS = ("leaky_relu", "relu", "none")

CHECKPOINT_MAGIC = b"PLAD"
CHECKPOINT_VERSION = 1


@dataclass
class MlpSpec:
    """Layer dims plus per-layer activation and bias flags.

    dims has n+1 entries for n layers; consecutive entries chain, so layer k
    maps dims[k] -> dims[k+1].
    """

    dims: list
    activations: list
    biases: list

    def __post_init__(self):
        n = len(self.dims) - 1
        if n < 1 or any(d < 1 for d in self.dims):
            raise ContractError(f"mlp spec needs chained positive dims, got {self.dims}")
        if len(self.activations) != n or len(self.biases) != n:
            raise ContractError("mlp spec: one activation and bias flag per layer")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ContractError(f"unknown activation {a!r}")

    @classmethod
    def uniform(cls, dims, activation, bias=True, final_activation="none"):
        """Same activation on every hidden layer, raw output on the last."""
        n = len(dims) - 1
        acts = [activation] * (n - 1) + [final_activation]
        return cls(list(dims), acts, [bias] * n)


class LinearLayer:
    """weight (out_dim, in_dim) and an optional bias (out_dim)."""

    __slots__ = ("weight", "bias")

    def __init__(self, weight, bias=None):
        self.weight = weight
        self.bias = bias

    @property
    def out_dim(self):
        return self.weight.shape[0]

    @property
    def in_dim(self):
        return self.weight.shape[1]

    def parameters(self):
        return [self.weight] if self.bias is None else [self.weight, self.bias]


def init_params(spec, seed):
    """Kaiming-uniform weights, zero biases, deterministic per seed.

    Every weight of a layer with fan-in k is drawn uniformly from
    [-sqrt(6/k), sqrt(6/k)].
    """
    return init_layers(spec, np.random.default_rng(seed))


def _apply_activation(x, name, slope):
    if name == "relu":
        return ad.relu(x)
    if name == "leaky_relu":
        return ad.leaky_relu(x, slope=slope)
    return x


def linear_forward(layer, x):
    y = ad.matmul(x, ad.transpose(layer.weight))
    if layer.bias is not None:
        y = ad.add_bias(y, layer.bias)
    return y


def mlp_forward(layers, spec, x, leaky_slope=0.01):
    """Run a batch (n, dims[0]) through the MLP; returns (n, dims[-1])."""
    if x.data.ndim != 2 or x.shape[1] != spec.dims[0]:
        raise ad.DimensionError(f"mlp_forward: input {x.shape} does not match dim {spec.dims[0]}")
    h = x
    for layer, act in zip(layers, spec.activations):
        h = _apply_activation(linear_forward(layer, h), act, leaky_slope)
    return h


def parameters(layers):
    out = []
    for layer in layers:
        out.extend(layer.parameters())
    return out


def init_layers(spec, rng):
    """Like :func:`init_params` but drawing from a caller-owned generator."""
    layers = []
    for k in range(len(spec.dims) - 1):
        in_dim, out_dim = spec.dims[k], spec.dims[k + 1]
        bound = np.sqrt(6.0 / in_dim)
        weight = Tensor(rng.uniform(-bound, bound, size=(out_dim, in_dim)), requires_grad=True)
        bias = Tensor(np.zeros(out_dim), requires_grad=True) if spec.biases[k] else None
        layers.append(LinearLayer(weight, bias))
    return layers


class Mlp:
    """An MlpSpec bound to its layers; callable on a batch tensor."""

    def __init__(self, spec, layers, leaky_slope=0.01):
        self.spec = spec
        self.layers = layers
        self.leaky_slope = leaky_slope

    @classmethod
    def build(cls, spec, rng, leaky_slope=0.01):
        return cls(spec, init_layers(spec, rng), leaky_slope)

    def __call__(self, x):
        return mlp_forward(self.layers, self.spec, x, self.leaky_slope)

    def parameters(self):
        return parameters(self.layers)


@dataclass
class OptimizerState:
    """SGD or Adam with per-parameter moment buffers keyed by tensor id."""

    kind: str
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ContractError(f"unknown optimizer {self.kind!r}")
        if self.learning_rate <= 0:
            raise ContractError("learning_rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ContractError("adam betas must lie in (0, 1)")


def optimizer_step(state, params, grads):
    """Apply one update; aborts (mutating nothing) on non-finite gradients."""
    gs = []
    for p in params:
        g = grads[p.id]
        if not np.all(np.isfinite(g)):
            raise NumericError("optimizer_step: non-finite gradient, step aborted")
        gs.append(g)

    lr = state.learning_rate
    if state.kind == "sgd":
        for p, g in zip(params, gs):
            p.data = p.data - lr * g
        return

    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for p, g in zip(params, gs):
        m = state.m.get(p.id)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[p.id] = m
            state.v[p.id] = np.zeros_like(p.data)
        v = state.v[p.id]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def save_checkpoint(path, layers):
    """Flat binary layer dump; little-endian, float64, bit-exact round trip."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(layers)))
        for layer in layers:
            fh.write(struct.pack("<IIB", layer.out_dim, layer.in_dim, layer.bias is not None))
            fh.write(np.ascontiguousarray(layer.weight.data, dtype="<f8").tobytes())
            if layer.bias is not None:
                fh.write(np.ascontiguousarray(layer.bias.data, dtype="<f8").tobytes())


class CheckpointError(Exception):
    pass


def load_checkpoint(path):
    """Read back layers written by :func:`save_checkpoint`."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 12
    layers = []
    for _ in range(count):
        if off + 9 > len(blob):
            raise CheckpointError(f"{path}: truncated at byte {off}")
        out_dim, in_dim, has_bias = struct.unpack_from("<IIB", blob, off)
        off += 9
        need = out_dim * in_dim * 8 + (out_dim * 8 if has_bias else 0)
        if off + need > len(blob):
            raise CheckpointError(f"{path}: truncated at byte {off}")
        w = np.frombuffer(blob, dtype="<f8", count=out_dim * in_dim, offset=off)
        off += out_dim * in_dim * 8
        weight = Tensor(w.reshape(out_dim, in_dim).copy(), requires_grad=True)
        bias = None
        if has_bias:
            b = np.frombuffer(blob, dtype="<f8", count=out_dim, offset=off)
            off += out_dim * 8
            bias = Tensor(b.copy(), requires_grad=True)
        layers.append(LinearLayer(weight, bias))
    if off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes")
    return layers
