"""Hypernetwork, generated primary networks, compressor and the two
weight-space regularisers."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import MLP, Linear, Module

log = logging.getLogger(__name__)


class ConfigurationError(ValueError):
    pass


@dataclass
class PrimaryNetSpec:
    """Layer extents of the generated classifier and how a flat parameter
    vector is sliced onto its weights and biases (weights first, row-major)."""

    sizes: list[int]
    activation: str = "tanh"
    slices: list[tuple[slice, slice]] = field(init=False)

    def __post_init__(self):
        if len(self.sizes) < 2 or min(self.sizes) < 1:
            raise ConfigurationError(f"bad layer sizes {self.sizes}")
        self.slices = []
        offset = 0
        for d_in, d_out in zip(self.sizes[:-1], self.sizes[1:]):
            w = slice(offset, offset + d_in * d_out)
            offset += d_in * d_out
            b = slice(offset, offset + d_out)
            offset += d_out
            self.slices.append((w, b))

    @property
    def num_layers(self) -> int:
        return len(self.sizes) - 1

    @property
    def total(self) -> int:
        return self.slices[-1][1].stop

    def weight_count(self, layer: int) -> int:
        return self.sizes[layer] * self.sizes[layer + 1]

    def xavier_target(self, layer: int) -> float:
        return 1.0 / self.sizes[layer]


@dataclass
class GeneratedParams:
    """Flat ``G x |theta|`` parameters, one row per generated network."""

    flat: Tensor
    spec: PrimaryNetSpec
    source: Tensor | None = None

    _views: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.flat.ndim != 2 or self.flat.shape[1] != self.spec.total:
            raise ConfigurationError(
                f"generated vector has shape {self.flat.shape}, spec expects G x {self.spec.total}")

    @property
    def count(self) -> int:
        return self.flat.shape[0]

    def weight(self, layer: int) -> Tensor:
        """``G x d_in x d_out`` view; built once and shared by every consumer."""
        key = ("w", layer)
        if key not in self._views:
            w, _ = self.spec.slices[layer]
            d_in, d_out = self.spec.sizes[layer], self.spec.sizes[layer + 1]
            self._views[key] = self.flat[:, w].reshape(self.count, d_in, d_out)
        return self._views[key]

    def bias(self, layer: int) -> Tensor:
        key = ("b", layer)
        if key not in self._views:
            _, b = self.spec.slices[layer]
            self._views[key] = self.flat[:, b].reshape(self.count, 1, self.spec.sizes[layer + 1])
        return self._views[key]

    def rows(self, index) -> "GeneratedParams":
        return GeneratedParams(ad.take_rows(self.flat, index), self.spec)


class HyperNet(Module):
    """Perceptron from the conditioning vector to the flat primary parameters."""

    def __init__(self, d_in: int, spec: PrimaryNetSpec, rng: np.random.Generator,
                 hidden: int = 128, depth: int = 2, final_std: float = 1e-2):
        super().__init__()
        self.spec = spec
        self.mlp = self.child("mlp", MLP([d_in] + [hidden] * depth + [spec.total], "relu", rng,
                                         final_std=final_std))

    def __call__(self, z_tilde: Tensor) -> Tensor:
        return self.mlp(z_tilde)

    def lipschitz_bound(self) -> float:
        """Product of layer spectral norms (relu is 1-Lipschitz)."""
        return float(np.prod([np.linalg.norm(layer.W.data, 2) for layer in self.mlp.layers]))


def generate(z_tilde: Tensor, hyper: HyperNet, spec: PrimaryNetSpec | None = None) -> GeneratedParams:
    spec = spec or hyper.spec
    if z_tilde.shape[-1] != hyper.mlp.sizes[0]:
        raise ConfigurationError(f"encoding dim {z_tilde.shape[-1]} != hypernet input {hyper.mlp.sizes[0]}")
    if spec.total != hyper.mlp.sizes[-1]:
        raise ConfigurationError(f"hypernet emits {hyper.mlp.sizes[-1]} values, spec needs {spec.total}")
    return GeneratedParams(hyper(z_tilde), spec, source=z_tilde)


def primary_forward(params: GeneratedParams, x: Tensor) -> Tensor:
    """Run the G generated networks on ``G x n x d_in`` inputs -> ``G x n x C`` logits."""
    spec = params.spec
    if x.ndim == 2:
        x = x.reshape(1, *x.shape)
    if x.shape[-1] != spec.sizes[0]:
        raise ad.DimensionError(f"primary input width {x.shape[-1]} != {spec.sizes[0]}")
    act = ad.tanh if spec.activation == "tanh" else ad.relu
    h = x
    for layer in range(spec.num_layers):
        h = h @ params.weight(layer) + params.bias(layer)
        if layer < spec.num_layers - 1:
            h = act(h)
    return h


class Compressor(Module):
    """Linear + tanh input reduction; identity when disabled."""

    def __init__(self, M: int, out_dim: int, rng: np.random.Generator, enabled: bool = True):
        super().__init__()
        self.enabled = enabled
        self.in_dim = M
        self.out_dim = out_dim if enabled else M
        if enabled:
            self.lin = self.child("lin", Linear(M, out_dim, rng))

    def __call__(self, x: Tensor) -> Tensor:
        if not self.enabled:
            return x
        return ad.tanh(self.lin(x))


def compress(x: Tensor, comp: Compressor) -> Tensor:
    return comp(x)


def scale_loss(params: GeneratedParams, lam: float = 1.0) -> Tensor:
    """lam * sum over weight layers of the batch mean of
    (mean-square generated weight - 1/d_in)^2. Biases are left out."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    spec = params.spec
    total = None
    for layer in range(spec.num_layers):
        ms = ad.sum(ad.square(params.weight(layer)), axis=(1, 2)) * (1.0 / spec.weight_count(layer))
        term = ad.mean(ad.square(ms - spec.xavier_target(layer)))
        total = term if total is None else total + term
    return total * lam


def layer_mean_squares(params: GeneratedParams) -> np.ndarray:
    """G x L array of per-layer mean-square generated weights."""
    spec = params.spec
    out = []
    for layer in range(spec.num_layers):
        w, _ = spec.slices[layer]
        out.append((params.flat.data[:, w] ** 2).mean(axis=1))
    return np.stack(out, axis=1)


def _batch_variance_mean(x: Tensor) -> Tensor:
    centred = x - ad.mean(x, axis=0, keepdims=True)
    return ad.mean(ad.square(centred))


def collapse_loss(z_tilde: Tensor, theta: Tensor) -> Tensor:
    """Negated mean per-coordinate batch variance of encodings and of
    generated parameters (population variance over the rows)."""
    if z_tilde.shape[0] < 2:
        log.debug("collapse_loss: fewer than two subsets in the batch; returning 0")
        return Tensor(0.0)
    return -_batch_variance_mean(z_tilde) - _batch_variance_mean(theta)
