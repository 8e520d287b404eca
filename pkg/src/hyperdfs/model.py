"""Predictors: the hypernetwork-based model and the mask-concatenation baseline.

Both expose the same surface used by training and evaluation:

* ``forward_groups(xs, masks, ...)`` -- one status per group of rows
* ``forward_rows(x, masks, ...)``   -- one status per row (differentiable masks)
* ``predict_proba(x, masks)``       -- tape-free inference on NumPy arrays
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import SubsetEncoder, SubsetEncoding
from .hypernet import Compressor, GeneratedParams, HyperNet, PrimaryNetSpec, generate, primary_forward
from .nn import MLP, Module


@dataclass
class ModelConfig:
    M: int
    num_classes: int
    d: int = 32
    d_out: int = 64
    heads: int = 4
    num_inducing: int = 16
    num_blocks: int = 2
    primary_hidden: int = 64
    primary_layers: int = 2
    hyper_hidden: int = 128
    hyper_layers: int = 2
    hyper_final_std: float = 1e-2
    compressor_dim: int = 16
    compressor_threshold: int = 32
    compressor: bool | None = None  # None -> enabled iff M > compressor_threshold

    def compressor_enabled(self) -> bool:
        return self.M > self.compressor_threshold if self.compressor is None else bool(self.compressor)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ForwardAux:
    encoding: SubsetEncoding | None = None
    params: GeneratedParams | None = None


class HyperDFSPredictor(Module):
    kind = "hyperdfs"

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.encoder = self.child("encoder", SubsetEncoder(
            cfg.M, rng, d=cfg.d, d_out=cfg.d_out, heads=cfg.heads,
            num_inducing=cfg.num_inducing, num_blocks=cfg.num_blocks))
        self.compressor = self.child("compressor", Compressor(
            cfg.M, cfg.compressor_dim, rng, enabled=cfg.compressor_enabled()))
        sizes = [self.compressor.out_dim] + [cfg.primary_hidden] * cfg.primary_layers + [cfg.num_classes]
        self.spec = PrimaryNetSpec(sizes)
        self.hyper = self.child("hyper", HyperNet(cfg.d_out, self.spec, rng, hidden=cfg.hyper_hidden,
                                                  depth=cfg.hyper_layers, final_std=cfg.hyper_final_std))

    def generate(self, masks, noise_std: float = 0.0, rng: np.random.Generator | None = None):
        if noise_std > 0:
            enc = self.encoder.encode_stochastic(masks, noise_std, rng)
        else:
            enc = self.encoder.encode(masks)
        return enc, generate(enc.z_tilde, self.hyper, self.spec)

    def forward_groups(self, xs: list, masks, noise_std: float = 0.0, rng=None):
        """``xs[g]`` holds the imputed rows of group g, ``masks`` is ``G x M``."""
        enc, params = self.generate(masks, noise_std, rng)
        logits = []
        for g, x in enumerate(xs):
            x = x if isinstance(x, Tensor) else Tensor(x)
            h = self.compressor(x)
            out = primary_forward(params.rows([g]), h.reshape(1, *h.shape))
            logits.append(out.reshape(out.shape[1], out.shape[2]))
        return ad.concat(logits, axis=0), ForwardAux(enc, params)

    def forward_rows(self, x: Tensor, masks, noise_std: float = 0.0, rng=None):
        enc, params = self.generate(masks, noise_std, rng)
        x = x if isinstance(x, Tensor) else Tensor(x)
        h = self.compressor(x)
        out = primary_forward(params, h.reshape(h.shape[0], 1, h.shape[1]))
        return out.reshape(out.shape[0], out.shape[2]), ForwardAux(enc, params)

    def predict_logits(self, x: np.ndarray, masks: np.ndarray, chunk: int = 512) -> np.ndarray:
        """Tape-free logits; each distinct mask generates one network."""
        masks = np.asarray(masks, dtype=bool)
        if masks.ndim == 1:
            masks = np.broadcast_to(masks, x.shape)
        uniq, inverse = np.unique(masks, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        flat = np.concatenate([self.generate(uniq[s:s + chunk].astype(np.float64))[1].flat.data
                               for s in range(0, uniq.shape[0], chunk)], axis=0)
        h = self.compressor(Tensor(np.asarray(x, dtype=np.float64))).data
        out = np.empty((x.shape[0], self.cfg.num_classes))
        for s in range(0, x.shape[0], chunk):
            rows = slice(s, s + chunk)
            params = GeneratedParams(Tensor(flat[inverse[rows]]), self.spec)
            hb = h[rows]
            out[rows] = primary_forward(params, Tensor(hb.reshape(hb.shape[0], 1, hb.shape[1]))).data[:, 0]
        return out

    def predict_proba(self, x: np.ndarray, masks: np.ndarray) -> np.ndarray:
        return _softmax_np(self.predict_logits(x, masks))


class MaskConcatBaseline(Module):
    """Single shared perceptron on ``[x_tilde || mask]``."""

    kind = "maskconcat"

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        sizes = [2 * cfg.M] + [cfg.primary_hidden] * cfg.primary_layers + [cfg.num_classes]
        self.mlp = self.child("mlp", MLP(sizes, "tanh", rng))

    def forward_rows(self, x, masks, noise_std: float = 0.0, rng=None):
        x = x if isinstance(x, Tensor) else Tensor(x)
        m = masks if isinstance(masks, Tensor) else Tensor(np.asarray(masks, dtype=np.float64))
        return self.mlp(ad.concat([x, m], axis=1)), ForwardAux()

    def forward_groups(self, xs: list, masks, noise_std: float = 0.0, rng=None):
        m = masks.data if isinstance(masks, Tensor) else np.asarray(masks, dtype=np.float64)
        rows = np.repeat(m, [len(x) for x in xs], axis=0)
        x = np.concatenate([x.data if isinstance(x, Tensor) else x for x in xs], axis=0)
        return self.forward_rows(Tensor(x), Tensor(rows))

    def predict_logits(self, x: np.ndarray, masks: np.ndarray) -> np.ndarray:
        masks = np.asarray(masks, dtype=np.float64)
        if masks.ndim == 1:
            masks = np.broadcast_to(masks, x.shape)
        return self.mlp(Tensor(np.hstack([x, masks]))).data

    def predict_proba(self, x: np.ndarray, masks: np.ndarray) -> np.ndarray:
        return _softmax_np(self.predict_logits(x, masks))


def _softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def build_predictor(kind: str, cfg: ModelConfig, rng: np.random.Generator):
    if kind == HyperDFSPredictor.kind:
        return HyperDFSPredictor(cfg, rng)
    if kind == MaskConcatBaseline.kind:
        return MaskConcatBaseline(cfg, rng)
    raise ValueError(f"unknown predictor kind {kind!r}")
