"""Set-Transformer encoding of a knowledge status.

Each feature owns a "present" and an "absent" embedding; the status picks one
per feature, the token matrix passes through induced-set-attention blocks,
the output tokens are sum-pooled, mapped through a small perceptron and
L2-normalised.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import KnowledgeStatus
from .nn import MLP, Linear, Module, glorot

DEGENERATE_NORM = 1e-12


class DegenerateEncodingError(ArithmeticError):
    """The pooled encoding has (numerically) zero norm."""


@dataclass
class SubsetEncoding:
    z: Tensor
    z_tilde: Tensor


def as_mask_tensor(status, M: int | None = None) -> Tensor:
    """Coerce a status, bool array or Tensor to a float ``B x M`` Tensor."""
    if isinstance(status, Tensor):
        t = status
    elif isinstance(status, KnowledgeStatus):
        t = Tensor(status.mask.astype(np.float64))
    elif isinstance(status, (list, tuple)) and status and isinstance(status[0], KnowledgeStatus):
        t = Tensor(np.stack([s.mask for s in status]).astype(np.float64))
    else:
        t = Tensor(np.asarray(status, dtype=np.float64))
    if t.ndim == 1:
        t = t.reshape(1, t.shape[0])
    if M is not None and t.shape[-1] != M:
        raise ad.DimensionError(f"status covers {t.shape[-1]} features, embeddings cover {M}")
    return t


class FeatureEmbeddings(Module):
    def __init__(self, M: int, d: int, rng: np.random.Generator, std: float = 1.0):
        super().__init__()
        self.M, self.d = M, d
        # same initialiser scale for both tables keeps E|pooled|^2 independent of |S|
        self.absent = self.param("absent", rng.normal(0.0, std, size=(M, d)))
        self.present = self.param("present", rng.normal(0.0, std, size=(M, d)))


def build_token_matrix(status, emb: FeatureEmbeddings) -> Tensor:
    """Row i is ``m_i * present_i + (1 - m_i) * absent_i``; returns ``B x M x d``."""
    m = as_mask_tensor(status, emb.M)
    m3 = m.reshape(m.shape[0], emb.M, 1)
    return m3 * emb.present + (1.0 - m3) * emb.absent


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    x = x.reshape(*lead, n, heads, d // heads)
    axes = list(range(x.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    return ad.transpose(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    x = ad.transpose(x, axes)
    *lead, n, h, dh = x.shape
    return x.reshape(*lead, n, h * dh)


class MAB(Module):
    """Multihead attention block: H = LN(X + MHA(X, Y)); out = LN(H + rFF(H))."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        super().__init__()
        if d % heads:
            raise ValueError(f"token dim {d} not divisible by {heads} heads")
        self.d, self.heads = d, heads
        self.q = self.child("q", Linear(d, d, rng))
        # a key bias only shifts each query's logits uniformly, which softmax ignores
        self.k = self.child("k", Linear(d, d, rng, bias=False))
        self.v = self.child("v", Linear(d, d, rng))
        self.o = self.child("o", Linear(d, d, rng))
        self.ff1 = self.child("ff1", Linear(d, d, rng))
        self.ff2 = self.child("ff2", Linear(d, d, rng))
        self.ln1_g = self.param("ln1_g", np.ones(d))
        self.ln1_b = self.param("ln1_b", np.zeros(d))
        self.ln2_g = self.param("ln2_g", np.ones(d))
        self.ln2_b = self.param("ln2_b", np.zeros(d))

    def __call__(self, X: Tensor, Y: Tensor) -> Tensor:
        q = _split_heads(self.q(X), self.heads)
        k = _split_heads(self.k(Y), self.heads)
        v = _split_heads(self.v(Y), self.heads)
        kt = ad.transpose(k, list(range(k.ndim - 2)) + [k.ndim - 1, k.ndim - 2])
        scores = (q @ kt) * (1.0 / np.sqrt(self.d / self.heads))
        attn = _merge_heads(ad.softmax(scores, axis=-1) @ v)
        H = ad.layer_norm(X + self.o(attn), self.ln1_g, self.ln1_b)
        ff = self.ff2(ad.relu(self.ff1(H)))
        return ad.layer_norm(H + ff, self.ln2_g, self.ln2_b)


class ISAB(Module):
    """ISAB(X) = MAB(X, MAB(I, X)) with m learned inducing points I."""

    def __init__(self, d: int, heads: int, num_inducing: int, rng: np.random.Generator):
        super().__init__()
        if num_inducing < 1:
            raise ValueError("need at least one inducing point")
        self.inducing = self.param("inducing", glorot(rng, num_inducing, d))
        self.mab_in = self.child("mab_in", MAB(d, heads, rng))
        self.mab_out = self.child("mab_out", MAB(d, heads, rng))

    def __call__(self, X: Tensor) -> Tensor:
        H = self.mab_in(self.inducing, X)
        return self.mab_out(X, H)


class ISABEncoder(Module):
    def __init__(self, d: int, heads: int, num_inducing: int, num_blocks: int, rng: np.random.Generator):
        super().__init__()
        self.blocks = [self.child(f"b{i}", ISAB(d, heads, num_inducing, rng)) for i in range(num_blocks)]

    def __call__(self, tokens: Tensor) -> Tensor:
        for block in self.blocks:
            tokens = block(tokens)
        return tokens


def isab_forward(tokens: Tensor, enc: ISABEncoder) -> Tensor:
    return enc(tokens)


def _l2_normalize(z: Tensor) -> Tensor:
    norms = np.sqrt((z.data * z.data).sum(axis=-1))
    if (norms < DEGENERATE_NORM).any():
        raise DegenerateEncodingError(f"encoding norm {norms.min():.3e} below {DEGENERATE_NORM}")
    return z / ad.sqrt(ad.sum(ad.square(z), axis=-1, keepdims=True))


class SubsetEncoder(Module):
    """Maps knowledge statuses (``B x M`` masks) to unit-norm ``B x d_out`` encodings."""

    def __init__(
        self,
        M: int,
        rng: np.random.Generator,
        d: int = 32,
        d_out: int = 64,
        heads: int = 4,
        num_inducing: int = 16,
        num_blocks: int = 2,
    ):
        super().__init__()
        self.M, self.d, self.d_out = M, d, d_out
        self.emb = self.child("emb", FeatureEmbeddings(M, d, rng))
        self.isab = self.child("isab", ISABEncoder(d, heads, num_inducing, num_blocks, rng))
        self.rho = self.child("rho", MLP([d, d, d_out], "tanh", rng))

    def pooled(self, status) -> Tensor:
        tokens = build_token_matrix(status, self.emb)
        return ad.sum(self.isab(tokens), axis=1)

    def raw(self, status) -> Tensor:
        return self.rho(self.pooled(status))

    def encode(self, status) -> SubsetEncoding:
        z = self.raw(status)
        return SubsetEncoding(z, _l2_normalize(z))

    def encode_stochastic(self, status, noise_std: float, rng: np.random.Generator) -> SubsetEncoding:
        """Adds N(0, noise_std^2 I) to the raw encoding before normalising."""
        if noise_std < 0:
            raise ValueError("noise std must be >= 0")
        z = self.raw(status)
        if noise_std == 0:
            return SubsetEncoding(z, _l2_normalize(z))
        z_star = z + Tensor(rng.normal(0.0, noise_std, size=z.shape))
        return SubsetEncoding(z_star, _l2_normalize(z_star))


def encode(status, encoder: SubsetEncoder) -> SubsetEncoding:
    return encoder.encode(status)
