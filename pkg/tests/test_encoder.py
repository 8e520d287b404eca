import numpy as np
import pytest

from hyperdfs import autodiff as ad
from hyperdfs.autodiff import Tape, Tensor
from hyperdfs.data import KnowledgeStatus
from hyperdfs.encoder import (
    MAB,
    DegenerateEncodingError,
    FeatureEmbeddings,
    ISABEncoder,
    SubsetEncoder,
    build_token_matrix,
    encode,
    isab_forward,
)


def small_encoder(M=5, seed=0, **kw):
    cfg = dict(d=8, d_out=6, heads=2, num_inducing=3, num_blocks=2)
    cfg.update(kw)
    return SubsetEncoder(M, np.random.default_rng(seed), **cfg)


# ------------------------------------------------------------------ tokens


def test_token_matrix_selects_present_or_absent_rows(rng):
    emb = FeatureEmbeddings(3, 4, rng)
    full = build_token_matrix(KnowledgeStatus.full(3), emb).data[0]
    empty = build_token_matrix(KnowledgeStatus.empty(3), emb).data[0]
    assert np.array_equal(full, emb.present.data) and np.array_equal(empty, emb.absent.data)
    mixed = build_token_matrix(np.array([1, 0, 1], dtype=bool), emb).data[0]
    expected = np.stack([emb.present.data[0], emb.absent.data[1], emb.present.data[2]])
    assert np.array_equal(mixed, expected)


def test_token_matrix_length_mismatch(rng):
    with pytest.raises(ad.DimensionError):
        build_token_matrix(KnowledgeStatus.full(4), FeatureEmbeddings(3, 4, rng))


def test_embedding_tables_share_initialiser_scale():
    emb = FeatureEmbeddings(400, 50, np.random.default_rng(0))
    v1, v0 = emb.present.data.var(), emb.absent.data.var()
    assert abs(v1 - 1.0) < 0.02 and abs(v0 - 1.0) < 0.02


def test_token_matrix_gradients_reach_both_tables(rng):
    emb = FeatureEmbeddings(3, 2, rng)
    w = Tensor(rng.normal(size=(1, 3, 2)))
    f = lambda: ad.sum(build_token_matrix(np.array([1, 0, 1], dtype=bool), emb) * w)  # noqa: E731
    assert ad.finite_diff_check(f, [emb.present, emb.absent]) < 1e-8
    assert np.array_equal(emb.absent.grad[[0, 2]], np.zeros((2, 2)))


# -------------------------------------------------------------------- ISAB


def test_isab_is_permutation_equivariant(rng):
    enc = ISABEncoder(8, 2, 3, 2, rng)
    X = rng.normal(size=(2, 6, 8))
    perm = rng.permutation(6)
    out = isab_forward(Tensor(X), enc).data
    out_p = isab_forward(Tensor(X[:, perm]), enc).data
    np.testing.assert_allclose(out_p, out[:, perm], rtol=0, atol=1e-9)


def test_isab_single_token_and_gradcheck(rng):
    enc = ISABEncoder(4, 2, 2, 1, rng)
    X = Tensor(rng.normal(size=(1, 1, 4)), requires_grad=True)
    assert np.isfinite(isab_forward(X, enc).data).all()
    w = rng.normal(size=(1, 1, 4))
    f = lambda: ad.sum(isab_forward(X, enc) * w)  # noqa: E731
    assert ad.finite_diff_check(f, [X] + enc.parameters(), max_coords=4) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_isab_gradcheck_tokens_and_parameters(seed):
    r = np.random.default_rng(seed)
    enc = ISABEncoder(4, 2, 3, 2, r)
    X = Tensor(r.normal(size=(2, 5, 4)), requires_grad=True)
    w = r.normal(size=(2, 5, 4))
    f = lambda: ad.sum(isab_forward(X, enc) * w)  # noqa: E731
    assert ad.finite_diff_check(f, [X] + enc.parameters(), max_coords=4) < 1e-4


def test_mab_rejects_indivisible_heads(rng):
    with pytest.raises(ValueError):
        MAB(6, 4, rng)


# ---------------------------------------------------------------- encoding


def test_encodings_are_unit_norm_and_deterministic(rng):
    enc = small_encoder()
    masks = rng.random((20, 5)) < 0.5
    a, b = enc.encode(masks), encode(masks, enc)
    np.testing.assert_allclose(np.linalg.norm(a.z_tilde.data, axis=1), 1.0, rtol=0, atol=1e-10)
    assert a.z_tilde.data.tobytes() == b.z_tilde.data.tobytes()
    np.testing.assert_allclose(a.z_tilde.data, a.z.data / np.linalg.norm(a.z.data, axis=1, keepdims=True))


def test_pooled_encoding_is_invariant_to_feature_relabelling(rng):
    """Permuting features together with their embeddings leaves z unchanged."""
    enc = small_encoder()
    mask = np.array([[1, 0, 1, 1, 0]], dtype=bool)
    z = enc.raw(mask).data
    perm = rng.permutation(5)
    enc.emb.present.data[...] = enc.emb.present.data[perm]
    enc.emb.absent.data[...] = enc.emb.absent.data[perm]
    np.testing.assert_allclose(enc.raw(mask[:, perm]).data, z, rtol=0, atol=1e-9)


def test_stochastic_encoding(rng):
    enc = small_encoder()
    mask = KnowledgeStatus.from_indices(5, [0, 3])
    clean = enc.encode(mask).z_tilde.data
    zero = enc.encode_stochastic(mask, 0.0, rng).z_tilde.data
    assert np.array_equal(zero, clean)
    cos = []
    for _ in range(200):
        noisy = enc.encode_stochastic(mask, 0.2, rng).z_tilde.data
        assert abs(np.linalg.norm(noisy) - 1.0) < 1e-10
        cos.append(float((noisy * clean).sum()))
    assert 0.0 < np.mean(cos) < 1.0
    with pytest.raises(ValueError):
        enc.encode_stochastic(mask, -0.1, rng)


def test_degenerate_encoding_is_loud():
    enc = small_encoder()
    for p in enc.rho.parameters():
        p.data[...] = 0.0
    with pytest.raises(DegenerateEncodingError):
        enc.encode(KnowledgeStatus.full(5))


def test_every_encoder_parameter_gets_gradient(rng):
    enc = small_encoder()
    masks = rng.random((6, 5)) < 0.5
    masks[0] = True
    target = Tensor(rng.normal(size=(6, 6)))
    with Tape() as tape:
        loss = ad.sum(enc.encode(masks).z_tilde * target)
    tape.backward(loss)
    for name, p in enc.named_parameters():
        assert p.grad is not None and np.abs(p.grad).max() > 0, name


@pytest.mark.parametrize("seed", range(3))
def test_encode_gradcheck(seed):
    r = np.random.default_rng(seed)
    enc = small_encoder(seed=seed)
    masks = r.random((3, 5)) < 0.5
    masks[:, 0] = True
    w = r.normal(size=(3, 6))
    f = lambda: ad.sum(enc.encode(masks).z_tilde * w)  # noqa: E731
    assert ad.finite_diff_check(f, enc.parameters(), max_coords=3, rng=r) < 1e-4
