import csv
import math
import warnings

import numpy as np
import pytest

from hyperdfs import autodiff as ad
from hyperdfs.autodiff import Tape, Tensor
from hyperdfs.hypernet import (
    Compressor,
    ConfigurationError,
    GeneratedParams,
    HyperNet,
    PrimaryNetSpec,
    collapse_loss,
    compress,
    generate,
    layer_mean_squares,
    primary_forward,
    scale_loss,
)
from hyperdfs.model import HyperDFSPredictor, MaskConcatBaseline, ModelConfig
from hyperdfs.propcheck import (
    LowPowerWarning,
    flatness_ratio,
    prop1_experiment,
    slope_ttest,
    through_origin_r2,
)


# ----------------------------------------------------------- layout


def test_spec_slices_cover_the_flat_vector_disjointly():
    spec = PrimaryNetSpec([10, 64, 64, 2])
    counts = [10 * 64 + 64, 64 * 64 + 64, 64 * 2 + 2]
    assert spec.total == sum(counts)
    covered = np.zeros(spec.total, dtype=int)
    for w, b in spec.slices:
        covered[w] += 1
        covered[b] += 1
    assert (covered == 1).all()
    assert [spec.xavier_target(layer) for layer in range(3)] == [0.1, 1 / 64, 1 / 64]


def test_spec_rejects_bad_sizes():
    with pytest.raises(ConfigurationError):
        PrimaryNetSpec([5])
    with pytest.raises(ConfigurationError):
        GeneratedParams(Tensor(np.zeros((1, 7))), PrimaryNetSpec([2, 2]))


# ---------------------------------------------------------------- generate


def test_generate_is_deterministic_and_slices_reshape(rng):
    spec = PrimaryNetSpec([4, 8, 8, 3])
    hyper = HyperNet(6, spec, rng, hidden=16)
    z = Tensor(rng.normal(size=(2, 6)))
    a, b = generate(z, hyper), generate(z, hyper)
    assert a.flat.data.tobytes() == b.flat.data.tobytes()
    assert a.flat.shape == (2, spec.total)
    for layer, (d_in, d_out) in enumerate(zip(spec.sizes[:-1], spec.sizes[1:])):
        assert a.weight(layer).shape == (2, d_in, d_out) and a.bias(layer).shape == (2, 1, d_out)
        w_slice, _ = spec.slices[layer]
        np.testing.assert_array_equal(a.weight(layer).data.reshape(2, -1), a.flat.data[:, w_slice])


def test_generate_dimension_checks(rng):
    spec = PrimaryNetSpec([4, 3])
    hyper = HyperNet(6, spec, rng, hidden=8)
    with pytest.raises(ConfigurationError):
        generate(Tensor(np.zeros((1, 5))), hyper)
    with pytest.raises(ConfigurationError):
        generate(Tensor(np.zeros((1, 6))), hyper, PrimaryNetSpec([4, 4]))


def test_hypernet_final_layer_starts_small(rng):
    spec = PrimaryNetSpec([10, 64, 64, 2])
    hyper = HyperNet(64, spec, rng)
    assert abs(hyper.mlp.layers[-1].W.data.std() - 1e-2) < 1e-3


def test_generate_gradcheck_wrt_phi_and_z(rng):
    spec = PrimaryNetSpec([3, 4, 2])
    hyper = HyperNet(5, spec, rng, hidden=6)
    z = Tensor(rng.normal(size=(2, 5)), requires_grad=True)
    x = Tensor(rng.normal(size=(2, 4, 3)))
    y = rng.integers(0, 2, 8)

    def f():
        logits = primary_forward(generate(z, hyper), x)
        return ad.cross_entropy(logits.reshape(8, 2), y)

    margin = ad.kink_margin(f)
    assert margin > 1e-3
    assert ad.finite_diff_check(f, [z] + hyper.parameters()) < 1e-4


def test_lipschitz_bound_holds_for_small_perturbations(rng):
    spec = PrimaryNetSpec([3, 4, 2])
    hyper = HyperNet(5, spec, rng, hidden=6, final_std=0.5)
    z = rng.normal(size=(1, 5))
    delta = rng.normal(size=(1, 5))
    delta *= 1e-6 / np.linalg.norm(delta)
    change = np.linalg.norm(hyper(Tensor(z + delta)).data - hyper(Tensor(z)).data)
    assert change <= hyper.lipschitz_bound() * 1e-6 * (1 + 1e-9)


# ----------------------------------------------------------------- primary


def test_zero_parameters_give_uniform_prediction(rng):
    spec = PrimaryNetSpec([3, 5, 5, 4])
    params = GeneratedParams(Tensor(np.zeros((1, spec.total))), spec)
    logits = primary_forward(params, Tensor(rng.normal(size=(6, 3))))
    assert np.array_equal(logits.data, np.zeros((1, 6, 4)))


def test_primary_rows_are_independent(rng):
    spec = PrimaryNetSpec([3, 5, 2])
    params = GeneratedParams(Tensor(rng.normal(size=(1, spec.total))), spec)
    x = rng.normal(size=(7, 3))
    perm = rng.permutation(7)
    a = primary_forward(params, Tensor(x)).data[0]
    b = primary_forward(params, Tensor(x[perm])).data[0]
    np.testing.assert_allclose(b, a[perm], rtol=1e-14)


def test_primary_matches_explicit_tanh_mlp(rng):
    spec = PrimaryNetSpec([3, 4, 4, 2])
    flat = rng.normal(size=(1, spec.total))
    params = GeneratedParams(Tensor(flat), spec)
    x = rng.normal(size=(5, 3))
    h = x
    for layer, (w, b) in enumerate(spec.slices):
        W = flat[0, w].reshape(spec.sizes[layer], spec.sizes[layer + 1])
        h = h @ W + flat[0, b]
        if layer < 2:
            h = np.tanh(h)
    np.testing.assert_allclose(primary_forward(params, Tensor(x)).data[0], h, rtol=1e-13)


def test_primary_width_mismatch(rng):
    spec = PrimaryNetSpec([3, 2])
    params = GeneratedParams(Tensor(np.zeros((1, spec.total))), spec)
    with pytest.raises(ad.DimensionError):
        primary_forward(params, Tensor(np.zeros((2, 4))))


def test_primary_gradcheck_wrt_input(rng):
    spec = PrimaryNetSpec([3, 4, 4, 2])
    params = GeneratedParams(Tensor(rng.normal(size=(1, spec.total))), spec)
    x = Tensor(rng.normal(size=(1, 5, 3)), requires_grad=True)
    y = rng.integers(0, 2, 5)
    f = lambda: ad.cross_entropy(primary_forward(params, x).reshape(5, 2), y)  # noqa: E731
    assert ad.finite_diff_check(f, x) < 1e-4


# -------------------------------------------------------------- compressor


def test_compressor(rng):
    x = Tensor(rng.normal(size=(4, 64)))
    off = Compressor(64, 16, rng, enabled=False)
    assert compress(x, off) is x and off.out_dim == 64
    on = Compressor(64, 16, rng)
    out = compress(x, on).data
    assert out.shape == (4, 16)
    np.testing.assert_allclose(out, np.tanh(x.data @ on.lin.W.data + on.lin.b.data), rtol=1e-14)


def test_compressor_default_threshold():
    assert not ModelConfig(10, 2).compressor_enabled()
    assert not ModelConfig(32, 2).compressor_enabled()
    assert ModelConfig(33, 2).compressor_enabled()
    model = HyperDFSPredictor(ModelConfig(64, 2, d=8, d_out=8, heads=2, num_inducing=2, num_blocks=1,
                                          primary_hidden=4, hyper_hidden=8), np.random.default_rng(0))
    assert model.compressor.out_dim == 16 and model.spec.sizes[0] == 16


def test_gradcheck_through_compressor_and_primary(rng):
    comp = Compressor(6, 3, rng)
    spec = PrimaryNetSpec([3, 4, 2])
    theta = Tensor(rng.normal(size=(1, spec.total)), requires_grad=True)
    x = Tensor(rng.normal(size=(5, 6)))
    y = rng.integers(0, 2, 5)

    def f():
        h = compress(x, comp)
        return ad.cross_entropy(primary_forward(GeneratedParams(theta, spec), h).reshape(5, 2), y)

    assert ad.finite_diff_check(f, [theta] + comp.parameters()) < 1e-4


# -------------------------------------------------------------- scale loss


def _params_from_weights(sizes, weights):
    spec = PrimaryNetSpec(sizes)
    flat = np.zeros((1, spec.total))
    for (w, _), value in zip(spec.slices, weights):
        flat[0, w] = value
    return GeneratedParams(Tensor(flat), spec)


def test_scale_loss_hand_values():
    # one weight layer with n_l = 2 entries and target 1/d_in = 1
    assert scale_loss(_params_from_weights([1, 2], [[1.0, 1.0]]), 0.3).data == 0.0
    assert scale_loss(_params_from_weights([1, 2], [[2.0, 0.0]]), 0.3).data == pytest.approx(0.3)


def test_scale_loss_ignores_biases():
    spec = PrimaryNetSpec([1, 2])
    flat = np.zeros((1, spec.total))
    flat[0, spec.slices[0][0]] = 1.0
    flat[0, spec.slices[0][1]] = 50.0
    assert scale_loss(GeneratedParams(Tensor(flat), spec)).data == 0.0


def test_scale_loss_zero_iff_layers_on_target(rng):
    sizes = [4, 3, 2]
    weights = [rng.choice([-1, 1], size=12) * 0.5, rng.choice([-1, 1], size=6) / math.sqrt(3)]
    params = _params_from_weights(sizes, weights)
    assert scale_loss(params).data < 1e-30
    np.testing.assert_allclose(layer_mean_squares(params)[0], [0.25, 1 / 3])
    weights[1] = weights[1] * 1.01
    assert scale_loss(_params_from_weights(sizes, weights)).data > 0


def test_scale_loss_averages_over_generated_networks():
    spec = PrimaryNetSpec([1, 2])
    flat = np.zeros((2, spec.total))
    flat[0, spec.slices[0][0]] = [1.0, 1.0]
    flat[1, spec.slices[0][0]] = [2.0, 0.0]
    assert scale_loss(GeneratedParams(Tensor(flat), spec)).data == pytest.approx(0.5)


def test_minimising_scale_loss_reaches_xavier_targets(rng):
    """Frozen encodings; only the hypernetwork learns."""
    from hyperdfs.training import Adam, TrainConfig

    spec = PrimaryNetSpec([10, 64, 64, 2])
    hyper = HyperNet(16, spec, rng, hidden=32)
    z = Tensor(rng.normal(size=(8, 16)) / 4.0)
    opt = Adam(list(hyper.named_parameters()), TrainConfig(weight_decay=0.0))
    for _ in range(500):
        opt.zero_grad()
        with Tape() as tape:
            loss = scale_loss(generate(z, hyper))
        tape.backward(loss)
        opt.step(1e-2)
    ms = layer_mean_squares(generate(z, hyper)).mean(axis=0)
    targets = np.array([spec.xavier_target(layer) for layer in range(3)])
    assert np.all(np.abs(ms - targets) / targets < 0.01)


def test_scale_loss_rejects_negative_lambda():
    with pytest.raises(ValueError):
        scale_loss(_params_from_weights([1, 2], [[1.0, 1.0]]), -1.0)


# ----------------------------------------------------------- collapse loss


def test_collapse_loss_examples():
    z = Tensor(np.tile([[0.6, 0.8]], (3, 1)))
    theta = Tensor(np.tile([[1.0, 2.0, 3.0]], (3, 1)))
    assert abs(collapse_loss(z, theta).data) < 1e-30
    d_out = 4
    u = np.zeros((2, d_out))
    u[0, 1], u[1, 1] = 1.0, -1.0
    theta = Tensor(np.zeros((2, 3)))
    assert collapse_loss(Tensor(u), theta).data == pytest.approx(-1.0 / d_out)


def test_collapse_loss_single_subset_is_zero():
    assert collapse_loss(Tensor(np.ones((1, 3))), Tensor(np.ones((1, 2)))).data == 0.0


def test_collapse_loss_monotone_and_permutation_invariant(rng):
    z, theta = rng.normal(size=(5, 3)), rng.normal(size=(5, 4))
    base = collapse_loss(Tensor(z), Tensor(theta)).data
    spread = z.copy()
    spread[:, 1] = (spread[:, 1] - spread[:, 1].mean()) * 1.5 + spread[:, 1].mean()
    assert collapse_loss(Tensor(spread), Tensor(theta)).data < base
    perm = rng.permutation(5)
    assert collapse_loss(Tensor(z[perm]), Tensor(theta[perm])).data == pytest.approx(base, rel=1e-14)


def test_collapse_loss_uses_population_variance(rng):
    z, theta = rng.normal(size=(6, 3)), rng.normal(size=(6, 2))
    expected = -z.var(axis=0).mean() - theta.var(axis=0).mean()
    assert collapse_loss(Tensor(z), Tensor(theta)).data == pytest.approx(expected, rel=1e-13)


# ------------------------------------------------------------- predictors


def _tiny_cfg(M=5, C=3):
    return ModelConfig(M, C, d=8, d_out=8, heads=2, num_inducing=2, num_blocks=1, primary_hidden=6,
                       hyper_hidden=12)


def test_forward_groups_routes_each_group_through_its_network(rng):
    model = HyperDFSPredictor(_tiny_cfg(), rng)
    masks = np.array([[1, 0, 1, 0, 0], [0, 1, 1, 1, 1]], dtype=bool)
    xs = [rng.normal(size=(3, 5)), rng.normal(size=(2, 5))]
    logits, aux = model.forward_groups(xs, masks.astype(float))
    assert aux.params.count == 2 and logits.shape == (5, 3)
    ref = np.concatenate([model.predict_logits(x, m) for x, m in zip(xs, masks)])
    np.testing.assert_allclose(logits.data, ref, rtol=1e-12)


def test_predict_logits_matches_row_forward(rng):
    model = HyperDFSPredictor(_tiny_cfg(), rng)
    x = rng.normal(size=(9, 5))
    masks = rng.random((9, 5)) < 0.6
    masks[:, 0] = True
    masks[3] = masks[0]
    rows, _ = model.forward_rows(Tensor(x), masks.astype(float))
    np.testing.assert_allclose(model.predict_logits(x, masks, chunk=4), rows.data, rtol=1e-12)


def test_baseline_consumes_input_and_mask_concatenation(rng):
    base = MaskConcatBaseline(_tiny_cfg(), rng)
    assert base.mlp.sizes == [10, 6, 6, 3]  # same widths as the primary network
    x = rng.normal(size=(4, 5))
    m = rng.random((4, 5)) < 0.5
    expected = base.mlp(Tensor(np.hstack([x, m.astype(float)]))).data
    np.testing.assert_allclose(base.predict_logits(x, m), expected, rtol=1e-14)


# --------------------------------------------------------------- propcheck


def test_prop1_presence_grows_linearly_with_cardinality():
    table = prop1_experiment("presence", 20, trials=2000, rng=np.random.default_rng(0))
    _, r2 = through_origin_r2(table.cardinalities, table.means)
    assert r2 > 0.99


def test_prop1_normalised_presence_is_flat():
    table = prop1_experiment("presence-l2", 20, trials=2000, rng=np.random.default_rng(1))
    assert flatness_ratio(table.means) < 1.05


@pytest.mark.parametrize("M", [5, 10, 20])
def test_prop1_absence_with_matched_variance_is_flat(M):
    table = prop1_experiment("absence", M, trials=2000, rng=np.random.default_rng(M))
    assert flatness_ratio(table.means) < 1.05


def test_prop1_absence_with_mismatched_variance_drifts():
    table = prop1_experiment("absence", 20, trials=2000, rng=np.random.default_rng(2), absent_var_ratio=4.0)
    slope, _, p = slope_ttest(table, alternative="less")
    assert slope < 0 and p < 0.01


def test_prop1_low_power_warning_and_csv(tmp_path):
    with pytest.warns(LowPowerWarning):
        table = prop1_experiment("presence", 4, trials=20, rng=np.random.default_rng(0))
    table.write_csv(tmp_path / "t.csv")
    rows = list(csv.DictReader(open(tmp_path / "t.csv", encoding="utf-8")))
    assert list(rows[0]) == ["variant", "M", "cardinality", "mean_sq_norm", "stderr", "trials"]
    assert [int(r["cardinality"]) for r in rows] == [1, 2, 3, 4] and rows[0]["trials"] == "20"
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        prop1_experiment("presence", 4, trials=100, rng=np.random.default_rng(0))
    with pytest.raises(ValueError):
        prop1_experiment("bogus", 4)


def test_through_origin_fit_on_exact_line():
    k, r2 = through_origin_r2(np.arange(1, 6), 3.0 * np.arange(1, 6))
    assert k == pytest.approx(3.0) and r2 == pytest.approx(1.0)
