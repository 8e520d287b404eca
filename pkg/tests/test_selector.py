import csv

import numpy as np
import pytest
from scipy import stats
from scipy.special import softmax

from hyperdfs import autodiff as ad
from hyperdfs.autodiff import Tape, Tensor
from hyperdfs.data import KnowledgeStatus
from hyperdfs.selector import (
    NoCandidateError,
    SelectorNet,
    gumbel_st_sample,
    mask_scores,
    random_rollout,
    rollout,
    score,
    select_greedy,
    write_trajectory_csv,
)


def random_net(M=5, seed=0):
    """A selector with a nonzero head so that scores differ between features."""
    r = np.random.default_rng(seed)
    net = SelectorNet(M, r, hidden=8)
    for p in net.parameters():
        p.data[...] = r.normal(scale=0.5, size=p.shape)
    return net


def check_trajectory(traj, mask0):
    B, tau = traj.indices.shape
    assert len(traj.masks) == tau + 1 and np.array_equal(traj.masks[0], mask0)
    for b in range(B):
        assert len(set(traj.indices[b])) == tau
        assert not mask0[b, traj.indices[b]].any()
    for t in range(tau):
        expected = traj.masks[t].copy()
        expected[np.arange(B), traj.indices[:, t]] = True
        assert np.array_equal(traj.masks[t + 1], expected)
    assert np.array_equal(traj.masks[-1].sum(axis=1), mask0.sum(axis=1) + tau)
    assert np.array_equal(traj.mask.data > 0.5, traj.masks[-1])


# ------------------------------------------------------------------ score


def test_score_is_deterministic_and_starts_uniform(rng):
    net = SelectorNet(6, rng)
    x = rng.normal(size=(3, 6))
    m = rng.random((3, 6)) < 0.5
    assert np.array_equal(score(x, m, net).data, np.zeros((3, 6)))
    net = random_net(6)
    assert score(x, m, net).data.tobytes() == score(x, m, net).data.tobytes()


def test_score_width_check(rng):
    with pytest.raises(ad.DimensionError):
        score(np.zeros((1, 4)), np.zeros((1, 5)), SelectorNet(5, rng))


def test_score_gradcheck(rng):
    net = random_net(4)
    x = rng.normal(size=(3, 4))
    m = (rng.random((3, 4)) < 0.5).astype(float)
    y = rng.integers(0, 4, 3)
    f = lambda: ad.cross_entropy(score(x, m, net), y)  # noqa: E731
    assert ad.kink_margin(f) > 1e-4
    assert ad.finite_diff_check(f, net.parameters()) < 1e-4


# ------------------------------------------------------------ mask_scores


def test_mask_scores_examples():
    s = np.arange(5, dtype=float)
    only3 = mask_scores(s, KnowledgeStatus(np.array([1, 1, 0, 1, 1], dtype=bool)))
    assert np.isfinite(only3).tolist() == [False, False, True, False, False]
    assert np.array_equal(mask_scores(s, KnowledgeStatus.empty(5)), s)
    p = ad.softmax(mask_scores(Tensor(s), KnowledgeStatus.from_indices(5, [0, 4])), axis=-1).data
    assert p[0] == 0.0 and p[4] == 0.0 and p.sum() == pytest.approx(1.0)
    with pytest.raises(NoCandidateError):
        mask_scores(s, KnowledgeStatus.full(5))


# ---------------------------------------------------------- select_greedy


def test_select_greedy_examples():
    s = np.array([0.1, 0.9, 0.5])
    assert select_greedy(s, KnowledgeStatus.empty(3)) == 1
    assert select_greedy(s, KnowledgeStatus.from_indices(3, [1])) == 2
    assert select_greedy(np.array([0.5, 0.5]), KnowledgeStatus.empty(2)) == 0
    with pytest.raises(NoCandidateError):
        select_greedy(s, KnowledgeStatus.full(3))


def test_greedy_is_invariant_to_monotone_score_maps(rng):
    s = rng.normal(size=(50, 7))
    m = rng.random((50, 7)) < 0.4
    m[:, 0] = False
    assert np.array_equal(select_greedy(s, m), select_greedy(2 * s + 7, m))


# ----------------------------------------------------------------- gumbel


def test_gumbel_hard_is_one_hot_at_argmax_of_perturbed(rng):
    s = rng.normal(size=(40, 6))
    m = rng.random((40, 6)) < 0.5
    m[:, 2] = False
    g = gumbel_st_sample(s, m, 0.7, rng)
    assert np.array_equal(g.index, np.argmax(g.perturbed, axis=-1))
    onehot = np.zeros((40, 6))
    onehot[np.arange(40), g.index] = 1.0
    assert np.array_equal(g.hard.data, onehot)
    assert (g.soft.data[m] == 0.0).all() and not m[np.arange(40), g.index].any()


def test_gumbel_low_temperature_soft_approaches_hard(rng):
    g = gumbel_st_sample(rng.normal(size=(20, 5)), np.zeros((20, 5), bool), 1e-4, rng)
    assert np.abs(g.soft.data - g.hard.data).max() < 1e-3


def test_gumbel_single_candidate_is_forced(rng):
    status = KnowledgeStatus(np.array([1, 1, 0, 1], dtype=bool))
    for _ in range(50):
        g = gumbel_st_sample(np.array([5.0, 3.0, -9.0, 1.0]), status, 1.0, rng)
        assert int(g.index) == 2 and g.hard.data.tolist() == [0, 0, 1, 0]


def test_gumbel_argument_checks(rng):
    with pytest.raises(ValueError):
        gumbel_st_sample(np.zeros(3), KnowledgeStatus.empty(3), 0.0, rng)
    with pytest.raises(NoCandidateError):
        gumbel_st_sample(np.zeros(3), KnowledgeStatus.full(3), 1.0, rng)


def test_gumbel_frequencies_match_masked_softmax():
    """Gumbel-max: the sampled index follows softmax of the masked scores."""
    r = np.random.default_rng(0)
    s = np.array([0.3, -1.0, 2.0, 0.0, 1.2, -0.4])
    observed = np.array([0, 1, 0, 0, 0, 1], dtype=bool)
    n = 100_000
    g = gumbel_st_sample(np.tile(s, (n, 1)), np.tile(observed, (n, 1)), 1.0, r)
    counts = np.bincount(g.index, minlength=6)
    p = softmax(np.where(observed, -np.inf, s))
    sigma = np.sqrt(n * p * (1 - p))
    assert counts[observed].sum() == 0
    assert np.all(np.abs(counts - n * p) <= 3 * sigma + 1e-12)


def test_straight_through_forward_is_hard_backward_is_soft(rng):
    s = Tensor(rng.normal(size=(1, 4)), requires_grad=True)
    w = rng.normal(size=(1, 4))
    with Tape() as tape:
        g = gumbel_st_sample(s, KnowledgeStatus.empty(4), 1.0, np.random.default_rng(1))
        out = ad.sum(g.hard * Tensor(w))
    tape.backward(out)
    assert out.data == pytest.approx(w[0, int(g.index[0])])
    p = g.soft.data[0]
    expected = p * (w[0] - (p * w[0]).sum())  # softmax Jacobian at temperature 1
    np.testing.assert_allclose(s.grad[0], expected, rtol=1e-12)


# ---------------------------------------------------------------- rollout


def test_rollout_zero_budget(rng):
    x = rng.normal(size=(3, 5))
    m0 = np.zeros((3, 5), bool)
    m0[:, 1] = True
    for traj in (rollout(x, random_net(), 0, status=m0), random_rollout(x, 0, rng, status=m0)):
        assert traj.tau == 0 and np.array_equal(traj.final_mask(), m0)


@pytest.mark.parametrize("mode", ["eval", "train"])
def test_rollout_to_exhaustion(mode, rng):
    x = rng.normal(size=(8, 5))
    traj = rollout(x, random_net(), 5, mode=mode, rng=rng)
    check_trajectory(traj, np.zeros((8, 5), bool))
    assert traj.final_mask().all()
    np.testing.assert_allclose(traj.x_tilde.data, x, rtol=0, atol=0)


def test_rollout_contracts_from_partial_status(rng):
    x = rng.normal(size=(6, 7))
    m0 = rng.random((6, 7)) < 0.3
    m0[:, :3] = False
    means = rng.normal(size=7)
    for traj in (rollout(x, random_net(7), 3, status=m0, means=means),
                 rollout(x, random_net(7), 3, status=m0, means=means, mode="train", rng=rng),
                 random_rollout(x, 3, rng, status=m0, means=means)):
        check_trajectory(traj, m0)
        final = traj.final_mask()
        np.testing.assert_array_equal(traj.x_tilde.data, np.where(final, x, means))


def test_eval_rollout_is_deterministic_and_prefix_consistent(rng):
    net = random_net(6)
    x = rng.normal(size=(10, 6))
    long = rollout(x, net, 6)
    assert np.array_equal(long.indices, rollout(x, net, 6).indices)
    for b in range(7):
        assert np.array_equal(rollout(x, net, b).indices, long.indices[:, :b])


def test_eval_rollout_rescores_after_each_step(rng):
    """Greedy choice at step t uses the state after steps < t."""
    net = random_net(5)
    x = rng.normal(size=(4, 5))
    traj = rollout(x, net, 3)
    for t in range(3):
        m = traj.masks[t]
        s = score(np.where(m, x, 0.0), m, net).data
        assert np.array_equal(select_greedy(s, m), traj.indices[:, t])


def test_train_rollout_forward_matches_hard_update(rng):
    net = random_net(5)
    x = rng.normal(size=(6, 5))
    traj = rollout(x, net, 2, mode="train", rng=rng)
    final = traj.final_mask()
    np.testing.assert_allclose(traj.x_tilde.data, np.where(final, x, 0.0), rtol=0, atol=1e-15)
    np.testing.assert_allclose(traj.mask.data, final.astype(float), rtol=0, atol=1e-15)


def test_train_rollout_connects_gradient_to_selector(rng):
    net = random_net(5)
    x = rng.normal(size=(6, 5))
    w = Tensor(rng.normal(size=(5, 2)))
    y = rng.integers(0, 2, 6)
    with Tape() as tape:
        traj = rollout(x, net, 3, mode="train", rng=rng)
        loss = ad.cross_entropy(ad.matmul(traj.x_tilde, w), y)
    tape.backward(loss)
    assert sum(float(np.abs(p.grad).sum()) for p in net.parameters() if p.grad is not None) > 0


def test_rollout_argument_checks(rng):
    x = rng.normal(size=(2, 3))
    with pytest.raises(ValueError):
        rollout(x, random_net(3), 4)
    with pytest.raises(ValueError):
        rollout(x, random_net(3), 1, mode="sample")
    with pytest.raises(ValueError):
        rollout(x, random_net(3), 1, mode="train")
    with pytest.raises(ValueError):
        random_rollout(x, 4, rng)


# --------------------------------------------------------- random policy


def test_random_rollout_full_budget_is_uniform_permutation():
    r = np.random.default_rng(3)
    n = 60_000
    traj = random_rollout(np.zeros((n, 3)), 3, r)
    codes = traj.indices @ np.array([9, 3, 1])
    counts = np.unique(codes, return_counts=True)[1]
    assert counts.size == 6 and stats.chisquare(counts).pvalue > 0.01


def test_random_rollout_step_marginals_are_uniform_over_candidates():
    r = np.random.default_rng(4)
    n, M = 100_000, 6
    m0 = np.zeros((n, M), bool)
    m0[:, 2] = True
    traj = random_rollout(np.zeros((n, M)), 2, r, status=m0)
    for t in range(2):
        counts = np.bincount(traj.indices[:, t], minlength=M)
        assert counts[2] == 0
        assert stats.chisquare(np.delete(counts, 2)).pvalue > 0.01


def test_trajectory_csv(tmp_path, rng):
    traj = rollout(rng.normal(size=(2, 4)), random_net(4), 3)
    write_trajectory_csv(traj, tmp_path / "t.csv")
    rows = list(csv.reader(open(tmp_path / "t.csv", encoding="utf-8")))
    assert rows[0] == ["sample_id", "step", "feature_index"] and len(rows) == 7
    assert [int(r[2]) for r in rows[1:4]] == traj.indices[0].tolist()
    assert [r[:2] for r in rows[4:]] == [["1", "0"], ["1", "1"], ["1", "2"]]
