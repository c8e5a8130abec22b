import math

import numpy as np
import pytest
import torch

from CLfD.exceptions import ConfigError, NonFiniteError, ShapeError
from CLfD.losses import cosine_sim, nt_xent_batch, nt_xent_pair, sample_negatives, triplet_batch_loss, triplet_loss


def naive_nt_xent(z, tau):
    """Literal double loop over the interleaved layout."""
    rows = len(z)
    unit = [v / np.linalg.norm(v) for v in z]
    total = 0.0
    for a in range(rows):
        p = a ^ 1
        denominator = sum(math.exp(unit[a] @ unit[k] / tau) for k in range(rows) if k != a)
        total += -math.log(math.exp(unit[a] @ unit[p] / tau) / denominator)
    return total / rows


def test_cosine_sim_orthogonal_and_identical():
    assert float(cosine_sim([1.0, 0.0], [0.0, 1.0])) == pytest.approx(0.0)
    assert float(cosine_sim([2.0, 3.0], [2.0, 3.0])) == pytest.approx(1.0)


def test_cosine_sim_zero_vector():
    with pytest.raises(NonFiniteError):
        cosine_sim([0.0, 0.0], [1.0, 0.0])


def test_single_pair_identical_rows_is_zero():
    # with one pair the only other row is the positive
    assert float(nt_xent_batch([[1.0, 0.0], [1.0, 0.0]])) == pytest.approx(0.0, abs=1e-12)


def test_two_pairs_hand_computed():
    z = [[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]
    expected = -math.log(math.exp(2) / (math.exp(2) + 2))
    assert float(nt_xent_batch(z, tau=0.5)) == pytest.approx(expected, rel=1e-9)
    assert float(nt_xent_pair(0, 1, z, tau=0.5)) == pytest.approx(expected, rel=1e-9)


def test_matches_naive_loop_on_random_layouts():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 9))
        dim = int(rng.integers(2, 17))
        z = rng.normal(size=(2 * n, dim))
        tau = float(rng.uniform(0.1, 1.0))
        fast = float(nt_xent_batch(torch.from_numpy(z), tau))
        assert abs(fast - naive_nt_xent(z, tau)) < 1e-6


def test_scale_invariance():
    z = np.random.default_rng(1).normal(size=(6, 4))
    assert float(nt_xent_batch(z)) == pytest.approx(float(nt_xent_batch(3.0 * z)), rel=1e-10)


def test_odd_row_count():
    with pytest.raises(ShapeError):
        nt_xent_batch(np.ones((3, 4)))


def test_non_positive_temperature():
    with pytest.raises(ConfigError):
        nt_xent_batch(np.ones((2, 4)), tau=0.0)


def test_large_similarity_over_small_tau_stays_finite():
    z = np.random.default_rng(2).normal(size=(8, 5))
    assert math.isfinite(float(nt_xent_batch(z, tau=1e-4)))


def test_triplet_hinge_cases():
    a = [[0.0, 0.0]]
    assert float(triplet_loss(a, a, [[10.0, 0.0]], margin=0.2)) == 0.0
    assert float(triplet_loss(a, [[1.0, 0.0]], a, margin=0.2)) == pytest.approx(1.2)


def test_sample_negatives_excludes_own_pair():
    rng = np.random.default_rng(0)
    for _ in range(200):
        negatives = sample_negatives(4, rng)
        for k, row in enumerate(negatives):
            assert row not in (2 * k, 2 * k + 1)
            assert 0 <= row < 8


def test_sample_negatives_needs_two_pairs():
    with pytest.raises(ConfigError):
        sample_negatives(1, np.random.default_rng(0))


def test_triplet_batch_loss_uses_interleaved_rows():
    h = torch.tensor([[0.0, 0.0], [0.0, 0.0], [5.0, 0.0], [5.0, 0.0]])
    assert float(triplet_batch_loss(h, np.array([2, 0]), margin=0.2)) == 0.0


def test_cosine_sim_hand_value():
    assert float(cosine_sim([1.0, 2.0], [2.0, 1.0])) == pytest.approx(0.8)


def test_all_rows_identical_gives_log_of_other_rows():
    # two pairs: every logit ties, so each row scores its positive against 3 others
    assert float(nt_xent_batch(np.ones((4, 3)))) == pytest.approx(math.log(3), rel=1e-10)


def test_per_row_scale_invariance():
    z = np.random.default_rng(3).normal(size=(8, 4))
    scales = np.array([0.5, 2.0, 3.0, 10.0, 0.1, 1.0, 7.0, 0.25])[:, None]
    assert float(nt_xent_batch(z * scales)) == pytest.approx(float(nt_xent_batch(z)), rel=1e-10)


def test_pair_permutation_invariance():
    rng = np.random.default_rng(4)
    z = rng.normal(size=(10, 6))
    order = rng.permutation(5)
    permuted = z.reshape(5, 2, 6)[order].reshape(10, 6)
    swapped = z.reshape(5, 2, 6)[:, ::-1].reshape(10, 6)
    base = float(nt_xent_batch(z))
    assert float(nt_xent_batch(permuted)) == pytest.approx(base, rel=1e-10)
    assert float(nt_xent_batch(swapped)) == pytest.approx(base, rel=1e-10)


def test_loss_falls_as_pairs_separate():
    losses = []
    for angle in np.linspace(0.1, 3.0, 12):
        first = [1.0, 0.0]
        second = [math.cos(angle), math.sin(angle)]
        losses.append(float(nt_xent_batch([first, first, second, second])))
    assert all(later < earlier for earlier, later in zip(losses, losses[1:]))


def test_triplet_loss_falls_as_negative_moves_away():
    losses = [float(triplet_loss([[0.0, 0.0]], [[0.5, 0.0]], [[d, 0.0]], margin=1.0)) for d in np.linspace(0, 2, 9)]
    assert all(later <= earlier for earlier, later in zip(losses, losses[1:]))
    assert losses[0] > losses[-1]


def test_triplet_collapsed_embedding_costs_margin():
    a = [[0.3, -1.2, 2.0]]
    assert float(triplet_loss(a, a, a, margin=0.3)) == pytest.approx(0.3)


def test_triplet_hand_example_is_zero():
    assert float(triplet_loss([[0.0, 0.0]], [[1.0, 0.0]], [[0.0, 2.0]], margin=0.5)) == 0.0
