import numpy as np
import pytest

from causalex.coreset import (default_kappa, greedy_select, minibatch_similarity, sample_diversity,
                              sample_gradient, select_topk)
from causalex.env import TransitionBatch, generate_env, rollout
from causalex.world_model import Arch, init_model


@pytest.fixture(scope="module")
def setup():
    env = generate_env(3, 1, 0.5, seed=0)
    data = rollout(env, 40, seed=1)
    model = init_model(np.ones((4, 3), int), Arch(3, 1, (6, 4)), seed=2)
    return env, data, model


def test_similarity_examples():
    g = np.array([1.0, -2.0, 0.5])
    assert minibatch_similarity(g, g) == pytest.approx(1.0)
    assert minibatch_similarity(-g, g) == pytest.approx(-1.0)
    assert minibatch_similarity(np.zeros(3), g) == 0.0
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal(3), rng.standard_normal(3)
    hand = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]) / (np.sqrt((a * a).sum()) * np.sqrt((b * b).sum()))
    assert minibatch_similarity(a, b) == pytest.approx(hand, abs=1e-12)


def test_diversity_examples():
    g = np.array([1.0, 0.0])
    assert sample_diversity(g, [g, g]) == pytest.approx(-1.0)
    assert sample_diversity(g, [np.array([0.0, 1.0]), np.array([0.0, -3.0])]) == pytest.approx(0.0)
    half = np.array([0.5, np.sqrt(3) / 2])
    minus_half = np.array([-0.5, np.sqrt(3) / 2])
    assert sample_diversity(g, [half, minus_half]) == pytest.approx(0.0, abs=1e-12)
    assert sample_diversity(g, [np.zeros(2)]) == 0.0
    assert sample_diversity(g, [np.zeros(2), -g]) == pytest.approx(1.0)


def test_zero_error_sample_has_zero_gradient(setup):
    _, data, model = setup
    s = data.subset([0])
    target = model.predict(s.inputs)
    exact = TransitionBatch(s.prev_states, s.actions, target)
    assert not sample_gradient(model, exact).any()


def test_sample_gradient_finite_difference_four_params():
    # linear arch with n=1, c=2: head weights (1, 3) plus one bias = 4 parameters
    model = init_model(np.ones((3, 1), int), Arch.linear(1, 2), seed=0)
    assert len(model.params) == 4
    rng = np.random.default_rng(1)
    sample = TransitionBatch(rng.standard_normal((1, 1)), rng.standard_normal((1, 2)), rng.standard_normal((1, 1)))
    g = sample_gradient(model, sample)
    h = 1e-6
    fd = np.zeros(4)
    for k in range(4):
        up, down = model.copy(), model.copy()
        up.params.flat[k] += h
        down.params.flat[k] -= h
        fd[k] = (up.evaluate(sample) - down.evaluate(sample)) / (2 * h)
    np.testing.assert_allclose(g, fd, rtol=1e-5)


def test_gradient_order_stable(setup):
    _, data, model = setup
    a = sample_gradient(model, data.subset([3]))
    b = sample_gradient(model, data.subset([3]))
    np.testing.assert_array_equal(a, b)


def _exhaustive_greedy(G, k, lam):
    chosen = []
    mean = G.mean(axis=0)
    for _ in range(k):
        best, best_score = None, -np.inf
        for i in range(len(G)):
            if i in chosen:
                continue
            div = sample_diversity(G[i], [G[j] for j in chosen]) if chosen else 0.0
            score = minibatch_similarity(G[i], mean) + lam * div
            if score > best_score + 1e-12:
                best, best_score = i, score
        chosen.append(best)
    return chosen


def test_ten_sample_buffer_matches_exhaustive_oracle(setup):
    _, data, model = setup
    buf = data.subset(np.arange(10))
    G = model.per_sample_gradients(buf)
    idx, scores = greedy_select(G, 3, 1.0)
    assert list(idx) == _exhaustive_greedy(G, 3, 1.0)
    for s in scores:
        assert s.combined == pytest.approx(s.similarity + s.diversity)
        assert -1 - 1e-12 <= s.similarity <= 1 + 1e-12
    sel = select_topk(buf, model, 3)
    np.testing.assert_array_equal(sel.step_index, np.sort(buf.step_index[idx]))


def test_kappa_at_least_buffer_is_identity(setup):
    _, data, model = setup
    sel = select_topk(data, model, len(data))
    np.testing.assert_array_equal(sel.inputs, data.inputs)
    assert len(select_topk(data, model, 10 * len(data))) == len(data)
    with pytest.raises(ValueError):
        select_topk(data, model, 0)


def test_selection_permutation_invariant_and_unique(setup):
    _, data, model = setup
    a = select_topk(data, model, 12)
    perm = np.random.default_rng(3).permutation(len(data))
    b = select_topk(data.subset(perm), model, 12)
    np.testing.assert_array_equal(a.step_index, b.step_index)
    assert len(np.unique(a.step_index)) == 12


def test_ties_go_to_earliest_step():
    G = np.array([[1.0, 0.0]] * 4)
    idx, _ = greedy_select(G, 2, 1.0)
    assert list(idx) == [0, 1]


def test_scale_invariance():
    G = np.random.default_rng(4).standard_normal((30, 5))
    a, _ = greedy_select(G, 8, 1.0)
    b, _ = greedy_select(7.5 * G, 8, 1.0)
    np.testing.assert_array_equal(a, b)


def test_default_kappa():
    assert default_kappa(5000) == 350
    assert default_kappa(1000, synthetic=False) == 700
