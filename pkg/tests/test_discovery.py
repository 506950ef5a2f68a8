import numpy as np
import pytest

from causalex.discovery import graph_metrics, roc_auc, timelagged_pc
from causalex.env import TransitionBatch, two_state_graph, make_env, rollout


@pytest.fixture(scope="module")
def two_state_data():
    env = make_env(two_state_graph(), "linear", seed=3)
    return env, rollout(env, 350, seed=0)


def test_two_state_environment_recovered_at_350(two_state_data):
    env, data = two_state_data
    report = timelagged_pc(data)
    np.testing.assert_array_equal(report.estimate, two_state_graph())
    assert report.tests_run > 0 and report.wall_time > 0


def test_edge_scores_in_unit_interval(two_state_data):
    _, data = two_state_data
    report = timelagged_pc(data)
    assert ((report.edge_scores >= 0) & (report.edge_scores <= 1)).all()
    # surviving edges score 1; removed edges score 1 - p of the accepted test
    assert (report.edge_scores[report.estimate == 1] == 1).all()
    for (u, v), S in report.sepsets.items():
        assert report.estimate[u, v] == 0
        assert u not in S


def _independent_batch(m=200, n=3, c=1, seed=0):
    rng = np.random.default_rng(seed)
    return TransitionBatch(rng.standard_normal((m, n)), rng.standard_normal((m, c)),
                           rng.standard_normal((m, n)))


def test_alpha_one_keeps_every_edge():
    # independence needs p > alpha, which never happens at alpha = 1
    report = timelagged_pc(_independent_batch(), alpha=1.0)
    assert report.estimate.all()


def test_alpha_zero_removes_every_edge_on_independent_data():
    report = timelagged_pc(_independent_batch(), alpha=0.0)
    assert not report.estimate.any()


def test_estimate_invariant_to_sample_order(two_state_data):
    _, data = two_state_data
    perm = np.random.default_rng(1).permutation(len(data))
    a = timelagged_pc(data)
    b = timelagged_pc(data.subset(perm))
    np.testing.assert_array_equal(a.estimate, b.estimate)


def test_max_cond_size_zero_only_marginal_tests(two_state_data):
    _, data = two_state_data
    report = timelagged_pc(data, max_cond_size=0)
    assert all(len(S) == 0 for S in report.sepsets.values())
    assert report.tests_run == 3 * 2


def test_needs_thirty_samples():
    with pytest.raises(ValueError):
        timelagged_pc(_independent_batch(m=20))


def test_graph_metrics_identity_and_complement():
    rng = np.random.default_rng(0)
    truth = np.zeros((6, 4), dtype=int)
    truth.flat[rng.choice(24, 12, replace=False)] = 1
    m = graph_metrics(truth, truth)
    assert m["precision"] == m["recall"] == m["f1"] == 1.0
    assert graph_metrics(1 - truth, truth)["f1"] == 0.0


def test_graph_metrics_empty_truth():
    empty = np.zeros((3, 2), dtype=int)
    assert graph_metrics(empty, empty)["precision"] == 1.0
    assert graph_metrics(np.ones((3, 2), dtype=int), empty)["precision"] == 0.0


def test_graph_metrics_counts():
    truth = np.array([[1, 0], [0, 1], [1, 1]])
    est = np.array([[1, 1], [0, 0], [1, 1]])
    m = graph_metrics(est, truth)
    assert (m["tp"], m["fp"], m["fn"]) == (3, 1, 1)
    assert m["precision"] == pytest.approx(0.75)
    assert m["recall"] == pytest.approx(0.75)


def test_roc_auc_against_pairwise_oracle():
    rng = np.random.default_rng(2)
    labels = rng.random(40) < 0.4
    scores = np.round(rng.random(40), 1)  # ties on purpose
    pos, neg = scores[labels], scores[~labels]
    oracle = np.mean([(p > q) + 0.5 * (p == q) for p in pos for q in neg])
    assert roc_auc(labels, scores) == pytest.approx(oracle, abs=1e-12)
    assert np.isnan(roc_auc(np.ones(5, bool), np.arange(5.0)))
