"""Exit criteria.  Each test records one PASS/FAIL line, then asserts at the stated tolerance."""

import numpy as np
import pytest

from causalex.config import parse_config
from causalex.discovery import graph_metrics
from causalex.env import TransitionBatch, make_env
from causalex.explorer import build_env, offline_discovery, run_exploration
from causalex.kci import kci_unconditional
from causalex.metrics import ExperimentTrace, sample_efficiency, smooth
from causalex.nets import MLP, Adam
from causalex.theory import ensemble, summarize
from causalex.world_model import Arch, dense_predict, init_model

pytestmark = pytest.mark.acceptance

SEEDS = range(10)


def seeded(**overrides):
    return parse_config(overrides=overrides)


# 1 ----------------------------------------------------------------------------

def test_online_discovery_quality(verdict):
    rows = []
    for seed in SEEDS:
        res = run_exploration(seeded(**{"env.seed": seed, "explorer.seed": seed}))
        first = res.discoveries[0]
        rows.append(graph_metrics(first.estimate, res.env.active(1000).graph, first.edge_scores))
    f1, prec, auc = (float(np.mean([r[k] for r in rows])) for k in ("f1", "precision", "auc"))
    ok = f1 >= 0.83 and prec >= 0.90 and auc >= 0.95
    verdict(1, ok, f"mean F1 {f1:.3f} (>= 0.83), precision {prec:.3f} (>= 0.90), AUC {auc:.3f} (>= 0.95)")
    assert f1 >= 0.83
    assert prec >= 0.90
    assert auc >= 0.95


# 2 ----------------------------------------------------------------------------

@pytest.mark.slow
def test_coreset_speedup(verdict):
    cfg = seeded()
    env = build_env(cfg)
    coreset = offline_discovery(env, cfg, 3000, sampling=True, seed=0)
    full = offline_discovery(env, cfg, 3000, sampling=False, seed=0)
    speedup = full["wall_time_s"] / coreset["wall_time_s"]
    ok = speedup >= 5 and coreset["f1"] >= full["f1"] - 0.05
    verdict(2, ok, f"speedup {speedup:.1f}x ({full['wall_time_s']:.1f}s vs {coreset['wall_time_s']:.1f}s, >= 5x); "
                   f"F1 coreset {coreset['f1']:.3f} vs full {full['f1']:.3f} (>= full - 0.05)")
    assert speedup >= 5
    assert coreset["f1"] >= full["f1"] - 0.05


# 3 ----------------------------------------------------------------------------

def test_theorem_verification(verdict):
    reports = ensemble(count=100, seed=0, steps=100, mode="masked_trajectory")
    s = summarize(reports)
    contraction = s["contraction_all"]
    pyth = s["pythagorean_max_rel_error"] <= 1e-10
    ineq = s["ratio_bound_all"] and s["envelope_all"]
    loss_ratio = s["loss_ratio_le_1_all"]
    bound1_fail = sum(not r.all_ratio_bound for r in reports)
    bound2_fail = sum(not r.all_envelope for r in reports)
    verdict(3, contraction and pyth and ineq and loss_ratio,
            f"(a) contraction {contraction}; (b) Pythagorean max rel err {s['pythagorean_max_rel_error']:.1e}; "
            f"(c) inequality 1 violated in {bound1_fail}/100, envelope violated in {bound2_fail}/100; "
            f"(d) loss_ratio > 1 in {s['loss_ratio_violations']}/100 (max {s['loss_ratio_max']:.3g}); "
            f"density-based bound holds in {s['density_bound_fraction']:.0%} (reported only)")
    assert contraction
    assert pyth
    assert ineq
    assert loss_ratio


# 4 ----------------------------------------------------------------------------

def test_causal_vs_dense_sample_efficiency(verdict):
    wins = 0
    for seed in SEEDS:
        curves = {}
        for mode in ("truth", "dense"):
            cfg = seeded(**{"explorer.graph_mode": mode, "env.seed": seed, "explorer.seed": seed})
            curves[mode] = run_exploration(cfg).trace["holdout_loss"]
        a, b = smooth(curves["truth"]), smooth(curves["dense"])
        floor, ceiling = max(a.min(), b.min()), min(a[0], b[0])
        faster = True
        for q in np.linspace(0.1, 0.9, 9):
            eff = sample_efficiency(curves["truth"], curves["dense"], floor + q * (ceiling - floor))
            faster &= eff.reached and eff.steps_a < eff.steps_b
        wins += faster
    verdict(4, wins >= 8, f"causal model first to every common threshold in {wins}/10 seeds (>= 8)")
    assert wins >= 8


# 5 ----------------------------------------------------------------------------

def _mlp_twin(model):
    twin = MLP([model.arch.input_dim, *model.arch.hidden, model.arch.n])
    for k in range(len(model.arch.hidden)):
        twin.params[f"W{k}"][...] = model.params[f"W{k}"]
        twin.params[f"b{k}"][...] = model.params[f"b{k}"]
    last = len(model.arch.hidden)
    twin.params[f"W{last}"][...] = model.params["head_w"].T
    twin.params[f"b{last}"][...] = model.params["head_b"]
    return twin


def test_full_mask_degenerates_to_dense(verdict):
    rng = np.random.default_rng(0)
    arch = Arch(6, 2, (32, 8), "relu")
    model = init_model(np.ones((8, 6), int), arch, seed=0)
    twin = _mlp_twin(model)
    opt = Adam(model.optimizer.lr)
    X = rng.standard_normal((400, 8))
    Y = rng.standard_normal((400, 6))
    bitwise, max_param_gap = True, 0.0
    for _ in range(200):
        idx = rng.choice(400, 64, replace=False)
        batch = TransitionBatch(X[idx, :6], X[idx, 6:], Y[idx])
        bitwise &= np.array_equal(model.predict(X), dense_predict(model, X))
        out, cache = twin.forward(X[idx], keep=True)
        opt.step(twin.params.flat, twin.backward(cache, (out - Y[idx]) / 64))
        model.train_step(batch)
        gap = np.abs(_mlp_twin(model).params.flat - twin.params.flat).max()
        max_param_gap = max(max_param_gap, gap / np.abs(twin.params.flat).max())

    # end to end: the true graph is complete, so causal exploration is the dense ablation
    env = make_env(np.ones((12, 10), int), "linear", seed=0)
    traces = [run_exploration(seeded(**{"explorer.graph_mode": mode, "explorer.horizon": 300}), env=env).trace
              for mode in ("truth", "dense")]
    # metadata differs by the graph_mode setting itself; the recorded rows must not
    same_run = ExperimentTrace(traces[0].columns).to_csv() == ExperimentTrace(traces[1].columns).to_csv()
    ok = bitwise and same_run and max_param_gap <= 1e-12
    verdict(5, ok, f"masked vs dense predictions bit-identical over 200 steps: {bitwise}; "
                   f"independent dense twin max relative parameter gap {max_param_gap:.1e}; "
                   f"truth-mode and dense-mode runs byte-identical: {same_run}")
    assert bitwise
    assert same_run
    assert max_param_gap <= 1e-12


# 6 ----------------------------------------------------------------------------

def _fd_check(model, batch, h=1e-6):
    _, grad = model.loss_and_grad(batch)
    worst = 0.0
    for k in range(len(model.params)):
        up, down = model.copy(), model.copy()
        up.params.flat[k] += h
        down.params.flat[k] -= h
        fd = (up.evaluate(batch) - down.evaluate(batch)) / (2 * h)
        worst = max(worst, abs(grad[k] - fd) / max(abs(fd), 1e-6))
    return worst


def test_mask_and_gradient_correctness(verdict):
    rng = np.random.default_rng(6)
    worst_rel, leak = 0.0, 0.0
    for trial in range(12):
        n, c = int(rng.integers(1, 4)), int(rng.integers(1, 3))
        D = (rng.random((n + c, n)) < 0.5).astype(int)
        arch = [Arch(n, c, (5, 3)), Arch(n, c, (4,), "relu"), Arch.linear(n, c)][trial % 3]
        model = init_model(D, arch, seed=trial)
        model.params.flat[:] += 0.1 * rng.standard_normal(len(model.params))
        batch = TransitionBatch(rng.standard_normal((5, n)), rng.standard_normal((5, c)), rng.standard_normal((5, n)))
        worst_rel = max(worst_rel, _fd_check(model, batch))
        G = model.per_sample_gradients(batch)
        _, grad = model.loss_and_grad(batch)
        worst_rel = max(worst_rel, float(np.abs(G.mean(axis=0) - grad).max() / max(np.abs(grad).max(), 1e-12)))
        # input Jacobian of blocked pairs by central differences
        x = batch.inputs
        for j in range(n + c):
            e = np.zeros(n + c)
            e[j] = 1e-3
            jac = (model.predict(x + e) - model.predict(x - e)) / 2e-3
            leak = max(leak, float(np.abs(jac[:, D[j] == 0]).max(initial=0.0)))
    net = MLP([3, 6, 2], seed=1)
    net.params.flat[:] += 0.1 * rng.standard_normal(len(net.params))
    x, w = rng.standard_normal((4, 3)), rng.standard_normal((4, 2))
    out, cache = net.forward(x, keep=True)
    grad = net.backward(cache, w)
    for k in range(len(net.params)):
        net.params.flat[k] += 1e-6
        up = np.sum(net(x) * w)
        net.params.flat[k] -= 2e-6
        down = np.sum(net(x) * w)
        net.params.flat[k] += 1e-6
        worst_rel = max(worst_rel, abs(grad[k] - (up - down) / 2e-6) / max(abs(grad[k]), 1e-6))
    ok = worst_rel < 1e-4 and leak == 0.0
    verdict(6, ok, f"worst relative gradient error {worst_rel:.1e} (< 1e-4); blocked-pair derivative max {leak:.1e}")
    assert worst_rel < 1e-4
    assert leak == 0.0


# 7 ----------------------------------------------------------------------------

def test_kci_calibration(verdict):
    rng = np.random.default_rng(7)
    rejections = sum(not kci_unconditional(rng.standard_normal(300), rng.standard_normal(300)).independent(0.05)
                     for _ in range(500))
    type1 = rejections / 500
    hits = 0
    for _ in range(200):
        x = rng.standard_normal(300)
        hits += not kci_unconditional(x, x ** 3 + rng.standard_normal(300)).independent(0.05)
    power = hits / 200
    ok = abs(type1 - 0.05) <= 0.02 and power > 0.9
    verdict(7, ok, f"type-I error {type1:.3f} (0.05 +/- 0.02); power on cubic dependence {power:.3f} (> 0.9)")
    assert abs(type1 - 0.05) <= 0.02
    assert power > 0.9


# 8 ----------------------------------------------------------------------------

def test_active_reward_telescoping(verdict):
    worst = 0.0
    for overrides in ({}, {"explorer.episodes": 3, "explorer.horizon": 400, "explorer.seed": 1},
                      {"explorer.graph_mode": "truth", "env.change_at": 500, "explorer.seed": 2}):
        res = run_exploration(seeded(**overrides))
        for ep in res.summary["episodes"]:
            rows = res.trace["episode"] == ep["episode"]
            total = float(np.sum(res.trace["r_a"][rows]))
            worst = max(worst, abs(total - (ep["initial_holdout"] - ep["final_holdout"])))
    verdict(8, worst <= 1e-8, f"max |sum r_a - (initial - final)| {worst:.1e} (<= 1e-8)")
    assert worst <= 1e-8


# 9 ----------------------------------------------------------------------------

@pytest.mark.slow
def test_underestimation_recovery(verdict):
    gaps = []
    for seed in range(3):
        finals = {}
        for mode, under in (("truth", False), ("discover", True)):
            cfg = seeded(**{"explorer.graph_mode": mode, "env.underestimation": under, "env.seed": seed,
                            "explorer.seed": seed, "explorer.episodes": 3})
            finals[mode] = float(np.mean(run_exploration(cfg).trace["holdout_loss"][-50:]))
        gaps.append(abs(finals["discover"] / finals["truth"] - 1.0))
    worst = max(gaps)
    verdict(9, worst <= 0.10, f"final held-out error vs correct-graph run, worst relative gap {worst:.3f} "
                              f"over 3 seeds (<= 0.10)")
    assert worst <= 0.10


# 10 ---------------------------------------------------------------------------

def test_determinism(verdict, tmp_path):
    from causalex import cli
    same = True
    for k, args in enumerate((["--horizon", "400", "--period", "200"],
                              ["--horizon", "300", "--graph-mode", "dense", "--seed", "5"],
                              ["--horizon", "300", "--period", "150", "--underestimation", "--reward", "nll"])):
        outs = []
        for rep in range(2):
            out = tmp_path / f"{k}_{rep}"
            assert cli.main(["explore", *args, "--out-dir", str(out)]) == 0
            outs.append((out / "trace.csv").read_bytes())
        same &= outs[0] == outs[1]
    verdict(10, same, f"identical (config, seed) pairs gave byte-identical traces: {same}")
    assert same
