"""Intrinsic rewards, the double-DQN exploration policy and the exploration loop.

The loop alternates, once per environment step: act, predict, observe,
reward, store, (every ``period`` steps) select a coreset and rediscover the
causal graph, train the world model, update the policy.

Active reward bookkeeping: after every model update the held-out set is
re-evaluated.  The reward for a transition is the difference between the two
most recent evaluations, so over one episode the active rewards telescope to
(first cached evaluation) - (last cached evaluation).  Each episode draws a
fresh held-out set and re-evaluates both cached models on it.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, dump_config
from .coreset import select_topk
from .discovery import DiscoveryReport, graph_metrics, timelagged_pc
from .env import (EnvSpec, TransitionBatch, env_to_dict, generate_env, graph_to_list, perturb_graph,
                  reset, rollout, save_env, step)
from .metrics import ExperimentTrace, TraceWriter, check_row, export_trace
from .nets import MLP, Adam
from .world_model import Arch, DivergenceError, WorldModel, init_model, training_batch

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# rewards
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RewardBreakdown:
    prediction_reward: float
    active_reward: float
    combined: float
    eta: float
    beta: float


def prediction_reward(predicted, actual, eta: float = 0.1) -> float:
    """(eta / 2) * squared prediction error."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    err = np.asarray(predicted, dtype=float) - np.asarray(actual, dtype=float)
    return 0.5 * eta * float(np.sum(err * err))


def active_reward(prev_eval: float, curr_eval: float) -> float:
    """Held-out loss drop across the last update; positive when the model improved."""
    return float(prev_eval) - float(curr_eval)


def combined_reward(r_i: float, r_a: float, beta: float) -> float:
    return r_i + beta * r_a


def nll_loss_and_reward(mean, variance, actual, eta: float = 0.1) -> tuple[float, float]:
    """Gaussian negative log-likelihood (constant term dropped) and eta/2 times it."""
    variance = np.asarray(variance, dtype=float)
    if (variance <= 0).any():
        raise ValueError("variance must be positive elementwise")
    err = np.asarray(actual, dtype=float) - np.asarray(mean, dtype=float)
    loss = float(np.sum(err * err / (2.0 * variance) + 0.5 * np.log(variance)))
    return loss, 0.5 * eta * loss


# --------------------------------------------------------------------------
# buffers
# --------------------------------------------------------------------------


class ReplayMemory:
    """Fixed-capacity ring of (s, a, r, s', done) for policy learning."""

    def __init__(self, capacity: int, state_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.states = np.zeros((capacity, state_dim))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, state_dim))
        self.dones = np.zeros(capacity, dtype=bool)
        self.size = 0
        self._pos = 0

    def __len__(self) -> int:
        return self.size

    def push(self, state, action: int, reward: float, next_state, done: bool = False) -> None:
        k = self._pos
        self.states[k] = state
        self.actions[k] = action
        self.rewards[k] = reward
        self.next_states[k] = next_state
        self.dones[k] = done
        self._pos = (k + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator):
        if self.size < batch_size:
            raise ValueError(f"memory holds {self.size} tuples, need {batch_size}")
        idx = rng.integers(0, self.size, batch_size)
        return (self.states[idx], self.actions[idx], self.rewards[idx],
                self.next_states[idx], self.dones[idx])


class TransitionStore:
    """Append-only transition data for model training and discovery."""

    def __init__(self, n: int, c: int, initial: int = 1024):
        self._prev = np.zeros((initial, n))
        self._act = np.zeros((initial, c))
        self._next = np.zeros((initial, n))
        self._step = np.zeros(initial, dtype=np.int64)
        self._aidx = np.zeros(initial, dtype=np.int64)
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def _grow(self) -> None:
        for name in ("_prev", "_act", "_next", "_step", "_aidx"):
            arr = getattr(self, name)
            new = np.zeros((2 * len(arr),) + arr.shape[1:], dtype=arr.dtype)
            new[:len(arr)] = arr
            setattr(self, name, new)

    def append(self, tr) -> None:
        if self.size == len(self._step):
            self._grow()
        k = self.size
        self._prev[k] = tr.prev_state
        self._act[k] = tr.action
        self._next[k] = tr.next_state
        self._step[k] = tr.step_index
        self._aidx[k] = tr.action_index
        self.size += 1

    def batch(self) -> TransitionBatch:
        k = self.size
        return TransitionBatch(self._prev[:k], self._act[:k], self._next[:k], self._step[:k], self._aidx[:k])


# --------------------------------------------------------------------------
# policy
# --------------------------------------------------------------------------


def policy_act(qnet, state, epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy; the greedy choice takes the lowest index among tied Q-values."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    q = np.asarray(qnet(np.asarray(state, dtype=float)[None]))[0]
    if rng.random() < epsilon:
        return int(rng.integers(len(q)))
    return int(np.argmax(q))


def policy_update(qnet: MLP, target_net: MLP, memory: ReplayMemory, gamma: float, optimizer,
                  batch_size: int, rng: np.random.Generator) -> float:
    """One double-Q step: the online net picks a', the target net scores it.

    Returns the mean squared temporal-difference error before the step.
    """
    s, a, r, s2, done = memory.sample(batch_size, rng)
    q, cache = qnet.forward(s, keep=True)
    a_next = np.argmax(qnet.forward(s2), axis=1)
    q_next = target_net.forward(s2)[np.arange(batch_size), a_next]
    target = r + gamma * np.where(done, 0.0, q_next)
    td = q[np.arange(batch_size), a] - target
    dout = np.zeros_like(q)
    dout[np.arange(batch_size), a] = td / batch_size
    grad = qnet.backward(cache, dout)
    optimizer.step(qnet.params.flat, grad)
    return float(np.mean(td * td))


class DQNAgent:
    """Online and target Q-networks (two hidden ReLU layers) with periodic sync."""

    def __init__(self, state_dim: int, num_actions: int, hidden: int = 64, lr: float = 1e-3,
                 gamma: float = 0.99, batch_size: int = 64, target_sync: int = 200, seed=0):
        self.qnet = MLP([state_dim, hidden, hidden, num_actions], seed=seed)
        self.target = self.qnet.copy()
        self.optimizer = Adam(lr)
        self.gamma = gamma
        self.batch_size = batch_size
        self.target_sync = target_sync
        self.updates = 0

    def act(self, state, epsilon: float, rng: np.random.Generator) -> int:
        return policy_act(self.qnet, state, epsilon, rng)

    def q_values(self, states) -> np.ndarray:
        return self.qnet(np.atleast_2d(states))

    def update(self, memory: ReplayMemory, rng: np.random.Generator) -> float:
        loss = policy_update(self.qnet, self.target, memory, self.gamma, self.optimizer,
                             self.batch_size, rng)
        self.updates += 1
        if self.updates % self.target_sync == 0:
            self.target.load(self.qnet)
        return loss


def epsilon_at(t: int, total: int, start: float = 1.0, end: float = 0.05, fraction: float = 0.2) -> float:
    """Linear anneal from ``start`` to ``end`` over the first ``fraction`` of ``total`` steps."""
    span = fraction * total
    if span <= 0:
        return end
    return start + (end - start) * min(1.0, t / span)


# --------------------------------------------------------------------------
# exploration loop
# --------------------------------------------------------------------------


@dataclass
class ExplorationResult:
    trace: ExperimentTrace
    summary: dict
    model: WorldModel
    env: EnvSpec
    discoveries: list[DiscoveryReport] = field(default_factory=list)


def build_arch(cfg: ExperimentConfig) -> Arch:
    n, c = cfg.env.n, cfg.env.c
    if cfg.model_arch() == "linear":
        return Arch.linear(n, c)
    return Arch(n, c, tuple(cfg.model.hidden), cfg.model.activation)


def build_env(cfg: ExperimentConfig) -> EnvSpec:
    e = cfg.env
    return generate_env(e.n, e.c, e.edge_keep_prob, e.transition, seed=e.seed,
                        change_at=e.change_at, num_actions=e.num_actions)


def _static(spec: EnvSpec) -> EnvSpec:
    return dataclasses.replace(spec, change_schedule=None)


def discover_graph(data, model: WorldModel, cfg: ExperimentConfig) -> tuple[DiscoveryReport, int]:
    """Coreset selection followed by time-lagged PC; returns the report and the selection size."""
    d = cfg.discovery
    selected = select_topk(data, model, d.kappa, d.lam, heads_only=d.heads_only)
    report = timelagged_pc(selected, alpha=d.alpha, max_cond_size=d.max_cond_size,
                           method=d.null_method, epsilon=d.epsilon)
    return report, len(selected)


class _Holdout:
    """Cached held-out evaluations of the last two models (before and after the latest update)."""

    def __init__(self, data: TransitionBatch, model: WorldModel, prev_state: tuple[np.ndarray, np.ndarray]):
        self.data = data
        self.prev = _evaluate_with(model, *prev_state, data)
        self.curr = model.evaluate(data)
        self.initial = self.prev

    def advance(self, model: WorldModel) -> None:
        self.prev, self.curr = self.curr, model.evaluate(self.data)


def _evaluate_with(model: WorldModel, flat: np.ndarray, mask: np.ndarray, data) -> float:
    saved_flat, saved_mask = model.params.flat.copy(), model.mask
    model.params.flat[:] = flat
    model.mask = mask
    try:
        return model.evaluate(data)
    finally:
        model.params.flat[:] = saved_flat
        model.mask = saved_mask


def json_safe(obj):
    """Replace NaN and infinities by None so the document is strict JSON."""
    if isinstance(obj, dict):
        return {k: json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_safe(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return float(obj) if np.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def offline_discovery(env: EnvSpec, cfg: ExperimentConfig, buffer_size: int = 3000, sampling: bool = True,
                      train_steps: int | None = None, seed=0) -> dict:
    """Discovery on a random-policy buffer, as at the first online discovery.

    A dense (all-ones mask) world model is trained one batch per collected
    transition, then the coreset is drawn from its gradients.  With
    ``sampling=False`` the whole buffer goes to the PC search.
    """
    ss = np.random.SeedSequence(seed)
    rng_data, rng_train = [np.random.default_rng(s) for s in ss.spawn(2)]
    data = rollout(env, buffer_size, seed=rng_data)
    selected_count = len(data)
    t0 = time.perf_counter()
    if sampling:
        model = init_model(np.ones_like(env.graph), build_arch(cfg), seed=seed, lr=cfg.model.lr,
                           optimizer=cfg.model.optimizer)
        for _ in range(buffer_size if train_steps is None else train_steps):
            model.train_step(training_batch(data, cfg.model.batch_size, rng_train))
        t0 = time.perf_counter()
        report, selected_count = discover_graph(data, model, cfg)
    else:
        d = cfg.discovery
        report = timelagged_pc(data, alpha=d.alpha, max_cond_size=d.max_cond_size,
                               method=d.null_method, epsilon=d.epsilon)
    elapsed = time.perf_counter() - t0
    return {"buffer_size": buffer_size, "sampling": sampling, "selected": selected_count,
            "tests_run": report.tests_run, "wall_time_s": elapsed, "pc_time_s": report.wall_time,
            "estimate": graph_to_list(report.estimate), "truth": graph_to_list(env.graph),
            "low_confidence": [list(map(int, e_)) for e_ in report.low_confidence],
            **graph_metrics(report.estimate, env.graph, report.edge_scores)}


def run_exploration(cfg: ExperimentConfig, out_dir: str | Path | None = None,
                    env: EnvSpec | None = None) -> ExplorationResult:
    """Run the exploration loop; with ``out_dir`` the trace is written as it grows."""
    e, d, x, p = cfg.env, cfg.discovery, cfg.explorer, cfg.explorer.policy
    env = build_env(cfg) if env is None else env
    n, c, K = env.n, env.c, env.num_actions
    arch = build_arch(cfg)
    beta = x.resolved_beta(env.transition_kind)
    total = x.episodes * x.horizon

    ss = np.random.SeedSequence(x.seed)
    rng_env, rng_hold, rng_act, rng_pol, rng_train, rng_graph = [np.random.default_rng(s) for s in ss.spawn(6)]
    model_seed, policy_seed = (int(v) for v in np.random.default_rng(ss.spawn(1)[0]).integers(0, 2**31, 2))

    truth0 = env.graph
    if x.graph_mode == "truth":
        mask = truth0.copy()
    elif e.underestimation:
        mask = perturb_graph(truth0, e.flip_prob, seed=rng_graph)
    else:
        mask = np.ones_like(truth0)
    model = init_model(mask, arch, seed=model_seed, lr=cfg.model.lr, optimizer=cfg.model.optimizer)
    agent = DQNAgent(n, K, p.hidden, p.lr, x.gamma, p.batch_size, p.target_sync, seed=policy_seed)
    memory = ReplayMemory(p.memory_capacity, n)
    store = TransitionStore(n, c)
    discover = x.graph_mode == "discover"
    noise_var = np.ones(n)  # running residual variance, used by the NLL reward only

    metadata = {"config": cfg.to_dict(), "config_hash": cfg.content_hash(), "seed": x.seed}
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        dump_config(cfg, out / "config.yaml")
        save_env(env, out / "env.json")
    writer = TraceWriter(out / "trace.csv", metadata) if out is not None and "csv" in cfg.output.formats else None
    rows: list[dict] = []
    reports: list[DiscoveryReport] = []
    discoveries: list[dict] = []
    episodes: list[dict] = []
    prev_state = (model.params.flat.copy(), model.mask.copy())
    t = 0
    try:
        for ep in range(x.episodes):
            holdout_env = _static(env.active(t + 1))
            holdout_data = rollout(holdout_env, x.holdout_size, seed=rng_hold)
            held = _Holdout(holdout_data, model, prev_state)
            ep_start, ra_sum = held.initial, 0.0
            state = reset(env, rng_env)
            for _ in range(x.horizon):
                t += 1
                truth = env.active(t).graph
                if x.graph_mode == "truth" and not np.array_equal(model.mask, truth):
                    model.remask(truth)
                a = agent.act(state, epsilon_at(t - 1, total, p.eps_start, p.eps_end, p.eps_fraction), rng_act)
                pred = model.predict(state, env.action_catalog[a])
                tr = step(env, state, a, rng_env, step_index=t)
                if x.reward == "nll":
                    r_i = nll_loss_and_reward(pred, noise_var, tr.next_state, x.eta)[1]
                else:
                    r_i = prediction_reward(pred, tr.next_state, x.eta)
                r_a = active_reward(held.prev, held.curr)
                r = combined_reward(r_i, r_a, beta)
                ra_sum += r_a
                last_curr = held.curr
                store.append(tr)
                memory.push(state, a, r, tr.next_state)

                sel_count, disc_ms = None, None
                if discover and t % d.period == 0:
                    t0 = time.perf_counter()
                    report, sel_count = discover_graph(store.batch(), model, cfg)
                    disc_ms = 1000.0 * (time.perf_counter() - t0)
                    model.remask(report.estimate)
                    reports.append(report)
                    entry = {"step": t, "selected": sel_count, "tests_run": report.tests_run,
                             "estimate": graph_to_list(report.estimate),
                             "low_confidence": [list(map(int, e_)) for e_ in report.low_confidence],
                             **graph_metrics(report.estimate, truth, report.edge_scores)}
                    if cfg.output.record_timing:
                        entry["wall_time_ms"] = disc_ms
                    discoveries.append(entry)

                prev_state = (model.params.flat.copy(), model.mask.copy())
                batch = training_batch(store.batch(), cfg.model.batch_size, rng_train)
                train_loss = model.train_step(batch)
                if x.reward == "nll":
                    resid = model.predict(batch.inputs) - batch.next_states
                    noise_var = np.maximum(0.99 * noise_var + 0.01 * np.mean(resid * resid, axis=0), 1e-6)
                held.advance(model)
                if len(memory) >= p.batch_size:
                    agent.update(memory, rng_pol)

                row = {"step": t, "episode": ep, "action_index": a, "r_i": r_i, "r_a": r_a, "r": r,
                       "train_loss": train_loss, "holdout_loss": held.curr,
                       "graph_f1": graph_metrics(model.mask, truth)["f1"],
                       "discovery_time_ms": disc_ms if cfg.output.record_timing else None,
                       "selected_count": sel_count}
                try:
                    check_row(row)
                except ValueError as exc:
                    raise DivergenceError(f"step {t}: {exc}") from exc
                rows.append(row)
                if writer is not None:
                    writer.write(row)
                state = tr.next_state
            episodes.append({"episode": ep, "initial_holdout": ep_start, "final_holdout": last_curr,
                             "active_reward_sum": ra_sum, "end_holdout": held.curr})
    finally:
        if writer is not None:
            writer.close()

    trace = ExperimentTrace.from_rows(rows, metadata)
    summary = {
        "config_hash": cfg.content_hash(),
        "steps": t,
        "final_holdout": rows[-1]["holdout_loss"] if rows else None,
        "final_graph": graph_to_list(model.mask),
        "true_graph": graph_to_list(env.active(t).graph),
        "final_graph_metrics": graph_metrics(model.mask, env.active(t).graph),
        "episodes": episodes,
        "discoveries": discoveries,
    }
    if out is not None:
        if "json" in cfg.output.formats:
            export_trace(trace, out / "trace.json", "json")
        (out / "summary.json").write_text(json.dumps(json_safe(summary), indent=2, sort_keys=True))
        model.save(out / "model.json")
    return ExplorationResult(trace, summary, model, env, reports)
