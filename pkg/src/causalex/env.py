"""Synthetic environments with a known time-lagged causal graph.

The ground-truth graph is a binary matrix ``D`` of shape ``(n + c, n)``: rows are
the time ``t-1`` causes (``n`` state coordinates followed by ``c`` action
coordinates), columns are the time ``t`` state coordinates.  Every edge points
forward in time, so the graph is acyclic by construction.

Transitions follow ``s_t ~ N(h(s_{t-1}, a_{t-1}), diag(noise_var))`` with
``s_1 ~ N(0, I)``.  ``h`` is either a masked linear map or, per output
coordinate, a three-layer sigmoid network whose first layer only sees the
coordinate's parents.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

SCHEMA_VERSION = 1
NONLINEAR_HIDDEN = 16
NUM_ACTIONS = 8
WEIGHT_RANGE = 8.0
# Raw edge weights below this magnitude are redrawn so every retained edge matters.
MIN_WEIGHT = 1.0
# Column L1 norm of the linear map; < 1 keeps the state process bounded.
LINEAR_GAIN = 0.9
NOISE_MAX = 0.1


def as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


# --------------------------------------------------------------------------
# Causal adjacency matrices
# --------------------------------------------------------------------------


def validate_graph(D: np.ndarray, n: int | None = None, c: int | None = None) -> np.ndarray:
    D = np.asarray(D)
    if D.ndim != 2:
        raise ValueError(f"causal matrix must be 2-D, got shape {D.shape}")
    if not np.isin(D, (0, 1)).all():
        raise ValueError("causal matrix entries must be 0 or 1")
    if n is not None and D.shape[1] != n:
        raise ValueError(f"causal matrix has {D.shape[1]} effects, expected {n}")
    if n is not None and c is not None and D.shape[0] != n + c:
        raise ValueError(f"causal matrix has {D.shape[0]} causes, expected {n + c}")
    return D.astype(np.int8)


def density(D: np.ndarray) -> float:
    D = np.asarray(D)
    return float(D.sum()) / D.size


def lower_triangular_pattern(n: int, c: int) -> np.ndarray:
    """Candidate edges: state j may cause state i when j >= i; actions may cause anything."""
    rows = np.arange(n + c)[:, None]
    cols = np.arange(n)[None, :]
    return (rows >= cols).astype(np.int8)


def perturb_graph(D: np.ndarray, flip_prob: float, seed=None) -> np.ndarray:
    """Flip every entry of ``D`` independently with probability ``flip_prob``."""
    if not 0.0 <= flip_prob <= 1.0:
        raise ValueError(f"flip_prob must lie in [0, 1], got {flip_prob}")
    D = validate_graph(D)
    rng = as_rng(seed)
    flips = rng.random(D.shape) < flip_prob
    return np.where(flips, 1 - D, D).astype(np.int8)


# --------------------------------------------------------------------------
# Environment specification
# --------------------------------------------------------------------------


@dataclass
class EnvSpec:
    n: int
    c: int
    graph: np.ndarray
    transition_kind: str
    weights: dict[str, np.ndarray]
    noise_var: np.ndarray
    action_catalog: np.ndarray
    seed: int | None = None
    change_schedule: tuple[int, "EnvSpec"] | None = None

    def __post_init__(self):
        self.graph = validate_graph(self.graph, self.n, self.c)
        if self.transition_kind not in ("linear", "nonlinear"):
            raise ValueError(f"unknown transition kind {self.transition_kind!r}")
        self.noise_var = np.asarray(self.noise_var, dtype=float)
        if self.noise_var.shape != (self.n,) or (self.noise_var < 0).any() or (self.noise_var > NOISE_MAX).any():
            raise ValueError("noise variances must be n values in [0, 0.1]")
        self.action_catalog = np.asarray(self.action_catalog, dtype=float)
        if self.action_catalog.ndim != 2 or self.action_catalog.shape[0] == 0 or self.action_catalog.shape[1] != self.c:
            raise ValueError("action catalog must be a nonempty (K, c) array")

    @property
    def num_actions(self) -> int:
        return self.action_catalog.shape[0]

    @property
    def input_dim(self) -> int:
        return self.n + self.c

    @property
    def noise_cov(self) -> np.ndarray:
        return np.diag(self.noise_var)

    def active(self, step_index: int) -> "EnvSpec":
        """The specification in force at ``step_index`` (after any scheduled change)."""
        spec = self
        while spec.change_schedule is not None and step_index >= spec.change_schedule[0]:
            spec = spec.change_schedule[1]
        return spec

    def mean(self, inputs: np.ndarray) -> np.ndarray:
        """h(s, a) for a batch of concatenated inputs of shape (B, n + c)."""
        inputs = np.atleast_2d(inputs)
        if self.transition_kind == "linear":
            return inputs @ self.weights["W"]
        return _nonlinear_mean(self.weights, self.graph, inputs)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _nonlinear_mean(w: dict, graph: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    # W1 is stored already masked; masking the input again keeps the
    # exclusion of non-parents structural rather than numerical.
    Xm = inputs[None, :, :] * graph.T[:, None, :]            # (n, B, d)
    h1 = _sigmoid(np.matmul(Xm, w["W1"]) + w["b1"][:, None, :])  # (n, B, H)
    h2 = _sigmoid(np.matmul(h1, w["W2"]) + w["b2"][:, None, :])
    out = np.matmul(h2, w["W3"][:, :, None])[..., 0] + w["b3"][:, None]
    return out.T


def _edge_weights(rng, shape) -> np.ndarray:
    mag = rng.uniform(MIN_WEIGHT, WEIGHT_RANGE, size=shape)
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return mag * sign


def make_env(graph: np.ndarray, transition_kind: str = "linear", seed=None,
             num_actions: int = NUM_ACTIONS) -> EnvSpec:
    """Build transition weights, noise and an action catalog around a given graph."""
    graph = validate_graph(graph)
    d, n = graph.shape
    c = d - n
    if n < 1 or c < 1:
        raise ValueError("graph needs at least one state and one action row")
    rng = as_rng(seed)
    if transition_kind == "linear":
        W = _edge_weights(rng, graph.shape) * graph
        l1 = np.abs(W).sum(axis=0)
        W = W * np.where(l1 > 0, LINEAR_GAIN / np.where(l1 > 0, l1, 1.0), 0.0)
        weights = {"W": W}
    elif transition_kind == "nonlinear":
        H = NONLINEAR_HIDDEN
        W1 = _edge_weights(rng, (n, d, H)) * graph.T[:, :, None]
        l1 = np.abs(W1).sum(axis=1, keepdims=True)
        W1 = W1 * (2.0 / np.where(l1 > 0, l1, 1.0))
        b1 = rng.normal(0.0, 0.1, size=(n, H))
        W2 = rng.normal(0.0, 2.0 / np.sqrt(H), size=(n, H, H))
        b2 = rng.normal(0.0, 0.1, size=(n, H))
        W3 = rng.uniform(-1.0, 1.0, size=(n, H))
        W3 *= 2.0 / np.abs(W3).sum(axis=1, keepdims=True)
        b3 = -0.5 * W3.sum(axis=1)
        weights = {"W1": W1, "b1": b1, "W2": W2, "b2": b2, "W3": W3, "b3": b3}
    else:
        raise ValueError(f"unknown transition kind {transition_kind!r}")
    noise_var = rng.uniform(0.0, NOISE_MAX, size=n)
    catalog = factorized_catalog(c, num_actions, rng)
    return EnvSpec(n=n, c=c, graph=graph, transition_kind=transition_kind, weights=weights,
                   noise_var=noise_var, action_catalog=catalog,
                   seed=seed if isinstance(seed, (int, np.integer)) else None)


def factorized_catalog(c: int, target_size: int, rng: np.random.Generator) -> np.ndarray:
    """Cartesian product of per-coordinate levels drawn uniformly from [-1, 1].

    Independently drawn catalog vectors would make each action coordinate a
    deterministic function of the others, hiding action edges from any
    conditional independence test.  A product grid keeps the coordinates
    independent under a uniform policy.  Roughly ``target_size`` actions.
    """
    levels = max(2, int(round(target_size ** (1.0 / c))))
    grids = [rng.uniform(-1.0, 1.0, size=levels) for _ in range(c)]
    mesh = np.meshgrid(*grids, indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=1)


def sample_graph(n: int, c: int, edge_keep_prob: float, rng: np.random.Generator) -> np.ndarray:
    pattern = lower_triangular_pattern(n, c)
    while True:
        keep = rng.random(pattern.shape) < edge_keep_prob
        graph = (pattern * keep).astype(np.int8)
        if graph.sum(axis=0).min() >= 1:
            return graph


def generate_env(n: int, c: int, edge_keep_prob: float = 0.2, transition_kind: str = "linear",
                 seed: int | None = 0, change_at: int | None = None,
                 num_actions: int = NUM_ACTIONS) -> EnvSpec:
    """Random environment on the lower-triangular candidate pattern.

    Each candidate edge is kept with probability ``edge_keep_prob``; graphs with
    an effect lacking parents are redrawn.  ``change_at`` attaches a freshly
    drawn replacement environment that takes over at that step index.
    """
    if n < 1 or c < 1:
        raise ValueError("n and c must be >= 1")
    if not 0.0 < edge_keep_prob <= 1.0:
        raise ValueError(f"edge_keep_prob must lie in (0, 1], got {edge_keep_prob}")
    if transition_kind not in ("linear", "nonlinear"):
        raise ValueError(f"unknown transition kind {transition_kind!r}")
    ss = np.random.SeedSequence(seed)
    graph_ss, weight_ss, change_ss = ss.spawn(3)
    graph = sample_graph(n, c, edge_keep_prob, np.random.default_rng(graph_ss))
    spec = make_env(graph, transition_kind, np.random.default_rng(weight_ss), num_actions)
    spec.seed = seed
    if change_at is not None:
        crng = np.random.default_rng(change_ss)
        new_graph = graph
        while np.array_equal(new_graph, graph):
            new_graph = sample_graph(n, c, edge_keep_prob, crng)
        replacement = make_env(new_graph, transition_kind, crng, num_actions)
        # the agent keeps acting with the same catalog across the change
        replacement.action_catalog = spec.action_catalog.copy()
        spec.change_schedule = (int(change_at), replacement)
    return spec


# --------------------------------------------------------------------------
# Transitions
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TransitionSample:
    prev_state: np.ndarray
    action: np.ndarray
    next_state: np.ndarray
    step_index: int = 0
    action_index: int = -1

    @property
    def inputs(self) -> np.ndarray:
        return np.concatenate([self.prev_state, self.action])


@dataclass
class TransitionBatch:
    """Column-stacked transitions; the working representation for training and discovery."""

    prev_states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    step_index: np.ndarray = field(default=None)
    action_index: np.ndarray = field(default=None)

    def __post_init__(self):
        self.prev_states = np.atleast_2d(np.asarray(self.prev_states, dtype=float))
        self.actions = np.atleast_2d(np.asarray(self.actions, dtype=float))
        self.next_states = np.atleast_2d(np.asarray(self.next_states, dtype=float))
        m = len(self.prev_states)
        if len(self.actions) != m or len(self.next_states) != m:
            raise ValueError("transition arrays disagree in length")
        if self.prev_states.shape[1] != self.next_states.shape[1]:
            raise ValueError("state dimensions disagree")
        if self.step_index is None:
            self.step_index = np.arange(m)
        if self.action_index is None:
            self.action_index = np.full(m, -1)
        self.step_index = np.asarray(self.step_index, dtype=np.int64)
        self.action_index = np.asarray(self.action_index, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.prev_states)

    @property
    def n(self) -> int:
        return self.prev_states.shape[1]

    @property
    def c(self) -> int:
        return self.actions.shape[1]

    @property
    def inputs(self) -> np.ndarray:
        return np.concatenate([self.prev_states, self.actions], axis=1)

    def subset(self, idx) -> "TransitionBatch":
        idx = np.asarray(idx)
        return TransitionBatch(self.prev_states[idx], self.actions[idx], self.next_states[idx],
                               self.step_index[idx], self.action_index[idx])

    def samples(self) -> list[TransitionSample]:
        return [TransitionSample(self.prev_states[i], self.actions[i], self.next_states[i],
                                 int(self.step_index[i]), int(self.action_index[i]))
                for i in range(len(self))]

    @classmethod
    def from_samples(cls, samples: Iterable[TransitionSample]) -> "TransitionBatch":
        samples = list(samples)
        if not samples:
            raise ValueError("no samples")
        return cls(np.stack([s.prev_state for s in samples]),
                   np.stack([s.action for s in samples]),
                   np.stack([s.next_state for s in samples]),
                   np.array([s.step_index for s in samples]),
                   np.array([s.action_index for s in samples]))


def as_batch(data) -> TransitionBatch:
    if isinstance(data, TransitionBatch):
        return data
    return TransitionBatch.from_samples(data)


def reset(env: EnvSpec, seed=None) -> np.ndarray:
    return as_rng(seed).standard_normal(env.n)


def step(env: EnvSpec, state: np.ndarray, action_index: int, rng=None,
         step_index: int = 0) -> TransitionSample:
    """Advance one step; a scheduled structural change applies from its step index on."""
    spec = env.active(step_index)
    if not 0 <= action_index < spec.num_actions:
        raise IndexError(f"action index {action_index} outside catalog of {spec.num_actions}")
    rng = as_rng(rng)
    state = np.asarray(state, dtype=float)
    action = spec.action_catalog[action_index]
    x = np.concatenate([state, action])
    mean = spec.mean(x[None, :])[0]
    nxt = mean + np.sqrt(spec.noise_var) * rng.standard_normal(spec.n)
    return TransitionSample(state, action.copy(), nxt, int(step_index), int(action_index))


def rollout(env: EnvSpec, steps: int, seed=None, policy=None, start_step: int = 0,
            state: np.ndarray | None = None) -> TransitionBatch:
    """Collect ``steps`` transitions from one episode (uniform-random actions by default)."""
    rng = as_rng(seed)
    if state is None:
        state = reset(env, rng)
    out = []
    for k in range(steps):
        a = int(rng.integers(env.num_actions)) if policy is None else int(policy(state))
        tr = step(env, state, a, rng, start_step + k)
        out.append(tr)
        state = tr.next_state
    return TransitionBatch.from_samples(out)


# --------------------------------------------------------------------------
# JSON
# --------------------------------------------------------------------------


def env_to_dict(env: EnvSpec) -> dict:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "n": env.n,
        "c": env.c,
        "graph": env.graph.astype(int).tolist(),
        "transition_kind": env.transition_kind,
        "weights": {k: np.asarray(v).tolist() for k, v in env.weights.items()},
        "noise_var": env.noise_var.tolist(),
        "action_catalog": env.action_catalog.tolist(),
        "seed": None if env.seed is None else int(env.seed),
        "change_schedule": None,
    }
    if env.change_schedule is not None:
        at, replacement = env.change_schedule
        doc["change_schedule"] = {"step": int(at), "env": env_to_dict(replacement)}
    return doc


def env_from_dict(doc: dict) -> EnvSpec:
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported env schema version {doc.get('schema_version')!r}")
    spec = EnvSpec(
        n=doc["n"], c=doc["c"], graph=np.array(doc["graph"], dtype=np.int8),
        transition_kind=doc["transition_kind"],
        weights={k: np.array(v, dtype=float) for k, v in doc["weights"].items()},
        noise_var=np.array(doc["noise_var"], dtype=float),
        action_catalog=np.array(doc["action_catalog"], dtype=float),
        seed=doc.get("seed"),
    )
    if doc.get("change_schedule"):
        cs = doc["change_schedule"]
        spec.change_schedule = (int(cs["step"]), env_from_dict(cs["env"]))
    return spec


def save_env(env: EnvSpec, path) -> None:
    with open(path, "w") as fh:
        json.dump(env_to_dict(env), fh)


def load_env(path) -> EnvSpec:
    with open(path) as fh:
        return env_from_dict(json.load(fh))


def graph_to_list(D: np.ndarray) -> list[list[int]]:
    return np.asarray(D).astype(int).tolist()


def two_state_graph() -> np.ndarray:
    """Two states, one action: s1 -> s1, s2 -> s2, a -> both."""
    return np.array([[1, 0], [0, 1], [1, 1]], dtype=np.int8)


def effect_parents(D: np.ndarray, i: int) -> Sequence[int]:
    return np.flatnonzero(np.asarray(D)[:, i]).tolist()
