"""Causally masked forward model with a shared trunk and per-dimension heads.

For each state dimension ``i`` the input ``(s, a)`` is masked by column ``i``
of the causal matrix, passed through the shared trunk, and read out by head
``i``.  The trunk runs once per head on that head's own masked input, so a
masked-out coordinate can never reach the head's output.

Parameters live in one flat vector in the canonical order
``trunk W0, b0, W1, b1, ..., head_w, head_b``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .env import TransitionBatch, as_batch, validate_graph
from .nets import SGD, Adam, FlatParams, glorot

CHECKPOINT_VERSION = 1
DEFAULT_HIDDEN = (32, 8)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class Arch:
    n: int
    c: int
    hidden: tuple[int, ...] = DEFAULT_HIDDEN
    activation: str = "tanh"

    @property
    def input_dim(self) -> int:
        return self.n + self.c

    @property
    def feature_dim(self) -> int:
        return self.hidden[-1] if self.hidden else self.input_dim

    @classmethod
    def linear(cls, n: int, c: int) -> "Arch":
        """Identity trunk, one linear layer per head."""
        return cls(n, c, (), "linear")

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        sizes = (self.input_dim,) + tuple(self.hidden)
        out = []
        for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            out += [(f"W{k}", (a, b)), (f"b{k}", (b,))]
        out += [("head_w", (self.n, self.feature_dim)), ("head_b", (self.n,))]
        return out

    def param_count(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.layout())

    def shared_count(self) -> int:
        return sum(int(np.prod(s)) for name, s in self.layout() if not name.startswith("head"))


def _act(name, z):
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "linear":
        return z
    raise ValueError(f"unknown activation {name!r}")


def _affine(h: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    # One 2-D product per head: stacked matmul rounds differently from the
    # dense single-pass product, and the all-ones mask must match it bit for bit.
    if h.ndim == 2:
        return h @ W + b
    return np.stack([hi @ W + b for hi in h])


def _act_grad(name, h):
    if name == "tanh":
        return 1.0 - h * h
    if name == "relu":
        return (h > 0).astype(float)
    return np.ones_like(h)


class WorldModel:
    def __init__(self, arch: Arch, mask: np.ndarray, params: FlatParams, optimizer=None):
        self.arch = arch
        self.mask = validate_graph(mask, arch.n, arch.c)
        self.params = params
        self.optimizer = optimizer if optimizer is not None else Adam()

    # ---- parameter partition -------------------------------------------
    @property
    def shared(self) -> list[np.ndarray]:
        """Every trunk array (shared by all heads)."""
        return [self.params[name] for name, _ in self.arch.layout() if not name.startswith("head")]

    def head(self, i: int) -> tuple[np.ndarray, float]:
        """Weights and bias of head i."""
        return self.params["head_w"][i], self.params["head_b"][i]

    @property
    def num_trunk_layers(self) -> int:
        return len(self.arch.hidden)

    # ---- forward / backward ---------------------------------------------
    def _forward(self, X: np.ndarray, mask: np.ndarray):
        # C order matters: BLAS takes a different (differently rounded) path on strided input
        Xm = np.ascontiguousarray(X[None, :, :] * mask.T[:, None, :])   # (n, B, d)
        acts = [Xm]
        h = Xm
        for k in range(self.num_trunk_layers):
            h = _act(self.arch.activation, _affine(h, self.params[f"W{k}"], self.params[f"b{k}"]))
            acts.append(h)
        return self._heads(h), acts

    def _heads(self, feats: np.ndarray) -> np.ndarray:
        # feats (n, B, f) -> predictions (B, n)
        hw = self.params["head_w"]
        out = np.stack([feats[i] @ hw[i] for i in range(len(hw))], axis=1)
        return out + self.params["head_b"]

    def predict(self, states, actions=None) -> np.ndarray:
        """Point prediction of the next state.  Accepts (s, a) or concatenated inputs."""
        X = _inputs(states, actions)
        single = X.ndim == 1
        out, _ = self._forward(np.ascontiguousarray(np.atleast_2d(X)), self.mask)
        return out[0] if single else out

    def _backward(self, acts, dout: np.ndarray, per_sample: bool = False) -> np.ndarray:
        """Gradient w.r.t. the flat parameters given dL/dprediction of shape (B, n)."""
        B = dout.shape[0]
        shape = (B, len(self.params)) if per_sample else (len(self.params),)
        grad = np.zeros(shape)
        g = self.params.split(grad)
        feats = acts[-1]                                   # (n, B, f)
        if per_sample:
            g["head_w"][...] = np.einsum("nbf,bn->bnf", feats, dout)
            g["head_b"][...] = dout
        else:
            g["head_w"][...] = np.einsum("nbf,bn->nf", feats, dout)
            g["head_b"][...] = dout.sum(axis=0)
        d = dout.T[:, :, None] * self.params["head_w"][:, None, :]   # (n, B, f)
        for k in reversed(range(self.num_trunk_layers)):
            d = d * _act_grad(self.arch.activation, acts[k + 1])
            h_in = acts[k]
            if per_sample:
                g[f"W{k}"][...] = np.einsum("nbp,nbq->bpq", h_in, d)
                g[f"b{k}"][...] = d.sum(axis=0)
            else:
                # heads are summed in a fixed order through one reshaped product
                g[f"W{k}"][...] = h_in.reshape(-1, h_in.shape[-1]).T @ d.reshape(-1, d.shape[-1])
                g[f"b{k}"][...] = d.sum(axis=(0, 1))
            if k > 0:
                d = np.matmul(d, self.params[f"W{k}"].T)
        return grad

    def loss_and_grad(self, batch) -> tuple[float, np.ndarray]:
        """Batch-mean of 0.5 * ||prediction - target||^2 and its gradient."""
        batch = as_batch(batch)
        pred, acts = self._forward(batch.inputs, self.mask)
        err = pred - batch.next_states
        loss = 0.5 * float(np.mean(np.sum(err * err, axis=1)))
        return loss, self._backward(acts, err / len(batch))

    def per_sample_gradients(self, batch, heads_only: bool = False) -> np.ndarray:
        """(B, P) matrix: gradient of each sample's own loss, canonical order."""
        batch = as_batch(batch)
        pred, acts = self._forward(batch.inputs, self.mask)
        G = self._backward(acts, pred - batch.next_states, per_sample=True)
        if heads_only:
            return G[:, self.arch.shared_count():]
        return G

    def train_step(self, batch, lr: float | None = None) -> float:
        """One optimizer step on the batch; returns the pre-step mean loss."""
        with np.errstate(invalid="ignore", over="ignore"):
            loss, grad = self.loss_and_grad(batch)
        if not np.isfinite(loss) or not np.isfinite(grad).all():
            raise DivergenceError(f"non-finite world-model loss ({loss})")
        self.optimizer.step(self.params.flat, grad, lr)
        return loss

    def evaluate(self, dataset) -> float:
        batch = as_batch(dataset)
        if len(batch) == 0:
            raise ValueError("empty evaluation set")
        # a diverged model yields inf here; callers check finiteness
        with np.errstate(over="ignore", invalid="ignore"):
            err = self.predict(batch.inputs) - batch.next_states
            return 0.5 * float(np.mean(np.sum(err * err, axis=1)))

    def prediction_errors(self, dataset) -> np.ndarray:
        batch = as_batch(dataset)
        err = self.predict(batch.inputs) - batch.next_states
        return 0.5 * np.sum(err * err, axis=1)

    def remask(self, D_new: np.ndarray) -> "WorldModel":
        D_new = np.asarray(D_new)
        if D_new.shape != self.mask.shape:
            raise ValueError(f"mask shape {D_new.shape} does not match model {self.mask.shape}")
        self.mask = validate_graph(D_new)
        return self

    def copy(self) -> "WorldModel":
        opt = self.optimizer
        if isinstance(opt, Adam):
            opt = Adam.from_state(opt.state_dict())
        elif isinstance(opt, SGD):
            opt = SGD(opt.lr, opt.t)
        return WorldModel(self.arch, self.mask.copy(), self.params.copy(), opt)

    # ---- serialization -----------------------------------------------------
    def to_dict(self) -> dict:
        opt = self.optimizer
        return {
            "version": CHECKPOINT_VERSION,
            "arch": {"n": self.arch.n, "c": self.arch.c, "hidden": list(self.arch.hidden),
                     "activation": self.arch.activation},
            "mask": self.mask.astype(int).tolist(),
            "params": {name: self.params[name].tolist() for name, _ in self.arch.layout()},
            "optimizer": {"kind": "adam" if isinstance(opt, Adam) else "sgd", **opt.state_dict()},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "WorldModel":
        if doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
        a = doc["arch"]
        arch = Arch(a["n"], a["c"], tuple(a["hidden"]), a["activation"])
        params = FlatParams(arch.layout())
        for name, _ in arch.layout():
            params[name][...] = np.array(doc["params"][name], dtype=float)
        o = doc["optimizer"]
        opt = Adam.from_state(o) if o["kind"] == "adam" else SGD(o["lr"], o["t"])
        return cls(arch, np.array(doc["mask"], dtype=np.int8), params, opt)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "WorldModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _inputs(states, actions=None) -> np.ndarray:
    states = np.asarray(states, dtype=float)
    if actions is None:
        return states
    return np.concatenate([states, np.asarray(actions, dtype=float)], axis=-1)


def init_model(D: np.ndarray, arch: Arch, seed=0, lr: float = 1e-3, optimizer: str = "adam") -> WorldModel:
    """Seeded Glorot-uniform weights, zero biases."""
    D = np.asarray(D)
    if D.shape != (arch.input_dim, arch.n):
        raise ValueError(f"arch expects a ({arch.input_dim}, {arch.n}) mask, got {D.shape}")
    rng = np.random.default_rng(seed)
    params = FlatParams(arch.layout())
    sizes = (arch.input_dim,) + tuple(arch.hidden)
    for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        params[f"W{k}"][...] = glorot(rng, a, b)
    params["head_w"][...] = glorot(rng, arch.feature_dim, 1, shape=(arch.n, arch.feature_dim))
    opt = Adam(lr) if optimizer == "adam" else SGD(lr)
    return WorldModel(arch, D, params, opt)


def dense_predict(model: WorldModel, states, actions=None) -> np.ndarray:
    """Unmasked forward pass: one trunk evaluation shared by every head."""
    X = np.ascontiguousarray(np.atleast_2d(_inputs(states, actions)))
    h = X
    for k in range(model.num_trunk_layers):
        h = _act(model.arch.activation, _affine(h, model.params[f"W{k}"], model.params[f"b{k}"]))
    feats = np.repeat(h[None], model.arch.n, axis=0)
    return model._heads(feats)


def training_batch(data: TransitionBatch, size: int, rng: np.random.Generator) -> TransitionBatch:
    if len(data) <= size:
        return data
    return data.subset(np.sort(rng.choice(len(data), size, replace=False)))
