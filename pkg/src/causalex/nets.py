"""Small numpy networks with flat parameter storage and hand-written gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class FlatParams:
    """A single float64 vector with named array views into it.

    Optimizers update the flat vector in place; the views always see the
    current values.  Order of ``layout`` is the canonical flattening order.
    """

    def __init__(self, layout: list[tuple[str, tuple[int, ...]]], values: np.ndarray | None = None):
        self.layout = [(name, tuple(shape)) for name, shape in layout]
        size = sum(int(np.prod(s)) for _, s in self.layout)
        self.flat = np.zeros(size) if values is None else np.array(values, dtype=float)
        if self.flat.shape != (size,):
            raise ValueError(f"expected {size} values, got {self.flat.shape}")
        self.views = self.split(self.flat)

    def split(self, vec: np.ndarray) -> dict[str, np.ndarray]:
        out, k = {}, 0
        for name, shape in self.layout:
            size = int(np.prod(shape))
            out[name] = vec[..., k:k + size].reshape(vec.shape[:-1] + shape)
            k += size
        return out

    def __getitem__(self, name: str) -> np.ndarray:
        return self.views[name]

    def __len__(self) -> int:
        return len(self.flat)

    def copy(self) -> "FlatParams":
        return FlatParams(self.layout, self.flat.copy())

    def zeros_like(self) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        g = np.zeros_like(self.flat)
        return g, self.split(g)


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)

    def step(self, params: np.ndarray, grad: np.ndarray, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m *= self.beta1
        self.m += (1 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        params -= lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_dict(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "t": self.t,
                "m": None if self.m is None else self.m.tolist(),
                "v": None if self.v is None else self.v.tolist()}

    @classmethod
    def from_state(cls, doc: dict) -> "Adam":
        opt = cls(doc["lr"], doc["beta1"], doc["beta2"], doc["eps"], doc["t"])
        if doc.get("m") is not None:
            opt.m = np.array(doc["m"], dtype=float)
            opt.v = np.array(doc["v"], dtype=float)
        return opt


@dataclass
class SGD:
    lr: float = 1e-3
    t: int = 0

    def step(self, params: np.ndarray, grad: np.ndarray, lr: float | None = None) -> None:
        self.t += 1
        params -= (self.lr if lr is None else lr) * grad

    def state_dict(self) -> dict:
        return {"lr": self.lr, "t": self.t}


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


class MLP:
    """Fully connected ReLU network, linear output layer."""

    def __init__(self, sizes: list[int], seed=0):
        self.sizes = list(sizes)
        layout = []
        for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            layout += [(f"W{k}", (a, b)), (f"b{k}", (b,))]
        self.params = FlatParams(layout)
        rng = np.random.default_rng(seed)
        for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            self.params[f"W{k}"][...] = glorot(rng, a, b)

    @property
    def num_layers(self) -> int:
        return len(self.sizes) - 1

    def forward(self, x: np.ndarray, keep: bool = False):
        h = np.atleast_2d(x)
        cache = [h]
        for k in range(self.num_layers):
            z = h @ self.params[f"W{k}"] + self.params[f"b{k}"]
            h = np.maximum(z, 0.0) if k < self.num_layers - 1 else z
            cache.append(h)
        return (h, cache) if keep else h

    __call__ = forward

    def backward(self, cache, dout: np.ndarray) -> np.ndarray:
        grad, g = self.params.zeros_like()
        d = dout
        for k in reversed(range(self.num_layers)):
            h_in = cache[k]
            g[f"W{k}"][...] = h_in.T @ d
            g[f"b{k}"][...] = d.sum(axis=0)
            if k > 0:
                d = (d @ self.params[f"W{k}"].T) * (cache[k] > 0)
        return grad

    def copy(self) -> "MLP":
        new = MLP.__new__(MLP)
        new.sizes = list(self.sizes)
        new.params = self.params.copy()
        return new

    def load(self, other: "MLP") -> None:
        self.params.flat[:] = other.params.flat
