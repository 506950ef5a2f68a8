"""Empirical check of the convergence claims for masked linear regression.

Loss: L(W) = (1/m) ||X W - Y||_F^2 with Y = X W*, so L* = 0 and the Hessian
is block diagonal with identical blocks H = 2 X^T X / m; its extreme
eigenvalues are the strong-convexity and smoothness constants.

Two causal trajectories are compared with dense gradient descent:
``masked_trajectory`` masks the dense iterates (W^c(k) = D * W(k)), and
``projected`` runs gradient descent with the gradient masked every step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MODES = ("masked_trajectory", "projected")
DIVERGENCE_FACTOR = 10.0
# slack for floating-point round-off on inequalities that hold exactly in real arithmetic
ROUNDOFF = 1e-12


class TheoryError(RuntimeError):
    """Rank-deficient problem or divergent trajectory."""


@dataclass
class LinearProblem:
    X: np.ndarray
    w_star: np.ndarray
    mask: np.ndarray
    strong_convexity: float
    smoothness: float
    w0: np.ndarray

    @property
    def Y(self) -> np.ndarray:
        return self.X @ self.w_star

    @property
    def samples(self) -> int:
        return self.X.shape[0]

    @property
    def density(self) -> float:
        return float(self.mask.mean())

    @property
    def hessian(self) -> np.ndarray:
        return 2.0 * self.X.T @ self.X / self.samples

    def loss(self, W: np.ndarray) -> float:
        R = self.X @ W - self.Y
        return float(np.sum(R * R)) / self.samples

    def gradient(self, W: np.ndarray) -> np.ndarray:
        return 2.0 * self.X.T @ (self.X @ W - self.Y) / self.samples


def sample_mask(shape: tuple[int, int], density: float, rng: np.random.Generator) -> np.ndarray:
    """Binary mask with round(density * size) ones (at least one) at random positions."""
    size = shape[0] * shape[1]
    k = int(np.clip(round(density * size), 1, size))
    flat = np.zeros(size, dtype=np.int8)
    flat[rng.choice(size, k, replace=False)] = 1
    return flat.reshape(shape)


def default_samples(n: int, c: int) -> int:
    return 10 * (n + c)


def make_linear_problem(n: int, c: int, m_samples: int | None = None, density: float = 0.5,
                        seed=0, init: str = "zeros") -> LinearProblem:
    d = n + c
    m_samples = default_samples(n, c) if m_samples is None else m_samples
    if m_samples <= d:
        raise ValueError(f"need more samples than inputs ({m_samples} <= {d})")
    if not 0 < density <= 1:
        raise ValueError("density must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    for _attempt in range(2):
        X = rng.standard_normal((m_samples, d))
        eig = np.linalg.eigvalsh(2.0 * X.T @ X / m_samples)
        if eig[0] > 1e-10 * eig[-1]:
            break
    else:
        raise TheoryError("rank-deficient Hessian after resampling")
    mask = sample_mask((d, n), density, rng)
    w_star = rng.standard_normal((d, n)) * mask
    w0 = np.zeros((d, n)) if init == "zeros" else rng.standard_normal((d, n))
    return LinearProblem(X, w_star, mask, float(eig[0]), float(eig[-1]), w0)


def _check_alpha(problem: LinearProblem, alpha: float | None) -> float:
    alpha = 1.0 / problem.smoothness if alpha is None else alpha
    if not 0 < alpha < 2.0 / problem.smoothness:
        raise ValueError(f"step size {alpha} outside (0, 2/M)")
    return alpha


def _run(problem: LinearProblem, steps: int, alpha: float, grad_mask=None) -> np.ndarray:
    W = problem.w0.copy() if grad_mask is None else problem.w0 * grad_mask
    out = [W.copy()]
    limit = DIVERGENCE_FACTOR * max(problem.loss(W), 1e-300)
    for k in range(steps):
        g = problem.gradient(W)
        if grad_mask is not None:
            g = g * grad_mask
        W = W - alpha * g
        if problem.loss(W) > limit:
            raise TheoryError(f"gradient descent diverged at step {k + 1}")
        out.append(W.copy())
    return np.stack(out)


def gd_dense(problem: LinearProblem, steps: int, alpha: float | None = None) -> np.ndarray:
    """Iterates W(0..steps) of plain gradient descent, shape (steps + 1, d, n)."""
    return _run(problem, steps, _check_alpha(problem, alpha))


def gd_causal(problem: LinearProblem, steps: int, alpha: float | None = None,
              mode: str = "masked_trajectory", dense: np.ndarray | None = None) -> np.ndarray:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    alpha = _check_alpha(problem, alpha)
    if mode == "masked_trajectory":
        dense = gd_dense(problem, steps, alpha) if dense is None else dense
        return dense * problem.mask
    return _run(problem, steps, alpha, grad_mask=problem.mask)


@dataclass
class ConvergenceReport:
    mode: str
    density: float
    strong_convexity: float
    smoothness: float
    dense_loss: np.ndarray
    causal_loss: np.ndarray
    loss_ratio: np.ndarray
    distance_ratio: np.ndarray
    max_distance_ratio: float
    contraction_holds: np.ndarray
    pythagorean_error: np.ndarray
    ratio_bound_holds: np.ndarray
    density_bound_per_step: np.ndarray
    envelope_holds: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def all_contraction(self) -> bool:
        return bool(self.contraction_holds.all())

    @property
    def max_pythagorean_error(self) -> float:
        return float(np.nanmax(self.pythagorean_error)) if np.isfinite(self.pythagorean_error).any() else float("nan")

    @property
    def all_ratio_bound(self) -> bool:
        return bool(self.ratio_bound_holds.all())

    @property
    def all_envelope(self) -> bool:
        return bool(self.envelope_holds.all())

    @property
    def loss_ratio_max(self) -> float:
        return float(self.loss_ratio.max())

    @property
    def density_bound_holds(self) -> bool:
        return bool(self.density_bound_per_step.all())

    def to_dict(self) -> dict:
        return {
            "mode": self.mode, "density": self.density,
            "strong_convexity": self.strong_convexity, "smoothness": self.smoothness,
            "max_distance_ratio": self.max_distance_ratio, "loss_ratio_max": self.loss_ratio_max,
            "contraction_all": self.all_contraction,
            "pythagorean_max_rel_error": None if np.isnan(self.max_pythagorean_error) else self.max_pythagorean_error,
            "ratio_bound_all": self.all_ratio_bound, "envelope_all": self.all_envelope,
            "density_bound_all": self.density_bound_holds,
            **self.meta,
        }

    def rows(self) -> list[dict]:
        return [{"k": k, "dense_loss": float(self.dense_loss[k]), "causal_loss": float(self.causal_loss[k]),
                 "loss_ratio": float(self.loss_ratio[k]), "distance_ratio": float(self.distance_ratio[k]),
                 "ratio_bound": bool(self.ratio_bound_holds[k]), "density_bound": bool(self.density_bound_per_step[k]),
                 "envelope": bool(self.envelope_holds[k])}
                for k in range(len(self.loss_ratio))]


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    # once the dense trajectory sits at the optimum the ratio is reported as 1
    safe = np.where(den > 0, den, 1.0)
    return np.where(den > 0, num / safe, 1.0)


def verify_bounds(problem: LinearProblem, dense: np.ndarray, causal: np.ndarray,
                  mode: str = "masked_trajectory") -> ConvergenceReport:
    if dense.shape != causal.shape:
        raise ValueError("trajectories are not aligned")
    m, M = problem.strong_convexity, problem.smoothness
    ks = np.arange(len(dense))
    Ld = np.array([problem.loss(W) for W in dense])
    Lc = np.array([problem.loss(W) for W in causal])
    err_d = np.array([np.sum((W - problem.w_star) ** 2) for W in dense])
    err_c = np.array([np.sum((W - problem.w_star) ** 2) for W in causal])
    loss_ratio = _ratio(Lc, Ld)
    distance_ratio = _ratio(err_c, err_d)
    max_distance_ratio = float(distance_ratio.max())
    e0 = err_d[0]
    rate = (1.0 - m / M) ** ks
    contraction = err_d <= rate * e0 * (1 + ROUNDOFF) + ROUNDOFF
    if mode == "masked_trajectory":
        off = np.array([np.sum(((1 - problem.mask) * W) ** 2) for W in dense])
        pyth = np.abs(err_d - err_c - off) / np.where(err_d > 0, err_d, 1.0)
    else:
        pyth = np.full(len(ks), np.nan)
    slack = ROUNDOFF * (1 + Ld)
    ratio_bound = Lc <= max_distance_ratio ** ks * Ld + slack
    density_bound = Lc <= problem.density ** ks * Ld + slack
    envelope = Lc <= 0.5 * M * (max_distance_ratio * (1.0 - m / M)) ** ks * e0 + slack
    return ConvergenceReport(mode, problem.density, m, M, Ld, Lc, loss_ratio, distance_ratio,
                             max_distance_ratio, contraction, pyth, ratio_bound, density_bound, envelope)


def verify_problem(problem: LinearProblem, steps: int = 100, mode: str = "masked_trajectory",
                   alpha: float | None = None) -> ConvergenceReport:
    dense = gd_dense(problem, steps, alpha)
    causal = gd_causal(problem, steps, alpha, mode, dense=dense)
    return verify_bounds(problem, dense, causal, mode)


DENSITIES = (0.2, 0.5, 0.8)


def random_instance_params(rng: np.random.Generator, max_inputs: int = 20) -> tuple[int, int, float]:
    n = int(rng.integers(2, max_inputs - 1))
    c = int(rng.integers(1, max_inputs - n + 1))
    density = float(DENSITIES[rng.integers(len(DENSITIES))])
    return n, c, density


def ensemble(count: int = 100, seed=0, steps: int = 100, mode: str = "masked_trajectory",
             samples: int | None = None, n: int | None = None, c: int | None = None,
             density: float | None = None) -> list[ConvergenceReport]:
    """Independent random instances; unspecified sizes and densities are drawn per instance."""
    ss = np.random.SeedSequence(seed)
    reports = []
    for k, child in enumerate(ss.spawn(count)):
        rng = np.random.default_rng(child)
        rn, rc, rd = random_instance_params(rng)
        nn, cc = (n or rn), (c or rc)
        dd = density if density is not None else rd
        problem = make_linear_problem(nn, cc, samples, dd, seed=rng)
        rep = verify_problem(problem, steps, mode)
        rep.meta = {"instance": k, "n": nn, "c": cc, "samples": problem.samples}
        reports.append(rep)
    return reports


def summarize(reports: list[ConvergenceReport]) -> dict:
    pyth = [r.max_pythagorean_error for r in reports if not np.isnan(r.max_pythagorean_error)]
    return {
        "instances": len(reports),
        "contraction_all": all(r.all_contraction for r in reports),
        "pythagorean_max_rel_error": max(pyth) if pyth else None,
        "ratio_bound_all": all(r.all_ratio_bound for r in reports),
        "envelope_all": all(r.all_envelope for r in reports),
        "loss_ratio_le_1_all": all(r.loss_ratio_max <= 1.0 for r in reports),
        "loss_ratio_violations": sum(r.loss_ratio_max > 1.0 for r in reports),
        "loss_ratio_max": max(r.loss_ratio_max for r in reports),
        "density_bound_fraction": float(np.mean([r.density_bound_holds for r in reports])),
    }
