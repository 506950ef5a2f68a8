"""Top-k transition selection by gradient similarity and diversity.

Each candidate is scored by the cosine between its own loss gradient and the
buffer-mean gradient (similarity) plus ``lam`` times the negative mean cosine
to the samples already chosen (diversity).  Selection is greedy, one sample
per round, so diversity is always measured against the growing selection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .env import TransitionBatch, as_batch


@dataclass(frozen=True)
class SelectionScore:
    similarity: float
    diversity: float
    combined: float


def sample_gradient(model, sample, heads_only: bool = False) -> np.ndarray:
    """Flat gradient of one transition's loss under the model's current mask."""
    return model.per_sample_gradients(as_batch([sample]) if not isinstance(sample, TransitionBatch) else sample,
                                      heads_only=heads_only)[0]


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def minibatch_similarity(g_i: np.ndarray, g_mean: np.ndarray) -> float:
    return _cos(np.ravel(g_i), np.ravel(g_mean))


def sample_diversity(g_i: np.ndarray, others) -> float:
    """Negative mean cosine to ``others``; zero-norm members are left out."""
    g_i = np.ravel(g_i)
    if np.linalg.norm(g_i) == 0:
        return 0.0
    cosines = [_cos(g_i, np.ravel(o)) for o in others if np.linalg.norm(o) > 0]
    if not cosines:
        return 0.0
    return -float(np.mean(cosines))


def _unit_rows(G: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(G, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    return G / safe[:, None], norms > 0


def greedy_select(G: np.ndarray, k: int, lam: float = 1.0) -> tuple[np.ndarray, list[SelectionScore]]:
    """Indices chosen from gradient rows ``G``, in selection order.

    Rows are assumed to be in tie-break order: among equal scores the lowest
    row index wins.
    """
    m = len(G)
    if k >= m:
        return np.arange(m), []
    U, nonzero = _unit_rows(G)
    mean = G.mean(axis=0)
    mean_norm = np.linalg.norm(mean)
    sim = U @ (mean / mean_norm) if mean_norm > 0 else np.zeros(m)
    sim = np.where(nonzero, sim, 0.0)
    cos_sum = np.zeros(m)
    count = 0
    available = np.ones(m, dtype=bool)
    chosen, scores = [], []
    for _ in range(k):
        div = np.where(nonzero, -cos_sum / count, 0.0) if count else np.zeros(m)
        total = np.where(available, sim + lam * div, -np.inf)
        j = int(np.argmax(total))  # first maximum = earliest step index
        chosen.append(j)
        scores.append(SelectionScore(float(sim[j]), float(div[j]), float(total[j])))
        available[j] = False
        if nonzero[j]:
            cos_sum += U @ U[j]
            count += 1
    return np.array(chosen), scores


def select_topk(buffer, model, kappa: int, lam: float = 1.0, heads_only: bool = False,
                return_scores: bool = False):
    """The ``kappa`` highest-scoring transitions, returned in step order.

    The whole buffer comes back when it holds ``kappa`` samples or fewer.
    """
    if kappa < 1:
        raise ValueError("kappa must be >= 1")
    batch = as_batch(buffer)
    order = np.lexsort((np.arange(len(batch)), batch.step_index))
    batch = batch.subset(order)
    if len(batch) <= kappa:
        return (batch, []) if return_scores else batch
    G = model.per_sample_gradients(batch, heads_only=heads_only)
    idx, scores = greedy_select(G, kappa, lam)
    out = batch.subset(np.sort(idx))
    return (out, scores) if return_scores else out


def default_kappa(buffer_size: int, synthetic: bool = True) -> int:
    return 350 if synthetic else max(1, int(0.7 * buffer_size))
