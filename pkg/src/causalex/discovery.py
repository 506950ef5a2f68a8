"""Time-lagged PC skeleton search and graph scoring."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy.stats import rankdata

from .env import TransitionBatch, as_batch
from .kci import DEFAULT_EPSILON, KCIContext, KCIError

log = logging.getLogger(__name__)


@dataclass
class DiscoveryReport:
    estimate: np.ndarray
    edge_scores: np.ndarray
    tests_run: int
    wall_time: float
    sepsets: dict = field(default_factory=dict)
    low_confidence: list = field(default_factory=list)

    @property
    def accepted_pvalues(self) -> np.ndarray:
        return 1.0 - self.edge_scores


def timelagged_pc(data, alpha: float = 0.05, max_cond_size: int = 3, method: str = "gamma",
                  epsilon: float = DEFAULT_EPSILON, seed=0) -> DiscoveryReport:
    """Estimate the (n + c) x n causal matrix from transitions.

    Starts from the complete bipartite graph between the t-1 variables and the
    t state variables.  An edge u -> v is removed as soon as u ⊥ v | S is
    accepted for some S drawn from v's other current parents, with |S| growing
    from 0 to ``max_cond_size``.  Parent sets are frozen at the start of each
    level so the result does not depend on the order edges are visited.
    """
    batch: TransitionBatch = as_batch(data)
    if len(batch) < 30:
        raise ValueError(f"need at least 30 transitions, got {len(batch)}")
    start = time.perf_counter()
    n, c = batch.n, batch.c
    d = n + c
    # columns 0..d-1 are causes, d..d+n-1 are effects
    ctx = KCIContext(np.hstack([batch.inputs, batch.next_states]), epsilon=epsilon,
                     method=method, seed=seed)
    adj = np.ones((d, n), dtype=bool)
    scores = np.ones((d, n))
    sepsets: dict = {}
    low_conf: list = []

    for level in range(max_cond_size + 1):
        any_testable = False
        for v in range(n):
            frozen = np.flatnonzero(adj[:, v]).tolist()
            if len(frozen) - 1 < level:
                continue
            any_testable = True
            for u in frozen:
                if not adj[u, v]:
                    continue
                others = [w for w in frozen if w != u]
                for S in combinations(others, level):
                    try:
                        res = ctx.test(u, d + v, S)
                    except (KCIError, np.linalg.LinAlgError) as exc:
                        log.warning("CI test %d -> %d | %s failed: %s", u, v, S, exc)
                        low_conf.append((u, v))
                        break
                    if res.independent(alpha):
                        adj[u, v] = False
                        scores[u, v] = float(np.clip(1.0 - res.p_value, 0.0, 1.0))
                        sepsets[(u, v)] = S
                        break
        if not any_testable:
            break

    return DiscoveryReport(estimate=adj.astype(np.int8), edge_scores=scores,
                           tests_run=ctx.tests_run, wall_time=time.perf_counter() - start,
                           sepsets=sepsets, low_confidence=sorted(set(low_conf)))


def roc_auc(labels: np.ndarray, scores: np.ndarray) -> float:
    """Mann-Whitney AUC with half credit for ties; nan when one class is absent."""
    labels = np.asarray(labels).ravel().astype(bool)
    scores = np.asarray(scores, dtype=float).ravel()
    pos, neg = labels.sum(), (~labels).sum()
    if pos == 0 or neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - pos * (pos + 1) / 2) / (pos * neg))


def graph_metrics(estimate, truth, scores=None) -> dict:
    est = np.asarray(estimate).astype(bool)
    tru = np.asarray(truth).astype(bool)
    if est.shape != tru.shape:
        raise ValueError(f"shape mismatch {est.shape} vs {tru.shape}")
    tp = int((est & tru).sum())
    fp = int((est & ~tru).sum())
    fn = int((~est & tru).sum())
    if not tru.any():
        ok = float(not est.any())
        precision = recall = f1 = ok
    else:
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn)
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    auc = roc_auc(tru, scores) if scores is not None else float("nan")
    return {"precision": precision, "recall": recall, "f1": f1, "auc": auc,
            "tp": tp, "fp": fp, "fn": fn}
