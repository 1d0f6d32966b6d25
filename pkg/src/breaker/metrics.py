"""Offline evaluation: Recall@1, AER, (item-based) AUC, silhouette, ARI, tower correlation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist
from scipy.stats import rankdata


class MetricError(ValueError):
    pass


def policy_choice(scores: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ``np.argmax`` already returns the lowest index on ties."""
    return np.argmax(np.asarray(scores), axis=-1)


def recall_at_1(scores: np.ndarray, items: np.ndarray, labels: np.ndarray) -> float:
    """Share of positive records whose logged item is the top-scored candidate.

    ``scores`` is ``R x n_items`` (one row per record), ``items`` the logged
    item and ``labels`` the 0/1 outcome of each record.
    """
    labels = np.asarray(labels)
    pos = labels == 1
    if not pos.any():
        raise MetricError("recall@1 is undefined without positive records")
    top = policy_choice(np.asarray(scores)[pos])
    return float(np.mean(top == np.asarray(items)[pos]))


@dataclass
class PolicyEvalInput:
    items: np.ndarray
    labels: np.ndarray
    choices: np.ndarray
    candidates: Sequence[int]

    def __post_init__(self):
        self.items = np.asarray(self.items)
        self.labels = np.asarray(self.labels)
        self.choices = np.asarray(self.choices)
        if not np.isin(self.items, np.asarray(list(self.candidates))).all():
            raise MetricError("logged item outside the candidate set")

    @classmethod
    def from_scores(cls, scores, items, labels, candidates=None):
        scores = np.asarray(scores)
        cands = np.arange(scores.shape[1]) if candidates is None else np.asarray(candidates)
        return cls(items, labels, cands[policy_choice(scores)], cands.tolist())


def aer(inp: PolicyEvalInput) -> float:
    """Average expected response: mean of y * 1{policy pick == logged item}."""
    n = inp.items.shape[0]
    if n < 1:
        raise MetricError("AER needs at least one record")
    hit = inp.choices == inp.items
    return float(np.sum(inp.labels * hit) / n)


def auc(scores, labels) -> float:
    """Mann-Whitney AUC; tied scores count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both a positive and a negative sample")
    ranks = rankdata(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class ItemAUC:
    per_item: Dict[int, float]
    macro: float
    skipped: List[int]


def item_based_auc(items, labels, scores) -> ItemAUC:
    """AUC within the logged samples of each item, plus the macro mean."""
    items = np.asarray(items)
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    per_item: Dict[int, float] = {}
    skipped: List[int] = []
    for it in np.unique(items):
        m = items == it
        y = labels[m]
        if y.min() == y.max():
            skipped.append(int(it))
            continue
        per_item[int(it)] = auc(scores[m], y)
    if not per_item:
        raise MetricError("no item has both positive and negative samples")
    return ItemAUC(per_item, float(np.mean(list(per_item.values()))), skipped)


def silhouette(reps, labels, sample_cap: int = 3000, seed: int = 0) -> float:
    """Mean Euclidean silhouette over at most ``sample_cap`` points.

    A point alone in its cluster scores 0, as does a point with a == b == 0.
    """
    x = np.asarray(reps, dtype=np.float64)
    lab = np.asarray(labels)
    if x.shape[0] > sample_cap:
        idx = np.sort(np.random.default_rng(seed).choice(x.shape[0], size=sample_cap, replace=False))
        x, lab = x[idx], lab[idx]
    uniq, lab = np.unique(lab, return_inverse=True)
    if uniq.size < 2:
        raise MetricError("silhouette needs at least two clusters")
    d = cdist(x, x)
    onehot = np.eye(uniq.size)[lab]
    sizes = onehot.sum(axis=0)
    sums = d @ onehot
    own = sizes[lab]
    a = np.where(own > 1, sums[np.arange(len(lab)), lab] / np.maximum(own - 1, 1), 0.0)
    mean_other = sums / sizes
    mean_other[np.arange(len(lab)), lab] = np.inf
    b = mean_other.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where((own > 1) & (denom > 0), (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(s.mean())


def _comb2(x):
    x = np.asarray(x, dtype=np.float64)
    return x * (x - 1.0) / 2.0


def adjusted_rand_index(pred, truth) -> float:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise MetricError(f"label arrays differ in length: {pred.shape[0]} vs {truth.shape[0]}")
    n = pred.shape[0]
    if n < 2:
        raise MetricError("ARI needs at least two points")
    _, p = np.unique(pred, return_inverse=True)
    _, t = np.unique(truth, return_inverse=True)
    table = np.zeros((p.max() + 1, t.max() + 1))
    np.add.at(table, (p, t), 1.0)
    index = _comb2(table).sum()
    a = _comb2(table.sum(axis=1)).sum()
    b = _comb2(table.sum(axis=0)).sum()
    expected = a * b / _comb2(n)
    top = 0.5 * (a + b)
    if top == expected:
        # both labelings trivial (one cluster, or all singletons)
        return 1.0
    return float((index - expected) / (top - expected))


def tower_correlation(tower_scores) -> np.ndarray:
    """Pearson correlation between every pair of tower-score columns."""
    y = np.asarray(tower_scores, dtype=np.float64)
    if y.ndim != 2 or y.shape[0] < 2:
        raise MetricError("need an N x K score matrix with N >= 2")
    centred = y - y.mean(axis=0)
    norms = np.sqrt((centred ** 2).sum(axis=0))
    for k in range(y.shape[1]):
        # the centred norm of a constant column is rounding noise, not 0
        if np.ptp(y[:, k]) == 0.0 or norms[k] == 0.0:
            raise MetricError(f"tower {k} has zero variance")
    c = (centred.T @ centred) / np.outer(norms, norms)
    c = np.clip(0.5 * (c + c.T), -1.0, 1.0)
    np.fill_diagonal(c, 1.0)
    return c


@dataclass
class EvalReport:
    recall_at_1: float
    aer: float
    item_auc_macro: float
    item_auc: Dict[str, float]
    item_auc_skipped: List[int]
    silhouette: Optional[float]
    silhouette_kmeans: Optional[float]
    ari: Optional[float]
    tower_correlation: List[List[float]]
    counts: Dict[str, int] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"
