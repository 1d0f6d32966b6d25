"""Score a trained network on a held-out split and assemble an EvalReport."""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import metrics
from .data import Records
from .engine import ParamSet
from .model import ModelSpec, score_all_items

CHUNK = 4096


def score_records(params: ParamSet, spec: ModelSpec, records: Records, uniform: bool = False):
    """Score every item for every record.

    Returns ``(yhat [R x n], tower scores at the logged item [R x K],
    q [R x K], e_u [R x d])``.
    """
    outs = []
    for start in range(0, len(records), CHUNK):
        feats = records.features[start:start + CHUNK]
        items = records.items[start:start + CHUNK]
        yhat, yc, q, e_u = score_all_items(params, spec, feats, uniform=uniform)
        outs.append((yhat, yc[np.arange(len(items)), items], q, e_u))
    if not outs:
        k = spec.n_clusters
        return np.zeros((0, spec.n_items)), np.zeros((0, k)), np.zeros((0, k)), np.zeros((0, spec.user_dim))
    return tuple(np.concatenate(parts) for parts in zip(*outs))


def ranking_metrics(params: ParamSet, spec: ModelSpec, records: Records, uniform: bool = False) -> dict:
    """Recall@1, AER and macro item-based AUC (the per-epoch log columns)."""
    yhat, _, _, _ = score_records(params, spec, records, uniform)
    return _ranking_from_scores(yhat, records)


def _ranking_from_scores(yhat: np.ndarray, records: Records) -> dict:
    out = {"recall_at_1": None, "aer": None, "item_auc_macro": None}
    if len(records) == 0:
        return out
    if records.labels.any():
        out["recall_at_1"] = metrics.recall_at_1(yhat, records.items, records.labels)
    out["aer"] = metrics.aer(metrics.PolicyEvalInput.from_scores(yhat, records.items, records.labels))
    try:
        logged = yhat[np.arange(len(records)), records.items]
        out["item_auc_macro"] = metrics.item_based_auc(records.items, records.labels, logged).macro
    except metrics.MetricError:
        pass
    return out


def evaluate(
    params: ParamSet,
    spec: ModelSpec,
    records: Records,
    uniform: bool = False,
    sample_cap: int = 3000,
    seed: int = 0,
) -> metrics.EvalReport:
    from .trainer import kmeans

    yhat, tower_at_item, q, e_u = score_records(params, spec, records, uniform)
    rank = _ranking_from_scores(yhat, records)
    logged = yhat[np.arange(len(records)), records.items]
    try:
        item = metrics.item_based_auc(records.items, records.labels, logged)
        per_item = {str(k): v for k, v in item.per_item.items()}
        skipped = item.skipped
    except metrics.MetricError:
        per_item, skipped = {}, sorted(int(i) for i in np.unique(records.items))

    # one representation per user, seeded subsample
    users = records.first_per_user()
    _, first = np.unique(records.user_ids, return_index=True)
    first = np.sort(first)
    if first.size > sample_cap:
        pick = np.sort(np.random.default_rng(seed).choice(first.size, size=sample_cap, replace=False))
        first = first[pick]
    reps, hard = e_u[first], np.argmax(q[first], axis=1)

    sil = sil_km = None
    if spec.n_clusters >= 2 and reps.shape[0] >= spec.n_clusters:
        if np.unique(hard).size >= 2:
            sil = metrics.silhouette(reps, hard, sample_cap, seed)
        km = kmeans(reps, spec.n_clusters, seed)
        if np.unique(km.labels).size >= 2:
            sil_km = metrics.silhouette(reps, km.labels, sample_cap, seed)

    ari = None
    if len(users) >= 2 and np.all(users.true_cluster >= 0):
        _, ufirst = np.unique(records.user_ids, return_index=True)
        ari = metrics.adjusted_rand_index(np.argmax(q[np.sort(ufirst)], axis=1), users.true_cluster)

    try:
        corr = metrics.tower_correlation(tower_at_item).tolist()
    except metrics.MetricError:
        corr = []

    return metrics.EvalReport(
        recall_at_1=rank["recall_at_1"],
        aer=rank["aer"],
        item_auc_macro=rank["item_auc_macro"],
        item_auc=per_item,
        item_auc_skipped=skipped,
        silhouette=sil,
        silhouette_kmeans=sil_km,
        ari=ari,
        tower_correlation=corr,
        counts={
            "records": len(records),
            "positives": int(records.labels.sum()),
            "users": len(users),
            "silhouette_points": int(reps.shape[0]),
            "items_scored": len(per_item),
        },
    )
