"""Gradient verification suite.

Three families of checks on small seeded instances:

* every engine primitive against central finite differences;
* the engine's clustering backward against the explicit closed-form
  gradients for the user representation and the centroids;
* the end-to-end total loss, per parameter group, against finite
  differences (pseudo-labels held fixed, as in training).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np

from . import engine, model

FD_TOL = 1e-4
CLOSED_FORM_TOL = 1e-8


@dataclass
class GroupResult:
    group: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.error <= self.tol)


def _probe(forward: Callable, backward: Callable, shapes: Dict[str, tuple], rng, points: int = 5) -> float:
    worst = 0.0
    for _ in range(points):
        ins = {k: rng.normal(size=s) for k, s in shapes.items()}
        g = rng.normal(size=forward(**ins).shape)
        loss = lambda p: float(np.sum(forward(**p) * g))
        worst = max(worst, engine.finite_diff_check(loss, ins, backward(g, **ins)))
    return worst


def primitive_checks(rng) -> List[GroupResult]:
    idx = rng.integers(0, 5, size=(4, 3))

    def aff_b(g, x, W, b):
        dx, dW, db = engine.affine_backward(g, x, W)
        return {"x": dx, "W": dW, "b": db}

    def mlp_f(x, W0, b0, W1, b1):
        return engine.mlp_forward(x, [(W0, b0), (W1, b1)])[0]

    def mlp_b(g, x, W0, b0, W1, b1):
        layers = [(W0, b0), (W1, b1)]
        _, cache = engine.mlp_forward(x, layers)
        dx, lg = engine.mlp_backward(g, layers, cache)
        return {"x": dx, "W0": lg[0][0], "b0": lg[0][1], "W1": lg[1][0], "b1": lg[1][1]}

    return [
        GroupResult("engine.embedding", _probe(
            lambda table: engine.embedding_lookup(table, idx),
            lambda g, table: {"table": engine.embedding_backward(g, idx, table.shape)},
            {"table": (5, 2)}, rng), FD_TOL),
        GroupResult("engine.affine", _probe(
            engine.affine_forward, aff_b, {"x": (6, 4), "W": (3, 4), "b": (3,)}, rng), FD_TOL),
        GroupResult("engine.relu", _probe(
            engine.relu, lambda g, x: {"x": engine.relu_backward(g, x)}, {"x": (6, 3)}, rng), FD_TOL),
        GroupResult("engine.sigmoid", _probe(
            engine.sigmoid, lambda g, x: {"x": engine.sigmoid_backward(g, x)}, {"x": (6, 3)}, rng), FD_TOL),
        GroupResult("engine.mlp", _probe(
            mlp_f, mlp_b, {"x": (5, 4), "W0": (6, 4), "b0": (6,), "W1": (2, 6), "b1": (2,)}, rng), FD_TOL),
        GroupResult("engine.soft_assign", _probe(
            lambda e, mu: model.soft_assign(e, mu, 1.0),
            lambda g, e, mu: dict(zip(("e", "mu"), model.soft_assign_backward(
                g, e, mu, 1.0, model.soft_assign(e, mu, 1.0)))),
            {"e": (6, 3), "mu": (3, 3)}, rng), FD_TOL),
    ]


def closed_form_checks(rng, trials: int = 4) -> List[GroupResult]:
    worst_e = worst_mu = 0.0
    for n, k in zip((16, 7, 1, 12)[:trials], (4, 3, 2, 4)):
        d = int(rng.integers(2, 9))
        alpha = float(rng.uniform(0.5, 3.0))
        e, mu = rng.normal(size=(n, d)), rng.normal(size=(k, d))
        p = model.target_distribution(model.soft_assign(e + rng.normal(scale=0.5, size=e.shape), mu, alpha))
        q = model.soft_assign(e, mu, alpha)
        _, g_q = model.clustering_loss(p, q)
        de, dmu = model.soft_assign_backward(g_q, e, mu, alpha, q)
        de_cf, dmu_cf = model.closed_form_cluster_gradients(e, mu, p, q, alpha)
        worst_e = max(worst_e, float(np.max(np.abs(de - de_cf))))
        worst_mu = max(worst_mu, float(np.max(np.abs(dmu - dmu_cf))))
    return [
        GroupResult("closed_form.user_rep", worst_e, CLOSED_FORM_TOL),
        GroupResult("closed_form.centroids", worst_mu, CLOSED_FORM_TOL),
    ]


def _instance(rng):
    spec = model.ModelSpec(user_cardinalities=(5, 3, 4), n_items=6, embedding_dim=3,
                           rem_widths=(8, 5), tower_widths=(4, 3), n_clusters=3, alpha=1.0)
    params = model.init_params(spec, rng)
    for name in params:
        if name.endswith("_emb"):
            params[name] = params[name] * 30.0
        elif name.startswith("tower.") and name.endswith(".W"):
            params[name] = params[name] * 3.0
        elif name.endswith(".b"):
            # keep pre-activations away from the ReLU kink
            params[name] = rng.normal(scale=0.1, size=params[name].shape)
    params["centroids"] = rng.normal(size=params["centroids"].shape)
    b = 10
    feats = np.stack([rng.integers(0, c, b) for c in spec.user_cardinalities], axis=1)
    items = rng.integers(0, spec.n_items, b)
    labels = rng.integers(0, 2, b)
    return spec, params, feats, items, labels


END_TO_END_GROUPS = {
    "user_emb": lambda n: n == "user_emb",
    "user_rem": lambda n: n.startswith("user_rem."),
    "item_emb": lambda n: n == "item_emb",
    "item_rem": lambda n: n.startswith("item_rem."),
    "towers": lambda n: n.startswith("tower."),
    "centroids": lambda n: n == "centroids",
}


def end_to_end_checks(rng, lam: float = 0.5) -> List[GroupResult]:
    spec, params, feats, items, labels = _instance(rng)
    target = {k: v + rng.normal(scale=0.05, size=v.shape) for k, v in model.make_target(params).items()}
    p = model.pseudo_labels(target, spec, feats, params["centroids"])
    out = model.loss_and_grads(params, spec, feats, items, labels, lam=lam, p=p)
    f = lambda ps: model.loss_and_grads(ps, spec, feats, items, labels, lam=lam, p=p).losses.total
    results = []
    for group, member in END_TO_END_GROUPS.items():
        names = [n for n in params if member(n)]
        err = engine.finite_diff_check(f, params, out.grads, max_coords=40, seed=int(rng.integers(1 << 31)),
                                       names=names)
        results.append(GroupResult(f"total_loss.{group}", err, FD_TOL))
    return results


def run_all(seed: int = 0) -> List[GroupResult]:
    rng = np.random.default_rng(seed)
    return primitive_checks(rng) + closed_form_checks(rng) + end_to_end_checks(rng)


def format_results(results: List[GroupResult]) -> str:
    width = max(len(r.group) for r in results)
    return "\n".join(
        f"{r.group:<{width}}  max_err={r.error:.3e}  tol={r.tol:.0e}  {'ok' if r.passed else 'FAIL'}"
        for r in results
    )
