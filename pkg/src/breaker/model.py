"""The Breaker network: REM, URCM (main + target), CPMM, and the losses.

Parameter naming (insertion order is the init / checkpoint order)::

    user_emb                     sum(user cardinalities) x emb_dim, offset per feature
    user_rem.{l}.W / .b          user representation MLP
    item_emb                     n_items x emb_dim
    item_rem.{l}.W / .b          item representation MLP
    tower.{k}.{l}.W / .b         K preference towers (last layer -> 1 logit)
    centroids                    K x d_u

The target network holds copies of ``user_emb`` and ``user_rem.*`` only.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from . import engine
from .engine import GradMap, ParamSet

CLAMP_EPS = 1e-7


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    user_cardinalities: Tuple[int, ...]
    n_items: int
    embedding_dim: int = 10
    rem_widths: Tuple[int, ...] = (256, 64)
    tower_widths: Tuple[int, ...] = (32, 10)
    n_clusters: int = 4
    alpha: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "user_cardinalities", tuple(int(c) for c in self.user_cardinalities))
        object.__setattr__(self, "rem_widths", tuple(int(w) for w in self.rem_widths))
        object.__setattr__(self, "tower_widths", tuple(int(w) for w in self.tower_widths))
        if self.n_clusters < 1:
            raise ModelError("n_clusters must be >= 1")
        if not self.alpha > 0:
            raise ModelError("alpha must be > 0")
        if self.n_items < 1 or self.embedding_dim < 1 or not self.rem_widths:
            raise ModelError("n_items, embedding_dim and rem_widths must be non-empty / positive")
        if any(c < 1 for c in self.user_cardinalities):
            raise ModelError("feature cardinalities must be >= 1")

    @property
    def n_user_features(self) -> int:
        return len(self.user_cardinalities)

    @property
    def user_dim(self) -> int:
        return self.rem_widths[-1]

    @property
    def item_dim(self) -> int:
        return self.rem_widths[-1]

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.user_cardinalities)[:-1]]).astype(np.int64)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        shapes: Dict[str, Tuple[int, ...]] = {}
        d = self.embedding_dim
        shapes["user_emb"] = (int(sum(self.user_cardinalities)), d)
        _mlp_shapes(shapes, "user_rem", [self.n_user_features * d, *self.rem_widths])
        shapes["item_emb"] = (self.n_items, d)
        _mlp_shapes(shapes, "item_rem", [d, *self.rem_widths])
        tower_dims = [self.user_dim + self.item_dim, *self.tower_widths, 1]
        for k in range(self.n_clusters):
            _mlp_shapes(shapes, f"tower.{k}", tower_dims)
        shapes["centroids"] = (self.n_clusters, self.user_dim)
        return shapes


def _mlp_shapes(shapes, prefix, dims):
    for l in range(len(dims) - 1):
        shapes[f"{prefix}.{l}.W"] = (dims[l + 1], dims[l])
        shapes[f"{prefix}.{l}.b"] = (dims[l + 1],)


def init_params(spec: ModelSpec, rng: np.random.Generator) -> ParamSet:
    """Draw every parameter from ``rng`` in the fixed naming order.

    Embeddings and each tower's logit layer ~ N(0, 0.01); all other weights
    He-normal; biases and centroids zero.
    """
    params: ParamSet = {}
    n_tower_layers = len(spec.tower_widths) + 1
    for name, shape in spec.param_shapes().items():
        if name.endswith(".b") or name == "centroids":
            params[name] = np.zeros(shape)
        elif name.endswith("_emb"):
            params[name] = engine.small_normal(rng, shape)
        elif name.startswith("tower.") and name.endswith(f".{n_tower_layers - 1}.W"):
            params[name] = engine.small_normal(rng, shape)
        else:
            params[name] = engine.he_normal(rng, *shape)
    return params


def user_param_names(params: ParamSet) -> List[str]:
    return [n for n in params if n == "user_emb" or n.startswith("user_rem.")]


def tower_param_names(params: ParamSet, k: int) -> List[str]:
    return [n for n in params if n.startswith(f"tower.{k}.")]


def _layers(params: ParamSet, prefix: str) -> List[tuple]:
    layers = []
    l = 0
    while f"{prefix}.{l}.W" in params:
        layers.append((params[f"{prefix}.{l}.W"], params[f"{prefix}.{l}.b"]))
        l += 1
    return layers


def _scatter_mlp_grads(grads: GradMap, prefix: str, layer_grads) -> None:
    for l, (dW, db) in enumerate(layer_grads):
        grads[f"{prefix}.{l}.W"] = dW
        grads[f"{prefix}.{l}.b"] = db


def check_user_features(spec: ModelSpec, user_features: np.ndarray) -> np.ndarray:
    uf = np.asarray(user_features, dtype=np.int64)
    if uf.shape[-1] != spec.n_user_features:
        raise ModelError(f"expected {spec.n_user_features} user features, got {uf.shape[-1]}")
    card = np.asarray(spec.user_cardinalities)
    bad = (uf < 0) | (uf >= card)
    if bad.any():
        flat = uf.reshape(-1, uf.shape[-1])
        row, pos = np.argwhere(bad.reshape(flat.shape))[0]
        val = int(flat[row, pos])
        raise engine.IndexRangeError(
            f"feature position {pos}: index {val} outside cardinality {card[pos]}"
        )
    return uf


def check_items(spec: ModelSpec, items) -> np.ndarray:
    it = np.asarray(items, dtype=np.int64)
    bad = (it < 0) | (it >= spec.n_items)
    if bad.any():
        raise ModelError(f"unknown item id {int(it[bad][0])} (n_items={spec.n_items})")
    return it


# ----------------------------------------------------------------------- REM


def user_forward(params: ParamSet, spec: ModelSpec, user_features):
    """E_u for a ``B x m`` feature batch. ``params`` may be the target set."""
    uf = check_user_features(spec, user_features)
    idx = uf + spec.offsets
    x = engine.embedding_lookup(params["user_emb"], idx)
    e, cache = engine.mlp_forward(x, _layers(params, "user_rem"))
    return e, (idx, cache)


def user_backward(grad_e: np.ndarray, params: ParamSet, cache, grads: GradMap) -> None:
    idx, mlp_cache = cache
    dx, layer_grads = engine.mlp_backward(grad_e, _layers(params, "user_rem"), mlp_cache)
    _scatter_mlp_grads(grads, "user_rem", layer_grads)
    grads["user_emb"] = engine.embedding_backward(dx, idx, params["user_emb"].shape)


def item_forward(params: ParamSet, spec: ModelSpec, items):
    it = check_items(spec, items).reshape(-1, 1)
    x = engine.embedding_lookup(params["item_emb"], it)
    e, cache = engine.mlp_forward(x, _layers(params, "item_rem"))
    return e, (it, cache)


def item_backward(grad_e: np.ndarray, params: ParamSet, cache, grads: GradMap) -> None:
    it, mlp_cache = cache
    dx, layer_grads = engine.mlp_backward(grad_e, _layers(params, "item_rem"), mlp_cache)
    _scatter_mlp_grads(grads, "item_rem", layer_grads)
    grads["item_emb"] = engine.embedding_backward(dx, it, params["item_emb"].shape)


def rem_forward(params: ParamSet, spec: ModelSpec, user_features, items):
    e_u, _ = user_forward(params, spec, user_features)
    e_i, _ = item_forward(params, spec, items)
    return e_u, e_i


# ---------------------------------------------------------------------- URCM


def _log_kernel(e: np.ndarray, mu: np.ndarray, alpha: float):
    diff = e[:, None, :] - mu[None, :, :]
    dist2 = np.einsum("ijd,ijd->ij", diff, diff)
    return -0.5 * (alpha + 1.0) * np.log1p(dist2 / alpha), diff, dist2


def soft_assign(e: np.ndarray, mu: np.ndarray, alpha: float = 1.0) -> np.ndarray:
    """Student-t soft assignment of each row of ``e`` to the centroids ``mu``."""
    e = np.atleast_2d(e)
    logk, _, _ = _log_kernel(e, mu, alpha)
    logk -= logk.max(axis=1, keepdims=True)
    k = np.exp(logk)
    return k / k.sum(axis=1, keepdims=True)


def soft_assign_backward(grad_q: np.ndarray, e: np.ndarray, mu: np.ndarray, alpha: float, q: np.ndarray):
    """Return ``(dE, dmu)`` given ``dL/dq``."""
    _, diff, dist2 = _log_kernel(e, mu, alpha)
    # d/d(log kernel) through the row normalisation
    g_log = q * (grad_q - np.sum(grad_q * q, axis=1, keepdims=True))
    # d(log kernel)/d(dist2) = -(alpha+1) / (2 (alpha + dist2))
    g_d2 = g_log * (-(alpha + 1.0) / (2.0 * (alpha + dist2)))
    w = 2.0 * g_d2[:, :, None] * diff
    return w.sum(axis=1), -w.sum(axis=0)


def target_distribution(q: np.ndarray) -> np.ndarray:
    """Square-and-normalise pseudo-labels; batch frequencies are column sums."""
    q = np.atleast_2d(q)
    if q.shape[0] == 1:
        # f_j == q_j, so q^2 / f is q itself
        return q.copy()
    f = q.sum(axis=0)
    w = q * q / f
    return w / w.sum(axis=1, keepdims=True)


def clustering_loss(p: np.ndarray, q: np.ndarray):
    """KL(P || Q') summed over rows, and its gradient w.r.t. Q'."""
    p = np.atleast_2d(p)
    q = np.atleast_2d(q)
    pos = p > 0
    terms = np.zeros_like(p)
    terms[pos] = p[pos] * (np.log(p[pos]) - np.log(q[pos]))
    return float(terms.sum()), -p / q


def closed_form_cluster_gradients(e: np.ndarray, mu: np.ndarray, p: np.ndarray, q: np.ndarray, alpha: float = 1.0):
    """Analytic dL_c/de_i and dL_c/dmu_j with P held constant.

    Written directly from the DEC-style formulas, independent of
    :func:`soft_assign_backward`; used as a test oracle.
    """
    e = np.atleast_2d(e)
    n, k = p.shape
    de = np.zeros_like(e)
    dmu = np.zeros_like(mu)
    c = (alpha + 1.0) / alpha
    for i in range(n):
        for j in range(k):
            diff = e[i] - mu[j]
            w = (p[i, j] - q[i, j]) / (1.0 + diff @ diff / alpha)
            de[i] += c * w * diff
            dmu[j] -= c * w * diff
    return de, dmu


# ---------------------------------------------------------------------- CPMM


def cpmm_forward(params: ParamSet, spec: ModelSpec, e_in: np.ndarray):
    """Per-tower sigmoid scores, ``B x K``."""
    e_in = np.atleast_2d(e_in)
    width = spec.user_dim + spec.item_dim
    if e_in.shape[1] != width:
        raise ModelError(f"tower input width {e_in.shape[1]} != {width}")
    logits = np.empty((e_in.shape[0], spec.n_clusters))
    caches = []
    for k in range(spec.n_clusters):
        z, cache = engine.mlp_forward(e_in, _layers(params, f"tower.{k}"))
        logits[:, k] = z[:, 0]
        caches.append(cache)
    return engine.sigmoid(logits), (logits, caches)


def cpmm_backward(grad_yc: np.ndarray, params: ParamSet, spec: ModelSpec, cache, grads: GradMap, towers=None):
    """Backprop ``dL/dyc`` through the towers; returns ``dL/dE_in``."""
    logits, caches = cache
    g_logit = engine.sigmoid_backward(grad_yc, logits)
    d_in = None
    for k in range(spec.n_clusters) if towers is None else towers:
        layers = _layers(params, f"tower.{k}")
        dx, layer_grads = engine.mlp_backward(g_logit[:, k:k + 1], layers, caches[k])
        _scatter_mlp_grads(grads, f"tower.{k}", layer_grads)
        d_in = dx if d_in is None else d_in + dx
    return d_in


def aggregate(yc: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Mixture of tower scores weighted by the soft assignment."""
    return np.sum(yc * q, axis=-1)


def classification_loss(yhat: np.ndarray, y: np.ndarray, eps: float = CLAMP_EPS):
    """Mean binary log loss on clamped predictions and ``dL/dyhat`` (pre-clamp)."""
    yhat = np.asarray(yhat, dtype=np.float64)
    y = np.asarray(y)
    if not np.all((y == 0) | (y == 1)):
        bad = y[(y != 0) & (y != 1)][0]
        raise ModelError(f"labels must be 0 or 1, got {bad!r}")
    y = y.astype(np.float64)
    n = yhat.size
    clamped = np.clip(yhat, eps, 1.0 - eps)
    loss = -np.mean(y * np.log(clamped) + (1.0 - y) * np.log(1.0 - clamped))
    inside = (yhat > eps) & (yhat < 1.0 - eps)
    grad = np.where(inside, (-y / clamped + (1.0 - y) / (1.0 - clamped)) / n, 0.0)
    return float(loss), grad


def total_loss(loss_p: float, loss_c: float, lam: float) -> float:
    if lam < 0:
        raise ModelError("lambda must be >= 0")
    return loss_p + lam * loss_c


# ------------------------------------------------------------- full network


class Losses(NamedTuple):
    total: float
    pred: float
    cluster: float


@dataclass
class StepOutput:
    losses: Losses
    grads: GradMap
    yhat: np.ndarray
    tower_scores: np.ndarray
    q_main: np.ndarray
    e_user: np.ndarray
    pseudo_labels: Optional[np.ndarray] = None
    extras: dict = field(default_factory=dict)


def pseudo_labels(target: ParamSet, spec: ModelSpec, user_features, centroids: np.ndarray) -> np.ndarray:
    """P from the target network's stale user path and the live centroids."""
    e_t, _ = user_forward(target, spec, user_features)
    return target_distribution(soft_assign(e_t, centroids, spec.alpha))


def loss_and_grads(
    params: ParamSet,
    spec: ModelSpec,
    user_features,
    items,
    labels,
    lam: float = 0.1,
    target: Optional[ParamSet] = None,
    p: Optional[np.ndarray] = None,
    weights: Optional[np.ndarray] = None,
    cluster_reduction: str = "sum",
) -> StepOutput:
    """Forward and backward of the total loss on one batch.

    Clustering is active when ``weights`` is None: the towers are mixed by
    Q' and L_c = KL(P || Q') is added with weight ``lam``. P is taken from
    ``p`` if given, else computed from ``target`` (no gradient either way).
    ``cluster_reduction="mean"`` divides L_c by the batch size.

    With ``weights`` given (``K`` or ``B x K``), the mixture uses those
    constant weights and the clustering branch is skipped entirely.
    """
    e_u, u_cache = user_forward(params, spec, user_features)
    e_i, i_cache = item_forward(params, spec, items)
    e_in = np.concatenate([e_u, e_i], axis=1)
    yc, t_cache = cpmm_forward(params, spec, e_in)
    mu = params["centroids"]

    clustering = weights is None
    if clustering:
        q = soft_assign(e_u, mu, spec.alpha)
        if p is None:
            if target is None:
                raise ModelError("clustering needs either target params or pseudo-labels")
            p = pseudo_labels(target, spec, user_features, mu)
        loss_c, g_q_c = clustering_loss(p, q)
        if cluster_reduction == "mean":
            loss_c, g_q_c = loss_c / q.shape[0], g_q_c / q.shape[0]
        elif cluster_reduction != "sum":
            raise ModelError(f"cluster_reduction must be 'sum' or 'mean', got {cluster_reduction!r}")
    else:
        q = np.broadcast_to(np.asarray(weights, dtype=np.float64), yc.shape)
        loss_c, g_q_c = 0.0, None

    yhat = aggregate(yc, q)
    loss_p, g_yhat = classification_loss(yhat, labels)
    loss = total_loss(loss_p, loss_c, lam)

    grads: GradMap = {}
    g_yc = g_yhat[:, None] * q
    d_in = cpmm_backward(g_yc, params, spec, t_cache, grads)
    g_eu = d_in[:, : spec.user_dim].copy()
    g_ei = d_in[:, spec.user_dim:]
    if clustering:
        g_q = g_yhat[:, None] * yc + lam * g_q_c
        de, dmu = soft_assign_backward(g_q, e_u, mu, spec.alpha, q)
        g_eu += de
        grads["centroids"] = dmu
    user_backward(g_eu, params, u_cache, grads)
    item_backward(g_ei, params, i_cache, grads)

    ordered = {n: grads[n] for n in params if n in grads}
    return StepOutput(Losses(loss, loss_p, loss_c), ordered, yhat, yc, np.array(q), e_u, p)


# ------------------------------------------------------------ target network


def make_target(params: ParamSet) -> ParamSet:
    return {n: params[n].copy() for n in user_param_names(params)}


def sync_target(params: ParamSet, target: ParamSet) -> ParamSet:
    """Overwrite ``target`` in place with the current user-side weights."""
    for n, arr in target.items():
        src = params.get(n)
        if src is None or src.shape != arr.shape:
            raise ModelError(
                f"target parameter {n!r} shape {arr.shape} does not match "
                f"{None if src is None else src.shape}"
            )
        np.copyto(arr, src)
    return target


def target_gap(params: ParamSet, target: ParamSet) -> float:
    return max(float(np.max(np.abs(params[n] - t))) for n, t in target.items())


# ------------------------------------------------------------------- serving


def score_all_items(params: ParamSet, spec: ModelSpec, user_features, uniform: bool = False, items=None):
    """Score every candidate item for each user row.

    Returns ``(yhat [B x n], tower_scores [B x n x K], q [B x K], e_u [B x d])``.
    """
    items = np.arange(spec.n_items) if items is None else check_items(spec, items)
    e_u, _ = user_forward(params, spec, np.atleast_2d(user_features))
    e_i, _ = item_forward(params, spec, items)
    b, n = e_u.shape[0], e_i.shape[0]
    e_in = np.concatenate([np.repeat(e_u, n, axis=0), np.tile(e_i, (b, 1))], axis=1)
    yc, _ = cpmm_forward(params, spec, e_in)
    yc = yc.reshape(b, n, spec.n_clusters)
    if uniform:
        q = np.full((b, spec.n_clusters), 1.0 / spec.n_clusters)
    else:
        q = soft_assign(e_u, params["centroids"], spec.alpha)
    yhat = np.einsum("bnk,bk->bn", yc, q)
    return yhat, yc, q, e_u


def predict_rank(params: ParamSet, spec: ModelSpec, user_features, candidate_items, uniform: bool = False):
    """Rank candidates for one user: ``[(item, score), ...]`` best first.

    Ties go to the lower item id.
    """
    cands = [int(i) for i in candidate_items]
    if not cands:
        raise ModelError("need at least one candidate item")
    yhat, _, _, _ = score_all_items(params, spec, user_features, uniform=uniform, items=cands)
    scores = yhat[0]
    order = sorted(range(len(cands)), key=lambda j: (-scores[j], cands[j]))
    return [(cands[j], float(scores[j])) for j in order]
