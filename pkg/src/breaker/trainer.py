"""Joint training loop: K-means init, classification + clustering losses,
delayed target-network sync, ablation variants and epoch logs."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, List, NamedTuple, Optional, Tuple

import numpy as np

from . import engine, model
from .data import Records, iterate_batches
from .engine import AdamState, ParamSet
from .model import ModelSpec

log = logging.getLogger(__name__)

VARIANTS = ("breaker", "breaker1-", "breaker2-")
LOG_COLUMNS = ("epoch", "loss", "loss_p", "loss_c", "recall_at_1", "item_auc_macro", "aer", "seconds")


class TrainError(ValueError):
    pass


class NumericAbort(RuntimeError):
    def __init__(self, step: int, losses):
        self.step = step
        self.losses = losses
        super().__init__(
            f"non-finite loss at step {step}: L={losses[0]!r} L_p={losses[1]!r} L_c={losses[2]!r}"
        )


# -------------------------------------------------------------------- k-means


class KMeansResult(NamedTuple):
    centroids: np.ndarray
    labels: np.ndarray
    inertia: float
    n_iter: int


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = x[:, None, :] - c[None, :, :]
    return np.einsum("ijd,ijd->ij", d, d)


def _plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    closest = _sq_dists(x, x[chosen]).min(axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=closest / total))
        else:
            free = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(free))
        chosen.append(nxt)
        closest = np.minimum(closest, _sq_dists(x, x[nxt:nxt + 1])[:, 0])
    return x[chosen].copy()


def kmeans(points, k: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-4) -> KMeansResult:
    """Lloyd's algorithm from k-means++ seeds.

    Stops after ``max_iter`` rounds or when no centroid moves more than
    ``tol``. A cluster left empty is reseeded at the point farthest from its
    assigned centroid.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 1:
        raise TrainError(f"k-means needs an S x d array, got shape {x.shape}")
    if k < 1 or x.shape[0] < k:
        raise TrainError(f"k-means needs at least k={k} points, got {x.shape[0]}")
    rng = np.random.default_rng(seed)
    c = _plusplus(x, k, rng)
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        d = _sq_dists(x, c)
        lab = np.argmin(d, axis=1)
        new = c.copy()
        for j in range(k):
            members = lab == j
            if members.any():
                new[j] = x[members].mean(axis=0)
            else:
                far = int(np.argmax(d[np.arange(x.shape[0]), lab]))
                new[j] = x[far]
                lab[far] = j
                d[far, :] = 0.0
        shift = np.sqrt(np.max(np.sum((new - c) ** 2, axis=1)))
        c = new
        if shift < tol:
            break
    d = _sq_dists(x, c)
    lab = np.argmin(d, axis=1)
    return KMeansResult(c, lab, float(d[np.arange(x.shape[0]), lab].sum()), n_iter)


def kmeans_init(user_reps, k: int, seed: int = 0) -> np.ndarray:
    return kmeans(user_reps, k, seed).centroids


# --------------------------------------------------------------------- config


@dataclass
class TrainConfig:
    n_clusters: int = 4
    cluster_weight: float = 0.1
    alpha: float = 1.0
    cluster_reduction: str = "mean"
    sync_every: Optional[int] = None
    lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 10
    seed: int = 0
    variant: str = "breaker"
    embedding_dim: int = 10
    rem_widths: Tuple[int, ...] = (256, 64)
    tower_widths: Tuple[int, ...] = (32, 10)
    kmeans_sample_cap: int = 100_000
    record_wall_time: bool = False

    def __post_init__(self):
        self.rem_widths = tuple(int(w) for w in self.rem_widths)
        self.tower_widths = tuple(int(w) for w in self.tower_widths)

    def validate(self) -> None:
        if self.n_clusters < 1:
            raise TrainError("n_clusters must be >= 1")
        if self.cluster_weight < 0:
            raise TrainError("cluster_weight must be >= 0")
        if not self.alpha > 0:
            raise TrainError("alpha must be > 0")
        if self.cluster_reduction not in ("mean", "sum"):
            raise TrainError("cluster_reduction must be 'mean' or 'sum'")
        if self.sync_every is not None and self.sync_every < 1:
            raise TrainError("sync_every must be >= 1")
        if not self.lr > 0:
            raise TrainError("lr must be > 0")
        if self.batch_size < 1:
            raise TrainError("batch_size must be >= 1")
        if self.epochs < 0:
            raise TrainError("epochs must be >= 0")
        if self.variant not in VARIANTS:
            raise TrainError(f"unknown variant {self.variant!r}; expected one of {', '.join(VARIANTS)}")

    def resolved_sync_every(self, n_records: int) -> int:
        if self.variant == "breaker2-":
            return 1
        if self.sync_every is not None:
            return self.sync_every
        steps = max(1, math.ceil(n_records / self.batch_size))
        return max(1, math.ceil(0.1 * steps))

    def model_spec(self, cardinalities, n_items: int) -> ModelSpec:
        return ModelSpec(
            user_cardinalities=tuple(cardinalities),
            n_items=n_items,
            embedding_dim=self.embedding_dim,
            rem_widths=self.rem_widths,
            tower_widths=self.tower_widths,
            n_clusters=self.n_clusters,
            alpha=self.alpha,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rem_widths"] = list(self.rem_widths)
        d["tower_widths"] = list(self.tower_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = sorted(set(d) - set(cls.__dataclass_fields__))
        if unknown:
            raise TrainError(f"unknown train config key(s): {', '.join(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


# ------------------------------------------------------------------- logging


@dataclass
class EpochLog:
    epoch: int
    loss: float
    loss_p: float
    loss_c: float
    recall_at_1: Optional[float] = None
    item_auc_macro: Optional[float] = None
    aer: Optional[float] = None
    seconds: Optional[float] = None


def _fmt(v) -> str:
    return "" if v is None else repr(float(v)) if isinstance(v, float) else str(v)


def logs_to_csv(logs: List[EpochLog]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for row in logs:
        w.writerow([_fmt(getattr(row, c)) for c in LOG_COLUMNS])
    return buf.getvalue()


# ------------------------------------------------------------------ training


@dataclass
class TrainResult:
    params: ParamSet
    target: ParamSet
    logs: List[EpochLog]
    adam: AdamState
    spec: ModelSpec
    config: TrainConfig
    global_step: int
    sync_every: int
    initial_centroids: np.ndarray = field(default=None, repr=False)


StepHook = Callable[[int, ParamSet, ParamSet, bool], None]


def kmeans_sample(records: Records, cap: int, rng: np.random.Generator) -> np.ndarray:
    """Feature rows of at most ``cap`` distinct users."""
    users = records.first_per_user()
    feats = users.features
    if feats.shape[0] > cap:
        feats = feats[np.sort(rng.choice(feats.shape[0], size=cap, replace=False))]
    return feats


def train(
    records: Records,
    cardinalities,
    n_items: int,
    config: TrainConfig,
    eval_records: Optional[Records] = None,
    step_hook: Optional[StepHook] = None,
) -> TrainResult:
    """Run the full joint-training procedure on ``records``.

    ``step_hook(step, params, target, synced)`` is called after every
    optimiser step (and after the sync, when one happened on that step).
    """
    config.validate()
    if len(records) == 0:
        raise TrainError("training set is empty")
    spec = config.model_spec(cardinalities, n_items)
    rng = np.random.default_rng(config.seed)
    params = model.init_params(spec, rng)
    target = model.make_target(params)

    # K-means runs for every variant so RNG consumption matches
    sample = kmeans_sample(records, config.kmeans_sample_cap, rng)
    reps, _ = model.user_forward(params, spec, sample)
    k = min(spec.n_clusters, reps.shape[0])
    if k < spec.n_clusters:
        raise TrainError(f"only {reps.shape[0]} users for {spec.n_clusters} clusters")
    params["centroids"] = kmeans_init(reps, spec.n_clusters, config.seed)
    init_mu = params["centroids"].copy()

    clustering = config.variant != "breaker1-"
    lam = config.cluster_weight if clustering else 0.0
    uniform = None if clustering else np.full(spec.n_clusters, 1.0 / spec.n_clusters)
    sync_every = config.resolved_sync_every(len(records))

    adam = AdamState.zeros_like(params)
    logs: List[EpochLog] = []
    step = 0
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        sums = np.zeros(3)
        n_steps = 0
        for batch in iterate_batches(records, config.batch_size, config.seed, epoch):
            out = model.loss_and_grads(
                params, spec, batch.features, batch.items, batch.labels,
                lam=lam, target=target, weights=uniform,
                cluster_reduction=config.cluster_reduction,
            )
            losses = out.losses
            if not all(np.isfinite(losses)):
                raise NumericAbort(step + 1, losses)
            engine.adam_step(params, out.grads, adam, config.lr)
            step += 1
            synced = step % sync_every == 0
            if synced:
                model.sync_target(params, target)
            if step_hook is not None:
                step_hook(step, params, target, synced)
            sums += losses
            n_steps += 1
        mean = sums / max(n_steps, 1)
        entry = EpochLog(epoch, float(mean[0]), float(mean[1]), float(mean[2]))
        if eval_records is not None and len(eval_records):
            from .evaluation import ranking_metrics

            r = ranking_metrics(params, spec, eval_records, uniform=not clustering)
            entry.recall_at_1, entry.item_auc_macro, entry.aer = r["recall_at_1"], r["item_auc_macro"], r["aer"]
        if config.record_wall_time:
            entry.seconds = time.perf_counter() - t0
        logs.append(entry)
        log.info("epoch %d loss=%.6f loss_p=%.6f loss_c=%.6f recall@1=%s", epoch, entry.loss,
                 entry.loss_p, entry.loss_c, entry.recall_at_1)

    return TrainResult(params, target, logs, adam, spec, config, step, sync_every, init_mu)


# ------------------------------------------------------ dense-input clustering


@dataclass
class URCMResult:
    params: ParamSet
    q: np.ndarray
    losses: List[float]


def train_urcm(
    points,
    n_clusters: int,
    widths=(16, 8),
    alpha: float = 1.0,
    lr: float = 1e-3,
    batch_size: int = 256,
    epochs: int = 50,
    sync_every: Optional[int] = None,
    seed: int = 0,
) -> URCMResult:
    """Clustering branch alone on continuous inputs (classification loss detached).

    Same recipe as :func:`train` restricted to L_c: dense input -> MLP ->
    Student-t assignment against centroids, pseudo-labels from a delayed copy
    of the MLP, K-means initialised centroids.
    """
    x = np.asarray(points, dtype=np.float64)
    rng = np.random.default_rng(seed)
    dims = [x.shape[1], *widths]
    params: ParamSet = {}
    for l in range(len(dims) - 1):
        params[f"rem.{l}.W"] = engine.he_normal(rng, dims[l + 1], dims[l])
        params[f"rem.{l}.b"] = np.zeros(dims[l + 1])
    layers = lambda ps: [(ps[f"rem.{l}.W"], ps[f"rem.{l}.b"]) for l in range(len(dims) - 1)]
    target = {n: v.copy() for n, v in params.items()}
    reps, _ = engine.mlp_forward(x, layers(params))
    params["centroids"] = kmeans_init(reps, n_clusters, seed)
    steps_per_epoch = math.ceil(x.shape[0] / batch_size)
    m = sync_every or max(1, math.ceil(0.1 * steps_per_epoch))
    adam = AdamState.zeros_like(params)
    step = 0
    losses = []
    for epoch in range(epochs):
        order = np.random.default_rng([seed, epoch]).permutation(x.shape[0])
        total = 0.0
        for start in range(0, x.shape[0], batch_size):
            xb = x[order[start:start + batch_size]]
            e_t, _ = engine.mlp_forward(xb, layers(target))
            p = model.target_distribution(model.soft_assign(e_t, params["centroids"], alpha))
            e, cache = engine.mlp_forward(xb, layers(params))
            q = model.soft_assign(e, params["centroids"], alpha)
            loss, g_q = model.clustering_loss(p, q)
            de, dmu = model.soft_assign_backward(g_q, e, params["centroids"], alpha, q)
            _, lg = engine.mlp_backward(de, layers(params), cache)
            grads = {"centroids": dmu}
            for l, (dW, db) in enumerate(lg):
                grads[f"rem.{l}.W"], grads[f"rem.{l}.b"] = dW, db
            engine.adam_step(params, grads, adam, lr)
            step += 1
            if step % m == 0:
                for n in target:
                    np.copyto(target[n], params[n])
            total += loss
        losses.append(total)
    e, _ = engine.mlp_forward(x, layers(params))
    return URCMResult(params, model.soft_assign(e, params["centroids"], alpha), losses)
