"""Synthetic RCT logs with planted user clusters, dataset I/O and batching.

On-disk layout of a dataset directory::

    train.csv, test.csv   user_id,item_id,label,true_cluster,f0,...,f{m-1}
    manifest.json         item count, feature cardinalities, record counts
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional

import numpy as np

FORMAT_VERSION = 1
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK64 = (1 << 64) - 1


class DataError(ValueError):
    pass


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & MASK64
    return h


def rct_assign(user_id: str, n_items: int) -> int:
    """Bucket a user onto one item: FNV-1a-64(utf-8 id) mod n_items."""
    if n_items < 1:
        raise DataError("n_items must be >= 1")
    return fnv1a_64(str(user_id).encode("utf-8")) % n_items


@dataclass
class SyntheticConfig:
    n_users: int
    n_items: int
    k_true: int = 4
    m_inf: int = 3
    m_noise: int = 5
    eta: float = 0.2
    beta: Optional[List[float]] = None
    gamma: float = 1.0
    preference: Optional[List[List[float]]] = None
    feature_cardinality: int = 8
    impressions_per_user: int = 1
    test_fraction: float = 0.2
    seed: int = 0

    def validate(self) -> None:
        if self.n_users < 1 or self.n_items < 1:
            raise DataError("n_users and n_items must be >= 1")
        if self.k_true < 2:
            raise DataError("k_true must be >= 2")
        if self.m_inf < 0 or self.m_noise < 0 or self.m_inf + self.m_noise < 1:
            raise DataError("need at least one user feature")
        if not 0.0 <= self.eta <= 1.0:
            raise DataError("eta must be a probability")
        if not 0.0 <= self.test_fraction < 1.0:
            raise DataError("test_fraction must lie in [0, 1)")
        if self.feature_cardinality < self.k_true:
            raise DataError("feature_cardinality must be >= k_true")
        if self.impressions_per_user < 1:
            raise DataError("impressions_per_user must be >= 1")
        if self.beta is not None and len(self.beta) != self.k_true:
            raise DataError(f"beta needs {self.k_true} entries, got {len(self.beta)}")
        if self.preference is not None:
            a = np.asarray(self.preference, dtype=np.float64)
            if a.shape != (self.k_true, self.n_items):
                raise DataError(f"preference must be {self.k_true} x {self.n_items}, got {a.shape}")
            if np.max(np.abs(a.sum(axis=1))) > 1e-9:
                raise DataError("preference rows must sum to 0")

    def resolved_beta(self) -> np.ndarray:
        if self.beta is not None:
            return np.asarray(self.beta, dtype=np.float64)
        return np.linspace(-3.0, -1.0, self.k_true)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - known)
        if unknown:
            raise DataError(f"unknown data config key(s): {', '.join(unknown)}")
        missing = [k for k in ("n_users", "n_items") if k not in d]
        if missing:
            raise DataError(f"missing required data config key: {missing[0]}")
        return cls(**d)


@dataclass
class Records:
    """Column-oriented records of one split."""

    user_ids: np.ndarray
    items: np.ndarray
    labels: np.ndarray
    true_cluster: np.ndarray
    features: np.ndarray

    def __len__(self) -> int:
        return int(self.items.shape[0])

    def take(self, idx) -> "Records":
        return Records(self.user_ids[idx], self.items[idx], self.labels[idx],
                       self.true_cluster[idx], self.features[idx])

    def first_per_user(self) -> "Records":
        _, first = np.unique(self.user_ids, return_index=True)
        return self.take(np.sort(first))


@dataclass
class Batch:
    features: np.ndarray
    items: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return int(self.items.shape[0])


@dataclass
class Manifest:
    n_items: int
    feature_names: List[str]
    cardinalities: List[int]
    counts: dict
    generator: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Manifest":
        try:
            d = json.loads(text)
            m = cls(**d)
        except (json.JSONDecodeError, TypeError) as exc:
            raise DataError(f"malformed manifest: {exc}") from exc
        if m.format_version != FORMAT_VERSION:
            raise DataError(f"unsupported manifest version {m.format_version}")
        return m


@dataclass
class Dataset:
    train: Records
    test: Records
    manifest: Manifest


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def preference_matrix(cfg: SyntheticConfig, rng: np.random.Generator) -> np.ndarray:
    if cfg.preference is not None:
        return np.asarray(cfg.preference, dtype=np.float64)
    a = rng.normal(size=(cfg.k_true, cfg.n_items))
    return a - a.mean(axis=1, keepdims=True)


def simulate(cfg: SyntheticConfig):
    """Draw all users in memory; returns ``(train, test, preference)``."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    pref = preference_matrix(cfg, rng)
    beta = cfg.resolved_beta()
    n, card = cfg.n_users, cfg.feature_cardinality

    cluster = rng.integers(0, cfg.k_true, size=n)
    corrupt = rng.random((n, cfg.m_inf)) < cfg.eta
    replacement = rng.integers(0, card, size=(n, cfg.m_inf))
    informative = np.where(corrupt, replacement, cluster[:, None])
    noise = rng.integers(0, card, size=(n, cfg.m_noise))
    feats = np.concatenate([informative, noise], axis=1).astype(np.int64)

    user_ids = np.array([f"u{i}" for i in range(n)])
    items = np.array([rct_assign(u, cfg.n_items) for u in user_ids], dtype=np.int64)
    prob = _sigmoid(beta[cluster] + cfg.gamma * pref[cluster, items])
    labels = (rng.random((n, cfg.impressions_per_user)) < prob[:, None]).astype(np.int64)

    n_test = int(round(cfg.test_fraction * n))
    is_test = np.zeros(n, dtype=bool)
    is_test[rng.permutation(n)[:n_test]] = True

    def split(mask):
        users = np.flatnonzero(mask)
        rep = np.repeat(users, cfg.impressions_per_user)
        return Records(user_ids[rep], items[rep], labels[users].reshape(-1),
                       cluster[rep], feats[rep])

    return split(~is_test), split(is_test), pref


def _write_csv(path: Path, recs: Records) -> None:
    m = recs.features.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_id", "item_id", "label", "true_cluster", *[f"f{j}" for j in range(m)]])
        for r in range(len(recs)):
            w.writerow([recs.user_ids[r], int(recs.items[r]), int(recs.labels[r]),
                        int(recs.true_cluster[r]), *recs.features[r].tolist()])


def _counts(train: Records, test: Records) -> dict:
    return {
        "train_records": len(train),
        "test_records": len(test),
        "train_positive": int(train.labels.sum()),
        "test_positive": int(test.labels.sum()),
        "train_users": int(np.unique(train.user_ids).size),
        "test_users": int(np.unique(test.user_ids).size),
    }


def write_dataset(out_dir, train: Records, test: Records, manifest: Manifest) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "train.csv", train)
    _write_csv(out / "test.csv", test)
    (out / "manifest.json").write_text(manifest.to_json())


def generate_synthetic(cfg: SyntheticConfig, out_dir) -> Manifest:
    train, test, pref = simulate(cfg)
    gen = asdict(cfg)
    gen["beta"] = cfg.resolved_beta().tolist()
    gen["preference"] = pref.tolist()
    m = cfg.m_inf + cfg.m_noise
    manifest = Manifest(
        n_items=cfg.n_items,
        feature_names=[f"f{j}" for j in range(m)],
        cardinalities=[cfg.feature_cardinality] * m,
        counts=_counts(train, test),
        generator=gen,
    )
    write_dataset(out_dir, train, test, manifest)
    return manifest


def _read_csv(path: Path, n_features: int) -> Records:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path.name}: empty file")
    header = rows[0]
    expected = ["user_id", "item_id", "label", "true_cluster", *[f"f{j}" for j in range(n_features)]]
    if header != expected:
        raise DataError(f"{path.name}: header {header} does not match manifest ({len(expected) - 4} features)")
    body = rows[1:]
    try:
        ints = np.array([[int(v) if v != "" else -1 for v in r[1:]] for r in body], dtype=np.int64)
    except ValueError as exc:
        raise DataError(f"{path.name}: non-integer field ({exc})") from exc
    if ints.size == 0:
        ints = ints.reshape(0, 3 + n_features)
    if ints.shape[1] != 3 + n_features:
        raise DataError(f"{path.name}: ragged rows")
    return Records(np.array([r[0] for r in body]), ints[:, 0], ints[:, 1], ints[:, 2], ints[:, 3:])


def _check_split(name: str, recs: Records, manifest: Manifest) -> None:
    counts = manifest.counts
    if len(recs) != counts.get(f"{name}_records"):
        raise DataError(f"{name}: {len(recs)} records on disk, manifest says {counts.get(f'{name}_records')}")
    if int(recs.labels.sum()) != counts.get(f"{name}_positive"):
        raise DataError(f"{name}: positive count differs from manifest")
    if len(recs) and not np.all((recs.labels == 0) | (recs.labels == 1)):
        raise DataError(f"{name}: labels outside {{0,1}}")
    if len(recs) and (recs.items.min() < 0 or recs.items.max() >= manifest.n_items):
        raise DataError(f"{name}: item id outside [0, {manifest.n_items})")
    card = np.asarray(manifest.cardinalities)
    if len(recs):
        bad = (recs.features < 0) | (recs.features >= card)
        if bad.any():
            pos = int(np.argwhere(bad)[0][1])
            raise DataError(f"{name}: feature {manifest.feature_names[pos]} exceeds cardinality {card[pos]}")


def load_manifest(data_dir) -> Manifest:
    path = Path(data_dir) / "manifest.json"
    return Manifest.from_json(path.read_text())


def load_dataset(data_dir) -> Dataset:
    d = Path(data_dir)
    manifest = load_manifest(d)
    m = len(manifest.cardinalities)
    if len(manifest.feature_names) != m:
        raise DataError("manifest feature names and cardinalities differ in length")
    train = _read_csv(d / "train.csv", m)
    test = _read_csv(d / "test.csv", m)
    _check_split("train", train, manifest)
    _check_split("test", test, manifest)
    return Dataset(train, test, manifest)


def iterate_batches(records: Records, batch_size: int, seed: int, epoch: int) -> Iterator[Batch]:
    """Shuffle once per ``(seed, epoch)`` and yield every record exactly once."""
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    order = np.random.default_rng([seed, epoch]).permutation(len(records))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield Batch(records.features[idx], records.items[idx], records.labels[idx])
