import numpy as np
import pytest

from breaker import model


@pytest.fixture
def small_spec():
    return model.ModelSpec(
        user_cardinalities=(5, 3, 4),
        n_items=6,
        embedding_dim=3,
        rem_widths=(8, 5),
        tower_widths=(4, 3),
        n_clusters=3,
    )


@pytest.fixture
def small_batch(small_spec):
    rng = np.random.default_rng(7)
    b = 9
    feats = np.stack([rng.integers(0, c, b) for c in small_spec.user_cardinalities], axis=1)
    items = rng.integers(0, small_spec.n_items, b)
    labels = rng.integers(0, 2, b)
    return feats, items, labels


@pytest.fixture
def small_params(small_spec):
    rng = np.random.default_rng(3)
    params = model.init_params(small_spec, rng)
    # scale up the tiny init so ReLUs and the Student-t kernel are exercised,
    # but keep the sigmoid clear of the clamp
    for name in params:
        if name.endswith("_emb"):
            params[name] = params[name] * 30.0
        elif name.startswith("tower.") and name.endswith(".W"):
            params[name] = params[name] * 3.0
        elif name.endswith(".b"):
            # zero biases put dead units exactly on the ReLU kink
            params[name] = rng.normal(scale=0.1, size=params[name].shape)
    params["centroids"] = rng.normal(size=params["centroids"].shape)
    return params
