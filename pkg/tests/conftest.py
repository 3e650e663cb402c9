from __future__ import annotations

import numpy as np
import pytest

from morec.dataset import InteractionDataset, ItemCatalog, popularity_buckets

ACCEPTANCE_LINES: list[str] = []


def make_dataset(n_users, n_items, train, valid=(), test=()):
    train = np.asarray(train, dtype=np.int64).reshape(-1, 2)
    items = [np.unique(train[train[:, 0] == u, 1]) for u in range(n_users)]
    return InteractionDataset(
        user_ids=[f"u{u}" for u in range(n_users)],
        item_ids=[f"i{i}" for i in range(n_items)],
        train=train,
        valid=np.asarray(valid, dtype=np.int64).reshape(-1, 2),
        test=np.asarray(test, dtype=np.int64).reshape(-1, 2),
        train_items=items,
    )


def make_catalog(ds, price=None, category=None, n_buckets=None):
    n = ds.n_items
    pop = np.bincount(ds.train[:, 1], minlength=n)
    category = np.zeros(n, dtype=np.int64) if category is None else np.asarray(category)
    return ItemCatalog(
        price=np.ones(n) if price is None else np.asarray(price, float),
        category=category,
        category_names=[f"c{c}" for c in range(int(category.max()) + 1)],
        pop_count=pop,
        pop_bucket=popularity_buckets(pop, n_buckets or min(10, n)),
    )


def random_instance(rng, n_users=None, n_items=None, dim=4, n_cats=3):
    """Random model, dataset and catalog with one test pair per user."""
    from morec.backbone import MfModel

    n_users = n_users or int(rng.integers(2, 51))
    n_items = n_items or int(rng.integers(15, 101))
    train = []
    test = []
    for u in range(n_users):
        hist = rng.choice(n_items, size=int(rng.integers(1, 6)), replace=False)
        train.extend((u, int(i)) for i in hist[1:])
        test.append((u, int(hist[0])))
    # make sure every item has a popularity entry
    ds = make_dataset(n_users, n_items, train, test, test)
    cat = make_catalog(ds, price=rng.uniform(0, 50, n_items),
                       category=rng.integers(0, n_cats, n_items))
    model = MfModel.init(n_users, n_items, dim, rng, std=1.0)
    model.item_bias[:] = rng.normal(0, 0.5, n_items)
    # coarse scores so ties occur and the tie rule is exercised
    model.user_emb[:] = np.round(model.user_emb, 1)
    model.item_emb[:] = np.round(model.item_emb, 1)
    model.item_bias[:] = np.round(model.item_bias, 1)
    return model, ds, cat


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
