"""Objective-specific group sampling weights and their signed-gradient updates."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .backbone import MfModel, topk_from_scores
from .dataset import InteractionDataset, ItemCatalog

_logger = logging.getLogger(__name__)

OBJECTIVES = ("accuracy", "revenue", "fairness", "alignment")
EXPOSURE_SMOOTHING = 1e-6


@dataclass
class GroupWeightTable:
    """Sampling weights over groups of train interactions for one objective.

    ``members[j]`` holds row indices into ``dataset.train`` for group
    ``group_ids[j]``.
    """

    objective: str
    group_ids: list[int]
    members: list[np.ndarray]
    weights: np.ndarray
    step_size: float = 0.1
    floor: float = 1e-4

    def sizes(self) -> list[int]:
        return [len(m) for m in self.members]

    def copy(self) -> GroupWeightTable:
        return GroupWeightTable(self.objective, list(self.group_ids), self.members,
                                self.weights.copy(), self.step_size, self.floor)

    def to_dict(self) -> dict:
        return {
            "objective": self.objective,
            "groups": [
                {"id": int(g), "weight": float(w), "size": int(len(m))}
                for g, w, m in zip(self.group_ids, self.weights, self.members)
            ],
            "step_size": self.step_size,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


@dataclass
class ExposureDistribution:
    """Per-bucket recommendation exposure ``P`` against train frequency ``Q``."""

    P: np.ndarray
    Q: np.ndarray
    raw_P: np.ndarray = field(default=None, repr=False)
    raw_Q: np.ndarray = field(default=None, repr=False)


def renormalize(table: GroupWeightTable) -> GroupWeightTable:
    """Clamp weights at the floor, then rescale onto the simplex."""
    w = np.maximum(np.asarray(table.weights, dtype=float), table.floor)
    table.weights = w / w.sum()
    return table


def _make_table(objective, labels, n_groups, raw_weights, dataset, step_size, floor):
    """Group train rows by ``labels`` and drop groups with no members."""
    order = np.argsort(labels, kind="stable")
    bounds = np.searchsorted(labels[order], np.arange(n_groups + 1))
    ids, members, weights = [], [], []
    for g in range(n_groups):
        rows = order[bounds[g] : bounds[g + 1]]
        if len(rows) == 0:
            warnings.warn(f"{objective}: group {g} is empty and was dropped", stacklevel=3)
            continue
        ids.append(g)
        members.append(rows)
        weights.append(raw_weights[g])
    if not ids:
        raise ValueError("train split is empty")
    table = GroupWeightTable(objective, ids, members, np.asarray(weights, float),
                             step_size, floor)
    w = table.weights
    table.weights = w / w.sum()
    return table


def price_bins(prices: np.ndarray, n_bins: int = 10) -> np.ndarray:
    """Equal-count bins over train rows sorted by price (ascending)."""
    n = len(prices)
    n_bins = min(n_bins, n)
    order = np.argsort(prices, kind="stable")
    labels = np.empty(n, dtype=np.int64)
    labels[order] = np.arange(n) * n_bins // n
    return labels


def init_weights(objective: str, dataset: InteractionDataset, catalog: ItemCatalog,
                 step_size: float = 0.1, floor: float = 1e-4,
                 n_price_bins: int = 10) -> GroupWeightTable:
    """Initial sampling table for one objective.

    accuracy: one group of every train row. revenue: equal-count price bins
    weighted by mean bin price. fairness: item categories weighted by their
    interaction count. alignment: popularity buckets, uniform.
    """
    items = dataset.train[:, 1]
    if objective == "accuracy":
        labels = np.zeros(len(items), dtype=np.int64)
        return _make_table(objective, labels, 1, np.ones(1), dataset, step_size, floor)
    if objective == "revenue":
        prices = catalog.price[items]
        labels = price_bins(prices, n_price_bins)
        n = int(labels.max()) + 1
        mean_price = np.bincount(labels, prices, n) / np.bincount(labels, minlength=n)
        if mean_price.sum() <= 0:
            raise ValueError("revenue objective needs positive prices")
        return _make_table(objective, labels, n, mean_price, dataset, step_size, floor)
    if objective == "fairness":
        labels = catalog.category[items]
        n = catalog.n_categories
        counts = np.bincount(labels, minlength=n).astype(float)
        return _make_table(objective, labels, n, counts, dataset, step_size, floor)
    if objective == "alignment":
        labels = catalog.pop_bucket[items]
        n = catalog.n_buckets
        return _make_table(objective, labels, n, np.ones(n), dataset, step_size, floor)
    raise ValueError(f"unknown objective {objective!r}")


def draw_batch(table: GroupWeightTable, dataset: InteractionDataset, batch_size: int,
               rng: np.random.Generator) -> np.ndarray:
    """Sample (user, item) positives: a group by weight, then a member uniformly."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if len(dataset.train) == 0:
        raise ValueError("train split is empty")
    if len(table.group_ids) == 1:
        rows = table.members[0][rng.integers(0, len(table.members[0]), batch_size)]
        return dataset.train[rows]
    cdf = np.cumsum(table.weights)
    cdf[-1] = 1.0
    groups = np.searchsorted(cdf, rng.random(batch_size), side="right")
    u = rng.random(batch_size)
    sizes = np.asarray(table.sizes())
    within = np.minimum((u * sizes[groups]).astype(np.int64), sizes[groups] - 1)
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    rows = np.concatenate(table.members)[offsets[groups] + within]
    return dataset.train[rows]


def update_fairness_weights(table: GroupWeightTable, group_losses) -> GroupWeightTable:
    """Raise the weight of the group with the largest validation loss by one step.

    ``group_losses`` is aligned with ``table.group_ids``; ties go to the first.
    """
    if table.objective != "fairness":
        raise ValueError("fairness update applied to a non-fairness table")
    losses = np.asarray(group_losses, dtype=float)
    if losses.shape != table.weights.shape:
        raise ValueError("one loss per group required")
    worst = int(np.argmax(losses))
    w = table.weights.copy()
    w[worst] += table.step_size
    table.weights = w
    return renormalize(table)


def update_alignment_weights(table: GroupWeightTable,
                             exposure: ExposureDistribution) -> GroupWeightTable:
    """Step each bucket's weight against the sign of ``P - Q``."""
    if table.objective != "alignment":
        raise ValueError("alignment update applied to a non-alignment table")
    gid = np.asarray(table.group_ids)
    if gid.max() >= len(exposure.P):
        raise ValueError("exposure buckets do not cover the table groups")
    direction = np.sign(exposure.P[gid] - exposure.Q[gid])
    table.weights = table.weights - table.step_size * direction
    return renormalize(table)


def bucket_histogram(items: np.ndarray, buckets: np.ndarray, n_buckets: int,
                     smoothing: float = EXPOSURE_SMOOTHING):
    """(smoothed, raw) frequency of each bucket among ``items``."""
    counts = np.bincount(buckets[np.asarray(items, dtype=np.int64).ravel()],
                         minlength=n_buckets).astype(float)
    total = counts.sum()
    raw = counts / total if total else counts
    smoothed = raw + smoothing
    return smoothed / smoothed.sum(), raw


def recommended_items(model: MfModel, dataset: InteractionDataset, users, k: int = 10,
                      chunk: int = 2048) -> np.ndarray:
    """Top-k lists (train items excluded) for ``users``, shape (len(users), k)."""
    users = np.asarray(users, dtype=np.int64)
    out = np.empty((len(users), k), dtype=np.int64)
    for start in range(0, len(users), chunk):
        part = users[start : start + chunk]
        scores = model.scores_for(part)
        mask = np.zeros(scores.shape, dtype=bool)
        for r, u in enumerate(part):
            mask[r, dataset.train_items[u]] = True
        out[start : start + chunk] = topk_from_scores(scores, k, mask)
    return out


def exposure_from_lists(rec_lists: np.ndarray, dataset: InteractionDataset,
                        catalog: ItemCatalog) -> ExposureDistribution:
    nb = catalog.n_buckets
    P, raw_P = bucket_histogram(rec_lists, catalog.pop_bucket, nb)
    Q, raw_Q = bucket_histogram(dataset.train[:, 1], catalog.pop_bucket, nb)
    return ExposureDistribution(P, Q, raw_P, raw_Q)


def exposure_distribution(model: MfModel, dataset: InteractionDataset, catalog: ItemCatalog,
                          k: int = 10, split: str = "valid") -> ExposureDistribution:
    """Bucket exposure of the model's top-k lists for the users of ``split``."""
    users = getattr(dataset, split)[:, 0]
    if len(users) == 0:
        raise ValueError(f"{split} split has no users")
    return exposure_from_lists(recommended_items(model, dataset, users, k), dataset, catalog)
