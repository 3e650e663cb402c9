"""Objective losses on sampled batches and the differentiable surrogates used by
the static scalarization baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import Grads, MfModel, backprop_scores, batch_loss

KINDS = ("accuracy", "revenue", "fairness", "alignment")


@dataclass(frozen=True)
class ObjectiveSpec:
    kind: str
    surrogate_mode: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown objective {self.kind!r}")


def batch_objective_loss(spec: ObjectiveSpec, batch, negatives, model: MfModel,
                         mode: str = "bpr"):
    """Mean accuracy loss of a batch and its gradients.

    The objective only decides how ``batch`` was sampled; the loss is the
    same for every kind.
    """
    batch = np.asarray(batch)
    if len(batch) == 0:
        raise ValueError("empty batch")
    loss, grads, _ = batch_loss(model, batch[:, 0], batch[:, 1], negatives, mode)
    return float(loss.mean()), grads


def _weighted_mean_loss(model, batch, negatives, w, mode):
    batch = np.asarray(batch)
    w = np.asarray(w, dtype=float)
    total = w.sum()
    loss, grads, _ = batch_loss(model, batch[:, 0], batch[:, 1], negatives, mode,
                                weights=w / total)
    return float(w @ loss / total), grads


def revenue_surrogate_loss(model: MfModel, batch, negatives, prices, mode: str = "bpr"):
    """Price-weighted mean of per-sample losses."""
    batch = np.asarray(batch)
    w = np.asarray(prices, dtype=float)[batch[:, 1]]
    if np.any(w < 0):
        raise ValueError("prices must be non-negative")
    if w.sum() <= 0:
        raise ValueError("all batch prices are zero")
    return _weighted_mean_loss(model, batch, negatives, w, mode)


def inverse_popularity_surrogate_loss(model: MfModel, batch, negatives, pop_counts,
                                      mode: str = "bpr"):
    """Per-sample losses averaged with weights ``1 / popularity``."""
    batch = np.asarray(batch)
    pop = np.asarray(pop_counts, dtype=float)[batch[:, 1]]
    if np.any(pop < 1):
        raise ValueError("batch items need a popularity of at least 1")
    return _weighted_mean_loss(model, batch, negatives, 1.0 / pop, mode)


def _tiny(x):
    # variance indistinguishable from rounding noise
    return len(x) * (1e-12 * max(1.0, float(np.abs(x).max()))) ** 2


def pearson_fairness_regularizer(pred, attr):
    """|Pearson correlation| between two samples and its gradient w.r.t. ``pred``.

    Returns ``(0.0, zeros)`` when either sample has zero variance.
    """
    pred = np.asarray(pred, dtype=float)
    attr = np.asarray(attr, dtype=float)
    if len(pred) < 2 or pred.shape != attr.shape:
        raise ValueError("need two equally sized samples of length >= 2")
    a = pred - pred.mean()
    b = attr - attr.mean()
    saa = a @ a
    sbb = b @ b
    if saa <= _tiny(pred) or sbb <= _tiny(attr):
        return 0.0, np.zeros_like(pred)
    denom = np.sqrt(saa * sbb)
    r = (a @ b) / denom
    grad = b / denom - r * a / saa
    return float(abs(r)), np.sign(r) * grad


def pearson_fairness_loss(model: MfModel, batch, category):
    """|Pearson| between positive-pair scores and the item category index."""
    batch = np.asarray(batch)
    users, items = batch[:, 0], batch[:, 1]
    pred = np.einsum("nd,nd->n", model.user_emb[users], model.item_emb[items])
    if model.use_bias:
        pred = pred + model.item_bias[items]
    value, d_pred = pearson_fairness_regularizer(pred, np.asarray(category)[items])
    if not np.any(d_pred):
        return value, Grads.zeros_like(model)
    return value, backprop_scores(model, users, items, d_pred)
