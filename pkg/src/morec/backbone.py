"""Matrix-factorization backbone with hand-derived gradients and Adam."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PROB_CLAMP = 1e-7
CHECKPOINT_VERSION = 1
PARAMS = ("user_emb", "item_emb", "item_bias")
# above this many user-item cells the seen-set is kept sparse
DENSE_SEEN_LIMIT = 50_000_000


def sigmoid(x):
    # tanh form avoids overflow warnings for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


@dataclass
class MfModel:
    user_emb: np.ndarray
    item_emb: np.ndarray
    item_bias: np.ndarray
    use_bias: bool = True

    @classmethod
    def init(cls, n_users: int, n_items: int, dim: int = 64, rng=None,
             std: float = 0.1, use_bias: bool = True) -> MfModel:
        if dim < 1:
            raise ValueError("embedding dim must be >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        return cls(
            user_emb=rng.normal(0.0, std, (n_users, dim)),
            item_emb=rng.normal(0.0, std, (n_items, dim)),
            item_bias=np.zeros(n_items),
            use_bias=use_bias,
        )

    @property
    def dim(self) -> int:
        return self.user_emb.shape[1]

    @property
    def n_users(self) -> int:
        return self.user_emb.shape[0]

    @property
    def n_items(self) -> int:
        return self.item_emb.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAMS}

    def copy(self) -> MfModel:
        return MfModel(self.user_emb.copy(), self.item_emb.copy(),
                       self.item_bias.copy(), self.use_bias)

    def scores_for(self, users) -> np.ndarray:
        """Full score matrix for a set of users, shape (len(users), n_items)."""
        out = self.user_emb[np.asarray(users)] @ self.item_emb.T
        if self.use_bias:
            out += self.item_bias
        return out


def score(model: MfModel, u: int, e: int) -> float:
    if not (0 <= u < model.n_users and 0 <= e < model.n_items):
        raise IndexError(f"index out of range: user {u}, item {e}")
    s = float(model.user_emb[u] @ model.item_emb[e])
    return s + float(model.item_bias[e]) if model.use_bias else s


def _pair_scores(model: MfModel, users, items):
    s = np.einsum("...d,...d->...", model.user_emb[users], model.item_emb[items])
    if model.use_bias:
        s = s + model.item_bias[items]
    return s


def _neg_log_sigmoid(x):
    """-ln clamp(sigmoid(x)) and its derivative (zero where the clamp is active)."""
    p = sigmoid(x)
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    active = (p > PROB_CLAMP) & (p < 1.0 - PROB_CLAMP)
    return -np.log(pc), np.where(active, p - 1.0, 0.0)


def score_losses(s_pos: np.ndarray, s_neg: np.ndarray, mode: str = "bpr"):
    """Per-sample loss and its derivatives with respect to the scores.

    ``s_pos`` has shape (B,), ``s_neg`` (B, n). Returns ``(loss, d_pos, d_neg)``.
    """
    n = s_neg.shape[1]
    if mode == "bpr":
        val, der = _neg_log_sigmoid(s_pos[:, None] - s_neg)
        loss = val.mean(axis=1)
        d_neg = -der / n
        d_pos = der.sum(axis=1) / n
    elif mode == "bce":
        pv, pd = _neg_log_sigmoid(s_pos)
        # -ln(1 - sigmoid(x)) == -ln sigmoid(-x)
        nv, nd = _neg_log_sigmoid(-s_neg)
        loss = (pv + nv.sum(axis=1)) / (n + 1)
        d_pos = pd / (n + 1)
        d_neg = -nd / (n + 1)
    else:
        raise ValueError(f"unknown loss mode {mode!r}")
    return loss, d_pos, d_neg


@dataclass
class Grads:
    user_emb: np.ndarray
    item_emb: np.ndarray
    item_bias: np.ndarray

    @classmethod
    def zeros_like(cls, model: MfModel) -> Grads:
        return cls(np.zeros_like(model.user_emb), np.zeros_like(model.item_emb),
                   np.zeros_like(model.item_bias))

    def items(self):
        return ((name, getattr(self, name)) for name in PARAMS)

    def __iadd__(self, other: Grads) -> Grads:
        for name, g in other.items():
            getattr(self, name).__iadd__(g)
        return self


def _segment_sum(index, rows, n):
    """``out[index[j]] += rows[j]`` for an (m, d) block, via bincount."""
    d = rows.shape[1]
    flat = (index[:, None] * d + np.arange(d)).ravel()
    return np.bincount(flat, weights=rows.ravel(), minlength=n * d).reshape(n, d)


def backprop_scores(model: MfModel, users, items, d_score, out: Grads | None = None) -> Grads:
    """Accumulate d(loss)/d(params) given d(loss)/d(score) for (user, item) pairs.

    ``users``, ``items`` and ``d_score`` broadcast to a common shape.
    """
    users, items, d_score = np.broadcast_arrays(users, items, d_score)
    users, items, d_score = users.ravel(), items.ravel(), d_score.ravel()
    g = out if out is not None else Grads.zeros_like(model)
    g.user_emb += _segment_sum(users, d_score[:, None] * model.item_emb[items], model.n_users)
    g.item_emb += _segment_sum(items, d_score[:, None] * model.user_emb[users], model.n_items)
    if model.use_bias:
        g.item_bias += np.bincount(items, weights=d_score, minlength=model.n_items)
    return g


def batch_loss(model: MfModel, users, pos, negs, mode: str = "bpr",
               weights=None, with_grads: bool = True):
    """Per-sample losses for a batch plus gradients of ``sum(weights * loss)``.

    ``weights`` defaults to ``1/B`` (the batch mean). Returns
    ``(per_sample_loss, grads, pos_scores)``; ``grads`` is None when not
    requested.
    """
    users = np.asarray(users)
    pos = np.asarray(pos)
    negs = np.asarray(negs)
    if negs.ndim != 2 or negs.shape[1] == 0:
        raise ValueError("negatives must be a non-empty (B, n) array")
    s_pos = _pair_scores(model, users, pos)
    s_neg = _pair_scores(model, users[:, None], negs)
    loss, d_pos, d_neg = score_losses(s_pos, s_neg, mode)
    if not with_grads:
        return loss, None, s_pos
    w = np.full(len(users), 1.0 / len(users)) if weights is None else np.asarray(weights, float)
    n = negs.shape[1]
    g = backprop_scores(
        model,
        np.concatenate([users, np.repeat(users, n)]),
        np.concatenate([pos, negs.ravel()]),
        np.concatenate([w * d_pos, (w[:, None] * d_neg).ravel()]),
    )
    return loss, g, s_pos


def sample_loss(model: MfModel, u: int, e_pos: int, negatives, mode: str = "bpr"):
    """Loss of a single positive against its negatives, with gradients."""
    negatives = list(negatives)
    if not negatives:
        raise ValueError("need at least one negative")
    if e_pos in negatives:
        raise ValueError("negatives must not contain the positive item")
    loss, g, _ = batch_loss(model, [u], [e_pos], [negatives], mode)
    return float(loss[0]), g


# ---------------------------------------------------------------------------
# negative sampling


def sample_negatives(pop_dist, n: int, exclude=(), rng=None) -> np.ndarray:
    """Draw ``n`` items i.i.d. with probability proportional to ``pop_dist``,
    never returning an item from ``exclude``."""
    rng = rng if rng is not None else np.random.default_rng()
    p = np.asarray(pop_dist, dtype=float).copy()
    excl = np.fromiter(exclude, dtype=np.int64) if exclude is not None else np.empty(0, int)
    if len(excl):
        p[excl] = 0.0
    total = p.sum()
    if total <= 0:
        raise ValueError("no sampling mass outside the excluded items")
    if n == 0:
        return np.empty(0, dtype=np.int64)
    # zeroing the excluded mass is equivalent to rejection sampling
    return rng.choice(len(p), size=n, p=p / total)


class NegativeSampler:
    """Batched popularity-proportional negatives excluding each user's train items."""

    def __init__(self, pop_dist, train_pairs: np.ndarray, n_items: int):
        p = np.asarray(pop_dist, dtype=float)
        if p.sum() <= 0:
            raise ValueError("negative sampling distribution has no mass")
        self.cdf = np.cumsum(p / p.sum())
        self.cdf[-1] = 1.0
        self.n_items = n_items
        n_users = int(train_pairs[:, 0].max()) + 1 if len(train_pairs) else 0
        if n_users * n_items <= DENSE_SEEN_LIMIT:
            self._dense = np.zeros((n_users + 1, n_items), dtype=bool)
            self._dense[train_pairs[:, 0], train_pairs[:, 1]] = True
        else:
            self._dense = None
            self._seen = np.unique(train_pairs[:, 0] * n_items + train_pairs[:, 1])

    def _is_seen(self, users, items):
        if self._dense is not None:
            u = np.minimum(users, self._dense.shape[0] - 1)
            return self._dense[u, items]
        return np.isin(users * self.n_items + items, self._seen)

    def _draw(self, size, rng):
        return np.searchsorted(self.cdf, rng.random(size), side="right")

    def __call__(self, users, pos, n: int, rng, max_rounds: int = 100) -> np.ndarray:
        users = np.asarray(users)
        out = self._draw((len(users), n), rng)
        for _ in range(max_rounds):
            bad = self._is_seen(users[:, None], out) | (out == np.asarray(pos)[:, None])
            if not bad.any():
                return out
            out[bad] = self._draw(int(bad.sum()), rng)
        # users whose history covers nearly all the mass: fall back to the
        # positive-only exclusion so the batch still has valid negatives
        bad = out == np.asarray(pos)[:, None]
        while bad.any():
            out[bad] = self._draw(int(bad.sum()), rng)
            bad = out == np.asarray(pos)[:, None]
        return out


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    """Adam moments and hyperparameters."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def copy(self) -> OptimizerState:
        return OptimizerState(self.lr, self.beta1, self.beta2, self.eps, self.weight_decay,
                              self.step, {k: a.copy() for k, a in self.m.items()},
                              {k: a.copy() for k, a in self.v.items()})


def apply_gradients(model: MfModel, opt: OptimizerState, grads: Grads):
    """One bias-corrected Adam step, in place. Returns ``(model, opt)``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name}")
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1**opt.step
    c2 = 1.0 - b2**opt.step
    for name, g in grads.items():
        if name == "item_bias" and not model.use_bias:
            continue
        p = getattr(model, name)
        if opt.weight_decay:
            g = g + opt.weight_decay * p
        m = opt.m.setdefault(name, np.zeros_like(p))
        v = opt.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    return model, opt


# ---------------------------------------------------------------------------
# ranking


def topk_from_scores(scores: np.ndarray, k: int, exclude_mask=None) -> np.ndarray:
    """Row-wise top-k indices by descending score, ties by ascending index."""
    scores = np.array(scores, dtype=float, ndmin=2)
    if exclude_mask is not None:
        scores[exclude_mask] = -np.inf
        eligible = (~np.asarray(exclude_mask)).sum(axis=1).min()
    else:
        eligible = scores.shape[1]
    if k > eligible or k < 0:
        raise ValueError(f"cannot take top-{k} from {eligible} eligible items")
    return np.argsort(-scores, axis=1, kind="stable")[:, :k]


def topk_recommend(model: MfModel, u: int, k: int = 10, exclude=()) -> list[int]:
    if not 0 <= u < model.n_users:
        raise IndexError(f"user {u} out of range")
    mask = np.zeros((1, model.n_items), dtype=bool)
    mask[0, list(exclude)] = True
    return topk_from_scores(model.scores_for([u]), k, mask)[0].tolist()


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: MfModel, path, config_hash: str = "") -> None:
    """Write an ``.npz`` holding the parameter arrays and a JSON header."""
    header = {
        "format": "morec-mf",
        "version": CHECKPOINT_VERSION,
        "dim": model.dim,
        "n_users": model.n_users,
        "n_items": model.n_items,
        "use_bias": model.use_bias,
        "config_hash": config_hash,
    }
    with Path(path).open("wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header)), **model.params())


def load_checkpoint(path) -> tuple[MfModel, dict]:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header.get("format") != "morec-mf":
            raise ValueError(f"{path} is not a MoRec MF checkpoint")
        model = MfModel(z["user_emb"].copy(), z["item_emb"].copy(),
                        z["item_bias"].copy(), bool(header["use_bias"]))
    return model, header
