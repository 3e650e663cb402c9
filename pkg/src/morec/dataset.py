"""Interaction data: loading, K-core filtering, leave-one-out splits, item
catalogs and a synthetic generator for desk-scale experiments."""

from __future__ import annotations

import logging
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import named_rng

_logger = logging.getLogger(__name__)

UNKNOWN_CATEGORY = "unknown"
DEFAULT_PRICE = 1.0


class ParseError(ValueError):
    """A malformed row in an input file."""

    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}, line {lineno}: {msg}")
        self.path = path
        self.lineno = lineno


@dataclass
class RawInteractions:
    """Parsed interaction records, in file order."""

    users: list[str] = field(default_factory=list)
    items: list[str] = field(default_factory=list)
    timestamps: list[int] = field(default_factory=list)
    ratings: list[float | None] = field(default_factory=list)
    # set by kcore_filter when nothing survives
    empty_warning: bool = False

    def __len__(self) -> int:
        return len(self.users)

    def append(self, user: str, item: str, ts: int, rating: float | None = None):
        self.users.append(user)
        self.items.append(item)
        self.timestamps.append(ts)
        self.ratings.append(rating)

    def subset(self, keep) -> RawInteractions:
        keep = list(keep)
        return RawInteractions(
            [self.users[i] for i in keep],
            [self.items[i] for i in keep],
            [self.timestamps[i] for i in keep],
            [self.ratings[i] for i in keep],
        )

    def records(self):
        return list(zip(self.users, self.items, self.timestamps, self.ratings))


@dataclass
class InteractionDataset:
    """Dense-indexed interactions split into train / valid / test.

    ``valid`` and ``test`` hold at most one pair per user. ``train_items[u]``
    is the sorted array of item indices user ``u`` interacted with in train.
    """

    user_ids: list[str]
    item_ids: list[str]
    train: np.ndarray  # (n, 2) int64 of (user, item)
    valid: np.ndarray
    test: np.ndarray
    train_items: list[np.ndarray]

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    def train_mask(self) -> tuple[np.ndarray, np.ndarray]:
        """(rows, cols) of every train pair, for masking score matrices."""
        return self.train[:, 0], self.train[:, 1]


@dataclass
class ItemCatalog:
    price: np.ndarray  # float, per item
    category: np.ndarray  # int, dense category index per item
    category_names: list[str]
    pop_count: np.ndarray  # int, train interactions per item
    pop_bucket: np.ndarray  # int in 0..n_buckets-1, 0 = most popular

    @property
    def n_items(self) -> int:
        return len(self.price)

    @property
    def n_categories(self) -> int:
        return len(self.category_names)

    @property
    def n_buckets(self) -> int:
        return int(self.pop_bucket.max()) + 1 if len(self.pop_bucket) else 0


# ---------------------------------------------------------------------------
# loading / writing


def load_interactions(
    path,
    header: bool = False,
    rating_threshold: float | None = 3.0,
    columns: tuple[int, int, int, int | None] = (0, 1, 2, 3),
) -> RawInteractions:
    """Read a TSV of ``user_id item_id timestamp [rating]``.

    Rows whose rating is below ``rating_threshold`` are dropped; files
    without a rating column are never filtered. Pass
    ``rating_threshold=None`` to keep every row.
    """
    path = Path(path)
    ucol, icol, tcol, rcol = columns
    raw = RawInteractions()
    seen = set()
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if header and lineno == 1:
                continue
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) <= max(ucol, icol, tcol):
                raise ParseError(path, lineno, f"expected at least 3 columns, got {len(parts)}")
            try:
                ts = int(parts[tcol])
            except ValueError:
                raise ParseError(path, lineno, f"non-integer timestamp {parts[tcol]!r}") from None
            if ts < 0:
                raise ParseError(path, lineno, "negative timestamp")
            rating = None
            if rcol is not None and len(parts) > rcol and parts[rcol] != "":
                try:
                    rating = float(parts[rcol])
                except ValueError:
                    raise ParseError(path, lineno, f"non-numeric rating {parts[rcol]!r}") from None
            if rating is not None and rating_threshold is not None and rating < rating_threshold:
                continue
            key = (parts[ucol], parts[icol], ts)
            if key in seen:
                continue
            seen.add(key)
            raw.append(parts[ucol], parts[icol], ts, rating)
    return raw


def load_item_metadata(path, header: bool = False) -> dict[str, tuple[str, float]]:
    """Read ``item_id category price`` rows into ``{item_id: (category, price)}``."""
    path = Path(path)
    meta = {}
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if header and lineno == 1:
                continue
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) < 3:
                raise ParseError(path, lineno, "expected item_id, category, price")
            try:
                price = float(parts[2])
            except ValueError:
                raise ParseError(path, lineno, f"non-numeric price {parts[2]!r}") from None
            if price < 0 or not np.isfinite(price):
                raise ParseError(path, lineno, f"invalid price {price}")
            meta[parts[0]] = (parts[1], price)
    return meta


def write_interactions(raw: RawInteractions, path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for u, i, t, r in raw.records():
            if r is None:
                fh.write(f"{u}\t{i}\t{t}\n")
            else:
                fh.write(f"{u}\t{i}\t{t}\t{r:g}\n")


def write_item_metadata(meta: dict[str, tuple[str, float]], path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for item, (cat, price) in meta.items():
            fh.write(f"{item}\t{cat}\t{price:.6f}\n")


# ---------------------------------------------------------------------------
# filtering and splitting


def kcore_filter(raw: RawInteractions, k: int) -> RawInteractions:
    """Keep the maximal subset where every user and item has >= k interactions."""
    if k < 1:
        raise ValueError("k must be >= 1")
    _, ucode = np.unique(np.asarray(raw.users, dtype=object), return_inverse=True)
    _, icode = np.unique(np.asarray(raw.items, dtype=object), return_inverse=True)
    alive = np.ones(len(raw), dtype=bool)
    while alive.any():
        ucount = np.bincount(ucode[alive], minlength=ucode.max() + 1)
        icount = np.bincount(icode[alive], minlength=icode.max() + 1)
        drop = alive & ((ucount[ucode] < k) | (icount[icode] < k))
        if not drop.any():
            break
        alive &= ~drop
    out = raw.subset(np.flatnonzero(alive))
    if len(raw) and not len(out):
        warnings.warn(f"{k}-core filtering removed every interaction", stacklevel=2)
        out.empty_warning = True
    return out


def leave_one_out_split(raw: RawInteractions) -> InteractionDataset:
    """Latest interaction per user to test, second latest to valid, rest to train.

    Ties on timestamp go to the later row. Users with fewer than three
    interactions only contribute to train.
    """
    user_ids = sorted(set(raw.users))
    item_ids = sorted(set(raw.items))
    uidx = {u: n for n, u in enumerate(user_ids)}
    iidx = {i: n for n, i in enumerate(item_ids)}

    per_user = defaultdict(list)
    for row, (u, i, t) in enumerate(zip(raw.users, raw.items, raw.timestamps)):
        per_user[uidx[u]].append((t, row, iidx[i]))

    train, valid, test = [], [], []
    for u in range(len(user_ids)):
        hist = sorted(per_user[u])
        if len(hist) >= 3:
            test.append((u, hist[-1][2]))
            valid.append((u, hist[-2][2]))
            hist = hist[:-2]
        train.extend((u, e) for _, _, e in hist)

    train_arr = np.asarray(train, dtype=np.int64).reshape(-1, 2)
    train_items = [np.empty(0, dtype=np.int64) for _ in user_ids]
    if len(train_arr):
        order = np.lexsort((train_arr[:, 1], train_arr[:, 0]))
        sorted_pairs = train_arr[order]
        bounds = np.searchsorted(sorted_pairs[:, 0], np.arange(len(user_ids) + 1))
        for u in range(len(user_ids)):
            train_items[u] = np.unique(sorted_pairs[bounds[u] : bounds[u + 1], 1])

    return InteractionDataset(
        user_ids=user_ids,
        item_ids=item_ids,
        train=train_arr,
        valid=np.asarray(valid, dtype=np.int64).reshape(-1, 2),
        test=np.asarray(test, dtype=np.int64).reshape(-1, 2),
        train_items=train_items,
    )


def popularity_buckets(pop_count: np.ndarray, n_buckets: int = 10) -> np.ndarray:
    """Equal-item-count buckets over popularity rank; 0 holds the most popular.

    When the item count does not divide evenly, the leftover items go one
    each to the most popular buckets. Ties in count are ordered by item index.
    """
    n = len(pop_count)
    if n_buckets < 1 or n_buckets > n:
        raise ValueError(f"cannot split {n} items into {n_buckets} buckets")
    order = np.lexsort((np.arange(n), -np.asarray(pop_count)))
    base, extra = divmod(n, n_buckets)
    sizes = np.full(n_buckets, base)
    sizes[:extra] += 1
    buckets = np.empty(n, dtype=np.int64)
    buckets[order] = np.repeat(np.arange(n_buckets), sizes)
    return buckets


def build_catalog(
    items_meta: dict[str, tuple[str, float]] | None,
    dataset: InteractionDataset,
    n_buckets: int = 10,
) -> ItemCatalog:
    """Attach price, category and train popularity to every dataset item."""
    items_meta = items_meta or {}
    price = np.empty(dataset.n_items)
    cat_names: list[str] = []
    cat_index: dict[str, int] = {}
    category = np.empty(dataset.n_items, dtype=np.int64)
    for n, item in enumerate(dataset.item_ids):
        cat, p = items_meta.get(item, (UNKNOWN_CATEGORY, DEFAULT_PRICE))
        price[n] = p
        if cat not in cat_index:
            cat_index[cat] = len(cat_names)
            cat_names.append(cat)
        category[n] = cat_index[cat]
    pop = np.bincount(dataset.train[:, 1], minlength=dataset.n_items).astype(np.int64)
    return ItemCatalog(
        price=price,
        category=category,
        category_names=cat_names,
        pop_count=pop,
        pop_bucket=popularity_buckets(pop, n_buckets),
    )


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthConfig:
    n_users: int = 1000
    n_items: int = 300
    n_interactions: int = 20000
    n_categories: int = 5
    zipf_exponent: float = 1.0
    price_range: tuple[float, float] = (1.0, 100.0)
    latent_dim: int = 8
    # scale of user/item affinity inside the softmax
    affinity_scale: float = 2.0
    # popularity multiplier for category 0; < 1 starves it of interactions
    underserved_scale: float = 1.0

    def validate(self):
        if self.n_users < 1 or self.n_items < 1:
            raise ValueError("n_users and n_items must be positive")
        if self.n_interactions < 3 * self.n_users:
            raise ValueError("n_interactions must be at least 3 * n_users")
        per_user = -(-self.n_interactions // self.n_users)
        if per_user > self.n_items:
            raise ValueError("more interactions per user than items")
        if not 1 <= self.n_categories <= self.n_items:
            raise ValueError("n_categories must be in 1..n_items")
        lo, hi = self.price_range
        if lo < 0 or hi < lo:
            raise ValueError("price_range must satisfy 0 <= lo <= hi")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")


def synth_generate(cfg: SynthConfig, seed: int):
    """Generate interactions and item metadata from a latent-factor model.

    Each user draws a fixed quota of distinct items with probability
    proportional to ``softmax(affinity) * zipf(rank)``. Categories are
    assigned round-robin over popularity rank. Returns
    ``(RawInteractions, {item_id: (category, price)})``.
    """
    cfg.validate()
    rng = named_rng(seed, "synth")
    n_u, n_i, d = cfg.n_users, cfg.n_items, cfg.latent_dim

    user_vec = rng.standard_normal((n_u, d))
    item_vec = rng.standard_normal((n_i, d))
    # item index == popularity rank before the id shuffle
    zipf = (np.arange(n_i) + 1.0) ** -cfg.zipf_exponent
    category = np.arange(n_i) % cfg.n_categories
    zipf = np.where(category == 0, zipf * cfg.underserved_scale, zipf)
    price = rng.uniform(cfg.price_range[0], cfg.price_range[1], size=n_i)

    quota = np.full(n_u, cfg.n_interactions // n_u)
    quota[: cfg.n_interactions % n_u] += 1

    logits = cfg.affinity_scale * (user_vec @ item_vec.T) / np.sqrt(d)
    logits -= logits.max(axis=1, keepdims=True)
    weights = np.exp(logits) * zipf
    weights /= weights.sum(axis=1, keepdims=True)

    item_names = [f"i{n:05d}" for n in rng.permutation(n_i)]
    raw = RawInteractions()
    for u in range(n_u):
        # Gumbel top-k: weighted sampling without replacement
        keys = np.log(weights[u]) + rng.gumbel(size=n_i)
        chosen = rng.permutation(np.argsort(-keys, kind="stable")[: quota[u]])
        ts = np.sort(rng.integers(0, 10**9, size=quota[u]))
        ts += np.arange(quota[u])  # strictly increasing
        for e, t in zip(chosen, ts):
            raw.append(f"u{u:05d}", item_names[e], int(t))
    meta = {
        item_names[e]: (f"c{category[e]}", round(float(price[e]), 6)) for e in range(n_i)
    }
    meta = dict(sorted(meta.items()))
    return raw, meta
