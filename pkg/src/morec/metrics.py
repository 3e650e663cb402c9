"""Top-k evaluation metrics, the Imp aggregate, Pareto dominance and the
solution-selection rule."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .backbone import MfModel
from .dataset import InteractionDataset, ItemCatalog
from .sampler import bucket_histogram, recommended_items

VALIDITY_RATIO = 0.97
METRICS = ("hit", "rhit", "pop_kl", "min_hit")
# +1: higher is better, -1: lower is better
METRIC_DIRECTIONS = {"hit": 1, "rhit": 1, "pop_kl": -1, "min_hit": 1}


@dataclass
class EvalReport:
    hit: float
    rhit: float
    pop_kl: float
    min_hit: float
    k: int = 10
    per_category: dict[str, float] = field(default_factory=dict)
    n_users: int = 0

    def vector(self, metrics=METRICS) -> np.ndarray:
        return np.array([getattr(self, m) for m in metrics], dtype=float)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> EvalReport:
        return cls(**d)


def kl_divergence(q, p) -> float:
    """D_KL(q || p) in nats."""
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    nz = q > 0
    return float(np.sum(q[nz] * np.log(q[nz] / p[nz])))


def report_from_lists(rec_lists: np.ndarray, targets: np.ndarray, dataset: InteractionDataset,
                      catalog: ItemCatalog) -> EvalReport:
    """Metrics from precomputed top-k lists; ``targets[j]`` is the held-out item
    of the user whose list is ``rec_lists[j]``."""
    rec_lists = np.asarray(rec_lists)
    targets = np.asarray(targets)
    hits = (rec_lists == targets[:, None]).any(axis=1)
    cats = catalog.category[targets]
    per_cat = {}
    for c in np.unique(cats):
        per_cat[catalog.category_names[c]] = float(hits[cats == c].mean())
    P, _ = bucket_histogram(rec_lists, catalog.pop_bucket, catalog.n_buckets)
    Q, _ = bucket_histogram(dataset.train[:, 1], catalog.pop_bucket, catalog.n_buckets)
    return EvalReport(
        hit=float(hits.mean()),
        # correctly rounded, so the value does not depend on user order
        rhit=math.fsum(hits * catalog.price[targets]) / len(targets),
        pop_kl=kl_divergence(Q, P),
        min_hit=min(per_cat.values()),
        k=rec_lists.shape[1],
        per_category=per_cat,
        n_users=len(targets),
    )


def evaluate(model: MfModel, dataset: InteractionDataset, catalog: ItemCatalog, k: int = 10,
             split: str = "test") -> EvalReport:
    """All four metrics on the held-out pairs of ``split``."""
    pairs = getattr(dataset, split)
    if len(pairs) == 0:
        raise ValueError(f"{split} split is empty")
    lists = recommended_items(model, dataset, pairs[:, 0], k)
    return report_from_lists(lists, pairs[:, 1], dataset, catalog)


def hit_at_k(model, dataset, k: int = 10, split: str = "test") -> float:
    pairs = getattr(dataset, split)
    if len(pairs) == 0:
        raise ValueError(f"{split} split is empty")
    lists = recommended_items(model, dataset, pairs[:, 0], k)
    return float((lists == pairs[:, 1][:, None]).any(axis=1).mean())


def rhit_at_k(model, dataset, catalog, k: int = 10, split: str = "test") -> float:
    return evaluate(model, dataset, catalog, k, split).rhit


def pop_kl(model, dataset, catalog, k: int = 10, split: str = "test") -> float:
    return evaluate(model, dataset, catalog, k, split).pop_kl


def min_hit(model, dataset, catalog, k: int = 10, split: str = "test") -> float:
    return evaluate(model, dataset, catalog, k, split).min_hit


def imp(base: EvalReport, sol: EvalReport, strict: bool = True) -> float:
    """Mean relative improvement over ``base`` across the four metrics, in percent.

    With ``strict=False`` metrics whose base value is zero are skipped
    instead of raising.
    """
    gains = []
    for m in METRICS:
        b, s = getattr(base, m), getattr(sol, m)
        if b == 0:
            if strict:
                raise ZeroDivisionError(f"base {m} is zero; Imp is undefined")
            continue
        gains.append(METRIC_DIRECTIONS[m] * (s - b) / b)
    if not gains:
        return 0.0
    return 100.0 * float(np.mean(gains))


def is_valid(sol: EvalReport, base: EvalReport, ratio: float = VALIDITY_RATIO) -> bool:
    return sol.hit >= ratio * base.hit


# ---------------------------------------------------------------------------
# Pareto tools


def pareto_frontier(points, directions) -> np.ndarray:
    """Indices of the non-dominated rows of ``points``.

    ``directions`` holds "max"/"min" (or +1/-1) per column. A row dominates
    another when it is no worse on every column and strictly better on one.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2:
        raise ValueError("points must be a 2-d array")
    if len(pts) == 0:
        return np.empty(0, dtype=np.int64)
    sign = np.array([_direction(d) for d in directions], dtype=float)
    if len(sign) != pts.shape[1]:
        raise ValueError("one direction per metric required")
    s = pts * sign
    ge = (s[:, None, :] >= s[None, :, :]).all(axis=2)
    gt = (s[:, None, :] > s[None, :, :]).any(axis=2)
    dominated = (ge & gt).any(axis=0)
    return np.flatnonzero(~dominated)


def _direction(d) -> int:
    if d in ("max", 1, +1):
        return 1
    if d in ("min", -1):
        return -1
    raise ValueError(f"bad direction {d!r}")


@dataclass
class Solution:
    label: str
    digest: str
    report: EvalReport
    imp: float = 0.0
    valid: bool = True
    is_base: bool = False

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "digest": self.digest,
            "report": self.report.to_dict(),
            "imp": self.imp,
            "valid": self.valid,
            "is_base": self.is_base,
        }


@dataclass
class SolutionSet:
    base: Solution
    solutions: list[Solution] = field(default_factory=list)

    @classmethod
    def build(cls, base_report: EvalReport, labelled, digest: str = "",
              strict: bool = False) -> SolutionSet:
        """Score ``(label, EvalReport)`` pairs against the base report."""
        base = Solution("base", digest, base_report, 0.0, True, is_base=True)
        sols = [
            Solution(label, digest, rep, imp(base_report, rep, strict=strict),
                     is_valid(rep, base_report))
            for label, rep in labelled
        ]
        return cls(base, sols)

    def to_json(self) -> str:
        return json.dumps({"base": self.base.to_dict(),
                           "solutions": [s.to_dict() for s in self.solutions]}, indent=2)


def select_solution(solutions, base: EvalReport) -> Solution:
    """Best Imp among valid solutions, or the highest Hit when none is valid.

    Ties keep the earliest solution in ``solutions``.
    """
    solutions = list(solutions.solutions if isinstance(solutions, SolutionSet) else solutions)
    if not solutions:
        raise ValueError("no solutions to select from")
    valid = [s for s in solutions if is_valid(s.report, base)]
    if valid:
        return max(valid, key=lambda s: s.imp)
    return max(solutions, key=lambda s: s.report.hit)
