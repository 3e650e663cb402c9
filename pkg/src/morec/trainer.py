"""Pretraining and the continual tri-level training loop.

Each continual step draws one batch per active objective from that
objective's group weight table, weights the per-objective losses with the
coordinator output and takes a single Adam step. After every epoch the
fairness and alignment tables are updated from the validation split.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .backbone import (Grads, MfModel, NegativeSampler, OptimizerState, apply_gradients,
                       batch_loss)
from .coordinator import (PiControllerState, PreferenceVector, objective_coefficients,
                          pi_alpha, static_alpha)
from .dataset import InteractionDataset, ItemCatalog
from .metrics import EvalReport, evaluate, imp
from .objectives import (KINDS, batch_objective_loss, inverse_popularity_surrogate_loss,
                         pearson_fairness_loss, revenue_surrogate_loss, ObjectiveSpec)
from .rng import make_streams
from .sampler import (GroupWeightTable, draw_batch, exposure_distribution, init_weights,
                      update_alignment_weights, update_fairness_weights)

_logger = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    """Raised when a loss or gradient stops being finite."""


@dataclass
class TrainConfig:
    objectives: list[str] = field(default_factory=lambda: ["accuracy"])
    # preference over the non-accuracy objectives (pi mode)
    rho: dict[str, float] = field(default_factory=dict)
    pref_scale: float = 0.2
    # static mode weights, ordered like ``objectives``
    rho_full: list[float] | None = None
    mode: str = "pi"
    target_loss: float | str = "auto"
    target_scale: float = 1.0
    kp: float = 0.01
    ki: float = 0.001
    alpha_min: float = 0.1
    windup_cap: float | None = None
    step_size: float = 0.1
    weight_floor: float = 1e-4
    epochs: int = 50
    patience: int = 5
    batch_size: int = 512
    steps_per_epoch: int | None = None
    n_negatives: int = 10
    negatives: str = "popularity"
    loss: str = "bpr"
    lr: float = 1e-3
    weight_decay: float = 0.0
    dim: int = 64
    init_std: float = 0.1
    use_bias: bool = True
    eval_k: int = 10
    validity_ratio: float = 0.97
    seed: int = 0

    def validate(self) -> TrainConfig:
        errors = []
        if self.patience < 1:
            errors.append("patience must be >= 1")
        if self.batch_size < 1:
            errors.append("batch_size must be >= 1")
        if self.epochs < 1:
            errors.append("epochs must be >= 1")
        if self.n_negatives < 1:
            errors.append("n_negatives must be >= 1")
        if not self.objectives or self.objectives[0] != "accuracy":
            errors.append("objectives must start with 'accuracy'")
        if self.objectives.count("accuracy") != 1:
            errors.append("exactly one accuracy objective is required")
        for o in self.objectives:
            if o not in KINDS:
                errors.append(f"unknown objective {o!r}")
        if len(set(self.objectives)) != len(self.objectives):
            errors.append("duplicate objectives")
        for o in self.rho:
            if o not in self.objectives or o == "accuracy":
                errors.append(f"preference given for inactive objective {o!r}")
        if self.mode not in ("pi", "static"):
            errors.append(f"unknown coordinator mode {self.mode!r}")
        if self.mode == "static":
            if self.rho_full is None or len(self.rho_full) != len(self.objectives):
                errors.append("static mode needs rho_full with one weight per objective")
        if self.negatives not in ("popularity", "uniform"):
            errors.append(f"unknown negative sampling {self.negatives!r}")
        if self.loss not in ("bpr", "bce"):
            errors.append(f"unknown loss {self.loss!r}")
        if not (self.target_loss == "auto" or isinstance(self.target_loss, (int, float))):
            errors.append("target_loss must be a number or 'auto'")
        if errors:
            raise ValueError("; ".join(errors))
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainHistory:
    epochs: list[dict] = field(default_factory=list)
    # per step: (step, acc_loss, err, err_sum, alpha_acc)
    steps: list[tuple] = field(default_factory=list)
    best_epoch: int | None = None
    target_loss: float | None = None

    def acc_losses(self) -> np.ndarray:
        return np.array([e["acc_loss"] for e in self.epochs])

    def step_losses(self) -> np.ndarray:
        return np.array([s[1] for s in self.steps])

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e) + "\n" for e in self.epochs)

    def alpha_trace_rows(self):
        return [(s[0], s[2], s[3], s[4]) for s in self.steps]


def _negative_sampler(dataset: InteractionDataset, catalog: ItemCatalog | None, cfg: TrainConfig):
    if cfg.negatives == "popularity":
        pop = (catalog.pop_count if catalog is not None
               else np.bincount(dataset.train[:, 1], minlength=dataset.n_items))
    else:
        pop = np.ones(dataset.n_items)
    return NegativeSampler(pop, dataset.train, dataset.n_items)


def _steps_per_epoch(dataset, cfg):
    return cfg.steps_per_epoch or max(1, math.ceil(len(dataset.train) / cfg.batch_size))


def init_model(dataset: InteractionDataset, cfg: TrainConfig) -> MfModel:
    rng = make_streams(cfg.seed, "init")["init"]
    return MfModel.init(dataset.n_users, dataset.n_items, cfg.dim, rng, cfg.init_std,
                        cfg.use_bias)


def new_optimizer(cfg: TrainConfig) -> OptimizerState:
    return OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)


def accuracy_epoch(model, opt, dataset, table, neg_sampler, cfg, streams, trace=None):
    """One epoch of plain accuracy training; returns the epoch-mean batch loss."""
    losses = []
    for _ in range(_steps_per_epoch(dataset, cfg)):
        batch = draw_batch(table, dataset, cfg.batch_size, streams["sampler"])
        negs = neg_sampler(batch[:, 0], batch[:, 1], cfg.n_negatives, streams["negatives"])
        loss, grads, _ = batch_loss(model, batch[:, 0], batch[:, 1], negs, cfg.loss)
        value = float(loss.mean())
        if not math.isfinite(value):
            raise TrainingAborted(f"non-finite accuracy loss at optimizer step {opt.step}")
        apply_gradients(model, opt, grads)
        losses.append(value)
        if trace is not None:
            trace.append(value)
    return float(np.mean(losses))


def pretrain(model: MfModel, dataset: InteractionDataset, cfg: TrainConfig,
             catalog: ItemCatalog | None = None, history: list | None = None):
    """Accuracy-only training with early stopping on validation Hit@k.

    Returns ``(best_model, train_loss_at_best_epoch)``. Per-epoch records are
    appended to ``history`` when given.
    """
    cfg.validate()
    streams = make_streams(cfg.seed, "pretrain-sampler", "pretrain-negatives")
    streams = {"sampler": streams["pretrain-sampler"],
               "negatives": streams["pretrain-negatives"]}
    table = _accuracy_table(dataset)
    negs = _negative_sampler(dataset, catalog, cfg)
    opt = new_optimizer(cfg)
    best = (-1.0, model.copy(), float("nan"), 0)
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        try:
            loss = accuracy_epoch(model, opt, dataset, table, negs, cfg, streams)
        except FloatingPointError as exc:
            raise TrainingAborted(str(exc)) from exc
        hit = _valid_hit(model, dataset, cfg.eval_k)
        _logger.info("pretrain epoch %d loss %.4f valid hit %.4f", epoch, loss, hit)
        if history is not None:
            history.append({"epoch": epoch, "loss": loss, "valid_hit": hit})
        if hit > best[0]:
            best = (hit, model.copy(), loss, epoch)
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    _logger.info("pretrain best epoch %d (valid hit %.4f)", best[3], best[0])
    return best[1], best[2]


def _accuracy_table(dataset):
    rows = np.arange(len(dataset.train))
    return GroupWeightTable("accuracy", [0], [rows], np.ones(1))


def _valid_hit(model, dataset, k):
    from .metrics import hit_at_k

    return hit_at_k(model, dataset, k, split="valid")


def category_losses(model, dataset, catalog, group_ids, valid_negs, mode):
    """Mean validation loss of each category in ``group_ids``.

    Categories without validation pairs get loss 0 so they never win the
    argmax.
    """
    pairs = dataset.valid
    loss, _, _ = batch_loss(model, pairs[:, 0], pairs[:, 1], valid_negs, mode, with_grads=False)
    cats = catalog.category[pairs[:, 1]]
    n = catalog.n_categories
    sums = np.bincount(cats, loss, n)
    counts = np.bincount(cats, minlength=n)
    means = np.divide(sums, counts, out=np.zeros(n), where=counts > 0)
    return means[np.asarray(group_ids)]


def resolve_target(cfg: TrainConfig, pretrain_loss: float | None) -> float:
    if cfg.target_loss == "auto":
        if pretrain_loss is None or not math.isfinite(pretrain_loss):
            raise ValueError("target_loss='auto' needs the converged pretrain loss")
        base = pretrain_loss
    else:
        base = float(cfg.target_loss)
    return base * cfg.target_scale


def continual_train(model: MfModel, dataset: InteractionDataset, catalog: ItemCatalog,
                    cfg: TrainConfig, pretrain_loss: float | None = None,
                    base_valid: EvalReport | None = None):
    """Multi-objective continual training from a pretrained model.

    Returns ``(best_model, TrainHistory)``. The best epoch maximizes
    validation Imp over the starting model among epochs whose validation
    Hit stays within ``validity_ratio`` of it.
    """
    cfg.validate()
    model = model.copy()
    objectives = list(cfg.objectives)
    if "revenue" in objectives and np.all(catalog.price <= 0):
        raise ValueError("revenue objective needs item prices")
    target = resolve_target(cfg, pretrain_loss)
    streams = make_streams(cfg.seed, "continual-sampler", "continual-negatives",
                           "valid-negatives")
    rng_sampler = streams["continual-sampler"]
    rng_neg = streams["continual-negatives"]
    negs = _negative_sampler(dataset, catalog, cfg)
    valid_negs = negs(dataset.valid[:, 0], dataset.valid[:, 1], cfg.n_negatives,
                      streams["valid-negatives"]) if len(dataset.valid) else None

    tables = {o: init_weights(o, dataset, catalog, cfg.step_size, cfg.weight_floor)
              for o in objectives}
    pref = (PreferenceVector({o: cfg.rho.get(o, 0.0) for o in objectives[1:]}, cfg.pref_scale)
            if cfg.mode == "pi" else None)
    controller = PiControllerState(target, cfg.kp, cfg.ki, cfg.alpha_min, cfg.windup_cap)
    static_w = static_alpha(cfg.rho_full) if cfg.mode == "static" else None

    if base_valid is None:
        base_valid = evaluate(model, dataset, catalog, cfg.eval_k, split="valid")
    opt = new_optimizer(cfg)
    history = TrainHistory(target_loss=target)
    best_score, best_model, stale = -math.inf, None, 0
    fallback_hit, fallback_model, fallback_epoch = -1.0, None, None
    n_steps = _steps_per_epoch(dataset, cfg)

    for epoch in range(1, cfg.epochs + 1):
        acc_sum = 0.0
        obj_sums = np.zeros(len(objectives))
        alpha_sum = 0.0
        for _ in range(n_steps):
            if cfg.mode == "pi":
                acc_loss, obj_losses, alpha, grads = _pi_step(
                    model, dataset, tables, objectives, pref, controller, negs, cfg,
                    rng_sampler, rng_neg)
                err, err_sum = controller.last_err, controller.err_sum
            else:
                acc_loss, obj_losses, alpha, grads = _static_step(
                    model, dataset, catalog, tables["accuracy"], objectives, static_w, negs,
                    cfg, rng_sampler, rng_neg)
                err, err_sum = target - acc_loss, 0.0
            try:
                apply_gradients(model, opt, grads)
            except FloatingPointError as exc:
                raise TrainingAborted(f"epoch {epoch}: {exc}") from exc
            history.steps.append((opt.step, acc_loss, err, err_sum, alpha))
            acc_sum += acc_loss
            obj_sums += obj_losses
            alpha_sum += alpha

        if cfg.mode == "pi":
            if "fairness" in tables and valid_negs is not None:
                t = tables["fairness"]
                update_fairness_weights(t, category_losses(model, dataset, catalog,
                                                           t.group_ids, valid_negs, cfg.loss))
            if "alignment" in tables:
                update_alignment_weights(tables["alignment"],
                                         exposure_distribution(model, dataset, catalog,
                                                               cfg.eval_k, split="valid"))

        report = evaluate(model, dataset, catalog, cfg.eval_k, split="valid")
        score = imp(base_valid, report, strict=False)
        valid = report.hit >= cfg.validity_ratio * base_valid.hit
        record = {
            "epoch": epoch,
            "acc_loss": acc_sum / n_steps,
            "objective_losses": dict(zip(objectives, (obj_sums / n_steps).tolist())),
            "alpha_acc": alpha_sum / n_steps,
            "target_loss": target,
            "weights": {o: t.to_dict() for o, t in tables.items()},
            "valid": report.to_dict(),
            "valid_imp": score,
            "valid_ok": valid,
        }
        history.epochs.append(record)
        _logger.info("epoch %d acc loss %.4f (target %.4f) alpha %.4f valid hit %.4f imp %.2f",
                     epoch, record["acc_loss"], target, record["alpha_acc"], report.hit, score)

        if report.hit > fallback_hit:
            fallback_hit, fallback_model, fallback_epoch = report.hit, model.copy(), epoch
        if valid and score > best_score:
            best_score, best_model, history.best_epoch = score, model.copy(), epoch
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break

    if best_model is None:
        best_model, history.best_epoch = fallback_model, fallback_epoch
    return best_model, history


def _pi_step(model, dataset, tables, objectives, pref, controller, negs, cfg, rng_s, rng_n):
    losses = np.empty(len(objectives))
    grads = []
    for j, o in enumerate(objectives):
        batch = draw_batch(tables[o], dataset, cfg.batch_size, rng_s)
        neg = negs(batch[:, 0], batch[:, 1], cfg.n_negatives, rng_n)
        losses[j], g = batch_objective_loss(ObjectiveSpec(o), batch, neg, model, cfg.loss)
        grads.append(g)
    if not np.all(np.isfinite(losses)):
        raise TrainingAborted(f"non-finite objective loss {losses}")
    alpha, _ = pi_alpha(controller, losses[0])
    coef = objective_coefficients(alpha, pref, objectives)
    return losses[0], losses, alpha, _combine(grads, coef)


def _static_step(model, dataset, catalog, acc_table, objectives, weights, negs, cfg,
                 rng_s, rng_n):
    batch = draw_batch(acc_table, dataset, cfg.batch_size, rng_s)
    neg = negs(batch[:, 0], batch[:, 1], cfg.n_negatives, rng_n)
    losses = np.empty(len(objectives))
    grads = []
    for j, o in enumerate(objectives):
        if o == "accuracy":
            losses[j], g = batch_objective_loss(ObjectiveSpec(o, True), batch, neg, model,
                                                cfg.loss)
        elif o == "revenue":
            losses[j], g = revenue_surrogate_loss(model, batch, neg, catalog.price, cfg.loss)
        elif o == "alignment":
            losses[j], g = inverse_popularity_surrogate_loss(model, batch, neg,
                                                             catalog.pop_count, cfg.loss)
        else:
            losses[j], g = pearson_fairness_loss(model, batch, catalog.category)
        grads.append(g)
    if not np.all(np.isfinite(losses)):
        raise TrainingAborted(f"non-finite objective loss {losses}")
    return losses[0], losses, float(weights[0]), _combine(grads, weights)


def _combine(grads: list[Grads], coef) -> Grads:
    out = Grads(*(coef[0] * a for _, a in grads[0].items()))
    for c, g in zip(coef[1:], grads[1:]):
        for name, a in g.items():
            getattr(out, name).__iadd__(c * a)
    return out
