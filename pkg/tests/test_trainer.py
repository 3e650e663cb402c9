import numpy as np
import pytest
from conftest import make_catalog

from morec.backbone import OptimizerState
from morec.coordinator import PiControllerState
from morec.dataset import (RawInteractions, SynthConfig, build_catalog, kcore_filter,
                           leave_one_out_split, synth_generate)
from morec.metrics import hit_at_k
from morec.rng import make_streams
from morec.sampler import init_weights
from morec.trainer import (TrainConfig, TrainingAborted, _accuracy_table, _negative_sampler,
                           accuracy_epoch, continual_train, init_model, pretrain,
                           resolve_target)


def small_synth(seed=0, **kw):
    s = dict(n_users=150, n_items=60, n_interactions=1800, n_categories=3)
    s.update(kw)
    raw, meta = synth_generate(SynthConfig(**s), seed)
    ds = leave_one_out_split(kcore_filter(raw, 5))
    return ds, build_catalog(meta, ds)


def quick(**kw):
    base = dict(dim=8, epochs=3, patience=3, batch_size=256, lr=0.005, n_negatives=4)
    base.update(kw)
    return TrainConfig(**base)


# -- config -----------------------------------------------------------------------


@pytest.mark.parametrize("bad", [dict(patience=0), dict(batch_size=0), dict(epochs=0),
                                 dict(mode="greedy"), dict(loss="hinge"),
                                 dict(objectives=["revenue"]),
                                 dict(objectives=["accuracy", "speed"])])
def test_config_rejects(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad).validate()


def test_resolve_target():
    assert resolve_target(TrainConfig(target_scale=1.1), 0.5) == pytest.approx(0.55)
    assert resolve_target(TrainConfig(target_loss=0.3), None) == 0.3
    with pytest.raises(ValueError):
        resolve_target(TrainConfig(), None)


# -- pretrain ----------------------------------------------------------------------


def separable_toy(n=32, clusters=4, per_user=6, seed=0):
    """Users and items split into clusters; each user only touches its own cluster."""
    rng = np.random.default_rng(seed)
    size = n // clusters
    raw = RawInteractions()
    for u in range(n):
        c = u // size
        items = rng.choice(np.arange(c * size, (c + 1) * size), per_user, replace=False)
        for t, i in enumerate(items):
            raw.append(f"u{u:02d}", f"i{i:02d}", t)
    return leave_one_out_split(raw)


def test_separable_toy_reaches_high_hit():
    ds = separable_toy()
    cfg = TrainConfig(dim=8, epochs=200, patience=20, batch_size=64, lr=0.01,
                      n_negatives=4, negatives="uniform")
    model, loss = pretrain(init_model(ds, cfg), ds, cfg)
    assert hit_at_k(model, ds, 10, split="valid") > 0.5
    assert np.isfinite(loss)


def test_pretrain_deterministic():
    ds, cat = small_synth()
    cfg = quick()
    a, la = pretrain(init_model(ds, cfg), ds, cfg, cat)
    b, lb = pretrain(init_model(ds, cfg), ds, cfg, cat)
    assert la == lb
    for name, arr in a.params().items():
        np.testing.assert_array_equal(arr, getattr(b, name))


def test_pretrain_history_and_best_checkpoint():
    ds, cat = small_synth()
    hist = []
    cfg = quick(epochs=4, patience=4)
    model, loss = pretrain(init_model(ds, cfg), ds, cfg, cat, history=hist)
    assert [h["epoch"] for h in hist] == [1, 2, 3, 4]
    best = max(hist, key=lambda h: h["valid_hit"])
    assert loss == best["loss"]
    assert hit_at_k(model, ds, 10, split="valid") == best["valid_hit"]


def test_pretrain_aborts_on_non_finite():
    ds, cat = small_synth()
    cfg = quick()
    model = init_model(ds, cfg)
    model.user_emb[0, 0] = np.nan
    with pytest.raises(TrainingAborted):
        pretrain(model, ds, cfg, cat)


# -- continual training ------------------------------------------------------------


@pytest.fixture(scope="module")
def pretrained():
    ds, cat = small_synth()
    cfg = quick()
    model, loss = pretrain(init_model(ds, cfg), ds, cfg, cat)
    return ds, cat, model, loss


def test_continual_deterministic(pretrained):
    ds, cat, m, loss = pretrained
    cfg = quick(objectives=["accuracy", "revenue", "fairness", "alignment"],
                rho={"revenue": 0.4, "fairness": 0.3, "alignment": 0.3})
    _, h1 = continual_train(m, ds, cat, cfg, pretrain_loss=loss)
    _, h2 = continual_train(m, ds, cat, cfg, pretrain_loss=loss)
    assert h1.to_jsonl() == h2.to_jsonl()
    assert h1.steps == h2.steps


def test_history_one_entry_per_epoch_and_bounds(pretrained):
    ds, cat, m, loss = pretrained
    cfg = quick(objectives=["accuracy", "fairness"], rho={"fairness": 1.0})
    _, h = continual_train(m, ds, cat, cfg, pretrain_loss=loss)
    assert [e["epoch"] for e in h.epochs] == list(range(1, len(h.epochs) + 1))
    upper = PiControllerState(h.target_loss, cfg.kp, cfg.ki, cfg.alpha_min).upper_bound
    alphas = np.array([s[4] for s in h.steps])
    assert np.all((alphas >= 0) & (alphas <= upper + 1e-12))
    assert np.all(np.isfinite(h.step_losses()))


def test_revenue_and_accuracy_tables_unchanged(pretrained):
    ds, cat, m, loss = pretrained
    cfg = quick(objectives=["accuracy", "revenue"], rho={"revenue": 1.0})
    _, h = continual_train(m, ds, cat, cfg, pretrain_loss=loss)
    start = {o: init_weights(o, ds, cat).to_dict() for o in ("accuracy", "revenue")}
    for e in h.epochs:
        for o in start:
            assert e["weights"][o] == start[o]


def test_accuracy_only_keeps_weights(pretrained):
    ds, cat, m, loss = pretrained
    _, h = continual_train(m, ds, cat, quick(), pretrain_loss=loss)
    assert all(list(e["weights"]) == ["accuracy"] for e in h.epochs)
    assert all(e["weights"]["accuracy"]["groups"][0]["weight"] == 1.0 for e in h.epochs)


def test_unit_alpha_reproduces_plain_training(pretrained):
    ds, cat, m, loss = pretrained
    cfg = quick(kp=0.0, ki=0.0, alpha_min=1.0, epochs=2, patience=2)
    _, h = continual_train(m, ds, cat, cfg, pretrain_loss=loss)
    assert all(s[4] == 1.0 for s in h.steps)

    # independent loop with the same streams and accuracy-only batches
    model = m.copy()
    opt = OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    s = make_streams(cfg.seed, "continual-sampler", "continual-negatives")
    streams = {"sampler": s["continual-sampler"], "negatives": s["continual-negatives"]}
    trace = []
    for _ in range(2):
        accuracy_epoch(model, opt, ds, _accuracy_table(ds), _negative_sampler(ds, cat, cfg),
                       cfg, streams, trace)
    assert trace == [s[1] for s in h.steps]


def test_revenue_needs_prices(pretrained):
    ds, cat, m, loss = pretrained
    no_price = make_catalog(ds, price=np.zeros(ds.n_items))
    with pytest.raises(ValueError):
        continual_train(m, ds, no_price, quick(objectives=["accuracy", "revenue"],
                                               rho={"revenue": 1.0}), pretrain_loss=loss)


def test_static_mode_runs(pretrained):
    ds, cat, m, loss = pretrained
    cfg = quick(mode="static", objectives=["accuracy", "revenue", "fairness", "alignment"],
                rho_full=[0.4, 0.2, 0.2, 0.2])
    _, h = continual_train(m, ds, cat, cfg, pretrain_loss=loss)
    assert all(s[4] == 0.4 for s in h.steps)


def test_underserved_category_share_grows():
    raw, meta = synth_generate(SynthConfig(n_users=600, n_items=150, n_interactions=12000,
                                           n_categories=3, underserved_scale=0.25), 0)
    ds = leave_one_out_split(kcore_filter(raw, 5))
    cat = build_catalog(meta, ds)
    cfg = TrainConfig(dim=16, epochs=100, patience=5, lr=0.002, weight_decay=1e-4,
                      negatives="uniform")
    model, loss = pretrain(init_model(ds, cfg), ds, cfg, cat)
    cont = TrainConfig(**{**cfg.to_dict(), "objectives": ["accuracy", "fairness"],
                          "rho": {"fairness": 1.0}, "epochs": 3, "patience": 3,
                          "ki": 0.01, "windup_cap": 1.0})
    _, h = continual_train(model, ds, cat, cont, pretrain_loss=loss)
    g = cat.category_names.index("c0")
    start = init_weights("fairness", ds, cat).weights[g]
    shares = [start] + [e["weights"]["fairness"]["groups"][g]["weight"] for e in h.epochs]
    assert len(shares) == 4
    assert all(b > a for a, b in zip(shares, shares[1:]))
