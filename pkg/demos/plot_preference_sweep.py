"""
A preference sweep and its Pareto front
=======================================

Each preference vector over the beyond-accuracy objectives yields one
solution. Scoring them against the base model gives Imp and validity; the
non-dominated set for a pair of metrics is what a trade-off plot would
show, and ``select_solution`` picks the best valid one.
"""

# %%
# One shared base model
# ---------------------

from morec.dataset import (SynthConfig, build_catalog, kcore_filter, leave_one_out_split,
                           synth_generate)
from morec.metrics import SolutionSet, evaluate, pareto_frontier, select_solution
from morec.trainer import TrainConfig, continual_train, init_model, pretrain

raw, meta = synth_generate(SynthConfig(n_users=600, n_items=150, n_interactions=12000,
                                       n_categories=3, underserved_scale=0.25), 2)
ds = leave_one_out_split(kcore_filter(raw, 5))
cat = build_catalog(meta, ds)
backbone = dict(dim=16, lr=0.002, weight_decay=1e-4, epochs=60, patience=5, seed=2)
base, loss = pretrain(init_model(ds, TrainConfig(**backbone)), ds, TrainConfig(**backbone), cat)

# %%
# Sweep over revenue versus fairness
# ----------------------------------

objectives = ["accuracy", "revenue", "fairness"]
labelled = []
for r in (0.0, 0.25, 0.5, 0.75, 1.0):
    cfg = TrainConfig(**dict(backbone, objectives=objectives,
                      rho={"revenue": r, "fairness": 1.0 - r}, pref_scale=0.5,
                      ki=0.01, windup_cap=1.0, epochs=8, patience=8))
    model, _ = continual_train(base, ds, cat, cfg, pretrain_loss=loss)
    labelled.append((f"rev={r:.2f}", evaluate(model, ds, cat)))

sset = SolutionSet.build(evaluate(base, ds, cat), labelled)
for s in [sset.base, *sset.solutions]:
    r = s.report
    print(f"{s.label:>9}  Hit {r.hit:.4f}  rHit {r.rhit:7.3f}  Pop-KL {r.pop_kl:.4f}  "
          f"min-Hit {r.min_hit:.4f}  Imp {s.imp:6.2f}  {'valid' if s.valid else 'invalid'}")

# %%
# Trade-off and selection
# -----------------------

rows = [sset.base, *sset.solutions]
front = pareto_frontier([[s.report.hit, s.report.rhit] for s in rows], ["max", "max"])
print("Hit/rHit front:", [rows[i].label for i in front])
print("selected:", select_solution(sset, sset.base.report).label)
