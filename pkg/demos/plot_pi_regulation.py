"""
Watching the controller hold the accuracy loss
==============================================

The accuracy weight is recomputed every step from the gap between the
current accuracy loss and a target. This demo runs an alignment objective
and prints, per epoch, the mean accuracy loss next to the target together
with the mean accuracy weight, so the feedback loop is visible.
"""

# %%
# Setup
# -----

import numpy as np

from morec.dataset import (SynthConfig, build_catalog, kcore_filter, leave_one_out_split,
                           synth_generate)
from morec.trainer import TrainConfig, continual_train, init_model, pretrain

raw, meta = synth_generate(SynthConfig(n_users=800, n_items=200, n_interactions=16000), 1)
ds = leave_one_out_split(kcore_filter(raw, 5))
cat = build_catalog(meta, ds)
backbone = dict(dim=16, lr=0.002, weight_decay=1e-4, epochs=60, patience=5, seed=1)
base, loss = pretrain(init_model(ds, TrainConfig(**backbone)), ds, TrainConfig(**backbone), cat)

# %%
# The trace
# ---------
# Weight decay sits inside the gradient that Adam normalizes, so the
# accuracy weight acts like an inverse regularization strength. When the
# loss sits above target the weight rises and the loss is pulled back down.

cfg = TrainConfig(**dict(backbone, objectives=["accuracy", "alignment"], rho={"alignment": 1.0},
                  target_scale=1.1, ki=0.01, windup_cap=1.0, epochs=20, patience=20))
_, hist = continual_train(base, ds, cat, cfg, pretrain_loss=loss)

print(f"target {hist.target_loss:.4f}")
for e in hist.epochs:
    bar = "#" * int(40 * e["alpha_acc"] / 1.2)
    print(f"epoch {e['epoch']:2d}  loss {e['acc_loss']:.4f}  alpha {e['alpha_acc']:.3f} {bar}")

ratio = np.mean(hist.acc_losses()[-5:]) / hist.target_loss
print(f"last five epochs: loss / target = {ratio:.3f}")
