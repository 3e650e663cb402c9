"""Data-centric multi-objective training for matrix-factorization recommenders."""

from .backbone import MfModel, OptimizerState, apply_gradients, sample_loss, score, topk_recommend
from .coordinator import PiControllerState, PreferenceVector, pi_alpha, static_alpha, synthesize_loss
from .dataset import (InteractionDataset, ItemCatalog, RawInteractions, SynthConfig, build_catalog,
                      kcore_filter, leave_one_out_split, load_interactions, load_item_metadata,
                      synth_generate)
from .metrics import EvalReport, evaluate, imp, pareto_frontier, select_solution
from .sampler import GroupWeightTable, draw_batch, init_weights
from .trainer import TrainConfig, TrainHistory, continual_train, pretrain

__version__ = "0.1.0"
