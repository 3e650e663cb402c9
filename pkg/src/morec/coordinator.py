"""Outer-level objective coordination: a PI controller on the accuracy loss."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class PiControllerState:
    """Proportional-integral controller driving the accuracy loss to ``target``.

    ``windup_cap`` bounds the magnitude of the integral term
    ``ki * err_sum``; it defaults to ``10 * kp``.
    """

    target: float
    kp: float = 0.01
    ki: float = 0.001
    alpha_min: float = 0.1
    windup_cap: float | None = None
    err_sum: float = 0.0
    t: int = 0
    last_err: float = 0.0

    def __post_init__(self):
        if self.kp < 0 or self.ki < 0 or self.alpha_min < 0:
            raise ValueError("kp, ki and alpha_min must be non-negative")
        if self.windup_cap is None:
            self.windup_cap = 10.0 * self.kp

    @property
    def upper_bound(self) -> float:
        return self.alpha_min + self.kp + self.windup_cap


def pi_alpha(state: PiControllerState, acc_loss: float) -> tuple[float, PiControllerState]:
    """Accuracy weight for the current batch loss; updates ``state`` in place."""
    if not math.isfinite(acc_loss):
        raise FloatingPointError("accuracy loss is not finite")
    err = state.target - acc_loss
    err_sum = state.err_sum + err
    if state.ki > 0:
        bound = state.windup_cap / state.ki
        err_sum = min(max(err_sum, -bound), bound)
    state.err_sum = err_sum
    state.last_err = err
    state.t += 1
    # kp / (1 + e^err) written via tanh to stay finite for any err
    p_term = state.kp * 0.5 * (1.0 - math.tanh(0.5 * err))
    alpha = p_term - state.ki * err_sum + state.alpha_min
    return max(alpha, 0.0), state


@dataclass
class PreferenceVector:
    """Weights ``rho`` over the non-accuracy objectives and their global scale."""

    rho: dict[str, float] = field(default_factory=dict)
    scale: float = 0.2

    def __post_init__(self):
        if any(v < 0 for v in self.rho.values()):
            raise ValueError("preference weights must be non-negative")
        if len(self.rho) > 1 and abs(sum(self.rho.values()) - 1.0) > 1e-9:
            raise ValueError("preference weights must sum to 1")

    def values(self, objectives) -> np.ndarray:
        return np.array([self.rho.get(o, 0.0) for o in objectives])


def synthesize_loss(alpha_acc: float, pref: PreferenceVector, losses) -> float:
    """``alpha_acc * losses[0] + scale * sum(rho * losses[1:])``.

    ``pref.rho`` is read in insertion order against ``losses[1:]``.
    """
    losses = np.asarray(losses, dtype=float)
    rho = np.fromiter(pref.rho.values(), dtype=float)
    if len(losses) != len(rho) + 1:
        raise ValueError(f"expected {len(rho) + 1} losses, got {len(losses)}")
    return float(alpha_acc * losses[0] + pref.scale * (rho @ losses[1:]))


def objective_coefficients(alpha_acc: float, pref: PreferenceVector, objectives) -> np.ndarray:
    """Per-objective loss multipliers matching :func:`synthesize_loss`.

    ``objectives[0]`` must be accuracy.
    """
    coef = pref.scale * pref.values(objectives)
    coef[0] = alpha_acc
    return coef


def static_alpha(rho_full) -> np.ndarray:
    """Fixed scalarization weights for the static baseline (accuracy first)."""
    rho = np.asarray(rho_full, dtype=float)
    if np.any(rho < 0):
        raise ValueError("static weights must be non-negative")
    return rho.copy()
