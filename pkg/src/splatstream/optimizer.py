"""Adaptive-moment optimizer with per-attribute learning rates.

Rates follow common splatting practice: position 1.6e-4 decaying
exponentially to 1.6e-6 over a configured horizon, SH DC 2.5e-3, higher
SH bands 1.25e-4, opacity 5e-2, log-scale 5e-3, rotation 1e-3. Updates
are clipped element-wise to the current learning rate and quaternions are
renormalized after every step. Owned and invoked only by the trainer
thread.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from splatstream.core import GaussianMap

PARAM_SHAPES = {
    "position": (3,),
    "rotation": (4,),
    "log_scale": (3,),
    "opacity_logit": (),
    "sh_dc": (1, 3),
    "sh_rest": (15, 3),
}


@dataclass
class LearningRates:
    position: float = 1.6e-4
    position_final: float = 1.6e-6
    sh_dc: float = 2.5e-3
    sh_rest: float = 1.25e-4
    opacity_logit: float = 5e-2
    log_scale: float = 5e-3
    rotation: float = 1e-3


@dataclass
class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    lrs: LearningRates = field(default_factory=LearningRates)
    horizon: int = 30000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_map(cls, gmap: GaussianMap, lrs: LearningRates | None = None,
                horizon: int = 30000) -> "AdamState":
        state = cls(lrs=lrs or LearningRates(), horizon=horizon)
        n = len(gmap)
        for name, shape in PARAM_SHAPES.items():
            state.m[name] = np.zeros((n,) + shape)
            state.v[name] = np.zeros((n,) + shape)
        return state

    def position_lr(self) -> float:
        """Exponentially decayed position rate at the current step count."""
        t = min(self.step_count / max(self.horizon, 1), 1.0)
        lr0, lr1 = self.lrs.position, self.lrs.position_final
        return float(lr0 * (lr1 / lr0) ** t)

    def rate_for(self, name: str) -> float:
        if name == "position":
            return self.position_lr()
        if name == "sh_dc":
            return self.lrs.sh_dc
        if name == "sh_rest":
            return self.lrs.sh_rest
        return getattr(self.lrs, name)


def _param_views(gmap: GaussianMap):
    return {
        "position": gmap.positions,
        "rotation": gmap.rotations,
        "log_scale": gmap.log_scales,
        "opacity_logit": gmap.opacity_logits,
        "sh_dc": gmap.sh[:, :1, :],
        "sh_rest": gmap.sh[:, 1:, :],
    }


def _grad_views(grads):
    return {
        "position": grads.position,
        "rotation": grads.rotation,
        "log_scale": grads.log_scale,
        "opacity_logit": grads.opacity_logit,
        "sh_dc": grads.sh[:, :1, :],
        "sh_rest": grads.sh[:, 1:, :],
    }


def adam_step(gmap: GaussianMap, grads, state: AdamState):
    """Apply one adaptive-moment update in place; returns (map, state).

    Bias-corrected moments, per-element update clipped to the attribute's
    learning rate, quaternions renormalized afterwards.
    """
    if len(grads) != len(gmap):
        raise ValueError(
            f"gradient length {len(grads)} does not match map length {len(gmap)}")
    gv = _grad_views(grads)
    for name, g in gv.items():
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter '{name}'")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    params = _param_views(gmap)
    for name, p in params.items():
        g = np.asarray(gv[name], dtype=np.float64)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        lr = state.rate_for(name)
        step = lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        np.clip(step, -lr, lr, out=step)
        p -= step
    gmap.normalize_rotations()
    return gmap, state


def resize_for_densify(state: AdamState, survivors: np.ndarray, n_new: int) -> AdamState:
    """Gather moments for surviving primitives and append zeros for new ones."""
    survivors = np.asarray(survivors, dtype=np.int64)
    for name, shape in PARAM_SHAPES.items():
        m, v = state.m[name], state.v[name]
        if survivors.size and (survivors.min() < 0 or survivors.max() >= m.shape[0]):
            raise ValueError("survivor index out of range")
        zeros = np.zeros((n_new,) + shape)
        state.m[name] = np.concatenate([m[survivors], zeros])
        state.v[name] = np.concatenate([v[survivors], zeros])
    return state
