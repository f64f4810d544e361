"""Adam over the raw splat parameters, one learning rate per parameter group."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import PARAM_GROUPS, GradientBuffer, SplatSet


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class LearningRates:
    position: float = 1.6e-4
    theta: float = 1e-3
    log_scale: float = 5e-3
    opacity_logit: float = 5e-2
    color_grid: float = 2.5e-3

    def __post_init__(self):
        for name in ("position", "theta", "log_scale", "opacity_logit", "color_grid"):
            if not getattr(self, name) > 0:
                raise ValueError(f"learning rate {name!r} must be positive")

    @classmethod
    def for_image(cls, width: int, height: int, **overrides) -> "LearningRates":
        """Defaults with the position rate scaled by the image extent."""
        lrs = dict(position=1.6e-4 * max(width, height))
        lrs.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**lrs)

    def for_group(self, group: str) -> float:
        return {
            "positions": self.position,
            "thetas": self.theta,
            "log_scales": self.log_scale,
            "opacity_logits": self.opacity_logit,
            "grids": self.color_grid,
        }[group]


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_splats(cls, splats: SplatSet, **kwargs) -> "AdamState":
        state = cls(**kwargs)
        for name, param in splats.iter_params():
            state.m[name] = np.zeros_like(param)
            state.v[name] = np.zeros_like(param)
        return state


def adam_step(params: SplatSet, grads: GradientBuffer, state: AdamState,
              lrs: LearningRates, lr_scale: dict[str, float] | None = None) -> SplatSet:
    """Apply one bias-corrected Adam update in place and return ``params``.

    ``lr_scale`` optionally multiplies individual group rates (used for
    scheduled decay).  The depth key is never updated.
    """
    for name in PARAM_GROUPS:
        g = getattr(grads, name)
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in parameter group {name!r}")
        if g.shape != getattr(params, name).shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter group {name!r}")
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name in PARAM_GROUPS:
        g = getattr(grads, name)
        m = state.m.setdefault(name, np.zeros_like(g))
        v = state.v.setdefault(name, np.zeros_like(g))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        lr = lrs.for_group(name) * (lr_scale or {}).get(name, 1.0)
        param = getattr(params, name)
        param -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params
