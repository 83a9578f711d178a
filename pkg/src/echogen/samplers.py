"""Generation-time integrators: one-step mean-velocity sampling, few-step
interval sampling, multi-step Euler for the linear baseline, and
classifier-free-guided Euler.

All samplers integrate from noise at t=1 down to data at t=0, are pure given
(seed, frozen params), and return a PaddedVideo whose padding vector is copied
from the request; padded frames are zeroed before the video is handed back.

`velocity_fn` is any callable (params, x_t, r, t, c) -> Tensor: the trained
network's forward, an analytic oracle, or a counting wrapper.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .seqcond import ConditioningSet, PaddedVideo

__all__ = [
    "SampleRequest",
    "InvocationCounter",
    "sample_one_step",
    "sample_interval",
    "sample_euler_linear",
    "sample_cfg",
]


@dataclass(frozen=True)
class SampleRequest:
    """Inference-time inputs: conditioning, seed, step count, CFG scale."""

    c: ConditioningSet
    seed: int
    steps: int = 1
    guidance: float = 0.0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.guidance < 0:
            raise ValueError("guidance must be >= 0")


class InvocationCounter:
    """Wraps a velocity function and counts how often it is called."""

    def __init__(self, velocity_fn):
        self._fn = velocity_fn
        self.count = 0

    def __call__(self, params, x_t, r, t, c):
        self.count += 1
        return self._fn(params, x_t, r, t, c)


def _draw_noise(c: ConditioningSet, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.standard_normal(c.x_m.shape)


def _finish(frames: np.ndarray, c: ConditioningSet) -> PaddedVideo:
    out = frames.copy()
    out[c.p == 1] = 0.0
    return PaddedVideo(out, c.p)


def sample_one_step(velocity_fn, params, req: SampleRequest) -> PaddedVideo:
    """x = eps - u(eps, 0, 1): a single mean-velocity jump from noise."""
    if req.steps != 1:
        raise ValueError("one-step sampling requires steps == 1")
    eps = _draw_noise(req.c, req.seed)
    with ad.no_grad():
        u = velocity_fn(params, Tensor(eps), 0.0, 1.0, req.c)
    return _finish(eps - u.data, req.c)


def sample_interval(velocity_fn, params, c: ConditioningSet, t_grid, seed: int) -> PaddedVideo:
    """Iterate x_r = x_t - (t - r) * u(x_t, r, t) along a descending grid."""
    grid = [float(v) for v in t_grid]
    if len(grid) < 2 or grid[0] != 1.0 or grid[-1] != 0.0:
        raise ValueError("t_grid must run from 1.0 to 0.0")
    if any(a <= b for a, b in zip(grid, grid[1:])):
        raise ValueError("t_grid must be strictly decreasing")
    x = _draw_noise(c, seed)
    with ad.no_grad():
        for t, r in zip(grid, grid[1:]):
            u = velocity_fn(params, Tensor(x), r, t, c)
            x = x - (t - r) * u.data
    return _finish(x, c)


def sample_euler_linear(velocity_fn, params, c: ConditioningSet, n_steps: int, seed: int) -> PaddedVideo:
    """Reverse Euler for the linear baseline; the model is queried with r = t."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    dt = 1.0 / n_steps
    x = _draw_noise(c, seed)
    with ad.no_grad():
        for k in range(n_steps):
            t = 1.0 - k * dt
            v = velocity_fn(params, Tensor(x), t, t, c)
            x = x - dt * v.data
    return _finish(x, c)


def sample_cfg(
    velocity_fn, params, c: ConditioningSet, guidance: float, n_steps: int, seed: int
) -> PaddedVideo:
    """Guided Euler: v = v_uncond + g * (v_cond - v_uncond) per step.

    The unconditional pass zeroes the masked video and routes phi to the
    learned null embedding; two model calls per step.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    c_null = ConditioningSet(np.zeros_like(c.x_m), None, c.p)
    dt = 1.0 / n_steps
    x = _draw_noise(c, seed)
    with ad.no_grad():
        for k in range(n_steps):
            t = 1.0 - k * dt
            v_cond = velocity_fn(params, Tensor(x), t, t, c)
            v_uncond = velocity_fn(params, Tensor(x), t, t, c_null)
            v = v_uncond.data + guidance * (v_cond.data - v_uncond.data)
            x = x - dt * v
    return _finish(x, c)
