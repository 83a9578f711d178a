"""Training objectives: linear interpolation, the mean-velocity regression
target obtained through a JVP, the masked adaptive loss, the reconstruction
regularizer, masked linear flow, and the objective alternation schedule.

The mean-velocity identity (t - r) * u(x_t, r, t) = integral of v over [r, t]
differentiates (w.r.t. t, at fixed r, along dx_t/dt = v) into the regression
target u_tgt = v - (t - r) * du/dt. The total derivative du/dt is one JVP of
the network over inputs (x_t, r, t) with tangents (v, 0, 1); gradients are
stopped through the target so the prediction branch alone is optimized.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .seqcond import ConditioningSet, LossMask

__all__ = [
    "TimestepPair",
    "FlowSample",
    "LossConfig",
    "Objective",
    "interpolate",
    "sample_timesteps",
    "make_flow_sample",
    "meanflow_target",
    "loss_mmf_adaptive",
    "loss_rec",
    "loss_mlf",
    "rmmf",
    "pick_objective",
]


@dataclass(frozen=True)
class TimestepPair:
    """Interval endpoints r <= t in [0, 1]."""

    r: float
    t: float

    def __post_init__(self):
        if not (0.0 <= self.r <= self.t <= 1.0):
            raise ValueError(f"need 0 <= r <= t <= 1, got r={self.r}, t={self.t}")


@dataclass(frozen=True)
class FlowSample:
    """One training draw: clean x, noise eps, mixed x_t, pair, and target v."""

    x: Tensor
    eps: Tensor
    x_t: Tensor
    pair: TimestepPair
    v: Tensor


class Objective(enum.Enum):
    MASKED_LINEAR_FLOW = "mlf"
    MASKED_MEAN_FLOW = "mmf"


@dataclass(frozen=True)
class LossConfig:
    """Knobs of the combined objective.

    h: adaptive-weight exponent; eps_w: stabilizer inside the weight;
    lambda_rec: reconstruction coefficient; p_linear: fraction of steps
    trained with the linear-flow objective.
    """

    h: float = 1.0
    eps_w: float = 1e-3
    lambda_rec: float = 1.0
    p_linear: float = 0.75
    ratio_equal: float = 0.0
    time_dist: str = "uniform"  # or "logitnormal"
    time_mu: float = 0.0
    time_sigma: float = 1.0

    def __post_init__(self):
        if self.h < 0:
            raise ValueError("h must be >= 0")
        if self.eps_w <= 0:
            raise ValueError("eps_w must be positive")
        if self.lambda_rec < 0:
            raise ValueError("lambda_rec must be >= 0")
        if not 0.0 <= self.p_linear <= 1.0:
            raise ValueError("p_linear must lie in [0,1]")
        if not 0.0 <= self.ratio_equal <= 1.0:
            raise ValueError("ratio_equal must lie in [0,1]")
        if self.time_dist not in ("uniform", "logitnormal"):
            raise ValueError(f"unknown time_dist {self.time_dist!r}")


def interpolate(x: Tensor, eps: Tensor, t: float) -> Tensor:
    """Linear path point x_t = (1 - t) * x + t * eps."""
    if x.shape != eps.shape:
        raise ad.ShapeError(f"shape mismatch: {x.shape} vs {eps.shape}")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0,1], got {t}")
    return ad.add(ad.mul(x, 1.0 - t), ad.mul(eps, t))


def _draw_time(rng: np.random.Generator, cfg: LossConfig | None) -> float:
    if cfg is None or cfg.time_dist == "uniform":
        return float(rng.uniform())
    z = rng.normal(cfg.time_mu, cfg.time_sigma)
    return float(1.0 / (1.0 + np.exp(-z)))


def sample_timesteps(
    rng: np.random.Generator, ratio_equal: float, cfg: LossConfig | None = None
) -> TimestepPair:
    """Draw an interval: with probability ratio_equal a collapsed r = t,
    otherwise two independent draws sorted ascending."""
    if not 0.0 <= ratio_equal <= 1.0:
        raise ValueError("ratio_equal must lie in [0,1]")
    if rng.uniform() < ratio_equal:
        t = _draw_time(rng, cfg)
        return TimestepPair(t, t)
    a, b = _draw_time(rng, cfg), _draw_time(rng, cfg)
    return TimestepPair(min(a, b), max(a, b))


def make_flow_sample(x: Tensor, eps: Tensor, pair: TimestepPair) -> FlowSample:
    x_t = interpolate(x, eps, pair.t)
    v = ad.sub(eps, x)
    return FlowSample(x=x, eps=eps, x_t=x_t, pair=pair, v=v)


def meanflow_target(
    net, fs: FlowSample, c: ConditioningSet
) -> tuple[Tensor, Tensor, Tensor]:
    """Prediction, regression target, and the (t - r)-scaled total derivative.

    net(x_t, r, t, c) -> velocity tensor; it is evaluated once under a JVP
    with tangents (v, 0, 1) over (x_t, r, t). Returns (u_pred, u_tgt, i_term)
    where u_tgt = sg(v - i_term) carries no gradients and u_pred does.
    """
    r, t = fs.pair.r, fs.pair.t
    r_in = Tensor(np.asarray(r))
    t_in = Tensor(np.asarray(t))

    def f(x_t, r_, t_):
        return net(x_t, r_, t_, c)

    u_pred, du_dt = ad.jvp(
        f,
        [fs.x_t, r_in, t_in],
        [fs.v, Tensor(np.asarray(0.0)), Tensor(np.asarray(1.0))],
    )
    i_term = ad.mul(du_dt, t - r)
    u_tgt = ad.stop_gradient(ad.sub(fs.v, i_term))
    return u_pred, u_tgt, i_term


def _masked_sq_norm(e: Tensor, mask: LossMask) -> Tensor:
    me = ad.mul(e, Tensor(mask.M))
    return ad.tsum(ad.mul(me, me))


def loss_mmf_adaptive(
    u_pred: Tensor, u_tgt: Tensor, mask: LossMask, alpha: float, cfg: LossConfig
) -> Tensor:
    """Adaptively weighted masked regression: sg(w) * alpha * ||M o e||^2,
    w = (||M o e||^2 + eps_w)^(-h)."""
    if u_pred.shape != u_tgt.shape:
        raise ad.ShapeError(f"shape mismatch: {u_pred.shape} vs {u_tgt.shape}")
    sq = _masked_sq_norm(ad.sub(u_pred, u_tgt), mask)
    base = ad.mul(sq, alpha)
    w = ad.stop_gradient(ad.pow_scalar(ad.add(sq, cfg.eps_w), -cfg.h))
    return ad.mul(w, base)


def loss_rec(
    u_pred: Tensor,
    i_term: Tensor,
    x_t: Tensor,
    x: Tensor,
    t: float,
    mask: LossMask,
    alpha: float,
) -> Tensor:
    """Reconstruction regularizer: transport x_t back by t * (u_pred + i_term)
    and penalize the masked distance to x."""
    if u_pred.shape != x.shape:
        raise ad.ShapeError(f"shape mismatch: {u_pred.shape} vs {x.shape}")
    x_hat = ad.sub(x_t, ad.mul(ad.add(u_pred, i_term), t))
    return ad.mul(_masked_sq_norm(ad.sub(x_hat, x), mask), alpha)


def loss_mlf(
    v_pred: Tensor, eps: Tensor, x: Tensor, mask: LossMask, alpha: float
) -> Tensor:
    """Masked linear flow matching: alpha * ||M o (v_pred - (eps - x))||^2."""
    if v_pred.shape != eps.shape or eps.shape != x.shape:
        raise ad.ShapeError("shape mismatch in loss_mlf")
    return ad.mul(_masked_sq_norm(ad.sub(v_pred, ad.sub(eps, x)), mask), alpha)


def rmmf(l_mmf_adaptive: Tensor, l_rec: Tensor, lambda_rec: float) -> Tensor:
    """Combined objective: adaptive masked loss plus lambda_rec * regularizer."""
    if lambda_rec == 0.0:
        return l_mmf_adaptive
    return ad.add(l_mmf_adaptive, ad.mul(l_rec, lambda_rec))


def pick_objective(rng: np.random.Generator, p_linear: float) -> Objective:
    """Bernoulli alternation between the two objectives (default 75% linear)."""
    if not 0.0 <= p_linear <= 1.0:
        raise ValueError("p_linear must lie in [0,1]")
    if rng.uniform() < p_linear:
        return Objective.MASKED_LINEAR_FLOW
    return Objective.MASKED_MEAN_FLOW
