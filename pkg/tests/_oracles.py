"""Shared analytic oracles for tests: the point-mass flow field and a
Gauss-Legendre quadrature of velocities along its trajectories."""

import numpy as np

from echogen import autodiff as ad


def point_mass_u(x_star: np.ndarray):
    """Mean-velocity field of a point-mass data distribution at x_star.

    For data concentrated at x*, the instantaneous velocity at (x_t, t) is
    v = (x_t - x*) / t, constant along each trajectory, so the mean velocity
    over any [r, t] equals it: u(x_t, r, t) = (x_t - x*) / t.
    """

    def u(x_t: np.ndarray, r: float, t: float) -> np.ndarray:
        return (x_t - x_star) / t

    return u


def point_mass_net(x_star: np.ndarray):
    """The same field wrapped as a conditional network net(x_t, r, t, c)."""

    def net(x_t, r, t, c):
        tval = t.item() if isinstance(t, ad.Tensor) else float(t)
        xs = ad.Tensor(x_star)
        return ad.mul(ad.sub(x_t, xs), 1.0 / tval)

    return net


def trajectory_point(x_star: np.ndarray, x_t: np.ndarray, t: float, tau: float):
    """Point at time tau on the trajectory through (x_t, t)."""
    return x_star + (tau / t) * (x_t - x_star)


def quad_velocity_integral(
    x_star: np.ndarray, x_t: np.ndarray, r: float, t: float, n_nodes: int = 32
):
    """Gauss-Legendre quadrature of v(x_tau, tau) over [r, t]."""
    nodes, weights = np.polynomial.legendre.leggauss(n_nodes)
    mid, half = (r + t) / 2.0, (t - r) / 2.0
    total = np.zeros_like(x_t)
    for z, w in zip(nodes, weights):
        tau = mid + half * z
        x_tau = trajectory_point(x_star, x_t, t, tau)
        total = total + w * (x_tau - x_star) / tau
    return half * total


def tiny_random_net(rng: np.random.Generator, shape: tuple, hidden: int = 8):
    """Small smooth conv+dense network for finite-difference checks.

    shape is the (C, H, W) of a single input image; returns (f, params) with
    f mapping a Tensor of that shape to a Tensor of the same shape.
    """
    c, h, w = shape
    params = {
        "conv1": ad.parameter(rng.standard_normal((hidden, c, 3, 3)) / np.sqrt(c * 9)),
        "conv2": ad.parameter(
            rng.standard_normal((c, hidden, 3, 3)) / np.sqrt(hidden * 9)
        ),
        "gain": ad.parameter(1.0 + 0.1 * rng.standard_normal((hidden, 1, 1))),
    }

    def f(x):
        xb = ad.reshape(x, (1, c, h, w))
        h1 = ad.silu(ad.conv2d(xb, params["conv1"]))
        h1 = ad.mul(h1, params["gain"])
        out = ad.conv2d(h1, params["conv2"])
        return ad.reshape(out, (c, h, w))

    return f, params
