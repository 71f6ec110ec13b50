"""Pricing under unequal borrowing and lending rates on five correlated assets.

The product is a European call spread on the maximum of five geometric
Brownian motions; the nonlinear pricing recursion mixes the lending rate and
the borrowing rate depending on the sign of the bank-account position, which
makes the generator convex and piecewise linear.  Weights are built from
*clamped* Brownian increments so that the comparison principle holds; the
state recursion itself uses the raw increments (the clamp removes a per-tail
probability mass of order 1e-12 at the benchmark calibration).

Two basis families are provided for input approximations: a single constant
function, and a six-function family built from the largest and second-largest
asset one step back, whose one-step weighted expectations are closed form
(lognormal moments, forward call values and stock-or-nothing terms).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import blackscholes as bs
from .approx import BasisSet
from .core import DynamicProgramSpec, MarkovModel
from .streams import standard_normal

__all__ = [
    "FundingParams",
    "preset",
    "PRESETS",
    "check_truncation",
    "truncation_margin",
    "make_model",
    "make_dynamic_program",
    "generic_basis",
    "max_asset_basis",
]


@dataclass(frozen=True)
class FundingParams:
    """Benchmark parameters; rates and drift are per year, maturity in years."""

    lend_rate: float = 0.01
    borrow_rate: float = 0.06
    drift: float = 0.05
    base_vol: float = 0.2
    correlation: float = 0.3
    spot: float = 100.0
    strike_low: float = 95.0
    strike_high: float = 115.0
    maturity: float = 0.25
    steps: int = 20
    truncation: float = 0.77
    n_assets: int = 5

    def __post_init__(self):
        if self.lend_rate > self.borrow_rate:
            raise ValueError("lending rate must not exceed borrowing rate")
        if self.steps < 1 or self.n_assets < 1:
            raise ValueError("steps and n_assets must be positive")
        if abs(np.linalg.det(self.sigma)) <= 1e-12:
            raise ValueError("diffusion matrix is singular")

    @property
    def dt(self) -> float:
        return self.maturity / self.steps

    @cached_property
    def sigma(self) -> np.ndarray:
        """Lower-triangular diffusion matrix: first row independent, the rest
        loaded on asset one with weight `correlation`."""
        n, rho = self.n_assets, self.correlation
        mat = np.zeros((n, n))
        mat[0, 0] = 1.0
        for d in range(1, n):
            mat[d, 0] = rho
            mat[d, d] = math.sqrt(1.0 - rho**2)
        return self.base_vol * mat

    @cached_property
    def sigma_inv(self) -> np.ndarray:
        return np.linalg.inv(self.sigma)

    @cached_property
    def row_sums_inv(self) -> np.ndarray:
        """The vector sigma^{-1} 1 that prices the overall risky position."""
        return self.sigma_inv @ np.ones(self.n_assets)

    @property
    def weight_dim(self) -> int:
        return self.n_assets + 1

    @property
    def innovation_dim(self) -> int:
        return 1 + 2 * self.n_assets

    def control_vector(self, rate: float) -> np.ndarray:
        """u(s): the admissible control associated with the rate s."""
        u = np.empty(self.weight_dim)
        u[0] = 1.0 - rate * self.dt
        u[1:] = -(self.drift - rate) * self.dt * self.row_sums_inv
        return u


PRESETS = {"bsz-funding-5d": FundingParams()}


def preset(name: str, **overrides) -> FundingParams:
    """Named benchmark parameters with per-field overrides (e.g. steps, correlation)."""
    if name not in PRESETS:
        raise KeyError(f"unknown funding preset {name!r}")
    base = PRESETS[name]
    fields = {k: getattr(base, k) for k in base.__dataclass_fields__}
    fields.update(overrides)
    return FundingParams(**fields)


def truncation_margin(params: FundingParams) -> float:
    """Slack of the clamping condition; nonnegative iff the condition holds.

    The condition bounds dt * max|rate| plus the clamp level times the worst
    drift gap times the absolute row sums of sigma^{-1} by one.
    """
    rate_term = params.dt * max(abs(params.lend_rate), abs(params.borrow_rate))
    gap = max(abs(params.drift - params.lend_rate), abs(params.drift - params.borrow_rate))
    spread = float(np.abs(params.row_sums_inv).sum())
    return 1.0 - (rate_term + params.truncation * gap * spread)


def check_truncation(params: FundingParams) -> bool:
    """True iff the clamp level keeps the recursion monotone (sufficient condition)."""
    return truncation_margin(params) >= 0.0


# --------------------------------------------------------------------------- #
# model pieces
# --------------------------------------------------------------------------- #
def funding_generator(params: FundingParams, j, x, z):
    z = np.asarray(z)
    z0 = z[..., 0]
    position = z[..., 1:] @ params.row_sums_inv
    dt = params.dt
    out = (1.0 - params.lend_rate * dt) * z0 \
        - (params.drift - params.lend_rate) * dt * position \
        + (params.borrow_rate - params.lend_rate) * dt * np.maximum(position - z0, 0.0)
    return out


def funding_maximizer(params: FundingParams, j, x, z):
    z = np.asarray(z)
    lend = (z[..., 0] >= z[..., 1:] @ params.row_sums_inv)
    u_lend = params.control_vector(params.lend_rate)
    u_borrow = params.control_vector(params.borrow_rate)
    return np.where(lend[..., None], u_lend, u_borrow)


def funding_conjugate(params: FundingParams, j, x, u, atol: float = 1e-10):
    """0 on the control segment {u(s): lend <= s <= borrow}, +inf outside."""
    u = np.asarray(u)
    s = (1.0 - u[..., 0]) / params.dt
    expected_tail = -(params.drift - s[..., None]) * params.dt * params.row_sums_inv
    on_segment = (
        (s >= params.lend_rate - atol)
        & (s <= params.borrow_rate + atol)
        & (np.abs(u[..., 1:] - expected_tail).max(axis=-1) <= atol)
    )
    return np.where(on_segment, 0.0, np.inf)


def gbm_step(params: FundingParams, j, x, dw):
    """One Euler-exact GBM step driven by raw increments dw of shape (..., N)."""
    drift_term = (params.drift - 0.5 * (params.sigma**2).sum(axis=1)) * params.dt
    return np.asarray(x) * np.exp(drift_term + np.asarray(dw) @ params.sigma.T)


def terminal_payoff(params: FundingParams, x):
    best = np.asarray(x).max(axis=-1)
    return (np.maximum(best - params.strike_low, 0.0)
            - 2.0 * np.maximum(best - params.strike_high, 0.0))


def pack_innovation(params: FundingParams, dw: np.ndarray) -> np.ndarray:
    """Innovation layout: [1, p_C(dW)/dt (N entries), raw dW (N entries)].

    The weights read the clamped increments; the state step reads the raw
    ones, so clamping never distorts the dynamics.
    """
    dw = np.asarray(dw)
    out = np.empty(dw.shape[:-1] + (params.innovation_dim,))
    out[..., 0] = 1.0
    clipped = np.clip(dw, -params.truncation, params.truncation)
    out[..., 1:params.n_assets + 1] = clipped / params.dt
    out[..., params.n_assets + 1:] = dw
    return out


def make_model(params: FundingParams) -> MarkovModel:
    n = params.n_assets

    def step(j, x, b):
        return gbm_step(params, j, x, np.asarray(b)[..., n + 1:])

    def sample_innovation(j, rng, size):
        dw = standard_normal(rng, (size, n)) * math.sqrt(params.dt)
        return pack_innovation(params, dw)

    return MarkovModel(
        x0=np.full(n, params.spot), horizon=params.steps, state_dim=n,
        innovation_dim=params.innovation_dim, weight_dim=params.weight_dim,
        step=step, sample_innovation=sample_innovation, constant_weight_index=0)


def make_dynamic_program(params: FundingParams) -> DynamicProgramSpec:
    return DynamicProgramSpec(
        horizon=params.steps, weight_dim=params.weight_dim,
        generator=lambda j, x, z: funding_generator(params, j, x, z),
        conjugate_value=lambda j, x, u: funding_conjugate(params, j, x, u),
        maximizer=lambda j, x, z: funding_maximizer(params, j, x, z),
        terminal=lambda x: terminal_payoff(params, x))


# --------------------------------------------------------------------------- #
# basis families
# --------------------------------------------------------------------------- #
def generic_basis(params: FundingParams) -> BasisSet:
    """The single constant basis function.

    Its weighted one-step expectation is (1, 0, ..., 0): the clamped
    increments have exactly zero mean by symmetry.
    """
    D = params.weight_dim

    def eval_fn(j, x_prev, b, x_next=None):
        lead = np.asarray(x_prev).shape[:-1]
        return np.ones(lead + (1,))

    def one_step(j, x):
        lead = np.asarray(x).shape[:-1]
        out = np.zeros(lead + (D, 1))
        out[..., 0, 0] = 1.0
        return out

    return BasisSet(size=1, eval=eval_fn, one_step=one_step, label="funding-constant")


def _largest_two(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the largest and second-largest asset, ties to the lowest index."""
    x = np.asarray(x)
    first = x.argmax(axis=-1)
    masked = x.copy()
    np.put_along_axis(masked, first[..., None], -np.inf, axis=-1)
    second = masked.argmax(axis=-1)
    return first, second


def max_asset_basis(params: FundingParams) -> BasisSet:
    """Six functions keyed to the largest/second-largest asset one step back:
    constant, the two asset prices, their call-spread values, and the high-
    strike call on the leader.

    Option values are plain conditional expectations of the payoff under the
    asset drift (no discounting).  The one-step weighted expectations combine
    exact clamped-lognormal moments for the price functions with
    stock-or-nothing terms for the option functions; the clamp correction on
    the option terms is below 1e-11 at the benchmark calibration and is
    omitted there.
    """
    p = params
    N, D = p.n_assets, p.weight_dim
    vol = p.base_vol
    # exact clamped moment E[p_C(G) e^{s G}] / dt for every diffusion entry
    m1 = bs.truncated_exp_moment(p.sigma, p.dt, p.truncation) \
        * np.exp(-0.5 * p.sigma**2 * p.dt) / p.dt

    def spread(x, tau):
        return (bs.call_price(x, p.strike_low, vol, tau, p.drift)
                - 2.0 * bs.call_price(x, p.strike_high, vol, tau, p.drift))

    def spread_above(x, tau):
        return (bs.expected_stock_above(x, p.strike_low, vol, tau, p.drift)
                - 2.0 * bs.expected_stock_above(x, p.strike_high, vol, tau, p.drift))

    def eval_fn(j, x_prev, b, x_next=None):
        x_prev = np.asarray(x_prev)
        if x_next is None:
            x_next = gbm_step(p, j, x_prev, np.asarray(b)[..., N + 1:])
        first, second = _largest_two(x_prev)
        lead_1 = np.take_along_axis(x_next, first[..., None], axis=-1)[..., 0]
        lead_2 = np.take_along_axis(x_next, second[..., None], axis=-1)[..., 0]
        tau = p.maturity - j * p.dt
        out = np.empty(x_prev.shape[:-1] + (6,))
        out[..., 0] = 1.0
        out[..., 1] = lead_1
        out[..., 2] = lead_2
        out[..., 3] = spread(lead_1, tau)
        out[..., 4] = spread(lead_2, tau)
        out[..., 5] = bs.call_price(lead_1, p.strike_high, vol, tau, p.drift)
        return out

    def one_step(j, x):
        x = np.asarray(x)
        first, second = _largest_two(x)
        x1 = np.take_along_axis(x, first[..., None], axis=-1)[..., 0]
        x2 = np.take_along_axis(x, second[..., None], axis=-1)[..., 0]
        tau = p.maturity - j * p.dt
        grow = math.exp(p.drift * p.dt)
        out = np.zeros(x.shape[:-1] + (D, 6))
        out[..., 0, 0] = 1.0
        # weighted rows of the selected assets: m1 gathered per path
        m1_1 = m1[first]            # (..., N) row of the leading asset
        m1_2 = m1[second]
        out[..., 0, 1] = x1 * grow
        out[..., 1:, 1] = x1[..., None] * grow * m1_1
        out[..., 0, 2] = x2 * grow
        out[..., 1:, 2] = x2[..., None] * grow * m1_2
        sig_1 = p.sigma[first]      # diffusion rows select the Stein factors
        sig_2 = p.sigma[second]
        out[..., 0, 3] = spread(x1, tau)
        out[..., 1:, 3] = sig_1 * spread_above(x1, tau)[..., None]
        out[..., 0, 4] = spread(x2, tau)
        out[..., 1:, 4] = sig_2 * spread_above(x2, tau)[..., None]
        out[..., 0, 5] = bs.call_price(x1, p.strike_high, vol, tau, p.drift)
        out[..., 1:, 5] = sig_1 * bs.expected_stock_above(
            x1, p.strike_high, vol, tau, p.drift)[..., None]
        return out

    return BasisSet(size=6, eval=eval_fn, one_step=one_step, label="funding-max-assets")
