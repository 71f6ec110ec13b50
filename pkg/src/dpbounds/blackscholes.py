"""Closed-form lognormal option values and truncated-normal moments.

Conventions: prices are *undiscounted* conditional expectations of the payoff
under a geometric Brownian motion with drift ``rate`` and total volatility
``vol`` over the remaining time ``tau``, i.e. forward values.  All functions
broadcast over numpy arrays and handle ``tau == 0`` as the intrinsic value.
"""
from __future__ import annotations

import numpy as np
from scipy.special import ndtr
from scipy.stats import norm

__all__ = [
    "call_price",
    "expected_stock_above",
    "truncated_exp_moment",
    "clip_tail_mass",
]


def _d12(x, strike, vol, tau, rate):
    srt = vol * np.sqrt(tau)
    d1 = (np.log(x / strike) + (rate + 0.5 * vol**2) * tau) / srt
    return d1, d1 - srt


def call_price(x, strike, vol, tau, rate=0.0):
    """E[(X_tau - K)_+ | X_0 = x] for GBM with drift ``rate``, no discounting."""
    x = np.asarray(x, dtype=float)
    tau = np.asarray(tau, dtype=float)
    intrinsic = np.maximum(x - strike, 0.0)
    if np.all(tau <= 0.0):
        return intrinsic + np.zeros_like(x)
    tau_safe = np.where(tau > 0.0, tau, 1.0)
    d1, d2 = _d12(x, strike, vol, tau_safe, rate)
    value = x * np.exp(rate * tau_safe) * ndtr(d1) - strike * ndtr(d2)
    return np.where(tau > 0.0, value, intrinsic)


def expected_stock_above(x, strike, vol, tau, rate=0.0):
    """E[X_tau 1{X_tau > K} | X_0 = x], the stock-or-nothing leg of a call."""
    x = np.asarray(x, dtype=float)
    tau = np.asarray(tau, dtype=float)
    intrinsic = np.where(x > strike, x, 0.0)
    if np.all(tau <= 0.0):
        return intrinsic + np.zeros_like(x)
    tau_safe = np.where(tau > 0.0, tau, 1.0)
    d1, _ = _d12(x, strike, vol, tau_safe, rate)
    value = x * np.exp(rate * tau_safe) * ndtr(d1)
    return np.where(tau > 0.0, value, intrinsic)


def truncated_exp_moment(s, dt, clip):
    """E[p_C(G) * exp(s G)] for G ~ N(0, dt), p_C the clamp at +-clip.

    Exact expression from the Gaussian change of measure: with the tilted mean
    m = s*dt and sd = sqrt(dt),

        E[G e^{sG} 1{|G|<=C}] + C e^{s^2 dt/2} (tail terms)

    reduces to differences of normal cdf/pdf values.  For clip >> sqrt(dt)
    this approaches the untruncated moment s*dt*exp(s^2 dt / 2).
    """
    s = np.asarray(s, dtype=float)
    sd = np.sqrt(dt)
    tilt = np.exp(0.5 * s**2 * dt)
    hi = (clip - s * dt) / sd
    lo = (-clip - s * dt) / sd
    mid = s * dt * (ndtr(hi) - ndtr(lo)) - sd * (norm.pdf(hi) - norm.pdf(lo))
    tails = clip * (1.0 - ndtr(hi)) - clip * ndtr(lo)
    return tilt * (mid + tails)


def clip_tail_mass(clip, dt):
    """Probability mass removed per tail when clamping N(0, dt) at +-clip."""
    return float(ndtr(-clip / np.sqrt(dt)))
