"""Model primitives: parameters, state, stochastic dynamics, liquidation.

The resource stock follows a logistic SDE

    dR = eta * R * (lambda_cap - R) dt + gamma * R dB,

the unit price P and unit renewal cost Q follow geometric Brownian motions
driven by one common Brownian motion W (perfectly correlated; in the
``cost_equals_price`` mode Q is identical to P).

Every sampler here is a pure function of explicit Gaussian draws, so a
64-bit seed plus a path index fully determine every sample (see
:func:`path_rng` for the splitting rule).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

__all__ = [
    "ParamError",
    "ModelParams",
    "State",
    "baseline_params",
    "validate_params",
    "logistic_step_deterministic",
    "logistic_sample_path",
    "gbm_step",
    "liquidation",
    "sale_gain",
    "path_rng",
]


class ParamError(ValueError):
    """A parameter set or state violates a model invariant."""


@dataclass(frozen=True)
class ModelParams:
    """All coefficients of the dynamics, costs, renewal schedule and delay.

    Units: eta, mu, rho_cost are rates (1/time); gamma, sigma, varsigma are
    volatilities (1/sqrt(time)); c1, c3 money per resource unit; c2 money;
    g0, K, lambda_cap resource units; T time.  The renewal yield is linear,
    g(e) = g_slope * e.  Renewal orders placed at a date mature m_delay
    dates later (delta = m_delay * T / n_dates).
    """

    eta: float
    lambda_cap: float
    gamma: float
    mu: float
    sigma: float
    rho_cost: float
    varsigma: float
    c1: float
    c2: float
    c3: float
    g0: float
    g_slope: float
    K: float
    T: float
    n_dates: int
    m_delay: int
    cost_equals_price: bool = True

    def g(self, e):
        """Renewal yield: quantity added to the stock when an order matures."""
        return self.g_slope * np.asarray(e) if isinstance(e, np.ndarray) else self.g_slope * e

    def with_(self, **kwargs) -> "ModelParams":
        return replace(self, **kwargs)


def baseline_params(**overrides) -> ModelParams:
    """Reference parameter set used throughout the docs and the test suite."""
    p = ModelParams(
        eta=1.0,
        lambda_cap=0.7,
        gamma=0.1,
        mu=0.07,
        sigma=0.1,
        rho_cost=0.07,
        varsigma=0.1,
        c1=0.1,
        c2=0.01,
        c3=0.1,
        g0=0.03,
        g_slope=1.0,
        K=0.3,
        T=3.0,
        n_dates=3,
        m_delay=1,
    )
    return replace(p, **overrides) if overrides else p


_POSITIVE = ("eta", "lambda_cap", "mu", "rho_cost", "c1", "c2", "c3", "T")
_VOLS = ("gamma", "sigma", "varsigma")


def validate_params(raw: ModelParams, allow_degenerate_vol: bool = False) -> ModelParams:
    """Check every ModelParams invariant; return the params unchanged if valid.

    ``allow_degenerate_vol=True`` relaxes the strict positivity of the
    volatilities to >= 0 so that noise-free configurations can be solved
    (the caller is expected to emit a warning).
    """
    for name in _POSITIVE:
        v = getattr(raw, name)
        if not (v > 0) or not math.isfinite(v):
            raise ParamError(f"{name} must be > 0, got {v!r}")
    for name in _VOLS:
        v = getattr(raw, name)
        if not math.isfinite(v):
            raise ParamError(f"{name} must be finite, got {v!r}")
        if allow_degenerate_vol:
            if v < 0:
                raise ParamError(f"{name} must be >= 0, got {v!r}")
        elif not v > 0:
            raise ParamError(f"{name} must be > 0, got {v!r}")
    if not (raw.g0 >= 0 and math.isfinite(raw.g0)):
        raise ParamError(f"g0 must be >= 0, got {raw.g0!r}")
    if not (raw.g_slope >= 0 and math.isfinite(raw.g_slope)):
        raise ParamError(f"g_slope must be >= 0, got {raw.g_slope!r}")
    # K = 0 disables renewal orders entirely; negative caps are meaningless.
    if not (raw.K >= 0 and math.isfinite(raw.K)):
        raise ParamError(f"K must be >= 0, got {raw.K!r}")
    if raw.n_dates < 1:
        raise ParamError(f"n_dates must be >= 1, got {raw.n_dates!r}")
    if not 0 <= raw.m_delay <= raw.n_dates:
        raise ParamError(
            f"m_delay must lie in [0, n_dates] = [0, {raw.n_dates}], got {raw.m_delay!r}"
        )
    return raw


@dataclass(frozen=True)
class State:
    """Point of the controlled system: cash, stock, unit price, unit cost."""

    x: float
    r: float
    p: float
    q: float

    def __post_init__(self):
        if not self.r >= 0:
            raise ParamError(f"resource stock must be >= 0, got {self.r!r}")
        if not self.p > 0:
            raise ParamError(f"price must be > 0, got {self.p!r}")
        if not self.q > 0:
            raise ParamError(f"renewal cost must be > 0, got {self.q!r}")


def logistic_step_deterministic(r, dt, params: ModelParams):
    """Noise-free logistic flow over dt (exact solution of dR = eta R (lambda - R) dt).

    Accepts scalars or arrays; r = 0 is absorbing and r = lambda_cap is the
    fixed point.
    """
    lam = params.lambda_cap
    growth = np.exp(params.eta * lam * np.asarray(dt, dtype=float))
    r = np.asarray(r, dtype=float)
    out = r * lam * growth / (lam + r * (growth - 1.0))
    return float(out) if out.ndim == 0 else out


def logistic_sample_path(r0, t0, t1, n_sub, gauss_draws, params: ModelParams):
    """Sample the logistic SDE on [t0, t1] from its closed-form solution.

    The solution given the Brownian path is E_s / (1/r0 + eta * int_0^s E_u du)
    with E_s = exp((eta*lambda - gamma^2/2) s + gamma (B_s - B_t0)); the path
    integral is approximated by the trapezoid rule on the n_sub sub-grid.

    gauss_draws holds unit normals with shape (..., n_sub); leading axes are
    independent paths.  Returns the path values at the n_sub + 1 sub-grid
    points, shape (..., n_sub + 1).  All values are >= 0, and r0 = 0 yields
    the identically zero path.
    """
    if t1 < t0:
        raise ParamError(f"t1 must be >= t0, got [{t0}, {t1}]")
    draws = np.asarray(gauss_draws, dtype=float)
    if draws.shape[-1] != n_sub:
        raise ParamError(
            f"expected exactly n_sub={n_sub} draws on the last axis, got {draws.shape[-1]}"
        )
    h = (t1 - t0) / n_sub
    increments = math.sqrt(h) * draws if h > 0 else np.zeros_like(draws)
    b_path = np.cumsum(increments, axis=-1)
    drift = params.eta * params.lambda_cap - 0.5 * params.gamma**2
    u = h * np.arange(1, n_sub + 1)
    log_e = drift * u + params.gamma * b_path
    e_path = np.exp(log_e)
    ones = np.ones(e_path.shape[:-1] + (1,))
    e_full = np.concatenate([ones, e_path], axis=-1)
    # running trapezoid of int_0^{u_j} E du on the sub-grid
    integral = np.concatenate(
        [np.zeros_like(ones), np.cumsum(0.5 * h * (e_full[..., 1:] + e_full[..., :-1]), axis=-1)],
        axis=-1,
    )
    r0 = np.asarray(r0, dtype=float)
    path = r0[..., None] * e_full / (1.0 + r0[..., None] * params.eta * integral)
    return path


def gbm_step(v, dt, dw, drift, vol):
    """Exact-in-law GBM update: v * exp((drift - vol^2/2) dt + vol dw).

    dw is a Brownian increment (not a unit normal).  Strictly positive for
    v > 0.
    """
    v = np.asarray(v, dtype=float)
    out = v * np.exp((drift - 0.5 * vol**2) * np.asarray(dt, dtype=float) + vol * np.asarray(dw, dtype=float))
    return float(out) if out.ndim == 0 else out


def sale_gain(r, p, params: ModelParams):
    """Net proceeds of liquidating the whole stock, floored at zero:
    max((p - c1) r - c2, 0)."""
    r = np.asarray(r, dtype=float)
    out = np.maximum((np.asarray(p, dtype=float) - params.c1) * r - params.c2, 0.0)
    return float(out) if out.ndim == 0 else out


def liquidation(z: State, params: ModelParams) -> float:
    """Terminal payoff: sell everything or keep the cash, whichever is larger."""
    return z.x + sale_gain(z.r, z.p, params)


def path_rng(seed: int, path_index: int) -> np.random.Generator:
    """Deterministic per-path generator.

    Splitting rule: path i uses the child SeedSequence(seed, spawn_key=(i,)),
    so the stream of path i does not depend on how many paths are simulated
    or in what batches.
    """
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(path_index,)))
