"""Intervention operators, renewal schedule and pending-order bookkeeping.

Three state jumps drive the control problem:

* harvest: sell a units now, cash + (p - c1) a - c2, stock - a;
* renew:   pay (q + c3) e for an order of e units and collect the natural
           renewal g0 immediately;
* mature:  a past order of e units finally adds g(e) to the stock.

Renewals happen only at the scheduled dates t_i = i T / n; an order placed
at t_i matures at t_{i+m}.  Orders paid but not yet matured are the pending
orders, which augment the state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ModelParams, ParamError, State

__all__ = [
    "Schedule",
    "PendingOrders",
    "Strategy",
    "harvest_op",
    "renew_op",
    "mature_op",
    "date_count",
    "pending_window",
    "profitable_filter",
]


@dataclass(frozen=True)
class Schedule:
    """Renewal dates t_i = i T / n_dates and the maturation delay."""

    T: float
    n_dates: int
    m_delay: int

    def __post_init__(self):
        if self.n_dates < 1:
            raise ParamError(f"n_dates must be >= 1, got {self.n_dates}")
        if not 0 <= self.m_delay <= self.n_dates:
            raise ParamError(f"m_delay must lie in [0, {self.n_dates}], got {self.m_delay}")

    @classmethod
    def from_params(cls, params: ModelParams) -> "Schedule":
        return cls(T=params.T, n_dates=params.n_dates, m_delay=params.m_delay)

    @property
    def dates(self) -> np.ndarray:
        return np.arange(1, self.n_dates + 1) * (self.T / self.n_dates)

    @property
    def delta(self) -> float:
        return self.m_delay * self.T / self.n_dates

    def date(self, i: int) -> float:
        if not 1 <= i <= self.n_dates:
            raise ParamError(f"date index must lie in [1, {self.n_dates}], got {i}")
        return i * self.T / self.n_dates

    def pending_len(self, interval: int) -> int:
        """Number of pending orders carried during [t_k, t_{k+1})."""
        return min(interval, self.m_delay)


def date_count(t: float, schedule: Schedule) -> int:
    """N(t): number of renewal dates <= t (right-continuous step function)."""
    if not 0 <= t <= schedule.T:
        raise ParamError(f"t must lie in [0, {schedule.T}], got {t}")
    return int(np.searchsorted(schedule.dates, t, side="right"))


def pending_window(t: float, schedule: Schedule) -> range:
    """Index range of orders paid but not yet matured at time t.

    These are the date indices i with N(t - delta) < i <= N(t); the range is
    empty whenever the two counts coincide (in particular for m_delay = 0).
    """
    if not 0 <= t <= schedule.T:
        raise ParamError(f"t must lie in [0, {schedule.T}], got {t}")
    hi = date_count(t, schedule)
    t_lag = t - schedule.delta
    lo = 0 if t_lag < 0 else int(np.searchsorted(schedule.dates, t_lag, side="right"))
    return range(lo + 1, hi + 1)


@dataclass(frozen=True)
class PendingOrders:
    """Orders paid but not matured: ordered (date_index, quantity) pairs.

    Entries are oldest first with consecutive date indices; the oldest entry
    is the next to mature.  Capacity is m_delay.
    """

    entries: tuple[tuple[int, float], ...] = ()

    @property
    def quantities(self) -> tuple[float, ...]:
        return tuple(q for _, q in self.entries)

    def validate(self, t: float, schedule: Schedule, K: float) -> "PendingOrders":
        window = pending_window(t, schedule)
        indices = [i for i, _ in self.entries]
        if len(self.entries) > schedule.m_delay:
            raise ParamError(f"at most m_delay={schedule.m_delay} pending orders, got {len(self.entries)}")
        if indices != list(window):
            raise ParamError(f"pending indices {indices} do not match the window {list(window)} at t={t}")
        for i, q in self.entries:
            if not 0 <= q <= K:
                raise ParamError(f"pending quantity for date {i} must lie in [0, K]=[0, {K}], got {q}")
        return self

    def oldest(self) -> float:
        if not self.entries:
            raise ParamError("no pending orders to mature")
        return self.entries[0][1]

    def advance(self, date_index: int, quantity: float, matures: bool) -> "PendingOrders":
        """Append the order placed at date_index; drop the maturing oldest entry."""
        entries = self.entries[1:] if matures else self.entries
        return PendingOrders(entries + ((date_index, float(quantity)),))


@dataclass(frozen=True)
class Strategy:
    """Renewal quantities per date plus a time-ordered list of harvests."""

    renewals: dict[int, float] = field(default_factory=dict)
    harvests: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        times = [t for t, _ in self.harvests]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ParamError("harvest times must be nondecreasing")
        if any(z < 0 for _, z in self.harvests):
            raise ParamError("harvest quantities must be >= 0")


def harvest_op(z: State, a: float, params: ModelParams) -> State:
    """Sell a units: cash grows by (p - c1) a - c2, the stock shrinks by a."""
    if not 0 <= a <= z.r:
        raise ParamError(f"harvest amount must lie in [0, r]=[0, {z.r}], got {a}")
    return State(z.x + (z.p - params.c1) * a - params.c2, z.r - a, z.p, z.q)


def renew_op(z: State, e: float, params: ModelParams) -> State:
    """Pay for an order of e units and collect the natural renewal g0 now."""
    if not 0 <= e <= params.K:
        raise ParamError(f"renewal order must lie in [0, K]=[0, {params.K}], got {e}")
    return State(z.x - (z.q + params.c3) * e, z.r + params.g0, z.p, z.q)


def mature_op(z: State, e_old: float, params: ModelParams) -> State:
    """A past order of e_old units matures: the stock grows by g(e_old)."""
    if not 0 <= e_old <= params.K:
        raise ParamError(f"matured order must lie in [0, K]=[0, {params.K}], got {e_old}")
    return State(z.x, z.r + params.g(e_old), z.p, z.q)


def profitable_filter(strategy: Strategy, price_at, params: ModelParams) -> Strategy:
    """Drop every harvest whose net payoff (P_tau - c1) zeta - c2 is negative.

    Keeping only profitable harvests never lowers the terminal liquidation
    value: the filtered strategy leaves both more cash and more stock on
    every path.  ``price_at`` maps a harvest time to the price on the path.
    """
    kept = tuple(
        (t, z) for t, z in strategy.harvests if (price_at(t) - params.c1) * z - params.c2 >= 0
    )
    return Strategy(renewals=dict(strategy.renewals), harvests=kept)
