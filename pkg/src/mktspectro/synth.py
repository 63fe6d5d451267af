"""Synthetic order-flow generation with zero-intelligence agents.

Agents submit random orders under light constraints: exact per-agent order
counts (arrival times are drawn conditioned on the target), a buy as the
first action on a stock so sanitization keeps most flow, and limit prices
inside a band around a per-stock reference path.  The emitted stream is
valid order-file input and replays through the matching engine.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from datetime import date as Date
from typing import Optional, Sequence

import numpy as np

from .counterfactual import derive_rng
from .ledger import InvestorPerformance
from .money import MICROS
from .orderflow import (
    DEFAULT_TICK_MICROS,
    InvestorClass,
    Market,
    OrderEvent,
    OrderKind,
    Side,
    StockMeta,
    Timestamp,
    TradingCalendar,
)


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class PopulationSpec:
    """Generator parameters; all distributions are fixed by (spec, seed)."""

    individuals_a: int = 800
    institutions_a: int = 40
    individuals_b: int = 140
    institutions_b: int = 20
    stocks_a: int = 32
    stocks_b: int = 11
    days: int = 20
    start: Date = Date(2003, 1, 6)
    freq_exponent: float = 2.5
    freq_min: int = 2
    freq_cap: int = 200
    size_mu: float = 6.0          # log of the typical order size in shares
    size_sigma: float = 1.0
    size_cap: int = 100_000
    limit_prob: float = 0.9
    price_band: float = 0.05      # relative limit-price offset around reference
    price_low: float = 5.0
    price_high: float = 30.0
    drift_sigma: float = 0.01     # daily log-step of the reference path

    def __post_init__(self) -> None:
        for name in ("individuals_a", "institutions_a", "individuals_b", "institutions_b"):
            if getattr(self, name) < 0:
                raise SynthError(f"{name} must be >= 0")
        if self.total_agents < 1:
            raise SynthError("population is empty")
        if self.stocks_a < 0 or self.stocks_b < 0 or self.stocks_a + self.stocks_b < 1:
            raise SynthError("need at least one stock")
        if self.days < 1:
            raise SynthError("need at least one trading day")
        if not 0.0 <= self.limit_prob <= 1.0:
            raise SynthError("limit_prob must be a probability")
        if self.freq_cap < 2 or self.freq_min < 2 or self.freq_min > self.freq_cap:
            raise SynthError("frequency range must allow round trips (min >= 2)")
        if self.freq_exponent <= 1.0:
            raise SynthError("frequency exponent must exceed 1")
        if not 0.0 < self.price_band < 0.5:
            raise SynthError("price band must be in (0, 0.5)")
        if self.price_low <= 0 or self.price_high < self.price_low:
            raise SynthError("bad reference price range")
        if self.size_sigma < 0 or self.size_cap < 1:
            raise SynthError("bad size distribution")

    @property
    def total_agents(self) -> int:
        return (self.individuals_a + self.institutions_a
                + self.individuals_b + self.institutions_b)

    def stock_ids(self, market: Market) -> list[str]:
        n = self.stocks_a if market is Market.A else self.stocks_b
        return [f"S{market.value}{i:03d}" for i in range(n)]


@dataclass(frozen=True)
class Agent:
    trader_id: str
    investor_class: InvestorClass
    market: Market
    stock_id: str
    target_orders: int


@dataclass
class GroundTruth:
    """What the generator actually did, for test oracles."""

    seed: int
    spec: dict
    planted: Optional[dict] = None

    def to_json(self) -> str:
        payload = {"seed": self.seed, "spec": self.spec}
        if self.planted is not None:
            payload["planted"] = self.planted
        return json.dumps(payload, sort_keys=True, indent=2, default=str)


def _frequency_targets(rng: np.random.Generator, spec: PopulationSpec, n: int) -> np.ndarray:
    ks = np.arange(spec.freq_min, spec.freq_cap + 1, dtype=np.float64)
    probs = ks ** (-spec.freq_exponent)
    probs /= probs.sum()
    return rng.choice(ks.astype(np.int64), size=n, p=probs)


def generate_population(spec: PopulationSpec, seed: int) -> list[Agent]:
    """Deterministic roster: ids, classes, home stocks, frequency targets."""
    rng = derive_rng(seed, "population")
    groups = (
        (Market.A, InvestorClass.INDIVIDUAL, spec.individuals_a, "AI"),
        (Market.A, InvestorClass.INSTITUTION, spec.institutions_a, "AT"),
        (Market.B, InvestorClass.INDIVIDUAL, spec.individuals_b, "BI"),
        (Market.B, InvestorClass.INSTITUTION, spec.institutions_b, "BT"),
    )
    agents: list[Agent] = []
    for market, cls, count, prefix in groups:
        if count == 0:
            continue
        stocks = spec.stock_ids(market)
        if not stocks:
            raise SynthError(f"market {market.value} has agents but no stocks")
        targets = _frequency_targets(rng, spec, count)
        homes = rng.integers(0, len(stocks), size=count)
        for i in range(count):
            agents.append(Agent(
                trader_id=f"{prefix}{i:06d}",
                investor_class=cls,
                market=market,
                stock_id=stocks[int(homes[i])],
                target_orders=int(targets[i]),
            ))
    return agents


def reference_paths(spec: PopulationSpec, cal: TradingCalendar, seed: int) -> dict[str, np.ndarray]:
    """Per-stock daily reference prices (micros), a slow multiplicative walk."""
    out: dict[str, np.ndarray] = {}
    for market in (Market.A, Market.B):
        for stock in spec.stock_ids(market):
            rng = derive_rng(seed, "reference", stock)
            p0 = rng.uniform(spec.price_low, spec.price_high)
            steps = rng.normal(0.0, spec.drift_sigma, size=len(cal.days))
            path = p0 * np.exp(np.cumsum(steps))
            ticks = np.maximum(np.round(path * MICROS / DEFAULT_TICK_MICROS), 1)
            out[stock] = (ticks * DEFAULT_TICK_MICROS).astype(np.int64)
    return out


def stock_metas(spec: PopulationSpec, refs: dict[str, np.ndarray]) -> dict[str, StockMeta]:
    metas: dict[str, StockMeta] = {}
    for market in (Market.A, Market.B):
        for stock in spec.stock_ids(market):
            metas[stock] = StockMeta(stock, market, int(refs[stock][0]))
    return metas


def _window_grid(spec: PopulationSpec, cal: TradingCalendar) -> tuple[np.ndarray, np.ndarray, int]:
    """Flatten all submission windows into one sampling range.

    Returns (cumulative window lengths, window starts as epoch centis,
    total length); an offset maps back through searchsorted.
    """
    starts: list[int] = []
    lengths: list[int] = []
    for day in cal.days:
        base = Date.toordinal(day) * 8_640_000
        for lo, hi in cal.sessions[day].submission_windows():
            starts.append(base + lo)
            lengths.append(hi - lo)
    cum = np.concatenate([[0], np.cumsum(lengths)])
    return cum, np.asarray(starts, dtype=np.int64), int(cum[-1])


def generate_orderflow(
    roster: Sequence[Agent],
    spec: PopulationSpec,
    cal: TradingCalendar,
    seed: int,
) -> tuple[list[OrderEvent], GroundTruth]:
    """Emit every agent's orders as a time-sorted, parseable event stream.

    Each agent submits exactly its target count; the earliest order per
    agent is a buy.  Limit prices sit inside the band around the stock's
    reference price for the order's day; order kinds and sizes are drawn
    per the spec.
    """
    if len(cal.days) < spec.days:
        raise SynthError("calendar does not cover the configured period")
    refs = reference_paths(spec, cal, seed)
    cum, starts, total = _window_grid(spec, cal)
    day_ordinals = np.asarray([Date.toordinal(d) for d in cal.days], dtype=np.int64)

    raw: list[tuple[int, int, Agent, Side, OrderKind, Optional[int], int]] = []
    for agent_no, agent in enumerate(roster):
        rng = derive_rng(seed, "agent", agent.trader_id)
        n = agent.target_orders
        offsets = np.sort(rng.integers(0, total, size=n))
        window = np.searchsorted(cum, offsets, side="right") - 1
        epochs = starts[window] + (offsets - cum[window])
        sides = [Side.BUY] + [Side.BUY if v < 0.5 else Side.SELL for v in rng.random(n - 1)]
        kinds = [OrderKind.LIMIT if v < spec.limit_prob else OrderKind.MARKET for v in rng.random(n)]
        sizes = np.clip(np.round(rng.lognormal(spec.size_mu, spec.size_sigma, size=n)),
                        1, spec.size_cap).astype(np.int64)
        band = rng.uniform(-spec.price_band, spec.price_band, size=n)
        ref_path = refs[agent.stock_id]
        for k in range(n):
            epoch = int(epochs[k])
            day_idx = int(np.searchsorted(day_ordinals, epoch // 8_640_000))
            price: Optional[int] = None
            if kinds[k] is OrderKind.LIMIT:
                ref = int(ref_path[day_idx])
                ticks = max(1, round(ref * (1.0 + float(band[k])) / DEFAULT_TICK_MICROS))
                price = ticks * DEFAULT_TICK_MICROS
            raw.append((epoch, agent_no, agent, sides[k], kinds[k], price, int(sizes[k])))

    raw.sort(key=lambda t: (t[0], t[1]))
    counters: dict[tuple[str, int], int] = {}
    events: list[OrderEvent] = []
    for epoch, _no, agent, side, kind, price, size in raw:
        day_ord, centis = divmod(epoch, 8_640_000)
        ts = Timestamp(Date.fromordinal(day_ord), centis)
        key = (agent.stock_id, day_ord)
        counters[key] = counters.get(key, 0) + 1
        events.append(OrderEvent(
            trader_id=agent.trader_id,
            investor_class=agent.investor_class,
            stock_id=agent.stock_id,
            side=side,
            order_kind=kind,
            price_micros=price,
            size=size,
            cancel_target=None,
            timestamp=ts,
            order_id=f"O{counters[key]:07d}",
        ))
    truth = GroundTruth(seed=seed, spec=asdict(spec))
    return events, truth


def generate_planted_performances(
    n: int,
    *,
    alpha: float = 0.31,
    gamma: float = 0.20,
    r_scale: float = 0.05,
    dt_scale: float = 250.0,
    j_min: int = 4,
    j_max: int = 2 ** 24,
    noise_sigma: float = 0.0,
    seed: int = 0,
    market: Market = Market.A,
    investor_class: InvestorClass = InvestorClass.INDIVIDUAL,
) -> tuple[list[InvestorPerformance], GroundTruth]:
    """Performance records with known power-law structure.

    J is log-uniform over [j_min, j_max]; R = r_scale * J^-alpha and
    dt = dt_scale * J^-gamma, each under optional log-normal noise.  The
    implied R ~ dt^(alpha/gamma) relation holds exactly in the noise-free
    case, which is what fit-recovery checks lean on.
    """
    if j_min < 1 or j_max <= j_min:
        raise SynthError("bad J range")
    rng = derive_rng(seed, "planted")
    u = rng.uniform(math.log(j_min), math.log(j_max), size=n)
    j = np.maximum(np.round(np.exp(u)), 1).astype(np.int64)
    r = r_scale * j.astype(np.float64) ** (-alpha)
    dt = dt_scale * j.astype(np.float64) ** (-gamma)
    if noise_sigma > 0:
        r = r * np.exp(rng.normal(0.0, noise_sigma, size=n))
        dt = dt * np.exp(rng.normal(0.0, noise_sigma, size=n))
    records = [
        InvestorPerformance(f"P{i:07d}", investor_class, market, float(r[i]), int(j[i]), float(dt[i]))
        for i in range(n)
    ]
    truth = GroundTruth(
        seed=seed,
        spec={"n": n, "j_min": j_min, "j_max": j_max, "noise_sigma": noise_sigma},
        planted={"alpha": alpha, "gamma": gamma, "beta": alpha / gamma,
                 "r_scale": r_scale, "dt_scale": dt_scale},
    )
    return records, truth
