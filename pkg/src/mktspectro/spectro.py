"""Stylized-fact extraction: pools, geometric binning, power-law fits.

The three fitted relations are R ~ J^-alpha, R ~ dt^beta, dt ~ J^-gamma;
fits run on log-log bin means and exponents are reported with those sign
conventions (alpha and gamma flip the regression slope's sign).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .diagnostics import DiagnosticLog
from .ledger import InvestorPerformance
from .orderflow import InvestorClass, Market

POOLS = ("all", "winner", "loser")

KIND_J = "J"
KIND_DT = "dt"


class SpectroError(ValueError):
    pass


def geometric_edges(max_value: float, ratio: float = 2.0, first: float = 1.0) -> np.ndarray:
    """Multiplicative grid from `first`, extended until it exceeds max_value."""
    if max_value < first:
        return np.array([first, first * ratio])
    edges = [first]
    while edges[-1] <= max_value:
        edges.append(edges[-1] * ratio)
    return np.asarray(edges)


def decade_third_edges(min_value: float, max_value: float) -> np.ndarray:
    """10^(k/3) grid covering [min_value, max_value], k integer."""
    if min_value <= 0 or max_value <= 0:
        raise SpectroError("decade-third edges need positive values")
    k_lo = math.floor(3 * math.log10(min_value))
    while 10 ** (k_lo / 3) > min_value:
        k_lo -= 1
    k_hi = k_lo + 1
    while 10 ** (k_hi / 3) <= max_value:
        k_hi += 1
    return np.asarray([10 ** (k / 3) for k in range(k_lo, k_hi + 1)])


@dataclass(frozen=True)
class BinnedSeries:
    """Per-bin averages of returns against J or dt.

    `mean_other` carries the mean dt for J bins and the mean J for dt bins,
    which is what the dt ~ J fit consumes.  Empty bins stay in place with
    count 0 (fits skip them).
    """

    kind: str
    pool: str
    edges: np.ndarray
    counts: np.ndarray
    mean_r: np.ndarray
    std_r: np.ndarray
    mean_other: np.ndarray

    @property
    def centers(self) -> np.ndarray:
        return np.sqrt(self.edges[:-1] * self.edges[1:])

    @property
    def n_bins(self) -> int:
        return len(self.counts)


def bin_arrays(
    x: np.ndarray,
    r: np.ndarray,
    other: np.ndarray,
    kind: str,
    edges: np.ndarray | None = None,
    pool: str = "all",
) -> BinnedSeries:
    """Bin (x, R) samples on a geometric grid; x must be the J or dt values.

    Non-positive x values cannot sit on a log grid and are excluded.
    """
    x = np.asarray(x, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    other = np.asarray(other, dtype=np.float64)
    keep = x > 0
    x, r, other = x[keep], r[keep], other[keep]
    if edges is None:
        if len(x) == 0:
            edges = np.array([1.0, 2.0])
        elif kind == KIND_J:
            edges = geometric_edges(float(x.max()))
        else:
            edges = decade_third_edges(float(x.min()), float(x.max()))
    edges = np.asarray(edges, dtype=np.float64)
    n_bins = len(edges) - 1
    counts = np.zeros(n_bins, dtype=np.int64)
    mean_r = np.full(n_bins, np.nan)
    std_r = np.full(n_bins, np.nan)
    mean_other = np.full(n_bins, np.nan)
    if len(x):
        which = np.digitize(x, edges) - 1   # [e_k, e_{k+1})
        for b in range(n_bins):
            mask = which == b
            n = int(mask.sum())
            counts[b] = n
            if n:
                mean_r[b] = r[mask].mean()
                std_r[b] = r[mask].std()
                mean_other[b] = other[mask].mean()
    return BinnedSeries(kind, pool, edges, counts, mean_r, std_r, mean_other)


def split_pools(r: np.ndarray) -> dict[str, np.ndarray]:
    """Strict-sign masks; zero returns belong to neither winners nor losers."""
    return {"all": np.ones(len(r), dtype=bool), "winner": r > 0, "loser": r < 0}


def bin_and_average(
    performances: Sequence[InvestorPerformance],
    kind: str,
    edges: np.ndarray | None = None,
    pools: Sequence[str] = POOLS,
) -> dict[str, BinnedSeries]:
    """Pooled binned series (all/winner/loser) for one performance set."""
    j = np.asarray([p.j for p in performances], dtype=np.float64)
    dt = np.asarray([p.dt_days for p in performances], dtype=np.float64)
    r = np.asarray([p.r for p in performances], dtype=np.float64)
    x, other = (j, dt) if kind == KIND_J else (dt, j)
    if edges is None and len(x[x > 0]):
        if kind == KIND_J:
            edges = geometric_edges(float(x.max()))
        else:
            pos = x[x > 0]
            edges = decade_third_edges(float(pos.min()), float(pos.max()))
    masks = split_pools(r)
    return {
        pool: bin_arrays(x[masks[pool]], r[masks[pool]], other[masks[pool]], kind, edges, pool)
        for pool in pools
    }


RELATIONS = {
    "R~J": ("alpha", KIND_J, "r", -1.0),
    "R~dt": ("beta", KIND_DT, "r", 1.0),
    "dt~J": ("gamma", KIND_J, "other", -1.0),
}


@dataclass(frozen=True)
class PowerLawFit:
    name: str                  # alpha | beta | gamma
    relation: str
    exponent: float
    stderr: float
    intercept: float
    r2: float
    bins_used: int
    fit_lo: float
    fit_hi: float
    usable: bool

    @classmethod
    def unavailable(cls, name: str, relation: str) -> "PowerLawFit":
        return cls(name, relation, math.nan, math.nan, math.nan, math.nan, 0, math.nan, math.nan, False)


def fit_power_law(
    series: BinnedSeries,
    relation: str,
    *,
    min_count: int = 10,
    weighted: bool = False,
) -> PowerLawFit:
    """Least squares on (log bin center, log |bin mean|).

    Bins need count >= min_count and a non-zero mean to enter; fewer than
    three usable bins marks the fit unavailable.  Loser pools fit the
    magnitude of the (negative) mean return.
    """
    try:
        name, kind, dep, sign = RELATIONS[relation]
    except KeyError:
        raise SpectroError(f"unknown relation {relation!r}") from None
    if series.kind != kind:
        raise SpectroError(f"relation {relation} needs {kind}-binned series, got {series.kind}")
    values = series.mean_r if dep == "r" else series.mean_other
    centers = series.centers
    usable = (series.counts >= min_count) & np.isfinite(values) & (np.abs(values) > 0) & (centers > 0)
    n = int(usable.sum())
    if n < 3:
        return PowerLawFit.unavailable(name, relation)
    x = np.log(centers[usable])
    y = np.log(np.abs(values[usable]))
    w = series.counts[usable].astype(np.float64) if weighted else np.ones(n)
    w_sum = w.sum()
    xb = (w * x).sum() / w_sum
    yb = (w * y).sum() / w_sum
    sxx = (w * (x - xb) ** 2).sum()
    if sxx == 0:
        return PowerLawFit.unavailable(name, relation)
    slope = (w * (x - xb) * (y - yb)).sum() / sxx
    intercept = yb - slope * xb
    resid = y - (intercept + slope * x)
    ss_res = (w * resid ** 2).sum()
    ss_tot = (w * (y - yb) ** 2).sum()
    stderr = math.sqrt(ss_res / (n - 2) / sxx)
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return PowerLawFit(
        name=name, relation=relation, exponent=sign * slope, stderr=stderr,
        intercept=intercept, r2=r2, bins_used=n,
        fit_lo=float(centers[usable].min()), fit_hi=float(centers[usable].max()),
        usable=True,
    )


@dataclass(frozen=True)
class ExponentTriple:
    """alpha vs beta*gamma consistency for one (market, class, pool) cell."""

    alpha: PowerLawFit
    beta: PowerLawFit
    gamma: PowerLawFit
    k: float
    beta_gamma: float
    sigma_beta_gamma: float
    combined_sigma: float
    verdict: str    # consistent | inconsistent | indeterminate


def relation_verdict(alpha: float, alpha_err: float, beta: float, beta_err: float,
                     gamma: float, gamma_err: float, k: float = 2.0) -> tuple[float, float, float, str]:
    """(beta*gamma, its propagated error, combined error, verdict)."""
    bg = beta * gamma
    sigma_bg = math.sqrt((beta * gamma_err) ** 2 + (gamma * beta_err) ** 2)
    combined = math.sqrt(alpha_err ** 2 + sigma_bg ** 2)
    verdict = "consistent" if abs(alpha - bg) <= k * combined else "inconsistent"
    return bg, sigma_bg, combined, verdict


def check_exponent_relation(alpha: PowerLawFit, beta: PowerLawFit, gamma: PowerLawFit,
                            k: float = 2.0) -> ExponentTriple:
    if not (alpha.usable and beta.usable and gamma.usable):
        return ExponentTriple(alpha, beta, gamma, k, math.nan, math.nan, math.nan, "indeterminate")
    bg, sigma_bg, combined, verdict = relation_verdict(
        alpha.exponent, alpha.stderr, beta.exponent, beta.stderr, gamma.exponent, gamma.stderr, k)
    return ExponentTriple(alpha, beta, gamma, k, bg, sigma_bg, combined, verdict)


@dataclass(frozen=True)
class BoxStats:
    minimum: float
    lower_quartile: float
    median: float
    upper_quartile: float
    maximum: float


def box_stats(sample: Sequence[float]) -> BoxStats:
    """Five-number summary with Tukey hinges: the quartiles are medians of
    the lower/upper half, halves including the median element for odd n."""
    if len(sample) == 0:
        raise SpectroError("empty sample")
    a = sorted(float(v) for v in sample)
    n = len(a)

    def median_of(part: Sequence[float]) -> float:
        m = len(part)
        mid = m // 2
        if m % 2:
            return part[mid]
        return (part[mid - 1] + part[mid]) / 2.0

    lower = a[: (n + 1) // 2]
    upper = a[n // 2:]
    return BoxStats(a[0], median_of(lower), median_of(a), median_of(upper), a[-1])


@dataclass
class PoolCounts:
    market: Market
    investor_class: InvestorClass
    winners: int
    losers: int
    flats: int

    @property
    def total(self) -> int:
        return self.winners + self.losers + self.flats

    @property
    def winner_fraction(self) -> float:
        return self.winners / self.total if self.total else math.nan


@dataclass
class Classification:
    pools: dict[tuple[Market, InvestorClass], dict[str, list[InvestorPerformance]]]
    counts: list[PoolCounts]
    diagnostics: DiagnosticLog = field(default_factory=DiagnosticLog)


def classify_investors(performances: Sequence[InvestorPerformance]) -> Classification:
    """Strict-sign winner/loser partition per (market, class); zero-return
    investors are reported as flat and excluded from both pools."""
    diag = DiagnosticLog()
    pools: dict[tuple[Market, InvestorClass], dict[str, list[InvestorPerformance]]] = {}
    for market in Market:
        for cls in InvestorClass:
            pools[(market, cls)] = {"winner": [], "loser": [], "flat": []}
    for p in performances:
        pools[(p.market, p.investor_class)][p.label].append(p)
    counts = []
    for (market, cls), cell in pools.items():
        n_w, n_l, n_f = len(cell["winner"]), len(cell["loser"]), len(cell["flat"])
        if n_w + n_l + n_f:
            counts.append(PoolCounts(market, cls, n_w, n_l, n_f))
            if n_w == 0 or n_l == 0:
                diag.info("degenerate-pool",
                          f"{market.value}/{cls.value}: empty "
                          f"{'winner' if n_w == 0 else 'loser'} pool, fits skipped")
    return Classification(pools, counts, diag)


@dataclass
class OneOverNSeries:
    portfolio_value: list[float]
    index_normalized: Optional[list[float]]
    diagnostics: DiagnosticLog = field(default_factory=DiagnosticLog)


def one_over_n_benchmark(
    daily_prices: dict[str, Sequence[Optional[float]]],
    index_series: Sequence[float] | None = None,
    capital: float = 1.0,
) -> OneOverNSeries:
    """Equal-capital buy-and-hold: capital/N per stock at its first-day
    price, valued daily at the (carry-forward) close.  The ingested index
    is normalized to the same starting capital for comparison."""
    diag = DiagnosticLog()
    if not daily_prices:
        raise SpectroError("no stocks to allocate")
    lengths = {len(p) for p in daily_prices.values()}
    if len(lengths) != 1:
        raise SpectroError("price series must align on the same days")
    n_days = lengths.pop()
    per_stock = capital / len(daily_prices)
    shares: dict[str, float] = {}
    filled: dict[str, list[float]] = {}
    for stock in sorted(daily_prices):
        series = daily_prices[stock]
        if n_days == 0 or series[0] is None:
            raise SpectroError(f"stock {stock!r} has no first-day price")
        prices: list[float] = []
        last = float(series[0])
        for i, p in enumerate(series):
            if p is None:
                diag.info("carried-price", f"{stock}: day {i} price carried forward")
                prices.append(last)
            else:
                last = float(p)
                prices.append(last)
        shares[stock] = per_stock / prices[0]
        filled[stock] = prices
    portfolio = [
        sum(shares[s] * filled[s][i] for s in sorted(filled))
        for i in range(n_days)
    ]
    index_norm = None
    if index_series is not None:
        if len(index_series) != n_days:
            raise SpectroError("index series must align with price days")
        scale = capital / float(index_series[0])
        index_norm = [float(v) * scale for v in index_series]
    return OneOverNSeries(portfolio, index_norm, diag)
