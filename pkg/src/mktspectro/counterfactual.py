"""Random-timing benchmark: keep volumes and counts, redraw execution times.

Each replica re-draws an investor's entry times uniformly (without
replacement) from the stock's realized trade tape, reprices the entries at
the tape prices, and re-runs the accounting.  Replica randomness derives
from (master seed, investor id, stock id); within that stream replicas are
drawn in index order, so results are independent of scheduling and worker
count.
"""
from __future__ import annotations

import hashlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import date as Date
from typing import Iterable, Optional, Sequence

import numpy as np

from .diagnostics import DiagnosticLog
from .ledger import (
    ActivitySequence,
    Entry,
    FeeSchedule,
    HOLDING_DAY_CENTIS,
    HoldingTime,
    InvestorPerformance,
    fifo_match_pairs,
    portfolio_return,
    stock_earnings,
)
from .matching import Fill
from .money import CENT_MICROS, RATE_SCALE
from .orderflow import CENTIS_PER_DAY, InvestorClass, Market, Timestamp


class CounterfactualError(ValueError):
    pass


class InsufficientTapeError(CounterfactualError):
    pass


@dataclass(frozen=True)
class TradeTape:
    """Realized (time, price) sequence of one stock over the period."""

    stock_id: str
    times_cs: np.ndarray      # int64 epoch centiseconds, strictly increasing
    prices_micros: np.ndarray  # int64
    period_end_price_micros: int
    period_end_cs: int

    def __post_init__(self) -> None:
        if len(self.times_cs) != len(self.prices_micros):
            raise CounterfactualError("tape arrays must align")
        if len(self.times_cs) and (np.diff(self.times_cs) <= 0).any():
            raise CounterfactualError("tape timestamps must be strictly increasing")
        if len(self.prices_micros) and (self.prices_micros <= 0).any():
            raise CounterfactualError("tape prices must be positive")

    def __len__(self) -> int:
        return len(self.times_cs)


def tape_from_fills(
    stock_id: str,
    fills: Sequence[Fill],
    period_end_price_micros: int,
    period_end_ts: Timestamp,
) -> TradeTape:
    """Collapse a stock's fills into a tape; the last trade in a
    centisecond defines that timestamp's price."""
    times: list[int] = []
    prices: list[int] = []
    for f in fills:
        t = f.ts.epoch_centis
        if times and t == times[-1]:
            prices[-1] = f.price_micros
        else:
            times.append(t)
            prices.append(f.price_micros)
    return TradeTape(
        stock_id,
        np.asarray(times, dtype=np.int64),
        np.asarray(prices, dtype=np.int64),
        period_end_price_micros,
        period_end_ts.epoch_centis,
    )


def derive_rng(master_seed: int, *tokens: str) -> np.random.Generator:
    """Deterministic generator keyed by the master seed and string tokens."""
    entropy = [int(master_seed)]
    for t in tokens:
        digest = hashlib.blake2b(t.encode("utf-8"), digest_size=8).digest()
        entropy.append(int.from_bytes(digest, "big"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def _distinct_row(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    while True:
        row = rng.integers(0, n, size=k)
        row.sort()
        if k == 1 or (np.diff(row) != 0).all():
            return row


def _sample_index_rows(rng: np.random.Generator, n: int, k: int, rows: int) -> np.ndarray:
    """rows x k sorted distinct tape indices, uniform over k-subsets.

    With-replacement rows are drawn in one batch and the rare colliding rows
    redrawn in row order; when k is large relative to n a per-row partial
    permutation is used instead.
    """
    if k > n:
        raise InsufficientTapeError(f"tape has {n} timestamps, need {k}")
    if k * k <= n:
        mat = rng.integers(0, n, size=(rows, k))
        mat.sort(axis=1)
        if k > 1:
            bad = (np.diff(mat, axis=1) == 0).any(axis=1)
            for r in np.nonzero(bad)[0]:
                mat[r] = _distinct_row(rng, n, k)
        return mat
    mat = np.empty((rows, k), dtype=np.int64)
    for r in range(rows):
        row = rng.permutation(n)[:k]
        row.sort()
        mat[r] = row
    return mat


def sample_random_times(j: int, tape: TradeTape, rng: np.random.Generator) -> np.ndarray:
    """j timestamps drawn uniformly without replacement from the tape,
    ascending; entries take them in their original index order."""
    idx = _sample_index_rows(rng, len(tape), j, 1)[0]
    return tape.times_cs[idx]


@dataclass(frozen=True)
class ReplicaResult:
    investor_id: str
    replica: int
    r: float
    j: int
    dt_days: float

    @property
    def label(self) -> str:
        if self.r > 0:
            return "winner"
        if self.r < 0:
            return "loser"
        return "flat"


def _timestamp_from_epoch(epoch_cs: int) -> Timestamp:
    day, centis = divmod(int(epoch_cs), CENTIS_PER_DAY)
    return Timestamp(Date.fromordinal(day), centis)


def reprice_sequence(seq: ActivitySequence, new_times_cs: Sequence[int], tape: TradeTape) -> ActivitySequence:
    """Entries keep their volumes and order; sampled times replace the real
    ones and each entry is repriced at the tape trade at its new time.  A
    virtual close-out keeps its fixed period-end time and price."""
    real = [e for e in seq.entries if not e.virtual]
    if len(new_times_cs) != len(real):
        raise CounterfactualError("need one sampled time per non-virtual entry")
    positions = np.searchsorted(tape.times_cs, np.asarray(new_times_cs, dtype=np.int64))
    entries: list[Entry] = []
    for k, (e, t_cs) in enumerate(zip(real, new_times_cs)):
        pos = int(positions[k])
        if pos >= len(tape) or int(tape.times_cs[pos]) != int(t_cs):
            raise CounterfactualError(f"sampled time {t_cs} not on the tape")
        price = int(tape.prices_micros[pos])
        entries.append(Entry(
            volume=e.volume,
            notional_micros=abs(e.volume) * price,
            ts=_timestamp_from_epoch(int(t_cs)),
            seq=k,
        ))
    for e in seq.entries:
        if e.virtual:
            entries.append(e)
    return ActivitySequence(seq.investor_id, seq.stock_id, tuple(entries))


def holding_time_any_order(seq: ActivitySequence) -> HoldingTime:
    """FIFO holding time without the sanitized-prefix requirement; matching
    is fixed by the entry order, so it equals the original lot structure."""
    pairs = fifo_match_pairs([e.volume for e in seq.entries])
    weighted = 0
    shares = 0
    for b, s, n in pairs:
        weighted += n * (seq.entries[s].ts.epoch_centis - seq.entries[b].ts.epoch_centis)
        shares += n
    return HoldingTime(tuple(pairs), weighted, shares)


def reprice_and_evaluate(
    sequences: Sequence[ActivitySequence],
    new_times: Sequence[Sequence[int]],
    tapes: dict[str, TradeTape],
    schedule_for: dict[str, FeeSchedule],
    dividends: dict[str, Sequence[tuple[Date, int]]],
    investor_class: InvestorClass,
    *,
    replica: int = 0,
    count_virtual: bool = True,
    virtual_costs: bool = True,
) -> ReplicaResult:
    """Reference (scalar) evaluation of one replica of one investor.

    `sequences` are the investor's per-stock sequences within one market;
    `new_times[i]` are the sampled epoch-centisecond times for its
    non-virtual entries.  Volumes and counts are preserved by construction;
    intermediate short positions, were the order ever inverted, would be
    accepted rather than re-sanitized.
    """
    total_e = 0
    denom = 0
    weighted = 0
    shares = 0
    j = 0
    investor_id = sequences[0].investor_id if sequences else ""
    for seq, times in zip(sequences, new_times):
        tape = tapes[seq.stock_id]
        repriced = reprice_sequence(seq, times, tape)
        earnings = stock_earnings(
            repriced, schedule_for[seq.stock_id], dividends.get(seq.stock_id, ()),
            investor_class, virtual_costs=virtual_costs,
        )
        holding = holding_time_any_order(repriced)
        total_e += earnings.earnings_micros
        denom += earnings.buy_capital_micros + earnings.buy_cost_micros
        weighted += holding.weighted_centis
        shares += holding.matched_shares
        j += repriced.n_transactions(count_virtual)
    r = total_e / denom if denom > 0 else 0.0
    dt = weighted / (shares * HOLDING_DAY_CENTIS) if shares else 0.0
    return ReplicaResult(investor_id, replica, r, j, dt)


@dataclass
class _PreparedStock:
    stock_id: str
    volumes: np.ndarray            # int64, real (non-virtual) entries
    abs_volumes: np.ndarray
    prefix: np.ndarray             # int64, prefix[i] = sum volumes[:i]
    sell_mask: np.ndarray
    buy_mask: np.ndarray
    n_real: int
    virtual_volume: int            # 0 when no close-out entry
    virtual_notional: int
    virtual_time_cs: int
    combined_e7: int
    stamp_e7: int
    floor_scaled: int              # floor_cents * CENT_MICROS * RATE_SCALE
    virtual_costs: bool
    dividends: tuple[tuple[int, int], ...]   # (ex-date midnight epoch cs, cash micros)
    fifo_buy_idx: np.ndarray       # indices into full entry list (virtual last)
    fifo_sell_idx: np.ndarray
    fifo_shares: np.ndarray
    matched_shares: int
    j_s: int


@dataclass
class _PreparedInvestor:
    investor_id: str
    market: Market
    investor_class: InvestorClass
    j: int
    stocks: list[_PreparedStock]


@dataclass
class InvestorReplicas:
    investor_id: str
    market: Market
    investor_class: InvestorClass
    j: int
    r: np.ndarray
    dt_days: np.ndarray

    def result(self, replica: int) -> ReplicaResult:
        return ReplicaResult(self.investor_id, replica, float(self.r[replica]),
                             self.j, float(self.dt_days[replica]))


@dataclass
class MonteCarloResult:
    investors: list[InvestorReplicas]
    n_replicas: int
    master_seed: int
    diagnostics: DiagnosticLog = field(default_factory=DiagnosticLog)


def prepare_investor(
    investor_id: str,
    market: Market,
    investor_class: InvestorClass,
    sequences: Sequence[ActivitySequence],
    schedule: FeeSchedule,
    dividends: dict[str, Sequence[tuple[Date, int]]],
    *,
    count_virtual: bool = True,
    virtual_costs: bool = True,
) -> _PreparedInvestor:
    stocks: list[_PreparedStock] = []
    j_total = 0
    for seq in sequences:
        real = [e for e in seq.entries if not e.virtual]
        virtual = [e for e in seq.entries if e.virtual]
        volumes = np.asarray([e.volume for e in real], dtype=np.int64)
        pairs = fifo_match_pairs([e.volume for e in seq.entries])
        b_idx = np.asarray([p[0] for p in pairs], dtype=np.int64)
        s_idx = np.asarray([p[1] for p in pairs], dtype=np.int64)
        w = np.asarray([p[2] for p in pairs], dtype=np.int64)
        divs = tuple(
            (Date.toordinal(ex) * CENTIS_PER_DAY, cash)
            for ex, cash in dividends.get(seq.stock_id, ())
        )
        j_s = seq.n_transactions(count_virtual)
        j_total += j_s
        stocks.append(_PreparedStock(
            stock_id=seq.stock_id,
            volumes=volumes,
            abs_volumes=np.abs(volumes),
            prefix=np.concatenate([[0], np.cumsum(volumes)]),
            sell_mask=volumes > 0,
            buy_mask=volumes < 0,
            n_real=len(real),
            virtual_volume=virtual[0].volume if virtual else 0,
            virtual_notional=virtual[0].notional_micros if virtual else 0,
            virtual_time_cs=virtual[0].ts.epoch_centis if virtual else 0,
            combined_e7=schedule.combined_e7(investor_class),
            stamp_e7=schedule.stamp_e7,
            floor_scaled=schedule.floor_cents * CENT_MICROS * RATE_SCALE,
            virtual_costs=virtual_costs,
            dividends=divs,
            fifo_buy_idx=b_idx,
            fifo_sell_idx=s_idx,
            fifo_shares=w,
            matched_shares=int(w.sum()) if len(w) else 0,
            j_s=j_s,
        ))
    return _PreparedInvestor(investor_id, market, investor_class, j_total, stocks)


def _round_cents_vec(scaled: np.ndarray) -> np.ndarray:
    """Half-up rounding of RATE_SCALE-scaled micro amounts to cents."""
    den = CENT_MICROS * RATE_SCALE
    return (scaled + den // 2) // den


def _eval_stock(ps: _PreparedStock, tape: TradeTape, rng: np.random.Generator,
                n_replicas: int, strict: bool) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(earnings, buy denominator, weighted holding centis) per replica."""
    idx = _sample_index_rows(rng, len(tape), ps.n_real, n_replicas)
    if strict:
        # Entry order (and with it the position path) is preserved by the
        # sorted-times assignment, so the sanitized prefix positions already
        # guarantee non-negative holdings; nothing to resample.
        pass
    times = tape.times_cs[idx]                      # (nrep, n_real)
    prices = tape.prices_micros[idx]
    notion = ps.abs_volumes[None, :] * prices        # exact int64 micros

    base = notion * ps.combined_e7
    np.maximum(base, ps.floor_scaled, out=base)
    stamped = base + np.where(ps.sell_mask[None, :], notion * ps.stamp_e7, 0)
    costs = _round_cents_vec(stamped) * CENT_MICROS  # micros, cent-exact

    buys = ps.buy_mask[None, :]
    sells = ps.sell_mask[None, :]
    b = (notion * buys).sum(axis=1)
    s = (notion * sells).sum(axis=1)
    cb = (costs * buys).sum(axis=1)
    cs = (costs * sells).sum(axis=1)

    if ps.virtual_volume:
        s = s + ps.virtual_notional
        if ps.virtual_costs:
            v_scaled = max(ps.virtual_notional * ps.combined_e7, ps.floor_scaled) \
                + ps.virtual_notional * ps.stamp_e7
            cs = cs + int(_round_cents_vec(np.asarray([v_scaled]))[0]) * CENT_MICROS

    d = np.zeros(n_replicas, dtype=np.int64)
    for ex_cs, cash in ps.dividends:
        before = (times < ex_cs).sum(axis=1)
        holdings = -ps.prefix[before]
        amount = cash * holdings
        half = CENT_MICROS // 2
        d += np.sign(amount) * ((np.abs(amount) + half) // CENT_MICROS) * CENT_MICROS

    earnings = s - b - cb - cs + d
    denom = b + cb

    if ps.matched_shares:
        if ps.virtual_volume:
            full_times = np.concatenate(
                [times, np.full((n_replicas, 1), ps.virtual_time_cs, dtype=np.int64)], axis=1)
        else:
            full_times = times
        weighted = (
            (full_times[:, ps.fifo_sell_idx] - full_times[:, ps.fifo_buy_idx]) * ps.fifo_shares
        ).sum(axis=1)
    else:
        weighted = np.zeros(n_replicas, dtype=np.int64)
    return earnings, denom, weighted


def evaluate_investor(prep: _PreparedInvestor, tapes: dict[str, TradeTape],
                      n_replicas: int, master_seed: int, strict: bool) -> InvestorReplicas:
    total_e = np.zeros(n_replicas, dtype=np.int64)
    denom = np.zeros(n_replicas, dtype=np.int64)
    weighted = np.zeros(n_replicas, dtype=np.int64)
    shares = 0
    for ps in prep.stocks:
        rng = derive_rng(master_seed, prep.investor_id, ps.stock_id)
        e, dn, w = _eval_stock(ps, tapes[ps.stock_id], rng, n_replicas, strict)
        total_e += e
        denom += dn
        weighted += w
        shares += ps.matched_shares
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(denom > 0, total_e / np.maximum(denom, 1), 0.0)
    dt = weighted / (shares * HOLDING_DAY_CENTIS) if shares else np.zeros(n_replicas)
    return InvestorReplicas(prep.investor_id, prep.market, prep.investor_class, prep.j, r, dt)


_WORKER_TAPES: dict[str, TradeTape] = {}
_WORKER_ARGS: tuple[int, int, bool] | None = None


def _init_worker(tapes: dict[str, TradeTape], n_replicas: int, master_seed: int, strict: bool) -> None:
    global _WORKER_TAPES, _WORKER_ARGS
    _WORKER_TAPES = tapes
    _WORKER_ARGS = (n_replicas, master_seed, strict)


def _eval_chunk(chunk: list[_PreparedInvestor]) -> list[InvestorReplicas]:
    assert _WORKER_ARGS is not None
    n_replicas, master_seed, strict = _WORKER_ARGS
    return [evaluate_investor(p, _WORKER_TAPES, n_replicas, master_seed, strict) for p in chunk]


def run_monte_carlo(
    prepared: Sequence[_PreparedInvestor],
    tapes: dict[str, TradeTape],
    *,
    n_replicas: int = 2000,
    master_seed: int = 0,
    strict_position_mode: bool = False,
    workers: int = 1,
) -> MonteCarloResult:
    """Evaluate n_replicas random-timing replicas for every investor.

    Investors lacking a tape (or with one shorter than their entry count)
    are skipped with a diagnostic.  Output order and values are independent
    of the worker count.
    """
    diag = DiagnosticLog()
    runnable: list[_PreparedInvestor] = []
    for p in prepared:
        missing = next((ps.stock_id for ps in p.stocks if ps.stock_id not in tapes), None)
        if missing is not None:
            diag.warning("no-tape", f"investor {p.investor_id!r} skipped: no tape for {missing!r}")
            continue
        short = next((ps.stock_id for ps in p.stocks if ps.n_real > len(tapes[ps.stock_id])), None)
        if short is not None:
            diag.warning("insufficient-tape",
                         f"investor {p.investor_id!r} skipped: tape for {short!r} too short")
            continue
        runnable.append(p)

    if workers <= 1 or len(runnable) < 2:
        _init_worker(tapes, n_replicas, master_seed, strict_position_mode)
        investors = _eval_chunk(list(runnable))
    else:
        chunk_size = max(1, (len(runnable) + workers * 4 - 1) // (workers * 4))
        chunks = [list(runnable[i:i + chunk_size]) for i in range(0, len(runnable), chunk_size)]
        with ProcessPoolExecutor(
            max_workers=workers,
            initializer=_init_worker,
            initargs=(tapes, n_replicas, master_seed, strict_position_mode),
        ) as pool:
            investors = [inv for part in pool.map(_eval_chunk, chunks) for inv in part]
    return MonteCarloResult(investors, n_replicas, master_seed, diag)


REPLICA_SUMMARY_HEADER = ("bin_kind", "bin_center", "pool", "mean_R", "std_R", "count")


def replica_pool_arrays(result: MonteCarloResult, market: Market, cls: InvestorClass):
    """Pooled (J, dt, R) arrays over all replicas of one (market, class)."""
    js, dts, rs = [], [], []
    for inv in result.investors:
        if inv.market is market and inv.investor_class is cls:
            js.append(np.full(result.n_replicas, inv.j, dtype=np.float64))
            dts.append(inv.dt_days)
            rs.append(inv.r)
    if not js:
        empty = np.empty(0)
        return empty, empty, empty
    return np.concatenate(js), np.concatenate(dts), np.concatenate(rs)
