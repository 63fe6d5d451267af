"""Per-investor accounting: activity sequences, exact costs, returns, holding time.

Sign convention: positive entry volume is a sell, negative is a buy.
Money stays in integer micros throughout; per-entry fees are rounded to
the cent (half-up) exactly once, when charged.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from datetime import date as Date
from typing import Iterable, Optional, Sequence

from .diagnostics import DiagnosticLog
from .matching import Fill
from .money import CENT_MICROS, MAX_NOTIONAL_MICROS, RATE_SCALE, parse_rate_e7, round_half_up
from .orderflow import InvestorClass, Market, Side, Timestamp

HOLDING_DAY_CENTIS = 8_640_000  # holding durations divide calendar centiseconds


class LedgerError(ValueError):
    pass


@dataclass(frozen=True)
class Entry:
    """One row of an activity sequence.

    `notional_micros` is the exact traded value |volume| * price; keeping it
    instead of a per-share price avoids rounding when an entry aggregates
    fills at several prices.
    """

    volume: int          # signed shares, positive = sell
    notional_micros: int
    ts: Timestamp
    seq: int = 0         # tie-break for identical timestamps
    virtual: bool = False

    def __post_init__(self) -> None:
        if self.volume == 0:
            raise LedgerError("entry volume must be non-zero")
        if self.notional_micros <= 0:
            raise LedgerError("entry notional must be positive")

    @property
    def is_sell(self) -> bool:
        return self.volume > 0

    @property
    def price(self) -> float:
        """Volume-weighted price in currency units (display only)."""
        return self.notional_micros / abs(self.volume) / 10**6


@dataclass(frozen=True)
class ActivitySequence:
    investor_id: str
    stock_id: str
    entries: tuple[Entry, ...]

    @property
    def n_entries(self) -> int:
        return len(self.entries)

    def n_transactions(self, count_virtual: bool = True) -> int:
        if count_virtual:
            return len(self.entries)
        return sum(1 for e in self.entries if not e.virtual)

    def volume_sum(self) -> int:
        return sum(e.volume for e in self.entries)

    def positions(self) -> list[int]:
        """Shares held after each entry."""
        out, pos = [], 0
        for e in self.entries:
            pos -= e.volume
            out.append(pos)
        return out


@dataclass(frozen=True)
class FeeSchedule:
    """Per-trade cost parameters; rates are integers scaled by 1e7.

    cost = max(notional * (brokerage + exchange + supervision), floor)
           + notional * stamp   (stamp on sells only)
    rounded half-up to the cent.  The rate sum is capped at 0.3%.
    """

    brokerage_e7: int
    exchange_e7: int
    supervision_e7: int
    stamp_e7: int
    floor_cents: int
    brokerage_by_class: dict[InvestorClass, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name, rate in (("brokerage", self.brokerage_e7), ("exchange", self.exchange_e7),
                           ("supervision", self.supervision_e7), ("stamp", self.stamp_e7)):
            if rate < 0:
                raise LedgerError(f"negative {name} rate")
        if self.floor_cents < 0:
            raise LedgerError("negative fee floor")
        cap = parse_rate_e7("0.003")
        brokerages = [self.brokerage_e7, *self.brokerage_by_class.values()]
        for b in brokerages:
            if b + self.exchange_e7 + self.supervision_e7 > cap:
                raise LedgerError("brokerage + exchange + supervision exceeds 0.3%")

    @classmethod
    def from_rates(
        cls,
        brokerage: str | float = "0.0015",
        exchange: str | float = "0.0001475",
        supervision: str | float = "0.00004",
        stamp: str | float = "0.001",
        floor: str | float = "5",
        brokerage_by_class: dict[InvestorClass, str | float] | None = None,
    ) -> "FeeSchedule":
        from .money import parse_amount_micros

        floor_micros = parse_amount_micros(str(floor))
        if floor_micros % CENT_MICROS:
            raise LedgerError("fee floor must be a whole number of cents")
        return cls(
            brokerage_e7=parse_rate_e7(brokerage),
            exchange_e7=parse_rate_e7(exchange),
            supervision_e7=parse_rate_e7(supervision),
            stamp_e7=parse_rate_e7(stamp),
            floor_cents=floor_micros // CENT_MICROS,
            brokerage_by_class={k: parse_rate_e7(v) for k, v in (brokerage_by_class or {}).items()},
        )

    @classmethod
    def zero(cls) -> "FeeSchedule":
        return cls(0, 0, 0, 0, 0)

    def combined_e7(self, investor_class: InvestorClass | None = None) -> int:
        b = self.brokerage_by_class.get(investor_class, self.brokerage_e7) if investor_class else self.brokerage_e7
        return b + self.exchange_e7 + self.supervision_e7


def default_schedules() -> dict[Market, FeeSchedule]:
    """Published A/B-market cost parameters (exchange fee differs)."""
    return {
        Market.A: FeeSchedule.from_rates(exchange="0.0001475"),
        Market.B: FeeSchedule.from_rates(exchange="0.000301"),
    }


def fee_cents(notional_micros: int, combined_e7: int, stamp_e7: int,
              floor_cents: int, is_sell: bool) -> int:
    """Exact per-trade cost in cents; single half-up rounding of the total."""
    if notional_micros <= 0:
        raise LedgerError("notional must be positive")
    if notional_micros > MAX_NOTIONAL_MICROS:
        raise LedgerError("notional too large for exact arithmetic")
    base = max(notional_micros * combined_e7, floor_cents * CENT_MICROS * RATE_SCALE)
    if is_sell:
        base += notional_micros * stamp_e7
    # base is in micros * RATE_SCALE; one cent is CENT_MICROS * RATE_SCALE.
    return round_half_up(base, CENT_MICROS * RATE_SCALE)


def transaction_cost(
    price_micros: int,
    volume: int,
    schedule: FeeSchedule,
    investor_class: InvestorClass | None = None,
) -> int:
    """Cost in micros for one entry at a single price (sell when volume > 0)."""
    notional = price_micros * abs(volume)
    return fee_cents(notional, schedule.combined_e7(investor_class),
                     schedule.stamp_e7, schedule.floor_cents, volume > 0) * CENT_MICROS


def entry_cost_micros(entry: Entry, schedule: FeeSchedule,
                      investor_class: InvestorClass | None = None) -> int:
    return fee_cents(entry.notional_micros, schedule.combined_e7(investor_class),
                     schedule.stamp_e7, schedule.floor_cents, entry.is_sell) * CENT_MICROS


def aggregate_fills_to_entry(
    fills: Sequence[tuple[int, int, Timestamp]],
    side: Side,
    order_size: int | None = None,
    seq: int = 0,
) -> Optional[Entry]:
    """Collapse the executions of one original order into one entry.

    `fills` are (size, price_micros, time) triples.  The entry's volume is
    the executed size (partially executed orders aggregate executed volume
    only), its notional the exact sum of fill values, its time the last
    fill's time.  Returns None for an empty fill set.
    """
    if not fills:
        return None
    executed = sum(size for size, _, _ in fills)
    if any(size <= 0 for size, _, _ in fills):
        raise LedgerError("fill sizes must be positive")
    if order_size is not None and executed > order_size:
        raise LedgerError("executed size exceeds order size")
    notional = sum(size * price for size, price, _ in fills)
    ts = fills[-1][2]
    volume = executed if side is Side.SELL else -executed
    return Entry(volume=volume, notional_micros=notional, ts=ts, seq=seq)


def build_activity_sequence(
    investor_id: str,
    stock_id: str,
    entries: Sequence[Entry],
    period_end_price_micros: int | None,
    period_end_ts: Timestamp | None,
    *,
    diag: DiagnosticLog | None = None,
) -> ActivitySequence:
    """Sanitize raw entries so volumes sum to zero.

    Sells beyond current holdings are truncated to the held amount (dropped
    entirely at zero holdings); remaining end-of-period holdings close out
    through one virtual sale at the period-end price.  The result satisfies
    a non-negative share position at every prefix.
    """
    last_key: tuple[int, int] | None = None
    for e in entries:
        key = (e.ts.epoch_centis, e.seq)
        if last_key is not None and key < last_key:
            raise LedgerError("entries must be time-ordered")
        last_key = key

    out: list[Entry] = []
    position = 0
    for e in entries:
        if e.volume < 0:
            position += -e.volume
            out.append(e)
            continue
        if position == 0:
            if diag is not None:
                diag.info("uncovered-sell", f"{investor_id}/{stock_id}: sell without holdings dropped")
            continue
        if e.volume > position:
            # Truncate to holdings; scale the notional (half-up at 1 micro).
            notional = round_half_up(e.notional_micros * position, e.volume)
            if diag is not None:
                diag.info("truncated-sell",
                          f"{investor_id}/{stock_id}: sell {e.volume} truncated to {position}")
            out.append(Entry(position, notional, e.ts, e.seq, e.virtual))
            position = 0
        else:
            position -= e.volume
            out.append(e)
    if position > 0:
        if period_end_price_micros is None or period_end_ts is None:
            raise LedgerError(f"cannot close out {investor_id}/{stock_id}: no period-end price")
        out.append(Entry(
            volume=position,
            notional_micros=position * period_end_price_micros,
            ts=period_end_ts,
            seq=10**9,
            virtual=True,
        ))
    return ActivitySequence(investor_id, stock_id, tuple(out))


@dataclass(frozen=True)
class StockEarnings:
    """Money totals for one (investor, stock), all in exact micros."""

    buy_capital_micros: int       # B
    sell_proceeds_micros: int     # S
    buy_cost_micros: int          # C^b
    sell_cost_micros: int         # C^s
    dividends_micros: int         # D

    @property
    def total_cost_micros(self) -> int:
        return self.buy_cost_micros + self.sell_cost_micros

    @property
    def earnings_micros(self) -> int:
        return (self.sell_proceeds_micros - self.buy_capital_micros
                - self.total_cost_micros + self.dividends_micros)


def dividend_accrual_micros(cash_micros: int, holdings: int) -> int:
    """One ex-date accrual, rounded to the cent (sign-aware half-up)."""
    return round_half_up(cash_micros * holdings, CENT_MICROS) * CENT_MICROS


def stock_earnings(
    seq: ActivitySequence,
    schedule: FeeSchedule,
    dividends: Sequence[tuple[Date, int]] = (),
    investor_class: InvestorClass | None = None,
    *,
    virtual_costs: bool = True,
) -> StockEarnings:
    """Totals for one sanitized sequence.

    `dividends` holds (ex_date, cash_per_share_micros) for this stock.
    Holdings for an accrual are the cumulative position at the ex-date's
    market open, i.e. over entries dated strictly before it.
    """
    buy_capital = sell_proceeds = buy_cost = sell_cost = 0
    for e in seq.entries:
        if e.is_sell:
            sell_proceeds += e.notional_micros
            if virtual_costs or not e.virtual:
                sell_cost += entry_cost_micros(e, schedule, investor_class)
        else:
            buy_capital += e.notional_micros
            buy_cost += entry_cost_micros(e, schedule, investor_class)
    dividend_total = 0
    for ex_date, cash_micros in dividends:
        holdings = -sum(e.volume for e in seq.entries if e.ts.day < ex_date)
        if holdings:
            dividend_total += dividend_accrual_micros(cash_micros, holdings)
    return StockEarnings(buy_capital, sell_proceeds, buy_cost, sell_cost, dividend_total)


def portfolio_return(earnings: Iterable[StockEarnings]) -> float:
    """Dimensionless net return over the invested capital plus buy costs."""
    earnings = list(earnings)
    total_e = sum(e.earnings_micros for e in earnings)
    denom = sum(e.buy_capital_micros + e.buy_cost_micros for e in earnings)
    if denom <= 0:
        raise LedgerError("investor never bought: return undefined")
    return total_e / denom


def trading_frequency(sequences: Iterable[ActivitySequence], *, count_virtual: bool = True) -> int:
    return sum(s.n_transactions(count_virtual) for s in sequences)


def fifo_match_pairs(volumes: Sequence[int]) -> list[tuple[int, int, int]]:
    """FIFO share matching on signed volumes (positive = sell).

    Returns (buy_entry_index, sell_entry_index, shares) lots: each sold
    share consumes the earliest not-yet-matched bought share.  Requires the
    volumes to sum to zero with no prefix going short (sanitized input).
    """
    open_buys: list[list[int]] = []  # [entry_index, remaining]
    head = 0
    pairs: list[tuple[int, int, int]] = []
    for j, v in enumerate(volumes):
        if v == 0:
            raise LedgerError("zero volume entry")
        if v < 0:
            open_buys.append([j, -v])
            continue
        remaining = v
        while remaining > 0:
            if head >= len(open_buys):
                raise LedgerError("sell without matching buy: sequence not sanitized")
            lot = open_buys[head]
            step = min(lot[1], remaining)
            pairs.append((lot[0], j, step))
            lot[1] -= step
            remaining -= step
            if lot[1] == 0:
                head += 1
    if head != len(open_buys) or any(lot[1] for lot in open_buys[head:]):
        raise LedgerError("unmatched buys remain: volumes do not sum to zero")
    return pairs


@dataclass(frozen=True)
class HoldingTime:
    """FIFO round-trip durations plus the share-weighted mean.

    The numerator/denominator pair is exact; `mean_days` divides them once,
    so lot-based and per-share computations agree bit for bit.
    """

    lots: tuple[tuple[int, int, int], ...]       # (buy index, sell index, shares)
    weighted_centis: int                          # sum of shares * duration
    matched_shares: int

    @property
    def mean_days(self) -> float:
        if self.matched_shares == 0:
            return 0.0
        return self.weighted_centis / (self.matched_shares * HOLDING_DAY_CENTIS)

    def durations_days(self, entries: Sequence[Entry]) -> list[tuple[int, float]]:
        return [
            (shares, (entries[s].ts.epoch_centis - entries[b].ts.epoch_centis) / HOLDING_DAY_CENTIS)
            for b, s, shares in self.lots
        ]


def holding_time_fifo(seq: ActivitySequence) -> HoldingTime:
    """Share-weighted FIFO holding time of a sanitized sequence, in days."""
    pairs = fifo_match_pairs([e.volume for e in seq.entries])
    weighted = 0
    shares = 0
    for b, s, n in pairs:
        weighted += n * (seq.entries[s].ts.epoch_centis - seq.entries[b].ts.epoch_centis)
        shares += n
    return HoldingTime(tuple(pairs), weighted, shares)


@dataclass(frozen=True)
class InvestorPerformance:
    investor_id: str
    investor_class: InvestorClass
    market: Market
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


def investor_performance(
    investor_id: str,
    investor_class: InvestorClass,
    market: Market,
    per_stock: Sequence[tuple[ActivitySequence, StockEarnings, HoldingTime]],
    *,
    count_virtual: bool = True,
) -> Optional[InvestorPerformance]:
    """Combine one investor's per-stock accounting within one market.

    Returns None (caller records a diagnostic) when the investor never
    bought anything, which leaves the return undefined.
    """
    active = [(s, e, h) for s, e, h in per_stock if s.entries]
    if not active:
        return None
    denom = sum(e.buy_capital_micros + e.buy_cost_micros for _, e, _ in active)
    if denom <= 0:
        return None
    total_e = sum(e.earnings_micros for _, e, _ in active)
    j = sum(s.n_transactions(count_virtual) for s, _, _ in active)
    weighted = sum(h.weighted_centis for _, _, h in active)
    shares = sum(h.matched_shares for _, _, h in active)
    dt = weighted / (shares * HOLDING_DAY_CENTIS) if shares else 0.0
    return InvestorPerformance(investor_id, investor_class, market, total_e / denom, j, dt)


PERFORMANCE_HEADER = ("investor", "class", "market", "R", "J", "dt_days", "label")


def serialize_performances(performances: Iterable[InvestorPerformance], sink) -> None:
    import csv

    writer = csv.writer(sink, lineterminator="\n")
    writer.writerow(PERFORMANCE_HEADER)
    for p in performances:
        writer.writerow([
            p.investor_id, p.investor_class.value, p.market.value,
            format(p.r, ".12g"), p.j, format(p.dt_days, ".12g"), p.label,
        ])


def sequences_from_fills(
    fills: Sequence[Fill],
    period_end_price_micros: dict[str, int],
    period_end_ts: Timestamp,
    *,
    diag: DiagnosticLog | None = None,
) -> dict[tuple[str, str], ActivitySequence]:
    """Build sanitized activity sequences for every (trader, stock) in a
    fill stream.  Fills touch two original orders each; fills of one order
    aggregate into a single entry."""
    # (stock, day, order_id) -> [trader, side, [(size, price, ts)], last_seq]
    per_order: dict[tuple[str, Date, str], list] = {}
    for seq_no, f in enumerate(fills):
        day = f.ts.day
        for order_id, trader, side in (
            (f.maker_order_id, f.maker_trader, f.maker_side),
            (f.taker_order_id, f.taker_trader, f.maker_side.opposite()),
        ):
            key = (f.stock_id, day, order_id)
            rec = per_order.get(key)
            if rec is None:
                per_order[key] = [trader, side, [(f.size, f.price_micros, f.ts)], seq_no]
            else:
                rec[2].append((f.size, f.price_micros, f.ts))
                rec[3] = seq_no

    raw: dict[tuple[str, str], list[Entry]] = {}
    for (stock, _day, _oid), (trader, side, parts, last_seq) in per_order.items():
        entry = aggregate_fills_to_entry(parts, side, seq=last_seq)
        if entry is not None:
            raw.setdefault((trader, stock), []).append(entry)

    out: dict[tuple[str, str], ActivitySequence] = {}
    for (trader, stock) in sorted(raw):
        entries = sorted(raw[(trader, stock)], key=lambda e: (e.ts.epoch_centis, e.seq))
        seq = build_activity_sequence(
            trader, stock, entries,
            period_end_price_micros.get(stock), period_end_ts, diag=diag,
        )
        if seq.entries:
            out[(trader, stock)] = seq
    return out
