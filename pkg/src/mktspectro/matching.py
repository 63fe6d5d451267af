"""Execution reconstruction: price-time-priority book plus opening call auction.

Books live for one trading day; unexecuted orders expire at the close.
The same engine replays both recorded and generated order flow.
"""
from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from datetime import date as Date
from typing import Iterable, Optional, Sequence

from .diagnostics import DiagnosticLog
from .orderflow import (
    OrderEvent,
    OrderKind,
    Phase,
    Side,
    StockMeta,
    Timestamp,
    TradingCalendar,
    session_phase,
)


@dataclass(frozen=True)
class Fill:
    """One execution pairing a resting (maker) and an incoming (taker) order."""

    stock_id: str
    price_micros: int
    size: int
    ts: Timestamp
    maker_order_id: str
    taker_order_id: str
    maker_trader: str
    taker_trader: str
    maker_side: Side
    seq: int

    @property
    def buyer(self) -> str:
        return self.maker_trader if self.maker_side is Side.BUY else self.taker_trader

    @property
    def seller(self) -> str:
        return self.maker_trader if self.maker_side is Side.SELL else self.taker_trader

    @property
    def buy_order_id(self) -> str:
        return self.maker_order_id if self.maker_side is Side.BUY else self.taker_order_id

    @property
    def sell_order_id(self) -> str:
        return self.maker_order_id if self.maker_side is Side.SELL else self.taker_order_id

    @property
    def self_trade(self) -> bool:
        return self.maker_trader == self.taker_trader


@dataclass
class RestingOrder:
    order_id: str
    trader_id: str
    side: Side
    price_micros: int
    remaining: int
    seq: int
    ts: Timestamp


class OrderBook:
    """Single-stock limit order book with strict price-time priority."""

    def __init__(self, stock_id: str):
        self.stock_id = stock_id
        self.bids: list[RestingOrder] = []   # sorted by (-price, seq)
        self.asks: list[RestingOrder] = []   # sorted by (price, seq)
        self.by_id: dict[str, RestingOrder] = {}
        self.last_price_micros: Optional[int] = None
        self._arrivals = 0
        self.fill_count = 0

    def next_arrival(self) -> int:
        self._arrivals += 1
        return self._arrivals

    def next_fill_seq(self) -> int:
        n = self.fill_count
        self.fill_count += 1
        return n

    def best_bid(self) -> Optional[int]:
        return self.bids[0].price_micros if self.bids else None

    def best_ask(self) -> Optional[int]:
        return self.asks[0].price_micros if self.asks else None

    def crossed(self) -> bool:
        return bool(self.bids and self.asks and self.bids[0].price_micros >= self.asks[0].price_micros)

    def rest(self, order: RestingOrder) -> None:
        if order.side is Side.BUY:
            bisect.insort(self.bids, order, key=lambda o: (-o.price_micros, o.seq))
        else:
            bisect.insort(self.asks, order, key=lambda o: (o.price_micros, o.seq))
        self.by_id[order.order_id] = order

    def remove(self, order: RestingOrder) -> None:
        side = self.bids if order.side is Side.BUY else self.asks
        side.remove(order)
        del self.by_id[order.order_id]


def submit_to_book(
    book: OrderBook,
    ev: OrderEvent,
    *,
    diag: DiagnosticLog | None = None,
    fill_ts: Timestamp | None = None,
) -> list[Fill]:
    """Continuous-phase handling of one limit, market, or cancel event.

    Marketable volume executes at resting prices in price-time priority,
    residual limit volume rests, and residual market volume is cancelled.
    Cancels remove the remaining size of their target (no-op with a
    diagnostic when the target is unknown or already filled).
    """
    diag = diag if diag is not None else DiagnosticLog()
    ts = fill_ts or ev.timestamp

    if ev.order_kind is OrderKind.CANCEL:
        target = book.by_id.get(ev.cancel_target or "")
        if target is None:
            diag.info("cancel-miss", f"cancel of unknown or filled order {ev.cancel_target!r}")
            return []
        book.remove(target)
        return []

    side = ev.side
    assert side is not None and ev.size is not None
    arrival = book.next_arrival()
    opposite = book.asks if side is Side.BUY else book.bids
    remaining = ev.size
    fills: list[Fill] = []

    def marketable(top: RestingOrder) -> bool:
        if ev.order_kind is OrderKind.MARKET:
            return True
        assert ev.price_micros is not None
        if side is Side.BUY:
            return top.price_micros <= ev.price_micros
        return top.price_micros >= ev.price_micros

    if ev.order_kind is OrderKind.MARKET and not opposite:
        diag.info("market-rejected", f"market order {ev.order_id!r} against empty book")
        return []

    while remaining > 0 and opposite and marketable(opposite[0]):
        top = opposite[0]
        step = min(remaining, top.remaining)
        fills.append(Fill(
            stock_id=book.stock_id, price_micros=top.price_micros, size=step, ts=ts,
            maker_order_id=top.order_id, taker_order_id=ev.order_id,
            maker_trader=top.trader_id, taker_trader=ev.trader_id,
            maker_side=top.side, seq=book.next_fill_seq(),
        ))
        book.last_price_micros = top.price_micros
        remaining -= step
        top.remaining -= step
        if top.remaining == 0:
            book.remove(top)

    if remaining > 0:
        if ev.order_kind is OrderKind.LIMIT:
            book.rest(RestingOrder(ev.order_id, ev.trader_id, side, ev.price_micros, remaining, arrival, ts))
        elif fills:
            diag.info("market-residue", f"market order {ev.order_id!r} residue {remaining} cancelled")
    return fills


@dataclass
class CallOrder:
    """An order collected, unexecuted, during the opening call phase."""

    order_id: str
    trader_id: str
    side: Side
    kind: OrderKind
    price_micros: Optional[int]
    size: int
    seq: int
    ts: Timestamp
    remaining: int = field(init=False)

    def __post_init__(self) -> None:
        self.remaining = self.size


def auction_volume_at(orders: Sequence[CallOrder], price: int) -> tuple[int, int]:
    """(executable volume, order imbalance) at a candidate price.

    Market orders participate on both curves as maximally aggressive.
    """
    demand = sum(o.remaining for o in orders if o.side is Side.BUY
                 and (o.kind is OrderKind.MARKET or o.price_micros >= price))
    supply = sum(o.remaining for o in orders if o.side is Side.SELL
                 and (o.kind is OrderKind.MARKET or o.price_micros <= price))
    return min(demand, supply), abs(demand - supply)


def auction_clearing_price(orders: Sequence[CallOrder], prev_close_micros: int) -> tuple[Optional[int], int]:
    """Clearing price maximizing executable volume, with tie-break chain
    max volume -> min imbalance -> nearest previous close -> lower price.

    Candidate prices are the submitted limit prices.  Returns
    (price, volume); (None, 0) when nothing can cross.
    """
    candidates = sorted({o.price_micros for o in orders if o.kind is OrderKind.LIMIT})
    best_key: tuple[int, int, int, int] | None = None
    best_price: Optional[int] = None
    for p in candidates:
        volume, imbalance = auction_volume_at(orders, p)
        key = (-volume, imbalance, abs(p - prev_close_micros), p)
        if best_key is None or key < best_key:
            best_key = key
            best_price = p
    if best_key is None or -best_key[0] == 0:
        return None, 0
    return best_price, -best_key[0]


def clear_call_auction(
    orders: Sequence[CallOrder],
    prev_close_micros: int,
    *,
    stock_id: str,
    ts: Timestamp,
    fill_seq_start: int = 0,
) -> tuple[Optional[int], list[Fill]]:
    """Single-price opening auction over the collected call-phase orders.

    Executable orders fill at the clearing price in price-time priority
    (market orders rank most aggressive; the earlier arrival of a matched
    pair is recorded as maker).  Residual size stays on the orders for the
    caller to carry into the continuous book.
    """
    live = [o for o in orders if o.remaining > 0]
    price, volume = auction_clearing_price(live, prev_close_micros)
    if price is None or volume == 0:
        return None, []

    def buy_key(o: CallOrder):
        return (0, 0, o.seq) if o.kind is OrderKind.MARKET else (1, -o.price_micros, o.seq)

    def sell_key(o: CallOrder):
        return (0, 0, o.seq) if o.kind is OrderKind.MARKET else (1, o.price_micros, o.seq)

    buys = sorted(
        (o for o in live if o.side is Side.BUY
         and (o.kind is OrderKind.MARKET or o.price_micros >= price)),
        key=buy_key,
    )
    sells = sorted(
        (o for o in live if o.side is Side.SELL
         and (o.kind is OrderKind.MARKET or o.price_micros <= price)),
        key=sell_key,
    )

    fills: list[Fill] = []
    seq = fill_seq_start
    remaining = volume
    bi = si = 0
    while remaining > 0:
        b, s = buys[bi], sells[si]
        step = min(b.remaining, s.remaining, remaining)
        maker, taker = (b, s) if b.seq < s.seq else (s, b)
        fills.append(Fill(
            stock_id=stock_id, price_micros=price, size=step, ts=ts,
            maker_order_id=maker.order_id, taker_order_id=taker.order_id,
            maker_trader=maker.trader_id, taker_trader=taker.trader_id,
            maker_side=maker.side, seq=seq,
        ))
        seq += 1
        b.remaining -= step
        s.remaining -= step
        remaining -= step
        if b.remaining == 0:
            bi += 1
        if s.remaining == 0:
            si += 1
    return price, fills


class DayReplayer:
    """Replays one stock's events for one trading day.

    Call-phase orders accumulate and clear at the auction; cooling-phase
    orders queue to the continuous open; auction leftovers re-enter the
    book first, in original arrival order.
    """

    def __init__(self, stock_id: str, day: Date, cal: TradingCalendar,
                 prev_close_micros: int, diag: DiagnosticLog):
        self.stock_id = stock_id
        self.day = day
        self.session = cal.session(day)
        self.cal = cal
        self.prev_close = prev_close_micros
        self.diag = diag
        self.book = OrderBook(stock_id)
        self.fills: list[Fill] = []
        self.call_orders: list[CallOrder] = []
        self.call_by_id: dict[str, CallOrder] = {}
        self.cooling_queue: list[OrderEvent] = []
        self.auction_done = False
        self.auction_price: Optional[int] = None

    def feed(self, ev: OrderEvent) -> None:
        if ev.stock_id != self.stock_id or ev.timestamp.day != self.day:
            raise ValueError("event routed to wrong day replayer")
        phase = session_phase(ev.timestamp, self.cal)
        if phase is Phase.CLOSED:
            self.diag.info("closed-phase", f"event {ev.order_id!r} outside trading phases dropped")
            return
        if phase is Phase.CALL:
            self._feed_call(ev)
            return
        if phase is Phase.COOLING:
            self.cooling_queue.append(ev)
            return
        if not self.auction_done:
            self._open_continuous()
        self.fills.extend(submit_to_book(self.book, ev, diag=self.diag))

    def _feed_call(self, ev: OrderEvent) -> None:
        if ev.order_kind is OrderKind.CANCEL:
            target = self.call_by_id.pop(ev.cancel_target or "", None)
            if target is None:
                self.diag.info("cancel-miss", f"cancel of unknown call order {ev.cancel_target!r}")
            else:
                target.remaining = 0
            return
        order = CallOrder(
            order_id=ev.order_id, trader_id=ev.trader_id, side=ev.side,
            kind=ev.order_kind, price_micros=ev.price_micros, size=ev.size,
            seq=self.book.next_arrival(), ts=ev.timestamp,
        )
        self.call_orders.append(order)
        self.call_by_id[ev.order_id] = order

    def _open_continuous(self) -> None:
        auction_ts = Timestamp(self.day, self.session.call_close)
        price, fills = clear_call_auction(
            self.call_orders, self.prev_close,
            stock_id=self.stock_id, ts=auction_ts, fill_seq_start=self.book.fill_count,
        )
        self.book.fill_count += len(fills)
        self.auction_price = price
        if fills:
            self.book.last_price_micros = price
        self.fills.extend(fills)
        open_ts = Timestamp(self.day, self.session.morning_open)
        for order in self.call_orders:
            if order.remaining <= 0:
                continue
            if order.kind is OrderKind.MARKET:
                self.diag.info("auction-market-residue",
                               f"unexecuted call-phase market order {order.order_id!r} dropped")
                continue
            self.book.rest(RestingOrder(
                order.order_id, order.trader_id, order.side,
                order.price_micros, order.remaining, order.seq, open_ts,
            ))
        # A maximum-volume clearing cannot leave the carried-over book
        # crossed, but uncross defensively at maker price if it ever is.
        self._uncross(open_ts)
        for ev in self.cooling_queue:
            self.fills.extend(submit_to_book(self.book, ev, diag=self.diag, fill_ts=open_ts))
        self.cooling_queue.clear()
        self.auction_done = True

    def _uncross(self, ts: Timestamp) -> None:
        while self.book.crossed():
            bid, ask = self.book.bids[0], self.book.asks[0]
            maker, taker = (bid, ask) if bid.seq < ask.seq else (ask, bid)
            step = min(bid.remaining, ask.remaining)
            self.fills.append(Fill(
                stock_id=self.stock_id, price_micros=maker.price_micros, size=step, ts=ts,
                maker_order_id=maker.order_id, taker_order_id=taker.order_id,
                maker_trader=maker.trader_id, taker_trader=taker.trader_id,
                maker_side=maker.side, seq=self.book.next_fill_seq(),
            ))
            self.book.last_price_micros = maker.price_micros
            for o in (bid, ask):
                o.remaining -= step
                if o.remaining == 0:
                    self.book.remove(o)

    def finish(self) -> list[Fill]:
        """End of day: run the auction if it never opened, expire the book."""
        if not self.auction_done:
            self._open_continuous()
        return self.fills


def replay_day(
    events: Sequence[OrderEvent],
    cal: TradingCalendar,
    meta: StockMeta,
    *,
    diag: DiagnosticLog | None = None,
    prev_close_micros: int | None = None,
) -> list[Fill]:
    """Replay one stock-day of time-sorted events into fills."""
    diag = diag if diag is not None else DiagnosticLog()
    if not events:
        return []
    day = events[0].timestamp.day
    replayer = DayReplayer(
        meta.stock_id, day, cal,
        prev_close_micros if prev_close_micros is not None else meta.prev_close_micros,
        diag,
    )
    last = None
    for ev in events:
        if last is not None and ev.timestamp < last:
            raise ValueError("events must be sorted by timestamp")
        last = ev.timestamp
        replayer.feed(ev)
    return replayer.finish()


@dataclass
class ReplayResult:
    fills: list[Fill]
    daily_close_micros: dict[str, list[Optional[int]]]  # per stock, aligned to cal.days
    period_end_price_micros: dict[str, int]
    diagnostics: DiagnosticLog


def replay_period(
    events: Sequence[OrderEvent],
    cal: TradingCalendar,
    metas: dict[str, StockMeta],
) -> ReplayResult:
    """Replay a whole period: per-stock books, daily previous-close chaining.

    Stocks replay independently; fills merge deterministically by
    (timestamp, stock, within-day sequence).
    """
    diag = DiagnosticLog()
    for ev in events:
        if ev.stock_id not in metas:
            raise ValueError(f"stock {ev.stock_id!r} has no meta entry")

    by_stock_day: dict[tuple[str, Date], list[OrderEvent]] = {}
    for ev in events:
        if ev.timestamp.day not in cal:
            diag.error("non-trading-day", f"event {ev.order_id!r} dated off-calendar {ev.timestamp.day}")
            continue
        by_stock_day.setdefault((ev.stock_id, ev.timestamp.day), []).append(ev)

    all_fills: list[Fill] = []
    daily_close: dict[str, list[Optional[int]]] = {}
    period_end_price: dict[str, int] = {}
    for stock in sorted(metas):
        meta = metas[stock]
        prev_close = meta.prev_close_micros
        closes: list[Optional[int]] = []
        for day in cal.days:
            day_events = by_stock_day.get((stock, day), [])
            last_price: Optional[int] = None
            if day_events:
                fills = replay_day(day_events, cal, meta, diag=diag, prev_close_micros=prev_close)
                all_fills.extend(fills)
                if fills:
                    last_price = fills[-1].price_micros
            closes.append(last_price)
            if last_price is not None:
                prev_close = last_price
        daily_close[stock] = closes
        period_end_price[stock] = (
            meta.period_end_price_micros if meta.period_end_price_micros is not None else prev_close
        )
    all_fills.sort(key=lambda f: (f.ts.epoch_centis, f.stock_id, f.seq))
    return ReplayResult(all_fills, daily_close, period_end_price, diag)


FILL_FILE_HEADER = ("stock", "price", "size", "time", "buyer", "seller", "maker_side")


def serialize_fills(fills: Iterable[Fill], sink) -> None:
    """Audit CSV of the fill stream."""
    import csv

    from .money import format_micros

    writer = csv.writer(sink, lineterminator="\n")
    writer.writerow(FILL_FILE_HEADER)
    for f in fills:
        writer.writerow([
            f.stock_id, format_micros(f.price_micros), f.size, str(f.ts),
            f.buyer, f.seller, f.maker_side.value,
        ])
