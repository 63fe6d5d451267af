"""Canonical order-flow data model, file parsing, and session phases.

Timestamps are integer centiseconds since midnight plus a calendar date;
prices are integer micros (see money.py).  Both choices keep every later
accounting step exact.
"""
from __future__ import annotations

import csv
import io
import re
from dataclasses import dataclass, field, replace
from datetime import date as Date, timedelta
from enum import Enum
from pathlib import Path
from typing import IO, Iterable, Iterator, Optional, Sequence

from .diagnostics import DiagnosticLog
from .money import MAX_NOTIONAL_MICROS, MICROS, parse_amount_micros

CENTIS_PER_DAY = 8_640_000
DEFAULT_TICK_MICROS = 10_000  # 0.01 currency units


class InvestorClass(str, Enum):
    INDIVIDUAL = "individual"
    INSTITUTION = "institution"


class Side(str, Enum):
    BUY = "buy"
    SELL = "sell"

    def opposite(self) -> "Side":
        return Side.SELL if self is Side.BUY else Side.BUY


class OrderKind(str, Enum):
    LIMIT = "limit"
    MARKET = "market"
    CANCEL = "cancel"


class Market(str, Enum):
    A = "A"
    B = "B"


class Phase(str, Enum):
    CALL = "call"
    COOLING = "cooling"
    CONTINUOUS = "continuous"
    CLOSED = "closed"


class OrderFlowError(ValueError):
    pass


class UnsortedInputError(OrderFlowError):
    pass


class NonTradingDayError(OrderFlowError):
    pass


_TIME_RE = re.compile(r"^(\d{2}):(\d{2}):(\d{2})(?:\.(\d+))?$")


def _parse_centis(text: str) -> int:
    m = _TIME_RE.match(text)
    if not m:
        raise ValueError(f"bad time of day: {text!r}")
    hh, mm, ss, frac = m.group(1), m.group(2), m.group(3), m.group(4)
    h, mi, s = int(hh), int(mm), int(ss)
    if h > 23 or mi > 59 or s > 59:
        raise ValueError(f"time of day out of range: {text!r}")
    if frac is not None and len(frac) > 2:
        raise ValueError("resolution finer than 0.01 s")
    cs = 0 if frac is None else int(frac.ljust(2, "0"))
    return ((h * 60 + mi) * 60 + s) * 100 + cs


def _format_centis(centis: int) -> str:
    cs, rem = centis % 100, centis // 100
    s, rem = rem % 60, rem // 60
    mi, h = rem % 60, rem // 60
    return f"{h:02d}:{mi:02d}:{s:02d}.{cs:02d}"


@dataclass(frozen=True, order=True)
class Timestamp:
    """A calendar date plus a centisecond-of-day offset."""

    day: Date
    centis: int

    def __post_init__(self) -> None:
        if not 0 <= self.centis < CENTIS_PER_DAY:
            raise ValueError(f"centis out of range: {self.centis}")

    @property
    def epoch_centis(self) -> int:
        return self.day.toordinal() * CENTIS_PER_DAY + self.centis

    @classmethod
    def parse(cls, text: str, default_date: Date | None = None) -> "Timestamp":
        """Parse 'YYYY-MM-DD HH:MM:SS.cc'; bare times need default_date."""
        text = text.strip()
        if " " in text:
            day_part, time_part = text.split(" ", 1)
            day = Date.fromisoformat(day_part)
        elif default_date is not None:
            day, time_part = default_date, text
        else:
            raise ValueError(f"timestamp missing date: {text!r}")
        return cls(day, _parse_centis(time_part))

    def __str__(self) -> str:
        return f"{self.day.isoformat()} {_format_centis(self.centis)}"


def centis_of(hhmm: str) -> int:
    """Centiseconds since midnight for 'HH:MM', 'HH:MM:SS', or 'HH:MM:SS.cc'."""
    if len(hhmm) == 5:
        hhmm = hhmm + ":00"
    return _parse_centis(hhmm)


@dataclass(frozen=True)
class SessionTimes:
    """Intraday phase boundaries, as centiseconds since midnight."""

    call_open: int = centis_of("09:15")
    call_close: int = centis_of("09:25")
    cooling_open: int = centis_of("09:25")
    cooling_close: int = centis_of("09:30")
    morning_open: int = centis_of("09:30")
    morning_close: int = centis_of("11:30")
    afternoon_open: int = centis_of("13:00")
    afternoon_close: int = centis_of("15:00")

    def __post_init__(self) -> None:
        seq = (
            self.call_open, self.call_close, self.cooling_open, self.cooling_close,
            self.morning_open, self.morning_close, self.afternoon_open, self.afternoon_close,
        )
        if self.call_open >= self.call_close or self.cooling_open >= self.cooling_close:
            raise ValueError("empty call or cooling phase")
        if self.morning_open >= self.morning_close or self.afternoon_open >= self.afternoon_close:
            raise ValueError("empty continuous session")
        for a, b in zip(seq, seq[1:]):
            if a > b:
                raise ValueError("session phases out of order")

    def phase_of(self, centis: int) -> Phase:
        # Boundary instants belong to the later phase: half-open [open, close).
        if self.call_open <= centis < self.call_close:
            return Phase.CALL
        if self.cooling_open <= centis < self.cooling_close:
            return Phase.COOLING
        if self.morning_open <= centis < self.morning_close:
            return Phase.CONTINUOUS
        if self.afternoon_open <= centis < self.afternoon_close:
            return Phase.CONTINUOUS
        return Phase.CLOSED

    def submission_windows(self) -> tuple[tuple[int, int], ...]:
        """Half-open windows in which order submission is accepted."""
        return (
            (self.call_open, self.call_close),
            (self.cooling_open, self.cooling_close),
            (self.morning_open, self.morning_close),
            (self.afternoon_open, self.afternoon_close),
        )


@dataclass(frozen=True)
class TradingCalendar:
    days: tuple[Date, ...]
    sessions: dict[Date, SessionTimes]

    def __post_init__(self) -> None:
        if list(self.days) != sorted(set(self.days)):
            raise ValueError("calendar days must be strictly increasing")

    @classmethod
    def make(cls, days: Iterable[Date], overrides: dict[Date, SessionTimes] | None = None) -> "TradingCalendar":
        days = tuple(sorted(set(days)))
        default = SessionTimes()
        sessions = {d: (overrides or {}).get(d, default) for d in days}
        return cls(days, sessions)

    @classmethod
    def weekdays(cls, start: Date, n_days: int) -> "TradingCalendar":
        """n_days consecutive weekdays starting at or after start."""
        out: list[Date] = []
        d = start
        while len(out) < n_days:
            if d.weekday() < 5:
                out.append(d)
            d += timedelta(days=1)
        return cls.make(out)

    def __contains__(self, day: Date) -> bool:
        return day in self.sessions

    def session(self, day: Date) -> SessionTimes:
        try:
            return self.sessions[day]
        except KeyError:
            raise NonTradingDayError(f"non-trading day: {day.isoformat()}") from None

    def day_index(self, day: Date) -> int:
        return self.days.index(day)

    @property
    def first_day(self) -> Date:
        return self.days[0]

    @property
    def last_day(self) -> Date:
        return self.days[-1]

    def period_end(self) -> Timestamp:
        """Instant used for virtual close-out entries."""
        last = self.last_day
        return Timestamp(last, self.sessions[last].afternoon_close)


def session_phase(t: Timestamp, cal: TradingCalendar) -> Phase:
    """Phase containing t; raises NonTradingDayError off-calendar."""
    return cal.session(t.day).phase_of(t.centis)


@dataclass(frozen=True)
class OrderEvent:
    trader_id: str
    investor_class: InvestorClass
    stock_id: str
    side: Optional[Side]
    order_kind: OrderKind
    price_micros: Optional[int]
    size: Optional[int]
    cancel_target: Optional[str]
    timestamp: Timestamp
    order_id: str

    def __post_init__(self) -> None:
        if not self.trader_id or not self.stock_id or not self.order_id:
            raise ValueError("trader_id, stock_id, order_id must be non-empty")
        kind = self.order_kind
        if kind is OrderKind.LIMIT:
            if self.side is None:
                raise ValueError("limit order needs a side")
            if self.price_micros is None or self.price_micros <= 0:
                raise ValueError("limit order needs price > 0")
            if self.size is None or self.size <= 0:
                raise ValueError("non-positive size")
        elif kind is OrderKind.MARKET:
            if self.side is None:
                raise ValueError("market order needs a side")
            if self.price_micros is not None:
                raise ValueError("market order must not carry a price")
            if self.size is None or self.size <= 0:
                raise ValueError("non-positive size")
        else:
            if self.price_micros is not None or self.size is not None:
                raise ValueError("cancel must not carry price or size")
            if not self.cancel_target:
                raise ValueError("cancel needs a target order id")
        if self.price_micros is not None and self.size is not None:
            if self.price_micros * self.size > MAX_NOTIONAL_MICROS:
                raise ValueError("order notional too large for exact arithmetic")


@dataclass(frozen=True)
class DividendEvent:
    stock_id: str
    ex_date: Date
    cash_micros: int  # cash per share, in micros

    def __post_init__(self) -> None:
        if self.cash_micros < 0:
            raise ValueError("negative dividend")


@dataclass(frozen=True)
class StockMeta:
    stock_id: str
    market: Market
    prev_close_micros: int
    period_end_price_micros: Optional[int] = None
    tick_micros: int = DEFAULT_TICK_MICROS

    def __post_init__(self) -> None:
        if self.prev_close_micros <= 0:
            raise ValueError("previous close must be positive")
        if self.period_end_price_micros is not None and self.period_end_price_micros <= 0:
            raise ValueError("period end price must be positive")
        if self.tick_micros <= 0:
            raise ValueError("tick size must be positive")


ORDER_FILE_HEADER = (
    "trader_id", "class", "stock", "side", "kind", "price",
    "size", "cancel_target", "timestamp", "order_id",
)

_CLASS_TOKENS = {
    "individual": InvestorClass.INDIVIDUAL,
    "ind": InvestorClass.INDIVIDUAL,
    "institution": InvestorClass.INSTITUTION,
    "inst": InvestorClass.INSTITUTION,
}


@dataclass
class ParseResult:
    events: list[OrderEvent]
    diagnostics: DiagnosticLog = field(default_factory=DiagnosticLog)

    @property
    def ok(self) -> bool:
        return self.diagnostics.ok


def _open_text(source) -> Iterator[str]:
    if isinstance(source, (str, Path)):
        return open(source, "r", encoding="utf-8", newline="")
    if isinstance(source, bytes):
        return io.StringIO(source.decode("utf-8"))
    if isinstance(source, io.TextIOBase):
        return source
    if hasattr(source, "read"):
        data = source.read()
        if isinstance(data, bytes):
            data = data.decode("utf-8")
        return io.StringIO(data)
    raise TypeError(f"unsupported source: {type(source)!r}")


def _resolve_schema(header: Sequence[str], schema: Sequence[str] | None) -> dict[str, int]:
    wanted = tuple(schema) if schema is not None else ORDER_FILE_HEADER
    if len(wanted) != len(ORDER_FILE_HEADER):
        raise OrderFlowError(f"schema must name {len(ORDER_FILE_HEADER)} columns")
    positions = {}
    for logical, column in zip(ORDER_FILE_HEADER, wanted):
        try:
            positions[logical] = header.index(column)
        except ValueError:
            raise OrderFlowError(f"missing column {column!r} in header") from None
    return positions


def parse_order_events(
    source,
    schema: Sequence[str] | None = None,
    *,
    resort: bool = False,
    default_date: Date | None = None,
    tick_micros: int = DEFAULT_TICK_MICROS,
    tick_overrides: dict[str, int] | None = None,
) -> ParseResult:
    """Parse an order CSV into validated OrderEvents.

    Rows that violate an invariant produce a record-level error diagnostic
    carrying the 1-based line number and are skipped; parsing continues.
    Events come back in non-decreasing timestamp order (input order breaks
    ties).  Out-of-order input raises UnsortedInputError unless resort=True.
    """
    diag = DiagnosticLog()
    events: list[OrderEvent] = []
    seen_ids: set[tuple[str, Date, str]] = set()
    stream = _open_text(source)
    close = isinstance(source, (str, Path))
    try:
        reader = csv.reader(stream)
        try:
            header = next(reader)
        except StopIteration:
            raise OrderFlowError("empty order file: missing header") from None
        cols = _resolve_schema([h.strip() for h in header], schema)
        unsorted_at: int | None = None
        last_ts: Timestamp | None = None
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            ev = _parse_order_row(row, cols, lineno, diag, default_date, tick_micros, tick_overrides)
            if ev is None:
                continue
            key = (ev.stock_id, ev.timestamp.day, ev.order_id)
            if key in seen_ids:
                diag.error("duplicate-order-id",
                           f"duplicate order_id {ev.order_id!r} for stock {ev.stock_id!r}", lineno)
                continue
            seen_ids.add(key)
            if last_ts is not None and ev.timestamp < last_ts and unsorted_at is None:
                unsorted_at = lineno
            last_ts = ev.timestamp if last_ts is None or ev.timestamp > last_ts else last_ts
            events.append(ev)
        if unsorted_at is not None:
            if not resort:
                raise UnsortedInputError(f"input not sorted by timestamp (first at line {unsorted_at})")
            events.sort(key=lambda e: e.timestamp)  # stable: file order breaks ties
    finally:
        if close:
            stream.close()
    return ParseResult(events, diag)


def _parse_order_row(row, cols, lineno, diag, default_date, tick_micros, tick_overrides):
    def cell(name: str) -> str:
        idx = cols[name]
        return row[idx].strip() if idx < len(row) else ""

    missing = [n for n in ("trader_id", "class", "stock", "kind", "timestamp", "order_id") if not cell(n)]
    if missing:
        diag.error("missing-field", f"missing field(s): {', '.join(missing)}", lineno)
        return None
    try:
        kind = OrderKind(cell("kind"))
    except ValueError:
        diag.error("bad-kind", f"unknown order kind {cell('kind')!r}", lineno)
        return None
    cls = _CLASS_TOKENS.get(cell("class").lower())
    if cls is None:
        diag.error("bad-class", f"unknown investor class {cell('class')!r}", lineno)
        return None
    side_text = cell("side")
    side: Side | None = None
    if side_text:
        try:
            side = Side(side_text)
        except ValueError:
            diag.error("bad-side", f"unknown side {side_text!r}", lineno)
            return None
    elif kind is not OrderKind.CANCEL:
        diag.error("missing-field", "missing field(s): side", lineno)
        return None
    try:
        ts = Timestamp.parse(cell("timestamp"), default_date)
    except ValueError as exc:
        diag.error("bad-timestamp", str(exc), lineno)
        return None

    price_text, size_text = cell("price"), cell("size")
    price: int | None = None
    size: int | None = None
    if kind is OrderKind.CANCEL:
        if price_text or size_text:
            diag.error("cancel-with-terms", "cancel must not carry price or size", lineno)
            return None
        if not cell("cancel_target"):
            diag.error("missing-field", "missing field(s): cancel_target", lineno)
            return None
    else:
        if size_text:
            try:
                size = int(size_text)
            except ValueError:
                diag.error("bad-size", f"non-numeric size {size_text!r}", lineno)
                return None
            if size <= 0:
                diag.error("bad-size", "non-positive size", lineno)
                return None
        else:
            diag.error("missing-field", "missing field(s): size", lineno)
            return None
        if kind is OrderKind.LIMIT:
            if not price_text:
                diag.error("missing-field", "missing field(s): price", lineno)
                return None
            try:
                price = parse_amount_micros(price_text)
            except ValueError:
                diag.error("bad-price", f"non-numeric price {price_text!r}", lineno)
                return None
            if price <= 0:
                diag.error("bad-price", "limit price must be positive", lineno)
                return None
            tick = (tick_overrides or {}).get(cell("stock"), tick_micros)
            if price % tick:
                diag.error("off-tick-price", f"price {price_text} not on tick grid", lineno)
                return None
        elif price_text:
            diag.error("bad-price", "market order must not carry a price", lineno)
            return None

    try:
        return OrderEvent(
            trader_id=cell("trader_id"), investor_class=cls, stock_id=cell("stock"),
            side=side, order_kind=kind, price_micros=price, size=size,
            cancel_target=cell("cancel_target") or None, timestamp=ts, order_id=cell("order_id"),
        )
    except ValueError as exc:
        diag.error("bad-record", str(exc), lineno)
        return None


def _format_price(price_micros: int, tick_micros: int) -> str:
    # Emit with the precision the tick grid needs (tick 0.01 -> 2 dp).
    trailing_zeros = len(str(tick_micros)) - len(str(tick_micros).rstrip("0"))
    places = max(2, 6 - trailing_zeros)
    units, frac = divmod(price_micros, MICROS)
    return f"{units}.{f'{frac:06d}'[:places]}"


def serialize_order_events(
    events: Iterable[OrderEvent],
    sink: IO[str],
    *,
    tick_micros: int = DEFAULT_TICK_MICROS,
    tick_overrides: dict[str, int] | None = None,
) -> None:
    """Write events in the canonical order-file format (round-trips exactly)."""
    writer = csv.writer(sink, lineterminator="\n")
    writer.writerow(ORDER_FILE_HEADER)
    for ev in events:
        tick = (tick_overrides or {}).get(ev.stock_id, tick_micros)
        writer.writerow([
            ev.trader_id,
            ev.investor_class.value,
            ev.stock_id,
            ev.side.value if ev.side is not None else "",
            ev.order_kind.value,
            _format_price(ev.price_micros, tick) if ev.price_micros is not None else "",
            ev.size if ev.size is not None else "",
            ev.cancel_target or "",
            str(ev.timestamp),
            ev.order_id,
        ])


def load_dividends(source, known_stocks: set[str] | None = None) -> tuple[list[DividendEvent], DiagnosticLog]:
    """Load 'stock,ex_date,cash_per_share' rows, sorted by (stock, ex_date)."""
    diag = DiagnosticLog()
    out: list[DividendEvent] = []
    seen: set[tuple[str, Date]] = set()
    stream = _open_text(source)
    close = isinstance(source, (str, Path))
    try:
        reader = csv.reader(stream)
        first = True
        for lineno, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if first and row[0].strip().lower() == "stock":
                first = False
                continue
            first = False
            if len(row) < 3:
                diag.error("bad-row", "expected stock,ex_date,cash_per_share", lineno)
                continue
            stock = row[0].strip()
            try:
                ex_date = Date.fromisoformat(row[1].strip())
            except ValueError:
                diag.error("bad-date", f"bad ex_date {row[1]!r}", lineno)
                continue
            try:
                cash = parse_amount_micros(row[2].strip())
            except ValueError:
                diag.error("bad-cash", f"bad cash_per_share {row[2]!r}", lineno)
                continue
            if cash < 0:
                diag.error("negative-dividend", "negative dividend", lineno)
                continue
            key = (stock, ex_date)
            if key in seen:
                diag.error("duplicate-dividend", f"duplicate dividend for {stock} on {ex_date}", lineno)
                continue
            seen.add(key)
            if known_stocks is not None and stock not in known_stocks:
                diag.warning("unknown-stock", f"dividend for unknown stock {stock!r}", lineno)
            out.append(DividendEvent(stock, ex_date, cash))
    finally:
        if close:
            stream.close()
    out.sort(key=lambda d: (d.stock_id, d.ex_date))
    return out, diag


CALENDAR_HEADER = (
    "date", "call_open", "call_close", "cooling_open", "cooling_close",
    "morning_open", "morning_close", "afternoon_open", "afternoon_close",
)


def load_calendar(source) -> TradingCalendar:
    """Load trading days; blank boundary cells fall back to the defaults."""
    stream = _open_text(source)
    close = isinstance(source, (str, Path))
    days: list[Date] = []
    overrides: dict[Date, SessionTimes] = {}
    default = SessionTimes()
    try:
        reader = csv.reader(stream)
        header = next(reader, None)
        if header is None:
            raise OrderFlowError("empty calendar file")
        names = [h.strip() for h in header]
        if names[0] != "date":
            raise OrderFlowError("calendar header must start with 'date'")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            day = Date.fromisoformat(row[0].strip())
            fields = {}
            for i, name in enumerate(names[1:], start=1):
                if name not in CALENDAR_HEADER:
                    raise OrderFlowError(f"unknown calendar column {name!r}")
                if i < len(row) and row[i].strip():
                    fields[name] = centis_of(row[i].strip())
            days.append(day)
            if fields:
                overrides[day] = replace(default, **fields)
    finally:
        if close:
            stream.close()
    return TradingCalendar.make(days, overrides)


def serialize_calendar(cal: TradingCalendar, sink: IO[str]) -> None:
    writer = csv.writer(sink, lineterminator="\n")
    writer.writerow(CALENDAR_HEADER)
    default = SessionTimes()
    for day in cal.days:
        st = cal.sessions[day]
        row = [day.isoformat()]
        for name in CALENDAR_HEADER[1:]:
            value = getattr(st, name)
            row.append(_format_centis(value) if value != getattr(default, name) else "")
        writer.writerow(row)


STOCK_META_HEADER = ("stock", "market", "prev_close", "period_end_price", "tick_size")


def load_stock_meta(source) -> dict[str, StockMeta]:
    stream = _open_text(source)
    close = isinstance(source, (str, Path))
    out: dict[str, StockMeta] = {}
    try:
        reader = csv.reader(stream)
        header = next(reader, None)
        if header is None:
            raise OrderFlowError("empty stock meta file")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < 3:
                raise OrderFlowError(f"stock meta line {lineno}: expected at least stock,market,prev_close")
            stock = row[0].strip()
            if stock in out:
                raise OrderFlowError(f"duplicate stock meta for {stock!r}")
            market = Market(row[1].strip())
            prev_close = parse_amount_micros(row[2].strip())
            pep = parse_amount_micros(row[3].strip()) if len(row) > 3 and row[3].strip() else None
            tick = parse_amount_micros(row[4].strip()) if len(row) > 4 and row[4].strip() else DEFAULT_TICK_MICROS
            out[stock] = StockMeta(stock, market, prev_close, pep, tick)
    finally:
        if close:
            stream.close()
    return out


def serialize_stock_meta(metas: Iterable[StockMeta], sink: IO[str]) -> None:
    from .money import format_micros

    writer = csv.writer(sink, lineterminator="\n")
    writer.writerow(STOCK_META_HEADER)
    for m in sorted(metas, key=lambda m: m.stock_id):
        writer.writerow([
            m.stock_id, m.market.value, format_micros(m.prev_close_micros),
            format_micros(m.period_end_price_micros) if m.period_end_price_micros is not None else "",
            format_micros(m.tick_micros) if m.tick_micros != DEFAULT_TICK_MICROS else "",
        ])
