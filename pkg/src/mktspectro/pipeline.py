"""End-to-end orchestration from a single INI-style configuration file.

Stages: inputs (ingest or synthesize) -> replay -> ledger -> counterfactual
-> spectro -> reports.  Every output byte is a function of (config, seed);
the run manifest records both.
"""
from __future__ import annotations

import configparser
import csv
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field
from datetime import date as Date
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .counterfactual import (
    MonteCarloResult,
    TradeTape,
    prepare_investor,
    replica_pool_arrays,
    run_monte_carlo,
    tape_from_fills,
)
from .diagnostics import DiagnosticLog
from .ledger import (
    ActivitySequence,
    FeeSchedule,
    HoldingTime,
    InvestorPerformance,
    PERFORMANCE_HEADER,
    StockEarnings,
    default_schedules,
    holding_time_fifo,
    investor_performance,
    sequences_from_fills,
    serialize_performances,
    stock_earnings,
)
from .matching import ReplayResult, replay_period, serialize_fills
from .money import format_micros, micros_to_float
from .orderflow import (
    DividendEvent,
    InvestorClass,
    Market,
    OrderEvent,
    StockMeta,
    TradingCalendar,
    load_calendar,
    load_dividends,
    load_stock_meta,
    parse_order_events,
    serialize_calendar,
    serialize_order_events,
    serialize_stock_meta,
)
from .spectro import (
    BinnedSeries,
    Classification,
    KIND_DT,
    KIND_J,
    PowerLawFit,
    bin_arrays,
    box_stats,
    check_exponent_relation,
    classify_investors,
    fit_power_law,
    one_over_n_benchmark,
    split_pools,
)
from .synth import GroundTruth, PopulationSpec, generate_orderflow, generate_population, stock_metas, reference_paths


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineConfig:
    seed: int = 42
    out: Path = Path("out")
    # exactly one of (input paths, synth spec)
    synth: Optional[PopulationSpec] = None
    orders_path: Optional[Path] = None
    calendar_path: Optional[Path] = None
    stock_meta_path: Optional[Path] = None
    dividends_path: Optional[Path] = None
    index_series_path: Optional[Path] = None
    allow_bad_rows: bool = False
    resort: bool = False
    fees: dict[Market, FeeSchedule] = field(default_factory=default_schedules)
    replicas: int = 2000
    counterfactual_seed: Optional[int] = None
    strict_position_mode: bool = False
    count_virtual_in_j: bool = True
    virtual_costs: bool = True
    min_count: int = 10
    j_ratio: float = 2.0
    j_first_edge: float = 1.0
    weighted_fits: bool = False
    consistency_k: float = 2.0
    write_fills: bool = False

    def validate(self) -> None:
        has_inputs = self.orders_path is not None
        if has_inputs == (self.synth is not None):
            raise ConfigError("exactly one of [inputs] and [synth] must be configured")
        if has_inputs:
            for name in ("orders_path", "calendar_path", "stock_meta_path"):
                p = getattr(self, name)
                if p is None:
                    raise ConfigError(f"[inputs] missing {name.removesuffix('_path')}")
                if not Path(p).exists():
                    raise ConfigError(f"input file not found: {p}")
            for name in ("dividends_path", "index_series_path"):
                p = getattr(self, name)
                if p is not None and not Path(p).exists():
                    raise ConfigError(f"input file not found: {p}")
        if self.replicas < 0:
            raise ConfigError("replicas must be >= 0")
        if self.seed < 0 or (self.counterfactual_seed or 0) < 0:
            raise ConfigError("seeds must be non-negative")
        if self.min_count < 1:
            raise ConfigError("min_count must be >= 1")
        if self.j_ratio <= 1.0 or self.j_first_edge <= 0:
            raise ConfigError("bad J binning grid")
        if self.consistency_k <= 0:
            raise ConfigError("consistency_k must be positive")

    @property
    def mc_seed(self) -> int:
        return self.counterfactual_seed if self.counterfactual_seed is not None else self.seed

    def manifest_dict(self) -> dict:
        d: dict = {
            "seed": self.seed,
            "mode": "synth" if self.synth is not None else "inputs",
            "fees": {
                m.value: {
                    "brokerage_e7": f.brokerage_e7, "exchange_e7": f.exchange_e7,
                    "supervision_e7": f.supervision_e7, "stamp_e7": f.stamp_e7,
                    "floor_cents": f.floor_cents,
                    "brokerage_by_class": {k.value: v for k, v in f.brokerage_by_class.items()},
                } for m, f in sorted(self.fees.items(), key=lambda kv: kv[0].value)
            },
            "counterfactual": {
                "replicas": self.replicas, "seed": self.mc_seed,
                "strict_position_mode": self.strict_position_mode,
            },
            "ledger": {
                "count_virtual_in_j": self.count_virtual_in_j,
                "virtual_costs": self.virtual_costs,
            },
            "binning": {
                "min_count": self.min_count, "j_ratio": self.j_ratio,
                "j_first_edge": self.j_first_edge,
            },
            "fits": {"weighted": self.weighted_fits, "consistency_k": self.consistency_k},
        }
        if self.synth is not None:
            d["synth"] = {k: (v.isoformat() if isinstance(v, Date) else v)
                          for k, v in asdict(self.synth).items()}
        else:
            d["inputs"] = {
                "orders": str(self.orders_path),
                "calendar": str(self.calendar_path),
                "stock_meta": str(self.stock_meta_path),
                "dividends": str(self.dividends_path) if self.dividends_path else None,
                "index_series": str(self.index_series_path) if self.index_series_path else None,
                "allow_bad_rows": self.allow_bad_rows,
                "resort": self.resort,
            }
        return d

    def config_hash(self) -> str:
        payload = json.dumps(self.manifest_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()


def _fee_schedule_from_section(cp: configparser.ConfigParser, section: str) -> FeeSchedule:
    get = lambda key, fallback: cp.get(section, key, fallback=fallback)
    overrides: dict[InvestorClass, str] = {}
    for cls in InvestorClass:
        v = cp.get(section, f"brokerage_{cls.value}", fallback="").strip()
        if v:
            overrides[cls] = v
    return FeeSchedule.from_rates(
        brokerage=get("brokerage", "0.0015"),
        exchange=get("exchange", "0.0001475" if section.endswith(".A") else "0.000301"),
        supervision=get("supervision", "0.00004"),
        stamp=get("stamp", "0.001"),
        floor=get("floor", "5"),
        brokerage_by_class=overrides or None,
    )


def load_config(path: str | Path) -> PipelineConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    read = cp.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")
    cfg = PipelineConfig()
    if cp.has_section("run"):
        cfg.seed = cp.getint("run", "seed", fallback=cfg.seed)
        cfg.out = Path(cp.get("run", "out", fallback=str(cfg.out)))

    has_inputs = cp.has_section("inputs")
    has_synth = cp.has_section("synth")
    if has_inputs and has_synth:
        raise ConfigError("exactly one of [inputs] and [synth] must be configured")
    base = Path(path).parent
    if has_inputs:
        def p(key: str) -> Optional[Path]:
            v = cp.get("inputs", key, fallback="").strip()
            return (base / v if not Path(v).is_absolute() else Path(v)) if v else None
        cfg.orders_path = p("orders")
        cfg.calendar_path = p("calendar")
        cfg.stock_meta_path = p("stock_meta")
        cfg.dividends_path = p("dividends")
        cfg.index_series_path = p("index_series")
        cfg.allow_bad_rows = cp.getboolean("inputs", "allow_bad_rows", fallback=False)
        cfg.resort = cp.getboolean("inputs", "resort", fallback=False)
    if has_synth:
        s = cp["synth"]
        defaults = PopulationSpec()
        try:
            cfg.synth = PopulationSpec(
                individuals_a=s.getint("individuals_a", defaults.individuals_a),
                institutions_a=s.getint("institutions_a", defaults.institutions_a),
                individuals_b=s.getint("individuals_b", defaults.individuals_b),
                institutions_b=s.getint("institutions_b", defaults.institutions_b),
                stocks_a=s.getint("stocks_a", defaults.stocks_a),
                stocks_b=s.getint("stocks_b", defaults.stocks_b),
                days=s.getint("days", defaults.days),
                start=Date.fromisoformat(s.get("start_date", defaults.start.isoformat())),
                freq_exponent=s.getfloat("freq_exponent", defaults.freq_exponent),
                freq_min=s.getint("freq_min", defaults.freq_min),
                freq_cap=s.getint("freq_cap", defaults.freq_cap),
                size_mu=s.getfloat("size_mu", defaults.size_mu),
                size_sigma=s.getfloat("size_sigma", defaults.size_sigma),
                size_cap=s.getint("size_cap", defaults.size_cap),
                limit_prob=s.getfloat("limit_prob", defaults.limit_prob),
                price_band=s.getfloat("price_band", defaults.price_band),
                price_low=s.getfloat("price_low", defaults.price_low),
                price_high=s.getfloat("price_high", defaults.price_high),
                drift_sigma=s.getfloat("drift_sigma", defaults.drift_sigma),
            )
        except ValueError as exc:
            raise ConfigError(f"bad [synth] section: {exc}") from exc

    try:
        fees = {}
        fees[Market.A] = _fee_schedule_from_section(cp, "fees.A") if cp.has_section("fees.A") \
            else default_schedules()[Market.A]
        fees[Market.B] = _fee_schedule_from_section(cp, "fees.B") if cp.has_section("fees.B") \
            else default_schedules()[Market.B]
        cfg.fees = fees
    except ValueError as exc:
        raise ConfigError(f"bad fee schedule: {exc}") from exc

    if cp.has_section("counterfactual"):
        cfg.replicas = cp.getint("counterfactual", "replicas", fallback=cfg.replicas)
        seed_text = cp.get("counterfactual", "seed", fallback="").strip()
        cfg.counterfactual_seed = int(seed_text) if seed_text else None
        cfg.strict_position_mode = cp.getboolean(
            "counterfactual", "strict_position_mode", fallback=False)
    if cp.has_section("ledger"):
        cfg.count_virtual_in_j = cp.getboolean("ledger", "count_virtual_in_j", fallback=True)
        cfg.virtual_costs = cp.getboolean("ledger", "virtual_costs", fallback=True)
    if cp.has_section("binning"):
        cfg.min_count = cp.getint("binning", "min_count", fallback=10)
        cfg.j_ratio = cp.getfloat("binning", "j_ratio", fallback=2.0)
        cfg.j_first_edge = cp.getfloat("binning", "j_first_edge", fallback=1.0)
    if cp.has_section("fits"):
        cfg.weighted_fits = cp.getboolean("fits", "weighted", fallback=False)
        cfg.consistency_k = cp.getfloat("fits", "consistency_k", fallback=2.0)
    if cp.has_section("output"):
        cfg.write_fills = cp.getboolean("output", "write_fills", fallback=False)
        out = cp.get("output", "dir", fallback="").strip()
        if out:
            cfg.out = Path(out)
    cfg.validate()
    return cfg


CONFIG_TEMPLATE = """\
# Pipeline configuration.  Configure exactly one of [inputs] (ingest
# recorded order flow) or [synth] (generate a zero-intelligence corpus).

[run]
seed = 42
out = out

# [inputs]
# orders = orders.csv            # trader_id,class,stock,side,kind,price,size,cancel_target,timestamp,order_id
# calendar = calendar.csv        # trading days, optional per-day phase overrides
# stock_meta = stock_meta.csv    # stock,market,prev_close[,period_end_price[,tick_size]]
# dividends = dividends.csv      # optional: stock,ex_date,cash_per_share
# index_series = index.csv       # optional: date,market,level
# allow_bad_rows = false         # keep going past record-level parse errors
# resort = false                 # permit unsorted order files

[synth]
individuals_a = 800
institutions_a = 40
individuals_b = 140
institutions_b = 20
stocks_a = 32
stocks_b = 11
days = 20
start_date = 2003-01-06
freq_exponent = 2.5
freq_min = 2
freq_cap = 200
size_mu = 6.0
size_sigma = 1.0
size_cap = 100000
limit_prob = 0.9
price_band = 0.05
price_low = 5.0
price_high = 30.0
drift_sigma = 0.01

[fees.A]
brokerage = 0.0015
exchange = 0.0001475
supervision = 0.00004
stamp = 0.001
floor = 5
# brokerage_individual = 0.0025  # optional per-class override
# brokerage_institution = 0.001

[fees.B]
brokerage = 0.0015
exchange = 0.000301
supervision = 0.00004
stamp = 0.001
floor = 5

[ledger]
count_virtual_in_j = true        # period-end close-outs count toward J
virtual_costs = true             # ...and incur sell-side costs

[counterfactual]
replicas = 2000
# seed =                         # defaults to the run seed
strict_position_mode = false

[binning]
min_count = 10
j_ratio = 2.0
j_first_edge = 1.0

[fits]
weighted = false
consistency_k = 2.0

[output]
write_fills = false
"""


STAGE_INPUTS = "inputs"
STAGE_REPLAY = "replay"
STAGE_ANALYZE = "analyze"
STAGE_COUNTERFACTUAL = "counterfactual"
STAGE_REPORT = "report"
ALL_STAGES = (STAGE_INPUTS, STAGE_REPLAY, STAGE_ANALYZE, STAGE_COUNTERFACTUAL, STAGE_REPORT)


@dataclass
class PipelineResult:
    outputs: list[Path]
    diagnostics: DiagnosticLog
    performances: list[InvestorPerformance] = field(default_factory=list)
    manifest: dict = field(default_factory=dict)


@dataclass
class _Context:
    cfg: PipelineConfig
    out: Path
    diag: DiagnosticLog = field(default_factory=DiagnosticLog)
    created: list[Path] = field(default_factory=list)
    events: list[OrderEvent] = field(default_factory=list)
    calendar: Optional[TradingCalendar] = None
    metas: dict[str, StockMeta] = field(default_factory=dict)
    dividends: dict[str, list[tuple[Date, int]]] = field(default_factory=dict)
    index_levels: dict[Market, list[Optional[float]]] = field(default_factory=dict)
    replay: Optional[ReplayResult] = None
    sequences: dict[tuple[str, str], ActivitySequence] = field(default_factory=dict)
    investor_class: dict[str, InvestorClass] = field(default_factory=dict)
    accounting: dict[tuple[str, str], tuple[ActivitySequence, StockEarnings, HoldingTime]] = field(default_factory=dict)
    performances: list[InvestorPerformance] = field(default_factory=list)
    tapes: dict[str, TradeTape] = field(default_factory=dict)
    mc: Optional[MonteCarloResult] = None

    def write_text(self, rel: str, text: str) -> Path:
        path = self.out / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8", newline="")
        self.created.append(path)
        return path

    def open_csv(self, rel: str):
        path = self.out / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        self.created.append(path)
        return open(path, "w", encoding="utf-8", newline="")


def _fmt(x: float) -> str:
    return format(float(x), ".12g")


def _stage_inputs(ctx: _Context) -> None:
    cfg = ctx.cfg
    if cfg.synth is not None:
        spec = cfg.synth
        cal = TradingCalendar.weekdays(spec.start, spec.days)
        roster = generate_population(spec, cfg.seed)
        events, truth = generate_orderflow(roster, spec, cal, cfg.seed)
        metas = stock_metas(spec, reference_paths(spec, cal, cfg.seed))
        # Round-trip through the on-disk format so generated inputs are
        # audited by the same parser as recorded ones.
        import io

        buf = io.StringIO()
        serialize_order_events(events, buf)
        ctx.write_text("inputs/orders.csv", buf.getvalue())
        buf = io.StringIO()
        serialize_calendar(cal, buf)
        ctx.write_text("inputs/calendar.csv", buf.getvalue())
        buf = io.StringIO()
        serialize_stock_meta(metas.values(), buf)
        ctx.write_text("inputs/stock_meta.csv", buf.getvalue())
        ctx.write_text("inputs/dividends.csv", "stock,ex_date,cash_per_share\n")
        ctx.write_text("inputs/groundtruth.json", truth.to_json() + "\n")
        parsed = parse_order_events(ctx.out / "inputs/orders.csv")
        if not parsed.ok:
            raise RuntimeError(f"generated stream failed to parse: {parsed.diagnostics.errors[0]}")
        ctx.events = parsed.events
        ctx.calendar = load_calendar(ctx.out / "inputs/calendar.csv")
        ctx.metas = load_stock_meta(ctx.out / "inputs/stock_meta.csv")
        return

    parsed = parse_order_events(cfg.orders_path, resort=cfg.resort)
    ctx.diag.extend(parsed.diagnostics)
    if parsed.diagnostics.errors and not cfg.allow_bad_rows:
        first = parsed.diagnostics.errors[0]
        raise RuntimeError(f"order file has record errors (first: {first})")
    ctx.events = parsed.events
    ctx.calendar = load_calendar(cfg.calendar_path)
    ctx.metas = load_stock_meta(cfg.stock_meta_path)
    if cfg.dividends_path is not None:
        dividends, ddiag = load_dividends(cfg.dividends_path, known_stocks=set(ctx.metas))
        ctx.diag.extend(ddiag)
        if ddiag.errors and not cfg.allow_bad_rows:
            raise RuntimeError(f"dividend file has record errors (first: {ddiag.errors[0]})")
        for d in dividends:
            ctx.dividends.setdefault(d.stock_id, []).append((d.ex_date, d.cash_micros))
    if cfg.index_series_path is not None:
        ctx.index_levels = _load_index_series(cfg.index_series_path, ctx.calendar, ctx.diag)


def _load_index_series(path: Path, cal: TradingCalendar, diag: DiagnosticLog) -> dict[Market, list[Optional[float]]]:
    levels: dict[Market, dict[Date, float]] = {Market.A: {}, Market.B: {}}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            day = Date.fromisoformat(row[0].strip())
            market = Market(row[1].strip())
            levels[market][day] = float(row[2])
    out: dict[Market, list[Optional[float]]] = {}
    for market, by_day in levels.items():
        if not by_day:
            continue
        series: list[Optional[float]] = []
        last: Optional[float] = None
        for day in cal.days:
            v = by_day.get(day)
            if v is None and last is not None:
                diag.info("index-carried", f"index {market.value}: {day} carried forward")
                v = last
            series.append(v)
            last = v if v is not None else last
        if series[0] is None:
            diag.warning("index-missing-start", f"index {market.value} lacks a first-day level; skipped")
            continue
        out[market] = series
    return out


def _stage_replay(ctx: _Context) -> None:
    assert ctx.calendar is not None
    ctx.replay = replay_period(ctx.events, ctx.calendar, ctx.metas)
    ctx.diag.extend(ctx.replay.diagnostics)
    if ctx.cfg.write_fills:
        with ctx.open_csv("fills.csv") as fh:
            serialize_fills(ctx.replay.fills, fh)


def _stage_ledger(ctx: _Context) -> None:
    assert ctx.replay is not None and ctx.calendar is not None
    cfg = ctx.cfg
    for ev in ctx.events:
        known = ctx.investor_class.get(ev.trader_id)
        if known is None:
            ctx.investor_class[ev.trader_id] = ev.investor_class
        elif known is not ev.investor_class:
            ctx.diag.warning("class-conflict",
                             f"trader {ev.trader_id!r} appears with both classes; keeping {known.value}")
    period_end_ts = ctx.calendar.period_end()
    ctx.sequences = sequences_from_fills(
        ctx.replay.fills, ctx.replay.period_end_price_micros, period_end_ts, diag=ctx.diag)
    by_investor_market: dict[tuple[str, Market], list[tuple[ActivitySequence, StockEarnings, HoldingTime]]] = {}
    for (trader, stock), seq in ctx.sequences.items():
        market = ctx.metas[stock].market
        schedule = cfg.fees[market]
        earnings = stock_earnings(
            seq, schedule, ctx.dividends.get(stock, ()),
            ctx.investor_class[trader], virtual_costs=cfg.virtual_costs)
        holding = holding_time_fifo(seq)
        ctx.accounting[(trader, stock)] = (seq, earnings, holding)
        by_investor_market.setdefault((trader, market), []).append((seq, earnings, holding))
    performances = []
    for (trader, market) in sorted(by_investor_market, key=lambda k: (k[0], k[1].value)):
        perf = investor_performance(
            trader, ctx.investor_class[trader], market,
            by_investor_market[(trader, market)], count_virtual=cfg.count_virtual_in_j)
        if perf is None:
            ctx.diag.info("no-buy", f"investor {trader!r} in {market.value} excluded: never bought")
            continue
        performances.append(perf)
    ctx.performances = performances


def _stage_counterfactual(ctx: _Context, workers: int) -> None:
    assert ctx.replay is not None and ctx.calendar is not None
    cfg = ctx.cfg
    if cfg.replicas == 0:
        return
    period_end_ts = ctx.calendar.period_end()
    fills_by_stock: dict[str, list] = {}
    for f in ctx.replay.fills:
        fills_by_stock.setdefault(f.stock_id, []).append(f)
    for stock, fills in sorted(fills_by_stock.items()):
        ctx.tapes[stock] = tape_from_fills(
            stock, fills, ctx.replay.period_end_price_micros[stock], period_end_ts)

    by_investor_market: dict[tuple[str, Market], list[ActivitySequence]] = {}
    for (trader, stock), seq in ctx.sequences.items():
        market = ctx.metas[stock].market
        by_investor_market.setdefault((trader, market), []).append(seq)
    performance_keys = {(p.investor_id, p.market) for p in ctx.performances}
    prepared = []
    for (trader, market) in sorted(by_investor_market, key=lambda k: (k[0], k[1].value)):
        if (trader, market) not in performance_keys:
            continue
        prepared.append(prepare_investor(
            trader, market, ctx.investor_class[trader],
            sorted(by_investor_market[(trader, market)], key=lambda s: s.stock_id),
            cfg.fees[market], ctx.dividends,
            count_virtual=cfg.count_virtual_in_j, virtual_costs=cfg.virtual_costs,
        ))
    ctx.mc = run_monte_carlo(
        prepared, ctx.tapes,
        n_replicas=cfg.replicas, master_seed=cfg.mc_seed,
        strict_position_mode=cfg.strict_position_mode, workers=workers,
    )
    ctx.diag.extend(ctx.mc.diagnostics)


def _perf_arrays(performances: Sequence[InvestorPerformance]):
    j = np.asarray([p.j for p in performances], dtype=np.float64)
    dt = np.asarray([p.dt_days for p in performances], dtype=np.float64)
    r = np.asarray([p.r for p in performances], dtype=np.float64)
    return j, dt, r


def _binned_for(j, dt, r, kind: str) -> dict[str, BinnedSeries]:
    x, other = (j, dt) if kind == KIND_J else (dt, j)
    masks = split_pools(r)
    out = {}
    for pool, mask in masks.items():
        out[pool] = bin_arrays(x[mask], r[mask], other[mask], kind, None, pool)
    return out


def _write_binned_rows(writer, series: BinnedSeries, source: str) -> None:
    centers = series.centers
    for b in range(series.n_bins):
        if series.counts[b] == 0:
            continue
        writer.writerow([
            _fmt(centers[b]), source, series.pool, _fmt(series.mean_r[b]),
            _fmt(series.std_r[b]), int(series.counts[b]), _fmt(series.mean_other[b]),
        ])


def _stage_report(ctx: _Context) -> None:
    cfg = ctx.cfg
    with ctx.open_csv("performance.csv") as fh:
        serialize_performances(ctx.performances, fh)

    classification = classify_investors(ctx.performances)
    ctx.diag.extend(classification.diagnostics)
    with ctx.open_csv("winner_fractions.csv") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["market", "class", "investors", "winners", "losers", "flats", "winner_fraction"])
        for c in classification.counts:
            writer.writerow([c.market.value, c.investor_class.value, c.total,
                             c.winners, c.losers, c.flats, _fmt(c.winner_fraction)])

    with ctx.open_csv("plot_box_returns.csv") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["market", "class", "minimum", "lower_quartile", "median",
                         "upper_quartile", "maximum"])
        for (market, cls), cell in classification.pools.items():
            sample = [p.r for pool in ("winner", "loser", "flat") for p in cell[pool]]
            if not sample:
                continue
            bs = box_stats(sample)
            writer.writerow([market.value, cls.value, _fmt(bs.minimum), _fmt(bs.lower_quartile),
                             _fmt(bs.median), _fmt(bs.upper_quartile), _fmt(bs.maximum)])

    fit_rows = []
    consistency_rows = []
    for market in Market:
        for cls in InvestorClass:
            cell = [p for p in ctx.performances if p.market is market and p.investor_class is cls]
            tag = f"{market.value}_{cls.value}"
            if not cell:
                continue
            j, dt, r = _perf_arrays(cell)
            by_j = _binned_for(j, dt, r, KIND_J)
            by_dt = _binned_for(j, dt, r, KIND_DT)

            with ctx.open_csv(f"plot_R_vs_J_{tag}.csv") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(["bin_center", "source", "pool", "mean_R", "std_R", "count", "mean_dt"])
                for pool in ("all", "winner", "loser"):
                    _write_binned_rows(writer, by_j[pool], "real")
                if ctx.mc is not None:
                    rj, rdt, rr = replica_pool_arrays(ctx.mc, market, cls)
                    if len(rr):
                        for pool, series in _binned_for(rj, rdt, rr, KIND_J).items():
                            _write_binned_rows(writer, series, "random")
            with ctx.open_csv(f"plot_R_vs_dt_{tag}.csv") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(["bin_center", "source", "pool", "mean_R", "std_R", "count", "mean_J"])
                for pool in ("all", "winner", "loser"):
                    _write_binned_rows(writer, by_dt[pool], "real")
                if ctx.mc is not None:
                    rj, rdt, rr = replica_pool_arrays(ctx.mc, market, cls)
                    if len(rr):
                        for pool, series in _binned_for(rj, rdt, rr, KIND_DT).items():
                            _write_binned_rows(writer, series, "random")

            with ctx.open_csv(f"plot_powerlaw_{tag}.csv") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(["relation", "pool", "x", "y", "count"])
                for pool in ("winner", "loser"):
                    sj = by_j[pool]
                    sdt = by_dt[pool]
                    centers = sj.centers
                    for b in range(sj.n_bins):
                        if sj.counts[b]:
                            writer.writerow(["R~J", pool, _fmt(centers[b]),
                                             _fmt(abs(sj.mean_r[b])), int(sj.counts[b])])
                    for b in range(sj.n_bins):
                        if sj.counts[b]:
                            writer.writerow(["dt~J", pool, _fmt(centers[b]),
                                             _fmt(sj.mean_other[b]), int(sj.counts[b])])
                    dcenters = sdt.centers
                    for b in range(sdt.n_bins):
                        if sdt.counts[b]:
                            writer.writerow(["R~dt", pool, _fmt(dcenters[b]),
                                             _fmt(abs(sdt.mean_r[b])), int(sdt.counts[b])])

            for pool in ("winner", "loser"):
                alpha = fit_power_law(by_j[pool], "R~J", min_count=cfg.min_count, weighted=cfg.weighted_fits)
                beta = fit_power_law(by_dt[pool], "R~dt", min_count=cfg.min_count, weighted=cfg.weighted_fits)
                gamma = fit_power_law(by_j[pool], "dt~J", min_count=cfg.min_count, weighted=cfg.weighted_fits)
                for f, rel in ((alpha, "R~J"), (beta, "R~dt"), (gamma, "dt~J")):
                    if f.usable:
                        fit_rows.append([market.value, cls.value, pool, f.name, rel,
                                         _fmt(f.exponent), _fmt(f.stderr), _fmt(f.r2), f.bins_used])
                    else:
                        ctx.diag.info("fit-unavailable",
                                      f"{tag}/{pool}: {rel} fit unavailable (too few usable bins)")
                triple = check_exponent_relation(alpha, beta, gamma, k=cfg.consistency_k)
                consistency_rows.append([
                    market.value, cls.value, pool,
                    _fmt(triple.alpha.exponent) if triple.alpha.usable else "",
                    _fmt(triple.beta.exponent) if triple.beta.usable else "",
                    _fmt(triple.gamma.exponent) if triple.gamma.usable else "",
                    _fmt(triple.beta_gamma) if triple.verdict != "indeterminate" else "",
                    _fmt(triple.combined_sigma) if triple.verdict != "indeterminate" else "",
                    triple.verdict,
                ])

            if ctx.mc is not None:
                rj, rdt, rr = replica_pool_arrays(ctx.mc, market, cls)
                with ctx.open_csv(f"replica_summary_{tag}.csv") as fh:
                    writer = csv.writer(fh, lineterminator="\n")
                    writer.writerow(["bin_kind", "bin_center", "pool", "mean_R", "std_R", "count"])
                    if len(rr):
                        for kind in (KIND_J, KIND_DT):
                            x = rj if kind == KIND_J else rdt
                            other = rdt if kind == KIND_J else rj
                            for pool, mask in split_pools(rr).items():
                                series = bin_arrays(x[mask], rr[mask], other[mask], kind, None, pool)
                                centers = series.centers
                                for b in range(series.n_bins):
                                    if series.counts[b]:
                                        writer.writerow([kind, _fmt(centers[b]), pool,
                                                         _fmt(series.mean_r[b]), _fmt(series.std_r[b]),
                                                         int(series.counts[b])])

    with ctx.open_csv("fits.csv") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["market", "class", "pool", "exponent", "name", "value", "stderr", "r2", "bins_used"])
        writer.writerows(fit_rows)
    with ctx.open_csv("consistency.csv") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["market", "class", "pool", "alpha", "beta", "gamma",
                         "beta_gamma", "sigma", "verdict"])
        writer.writerows(consistency_rows)

    assert ctx.replay is not None and ctx.calendar is not None
    for market in Market:
        stocks = sorted(s for s, m in ctx.metas.items() if m.market is market)
        if not stocks:
            continue
        daily: dict[str, list[Optional[float]]] = {}
        for stock in stocks:
            closes = ctx.replay.daily_close_micros[stock]
            series: list[Optional[float]] = []
            for i, c in enumerate(closes):
                if c is None and i == 0:
                    # Entry price falls back to the period-start reference.
                    series.append(micros_to_float(ctx.metas[stock].prev_close_micros))
                else:
                    series.append(micros_to_float(c) if c is not None else None)
            daily[stock] = series
        result = one_over_n_benchmark(daily, ctx.index_levels.get(market))
        ctx.diag.extend(result.diagnostics)
        with ctx.open_csv(f"one_over_n_{market.value}.csv") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["date", "portfolio_value", "index_level"])
            for i, day in enumerate(ctx.calendar.days):
                index_cell = (_fmt(result.index_normalized[i])
                              if result.index_normalized is not None else "")
                writer.writerow([day.isoformat(), _fmt(result.portfolio_value[i]), index_cell])


def run_pipeline(
    config: PipelineConfig,
    *,
    workers: int = 1,
    stages: Sequence[str] = ALL_STAGES,
    write_manifest: bool = True,
) -> PipelineResult:
    """Run the configured stages, writing reports under config.out.

    Any stage failure removes the files created by this invocation and
    raises StageError naming the stage.
    """
    config.validate()
    wanted = set(stages)
    ctx = _Context(config, Path(config.out))
    ctx.out.mkdir(parents=True, exist_ok=True)
    need_replay = bool(wanted & {STAGE_REPLAY, STAGE_ANALYZE, STAGE_COUNTERFACTUAL, STAGE_REPORT})
    need_ledger = bool(wanted & {STAGE_ANALYZE, STAGE_COUNTERFACTUAL, STAGE_REPORT})
    need_mc = bool(wanted & {STAGE_COUNTERFACTUAL, STAGE_REPORT})
    try:
        try:
            _stage_inputs(ctx)
        except Exception as exc:
            raise StageError(STAGE_INPUTS, exc) from exc
        if need_replay:
            try:
                _stage_replay(ctx)
            except Exception as exc:
                raise StageError(STAGE_REPLAY, exc) from exc
        if need_ledger:
            try:
                _stage_ledger(ctx)
            except Exception as exc:
                raise StageError(STAGE_ANALYZE, exc) from exc
            if STAGE_ANALYZE in wanted and STAGE_REPORT not in wanted:
                with ctx.open_csv("performance.csv") as fh:
                    serialize_performances(ctx.performances, fh)
        if need_mc:
            try:
                _stage_counterfactual(ctx, workers)
            except Exception as exc:
                raise StageError(STAGE_COUNTERFACTUAL, exc) from exc
        if STAGE_REPORT in wanted:
            try:
                _stage_report(ctx)
            except Exception as exc:
                raise StageError(STAGE_REPORT, exc) from exc
        manifest = {}
        if write_manifest and STAGE_REPORT in wanted:
            manifest = {
                "config": config.manifest_dict(),
                "config_sha256": config.config_hash(),
                "seed": config.seed,
                "versions": {
                    "package": __version__,
                    "python": ".".join(map(str, sys.version_info[:3])),
                    "numpy": np.__version__,
                },
                "counts": {
                    "events": len(ctx.events),
                    "fills": len(ctx.replay.fills) if ctx.replay else 0,
                    "sequences": len(ctx.sequences),
                    "performances": len(ctx.performances),
                    "replicas": config.replicas if ctx.mc is not None else 0,
                },
            }
            ctx.write_text("manifest.json", json.dumps(manifest, sort_keys=True, indent=2) + "\n")
        return PipelineResult(sorted(ctx.created), ctx.diag, ctx.performances, manifest)
    except StageError:
        for path in ctx.created:
            try:
                path.unlink(missing_ok=True)
            except OSError:
                pass
        raise
