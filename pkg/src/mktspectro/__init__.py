"""Market-strategy spectroscopy: replay order flow, account net returns
exactly, benchmark every investor against random-timing counterfactuals,
and extract the power-law structure of return vs. frequency and holding time.
"""

__version__ = "0.1.0"

from .orderflow import (  # noqa: F401
    InvestorClass,
    Market,
    OrderEvent,
    OrderKind,
    Phase,
    Side,
    StockMeta,
    Timestamp,
    TradingCalendar,
    parse_order_events,
    session_phase,
)
from .ledger import (  # noqa: F401
    ActivitySequence,
    Entry,
    FeeSchedule,
    InvestorPerformance,
    build_activity_sequence,
    holding_time_fifo,
    portfolio_return,
    stock_earnings,
    trading_frequency,
    transaction_cost,
)
from .counterfactual import ReplicaResult, TradeTape, run_monte_carlo  # noqa: F401
from .spectro import (  # noqa: F401
    BinnedSeries,
    BoxStats,
    PowerLawFit,
    bin_and_average,
    box_stats,
    check_exponent_relation,
    classify_investors,
    fit_power_law,
    one_over_n_benchmark,
)
from .pipeline import PipelineConfig, load_config, run_pipeline  # noqa: F401
