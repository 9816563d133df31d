"""Simulation and analysis toolkit for cross-market stress contagion.

Each stock exchange is treated as an integrate-and-fire oscillator: stress
imposed by other markets accumulates in a pairwise tensor, is priced in only
once it crosses a behavioral threshold, and the resulting cascades
("price-quakes") are detected with exact cause-and-effect attribution.
"""

from pricequake.network import (
    EventCalendar,
    EventKind,
    ExchangeSpec,
    MarketEvent,
    build_calendar,
    load_exchanges,
    time_zone_gap,
)
from pricequake.engine import (
    CouplingWeights,
    EventOutcome,
    ModelParams,
    PriceSeries,
    ReplayResult,
    SimulationResult,
    StressTensor,
    alpha_weight,
    beta_weight,
    draw_noise,
    evaluate_event,
    replay,
    simulate,
)
from pricequake.detector import (
    AvalancheRecord,
    CriticalityMark,
    EdgeKind,
    ImpactEdge,
    QuakeKind,
    Sign,
    assemble_quakes,
    classify_critical,
    detect_impacts,
    detect_quakes,
)
from pricequake.ofc import OfcLattice, AvalancheTrace, relax, run_ofc, uniform_load
from pricequake.calibrate import (
    CalibrationResult,
    SearchSpace,
    fit,
    log_likelihood,
    residual_diagnostic,
)
from pricequake.reporting import (
    degree_stats,
    distribution,
    role_counts,
    source_ranking,
    spread_by_source,
    summarize,
)

__version__ = "0.1.0"
