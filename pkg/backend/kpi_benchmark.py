"""
KPI Computation and Benchmark Harness
KPIs over the intermodal event data through three interchangeable paths
(native SQL, ontology-based access, raw log scan) and the per-day latency
benchmark with trend analysis
"""

import csv
import logging
import time
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from dateutil.parser import isoparse
from scipy import stats

import config
from database import Database, RetentionPolicy, sql_identifier
from errors import DegenerateSeries, InvalidParams, UnknownKPI
from ils_simulator import (
    EPOCH, SIM_EVENT_TABLE, EventLog, ScenarioParams, SimEvent, event_tables,
    generate_scenario, ingest_day, load_ils_ontology, prepare_store,
)
from logging_config import log_performance
from ontology import Ontology
from query_rewriter import certain_answers, parse_cq

logger = logging.getLogger(__name__)

PATHS = ('sql', 'obda', 'oracle')
MODES = ('cumulative', 'retention')
VALUE_DECIMALS = 6

Period = Tuple[datetime, datetime]


@dataclass(frozen=True)
class KPIResult:
    name: str
    period: Period
    value: float

    def __post_init__(self):
        if self.value < 0:
            raise InvalidParams(f"KPI {self.name} produced a negative value", {'value': self.value})


def day_period(day: int) -> Period:
    start = EPOCH + timedelta(days=day - 1)
    return start, start + timedelta(days=1)


def _hours(period: Period) -> float:
    return (period[1] - period[0]).total_seconds() / 3600.0


def _ts(value: datetime) -> str:
    return value.isoformat(timespec='microseconds')


def _in_period(t: datetime, period: Period) -> bool:
    return period[0] <= t < period[1]


# ==================== KPI ENGINE ====================

class KPIEngine:
    """
    Evaluates the registered KPIs for a period along one of the paths.

    The sql path aggregates the native sim_event table, the obda path
    retrieves tuples through certain answers over the ontology tables and
    aggregates them here, the oracle path scans the raw event log.
    """

    # avg_terminal_dwell_hours and trains_per_day_per_terminal exist to
    # exercise multi-join retrieval; only unloads per hour is a published KPI
    KPIS = ('avg_itus_unloaded_per_hour', 'avg_terminal_dwell_hours', 'trains_per_day_per_terminal')

    UNLOADS_QUERY = "SELECT ?e ?t WHERE { ?e a UnloadEvent . ?e hasTimestamp ?t }"
    LOADS_QUERY = ("SELECT ?e ?i ?x ?t WHERE { ?e a LoadEvent . ?e involves ?i . "
                   "?e occursAt ?x . ?e hasTimestamp ?t }")
    ARRIVALS_QUERY = ("SELECT ?e ?i ?x ?t WHERE {{ ?e a {cls} . ?e involves ?i . "
                      "?e occursAt ?x . ?e hasTimestamp ?t }}")
    DEPARTS_QUERY = ("SELECT ?e ?r ?x ?t WHERE { ?e a DepartEvent . ?e usesTrain ?r . "
                     "?e occursAt ?x . ?e hasTimestamp ?t }")
    TERMINALS_QUERY = "SELECT ?x WHERE { ?x a Terminal }"

    def __init__(self, store: Optional[Database] = None, onto: Optional[Ontology] = None,
                 log: Optional[EventLog] = None):
        self.store = store
        self.onto = onto
        self.log = log

    def compute(self, name: str, period: Period, path: str) -> KPIResult:
        if name not in self.KPIS:
            raise UnknownKPI(f"Unknown KPI: {name}", {'kpi': name, 'known': list(self.KPIS)})
        if path not in PATHS:
            raise InvalidParams(f"Unknown path: {path}", {'path': path})
        if period[1] <= period[0]:
            raise InvalidParams("KPI period must have positive length")
        if path == 'oracle' and self.log is None:
            raise InvalidParams("The oracle path needs the event log")
        if path in ('sql', 'obda') and self.store is None:
            raise InvalidParams(f"The {path} path needs a populated store")

        handler: Callable[[Period], float] = getattr(self, f"_{name}_{path}")
        value = handler(period)
        return KPIResult(name, period, round(float(value), VALUE_DECIMALS))

    # ---------- helpers ----------

    def _sql(self, text: str, *params) -> List[tuple]:
        return self.store.query(text, params)

    def _obda(self, text: str) -> List[tuple]:
        onto = self.onto or load_ils_ontology()
        return certain_answers(parse_cq(text, onto), onto, self.store).sorted_rows()

    def _events(self, kinds: Sequence[str]) -> List[SimEvent]:
        return [e for e in self.log.events if e.kind in kinds]

    @staticmethod
    def _mean(values: List[float]) -> float:
        # sorted so every path sums in the same order
        return float(np.mean(sorted(values))) if values else 0.0

    @classmethod
    def _mean_dwell(cls, loads, arrivals) -> float:
        """loads/arrivals: (itu, terminal, t) triples; dwell ends at a load"""
        by_place: Dict[Tuple[str, str], List[datetime]] = {}
        for itu, terminal, t in arrivals:
            by_place.setdefault((itu, terminal), []).append(t)
        dwell = []
        for itu, terminal, t in loads:
            prior = [a for a in by_place.get((itu, terminal), ()) if a < t]
            if prior:
                dwell.append((t - max(prior)).total_seconds() / 3600.0)
        return cls._mean(dwell)

    # ---------- avg_itus_unloaded_per_hour ----------

    def _avg_itus_unloaded_per_hour_sql(self, period: Period) -> float:
        (count,), = self._sql(
            f"SELECT COUNT(*) FROM {SIM_EVENT_TABLE.name} WHERE kind = 'Unload' AND t >= ? AND t < ?",
            _ts(period[0]), _ts(period[1]))
        return count / _hours(period)

    def _avg_itus_unloaded_per_hour_obda(self, period: Period) -> float:
        events = {e for e, t in self._obda(self.UNLOADS_QUERY) if _in_period(isoparse(t), period)}
        return len(events) / _hours(period)

    def _avg_itus_unloaded_per_hour_oracle(self, period: Period) -> float:
        return sum(1 for e in self._events(('Unload',)) if _in_period(e.t, period)) / _hours(period)

    # ---------- avg_terminal_dwell_hours ----------

    def _avg_terminal_dwell_hours_sql(self, period: Period) -> float:
        table = SIM_EVENT_TABLE.name
        rows = self._sql(
            f"SELECT l.t, MAX(p.t)"
            f" FROM {table} l JOIN {table} p"
            f" ON p.itu = l.itu AND p.terminal = l.terminal"
            f" AND p.kind IN ('GateIn', 'Unload') AND p.t < l.t"
            f" WHERE l.kind = 'Load' AND l.t >= ? AND l.t < ?"
            f" GROUP BY l.event_id",
            _ts(period[0]), _ts(period[1]))
        # sqlite date functions keep milliseconds only, so the difference is taken here
        return self._mean([(isoparse(end) - isoparse(start)).total_seconds() / 3600.0 for end, start in rows])

    def _avg_terminal_dwell_hours_obda(self, period: Period) -> float:
        loads = [(i, x, isoparse(t)) for _, i, x, t in self._obda(self.LOADS_QUERY)]
        loads = [row for row in loads if _in_period(row[2], period)]
        arrivals = []
        for cls in ('GateInEvent', 'UnloadEvent'):
            arrivals.extend((i, x, isoparse(t)) for _, i, x, t in self._obda(self.ARRIVALS_QUERY.format(cls=cls)))
        return self._mean_dwell(loads, arrivals)

    def _avg_terminal_dwell_hours_oracle(self, period: Period) -> float:
        loads = [(e.itu, e.terminal, e.t) for e in self._events(('Load',)) if _in_period(e.t, period)]
        arrivals = [(e.itu, e.terminal, e.t) for e in self._events(('GateIn', 'Unload'))]
        return self._mean_dwell(loads, arrivals)

    # ---------- trains_per_day_per_terminal ----------

    def _trains_per_day_per_terminal_sql(self, period: Period) -> float:
        (departures,), = self._sql(
            f"SELECT COUNT(*) FROM (SELECT DISTINCT train, terminal, substr(t, 1, 10)"
            f" FROM {SIM_EVENT_TABLE.name} WHERE kind = 'Depart' AND t >= ? AND t < ?)",
            _ts(period[0]), _ts(period[1]))
        terminal_table = sql_identifier(self.store.mapping.class_map['Terminal'])
        (terminals,), = self._sql(f"SELECT COUNT(*) FROM {terminal_table}")
        return self._per_terminal_day(departures, terminals, period)

    def _trains_per_day_per_terminal_obda(self, period: Period) -> float:
        departures = {(r, x, isoparse(t).date()) for _, r, x, t in self._obda(self.DEPARTS_QUERY)
                      if _in_period(isoparse(t), period)}
        terminals = len(self._obda(self.TERMINALS_QUERY))
        return self._per_terminal_day(len(departures), terminals, period)

    def _trains_per_day_per_terminal_oracle(self, period: Period) -> float:
        departures = {(e.train, e.terminal, e.t.date()) for e in self._events(('Depart',))
                      if _in_period(e.t, period)}
        return self._per_terminal_day(len(departures), len(self.log.network.terminals), period)

    @staticmethod
    def _per_terminal_day(departures: int, terminals: int, period: Period) -> float:
        if terminals == 0:
            return 0.0
        return departures / (terminals * _hours(period) / 24.0)


def compute_kpi(name: str, period: Period, path: str, store: Optional[Database] = None,
                onto: Optional[Ontology] = None, log: Optional[EventLog] = None) -> KPIResult:
    """
    Raises:
        UnknownKPI: name is not a registered KPI
    """
    return KPIEngine(store, onto, log).compute(name, period, path)


# ==================== TREND TEST ====================

@dataclass(frozen=True)
class TrendResult:
    slope: float
    p_value: float
    points: int


def trend_test(series: Sequence[Tuple[float, float]]) -> TrendResult:
    """OLS slope with the two-sided p-value for a zero slope"""
    if len(series) < 3:
        raise DegenerateSeries("A trend needs at least 3 points", {'points': len(series)})
    x = np.array([p[0] for p in series], dtype=float)
    y = np.array([p[1] for p in series], dtype=float)
    if np.all(x == x[0]):
        raise DegenerateSeries("All x values are equal")
    fit = stats.linregress(x, y)
    p_value = 1.0 if np.isnan(fit.pvalue) else float(fit.pvalue)
    return TrendResult(float(fit.slope), p_value, len(series))


# ==================== BENCHMARK ====================

@dataclass(frozen=True)
class LatencyEntry:
    day: int
    path: str
    median_ms: float
    repetitions: int


@dataclass
class BenchmarkReport:
    mode: str
    params: ScenarioParams
    per_day: List[LatencyEntry] = field(default_factory=list)
    trend: Dict[str, Optional[TrendResult]] = field(default_factory=dict)
    values: Dict[Tuple[int, str, str], float] = field(default_factory=dict)

    def latencies(self, path: str) -> List[Tuple[int, float]]:
        return [(e.day, e.median_ms) for e in self.per_day if e.path == path]

    def disagreements(self) -> List[Tuple[int, str]]:
        """(day, kpi) pairs whose value differs between paths"""
        grouped: Dict[Tuple[int, str], set] = {}
        for (day, path, kpi), value in self.values.items():
            grouped.setdefault((day, kpi), set()).add(value)
        return sorted(key for key, values in grouped.items() if len(values) > 1)


def _median_latency(action: Callable[[], None], repetitions: int) -> float:
    samples = []
    for _ in range(repetitions):
        start = time.perf_counter()
        action()
        samples.append((time.perf_counter() - start) * 1000)
    return float(np.median(samples))


def run_benchmark(params: ScenarioParams, kpis: Sequence[str] = ('avg_itus_unloaded_per_hour',),
                  paths: Sequence[str] = ('sql', 'obda'), mode: str = 'cumulative',
                  window_days: int = 2, repetitions: Optional[int] = None,
                  log: Optional[EventLog] = None) -> BenchmarkReport:
    """
    Ingest the scenario day by day and, after each day, time every path
    computing the KPIs for that day.

    Args:
        mode: 'cumulative' keeps all data, 'retention' applies a sliding
              window of window_days before each measurement
        repetitions: timed repetitions per (day, path), median reported

    Returns:
        BenchmarkReport with one latency entry per (day, path)
    """
    if mode not in MODES:
        raise InvalidParams(f"Unknown benchmark mode: {mode}", {'mode': mode})
    unknown = [p for p in paths if p not in PATHS]
    if unknown:
        raise InvalidParams(f"Unknown path: {unknown[0]}", {'path': unknown[0]})
    repetitions = repetitions or config.BENCH_REPETITIONS
    if repetitions < 1:
        raise InvalidParams("At least one repetition is needed")
    for name in kpis:
        if name not in KPIEngine.KPIS:
            raise UnknownKPI(f"Unknown KPI: {name}", {'kpi': name})

    started = time.perf_counter()
    onto = load_ils_ontology()
    log = log or generate_scenario(params)
    store = prepare_store(log, onto)
    engine = KPIEngine(store, onto, log)
    report = BenchmarkReport(mode, params)
    policy = None
    if mode == 'retention':
        policy = RetentionPolicy(timedelta(days=window_days), event_tables(store))

    try:
        for day in range(1, params.days + 1):
            ingest_day(store, log, day)
            period = day_period(day)
            if policy is not None:
                store.apply_retention(policy, period[1])
            for path in paths:
                for name in kpis:
                    report.values[(day, path, name)] = engine.compute(name, period, path).value

                def measure(path=path):
                    for name in kpis:
                        engine.compute(name, period, path)

                report.per_day.append(LatencyEntry(day, path, _median_latency(measure, repetitions), repetitions))
            logger.debug(f"Benchmark day {day}: {[e.median_ms for e in report.per_day if e.day == day]}")
    finally:
        store.close()

    for path in paths:
        series = report.latencies(path)
        report.trend[path] = trend_test(series) if len(series) >= 3 else None

    log_performance(logger, 'run_benchmark', (time.perf_counter() - started) * 1000,
                    {'mode': mode, 'days': params.days, 'paths': list(paths)})
    return report


# ==================== REPORT FILES ====================

BENCHMARK_COLUMNS = ['day', 'path', 'median_ms', 'repetitions']
TREND_COLUMNS = ['mode', 'path', 'slope', 'p_value', 'points']
PLOT_COLUMNS = ['x', 'y', 'series']


def write_report(report: BenchmarkReport, out_dir: Union[str, Path]) -> Dict[str, Path]:
    """benchmark_<mode>.csv, trend_<mode>.csv and plot_<mode>.csv"""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        'benchmark': out / f"benchmark_{report.mode}.csv",
        'trend': out / f"trend_{report.mode}.csv",
        'plot': out / f"plot_{report.mode}.csv",
    }

    with open(paths['benchmark'], 'w', newline='', encoding='utf-8') as handle:
        writer = csv.writer(handle)
        writer.writerow(BENCHMARK_COLUMNS)
        for e in report.per_day:
            writer.writerow([e.day, e.path, f"{e.median_ms:.3f}", e.repetitions])

    with open(paths['trend'], 'w', newline='', encoding='utf-8') as handle:
        writer = csv.writer(handle)
        writer.writerow(TREND_COLUMNS)
        for path, trend in report.trend.items():
            if trend is None:
                writer.writerow([report.mode, path, 'ND', 'ND', len(report.latencies(path))])
            else:
                writer.writerow([report.mode, path, f"{trend.slope:.6g}", f"{trend.p_value:.6g}", trend.points])

    with open(paths['plot'], 'w', newline='', encoding='utf-8') as handle:
        writer = csv.writer(handle)
        writer.writerow(PLOT_COLUMNS)
        for e in report.per_day:
            writer.writerow([e.day, f"{e.median_ms:.3f}", f"{report.mode}:{e.path}"])

    logger.info(f"Benchmark report written to {out}")
    return paths
