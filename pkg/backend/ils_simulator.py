"""
Intermodal Logistics Simulator
Discrete-event simulation of ITUs moving between rail terminals on scheduled
trains, producing the event log that feeds KPI computation and benchmarking
"""

import csv
import logging
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple, Union

import networkx as nx
import numpy as np
import simpy
from dateutil.parser import isoparse

import config
from database import ColumnSpec, Database, TableSpec, generate_schema
from errors import InvalidParams
from ontology import ClassAssertion, DataAssertion, ObjectAssertion, Ontology, load_ontology

logger = logging.getLogger(__name__)

EPOCH = datetime(2024, 1, 1)
MINUTES_PER_DAY = 24 * 60

EVENT_KINDS = ('GateIn', 'Load', 'Depart', 'Arrive', 'Unload', 'GateOut')
LEG_KINDS = ('Load', 'Depart', 'Arrive', 'Unload')


# ==================== NETWORK FIXTURE ====================

@dataclass(frozen=True)
class ScheduledStop:
    route: str
    terminal: str
    arrival: int  # minutes after midnight
    departure: int

    @property
    def id(self) -> str:
        return f"stop_{self.route}_{self.terminal}"


@dataclass(frozen=True)
class RouteSpec:
    name: str
    train: str
    stops: Tuple[ScheduledStop, ...]

    @property
    def terminals(self) -> Tuple[str, ...]:
        return tuple(s.terminal for s in self.stops)


@dataclass(frozen=True)
class NetworkFixture:
    terminals: Tuple[str, ...]
    routes: Tuple[RouteSpec, ...]
    cars_per_train: int = 50
    itus_per_car: int = 2

    def __post_init__(self):
        declared = set(self.terminals)
        for route in self.routes:
            if any(t not in declared for t in route.terminals):
                raise InvalidParams(f"Route {route.name} references an undeclared terminal")
            offsets = [m for stop in route.stops for m in (stop.arrival, stop.departure)]
            if any(b <= a for a, b in zip(offsets[1::2], offsets[2::2])):
                raise InvalidParams(f"Route {route.name} schedule offsets must strictly increase")

    @property
    def train_capacity(self) -> int:
        return self.cars_per_train * self.itus_per_car

    def route(self, name: str) -> RouteSpec:
        return next(r for r in self.routes if r.name == name)


class Timetable:
    """Common timetable settings, held fixed across scenarios"""

    LEG_MINUTES = 90
    DWELL_MINUTES = 30
    EARLY_DEPARTURE = 6 * 60
    HUB_DEPARTURE = 11 * 60

    @classmethod
    def stops(cls, route: str, terminals: List[str], departure: int) -> Tuple[ScheduledStop, ...]:
        stops = []
        for index, terminal in enumerate(terminals):
            if index == 0:
                arrival = departure - cls.DWELL_MINUTES
            else:
                arrival = departure + index * cls.LEG_MINUTES + (index - 1) * cls.DWELL_MINUTES
            leaves = arrival + cls.DWELL_MINUTES if index < len(terminals) - 1 else arrival
            stops.append(ScheduledStop(route, terminal, arrival, leaves))
        return tuple(stops)


def default_network(terminals: int = 5) -> NetworkFixture:
    """
    A linear corridor T1..Tn with a hub in the middle: trains leave both
    ends early in the morning towards the hub, and leave the hub late in
    the morning towards both ends, so one transfer at the hub connects any
    pair of terminals within the day.
    """
    if terminals < 2:
        raise InvalidParams("The network needs at least 2 terminals", {'terminals': terminals})
    names = [f"T{i}" for i in range(1, terminals + 1)]
    hub = (terminals + 1) // 2 - 1
    plans = [
        ('R1', names[:hub + 1], Timetable.EARLY_DEPARTURE),
        ('R2', names[hub:], Timetable.HUB_DEPARTURE),
        ('R3', list(reversed(names[:hub + 1])), Timetable.HUB_DEPARTURE),
        ('R4', list(reversed(names[hub:])), Timetable.EARLY_DEPARTURE),
    ]
    routes = []
    for name, stops, departure in plans:
        if len(stops) < 2:
            continue
        routes.append(RouteSpec(name, f"TR_{name}", Timetable.stops(name, stops, departure)))
    return NetworkFixture(tuple(names), tuple(routes))


@dataclass(frozen=True)
class Leg:
    route: str
    board: str
    alight: str


def plan_itineraries(network: NetworkFixture) -> Dict[Tuple[str, str], Tuple[Leg, ...]]:
    """Fewest-trains itinerary for every ordered terminal pair"""
    rides = nx.DiGraph()
    rides.add_nodes_from(network.terminals)
    for route in network.routes:
        for i, j in ((i, j) for i in range(len(route.stops)) for j in range(i + 1, len(route.stops))):
            board, alight = route.stops[i].terminal, route.stops[j].terminal
            if not rides.has_edge(board, alight):
                rides.add_edge(board, alight, route=route.name)

    itineraries = {}
    for origin in network.terminals:
        for destination in network.terminals:
            if origin == destination:
                continue
            try:
                path = nx.shortest_path(rides, origin, destination)
            except nx.NetworkXNoPath:
                continue
            itineraries[(origin, destination)] = tuple(
                Leg(rides.edges[a, b]['route'], a, b) for a, b in zip(path, path[1:])
            )
    return itineraries


# ==================== SCENARIO ====================

@dataclass(frozen=True)
class ScenarioParams:
    itus_per_terminal_day: int = 45
    days: int = 1
    seed: int = config.DEFAULT_SEED
    terminals: int = 5

    def validate(self):
        if not 10 <= self.itus_per_terminal_day <= 50:
            raise InvalidParams("itus_per_terminal_day must be in [10, 50]",
                                {'itus_per_terminal_day': self.itus_per_terminal_day})
        if not 1 <= self.days <= 15:
            raise InvalidParams("days must be in [1, 15]", {'days': self.days})
        if self.terminals < 2:
            raise InvalidParams("at least 2 terminals are needed", {'terminals': self.terminals})


@dataclass(frozen=True)
class SimEvent:
    event_id: str
    kind: str
    t: datetime
    terminal: str
    itu: str
    train: Optional[str]
    order: str

    @property
    def day(self) -> int:
        return (self.t - EPOCH).days + 1


@dataclass(frozen=True)
class TransportOrderRecord:
    order: str
    request: str
    customer: str
    itu: str
    origin: str
    destination: str
    gate_in: datetime


@dataclass
class EventLog:
    params: ScenarioParams
    network: NetworkFixture
    events: List[SimEvent] = field(default_factory=list)
    orders: List[TransportOrderRecord] = field(default_factory=list)
    customers: Dict[str, List[str]] = field(default_factory=dict)
    itineraries: Dict[str, Tuple[Leg, ...]] = field(default_factory=dict)
    in_transit_at_horizon: int = 0

    @property
    def horizon(self) -> datetime:
        return EPOCH + timedelta(days=self.params.days)

    def events_of_day(self, day: int) -> List[SimEvent]:
        return [e for e in self.events if e.day == day]

    def orders_of_day(self, day: int) -> List[TransportOrderRecord]:
        return [o for o in self.orders if (o.gate_in - EPOCH).days + 1 == day]


class SimulationParameters:
    """Probabilistic model of demand and operations"""

    DELAY_SD_MINUTES = 10.0
    CUSTOMERS_MEAN = 8
    REQUEST_MIN_ITUS = 1
    REQUEST_MAX_ITUS = 5
    GATE_IN_WINDOW_MINUTES = 5 * 60
    UNLOAD_MINUTES = 10
    GATE_OUT_MINUTES = 30


@dataclass
class _ITUState:
    itu: str
    order: str
    origin: str
    legs: Tuple[Leg, ...]
    gate_in_minute: float
    leg_index: int = 0
    ready_minute: float = 0.0

    @property
    def leg(self) -> Leg:
        return self.legs[self.leg_index]


class ILSSimulation:
    """simpy model: gate-in processes, one train run per route and day, unload handling"""

    def __init__(self, params: ScenarioParams, network: Optional[NetworkFixture] = None):
        params.validate()
        self.params = params
        self.network = network or default_network(params.terminals)
        self.env = simpy.Environment()
        self.rng = np.random.default_rng(params.seed)
        self.yards = {t: simpy.Store(self.env) for t in self.network.terminals}
        self.aboard: Dict[str, List[_ITUState]] = {r.name: [] for r in self.network.routes}
        self.unloading: set = set()
        self.log = EventLog(params, self.network)
        self.itineraries = plan_itineraries(self.network)

    def _record(self, kind: str, unit: _ITUState, terminal: str, train: Optional[str] = None):
        self.log.events.append(SimEvent(
            event_id=f"ev{len(self.log.events):07d}",
            kind=kind,
            t=EPOCH + timedelta(minutes=self.env.now),
            terminal=terminal,
            itu=unit.itu,
            train=train,
            order=unit.order,
        ))

    def _generate_demand(self) -> List[_ITUState]:
        terminals = self.network.terminals
        for terminal in terminals:
            count = max(1, int(self.rng.poisson(SimulationParameters.CUSTOMERS_MEAN)))
            self.log.customers[terminal] = [f"cust_{terminal}_{k:02d}" for k in range(count)]

        units = []
        for day in range(self.params.days):
            for terminal in terminals:
                destinations = [t for t in terminals if t != terminal and (terminal, t) in self.itineraries]
                remaining = self.params.itus_per_terminal_day
                request_no = 0
                while remaining > 0 and destinations:
                    customer = self.log.customers[terminal][int(self.rng.integers(len(self.log.customers[terminal])))]
                    size = min(remaining, int(self.rng.integers(SimulationParameters.REQUEST_MIN_ITUS,
                                                                SimulationParameters.REQUEST_MAX_ITUS + 1)))
                    destination = destinations[int(self.rng.integers(len(destinations)))]
                    request = f"rfw_d{day + 1:02d}_{terminal}_{request_no:03d}"
                    request_no += 1
                    for _ in range(size):
                        serial = self.params.itus_per_terminal_day - remaining
                        itu = f"itu_d{day + 1:02d}_{terminal}_{serial:03d}"
                        order = f"ord_d{day + 1:02d}_{terminal}_{serial:03d}"
                        minute = day * MINUTES_PER_DAY + float(
                            self.rng.uniform(0, SimulationParameters.GATE_IN_WINDOW_MINUTES))
                        legs = self.itineraries[(terminal, destination)]
                        units.append(_ITUState(itu, order, terminal, legs, minute))
                        self.log.itineraries[itu] = legs
                        self.log.orders.append(TransportOrderRecord(
                            order, request, customer, itu, terminal, destination,
                            EPOCH + timedelta(minutes=minute)))
                        remaining -= 1
        return units

    def _gate_in(self, unit: _ITUState):
        yield self.env.timeout(unit.gate_in_minute)
        self._record('GateIn', unit, unit.origin)
        unit.ready_minute = self.env.now
        yield self.yards[unit.origin].put(unit)

    def _delay(self) -> float:
        return max(0.0, float(self.rng.normal(0.0, SimulationParameters.DELAY_SD_MINUTES)))

    def _train_run(self, route: RouteSpec, day: int):
        yield self.env.timeout(day * MINUTES_PER_DAY + route.stops[0].arrival)
        aboard = self.aboard[route.name]
        delay = 0.0
        for index, stop in enumerate(route.stops):
            if index > 0:
                # delays accumulate along the route
                delay += self._delay()
                scheduled = day * MINUTES_PER_DAY + stop.arrival + delay
                yield self.env.timeout(max(0.0, scheduled - self.env.now))
                for unit in [u for u in aboard if u.leg.alight == stop.terminal]:
                    self._record('Arrive', unit, stop.terminal, route.train)
                    aboard.remove(unit)
                    self.unloading.add(unit.itu)
                    self.env.process(self._unload(unit, stop.terminal, route.train))
            if index == len(route.stops) - 1:
                break

            yard = self.yards[stop.terminal]
            eligible = sorted(
                (u for u in yard.items if u.leg.route == route.name and u.leg.board == stop.terminal),
                key=lambda u: (u.ready_minute, u.itu)
            )
            boarding = eligible[:max(0, self.network.train_capacity - len(aboard))]
            for unit in boarding:
                yard.items.remove(unit)
                self._record('Load', unit, stop.terminal, route.train)
                aboard.append(unit)
            if len(eligible) > len(boarding):
                logger.debug(f"{route.train} full at {stop.terminal}: {len(eligible) - len(boarding)} ITUs wait")

            yield self.env.timeout(Timetable.DWELL_MINUTES)
            for unit in boarding:
                self._record('Depart', unit, stop.terminal, route.train)

    def _unload(self, unit: _ITUState, terminal: str, train: str):
        yield self.env.timeout(SimulationParameters.UNLOAD_MINUTES)
        self._record('Unload', unit, terminal, train)
        unit.leg_index += 1
        if unit.leg_index == len(unit.legs):
            yield self.env.timeout(SimulationParameters.GATE_OUT_MINUTES)
            self._record('GateOut', unit, terminal)
            self.unloading.discard(unit.itu)
        else:
            self.unloading.discard(unit.itu)
            unit.ready_minute = self.env.now
            yield self.yards[terminal].put(unit)

    def run(self) -> EventLog:
        units = self._generate_demand()
        for unit in units:
            self.env.process(self._gate_in(unit))
        for day in range(self.params.days):
            for route in self.network.routes:
                self.env.process(self._train_run(route, day))
        self.env.run(until=self.params.days * MINUTES_PER_DAY)

        self.log.in_transit_at_horizon = (
            sum(len(y.items) for y in self.yards.values())
            + sum(len(a) for a in self.aboard.values())
            + len(self.unloading)
        )
        logger.info(f"Simulated {self.params.days} days: {len(units)} ITUs, {len(self.log.events)} events")
        return self.log


def generate_scenario(params: ScenarioParams, network: Optional[NetworkFixture] = None) -> EventLog:
    """
    Deterministic event log for the given parameters (equal seed, equal log).

    Raises:
        InvalidParams: parameters outside the supported ranges
    """
    return ILSSimulation(params, network).run()


# ==================== LOG CHECKS ====================

def check_event_log(log: EventLog) -> List[str]:
    """Violations of the per-ITU GateIn, (Load Depart Arrive Unload)*, GateOut ordering"""
    problems = []
    sequences: Dict[str, List[SimEvent]] = {}
    for event in log.events:
        sequences.setdefault(event.itu, []).append(event)

    for itu, events in sequences.items():
        kinds = [e.kind for e in events]
        if kinds[0] != 'GateIn':
            problems.append(f"{itu}: first event is {kinds[0]}")
            continue
        legs = log.itineraries.get(itu, ())
        body = kinds[1:]
        if body and body[-1] == 'GateOut':
            body = body[:-1]
            if len(body) != 4 * len(legs):
                problems.append(f"{itu}: gated out after {len(body) // 4} of {len(legs)} legs")
        expected = [LEG_KINDS[i % 4] for i in range(len(body))]
        if body != expected:
            problems.append(f"{itu}: sequence {kinds}")
        if any(b.t <= a.t for a, b in zip(events, events[1:])):
            problems.append(f"{itu}: timestamps not strictly increasing")
        if 'GateOut' in kinds[:-1]:
            problems.append(f"{itu}: events after GateOut")
    return problems


def conservation(log: EventLog) -> Dict[str, int]:
    gated_in = sum(1 for e in log.events if e.kind == 'GateIn')
    gated_out = sum(1 for e in log.events if e.kind == 'GateOut')
    return {'gated_in': gated_in, 'gated_out': gated_out, 'in_transit': log.in_transit_at_horizon}


EVENT_LOG_COLUMNS = ['kind', 't', 'terminal', 'itu', 'train', 'order']


def write_event_log(log: EventLog, path: Union[str, Path]) -> int:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as handle:
        writer = csv.writer(handle)
        writer.writerow(EVENT_LOG_COLUMNS)
        for e in log.events:
            writer.writerow([e.kind, e.t.isoformat(timespec='microseconds'), e.terminal, e.itu, e.train or '', e.order])
    return len(log.events)


def read_event_log(path: Union[str, Path]) -> List[SimEvent]:
    events = []
    with open(path, newline='', encoding='utf-8') as handle:
        for index, row in enumerate(csv.DictReader(handle)):
            events.append(SimEvent(f"ev{index:07d}", row['kind'], isoparse(row["t"]),
                                   row['terminal'], row['itu'], row['train'] or None, row['order']))
    return events


# ==================== STORE FEEDING ====================

EVENT_CLASSES = {kind: f"{kind}Event" for kind in EVENT_KINDS}
EVENT_PROPERTIES = ('occursAt', 'involves', 'usesTrain', 'forOrder', 'hasTimestamp')

SIM_EVENT_TABLE = TableSpec(
    'sim_event',
    (
        ColumnSpec('event_id', 'id'),
        ColumnSpec('kind', 'text'),
        ColumnSpec('t', 'timestamp'),
        ColumnSpec('terminal', 'id'),
        ColumnSpec('itu', 'id'),
        ColumnSpec('train', 'id', nullable=True),
        ColumnSpec('order_id', 'id'),
    ),
    ('event_id',),
    timestamp_column='t',
)


def load_ils_ontology(path: Optional[Union[str, Path]] = None) -> Ontology:
    return load_ontology(path or config.fixture_path('ils.onto'))


def static_abox(log: EventLog) -> List:
    """Network, timetable and customers"""
    network = log.network
    assertions: List = []
    for terminal in network.terminals:
        assertions.append(ClassAssertion(terminal, 'Terminal'))
    for route in network.routes:
        assertions.append(ClassAssertion(route.name, 'Route'))
        assertions.append(ClassAssertion(route.train, 'Train'))
        assertions.append(ObjectAssertion(route.train, 'servesRoute', route.name))
        assertions.append(DataAssertion(route.train, 'carsPerTrain', str(network.cars_per_train)))
        for stop in route.stops:
            assertions.append(ClassAssertion(stop.id, 'ScheduledStop'))
            assertions.append(ObjectAssertion(route.name, 'hasStop', stop.id))
            assertions.append(ObjectAssertion(stop.id, 'stopsAt', stop.terminal))
            assertions.append(DataAssertion(stop.id, 'stopOffset', str(stop.arrival)))
    for terminal, customers in sorted(log.customers.items()):
        for customer in customers:
            assertions.append(ClassAssertion(customer, 'Customer'))
            assertions.append(ObjectAssertion(customer, 'locatedAt', terminal))
    return assertions


def order_abox(order: TransportOrderRecord) -> List:
    return [
        ClassAssertion(order.request, 'RequestForWork'),
        ObjectAssertion(order.customer, 'issues', order.request),
        ObjectAssertion(order.request, 'fulfilledBy', order.order),
        ClassAssertion(order.order, 'TransportOrder'),
        ClassAssertion(order.itu, 'ITU'),
        ObjectAssertion(order.order, 'concerns', order.itu),
        ObjectAssertion(order.order, 'hasOrigin', order.origin),
        ObjectAssertion(order.order, 'hasDestination', order.destination),
    ]


def event_abox(event: SimEvent) -> List:
    assertions = [
        ClassAssertion(event.event_id, EVENT_CLASSES[event.kind]),
        ObjectAssertion(event.event_id, 'occursAt', event.terminal),
        ObjectAssertion(event.event_id, 'involves', event.itu),
        ObjectAssertion(event.event_id, 'forOrder', event.order),
        DataAssertion(event.event_id, 'hasTimestamp', event.t.isoformat(timespec='microseconds')),
    ]
    if event.train:
        assertions.append(ObjectAssertion(event.event_id, 'usesTrain', event.train))
    return assertions


def event_log_to_abox(log: EventLog) -> List:
    """Every assertion the log implies, static part first"""
    assertions = static_abox(log)
    for order in log.orders:
        assertions.extend(order_abox(order))
    for event in log.events:
        assertions.extend(event_abox(event))
    return assertions


def prepare_store(log: EventLog, onto: Optional[Ontology] = None) -> Database:
    """Schema from the ILS ontology, the native event table and the static facts"""
    onto = onto or load_ils_ontology()
    schema, mapping = generate_schema(onto)
    store = Database()
    store.initialize(schema, mapping)
    store.create_table(SIM_EVENT_TABLE)
    store.ingest(static_abox(log))
    return store


def ingest_day(store: Database, log: EventLog, day: int) -> int:
    """Feed one simulated day into both the native table and the ontology tables"""
    events = log.events_of_day(day)
    rows = [(e.event_id, e.kind, e.t, e.terminal, e.itu, e.train, e.order) for e in events]
    inserted = store.insert_rows(SIM_EVENT_TABLE.name, rows)

    stamped: List[Tuple[object, datetime]] = []
    for order in log.orders_of_day(day):
        stamped.extend((a, order.gate_in) for a in order_abox(order))
    for event in events:
        stamped.extend((a, event.t) for a in event_abox(event))
    stamps = {}
    for assertion, ts in stamped:
        stamps.setdefault(assertion, ts)
    store.ingest([a for a, _ in stamped], ts=lambda a: stamps[a])
    return inserted


def event_tables(store: Database) -> frozenset:
    """Tables holding event facts: the scope of recency retention"""
    mapping = store.mapping
    tables = {mapping.class_map[c] for c in ('Event', *EVENT_CLASSES.values()) if c in mapping.class_map}
    for prop in EVENT_PROPERTIES:
        if prop in mapping.obj_prop_map:
            tables.add(mapping.obj_prop_map[prop][0])
        elif prop in mapping.data_prop_map:
            tables.add(mapping.data_prop_map[prop][0])
    tables.add(SIM_EVENT_TABLE.name)
    return frozenset(tables)


def iter_days(log: EventLog) -> Iterable[int]:
    return range(1, log.params.days + 1)
