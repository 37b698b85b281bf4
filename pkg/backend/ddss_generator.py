"""
DDSS Generator
Compiles a domain ontology and a rule graph into a diagnostic decision
support bundle (schema, event endpoints, engine) and runs it as a service
"""

import hashlib
import heapq
import itertools
import json
import logging
import math
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from dateutil.parser import isoparse

from database import ColumnSpec, Database, Mapping, RelationalSchema, TableSpec, emit_ddl, generate_schema
from errors import (
    InvalidParams, MissingDynamicPart, NonMonotoneTimestamp, UnboundEventClass, UnboundSink,
    UnboundSource, UnknownDataSource, UnknownEventClass,
)
from logging_config import log_diagnostic
from ontology import ClassAssertion, DataAssertion, Named, ObjectAssertion, Ontology, load_ontology, print_ontology
from ql_reasoner import closure, instances_of, validate_ql_profile
from rule_graph import DataflowGraph, Emission, RuleEngine, parse_rule_graph

logger = logging.getLogger(__name__)

# classes and properties of the dynamic part a DDSS is generated from
DYNAMIC_CLASSES = ('DDSS', 'DataSource', 'DiagnosticIndicator', 'IncomingEvent', 'OutgoingEvent')
DYNAMIC_PROPERTIES = ('receives', 'sends', 'relatesTo', 'reports')

DDSS_INDIVIDUAL = 'ddss'
MANIFEST_NAME = 'manifest.json'
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class Endpoint:
    path: str
    direction: str
    event_class: str

    def to_dict(self) -> Dict[str, str]:
        return {'path': self.path, 'direction': self.direction, 'event_class': self.event_class}


@dataclass(frozen=True)
class DDSSBundle:
    ontology: Ontology
    graph: DataflowGraph
    schema: RelationalSchema
    mapping: Mapping
    endpoints: Tuple[Endpoint, ...]
    data_sources: Tuple[str, ...]
    indicators: Dict[str, str] = field(default_factory=dict)

    def endpoint_classes(self, direction: str) -> List[str]:
        return [e.event_class for e in self.endpoints if e.direction == direction]

    def manifest(self) -> Dict[str, Any]:
        return {
            'version': MANIFEST_VERSION,
            'schema_ddl': emit_ddl(self.schema),
            'endpoints': [e.to_dict() for e in self.endpoints],
            'data_sources': list(self.data_sources),
            'indicators': dict(sorted(self.indicators.items())),
            'graph_digest': self.graph.digest(),
        }

    def digest(self) -> str:
        canonical = json.dumps(self.manifest(), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


@dataclass(frozen=True)
class EventRecord:
    direction: str
    event_class: str
    t: datetime
    source: str
    payload: Any
    indicator: Optional[str] = None
    event_id: str = ''
    degraded: bool = False

    def to_dict(self) -> Dict[str, Any]:
        data = {
            'id': self.event_id,
            'direction': self.direction,
            'class': self.event_class,
            't': self.t.isoformat(timespec='microseconds'),
            'source': self.source,
            'value': self.payload if not isinstance(self.payload, float) or math.isfinite(self.payload) else None,
        }
        if self.direction == 'out':
            data['indicator'] = self.indicator
            data['degraded'] = self.degraded
        return data


# ==================== GENERATION ====================

def leaf_subclasses(o: Ontology, cls: str) -> List[str]:
    """Named subclasses of cls without named strict subclasses (cls itself when it has none)"""
    tax = closure(o)

    def below(name: str) -> set:
        return {e.name for e in tax.subsumees(Named(name)) if isinstance(e, Named)} - {name}

    subclasses = below(cls)
    if not subclasses:
        return [cls]
    return sorted(c for c in subclasses if not below(c))


def _check_dynamic_part(o: Ontology):
    missing = [c for c in DYNAMIC_CLASSES if c not in o.classes]
    missing += [p for p in DYNAMIC_PROPERTIES if p not in o.object_properties]
    if missing:
        raise MissingDynamicPart(f"Ontology lacks the DDSS dynamic part: {', '.join(missing)}",
                                 {'missing': missing})


def generate_ddss(o: Ontology, g: DataflowGraph) -> DDSSBundle:
    """
    Build the bundle: schema and mapping from o, one in-endpoint per
    IncomingEvent leaf class and one out-endpoint per OutgoingEvent leaf class.

    Raises:
        MissingDynamicPart: o has no DDSS/event pattern
        UnboundEventClass: a Sink names a class that is not an OutgoingEvent leaf of o
    """
    _check_dynamic_part(o)
    report = validate_ql_profile(o)
    if not report.conformant:
        raise InvalidParams("DDSS ontologies must be OWL 2 QL conformant", {'violations': report.codes()})

    incoming = leaf_subclasses(o, 'IncomingEvent')
    outgoing = leaf_subclasses(o, 'OutgoingEvent')
    data_sources = tuple(sorted(instances_of(o, 'DataSource')))
    known_indicators = instances_of(o, 'DiagnosticIndicator')

    for sink in g.sinks:
        event_class = sink.param('event')
        if event_class not in outgoing:
            raise UnboundEventClass(f"Sink {sink.id} emits {event_class}, which is not an outgoing event class of the ontology",
                                    {'actor': sink.id, 'class': event_class})
        indicator = sink.param('indicator')
        if indicator not in known_indicators:
            raise UnboundSink(f"Sink {sink.id} must report a declared DiagnosticIndicator", {'actor': sink.id})
    for source in g.sources:
        if source.param('source') not in data_sources:
            raise UnboundSource(f"Source {source.id} binds {source.param('source')}, which is not a DataSource",
                                {'actor': source.id})
        if source.param('event') and source.param('event') not in incoming:
            raise UnboundEventClass(f"Source {source.id} listens to unknown class {source.param('event')}",
                                    {'actor': source.id})

    schema, mapping = generate_schema(o)
    endpoints = tuple(
        [Endpoint(f"/events/{c}", 'in', c) for c in incoming]
        + [Endpoint(f"/diagnostics/{c}", 'out', c) for c in outgoing]
    )
    indicators = {s.id: s.param('indicator') for s in g.sinks}
    bundle = DDSSBundle(o, g, schema, mapping, endpoints, data_sources, indicators)
    logger.info(f"Generated DDSS bundle {bundle.digest()[:12]} with {len(endpoints)} endpoints")
    return bundle


def check_endpoint_completeness(bundle: DDSSBundle) -> List[str]:
    """Problems with the endpoint/event-class correspondence (empty when complete)"""
    problems = []
    for direction, root in (('in', 'IncomingEvent'), ('out', 'OutgoingEvent')):
        expected = leaf_subclasses(bundle.ontology, root)
        actual = bundle.endpoint_classes(direction)
        if sorted(actual) != expected or len(set(actual)) != len(actual):
            problems.append(f"{direction}-endpoints {sorted(actual)} differ from {root} leaves {expected}")
    for sink in bundle.graph.sinks:
        if sink.param('event') not in bundle.endpoint_classes('out'):
            problems.append(f"sink {sink.id} has no out-endpoint")
    return problems


# ==================== BUNDLE FILES ====================

def write_bundle(bundle: DDSSBundle, out_dir: Union[str, Path]) -> Path:
    """manifest.json, schema.sql, ontology.onto and graph.rules under out_dir"""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = dict(bundle.manifest(), bundle_digest=bundle.digest())
    (out / 'schema.sql').write_text(emit_ddl(bundle.schema), encoding='utf-8')
    (out / 'ontology.onto').write_text(print_ontology(bundle.ontology), encoding='utf-8')
    (out / 'graph.rules').write_text(bundle.graph.render(), encoding='utf-8')
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + '\n', encoding='utf-8')
    logger.info(f"Bundle written to {out}")
    return out / MANIFEST_NAME


def load_bundle(bundle_dir: Union[str, Path]) -> DDSSBundle:
    """Regenerate a bundle from its directory and verify the recorded digest"""
    root = Path(bundle_dir)
    try:
        manifest = json.loads((root / MANIFEST_NAME).read_text(encoding='utf-8'))
    except FileNotFoundError:
        raise InvalidParams(f"No {MANIFEST_NAME} in {root}", {'path': str(root)})
    onto = load_ontology(root / 'ontology.onto')
    graph = parse_rule_graph((root / 'graph.rules').read_text(encoding='utf-8'))
    bundle = generate_ddss(onto, graph)
    if bundle.digest() != manifest.get('bundle_digest'):
        raise InvalidParams("Bundle digest does not match its manifest", {'path': str(root)})
    return bundle


# ==================== RUNTIME ====================

EVENT_TABLE = TableSpec(
    'ddss_event',
    (
        ColumnSpec('event_id', 'id'),
        ColumnSpec('direction', 'text'),
        ColumnSpec('class', 'text'),
        ColumnSpec('t', 'timestamp'),
        ColumnSpec('source', 'id'),
        ColumnSpec('value', 'text', nullable=True),
        ColumnSpec('indicator', 'id', nullable=True),
        ColumnSpec('degraded', 'integer'),
    ),
    ('event_id',),
    timestamp_column='t',
)


def _parse_time(raw: Any) -> datetime:
    if isinstance(raw, datetime):
        t = raw
    else:
        try:
            t = isoparse(str(raw))
        except (ValueError, TypeError):
            raise InvalidParams(f"Unreadable timestamp {raw!r}", {'t': raw})
    # stored and compared as naive UTC
    if t.tzinfo is not None:
        t = t.astimezone(timezone.utc).replace(tzinfo=None)
    return t


def _stored_value(raw: Optional[str]) -> Any:
    """Payloads are persisted as text; numbers come back as floats"""
    if raw is None:
        return None
    try:
        return float(raw)
    except ValueError:
        return raw


class DiagnosticService:
    """
    Generated DDSS at runtime: store, ordered input queue and rule engine.

    Ingestion may be called from several threads; the queue is merged by
    timestamp and stepping is single threaded.
    """

    def __init__(self, bundle: DDSSBundle, db_path: str = ':memory:'):
        self.bundle = bundle
        self.store = Database(db_path)
        self.store.initialize(bundle.schema, bundle.mapping)
        self.store.create_table(EVENT_TABLE)
        # static part of the ontology is written once, at generation
        self.store.ingest(bundle.ontology.abox)
        self.store.ingest([ClassAssertion(DDSS_INDIVIDUAL, 'DDSS')])
        self.engine = RuleEngine(bundle.graph, bundle.indicators)
        self._lock = threading.Lock()
        self._queue: List[Tuple[datetime, int, EventRecord]] = []
        self._sequence = itertools.count()
        self._last_t: Dict[str, datetime] = {}

    def _next_id(self, prefix: str) -> str:
        return f"{prefix}{next(self._sequence):08d}"

    def _persist(self, record: EventRecord):
        value = None if record.payload is None else str(record.payload)
        self.store.insert_rows(EVENT_TABLE.name, [(
            record.event_id, record.direction, record.event_class, record.t, record.source,
            value, record.indicator, int(record.degraded),
        )])
        assertions = [
            ClassAssertion(record.event_id, record.event_class),
            DataAssertion(record.event_id, 'hasTimestamp', record.t.isoformat(timespec='microseconds')),
        ]
        if value is not None and 'hasValue' in self.bundle.ontology.data_properties:
            assertions.append(DataAssertion(record.event_id, 'hasValue', value))
        if record.direction == 'in':
            assertions += [
                ObjectAssertion(record.source, 'generates', record.event_id),
                ObjectAssertion(DDSS_INDIVIDUAL, 'receives', record.event_id),
            ]
        else:
            assertions += [
                ObjectAssertion(record.event_id, 'relatesTo', record.source),
                ObjectAssertion(record.event_id, 'reports', record.indicator),
                ObjectAssertion(DDSS_INDIVIDUAL, 'sends', record.event_id),
            ]
            if record.degraded and 'isDegraded' in self.bundle.ontology.data_properties:
                assertions.append(DataAssertion(record.event_id, 'isDegraded', 'true'))
        self.store.ingest([a for a in assertions if self._mapped(a)], ts=record.t)

    def _mapped(self, assertion) -> bool:
        mapping = self.bundle.mapping
        if isinstance(assertion, ClassAssertion):
            return assertion.cls in mapping.class_map
        if isinstance(assertion, ObjectAssertion):
            return assertion.prop in mapping.obj_prop_map
        return assertion.prop in mapping.data_prop_map

    def ingest_event(self, raw: Dict[str, Any], event_class: Optional[str] = None) -> EventRecord:
        """
        Accept one wire event {class, t, source, value}.

        Raises:
            UnknownEventClass: class is not an incoming event class of the bundle
            UnknownDataSource: source is not a declared DataSource
            NonMonotoneTimestamp: t precedes the source's previous event
        """
        if not isinstance(raw, dict):
            raise InvalidParams("Event must be a JSON object")
        event_class = event_class or raw.get('class')
        if event_class not in self.bundle.endpoint_classes('in'):
            raise UnknownEventClass(f"{event_class} is not an incoming event class", {'class': event_class})
        source = raw.get('source')
        if source not in self.bundle.data_sources:
            raise UnknownDataSource(f"{source} is not a declared data source", {'source': source})
        t = _parse_time(raw.get('t'))

        with self._lock:
            previous = self._last_t.get(source)
            if previous is not None and t < previous:
                raise NonMonotoneTimestamp(f"{source} went back in time: {t} < {previous}",
                                           {'source': source, 't': t.isoformat(), 'previous': previous.isoformat()})
            record = EventRecord('in', event_class, t, source, raw.get('value'), event_id=self._next_id('in'))
            self._persist(record)
            self._last_t[source] = t
            heapq.heappush(self._queue, (t, next(self._sequence), record))
        return record

    def step_engine(self) -> List[EventRecord]:
        """Drain the queue in timestamp order; returns the outgoing records produced"""
        produced: List[EventRecord] = []
        with self._lock:
            while self._queue:
                _, _, record = heapq.heappop(self._queue)
                for emission in self.engine.feed(record.t, record.source, record.payload, record.event_class):
                    produced.append(self._publish(emission))
        if produced:
            logger.debug(f"Engine emitted {len(produced)} diagnostic events")
        return produced

    def _publish(self, emission: Emission) -> EventRecord:
        record = EventRecord('out', emission.event_class, emission.t, emission.source, emission.value,
                             indicator=emission.indicator, event_id=self._next_id('out'),
                             degraded=emission.degraded)
        self._persist(record)
        log_diagnostic(logger, record)
        return record

    def diagnostics(self, event_class: str, since: Optional[Any] = None) -> List[EventRecord]:
        """Published events of one class read back from the store, oldest first; since is exclusive"""
        if event_class not in self.bundle.endpoint_classes('out'):
            raise UnknownEventClass(f"{event_class} is not an outgoing event class", {'class': event_class})
        sql = (f"SELECT event_id, class, t, source, value, indicator, degraded FROM {EVENT_TABLE.name} "
               "WHERE direction = 'out' AND class = ?")
        params: List[Any] = [event_class]
        if since is not None:
            sql += " AND t > ?"
            params.append(_parse_time(since).isoformat(timespec='microseconds'))
        sql += " ORDER BY t, event_id"
        with self._lock:
            rows = self.store.query(sql, params)
        return [
            EventRecord('out', cls, _parse_time(t), source, _stored_value(value),
                        indicator=indicator, event_id=event_id, degraded=bool(degraded))
            for event_id, cls, t, source, value, indicator, degraded in rows
        ]

    def event_count(self, direction: str) -> int:
        with self._lock:
            (count,), = self.store.query(f"SELECT COUNT(*) FROM {EVENT_TABLE.name} WHERE direction = ?",
                                         (direction,))
        return count

    def close(self):
        self.store.close()


def ingest_event(service: DiagnosticService, raw: Dict[str, Any]) -> EventRecord:
    return service.ingest_event(raw)


def step_engine(service: DiagnosticService) -> List[EventRecord]:
    return service.step_engine()


def check_outgoing(records: List[EventRecord]) -> List[str]:
    """Outgoing records missing relatesTo, reports or a timestamp"""
    problems = []
    for record in records:
        if not record.source:
            problems.append(f"{record.event_id}: no relatesTo source")
        if not record.indicator:
            problems.append(f"{record.event_id}: no reported indicator")
        if record.t is None:
            problems.append(f"{record.event_id}: no timestamp")
    return problems
