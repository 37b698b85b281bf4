"""
Rule Graph
Line-oriented dataflow actor diagrams (parse, validate, print) and the
deterministic engine that runs them over incoming readings
"""

import hashlib
import logging
import math
import operator
import re
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Deque, Dict, List, Optional, Tuple

import networkx as nx
import numpy as np

from errors import (
    CycleDetected, RuleGraphSyntaxError, StageOrderViolation, TypeMismatch,
    UnboundSink, UnboundSource,
)

logger = logging.getLogger(__name__)

SCALAR = 'scalar'
EVENT = 'event'
ANY = 'any'

# processing stages, in the order a reading must traverse them
DATA_MANIPULATION = 1
STATE_DETECTION = 2
HEALTH_ASSESSMENT = 3

COMPARATOR_OPS: Dict[str, Callable[[float, float], bool]] = {
    '>': operator.gt,
    '>=': operator.ge,
    '<': operator.lt,
    '<=': operator.le,
    '==': operator.eq,
    '!=': operator.ne,
}


@dataclass(frozen=True)
class ParamSpec:
    name: str
    type: type
    default: Any = None

    @property
    def required(self) -> bool:
        return self.default is None


@dataclass(frozen=True)
class ActorKind:
    name: str
    inputs: Dict[str, str]
    outputs: Dict[str, str]
    params: Tuple[ParamSpec, ...]
    stage: Optional[int] = None


ACTOR_KINDS: Dict[str, ActorKind] = {k.name: k for k in (
    ActorKind('Source', {}, {'out': SCALAR},
              (ParamSpec('source', str), ParamSpec('event', str, ''))),
    ActorKind('MovingAverage', {'in': SCALAR}, {'out': SCALAR},
              (ParamSpec('window', int, 5),), DATA_MANIPULATION),
    ActorKind('Threshold', {'in': SCALAR}, {'out': EVENT},
              (ParamSpec('level', float),), STATE_DETECTION),
    ActorKind('StateDetector', {'in': SCALAR}, {'out': EVENT},
              (ParamSpec('low', float), ParamSpec('high', float)), STATE_DETECTION),
    ActorKind('Comparator', {'a': SCALAR, 'b': SCALAR}, {'out': EVENT},
              (ParamSpec('op', str, '>'),), STATE_DETECTION),
    ActorKind('Debounce', {'in': EVENT}, {'out': EVENT},
              (ParamSpec('n', int, 3),), STATE_DETECTION),
    ActorKind('HealthScore', {'in': EVENT}, {'out': EVENT, 'score': SCALAR},
              (ParamSpec('window', int, 10), ParamSpec('fault_below', float, 0.5)), HEALTH_ASSESSMENT),
    ActorKind('Sink', {'in': ANY}, {},
              (ParamSpec('event', str), ParamSpec('indicator', str, ''))),
)}

_KIND_BY_LOWER = {name.lower(): name for name in ACTOR_KINDS}


# ==================== GRAPH TYPES ====================

@dataclass(frozen=True)
class Actor:
    id: str
    kind: str
    params: Tuple[Tuple[str, Any], ...] = ()

    def param(self, name: str) -> Any:
        return dict(self.params).get(name)

    @property
    def spec(self) -> ActorKind:
        return ACTOR_KINDS[self.kind]

    def render(self) -> str:
        args = ', '.join(f"{k}={_format_value(v)}" for k, v in self.params)
        return f"actor {self.id} {self.kind}({args})"


@dataclass(frozen=True)
class Edge:
    src: str
    src_port: str
    dst: str
    dst_port: str

    def render(self) -> str:
        return f"edge {self.src}.{self.src_port} -> {self.dst}.{self.dst_port}"


@dataclass(frozen=True)
class DataflowGraph:
    actors: Tuple[Actor, ...]
    edges: Tuple[Edge, ...]

    def actor(self, actor_id: str) -> Actor:
        return next(a for a in self.actors if a.id == actor_id)

    def of_kind(self, kind: str) -> List[Actor]:
        return [a for a in self.actors if a.kind == kind]

    @property
    def sources(self) -> List[Actor]:
        return self.of_kind('Source')

    @property
    def sinks(self) -> List[Actor]:
        return self.of_kind('Sink')

    def outgoing(self, actor_id: str, port: str) -> List[Edge]:
        return [e for e in self.edges if e.src == actor_id and e.src_port == port]

    def incoming(self, actor_id: str) -> List[Edge]:
        return [e for e in self.edges if e.dst == actor_id]

    def digraph(self) -> nx.DiGraph:
        g = nx.DiGraph()
        g.add_nodes_from(a.id for a in self.actors)
        g.add_edges_from((e.src, e.dst) for e in self.edges)
        return g

    def downstream_sinks(self, actor_id: str) -> List[Actor]:
        reachable = nx.descendants(self.digraph(), actor_id) | {actor_id}
        return [a for a in self.sinks if a.id in reachable]

    def render(self) -> str:
        return '\n'.join([a.render() for a in self.actors] + [e.render() for e in self.edges]) + '\n'

    def digest(self) -> str:
        return hashlib.sha256(self.render().encode('utf-8')).hexdigest()


def _format_value(value: Any) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


# ==================== PARSING ====================

_ACTOR_RE = re.compile(r'actor\s+([A-Za-z_][\w]*)\s+([A-Za-z_]\w*)\s*(?:\((.*)\))?\s*$')
_EDGE_RE = re.compile(r'edge\s+([A-Za-z_]\w*)\.(\w+)\s*->\s*([A-Za-z_]\w*)\.(\w+)\s*$')


def _coerce(spec: ParamSpec, raw: str, line: int, col: int) -> Any:
    raw = raw.strip().strip('"')
    try:
        if spec.type is int:
            return int(raw)
        if spec.type is float:
            return float(raw)
    except ValueError:
        raise RuleGraphSyntaxError(f"Parameter {spec.name} expects {spec.type.__name__}, got {raw!r}", line, col)
    return raw


def _parse_params(kind: ActorKind, text: str, line: int, col: int) -> Tuple[Tuple[str, Any], ...]:
    values: Dict[str, Any] = {}
    args = [a for a in (text or '').split(',') if a.strip()]
    for position, arg in enumerate(args):
        if '=' in arg:
            name, raw = (part.strip() for part in arg.split('=', 1))
            spec = next((p for p in kind.params if p.name == name), None)
            if spec is None:
                raise RuleGraphSyntaxError(f"{kind.name} has no parameter {name!r}", line, col)
        else:
            if position >= len(kind.params):
                raise RuleGraphSyntaxError(f"Too many arguments for {kind.name}", line, col)
            spec, raw = kind.params[position], arg
        if spec.name in values:
            raise RuleGraphSyntaxError(f"Parameter {spec.name} given twice", line, col)
        values[spec.name] = _coerce(spec, raw, line, col)

    for spec in kind.params:
        if spec.name in values:
            continue
        if not spec.required:
            values[spec.name] = spec.default
        elif kind.name not in ('Source', 'Sink'):
            # unbound Source/Sink bindings are reported by validation
            raise RuleGraphSyntaxError(f"{kind.name} needs parameter {spec.name}", line, col)
    _check_param_ranges(kind, values, line, col)
    return tuple((p.name, values[p.name]) for p in kind.params if p.name in values)


def _check_param_ranges(kind: ActorKind, values: Dict[str, Any], line: int, col: int):
    for name in ('window', 'n'):
        if name in values and values[name] < 1:
            raise RuleGraphSyntaxError(f"{kind.name}.{name} must be at least 1", line, col)
    if kind.name == 'StateDetector' and {'low', 'high'} <= values.keys() and values['low'] >= values['high']:
        raise RuleGraphSyntaxError("StateDetector needs low < high", line, col)
    if kind.name == 'Comparator' and values.get('op') not in COMPARATOR_OPS:
        raise RuleGraphSyntaxError(f"Comparator op must be one of {sorted(COMPARATOR_OPS)}", line, col)


def parse_rule_graph(text: str) -> DataflowGraph:
    """
    Parse and validate a rule graph.

    Grammar, one statement per line (`#` starts a comment):
        actor <id> <Kind>(<param>=<value>, ...)
        edge <actor>.<port> -> <actor>.<port>

    Raises:
        RuleGraphSyntaxError: malformed line, unknown kind or parameter
        TypeMismatch: edge between incompatible or unknown ports
        CycleDetected: the actor graph has a cycle
        UnboundSource / UnboundSink: missing bindings or unconnected inputs
        StageOrderViolation: a path runs the processing stages backwards
    """
    actors: List[Actor] = []
    edges: List[Edge] = []
    seen = set()

    for line_no, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split('#', 1)[0].strip()
        if not line:
            continue
        col = len(raw_line) - len(raw_line.lstrip()) + 1

        match = _ACTOR_RE.match(line)
        if match:
            actor_id, kind_name, args = match.groups()
            kind_key = _KIND_BY_LOWER.get(kind_name.lower())
            if kind_key is None:
                raise RuleGraphSyntaxError(f"Unknown actor kind {kind_name!r}", line_no, col)
            if actor_id in seen:
                raise RuleGraphSyntaxError(f"Actor {actor_id} declared twice", line_no, col)
            seen.add(actor_id)
            actors.append(Actor(actor_id, kind_key, _parse_params(ACTOR_KINDS[kind_key], args, line_no, col)))
            continue

        match = _EDGE_RE.match(line)
        if match:
            edges.append(Edge(*match.groups()))
            continue

        raise RuleGraphSyntaxError(f"Expected 'actor' or 'edge' statement: {line!r}", line_no, col)

    graph = DataflowGraph(tuple(actors), tuple(edges))
    validate_graph(graph)
    return graph


def load_rule_graph(path) -> DataflowGraph:
    with open(path, encoding='utf-8') as handle:
        return parse_rule_graph(handle.read())


# ==================== VALIDATION ====================

def _port_type(graph: DataflowGraph, actor_id: str, port: str, direction: str) -> str:
    ids = {a.id for a in graph.actors}
    if actor_id not in ids:
        raise TypeMismatch(f"Edge references undeclared actor {actor_id}", {'actor': actor_id})
    ports = graph.actor(actor_id).spec.outputs if direction == 'out' else graph.actor(actor_id).spec.inputs
    if port not in ports:
        raise TypeMismatch(f"{graph.actor(actor_id).kind} {actor_id} has no {direction}put port {port!r}",
                           {'actor': actor_id, 'port': port})
    return ports[port]


def validate_graph(graph: DataflowGraph):
    """Type-check ports, then acyclicity, bindings and stage order"""
    for edge in graph.edges:
        produced = _port_type(graph, edge.src, edge.src_port, 'out')
        accepted = _port_type(graph, edge.dst, edge.dst_port, 'in')
        if accepted != ANY and produced != accepted:
            raise TypeMismatch(f"{edge.render()}: {produced} output feeds {accepted} input",
                               {'edge': edge.render(), 'produced': produced, 'accepted': accepted})

    fan_in: Dict[Tuple[str, str], int] = {}
    for edge in graph.edges:
        fan_in[(edge.dst, edge.dst_port)] = fan_in.get((edge.dst, edge.dst_port), 0) + 1
    doubled = sorted(k for k, n in fan_in.items() if n > 1)
    if doubled:
        actor_id, port = doubled[0]
        raise TypeMismatch(f"Input {actor_id}.{port} has more than one incoming edge", {'actor': actor_id, 'port': port})

    digraph = graph.digraph()
    if not nx.is_directed_acyclic_graph(digraph):
        cycle = nx.find_cycle(digraph)
        raise CycleDetected("Rule graph has a cycle", {'cycle': [u for u, _ in cycle]})

    if not graph.sources:
        raise UnboundSource("Rule graph has no Source actor")
    for actor in graph.actors:
        if actor.kind == 'Source' and not actor.param('source'):
            raise UnboundSource(f"Source {actor.id} does not bind a data source", {'actor': actor.id})
        for port in actor.spec.inputs:
            if (actor.id, port) not in fan_in:
                raise UnboundSource(f"Input {actor.id}.{port} is not connected", {'actor': actor.id, 'port': port})

    if not graph.sinks:
        raise UnboundSink("Rule graph has no Sink actor")
    for sink in graph.sinks:
        if not sink.param('event'):
            raise UnboundSink(f"Sink {sink.id} does not bind an event class", {'actor': sink.id})

    _check_stage_order(graph, digraph)


def _check_stage_order(graph: DataflowGraph, digraph: nx.DiGraph):
    reached: Dict[str, int] = {}
    for actor_id in nx.topological_sort(digraph):
        stage = graph.actor(actor_id).spec.stage
        upstream = max((reached[p] for p in digraph.predecessors(actor_id)), default=0)
        if stage is not None and stage < upstream:
            raise StageOrderViolation(
                f"{graph.actor(actor_id).kind} {actor_id} runs after a later processing stage",
                {'actor': actor_id})
        reached[actor_id] = max(upstream, stage or 0)


# ==================== ENGINE ====================

@dataclass(frozen=True)
class Message:
    """A scalar value, or a state (active flag) with the value behind it"""
    t: Any
    value: float
    source: str
    active: Optional[bool] = None


@dataclass(frozen=True)
class Emission:
    sink: Optional[str]
    event_class: str
    indicator: str
    t: Any
    source: str
    value: float
    degraded: bool = False


@dataclass
class _ActorState:
    buffer: Deque = field(default_factory=deque)
    latest: Dict[str, Message] = field(default_factory=dict)
    count: int = 0
    active: bool = False


class RuleEngine:
    """
    Runs a validated graph one reading at a time. Actor state persists across
    readings, and emissions come out in graph order for a given reading.
    """

    DEGRADED_CLASS = 'DescriptorEvent'

    def __init__(self, graph: DataflowGraph, indicators: Optional[Dict[str, str]] = None):
        self.graph = graph
        self.indicators = indicators or {s.id: s.param('indicator') for s in graph.sinks}
        self.state: Dict[str, _ActorState] = {a.id: _ActorState() for a in graph.actors}

    def reset(self):
        self.state = {a.id: _ActorState() for a in self.graph.actors}

    def sources_for(self, source: str, event_class: str) -> List[Actor]:
        return [a for a in self.graph.sources
                if a.param('source') == source and a.param('event') in ('', None, event_class)]

    def feed(self, t: Any, source: str, value: Any, event_class: str = '') -> List[Emission]:
        actors = self.sources_for(source, event_class)
        if not actors:
            return []
        number = _as_number(value)
        if number is None or not math.isfinite(number):
            return [self._degraded(actors[0], t, source, number)]

        out: List[Emission] = []
        message = Message(t, number, source)
        for actor in actors:
            self._emit(actor.id, 'out', message, out)
        return out

    def _degraded(self, source_actor: Actor, t, source: str, value: Optional[float]) -> Emission:
        sinks = self.graph.downstream_sinks(source_actor.id) or self.graph.sinks
        logger.warning(f"Non-numeric reading from {source} at {t}; emitting degraded descriptor")
        return Emission(None, self.DEGRADED_CLASS, self.indicators.get(sinks[0].id, ''),
                        t, source, float('nan') if value is None else value, degraded=True)

    def _emit(self, actor_id: str, port: str, message: Message, out: List[Emission]):
        for edge in sorted(self.graph.outgoing(actor_id, port), key=lambda e: (e.dst, e.dst_port)):
            for out_port, produced in self._receive(self.graph.actor(edge.dst), edge.dst_port, message, out):
                self._emit(edge.dst, out_port, produced, out)

    def _receive(self, actor: Actor, port: str, msg: Message, out: List[Emission]) -> List[Tuple[str, Message]]:
        state = self.state[actor.id]
        kind = actor.kind

        if kind == 'MovingAverage':
            window = actor.param('window')
            state.buffer.append(msg.value)
            if len(state.buffer) > window:
                state.buffer.popleft()
            if len(state.buffer) < window:
                return []
            return [('out', Message(msg.t, float(np.mean(state.buffer)), msg.source))]

        if kind == 'Threshold':
            return [('out', Message(msg.t, msg.value, msg.source, msg.value > actor.param('level')))]

        if kind == 'StateDetector':
            outside = msg.value < actor.param('low') or msg.value > actor.param('high')
            return [('out', Message(msg.t, msg.value, msg.source, outside))]

        if kind == 'Comparator':
            state.latest[port] = msg
            if not {'a', 'b'} <= state.latest.keys():
                return []
            a, b = state.latest['a'], state.latest['b']
            holds = COMPARATOR_OPS[actor.param('op')](a.value, b.value)
            return [('out', Message(msg.t, a.value, a.source, holds))]

        if kind == 'Debounce':
            state.count = state.count + 1 if msg.active else 0
            return [('out', Message(msg.t, msg.value, msg.source, state.count >= actor.param('n')))]

        if kind == 'HealthScore':
            window = actor.param('window')
            state.buffer.append(1.0 if msg.active else 0.0)
            if len(state.buffer) > window:
                state.buffer.popleft()
            score = 1.0 - float(np.mean(state.buffer))
            return [('out', Message(msg.t, score, msg.source, score < actor.param('fault_below'))),
                    ('score', Message(msg.t, score, msg.source))]

        if kind == 'Sink':
            if msg.active is None:
                fire = True
            else:
                fire = msg.active and not state.active
                state.active = msg.active
            if fire:
                out.append(Emission(actor.id, actor.param('event'), self.indicators.get(actor.id, ''),
                                    msg.t, msg.source, msg.value))
            return []

        return []


def _as_number(value: Any) -> Optional[float]:
    if isinstance(value, bool):
        return None
    try:
        return float(value)
    except (TypeError, ValueError):
        return None
