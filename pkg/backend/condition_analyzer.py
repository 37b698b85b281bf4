"""
Condition Analyzer
Streams process-variable samples, detects high-temperature patterns,
materializes observation/symptom/fault individuals and classifies them by
saturation under the E414 ontology, metering lazy vs eager fact lifecycles
"""

import csv
import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, FrozenSet, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

import config
from errors import CapExceeded, InconsistentABox, InvalidParams, OutOfOrderSample
from logging_config import log_performance
from ontology import (
    ClassAssertion, DataAssertion, DisjointClasses, Named, ObjectAssertion, Ontology, load_ontology,
)
from ql_reasoner import classes_of, closure

logger = logging.getLogger(__name__)


# ==================== SAMPLES AND DETECTION ====================

DETECTION_THRESHOLD = 70.0
PATTERN_LENGTH = 3


class SeverityRange(Enum):
    """Half-open temperature bands above the detection threshold"""
    R70to80 = '_70to80'
    R80to130 = '_80to130'
    R130plus = '_130degrees'

    @property
    def constant(self) -> str:
        return self.value

    @property
    def mission_critical(self) -> bool:
        return self is not SeverityRange.R70to80


def range_of(value: float) -> SeverityRange:
    if value >= 130.0:
        return SeverityRange.R130plus
    if value >= 80.0:
        return SeverityRange.R80to130
    return SeverityRange.R70to80


@dataclass(frozen=True)
class Sample:
    variable: int
    t: int
    value: float


@dataclass(frozen=True)
class ObservationEvent:
    variable: int
    t: int
    value: float
    range: SeverityRange
    kind: str  # 'opening' or 'transition'
    pattern_start: int


@dataclass
class ActivePattern:
    start_t: int
    current_range: SeverityRange


@dataclass
class VariableState:
    last_t: Optional[int] = None
    consecutive_above: int = 0
    consecutive_below: int = 0
    active_pattern: Optional[ActivePattern] = None


@dataclass
class DetectorState:
    variables: Dict[int, VariableState] = field(default_factory=dict)
    closed_patterns: int = 0

    def open_patterns(self) -> int:
        return sum(1 for v in self.variables.values() if v.active_pattern is not None)


def feed_sample(state: DetectorState, s: Sample) -> Optional[ObservationEvent]:
    """
    Advance one variable's detector. A pattern opens on the third
    consecutive sample above 70, emits a transition whenever the value moves
    into another severity range, and closes after three consecutive samples
    at or below 70.

    Samples of one variable arrive at 1 Hz: each t must be the previous t + 1.
    """
    vs = state.variables.setdefault(s.variable, VariableState())
    if vs.last_t is not None and s.t != vs.last_t + 1:
        raise OutOfOrderSample(
            f"Variable {s.variable}: sample t={s.t} does not follow t={vs.last_t}",
            {'variable': s.variable, 't': s.t, 'last_t': vs.last_t}
        )
    vs.last_t = s.t
    above = s.value > DETECTION_THRESHOLD

    if vs.active_pattern is None:
        vs.consecutive_above = vs.consecutive_above + 1 if above else 0
        if vs.consecutive_above < PATTERN_LENGTH:
            return None
        vs.consecutive_above = 0
        vs.consecutive_below = 0
        severity = range_of(s.value)
        vs.active_pattern = ActivePattern(s.t, severity)
        return ObservationEvent(s.variable, s.t, s.value, severity, 'opening', s.t)

    if not above:
        vs.consecutive_below += 1
        if vs.consecutive_below >= PATTERN_LENGTH:
            vs.active_pattern = None
            vs.consecutive_below = 0
            state.closed_patterns += 1
        return None

    vs.consecutive_below = 0
    severity = range_of(s.value)
    if severity is vs.active_pattern.current_range:
        return None
    vs.active_pattern.current_range = severity
    return ObservationEvent(s.variable, s.t, s.value, severity, 'transition', vs.active_pattern.start_t)


# ==================== MATERIALIZATION ====================

TEMPERATURE_VARIABLES = range(1, 25)
TRACTION_VARIABLES = range(1, 5)


@dataclass(frozen=True)
class ABoxDelta:
    individuals: Tuple[str, ...]
    assertions: Tuple
    observation: str
    symptom: str
    fault: str


def observation_data_id(variable: int) -> str:
    return f"od_v{variable:02d}"


def static_assertions(variables: Sequence[int]) -> List:
    """One ObservationData individual per monitored temperature variable"""
    assertions = []
    for variable in variables:
        cls = 'TractionObservationData' if variable in TRACTION_VARIABLES else 'ObservationData'
        assertions.append(ClassAssertion(observation_data_id(variable), cls))
    return assertions


def materialize(event: ObservationEvent) -> ABoxDelta:
    """
    Observation, Symptom and Fault individuals of generic type; refinement
    is left to classification.
    """
    suffix = f"v{event.variable:02d}_t{event.t}"
    obs, sym, flt = f"obs_{suffix}", f"sym_{suffix}", f"flt_{suffix}"
    obs_class = ('TractionHighTemperatureObservation' if event.variable in TRACTION_VARIABLES
                 else 'HighTemperatureObservation')
    assertions = (
        ClassAssertion(obs, obs_class),
        ObjectAssertion(obs, 'hasObservationData', observation_data_id(event.variable)),
        DataAssertion(obs, 'isAt', event.range.constant),
        ClassAssertion(sym, 'Symptom'),
        ObjectAssertion(sym, 'refersToObservation', obs),
        ClassAssertion(flt, 'Fault'),
        ObjectAssertion(flt, 'causedBySymptom', sym),
        ObjectAssertion(flt, 'hasSymptom', sym),
    )
    return ABoxDelta((obs, sym, flt), assertions, obs, sym, flt)


# ==================== CLASSIFICATION ====================

SEVERITY_CLASSES = {
    'mission': 'MissionRelatedSymptom',
    'maintenance': 'MaintenanceRelatedSymptom',
    'priority_fault': 'PriorityFault',
    'non_priority_fault': 'NonPriorityFault',
}


@dataclass(frozen=True)
class ClassificationEntry:
    individual: str
    role: str  # 'symptom' or 'fault'
    classes: FrozenSet[str]
    most_specific: Tuple[str, ...]

    @property
    def mission_critical(self) -> bool:
        return SEVERITY_CLASSES['mission'] in self.classes

    @property
    def maintenance_critical(self) -> bool:
        return SEVERITY_CLASSES['maintenance'] in self.classes


@dataclass(frozen=True)
class ClassificationResult:
    entries: Tuple[ClassificationEntry, ...] = ()

    def __len__(self) -> int:
        return len(self.entries)

    def of(self, individual: str) -> ClassificationEntry:
        for entry in self.entries:
            if entry.individual == individual:
                return entry
        raise KeyError(individual)


def _most_specific(classes: FrozenSet[str], onto: Ontology) -> Tuple[str, ...]:
    tax = closure(onto)
    specific = []
    for cls in classes:
        if not any(other != cls and tax.entails(Named(other), Named(cls)) for other in classes):
            specific.append(cls)
    return tuple(sorted(specific))


def classify(abox_delta: Union[ABoxDelta, Sequence], o: Ontology) -> ClassificationResult:
    """
    Saturate o extended with the delta and report the entailed classes of
    every Symptom and Fault individual the delta introduces.

    Raises:
        InconsistentABox: a DisjointClasses axiom is violated after saturation
    """
    assertions = abox_delta.assertions if isinstance(abox_delta, ABoxDelta) else tuple(abox_delta)
    if not assertions:
        return ClassificationResult()
    onto = o.extend(assertions)
    types = classes_of(onto)

    for axiom in onto.tbox:
        if isinstance(axiom, DisjointClasses):
            for individual, classes in types.items():
                if axiom.first in classes and axiom.second in classes:
                    raise InconsistentABox(
                        f"{individual} is both {axiom.first} and {axiom.second}",
                        {'individual': individual, 'classes': [axiom.first, axiom.second]}
                    )

    introduced = []
    for assertion in assertions:
        if isinstance(assertion, ClassAssertion) and assertion.individual not in introduced:
            introduced.append(assertion.individual)

    entries = []
    for individual in introduced:
        classes = frozenset(types.get(individual, ()))
        if 'Symptom' in classes:
            role = 'symptom'
        elif 'Fault' in classes:
            role = 'fault'
        else:
            continue
        entries.append(ClassificationEntry(individual, role, classes, _most_specific(classes, onto)))
    return ClassificationResult(tuple(entries))


# ==================== SCENARIOS ====================

@dataclass(frozen=True)
class FaultSpec:
    variable: int
    onset: int
    peak: float


@dataclass
class Scenario:
    name: str
    values: np.ndarray  # rounds x variables, column j is variable j + 1
    faults: Tuple[FaultSpec, ...] = ()

    @property
    def rounds(self) -> int:
        return self.values.shape[0]

    @property
    def variables(self) -> int:
        return self.values.shape[1]

    def samples(self, round_index: int) -> Iterator[Sample]:
        row = self.values[round_index]
        for column, value in enumerate(row):
            yield Sample(column + 1, round_index, float(value))


class FaultInjector:
    """Temperature excursions on distinct channels with staggered onsets"""

    BASELINE_MEAN = 55.0
    BASELINE_SD = 2.0
    BASELINE_CEILING = 65.0
    EXCURSION_START = 60.0
    RAMP_SECONDS = 30
    HOLD_SECONDS = 30
    FIRST_ONSET = 120
    MAX_SPACING = 180
    PEAKS = (140.0, 100.0, 76.0)
    PRESSURE_MEAN = 5.0
    PRESSURE_SD = 0.3

    @classmethod
    def excursion(cls, peak: float) -> np.ndarray:
        rise = np.linspace(cls.EXCURSION_START, peak, cls.RAMP_SECONDS)
        hold = np.full(cls.HOLD_SECONDS, peak)
        fall = np.linspace(peak, cls.EXCURSION_START, cls.RAMP_SECONDS)
        return np.concatenate([rise, hold, fall])

    @classmethod
    def span(cls) -> int:
        # excursion plus the samples needed to close the pattern
        return 2 * cls.RAMP_SECONDS + cls.HOLD_SECONDS + PATTERN_LENGTH


def generate_ca_scenario(faults: int, rounds: int = 3600, variables: int = 52,
                         seed: Optional[int] = None) -> Scenario:
    """
    Multi-variable 1 Hz stream: variables 1-24 are temperatures (1-4 the
    traction groups), 25-52 pressures. Each fault is a noise-free excursion
    on its own temperature channel; onsets are spaced so that no two faults
    are ever open at the same time.
    """
    temperature = [v for v in TEMPERATURE_VARIABLES if v <= variables]
    if faults < 0 or faults > len(temperature):
        raise InvalidParams(f"faults must be in [0, {len(temperature)}]", {'faults': faults})
    if rounds <= 0:
        raise InvalidParams("rounds must be positive", {'rounds': rounds})

    rng = np.random.default_rng(config.DEFAULT_SEED if seed is None else seed)
    values = np.empty((rounds, variables))
    for column in range(variables):
        if column + 1 in TEMPERATURE_VARIABLES:
            series = rng.normal(FaultInjector.BASELINE_MEAN, FaultInjector.BASELINE_SD, rounds)
            values[:, column] = np.minimum(series, FaultInjector.BASELINE_CEILING)
        else:
            values[:, column] = rng.normal(FaultInjector.PRESSURE_MEAN, FaultInjector.PRESSURE_SD, rounds)

    specs = []
    if faults:
        spacing = min(FaultInjector.MAX_SPACING, (rounds - FaultInjector.FIRST_ONSET) // faults)
        if spacing <= FaultInjector.span():
            raise InvalidParams(f"{rounds} rounds cannot hold {faults} separated faults",
                                {'rounds': rounds, 'faults': faults})
        for k in range(faults):
            spec = FaultSpec(temperature[k], FaultInjector.FIRST_ONSET + k * spacing,
                             FaultInjector.PEAKS[k % len(FaultInjector.PEAKS)])
            shape = FaultInjector.excursion(spec.peak)
            values[spec.onset:spec.onset + len(shape), spec.variable - 1] = shape
            specs.append(spec)

    return Scenario(f"{faults}-fault", values, tuple(specs))


def save_scenario(scn: Scenario, path: Union[str, Path]):
    """CSV of (round, variable, value)"""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as handle:
        writer = csv.writer(handle)
        writer.writerow(['round', 'variable', 'value'])
        for round_index in range(scn.rounds):
            for sample in scn.samples(round_index):
                writer.writerow([round_index, sample.variable, repr(sample.value)])


def load_scenario(path: Union[str, Path]) -> Scenario:
    rows: Dict[int, Dict[int, float]] = {}
    with open(path, newline='', encoding='utf-8') as handle:
        for record in csv.DictReader(handle):
            rows.setdefault(int(record['round']), {})[int(record['variable'])] = float(record['value'])
    if not rows:
        raise InvalidParams(f"Scenario file {path} has no samples")
    rounds = max(rows) + 1
    variables = max(max(r) for r in rows.values())
    values = np.zeros((rounds, variables))
    for round_index, samples in rows.items():
        for variable, value in samples.items():
            values[round_index, variable - 1] = value
    return Scenario(Path(path).stem, values)


# ==================== RUNNER ====================

@dataclass(frozen=True)
class PublicationEntry:
    round: int
    variable: int
    range: str
    symptom: str
    symptom_classes: Tuple[str, ...]
    fault: str
    fault_classes: Tuple[str, ...]


@dataclass
class ScenarioMetrics:
    strategy: str
    scenario: str
    rounds: int = 0
    observations: int = 0
    peak_live_individuals: int = 0
    per_round_time: List[float] = field(default_factory=list)
    detection_time: float = 0.0
    published: List[PublicationEntry] = field(default_factory=list)

    @property
    def total_time_ms(self) -> float:
        return sum(self.per_round_time) * 1000.0

    @property
    def amortized_time(self) -> Optional[float]:
        """Seconds per observation over rounds that detected something; None when nothing was detected"""
        if self.observations == 0:
            return None
        return self.detection_time / self.observations

    def row(self) -> Dict[str, str]:
        amortized = self.amortized_time
        return {
            'strategy': self.strategy,
            'scenario': self.scenario,
            'peak_live_individuals': str(self.peak_live_individuals),
            'total_time_ms': f"{self.total_time_ms:.3f}",
            'amortized_time_ms': 'ND' if amortized is None else f"{amortized * 1000.0:.3f}",
            'observations': str(self.observations),
            'rounds': str(self.rounds),
        }


METRICS_COLUMNS = ['strategy', 'scenario', 'peak_live_individuals', 'total_time_ms',
                   'amortized_time_ms', 'observations', 'rounds']


class ConditionAnalyzer:
    """
    Detect -> materialize -> classify -> publish, once per round.

    lazy keeps every materialized individual in the working ABox; eager
    removes an observation's individuals as soon as its classification has
    been published.
    """

    STRATEGIES = ('lazy', 'eager')

    def __init__(self, onto: Ontology, strategy: str = 'eager', cap: Optional[int] = None):
        if strategy not in self.STRATEGIES:
            raise InvalidParams(f"Unknown strategy {strategy!r}", {'strategies': list(self.STRATEGIES)})
        self.strategy = strategy
        self.cap = cap
        self.base = onto.extend(static_assertions(TEMPERATURE_VARIABLES))
        self.state = DetectorState()
        self.live: List[ABoxDelta] = []
        self.peak_live = 0
        self.published: List[PublicationEntry] = []

    def _working(self) -> Ontology:
        assertions = [a for delta in self.live for a in delta.assertions]
        return self.base.extend(assertions) if assertions else self.base

    def _live_count(self) -> int:
        return sum(len(delta.individuals) for delta in self.live)

    def process_round(self, round_index: int, samples: Sequence[Sample]) -> List[PublicationEntry]:
        events = [e for e in (feed_sample(self.state, s) for s in samples) if e is not None]
        if not events:
            return []

        deltas = [materialize(event) for event in events]
        prior = self._working()
        self.live.extend(deltas)
        live = self._live_count()
        self.peak_live = max(self.peak_live, live)
        if self.cap is not None and live > self.cap:
            raise CapExceeded(round_index, live, self.cap)

        result = classify([a for d in deltas for a in d.assertions], prior)

        entries = []
        for event, delta in zip(events, deltas):
            entries.append(PublicationEntry(
                round=round_index,
                variable=event.variable,
                range=event.range.constant,
                symptom=delta.symptom,
                symptom_classes=result.of(delta.symptom).most_specific,
                fault=delta.fault,
                fault_classes=result.of(delta.fault).most_specific,
            ))
        self.published.extend(entries)

        if self.strategy == 'eager':
            self.live = self.live[:-len(deltas)]
        return entries

    def run(self, scn: Scenario) -> ScenarioMetrics:
        metrics = ScenarioMetrics(self.strategy, scn.name, rounds=scn.rounds)
        started = time.perf_counter()
        for round_index in range(scn.rounds):
            round_start = time.perf_counter()
            try:
                entries = self.process_round(round_index, list(scn.samples(round_index)))
            except CapExceeded:
                logger.warning(f"⚠️ {self.strategy} run of {scn.name} hit the live-individual cap at round {round_index}")
                raise
            elapsed = time.perf_counter() - round_start
            metrics.per_round_time.append(elapsed)
            if entries:
                metrics.observations += len(entries)
                metrics.detection_time += elapsed
        metrics.peak_live_individuals = self.peak_live
        metrics.published = list(self.published)
        log_performance(logger, 'run_scenario', round((time.perf_counter() - started) * 1000, 3), {
            'strategy': self.strategy, 'scenario': scn.name,
            'observations': metrics.observations, 'peak': metrics.peak_live_individuals,
        })
        return metrics


def load_e414(path: Optional[Union[str, Path]] = None) -> Ontology:
    return load_ontology(path or config.fixture_path('e414.onto'))


def run_scenario(scn: Scenario, strategy: str, cap: Optional[int] = None,
                 onto: Optional[Ontology] = None) -> ScenarioMetrics:
    """
    Process every round of scn under the given fact-lifecycle strategy.

    Raises:
        CapExceeded: live individuals passed cap
    """
    return ConditionAnalyzer(onto or load_e414(), strategy, cap).run(scn)


def write_metrics_csv(rows: Sequence[Dict[str, str]], path: Union[str, Path]):
    """Table-style report: one row per (strategy, scenario)"""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as handle:
        writer = csv.DictWriter(handle, fieldnames=METRICS_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def out_of_memory_row(strategy: str, scenario: str) -> Dict[str, str]:
    return {column: 'OUT OF MEMORY' for column in METRICS_COLUMNS} | {'strategy': strategy, 'scenario': scenario}
