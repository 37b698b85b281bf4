"""
Error hierarchy for the ontology toolkit
Every user-facing failure is an OntoSysError with a stable code and details
"""

from typing import Any, Dict, Optional


class OntoSysError(Exception):
    """Base class for user errors (bad input, bad syntax, violated contract)"""

    code = 'ONTOSYS_ERROR'

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.details = details or {}

    def to_dict(self) -> Dict[str, Any]:
        return {'error': self.code, 'message': self.message, 'details': self.details}


# ==================== PARSING ====================

class ParseError(OntoSysError):
    """Syntax error with a line/column position"""

    code = 'SYNTAX_ERROR'

    def __init__(self, message: str, line: int = 0, col: int = 0):
        super().__init__(f"{message} (line {line}, col {col})", {'line': line, 'col': col})
        self.line = line
        self.col = col


class OntologySyntaxError(ParseError):
    code = 'ONTOLOGY_SYNTAX_ERROR'


class QuerySyntaxError(ParseError):
    code = 'QUERY_SYNTAX_ERROR'


class RuleGraphSyntaxError(ParseError):
    code = 'RULE_GRAPH_SYNTAX_ERROR'


class UndeclaredName(OntoSysError):
    code = 'UNDECLARED_NAME'

    def __init__(self, name: str, expected: str = 'name'):
        super().__init__(f"Undeclared {expected}: {name}", {'name': name, 'expected': expected})
        self.name = name


class DuplicateDeclaration(OntoSysError):
    code = 'DUPLICATE_DECLARATION'

    def __init__(self, name: str):
        super().__init__(f"Name declared more than once: {name}", {'name': name})
        self.name = name


# ==================== REASONING / REWRITING ====================

class NonQLAxiomEncountered(OntoSysError):
    code = 'NON_QL_AXIOM'


class UnboundHeadVariable(OntoSysError):
    code = 'UNBOUND_HEAD_VARIABLE'

    def __init__(self, variable: str):
        super().__init__(f"Head variable ?{variable} does not occur in the query body",
                         {'variable': variable})
        self.variable = variable


class InstanceTooLarge(OntoSysError):
    code = 'INSTANCE_TOO_LARGE'


class InconsistentABox(OntoSysError):
    code = 'INCONSISTENT_ABOX'


# ==================== DATASTORE ====================

class UnmappedSymbol(OntoSysError):
    code = 'UNMAPPED_SYMBOL'

    def __init__(self, name: str):
        super().__init__(f"Symbol has no table in the mapping: {name}", {'name': name})
        self.name = name


class UnknownTable(OntoSysError):
    code = 'UNKNOWN_TABLE'


class UnknownColumn(OntoSysError):
    code = 'UNKNOWN_COLUMN'


class DialectViolation(OntoSysError):
    code = 'DIALECT_VIOLATION'


class MissingTimestampColumn(OntoSysError):
    code = 'MISSING_TIMESTAMP_COLUMN'


class ConcurrencyViolation(OntoSysError):
    code = 'CONCURRENCY_VIOLATION'


# ==================== CONDITION ANALYZER ====================

class OutOfOrderSample(OntoSysError):
    code = 'OUT_OF_ORDER_SAMPLE'


class CapExceeded(OntoSysError):
    code = 'CAP_EXCEEDED'

    def __init__(self, round_index: int, live: int, cap: int):
        super().__init__(
            f"Live individuals {live} exceeded cap {cap} at round {round_index}",
            {'round': round_index, 'live': live, 'cap': cap}
        )
        self.round = round_index
        self.live = live
        self.cap = cap


# ==================== LOGISTICS / BENCHMARK ====================

class InvalidParams(OntoSysError):
    code = 'INVALID_PARAMS'


class UnknownKPI(OntoSysError):
    code = 'UNKNOWN_KPI'


class DegenerateSeries(OntoSysError):
    code = 'DEGENERATE_SERIES'


# ==================== DDSS ====================

class TypeMismatch(OntoSysError):
    code = 'TYPE_MISMATCH'


class CycleDetected(OntoSysError):
    code = 'CYCLE_DETECTED'


class UnboundSource(OntoSysError):
    code = 'UNBOUND_SOURCE'


class UnboundSink(OntoSysError):
    code = 'UNBOUND_SINK'


class MissingDynamicPart(OntoSysError):
    code = 'MISSING_DYNAMIC_PART'


class UnboundEventClass(OntoSysError):
    code = 'UNBOUND_EVENT_CLASS'


class UnknownEventClass(OntoSysError):
    code = 'UNKNOWN_EVENT_CLASS'


class UnknownDataSource(OntoSysError):
    code = 'UNKNOWN_DATA_SOURCE'


class NonMonotoneTimestamp(OntoSysError):
    code = 'NON_MONOTONE_TIMESTAMP'


class StageOrderViolation(OntoSysError):
    code = 'STAGE_ORDER_VIOLATION'
