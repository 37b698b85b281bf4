"""
Database Module
Generates relational schemas from ontologies and handles SQLite storage of
assertions and events, dialect-checked query execution and recency retention
"""

import csv
import re
import sqlite3
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Callable, Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union
import logging

from dateutil.parser import isoparse

from errors import (
    ConcurrencyViolation, DialectViolation, DuplicateDeclaration, InvalidParams,
    MissingTimestampColumn, UnknownColumn, UnknownTable, UnmappedSymbol,
)
from ontology import ClassAssertion, DataAssertion, ObjectAssertion, Ontology

logger = logging.getLogger(__name__)

SQL_DIALECT = 'ontosys-min-1'

COLUMN_TYPES = {
    'id': 'TEXT',
    'text': 'TEXT',
    'real': 'REAL',
    'integer': 'INTEGER',
    'timestamp': 'TEXT',
}

Timestamp = Union[None, str, datetime]

_FORBIDDEN_WORDS = (
    'INSERT', 'UPDATE', 'DELETE', 'DROP', 'CREATE', 'ALTER', 'ATTACH', 'DETACH', 'PRAGMA',
    'REPLACE', 'VACUUM', 'JOIN', 'GROUP', 'ORDER', 'LIMIT', 'HAVING', 'LIKE', 'OR', 'NOT', 'IN',
)

_SQL_RESERVED = {word.lower() for word in _FORBIDDEN_WORDS} | {
    'select', 'from', 'where', 'union', 'distinct', 'and', 'by', 'table', 'index', 'values',
    'on', 'as', 'is', 'null', 'primary', 'key', 'references', 'check', 'default', 'offset',
    'case', 'when', 'then', 'else', 'end', 'all', 'exists', 'between', 'transaction', 'commit',
}


def sql_identifier(name: str) -> str:
    if re.fullmatch(r'[a-z_][a-z0-9_]*', name) and name not in _SQL_RESERVED:
        return name
    return '"' + name.replace('"', '""') + '"'


def sql_literal(value: str) -> str:
    return "'" + str(value).replace("'", "''") + "'"


# ==================== SCHEMA TYPES ====================

@dataclass(frozen=True)
class ColumnSpec:
    name: str
    type: str
    nullable: bool = False

    def __post_init__(self):
        if self.type not in COLUMN_TYPES:
            raise InvalidParams(f"Unknown column type {self.type!r}")


@dataclass(frozen=True)
class TableSpec:
    name: str
    columns: Tuple[ColumnSpec, ...]
    primary_key: Tuple[str, ...]
    timestamp_column: Optional[str] = None

    def __post_init__(self):
        names = [c.name for c in self.columns]
        missing = [k for k in self.primary_key if k not in names]
        if not self.primary_key or missing:
            raise InvalidParams(f"Table {self.name} needs a primary key over its own columns")
        if self.timestamp_column is not None and self.timestamp_column not in names:
            raise InvalidParams(f"Table {self.name} has no column {self.timestamp_column}")

    @property
    def column_names(self) -> Tuple[str, ...]:
        return tuple(c.name for c in self.columns)

    def ddl(self) -> str:
        lines = []
        for column in self.columns:
            null = '' if column.nullable else ' NOT NULL'
            lines.append(f"  {sql_identifier(column.name)} {COLUMN_TYPES[column.type]}{null}")
        lines.append(f"  PRIMARY KEY ({', '.join(sql_identifier(k) for k in self.primary_key)})")
        return f"CREATE TABLE {sql_identifier(self.name)} (\n" + ',\n'.join(lines) + "\n);"


@dataclass(frozen=True)
class RelationalSchema:
    tables: Tuple[TableSpec, ...] = ()

    def __post_init__(self):
        names = [t.name for t in self.tables]
        if len(set(names)) != len(names):
            raise InvalidParams("Table names must be unique")

    def table(self, name: str) -> TableSpec:
        for spec in self.tables:
            if spec.name == name:
                return spec
        raise UnknownTable(name)

    @property
    def table_names(self) -> List[str]:
        return [t.name for t in self.tables]


@dataclass(frozen=True)
class Mapping:
    class_map: Dict[str, str] = field(default_factory=dict)
    obj_prop_map: Dict[str, Tuple[str, str, str]] = field(default_factory=dict)
    data_prop_map: Dict[str, Tuple[str, str, str]] = field(default_factory=dict)

    def tables(self) -> List[str]:
        return (list(self.class_map.values())
                + [t[0] for t in self.obj_prop_map.values()]
                + [t[0] for t in self.data_prop_map.values()])


@dataclass(frozen=True)
class RetentionPolicy:
    window: timedelta
    scope: FrozenSet[str]

    def __post_init__(self):
        if self.window <= timedelta(0):
            raise InvalidParams("Retention window must be positive", {'window': str(self.window)})


@dataclass(frozen=True)
class SQLText:
    dialect: str
    text: str
    columns: Tuple[str, ...] = ()


@dataclass(frozen=True)
class ResultSet:
    columns: Tuple[str, ...]
    rows: FrozenSet[tuple]

    @property
    def arity(self) -> int:
        return len(self.columns)

    def __len__(self) -> int:
        return len(self.rows)

    def sorted_rows(self) -> List[tuple]:
        return sorted(self.rows, key=lambda row: tuple('' if v is None else str(v) for v in row))


# ==================== SCHEMA GENERATION ====================

def _claim(name: str, taken: set) -> str:
    candidate, suffix = name, 2
    while candidate in taken:
        candidate = f"{name}_{suffix}"
        suffix += 1
    taken.add(candidate)
    return candidate


def generate_schema(o: Ontology) -> Tuple[RelationalSchema, Mapping]:
    """
    One unary table per class (id) and one binary table per property
    (s, o for object properties; s, v for data properties). Every table
    also carries a nullable ingestion timestamp `ts`.
    """
    taken: set = set()
    tables: List[TableSpec] = []
    class_map: Dict[str, str] = {}
    obj_prop_map: Dict[str, Tuple[str, str, str]] = {}
    data_prop_map: Dict[str, Tuple[str, str, str]] = {}
    ts = ColumnSpec('ts', 'timestamp', nullable=True)

    for name in sorted(o.classes):
        table = _claim(name.lower(), taken)
        class_map[name] = table
        tables.append(TableSpec(table, (ColumnSpec('id', 'id'), ts), ('id',), 'ts'))

    for name in sorted(o.object_properties):
        table = _claim(name.lower(), taken)
        obj_prop_map[name] = (table, 's', 'o')
        tables.append(TableSpec(table, (ColumnSpec('s', 'id'), ColumnSpec('o', 'id'), ts), ('s', 'o'), 'ts'))

    for name in sorted(o.data_properties):
        table = _claim(name.lower(), taken)
        data_prop_map[name] = (table, 's', 'v')
        tables.append(TableSpec(table, (ColumnSpec('s', 'id'), ColumnSpec('v', 'text'), ts), ('s', 'v'), 'ts'))

    return RelationalSchema(tuple(tables)), Mapping(class_map, obj_prop_map, data_prop_map)


def emit_ddl(schema: RelationalSchema) -> str:
    """Standard CREATE TABLE text, one statement per table"""
    return '\n\n'.join(spec.ddl() for spec in schema.tables) + ('\n' if schema.tables else '')


# ==================== STORE ====================

def _ts_text(value: Timestamp) -> Optional[str]:
    if value is None:
        return None
    if isinstance(value, datetime):
        # fixed width keeps lexicographic order equal to time order
        return value.isoformat(timespec='microseconds')
    return isoparse(str(value)).isoformat(timespec='microseconds')


_QUOTED_RE = re.compile(r"'(?:[^']|'')*'|\"(?:[^\"]|\"\")*\"")
_FORBIDDEN_RE = re.compile(r';|--|/\*|\b(' + '|'.join(_FORBIDDEN_WORDS) + r')\b', re.IGNORECASE)
_BLOCK_RE = re.compile(r'\s*SELECT DISTINCT\s+.+?\s+FROM\s+.+', re.DOTALL)


def check_dialect(sql: SQLText):
    """Raise DialectViolation unless sql is a UNION of SELECT DISTINCT/FROM/WHERE blocks"""
    if sql.dialect != SQL_DIALECT:
        raise DialectViolation(f"Unsupported dialect {sql.dialect!r}")
    stripped = _QUOTED_RE.sub("''", sql.text)
    forbidden = _FORBIDDEN_RE.search(stripped)
    if forbidden:
        raise DialectViolation(f"Construct {forbidden.group()!r} is outside the query dialect")
    for block in re.split(r'\bUNION\b', stripped):
        if not _BLOCK_RE.fullmatch(block):
            raise DialectViolation("Every block must be SELECT DISTINCT ... FROM ...", {'block': block.strip()})


class Database:
    """
    SQLite-backed store for ontology-mapped assertions and native event tables.

    Single writer, many readers: ingest, retention and DDL take the write
    guard and a second concurrent writer raises ConcurrencyViolation; reads
    refuse to run while a write is in progress.
    """

    def __init__(self, db_path: str = ':memory:'):
        self.db_path = db_path
        self.schema = RelationalSchema()
        self.mapping = Mapping()
        self.native_tables: Dict[str, TableSpec] = {}
        self._write_guard = threading.Lock()
        self._conn = self._get_connection()

    def _get_connection(self):
        """Get database connection"""
        if self.db_path != ':memory:':
            Path(self.db_path).parent.mkdir(parents=True, exist_ok=True)
        return sqlite3.connect(self.db_path, check_same_thread=False)

    def close(self):
        self._conn.close()

    @contextmanager
    def _writing(self, operation: str):
        if not self._write_guard.acquire(blocking=False):
            raise ConcurrencyViolation(f"{operation} overlaps another write")
        try:
            yield self._conn
            self._conn.commit()
        except Exception:
            self._conn.rollback()
            raise
        finally:
            self._write_guard.release()

    def _assert_readable(self, operation: str):
        if self._write_guard.locked():
            raise ConcurrencyViolation(f"{operation} attempted during a write")

    # ---------- schema ----------

    def initialize(self, schema: RelationalSchema, mapping: Mapping):
        """Create the ontology-derived tables"""
        unknown = [t for t in mapping.tables() if t not in schema.table_names]
        if unknown:
            raise UnknownTable(unknown[0])
        with self._writing('initialize') as conn:
            for spec in schema.tables:
                conn.execute(spec.ddl())
        self.schema = schema
        self.mapping = mapping
        logger.info(f"Database initialized with {len(schema.tables)} ontology tables")

    def create_table(self, spec: TableSpec):
        """Create a native (non-ontology) table; re-creating an identical spec is a no-op"""
        existing = self.native_tables.get(spec.name)
        if existing == spec:
            return
        if existing is not None or spec.name in self.schema.table_names:
            raise DuplicateDeclaration(spec.name)
        with self._writing('create_table') as conn:
            conn.execute(spec.ddl())
        self.native_tables[spec.name] = spec

    def table_spec(self, name: str) -> TableSpec:
        if name in self.native_tables:
            return self.native_tables[name]
        return self.schema.table(name)

    def row_count(self, table: str) -> int:
        self.table_spec(table)
        self._assert_readable('row_count')
        return self._conn.execute(f"SELECT COUNT(*) FROM {sql_identifier(table)}").fetchone()[0]

    # ---------- writes ----------

    def _target(self, assertion) -> Tuple[str, Tuple[str, ...]]:
        if isinstance(assertion, ClassAssertion):
            if assertion.cls not in self.mapping.class_map:
                raise UnmappedSymbol(assertion.cls)
            return self.mapping.class_map[assertion.cls], (assertion.individual,)
        if isinstance(assertion, ObjectAssertion):
            if assertion.prop not in self.mapping.obj_prop_map:
                raise UnmappedSymbol(assertion.prop)
            return self.mapping.obj_prop_map[assertion.prop][0], (assertion.subject, assertion.target)
        if isinstance(assertion, DataAssertion):
            if assertion.prop not in self.mapping.data_prop_map:
                raise UnmappedSymbol(assertion.prop)
            return self.mapping.data_prop_map[assertion.prop][0], (assertion.subject, assertion.value)
        raise UnmappedSymbol(type(assertion).__name__)

    def ingest(self, assertions: Iterable, ts: Union[Timestamp, Callable[[object], Timestamp]] = None) -> int:
        """
        Store raw ABox assertions (set semantics).

        Args:
            assertions: ClassAssertion / ObjectAssertion / DataAssertion values
            ts: ingestion timestamp for every row, or a callable giving one per assertion

        Returns:
            Number of rows actually inserted
        """
        grouped: Dict[str, List[tuple]] = {}
        for assertion in assertions:
            table, values = self._target(assertion)
            stamp = ts(assertion) if callable(ts) else ts
            grouped.setdefault(table, []).append(values + (_ts_text(stamp),))

        with self._writing('ingest') as conn:
            before = conn.total_changes
            for table, rows in grouped.items():
                placeholders = ', '.join('?' * len(rows[0]))
                conn.executemany(f"INSERT OR IGNORE INTO {sql_identifier(table)} VALUES ({placeholders})", rows)
            inserted = conn.total_changes - before
        logger.debug(f"Ingested {inserted} rows into {len(grouped)} tables")
        return inserted

    def insert_rows(self, table: str, rows: Sequence[Sequence]) -> int:
        """Insert rows into a native table, ignoring primary-key duplicates"""
        spec = self.table_spec(table)
        if not rows:
            return 0
        placeholders = ', '.join('?' * len(spec.columns))
        with self._writing('insert_rows') as conn:
            before = conn.total_changes
            conn.executemany(
                f"INSERT OR IGNORE INTO {sql_identifier(table)} VALUES ({placeholders})",
                [tuple(_ts_text(v) if isinstance(v, datetime) else v for v in row) for row in rows]
            )
            return conn.total_changes - before

    def apply_retention(self, policy: RetentionPolicy, now: Timestamp) -> int:
        """
        Delete scoped rows stamped before now - window, then remove rows of
        scoped property tables whose subject or object was deleted.
        """
        now_dt = now if isinstance(now, datetime) else isoparse(str(now))
        cutoff = _ts_text(now_dt - policy.window)
        specs = []
        for name in sorted(policy.scope):
            spec = self.table_spec(name)
            if spec.timestamp_column is None:
                raise MissingTimestampColumn(name)
            specs.append(spec)

        deleted = 0
        with self._writing('apply_retention') as conn:
            conn.execute("CREATE TEMP TABLE IF NOT EXISTS expired_id (id TEXT PRIMARY KEY)")
            conn.execute("DELETE FROM expired_id")
            for spec in specs:
                table, stamp = sql_identifier(spec.name), sql_identifier(spec.timestamp_column)
                condition = f"{stamp} IS NOT NULL AND {stamp} < ?"
                if 'id' in spec.column_names:
                    conn.execute(f"INSERT OR IGNORE INTO expired_id SELECT id FROM {table} WHERE {condition}", (cutoff,))
                deleted += conn.execute(f"DELETE FROM {table} WHERE {condition}", (cutoff,)).rowcount
            for spec in specs:
                table = sql_identifier(spec.name)
                for column in ('s', 'o'):
                    if column in spec.column_names and spec.primary_key != ('id',):
                        cursor = conn.execute(f"DELETE FROM {table} WHERE {column} IN (SELECT id FROM expired_id)")
                        deleted += cursor.rowcount
            conn.execute("DELETE FROM expired_id")
        logger.info(f"Retention removed {deleted} rows older than {cutoff}")
        return deleted

    # ---------- reads ----------

    def execute(self, sql: SQLText) -> ResultSet:
        """Run dialect-checked SQL with set semantics"""
        check_dialect(sql)
        self._assert_readable('execute')
        try:
            cursor = self._conn.execute(sql.text)
            rows = frozenset(tuple(row) for row in cursor.fetchall())
        except sqlite3.OperationalError as e:
            message = str(e)
            if message.startswith('no such table:'):
                raise UnknownTable(message.split(':', 1)[1].strip())
            if message.startswith('no such column:'):
                raise UnknownColumn(message.split(':', 1)[1].strip())
            raise DialectViolation(message)
        columns = sql.columns or tuple(d[0] for d in cursor.description or ())
        return ResultSet(tuple(columns), rows)

    def query(self, sql: str, params: Sequence = ()) -> List[tuple]:
        """Native SQL (aggregates allowed) for the store's own reporting paths"""
        self._assert_readable('query')
        try:
            return [tuple(row) for row in self._conn.execute(sql, tuple(params)).fetchall()]
        except sqlite3.OperationalError as e:
            message = str(e)
            if message.startswith('no such table:'):
                raise UnknownTable(message.split(':', 1)[1].strip())
            if message.startswith('no such column:'):
                raise UnknownColumn(message.split(':', 1)[1].strip())
            raise

    def read_abox(self) -> List:
        """Reconstruct the stored assertions (raw facts only)"""
        self._assert_readable('read_abox')
        assertions: List = []
        for cls, table in sorted(self.mapping.class_map.items()):
            for (ident,) in self._conn.execute(f"SELECT id FROM {sql_identifier(table)} ORDER BY id"):
                assertions.append(ClassAssertion(ident, cls))
        for prop, (table, s_col, o_col) in sorted(self.mapping.obj_prop_map.items()):
            for s, o in self._conn.execute(f"SELECT {s_col}, {o_col} FROM {sql_identifier(table)} ORDER BY 1, 2"):
                assertions.append(ObjectAssertion(s, prop, o))
        for prop, (table, s_col, v_col) in sorted(self.mapping.data_prop_map.items()):
            for s, v in self._conn.execute(f"SELECT {s_col}, {v_col} FROM {sql_identifier(table)} ORDER BY 1, 2"):
                assertions.append(DataAssertion(s, prop, v))
        return assertions

    # ---------- CSV ----------

    def export_csv(self, table: str, path: Union[str, Path]) -> int:
        """Write a table with a header row; returns the number of data rows"""
        spec = self.table_spec(table)
        self._assert_readable('export_csv')
        order = ', '.join(str(i + 1) for i in range(len(spec.columns)))
        rows = self._conn.execute(f"SELECT * FROM {sql_identifier(table)} ORDER BY {order}").fetchall()
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', newline='', encoding='utf-8') as handle:
            writer = csv.writer(handle)
            writer.writerow(spec.column_names)
            writer.writerows(['' if v is None else v for v in row] for row in rows)
        return len(rows)

    def import_csv(self, table: str, path: Union[str, Path]) -> int:
        """Bulk-load a CSV with a header row matching the table's columns"""
        spec = self.table_spec(table)
        with open(path, newline='', encoding='utf-8') as handle:
            reader = csv.reader(handle)
            header = tuple(next(reader, ()))
            if header != spec.column_names:
                raise UnknownColumn(f"CSV header {header} does not match {spec.column_names}")
            rows = []
            for record in reader:
                row = []
                for column, value in zip(spec.columns, record):
                    if value == '' and column.nullable:
                        row.append(None)
                    elif column.type == 'real':
                        row.append(float(value))
                    elif column.type == 'integer':
                        row.append(int(value))
                    else:
                        row.append(value)
                rows.append(row)
        if table in self.native_tables:
            return self.insert_rows(table, rows)
        placeholders = ', '.join('?' * len(spec.columns))
        with self._writing('import_csv') as conn:
            before = conn.total_changes
            conn.executemany(f"INSERT OR IGNORE INTO {sql_identifier(table)} VALUES ({placeholders})", rows)
            return conn.total_changes - before


# ==================== OPERATION ENTRY POINTS ====================

def open_store(o: Ontology, db_path: str = ':memory:') -> Database:
    """Fresh store with o's schema installed and its ABox ingested"""
    schema, mapping = generate_schema(o)
    store = Database(db_path)
    store.initialize(schema, mapping)
    store.ingest(o.abox)
    return store


def ingest(store: Database, assertions: Iterable, ts=None) -> int:
    return store.ingest(assertions, ts)


def execute(store: Database, sql: SQLText) -> ResultSet:
    return store.execute(sql)


def apply_retention(store: Database, policy: RetentionPolicy, now: Timestamp) -> int:
    return store.apply_retention(policy, now)
