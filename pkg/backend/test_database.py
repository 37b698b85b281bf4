"""Tests for schema generation, the SQLite store and recency retention"""

import threading
from datetime import datetime, timedelta

import pytest

from database import (
    ColumnSpec, Database, RetentionPolicy, SQLText, SQL_DIALECT, TableSpec,
    check_dialect, emit_ddl, generate_schema, open_store, sql_identifier,
)
from errors import (
    ConcurrencyViolation, DialectViolation, DuplicateDeclaration, InvalidParams,
    MissingTimestampColumn, UnknownColumn, UnknownTable, UnmappedSymbol,
)
from ontology import ClassAssertion, DataAssertion, ObjectAssertion, parse_ontology


def nested_loop_eval(abox, cls):
    """Reference evaluation of a one-class lookup over raw assertions"""
    return {(a.individual,) for a in abox if isinstance(a, ClassAssertion) and a.cls == cls}


# ==================== SCHEMA ====================

def test_schema_shape(ils_onto):
    schema, mapping = generate_schema(ils_onto)
    assert len(schema.tables) == len(ils_onto.classes) + len(ils_onto.properties)
    assert mapping.class_map['Terminal'] == 'terminal'
    assert mapping.obj_prop_map['concerns'] == ('concerns', 's', 'o')
    assert mapping.data_prop_map['hasTimestamp'] == ('hastimestamp', 's', 'v')
    terminal = schema.table('terminal')
    assert terminal.column_names == ('id', 'ts')
    assert terminal.primary_key == ('id',)
    assert terminal.timestamp_column == 'ts'


def test_schema_is_deterministic(ils_onto, fixtures_dir):
    first = emit_ddl(generate_schema(ils_onto)[0])
    again = emit_ddl(generate_schema(parse_ontology((fixtures_dir / 'ils.onto').read_text(encoding='utf-8')))[0])
    assert first == again
    assert first.count('CREATE TABLE') == len(generate_schema(ils_onto)[0].tables)


def test_table_name_collisions_are_suffixed():
    onto = parse_ontology("Class(Item)\nClass(item)\nObjectProperty(ITEM)\n")
    schema, mapping = generate_schema(onto)
    assert sorted(schema.table_names) == ['item', 'item_2', 'item_3']
    assert len(set(mapping.tables())) == 3


def test_reserved_identifiers_are_quoted():
    assert sql_identifier('terminal') == 'terminal'
    assert sql_identifier('order') == '"order"'
    assert sql_identifier('Mixed') == '"Mixed"'


def test_table_spec_validation():
    with pytest.raises(InvalidParams):
        TableSpec('t', (ColumnSpec('a', 'text'),), ('b',))
    with pytest.raises(InvalidParams):
        ColumnSpec('a', 'blob')


# ==================== STORE ====================

def test_ingest_and_read_back(tiny_onto):
    store = open_store(tiny_onto)
    try:
        assert sorted(store.read_abox()) == sorted(tiny_onto.abox)
        assert store.ingest(tiny_onto.abox) == 0
    finally:
        store.close()


def test_ingest_unmapped_symbol(tiny_onto):
    store = open_store(tiny_onto)
    try:
        with pytest.raises(UnmappedSymbol):
            store.ingest([ClassAssertion('x', 'Alarm')])
    finally:
        store.close()


def test_execute_matches_nested_loop(ils_onto, fixtures_dir):
    data = (fixtures_dir / 'ils_sample.data').read_text(encoding='utf-8')
    onto = parse_ontology((fixtures_dir / 'ils.onto').read_text(encoding='utf-8') + '\n' + data)
    store = open_store(onto)
    try:
        result = store.execute(SQLText(SQL_DIALECT, "SELECT DISTINCT t0.id FROM terminal t0", ('?x',)))
    finally:
        store.close()
    assert result.columns == ('?x',)
    assert set(result.rows) == nested_loop_eval(onto.abox, 'Terminal')


@pytest.mark.parametrize('text', [
    "SELECT DISTINCT id FROM fault; DROP TABLE fault",
    "SELECT id FROM fault",
    "SELECT DISTINCT id FROM fault ORDER BY id",
    "SELECT DISTINCT id FROM fault WHERE id = 'a' OR id = 'b'",
    "DELETE FROM fault",
])
def test_dialect_violations(text):
    with pytest.raises(DialectViolation):
        check_dialect(SQLText(SQL_DIALECT, text))


def test_dialect_allows_keywords_inside_literals():
    check_dialect(SQLText(SQL_DIALECT, "SELECT DISTINCT t0.id FROM fault t0 WHERE t0.id = 'drop or delete'"))


def test_unknown_dialect_rejected():
    with pytest.raises(DialectViolation):
        check_dialect(SQLText('postgres', "SELECT DISTINCT 1 FROM x"))


def test_unknown_table_and_column(tiny_onto):
    store = open_store(tiny_onto)
    try:
        with pytest.raises(UnknownTable):
            store.execute(SQLText(SQL_DIALECT, "SELECT DISTINCT t0.id FROM alarm t0"))
        with pytest.raises(UnknownColumn):
            store.execute(SQLText(SQL_DIALECT, "SELECT DISTINCT t0.nope FROM fault t0"))
    finally:
        store.close()


def test_native_table_create_is_idempotent():
    store = Database()
    spec = TableSpec('reading', (ColumnSpec('id', 'id'), ColumnSpec('t', 'timestamp')), ('id',), 't')
    try:
        store.create_table(spec)
        store.create_table(spec)
        other = TableSpec('reading', (ColumnSpec('id', 'id'),), ('id',))
        with pytest.raises(DuplicateDeclaration):
            store.create_table(other)
    finally:
        store.close()


# ==================== CONCURRENCY ====================

def test_second_writer_is_rejected(tiny_onto):
    store = open_store(tiny_onto)
    entered, release = threading.Event(), threading.Event()

    def slow_writer():
        with store._writing('slow'):
            entered.set()
            release.wait(5)

    worker = threading.Thread(target=slow_writer)
    worker.start()
    try:
        assert entered.wait(5)
        with pytest.raises(ConcurrencyViolation):
            store.ingest([ClassAssertion('f9', 'Fault')])
        with pytest.raises(ConcurrencyViolation):
            store.read_abox()
    finally:
        release.set()
        worker.join()
    try:
        assert store.ingest([ClassAssertion('f9', 'Fault')]) == 1
    finally:
        store.close()


def test_failed_write_rolls_back_and_releases_guard(tiny_onto):
    store = open_store(tiny_onto)
    try:
        with pytest.raises(RuntimeError):
            with store._writing('failing') as conn:
                conn.execute("INSERT INTO fault VALUES ('f9', NULL)")
                raise RuntimeError('boom')
        assert store.row_count('fault') == 1
        assert store.ingest([ClassAssertion('f9', 'Fault')]) == 1
    finally:
        store.close()


# ==================== RETENTION ====================

@pytest.fixture
def event_store():
    onto = parse_ontology(
        "Class(Event)\nClass(Terminal)\nObjectProperty(occursAt)\nDataProperty(hasTimestamp)\n"
    )
    store = open_store(onto)
    now = datetime(2024, 1, 10)
    for k, age in enumerate((5, 3, 1, 0.5)):
        ts = now - timedelta(days=age)
        store.ingest([
            ClassAssertion(f"e{k}", 'Event'),
            DataAssertion(f"e{k}", 'hasTimestamp', ts.isoformat()),
        ], ts=ts)
        # unstamped, so only the cascade can remove it
        store.ingest([ObjectAssertion(f"e{k}", 'occursAt', 'T1')])
    store.ingest([ClassAssertion('T1', 'Terminal')])
    yield store, now
    store.close()


def test_retention_cascades_to_properties(event_store):
    store, now = event_store
    policy = RetentionPolicy(timedelta(days=2), frozenset({'event', 'occursat', 'hastimestamp'}))
    deleted = store.apply_retention(policy, now)
    assert deleted == 6
    remaining = store.read_abox()
    assert {a.individual for a in remaining if isinstance(a, ClassAssertion) and a.cls == 'Event'} == {'e2', 'e3'}
    assert {a.subject for a in remaining if isinstance(a, ObjectAssertion)} == {'e2', 'e3'}
    assert ClassAssertion('T1', 'Terminal') in remaining


def test_retention_leaves_unscoped_tables(event_store):
    store, now = event_store
    store.apply_retention(RetentionPolicy(timedelta(days=2), frozenset({'event'})), now)
    assert store.row_count('event') == 2
    assert store.row_count('occursat') == 4
    assert store.row_count('hastimestamp') == 4


def test_retention_policy_validation(event_store):
    store, now = event_store
    with pytest.raises(InvalidParams):
        RetentionPolicy(timedelta(0), frozenset({'event'}))
    spec = TableSpec('plain', (ColumnSpec('id', 'id'),), ('id',))
    store.create_table(spec)
    with pytest.raises(MissingTimestampColumn):
        store.apply_retention(RetentionPolicy(timedelta(days=1), frozenset({'plain'})), now)


# ==================== CSV ====================

def test_csv_export_import(tmp_path, event_store):
    store, _ = event_store
    path = tmp_path / 'event.csv'
    assert store.export_csv('event', path) == 4

    onto = parse_ontology("Class(Event)\nClass(Terminal)\nObjectProperty(occursAt)\nDataProperty(hasTimestamp)\n")
    fresh = open_store(onto)
    try:
        assert fresh.import_csv('event', path) == 4
        assert fresh.row_count('event') == 4
    finally:
        fresh.close()


def test_csv_header_mismatch(tmp_path, tiny_onto):
    path = tmp_path / 'bad.csv'
    path.write_text("name,ts\nx,\n", encoding='utf-8')
    store = open_store(tiny_onto)
    try:
        with pytest.raises(UnknownColumn):
            store.import_csv('fault', path)
    finally:
        store.close()
