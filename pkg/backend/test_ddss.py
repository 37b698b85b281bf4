"""Tests for DDSS generation, bundle files, the runtime service and its web surface"""

import json
from datetime import datetime, timedelta

import pytest

from database import RetentionPolicy
from ddss_generator import (
    DiagnosticService, check_endpoint_completeness, check_outgoing, generate_ddss,
    leaf_subclasses, load_bundle, write_bundle,
)
from ddss_server import create_app
from errors import (
    InvalidParams, MissingDynamicPart, NonMonotoneTimestamp, UnboundEventClass, UnboundSink,
    UnboundSource, UnknownDataSource, UnknownEventClass,
)
from rule_graph import load_rule_graph, parse_rule_graph

START = datetime(2024, 3, 1, 8, 0, 0)


def at(seconds: int) -> str:
    return (START + timedelta(seconds=seconds)).isoformat()


@pytest.fixture(scope='module')
def threshold_graph(fixtures_dir):
    return load_rule_graph(fixtures_dir / 'hvac_threshold.rules')


@pytest.fixture(scope='module')
def bundle(hvac_onto, threshold_graph):
    return generate_ddss(hvac_onto, threshold_graph)


@pytest.fixture
def service(bundle):
    svc = DiagnosticService(bundle)
    yield svc
    svc.close()


def graph_with_sink(event='AlarmEvent', indicator='overheat_alarm', source='s1'):
    return parse_rule_graph(
        f"actor src Source(source={source})\nactor over Threshold(level=80)\n"
        f"actor out Sink(event={event}, indicator={indicator})\n"
        "edge src.out -> over.in\nedge over.out -> out.in\n"
    )


# ==================== GENERATION ====================

def test_bundle_endpoints(bundle):
    assert [(e.direction, e.path) for e in bundle.endpoints] == [
        ('in', '/events/IncomingEvent'),
        ('out', '/diagnostics/AlarmEvent'),
        ('out', '/diagnostics/DescriptorEvent'),
        ('out', '/diagnostics/FaultEvent'),
    ]
    assert bundle.data_sources == ('s1', 's2')
    assert bundle.indicators == {'alarm': 'overheat_alarm'}
    assert check_endpoint_completeness(bundle) == []


def test_leaf_subclasses(hvac_onto):
    assert leaf_subclasses(hvac_onto, 'OutgoingEvent') == ['AlarmEvent', 'DescriptorEvent', 'FaultEvent']
    assert leaf_subclasses(hvac_onto, 'IncomingEvent') == ['IncomingEvent']


def test_health_graph_generates(hvac_onto, fixtures_dir):
    health = generate_ddss(hvac_onto, load_rule_graph(fixtures_dir / 'hvac_health.rules'))
    assert health.indicators == {'fault': 'compressor_fault', 'trend': 'supply_air_descriptor'}
    assert check_endpoint_completeness(health) == []


def test_ontology_without_dynamic_part(tiny_onto, threshold_graph):
    with pytest.raises(MissingDynamicPart) as excinfo:
        generate_ddss(tiny_onto, threshold_graph)
    assert 'DDSS' in excinfo.value.details['missing']


@pytest.mark.parametrize('kwargs, error', [
    ({'event': 'AlarmEvnt'}, UnboundEventClass),
    ({'event': 'OutgoingEvent'}, UnboundEventClass),
    ({'event': 'IncomingEvent'}, UnboundEventClass),
    ({'indicator': 'nope'}, UnboundSink),
    ({'source': 's9'}, UnboundSource),
])
def test_graph_must_bind_to_ontology(hvac_onto, kwargs, error):
    with pytest.raises(error):
        generate_ddss(hvac_onto, graph_with_sink(**kwargs))


def test_digest_is_deterministic(hvac_onto, threshold_graph, bundle):
    assert generate_ddss(hvac_onto, threshold_graph).digest() == bundle.digest()
    other = generate_ddss(hvac_onto, graph_with_sink())
    assert other.digest() != bundle.digest()


def test_bundle_files_roundtrip(tmp_path, bundle):
    manifest_path = write_bundle(bundle, tmp_path / 'bundle')
    manifest = json.loads(manifest_path.read_text(encoding='utf-8'))
    assert manifest['bundle_digest'] == bundle.digest()
    assert (tmp_path / 'bundle' / 'schema.sql').read_text(encoding='utf-8').count('CREATE TABLE') == len(bundle.schema.tables)
    assert load_bundle(tmp_path / 'bundle').digest() == bundle.digest()

    manifest['bundle_digest'] = '0' * 64
    manifest_path.write_text(json.dumps(manifest), encoding='utf-8')
    with pytest.raises(InvalidParams):
        load_bundle(tmp_path / 'bundle')


def test_missing_bundle_directory(tmp_path):
    with pytest.raises(InvalidParams):
        load_bundle(tmp_path)


# ==================== RUNTIME ====================

def overheat_stream(runs: int, length: int = 1000):
    """Baseline readings with `runs` hot spells of 3 to 5 samples and some 2-sample bursts"""
    values = [60.0] * length
    for k in range(runs):
        start = 40 + k * 120
        for offset in range(3 + k % 3):
            values[start + offset] = 85.0 + offset
        values[start + 60] = values[start + 61] = 95.0
    return values


@pytest.mark.parametrize('runs', [0, 1, 7])
def test_alarm_per_sustained_overheat(service, runs):
    for k, value in enumerate(overheat_stream(runs)):
        service.ingest_event({'class': 'IncomingEvent', 't': at(k), 'source': 's1', 'value': value})
    emitted = service.step_engine()
    assert [r.event_class for r in emitted] == ['AlarmEvent'] * runs
    assert check_outgoing(emitted) == []
    assert all(r.source == 's1' and r.indicator == 'overheat_alarm' for r in emitted)
    assert service.event_count('in') == 1000
    assert service.event_count('out') == runs


def test_engine_steps_in_timestamp_order(service):
    service.ingest_event({'class': 'IncomingEvent', 't': at(3), 'source': 's1', 'value': 90})
    service.ingest_event({'class': 'IncomingEvent', 't': at(1), 'source': 's2', 'value': 10})
    service.ingest_event({'class': 'IncomingEvent', 't': at(4), 'source': 's1', 'value': 91})
    service.ingest_event({'class': 'IncomingEvent', 't': at(5), 'source': 's1', 'value': 92})
    (alarm,) = service.step_engine()
    assert alarm.t == START + timedelta(seconds=5)
    assert service.step_engine() == []


def test_ingest_rejections(service):
    with pytest.raises(UnknownEventClass):
        service.ingest_event({'class': 'AlarmEvent', 't': at(0), 'source': 's1', 'value': 1})
    with pytest.raises(UnknownDataSource):
        service.ingest_event({'class': 'IncomingEvent', 't': at(0), 'source': 's9', 'value': 1})
    with pytest.raises(InvalidParams):
        service.ingest_event({'class': 'IncomingEvent', 't': 'yesterday', 'source': 's1', 'value': 1})

    service.ingest_event({'class': 'IncomingEvent', 't': at(10), 'source': 's1', 'value': 1})
    service.ingest_event({'class': 'IncomingEvent', 't': at(10), 'source': 's1', 'value': 2})
    with pytest.raises(NonMonotoneTimestamp):
        service.ingest_event({'class': 'IncomingEvent', 't': at(5), 'source': 's1', 'value': 3})
    service.ingest_event({'class': 'IncomingEvent', 't': at(5), 'source': 's2', 'value': 3})


def test_non_numeric_reading_becomes_degraded_descriptor(service):
    service.ingest_event({'class': 'IncomingEvent', 't': at(0), 'source': 's1', 'value': 'error'})
    (record,) = service.step_engine()
    assert record.event_class == 'DescriptorEvent'
    assert record.degraded
    assert service.diagnostics('DescriptorEvent')[0].to_dict()['degraded'] is True


def test_diagnostics_since_is_exclusive(service):
    for k, value in enumerate([90, 91, 92, 50, 90, 91, 92]):
        service.ingest_event({'class': 'IncomingEvent', 't': at(k), 'source': 's1', 'value': value})
    service.step_engine()
    assert [r.t for r in service.diagnostics('AlarmEvent')] == [START + timedelta(seconds=2), START + timedelta(seconds=6)]
    assert len(service.diagnostics('AlarmEvent', since=at(2))) == 1
    assert len(service.diagnostics('AlarmEvent', since=at(1))) == 2
    with pytest.raises(UnknownEventClass):
        service.diagnostics('IncomingEvent')


def test_diagnostics_are_read_from_the_event_table(service):
    for k, value in enumerate([90, 91, 92, 50, 90, 91, 92]):
        service.ingest_event({'class': 'IncomingEvent', 't': at(k), 'source': 's1', 'value': value})
    emitted = service.step_engine()
    assert service.diagnostics('AlarmEvent') == [r for r in emitted if r.event_class == 'AlarmEvent']

    service.store.apply_retention(RetentionPolicy(timedelta(seconds=3), frozenset({'ddss_event'})), at(6))
    (alarm,) = service.diagnostics('AlarmEvent')
    assert alarm.t == START + timedelta(seconds=6)
    assert alarm.payload == 92.0


# ==================== WEB SERVICE ====================

@pytest.fixture
def client(service):
    app = create_app(service)
    app.config['TESTING'] = True
    return app.test_client()


def test_health_endpoint(client, bundle):
    response = client.get('/api/health')
    assert response.status_code == 200
    body = response.get_json()
    assert body['status'] == 'healthy'
    assert body['bundle_digest'] == bundle.digest()
    assert body['events_in'] == 0


def test_post_and_poll(client):
    for k in range(3):
        response = client.post('/events/IncomingEvent', json={'t': at(k), 'source': 's1', 'value': 85 + k})
        assert response.status_code == 201
    body = response.get_json()
    assert body['accepted']['class'] == 'IncomingEvent'
    assert [e['class'] for e in body['emitted']] == ['AlarmEvent']
    assert body['emitted'][0]['indicator'] == 'overheat_alarm'

    polled = client.get('/diagnostics/AlarmEvent').get_json()
    assert polled['count'] == 1
    assert client.get('/diagnostics/AlarmEvent', query_string={'since': at(2)}).get_json()['count'] == 0


def test_post_errors(client):
    assert client.post('/events/AlarmEvent', json={'t': at(0), 'source': 's1', 'value': 1}).status_code == 404
    response = client.post('/events/IncomingEvent', json={'t': at(0), 'source': 's9', 'value': 1})
    assert response.status_code == 400
    assert response.get_json()['error'] == 'UNKNOWN_DATA_SOURCE'
    assert client.post('/events/IncomingEvent', data='not json').status_code == 400
    mismatch = {'class': 'Other', 't': at(0), 'source': 's1', 'value': 1}
    assert client.post('/events/IncomingEvent', json=mismatch).status_code == 400
    assert client.get('/diagnostics/Nope').status_code == 404
