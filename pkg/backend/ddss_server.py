"""
DDSS Web Service
Flask application exposing a generated DDSS: incoming events are POSTed per
event class, diagnostic events are polled per class with a since-timestamp
"""

import logging
from datetime import datetime

from flask import Flask, jsonify, request
from flask_cors import CORS

import config
from ddss_generator import DiagnosticService
from errors import OntoSysError, UnknownEventClass
from logging_config import init_sentry, log_error

logger = logging.getLogger(__name__)


def create_app(service: DiagnosticService) -> Flask:
    init_sentry()
    app = Flask(__name__)
    app.config['DDSS_SERVICE'] = service

    CORS(app, resources={
        r"/*": {
            "origins": "*",
            "methods": ["GET", "POST"],
            "allow_headers": ["Content-Type"],
            "max_age": 3600
        }
    })

    @app.errorhandler(OntoSysError)
    def handle_user_error(error: OntoSysError):
        status = 404 if isinstance(error, UnknownEventClass) else 400
        log_error(logger, error, {'method': request.method, 'path': request.path, 'status': status})
        return jsonify(error.to_dict()), status

    @app.errorhandler(500)
    def handle_internal_error(error):
        log_error(logger, error, {'path': request.path})
        return jsonify({'error': 'INTERNAL_ERROR', 'message': 'Internal server error'}), 500

    @app.route('/api/health', methods=['GET'])
    def health_check():
        """Bundle identity and traffic counters"""
        bundle = service.bundle
        return jsonify({
            'status': 'healthy',
            'timestamp': datetime.now().isoformat(),
            'service': 'ontosys-ddss',
            'environment': config.ENVIRONMENT,
            'bundle_digest': bundle.digest(),
            'endpoints': [e.to_dict() for e in bundle.endpoints],
            'events_in': service.event_count('in'),
            'events_out': service.event_count('out'),
        })

    @app.route('/events/<event_class>', methods=['POST'])
    def post_event(event_class):
        data = request.get_json(silent=True)
        if not isinstance(data, dict):
            return jsonify({'error': 'INVALID_PARAMS', 'message': 'JSON object body required'}), 400
        if data.get('class', event_class) != event_class:
            return jsonify({'error': 'INVALID_PARAMS', 'message': 'Body class differs from the endpoint class'}), 400

        record = service.ingest_event(data, event_class)
        emitted = service.step_engine()
        return jsonify({'accepted': record.to_dict(), 'emitted': [r.to_dict() for r in emitted]}), 201

    @app.route('/diagnostics/<event_class>', methods=['GET'])
    def get_diagnostics(event_class):
        records = service.diagnostics(event_class, request.args.get('since'))
        return jsonify({'class': event_class, 'count': len(records), 'events': [r.to_dict() for r in records]})

    return app


def serve(service: DiagnosticService, host: str = None, port: int = None):
    app = create_app(service)
    host = host or config.DDSS_HOST
    port = port or config.DDSS_PORT
    logger.info(f"DDSS service listening on http://{host}:{port}")
    app.run(host=host, port=port, debug=False, threaded=True)
