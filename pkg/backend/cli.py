"""
Command-line entry point for every pipeline stage

Exit codes: 0 success, 1 user error (bad input, bad syntax, usage), 2 internal error.
Machine-readable output goes to stdout or files, diagnostics to stderr.
"""

import csv
import logging
import sys
from pathlib import Path

import click

import config
from condition_analyzer import (
    generate_ca_scenario, load_e414, load_scenario, out_of_memory_row, run_scenario,
    save_scenario, write_metrics_csv, METRICS_COLUMNS, ScenarioMetrics,
)
from database import generate_schema, open_store
from ddss_generator import DiagnosticService, generate_ddss, load_bundle, write_bundle
from errors import CapExceeded, OntoSysError
from ils_simulator import ScenarioParams, check_event_log, conservation, generate_scenario, write_event_log
from kpi_benchmark import KPIEngine, MODES, PATHS, run_benchmark, write_report
from logging_config import log_error, setup_logging
from ontology import load_ontology, parse_ontology
from ql_reasoner import validate_ql_profile
from query_rewriter import certain_answers, compile_to_sql, parse_cq, perfect_rewrite
from rule_graph import load_rule_graph

logger = logging.getLogger(__name__)


class ExitCodeGroup(click.Group):
    """click group whose standalone exit codes follow the 0/1/2 contract"""

    def dispatch(self, args=None, prog_name=None, **extra) -> int:
        try:
            result = super().main(args=args, prog_name=prog_name, standalone_mode=False, **extra)
        except click.ClickException as e:
            e.show()
            return 1
        except click.Abort:
            click.echo('Aborted', err=True)
            return 1
        except OntoSysError as e:
            click.echo(f"error: {e.code}: {e.message}", err=True)
            return 1
        except OSError as e:
            click.echo(f"error: {e}", err=True)
            return 1
        except Exception as e:
            log_error(logger, e, {'argv': list(args) if args is not None else sys.argv[1:]})
            click.echo(f"internal error: {type(e).__name__}: {e}", err=True)
            return 2
        return result if isinstance(result, int) else 0

    def main(self, args=None, prog_name=None, complete_var=None, standalone_mode=True, **extra):
        if not standalone_mode:
            return super().main(args=args, prog_name=prog_name, complete_var=complete_var,
                                standalone_mode=False, **extra)
        sys.exit(self.dispatch(args, prog_name, **extra))


def _read_query(query: str) -> str:
    """A query argument is either the query text or a path to a file holding it"""
    path = Path(query)
    if len(query) < 256 and path.suffix and path.is_file():
        return path.read_text(encoding='utf-8')
    return query


def _emit_rows(columns, rows, fmt: str):
    if fmt == 'csv':
        writer = csv.writer(sys.stdout)
        writer.writerow(columns)
        writer.writerows(rows)
    else:
        click.echo('\t'.join(columns))
        for row in rows:
            click.echo('\t'.join(str(v) for v in row))


@click.group(cls=ExitCodeGroup)
@click.option('--verbose', '-v', is_flag=True, help='Debug logging on stderr')
def cli(verbose):
    """Ontology toolkit for systems engineering: reasoning, OBDA, condition analysis, logistics KPIs, DDSS generation."""
    setup_logging(None, logging.DEBUG if verbose else None)


# ==================== ONTOLOGY / QUERY ====================

@cli.command()
@click.argument('onto', type=click.Path(exists=True, dir_okay=False))
def validate(onto):
    """OWL 2 QL profile report for ONTO."""
    report = validate_ql_profile(load_ontology(onto))
    click.echo(report.render())


@cli.command()
@click.argument('onto', type=click.Path(exists=True, dir_okay=False))
@click.argument('query')
def rewrite(onto, query):
    """Print the perfect rewriting of QUERY over ONTO and its SQL."""
    o = load_ontology(onto)
    ucq = perfect_rewrite(parse_cq(_read_query(query), o), o)
    _, mapping = generate_schema(o)
    click.echo(ucq.render())
    click.echo(compile_to_sql(ucq, mapping).text)


@cli.command()
@click.argument('onto', type=click.Path(exists=True, dir_okay=False))
@click.argument('data', type=click.Path(exists=True, dir_okay=False))
@click.argument('query')
@click.option('--format', 'fmt', type=click.Choice(['csv', 'text']), default='csv', show_default=True)
def query(onto, data, query, fmt):
    """Certain answers of QUERY over ONTO with the assertions in DATA."""
    ontology_text = Path(onto).read_text(encoding='utf-8')
    data_text = Path(data).read_text(encoding='utf-8')
    o = parse_ontology(ontology_text + "\n" + data_text).without_conditional_types()
    store = open_store(o)
    try:
        result = certain_answers(parse_cq(_read_query(query), o), o, store)
    finally:
        store.close()
    _emit_rows(result.columns, result.sorted_rows(), fmt)


# ==================== CONDITION ANALYZER ====================

@cli.command('ca-gen')
@click.option('--faults', type=int, required=True, help='Injected faults (0-24)')
@click.option('--rounds', type=int, default=3600, show_default=True)
@click.option('--variables', type=int, default=52, show_default=True)
@click.option('--seed', type=int, default=config.DEFAULT_SEED, show_default=True)
@click.option('--out', type=click.Path(dir_okay=False), required=True)
def ca_gen(faults, rounds, variables, seed, out):
    """Write a condition-analysis scenario CSV."""
    scn = generate_ca_scenario(faults, rounds, variables, seed)
    save_scenario(scn, out)
    click.echo(out)


@cli.command('ca-run')
@click.argument('scenarios', nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--strategy', type=click.Choice(['lazy', 'eager']), default='eager', show_default=True)
@click.option('--cap', type=int, default=None, help='Live-individual cap for the working ABox')
@click.option('--onto', type=click.Path(exists=True, dir_okay=False), default=None)
@click.option('--out', type=click.Path(dir_okay=False), default=None, help='Metrics CSV (stdout if omitted)')
def ca_run(scenarios, strategy, cap, onto, out):
    """Run the condition analyzer over SCENARIOS and report metrics."""
    o = load_ontology(onto) if onto else load_e414()
    rows = []
    for path in scenarios:
        scn = load_scenario(path)
        try:
            metrics: ScenarioMetrics = run_scenario(scn, strategy, cap, o)
            rows.append(metrics.row())
        except CapExceeded as e:
            click.echo(f"{scn.name}: {e.message}", err=True)
            rows.append(out_of_memory_row(strategy, scn.name))

    if out:
        write_metrics_csv(rows, out)
        click.echo(out)
        return
    writer = csv.DictWriter(sys.stdout, fieldnames=METRICS_COLUMNS)
    writer.writeheader()
    writer.writerows(rows)


# ==================== LOGISTICS ====================

def _scenario_params(itus, days, terminals, seed) -> ScenarioParams:
    params = ScenarioParams(itus_per_terminal_day=itus, days=days, seed=seed, terminals=terminals)
    params.validate()
    return params


@cli.command('sim-gen')
@click.option('--itus', type=int, default=45, show_default=True, help='ITUs per terminal and day')
@click.option('--days', type=int, default=1, show_default=True)
@click.option('--terminals', type=int, default=5, show_default=True)
@click.option('--seed', type=int, default=config.DEFAULT_SEED, show_default=True)
@click.option('--out', type=click.Path(dir_okay=False), default=None)
def sim_gen(itus, days, terminals, seed, out):
    """Simulate the intermodal network and write the event log CSV."""
    log = generate_scenario(_scenario_params(itus, days, terminals, seed))
    out = out or str(config.DATA_DIR / f"events_{itus}x{days}_seed{seed}.csv")
    count = write_event_log(log, out)
    problems = check_event_log(log)
    for problem in problems[:10]:
        click.echo(f"invalid sequence: {problem}", err=True)
    totals = conservation(log)
    click.echo(out)
    click.echo(f"events={count} gated_in={totals['gated_in']} gated_out={totals['gated_out']} "
               f"in_transit={totals['in_transit']}")


@cli.command()
@click.option('--itus', type=int, default=45, show_default=True)
@click.option('--days', type=int, default=15, show_default=True)
@click.option('--terminals', type=int, default=5, show_default=True)
@click.option('--seed', type=int, default=config.DEFAULT_SEED, show_default=True)
@click.option('--mode', type=click.Choice(list(MODES) + ['both']), default='both', show_default=True)
@click.option('--window', 'window_days', type=int, default=2, show_default=True, help='Retention window in days')
@click.option('--paths', default='sql,obda', show_default=True, help=f"Comma-separated subset of {','.join(PATHS)}")
@click.option('--kpi', 'kpis', multiple=True, default=('avg_itus_unloaded_per_hour',), show_default=True,
              type=click.Choice(list(KPIEngine.KPIS)))
@click.option('--repetitions', type=int, default=None, help=f"Default {config.BENCH_REPETITIONS}")
@click.option('--out', type=click.Path(file_okay=False), default=None)
def bench(itus, days, terminals, seed, mode, window_days, paths, kpis, repetitions, out):
    """Per-day KPI latency benchmark with trend tests."""
    params = _scenario_params(itus, days, terminals, seed)
    path_list = [p.strip() for p in paths.split(',') if p.strip()]
    out_dir = Path(out) if out else config.DATA_DIR / 'bench'
    log = generate_scenario(params)

    for current in (MODES if mode == 'both' else (mode,)):
        report = run_benchmark(params, kpis, path_list, current, window_days, repetitions, log=log)
        files = write_report(report, out_dir)
        click.echo(str(files['benchmark']))
        for path, trend in report.trend.items():
            if trend is None:
                click.echo(f"{current} {path} trend=ND")
            else:
                click.echo(f"{current} {path} slope={trend.slope:.6g} p={trend.p_value:.6g}")
        if 'sql' in path_list and 'obda' in path_list:
            sql = dict(report.latencies('sql'))
            obda = dict(report.latencies('obda'))
            faster = sum(1 for day in sql if sql[day] <= obda[day])
            click.echo(f"{current} sql<=obda on {faster}/{len(sql)} days")
        for day, kpi in report.disagreements():
            click.echo(f"{current} day {day}: paths disagree on {kpi}", err=True)


# ==================== DDSS ====================

@cli.command('ddss-gen')
@click.argument('onto', type=click.Path(exists=True, dir_okay=False))
@click.argument('rules', type=click.Path(exists=True, dir_okay=False))
@click.option('--out', type=click.Path(file_okay=False), required=True)
def ddss_gen(onto, rules, out):
    """Generate a DDSS bundle from ONTO and the rule graph RULES."""
    bundle = generate_ddss(load_ontology(onto), load_rule_graph(rules))
    manifest = write_bundle(bundle, out)
    click.echo(str(manifest))
    for endpoint in bundle.endpoints:
        click.echo(f"{endpoint.direction} {endpoint.path}")


@cli.command('ddss-serve')
@click.argument('bundle_dir', type=click.Path(exists=True, file_okay=False))
@click.option('--host', default=config.DDSS_HOST, show_default=True)
@click.option('--port', type=int, default=config.DDSS_PORT, show_default=True)
def ddss_serve(bundle_dir, host, port):
    """Serve a generated bundle over HTTP."""
    from ddss_server import serve

    service = DiagnosticService(load_bundle(bundle_dir))
    try:
        serve(service, host, port)
    finally:
        service.close()


def dispatch(argv=None) -> int:
    return cli.dispatch(argv, prog_name='ontosys')


def main():
    sys.exit(dispatch())


if __name__ == '__main__':
    main()
