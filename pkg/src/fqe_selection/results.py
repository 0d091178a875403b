"""Result emission: results.csv, summary.json and per-series plot data."""

import csv
import io
import json
import logging
import math
import re
from pathlib import Path
from typing import Any

from fqe_selection.exceptions import ConfigurationError
from fqe_selection.experiment import METHOD_PROPERTIES, RunResult, mean_and_sd

logger = logging.getLogger(__name__)

CSV_COLUMNS = (
    'seed',
    'method',
    'kernel',
    'n',
    'H',
    'gamma',
    'eps_eval',
    'selected_id',
    'delta_j',
    'excess_mae',
    'bound_value',
    'wall_ms',
    'status',
    'reason',
    'scores',
)

RESULTS_FILE = 'results.csv'
SUMMARY_FILE = 'summary.json'
PLOT_DIR = 'plotdata'


def _horizon_key(label: str) -> tuple[bool, int]:
    return (True, 0) if label == 'inf' else (False, int(label))


def sort_results(results: list[RunResult]) -> list[RunResult]:
    """Rows in emission order: seed, n, horizon, gamma, eps_eval, method, kernel."""
    return sorted(
        results,
        key=lambda row: (
            row.seed,
            row.n,
            _horizon_key(row.H),
            row.gamma,
            row.eps_eval,
            row.method,
            row.kernel,
        ),
    )


def _format(value: object) -> str:
    if value is None:
        return ''
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, dict):
        return json.dumps(value)
    return str(value)


def _optional_float(text: str) -> float | None:
    return None if text == '' else float(text)


def dump_results_csv(results: list[RunResult]) -> str:
    """Render sorted rows as CSV text; floats use their shortest round-trip repr."""
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=CSV_COLUMNS, lineterminator='\n')
    writer.writeheader()
    for row in sort_results(results):
        writer.writerow({column: _format(getattr(row, column)) for column in CSV_COLUMNS})
    return buffer.getvalue()


def parse_results_csv(text: str) -> list[RunResult]:
    """Parse CSV text written by :func:`dump_results_csv`.

    Raises:
        ConfigurationError: If a column is missing or a value does not parse

    """
    reader = csv.DictReader(io.StringIO(text))
    missing = set(CSV_COLUMNS) - set(reader.fieldnames or ())
    if missing:
        msg = f'results CSV lacks columns {sorted(missing)}'
        raise ConfigurationError(msg)
    try:
        return [
            RunResult(
                seed=int(raw['seed']),
                method=raw['method'],
                kernel=raw['kernel'],
                n=int(raw['n']),
                H=raw['H'],
                gamma=float(raw['gamma']),
                eps_eval=float(raw['eps_eval']),
                selected_id=raw['selected_id'],
                delta_j=_optional_float(raw['delta_j']),
                excess_mae=_optional_float(raw['excess_mae']),
                bound_value=_optional_float(raw['bound_value']),
                wall_ms=float(raw['wall_ms']),
                status=raw['status'],  # type: ignore[arg-type]
                reason=raw['reason'],
                scores=json.loads(raw['scores']) if raw['scores'] else {},
            )
            for raw in reader
        ]
    except ValueError as exc:
        msg = f'Invalid results CSV: {exc}'
        raise ConfigurationError(msg) from exc


def read_results_csv(path: Path) -> list[RunResult]:
    """Read a results.csv file."""
    try:
        text = path.read_text(encoding='utf-8')
    except OSError as exc:
        msg = f'cannot read results {path}: {exc}'
        raise ConfigurationError(msg) from exc
    return parse_results_csv(text)


def series_name(method: str, kernel: str) -> str:
    """File-safe name of a (method, kernel) series."""
    label = f'{method}_{kernel}' if kernel else method
    return re.sub(r'[^A-Za-z0-9.+-]+', '_', label)


def _series(results: list[RunResult]) -> list[tuple[str, str]]:
    seen: dict[tuple[str, str], None] = {}
    for row in sort_results(results):
        seen.setdefault((row.method, row.kernel), None)
    return sorted(seen)


def _excess(rows: list[RunResult]) -> list[float]:
    return [float(row.excess_mae) for row in rows if row.status == 'ok' and row.excess_mae is not None]


def _aggregate(values: list[float]) -> dict[str, Any]:
    if not values:
        return {'count': 0, 'mean': None, 'sd': None, 'se': None}
    mean, sd = mean_and_sd(values)
    return {'count': len(values), 'mean': mean, 'sd': sd, 'se': sd / math.sqrt(len(values))}


def summarize(results: list[RunResult]) -> dict[str, Any]:
    """Per-series and per-(series, eps_eval) aggregates of the excess MAE."""
    series = []
    by_eps = []
    for method, kernel in _series(results):
        rows = [row for row in results if row.method == method and row.kernel == kernel]
        ok = [row for row in rows if row.status == 'ok']
        selections: dict[str, int] = {}
        for row in ok:
            selections[row.selected_id] = selections.get(row.selected_id, 0) + 1
        excess = _aggregate(_excess(ok))
        abs_errors = [abs(row.delta_j) for row in ok if row.delta_j is not None]
        series.append({
            'method': method,
            'kernel': kernel,
            'rows': len(rows),
            'ok': len(ok),
            'mean_excess_mae': excess['mean'],
            'sd_excess_mae': excess['sd'],
            'mean_abs_delta_j': sum(abs_errors) / len(abs_errors) if abs_errors else None,
            'selection_frequency': {key: count / len(ok) for key, count in sorted(selections.items())},
        })
        for eps in sorted({row.eps_eval for row in rows}):
            at_eps = [row for row in rows if row.eps_eval == eps]
            by_eps.append({'method': method, 'kernel': kernel, 'eps_eval': eps, **_aggregate(_excess(at_eps))})
    return {
        'rows': len(results),
        'failed': sum(row.status == 'failed' for row in results),
        'series': series,
        'by_eps': by_eps,
    }


def plot_data(results: list[RunResult]) -> dict[str, str]:
    """CSV text per series with columns eps_eval, mean, sd, count."""
    files = {}
    for entry in summarize(results)['by_eps']:
        name = series_name(entry['method'], entry['kernel'])
        if name not in files:
            files[name] = 'eps_eval,mean,sd,count\n'
        files[name] += ','.join(_format(entry[key]) for key in ('eps_eval', 'mean', 'sd', 'count')) + '\n'
    return files


def emit_results(results: list[RunResult], out_dir: Path) -> list[Path]:
    """Write results.csv, summary.json and plotdata/<series>.csv under ``out_dir``.

    Args:
        results: Rows from a sweep, in any order
        out_dir: Output directory, created when missing

    Returns:
        The written paths

    Raises:
        ConfigurationError: If the directory cannot be created or written

    """
    plot_dir = out_dir / PLOT_DIR
    files = {out_dir / RESULTS_FILE: dump_results_csv(results)}
    files[out_dir / SUMMARY_FILE] = json.dumps(summarize(results), indent=2) + '\n'
    files.update((plot_dir / f'{name}.csv', text) for name, text in plot_data(results).items())
    try:
        plot_dir.mkdir(parents=True, exist_ok=True)
        for path, text in files.items():
            path.write_text(text, encoding='utf-8')
    except OSError as exc:
        msg = f'cannot write results to {out_dir}: {exc}'
        raise ConfigurationError(msg) from exc
    written = list(files)
    logger.info('Wrote %d result rows to %s', len(results), out_dir)
    return written


def _cell(value: object) -> str:
    if value is None:
        return '-'
    if isinstance(value, float):
        return f'{value:.4g}'
    return str(value)


def _table(header: tuple[str, ...], rows: list[tuple[object, ...]]) -> str:
    cells = [header, *[tuple(_cell(value) for value in row) for row in rows]]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    lines = ['  '.join(value.ljust(width) for value, width in zip(row, widths, strict=True)).rstrip() for row in cells]
    lines.insert(1, '  '.join('-' * width for width in widths))
    return '\n'.join(lines)


def format_report(results: list[RunResult]) -> str:
    """Method comparison table followed by the empirical aggregates."""
    properties = _table(
        ('method', 'off-policy factor', 'misspecification', 'hyperparameters', 'time'),
        [
            (prop.method, prop.off_policy_factor, prop.error_metric, prop.hyperparameters, prop.time_complexity)
            for prop in METHOD_PROPERTIES
        ],
    )
    summary = summarize(results)
    aggregates = _table(
        ('method', 'kernel', 'rows', 'ok', 'mean excess', 'sd excess', 'mean |dJ|'),
        [
            (
                entry['method'],
                entry['kernel'] or '-',
                entry['rows'],
                entry['ok'],
                entry['mean_excess_mae'],
                entry['sd_excess_mae'],
                entry['mean_abs_delta_j'],
            )
            for entry in summary['series']
        ],
    )
    return f'{properties}\n\n{aggregates}\n'
