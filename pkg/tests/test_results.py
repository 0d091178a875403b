"""Tests for the results table, summaries and plot data."""

import json
from pathlib import Path

import pytest

from fqe_selection.exceptions import ConfigurationError
from fqe_selection.experiment import RunResult
from fqe_selection.results import (
    CSV_COLUMNS,
    dump_results_csv,
    emit_results,
    format_report,
    parse_results_csv,
    plot_data,
    read_results_csv,
    series_name,
    sort_results,
    summarize,
)


def _row(**fields: object) -> RunResult:
    base: dict[str, object] = {
        'seed': 0,
        'method': 'RM',
        'n': 100,
        'H': '3',
        'gamma': 1.0,
        'eps_eval': 0.0,
        'status': 'ok',
        'selected_id': 'tabular',
        'delta_j': -0.1,
        'excess_mae': 0.05,
        'bound_value': 1.5,
    }
    base.update(fields)
    return RunResult.model_validate(base)


@pytest.fixture
def results() -> list[RunResult]:
    """Rows for RM and one KLM kernel, including a failed row."""
    return [
        _row(seed=1, excess_mae=0.1, scores={'tabular': 0.0, 'shifted': 0.25}),
        _row(seed=0, H='inf', gamma=0.9, method='RM-FP', excess_mae=0.0),
        _row(seed=0, method='KLM', kernel='exp:p=1:sigma=0.1', selected_id='shifted', excess_mae=0.3),
        _row(seed=0, eps_eval=0.5, excess_mae=0.2),
        _row(
            seed=1,
            method='KLM',
            kernel='exp:p=1:sigma=0.1',
            status='failed',
            selected_id='',
            delta_j=None,
            excess_mae=None,
            bound_value=None,
            reason='AssumptionViolationError: uncovered pair',
        ),
    ]


def test_empty_results_are_header_only() -> None:
    """Test that no rows produce just the header line."""
    assert dump_results_csv([]) == ','.join(CSV_COLUMNS) + '\n'


def test_rows_sort_by_grid_coordinates(results: list[RunResult]) -> None:
    """Test the emission order, with infinite horizons after finite ones."""
    ordered = sort_results(results)

    assert [(row.seed, row.H, row.eps_eval, row.method) for row in ordered] == [
        (0, '3', 0.0, 'KLM'),
        (0, '3', 0.5, 'RM'),
        (0, 'inf', 0.0, 'RM-FP'),
        (1, '3', 0.0, 'KLM'),
        (1, '3', 0.0, 'RM'),
    ]


def test_csv_round_trip_preserves_rows(results: list[RunResult]) -> None:
    """Test that parsing the CSV returns the sorted rows unchanged."""
    parsed = parse_results_csv(dump_results_csv(results))

    assert [row.model_dump() for row in parsed] == [row.model_dump() for row in sort_results(results)]


def test_csv_is_independent_of_input_order(results: list[RunResult]) -> None:
    """Test that shuffled input renders the same bytes."""
    assert dump_results_csv(results) == dump_results_csv(list(reversed(results)))


def test_csv_formats_missing_values_as_empty(results: list[RunResult]) -> None:
    """Test that absent oracle values are empty cells and scores are JSON."""
    lines = dump_results_csv(results).splitlines()
    failed = next(line for line in lines if 'failed' in line)

    assert ',,,,' in failed
    assert '"{""tabular"": 0.0, ""shifted"": 0.25}"' in dump_results_csv(results)


def test_parse_rejects_bad_tables() -> None:
    """Test missing columns and unparsable values."""
    with pytest.raises(ConfigurationError, match='lacks columns'):
        parse_results_csv('seed,method\n0,RM\n')
    text = dump_results_csv([_row()]).replace('\n0,RM', '\nzero,RM')
    with pytest.raises(ConfigurationError):
        parse_results_csv(text)


def test_read_results_csv_missing_file(tmp_path: Path) -> None:
    """Test that an unreadable file raises ConfigurationError."""
    with pytest.raises(ConfigurationError):
        read_results_csv(tmp_path / 'results.csv')


def test_series_name_is_file_safe() -> None:
    """Test that kernel specs become file names."""
    assert series_name('RM', '') == 'RM'
    assert series_name('KLM', 'exp:p=1:sigma=0.1') == 'KLM_exp_p_1_sigma_0.1'


def test_summarize(results: list[RunResult]) -> None:
    """Test per-series counts, means and selection frequencies."""
    summary = summarize(results)
    series = {(entry['method'], entry['kernel']): entry for entry in summary['series']}

    assert summary['rows'] == 5
    assert summary['failed'] == 1
    assert series['RM', '']['ok'] == 2
    assert series['RM', '']['mean_excess_mae'] == pytest.approx(0.15)
    assert series['RM', '']['mean_abs_delta_j'] == pytest.approx(0.1)
    assert series['KLM', 'exp:p=1:sigma=0.1']['rows'] == 2
    assert series['KLM', 'exp:p=1:sigma=0.1']['selection_frequency'] == {'shifted': 1.0}
    by_eps = [entry for entry in summary['by_eps'] if entry['method'] == 'RM']
    assert [(entry['eps_eval'], entry['count'], entry['mean']) for entry in by_eps] == [(0.0, 1, 0.1), (0.5, 1, 0.2)]


def test_plot_data_has_one_file_per_series(results: list[RunResult]) -> None:
    """Test plot data columns and rows."""
    files = plot_data(results)

    assert sorted(files) == ['KLM_exp_p_1_sigma_0.1', 'RM', 'RM-FP']
    assert files['RM'] == 'eps_eval,mean,sd,count\n0.0,0.1,0.0,1\n0.5,0.2,0.0,1\n'


def test_emit_results_writes_all_files(results: list[RunResult], tmp_path: Path) -> None:
    """Test the output layout and that emitting twice is byte-identical."""
    out = tmp_path / 'out'
    written = emit_results(results, out)
    first = {path: path.read_bytes() for path in written}
    emit_results(results, out)

    assert (out / 'results.csv') in written
    assert json.loads((out / 'summary.json').read_text(encoding='utf-8'))['rows'] == 5
    assert (out / 'plotdata' / 'RM.csv').exists()
    assert all(path.read_bytes() == data for path, data in first.items())


def test_emit_results_unwritable_directory(results: list[RunResult], tmp_path: Path) -> None:
    """Test that a directory that cannot be created raises ConfigurationError."""
    blocker = tmp_path / 'blocker'
    blocker.write_text('', encoding='utf-8')

    with pytest.raises(ConfigurationError, match='cannot write results'):
        emit_results(results, blocker / 'out')


def test_format_report_lists_methods_and_series(results: list[RunResult]) -> None:
    """Test that the report has the properties table and the aggregates."""
    report = format_report(results)

    assert 'off-policy factor' in report
    assert 'KLM-FP' in report
    assert 'exp:p=1:sigma=0.1' in report
