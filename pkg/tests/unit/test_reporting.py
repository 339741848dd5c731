"""
Test Suite: History files, result rows, seed aggregates and markdown tables
"""

import csv
import json

import pytest

from src.eval_metrics import MetricsReport
from src.mutual_trainer import EpochRecord
from src.reporting import (HISTORY_COLUMNS, ResultRow, RunReport, aggregate_rows, failed_record, render_tables,
                           write_history)


def _metrics(acc, nll=0.3, ece=0.05, retention=None):
    return MetricsReport(acc=acc, nll=nll, ece=ece, mce=0.1, retention=retention or {0.5: acc + 0.05}, samples=4)


def _record(epoch, stage=1):
    return EpochRecord(method='ours', seed=0, stage=stage, epoch=epoch, lr=1e-3, elbo_b1=0.5, elbo_b2=0.6,
                       logit_kl_b1=0.01, logit_kl_b2=0.02, diverse_param=0.1, diverse_feat_b1=None,
                       diverse_feat_b2=None, param_distance=2.5, total_b1=0.7, total_b2=0.8)


@pytest.fixture
def report():
    rows = []
    for seed, (a1, a2) in enumerate(((0.80, 0.84), (0.90, 0.86))):
        rows.append(ResultRow('ours', 'b1', seed, 'cafe', _metrics(a1)))
        rows.append(ResultRow('ours', 'b2', seed, 'cafe', _metrics(a2)))
        rows.append(ResultRow('dml', 'b1', seed, 'cafe', _metrics(a1 - 0.1)))
        rows.append(ResultRow('dml', 'b2', seed, 'cafe', _metrics(a2 - 0.1)))
        rows.append(ResultRow('dnn', 'dnn', seed, 'cafe', _metrics(0.7)))
    return RunReport(config_hash='cafe', rows=rows, history=[_record(1), _record(2), _record(3, stage=2)])


class TestHistory:
    """Per-epoch CSV"""

    def test_columns_and_rows(self, tmp_path):
        path = tmp_path / 'nested' / 'history.csv'
        write_history([_record(1), _record(2)], str(path))
        with open(path, newline='') as handle:
            rows = list(csv.reader(handle))
        assert rows[0] == HISTORY_COLUMNS
        assert len(rows) == 3
        named = dict(zip(rows[0], rows[1]))
        assert named['diverse_feat_b1'] == ''
        assert float(named['param_distance']) == 2.5
        assert named['status'] == 'ok'

    def test_failed_record(self):
        row = failed_record('dml', 2, 7)
        assert row['status'] == 'FAILED' and row['epoch'] == 7 and row['seed'] == 2
        assert set(row) == set(HISTORY_COLUMNS)


class TestAggregation:
    """Mean and std over seeds"""

    def test_per_peer_and_average(self, report):
        entries = {(e['method'], e['peer']): e for e in aggregate_rows(report.rows)}
        assert entries[('ours', 'b1')]['acc']['mean'] == pytest.approx(0.85)
        assert entries[('ours', 'b1')]['acc']['std'] == pytest.approx(0.05)
        assert entries[('ours', 'average')]['acc']['mean'] == pytest.approx(0.85)
        assert entries[('ours', 'average')]['count'] == 4
        assert ('dnn', 'average') not in entries
        assert entries[('ours', 'b2')]['retention']['0.5']['mean'] == pytest.approx(0.90)

    def test_failed_rows_excluded(self):
        rows = [ResultRow('ours', 'b1', 0, 'x', _metrics(0.9)),
                ResultRow('ours', 'b1', 1, 'x', _metrics(0.1), status='FAILED')]
        (entry,) = [e for e in aggregate_rows(rows) if e['peer'] == 'b1']
        assert entry['count'] == 1
        assert entry['acc']['mean'] == pytest.approx(0.9)

    def test_status(self, report):
        assert report.status == 'ok'
        report.failures.append(failed_record('ours', 0, 3))
        assert report.status == 'FAILED'


class TestTables:
    """Markdown rendering"""

    def test_methods_as_columns(self, report):
        table = render_tables(report)
        assert '| Peer | Metric | ours | dml | dnn |' in table
        assert '| Average | ACC |' in table
        assert 'config cafe' in table

    def test_dnn_column_on_every_peer_row(self, report):
        table = render_tables(report)
        for line in table.splitlines():
            if line.startswith('| B1 | ACC') or line.startswith('| Average | ACC'):
                assert line.rstrip(' |').endswith('0.7000 ± 0.0000')

    def test_retention_table(self, report):
        table = render_tables(report)
        assert '50% retained' in table
        assert '| ours | B1 | 0.9000 |' in table
        assert '| dnn |' not in table.split('## Retention')[1]


class TestRunReportFiles:
    """Everything written to the output directory"""

    def test_write(self, report, tmp_path):
        report.failures.append(failed_record('dml', 1, 2))
        paths = report.write(str(tmp_path / 'out'))
        assert set(paths) == {'history.csv', 'report.json', 'report.csv', 'table.md'}

        data = json.loads(open(paths['report.json']).read())
        assert data['config_hash'] == 'cafe'
        assert data['status'] == 'FAILED'
        assert len(data['rows']) == 10

        with open(paths['history.csv'], newline='') as handle:
            history = list(csv.DictReader(handle))
        assert [h['status'] for h in history] == ['ok', 'ok', 'ok', 'FAILED']

        with open(paths['report.csv'], newline='') as handle:
            rows = list(csv.DictReader(handle))
        assert 'retention_0.5' in rows[0]
        assert sum(r['seed'] == 'mean' for r in rows) == len(report.aggregate())


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
