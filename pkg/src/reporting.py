"""
Reporting Module
Epoch histories (CSV), final metric rows (JSON / CSV) with seed aggregates,
and the markdown comparison and retention tables.
"""

import csv
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from .eval_metrics import MetricsReport
from .mutual_trainer import EpochRecord

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = [
    'method', 'seed', 'stage', 'epoch', 'lr',
    'elbo_b1', 'elbo_b2', 'logit_kl_b1', 'logit_kl_b2',
    'diverse_param', 'diverse_feat_b1', 'diverse_feat_b2', 'param_distance',
    'total_b1', 'total_b2', 'val_acc_b1', 'val_acc_b2', 'status',
]
METRIC_NAMES = ('acc', 'nll', 'ece', 'mce')
PEER_LABELS = {'b1': 'B1', 'b2': 'B2', 'dnn': 'DNN', 'average': 'Average'}


def _cell(value: Any) -> str:
    if value is None:
        return ''
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_history(records: Sequence[EpochRecord], path: str) -> None:
    """One row per epoch per method per seed"""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w', newline='') as handle:
        writer = csv.writer(handle)
        writer.writerow(HISTORY_COLUMNS)
        for record in records:
            row = record.to_dict()
            writer.writerow([_cell(row[c]) for c in HISTORY_COLUMNS])
    logger.info("wrote history %s (%d rows)", path, len(records))


def failed_record(method: str, seed: int, last_good_epoch: int) -> Dict[str, Any]:
    """History row marking an aborted run"""
    row = {c: None for c in HISTORY_COLUMNS}
    row.update(method=method, seed=seed, epoch=last_good_epoch, status='FAILED')
    return row


@dataclass
class ResultRow:
    """Final metrics of one (method, peer, seed)"""
    method: str
    peer: str
    seed: int
    config_hash: str
    metrics: MetricsReport
    status: str = 'ok'

    def to_dict(self) -> Dict[str, Any]:
        row = {'method': self.method, 'peer': self.peer, 'seed': self.seed, 'config_hash': self.config_hash,
               'status': self.status}
        row.update({name: getattr(self.metrics, name) for name in METRIC_NAMES})
        row['samples'] = self.metrics.samples
        row['retention'] = {f"{f:g}": v for f, v in sorted(self.metrics.retention.items())}
        return row


def _stats(values: List[float]) -> Dict[str, float]:
    array = np.array(values, dtype=np.float64)
    return {'mean': float(array.mean()), 'std': float(array.std())}


def aggregate_rows(rows: Sequence[ResultRow]) -> List[Dict[str, Any]]:
    """
    Mean and std over seeds per (method, peer), plus an 'average' peer per
    method pooling both BNN peers

    Failed runs are left out of the aggregates.
    """
    groups: Dict[tuple, List[ResultRow]] = {}
    for row in rows:
        if row.status != 'ok':
            continue
        groups.setdefault((row.method, row.peer), []).append(row)
        if row.peer in ('b1', 'b2'):
            groups.setdefault((row.method, 'average'), []).append(row)
    aggregate = []
    for (method, peer), members in groups.items():
        entry = {'method': method, 'peer': peer, 'seed': 'mean', 'count': len(members),
                 'config_hash': members[0].config_hash}
        for name in METRIC_NAMES:
            entry[name] = _stats([getattr(m.metrics, name) for m in members])
        fractions = sorted(members[0].metrics.retention)
        entry['retention'] = {f"{f:g}": _stats([m.metrics.retention.get(f, float('nan')) for m in members])
                              for f in fractions}
        aggregate.append(entry)
    return aggregate


@dataclass
class RunReport:
    """Everything one train / compare invocation produced"""
    config_hash: str
    rows: List[ResultRow] = field(default_factory=list)
    history: List[EpochRecord] = field(default_factory=list)
    failures: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def status(self) -> str:
        return 'FAILED' if self.failures or any(r.status != 'ok' for r in self.rows) else 'ok'

    def aggregate(self) -> List[Dict[str, Any]]:
        return aggregate_rows(self.rows)

    def to_dict(self) -> Dict[str, Any]:
        return {'config_hash': self.config_hash, 'status': self.status,
                'rows': [r.to_dict() for r in self.rows], 'aggregate': self.aggregate(),
                'failures': self.failures}

    def write(self, output_dir: str) -> Dict[str, str]:
        """Write history.csv, report.json, report.csv and table.md; returns their paths"""
        os.makedirs(output_dir, exist_ok=True)
        paths = {name: os.path.join(output_dir, name)
                 for name in ('history.csv', 'report.json', 'report.csv', 'table.md')}
        write_history(self.history, paths['history.csv'])
        if self.failures:
            with open(paths['history.csv'], 'a', newline='') as handle:
                writer = csv.writer(handle)
                for failure in self.failures:
                    writer.writerow([_cell(failure.get(c)) for c in HISTORY_COLUMNS])
        with open(paths['report.json'], 'w') as handle:
            json.dump(self.to_dict(), handle, indent=2, sort_keys=True)
        self._write_csv(paths['report.csv'])
        with open(paths['table.md'], 'w') as handle:
            handle.write(render_tables(self))
        logger.info("wrote report files to %s", output_dir)
        return paths

    def _write_csv(self, path: str) -> None:
        fractions = sorted({f for r in self.rows for f in r.metrics.retention})
        columns = ['method', 'peer', 'seed', 'config_hash', 'status', *METRIC_NAMES, 'samples'] + \
                  [f"retention_{f:g}" for f in fractions]
        with open(path, 'w', newline='') as handle:
            writer = csv.writer(handle)
            writer.writerow(columns)
            for row in self.rows:
                values = [row.method, row.peer, row.seed, row.config_hash, row.status]
                values += [_cell(float(getattr(row.metrics, n))) for n in METRIC_NAMES]
                values += [row.metrics.samples] + [_cell(row.metrics.retention.get(f)) for f in fractions]
                writer.writerow(values)
            for entry in self.aggregate():
                values = [entry['method'], entry['peer'], 'mean', entry['config_hash'], 'ok']
                values += [_cell(entry[n]['mean']) for n in METRIC_NAMES]
                values += [''] + [_cell(entry['retention'].get(f"{f:g}", {}).get('mean')) for f in fractions]
                writer.writerow(values)


def _format(value: Optional[float], digits: int = 4) -> str:
    if value is None or (isinstance(value, float) and np.isnan(value)):
        return '-'
    return f"{value:.{digits}f}"


def render_tables(report: RunReport) -> str:
    """
    Markdown comparison table (methods as columns, ACC / NLL / ECE per peer,
    'Average' rows) followed by the retention table
    """
    aggregate = report.aggregate()
    methods = list(dict.fromkeys(entry['method'] for entry in aggregate))
    lookup = {(e['method'], e['peer']): e for e in aggregate}
    # the deterministic baseline has one network; its column repeats on every peer row
    peers = [p for p in ('b1', 'b2', 'average') if any(e['peer'] == p for e in aggregate)]

    lines = [f"# Results (config {report.config_hash}, status {report.status})", '',
             '| Peer | Metric | ' + ' | '.join(methods) + ' |',
             '|---|---|' + '---|' * len(methods)]
    for peer in peers:
        for name, label in (('acc', 'ACC'), ('nll', 'NLL'), ('ece', 'ECE')):
            cells = []
            for method in methods:
                entry = lookup.get((method, peer)) or lookup.get((method, 'dnn'))
                if entry is None:
                    cells.append('-')
                    continue
                stats = entry[name]
                cells.append(f"{_format(stats['mean'])} ± {_format(stats['std'])}")
            lines.append(f"| {PEER_LABELS[peer]} | {label} | " + ' | '.join(cells) + ' |')

    fractions = sorted({k for e in aggregate for k in e['retention']}, key=float)
    if fractions:
        lines += ['', '## Retention accuracy (least uncertain samples kept)', '',
                  '| Method | Peer | ' + ' | '.join(f"{float(f) * 100:.0f}% retained" for f in fractions) + ' |',
                  '|---|---|' + '---|' * len(fractions)]
        for entry in aggregate:
            if entry['peer'] == 'dnn':
                continue
            cells = [_format(entry['retention'].get(f, {}).get('mean')) for f in fractions]
            lines.append(f"| {entry['method']} | {PEER_LABELS[entry['peer']]} | " + ' | '.join(cells) + ' |')
    return '\n'.join(lines) + '\n'
