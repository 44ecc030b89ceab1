"""
pimgpt.report: End-to-end runs and parameter sweeps

:func:`run` maps a model, compiles and simulates every token step, accounts energy and
collects the statistics into a :class:`RunReport`. :func:`sweep` repeats that over one
varying parameter and normalizes each row to the first value.
"""

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor

from pimgpt.config import SystemConfig
from pimgpt.models import GptModelConfig, lookup_model
from pimgpt.mapper import build_memory_map
from pimgpt.compiler import compile_token
from pimgpt.engine import Simulator
from pimgpt.energy import accumulate
from pimgpt.event import event
from pimgpt.trace import CATEGORIES, check_trace

log = logging.getLogger(__name__)

__all__ = ('RunReport', 'Sweep', 'run', 'sweep', 'baseline_bytes', 'data_movement_reduction', 'SWEEP_DIMENSIONS',
           'SWEEP_COLUMNS')


SWEEP_DIMENSIONS = {
    'asic_freq': 'asic.clock',
    'pin_rate': 'geometry.pin_rate',
    'mac_width': 'pim.mac_width',
    'channels': 'geometry.channels',
    'tokens': None,
}


def baseline_bytes(model, tokens):
    """
    Bytes a processor without PIM moves across the memory interface to generate `tokens`
    tokens: every weight once per token plus the keys and values each step attends over.
    """
    d = model.d_model
    weights = 2 * (model.num_layers * (4 * d * d + 2 * d * model.d_ffn) + model.vocab_size * d)
    kv = 2 * 2 * model.num_layers * d * tokens * (tokens + 1) // 2
    return weights * tokens + kv


def data_movement_reduction(report):
    """Baseline bytes over the bytes the PIM system moved; None when nothing was generated."""
    if not report.token_count or not report.data_movement_bytes:
        return None
    return float(report.baseline_bytes) / report.data_movement_bytes


class RunReport(object):
    """
    Statistics of one run.

    :ivar model:           (:class:`pimgpt.models.GptModelConfig`)
    :ivar token_count:     (int)
    :ivar cfg:             (:class:`pimgpt.config.SystemConfig`)
    :ivar trace:           (:class:`pimgpt.trace.SimTrace`)
    :ivar energy:          (:class:`pimgpt.energy.EnergyReport`)
    :ivar violations:      (list of str) trace checker findings, detail runs only
    """

    def __init__(self, model, token_count, cfg, trace, energy, violations=()):
        self.model = model
        self.token_count = token_count
        self.cfg = cfg
        self.trace = trace
        self.energy = energy
        self.violations = list(violations)
        self.baseline_bytes = baseline_bytes(model, token_count)

    @property
    def total_latency(self):
        """seconds"""
        return self.trace.final_clock * 1e-12

    @property
    def token_latency(self):
        return [ps * 1e-12 for ps in self.trace.token_latency_ps]

    @property
    def breakdown(self):
        """Latency per category, seconds."""
        return {c: self.trace.breakdown[c] * 1e-12 for c in CATEGORIES}

    @property
    def row_hit_rate(self):
        return self.trace.row_hit_rate

    @property
    def data_movement_bytes(self):
        return self.trace.data_movement_bytes

    @property
    def data_movement_reduction(self):
        return data_movement_reduction(self)

    def as_dict(self):
        return {
            'model': self.model.name,
            'token_count': self.token_count,
            'total_latency_s': self.total_latency,
            'token_latency_s': self.token_latency,
            'breakdown_s': self.breakdown,
            'row_hit_rate': self.row_hit_rate,
            'data_movement_bytes': self.data_movement_bytes,
            'baseline_bytes': self.baseline_bytes,
            'data_movement_reduction': self.data_movement_reduction,
            'commands': dict(self.trace.counts),
            'refreshes': sum(self.trace.channel_refs),
            'energy_j': self.energy.as_dict(),
            'violations': self.violations,
            'config': self.cfg.to_dict(),
        }

    def _serialize(self):
        """metric,value CSV lines of the scalar statistics."""
        out = io.StringIO()
        writer = csv.writer(out, lineterminator='\n')
        writer.writerow(('metric', 'value'))
        writer.writerow(('model', self.model.name))
        writer.writerow(('token_count', self.token_count))
        writer.writerow(('total_latency_s', repr(self.total_latency)))
        for c, v in sorted(self.breakdown.items()):
            writer.writerow(('breakdown.%s_s' % c, repr(v)))
        writer.writerow(('row_hit_rate', repr(self.row_hit_rate)))
        writer.writerow(('data_movement_bytes', self.data_movement_bytes))
        reduction = self.data_movement_reduction
        writer.writerow(('data_movement_reduction', 'n/a' if reduction is None else repr(reduction)))
        for name, value in sorted(self.energy.as_dict().items()):
            if not isinstance(value, dict):
                writer.writerow(('energy.%s_j' % name, repr(value)))
        for i, t in enumerate(self.token_latency):
            writer.writerow(('token_latency_s.%d' % i, repr(t)))
        return out.getvalue().splitlines()

    def write(self, outfname, fmt='json'):
        with open(outfname, 'w') as outf:
            if fmt == 'json':
                json.dump(self.as_dict(), outf, indent=1, sort_keys=True)
            else:
                outf.write('\n'.join(self._serialize()))
            outf.write('\n')

    def summary_lines(self):
        lines = ['%s, %d tokens: %.6f s' % (self.model.name, self.token_count, self.total_latency)]
        total = self.trace.final_clock or 1
        for c in CATEGORIES:
            lines.append('  %-10s %12.6f s %6.2f%%' % (c, self.breakdown[c], 100.0 * self.trace.breakdown[c] / total))
        lines.append('  row hit rate %.4f' % self.row_hit_rate)
        reduction = self.data_movement_reduction
        lines.append('  data movement %d B, reduction %s' % (self.data_movement_bytes,
                                                            'n/a' if reduction is None else '%.1fx' % reduction))
        lines.append('  energy %.6g J' % self.energy.total)
        return lines

    def __repr__(self):
        return '<%s %s x%d %.4g s>' % (self.__class__.__name__, self.model.name, self.token_count, self.total_latency)


def _resolve_model(model):
    if isinstance(model, GptModelConfig):
        return model
    return lookup_model(model)


def run(model, tokens, overrides=None, cfg=None, detail=False, check=None, on_token=None):
    """
    Simulate generating `tokens` tokens.

    :param model:     (:class:`pimgpt.models.GptModelConfig` or str) model or catalog name
    :param overrides: (dict) dotted config overrides, see :meth:`pimgpt.config.SystemConfig.override`
    :param detail:    (bool) record every command; the trace is checked unless `check` is False
    :param on_token:  (callable) listener for :meth:`pimgpt.engine.Simulator.token_done`
    :returns: (:class:`RunReport`)
    """
    model = _resolve_model(model)
    if tokens < 0:
        raise ValueError('tokens must not be negative')
    if tokens > model.max_tokens:
        model = model.with_max_tokens(tokens)
    cfg = cfg or SystemConfig()
    if overrides:
        cfg = cfg.override(overrides)
    log.info("Running %s for %d tokens (%d channels, mac_width %d, ASIC %.3g Hz, %.3g Gb/s)", model.name, tokens,
             cfg.geometry.channels, cfg.pim.mac_width, cfg.asic.clock, cfg.geometry.pin_rate)
    mmap = build_memory_map(model, cfg, model.max_tokens)
    sim = Simulator(mmap, cfg, detail=detail)
    with sim.token_done.listening(on_token):
        for step in range(tokens):
            sim.run_token(compile_token(model, mmap, cfg, step + 1))
    trace = sim.finish()
    violations = []
    if detail and check is not False:
        violations = check_trace(trace.events, cfg, trace.final_clock)
        for v in violations:
            log.warning("trace: %s", v)
    report = RunReport(model, tokens, cfg, trace, accumulate(trace, cfg), violations)
    log.info("%s: %.6f s, row hit rate %.4f", model.name, report.total_latency, report.row_hit_rate)
    return report


#
# Sweeps
#

SWEEP_COLUMNS = ('value', 'latency_s', 'energy_j', 'row_hit_rate', 'data_movement_reduction',
                 'normalized_latency', 'normalized_energy', 'error')


def _sweep_row(job):
    model, dimension, value, tokens, cfg = job
    try:
        if dimension == 'tokens':
            report = run(model, int(value), cfg=cfg)
        else:
            report = run(model, tokens, overrides={SWEEP_DIMENSIONS[dimension]: value}, cfg=cfg)
    except Exception as e:
        return {'value': value, 'error': '%s: %s' % (e.__class__.__name__, e)}
    return {'value': value, 'latency_s': report.total_latency, 'energy_j': report.energy.total,
            'row_hit_rate': report.row_hit_rate, 'data_movement_reduction': report.data_movement_reduction,
            'error': ''}


class Sweep(object):
    """
    One run per value of a parameter. A container of result rows (dicts keyed by SWEEP_COLUMNS),
    in value order; normalized columns are relative to the first row.

    :param dimension: (str) one of SWEEP_DIMENSIONS
    :param values:    (list) parameter values; the first is the normalization baseline
    :param model:     (:class:`pimgpt.models.GptModelConfig` or str)
    :param tokens:    (int) tokens per run (ignored by the tokens dimension)
    """

    def __init__(self, dimension, values, model, tokens=1024, cfg=None):
        if dimension not in SWEEP_DIMENSIONS:
            raise ValueError('unknown sweep dimension "%s" (known: %s)' %
                             (dimension, ', '.join(sorted(SWEEP_DIMENSIONS))))
        if not values:
            raise ValueError('sweep needs at least one value')
        self.dimension = dimension
        self.values = list(values)
        self.model = _resolve_model(model)
        self.tokens = tokens
        self.cfg = cfg or SystemConfig()
        self.rows = []

    @event
    def progress(self, index, total, value):
        """Called as each row completes, in value order."""

    def run(self, jobs=1):
        jobs_ = [(self.model, self.dimension, v, self.tokens, self.cfg) for v in self.values]
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                results = pool.map(_sweep_row, jobs_)
                rows = self._collect(results)
        else:
            rows = self._collect(_sweep_row(job) for job in jobs_)
        self.rows = self._normalize(rows)
        return self

    def _collect(self, results):
        rows = []
        for i, row in enumerate(results):
            if row['error']:
                log.warning("sweep %s=%s failed: %s", self.dimension, row['value'], row['error'])
            rows.append(row)
            self.progress(i, len(self.values), row['value'])
        return rows

    @staticmethod
    def _normalize(rows):
        base = rows[0]
        out = []
        for row in rows:
            row = dict((c, row.get(c)) for c in SWEEP_COLUMNS)
            row['error'] = row['error'] or ''
            for col, ref in (('normalized_latency', 'latency_s'), ('normalized_energy', 'energy_j')):
                if row[ref] is not None and base.get(ref):
                    row[col] = row[ref] / base[ref]
            out.append(row)
        return out

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        for row in self.rows:
            yield row

    def __getitem__(self, item):
        return self.rows[item]

    def as_dict(self):
        return {'dimension': self.dimension, 'model': self.model.name, 'tokens': self.tokens, 'rows': self.rows}

    def _serialize(self):
        out = io.StringIO()
        writer = csv.writer(out, lineterminator='\n')
        writer.writerow(SWEEP_COLUMNS)
        for row in self.rows:
            writer.writerow(['' if row[c] is None else (repr(row[c]) if isinstance(row[c], float) else row[c])
                             for c in SWEEP_COLUMNS])
        return out.getvalue().splitlines()

    def write(self, outfname, fmt='csv'):
        with open(outfname, 'w') as outf:
            if fmt == 'json':
                json.dump(self.as_dict(), outf, indent=1, sort_keys=True)
            else:
                outf.write('\n'.join(self._serialize()))
            outf.write('\n')


def sweep(dimension, values, model, tokens=1024, cfg=None, jobs=1):
    """Run a :class:`Sweep` and return it."""
    return Sweep(dimension, values, model, tokens, cfg).run(jobs)
