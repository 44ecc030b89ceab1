"""
pimgpt.trace: Simulation trace, CSV dump and the independent timing checker

A :class:`SimTrace` always carries aggregate counters (commands, row hits, bus and ASIC busy
time, latency breakdown); command-level events are recorded only by detail-mode runs.
"""

import csv
import logging
from collections import namedtuple

from pimgpt.config import ns_to_ps

log = logging.getLogger(__name__)

__all__ = 'TraceEvent', 'SimTrace', 'check_trace', 'read_csv', 'CATEGORIES', 'STAGES', 'CSV_HEADER'


CATEGORIES = ('vmm', 'asic-arith', 'transfer', 'kv-write', 'refresh')
STAGES = ('embed', 'attention', 'projection', 'ffn', 'output')
CSV_HEADER = ('clock_ps', 'node', 'command', 'duration_ps', 'bytes', 'row_hit')
COMMANDS = ('ACT', 'PRE', 'RD', 'WR', 'REF')


TraceEvent = namedtuple('TraceEvent', CSV_HEADER)
TraceEvent.__doc__ = """One command or transaction: start clock, node path (e.g. "ch0/b3", "bus", "asic"),
command, duration, bytes moved, and whether a column access hit an already open row."""


def _stage_counters():
    return {'ACT': 0, 'PRE': 0, 'RD': 0, 'WR': 0, 'mac_rd': 0, 'bus_in_ps': 0, 'bus_out_ps': 0,
            'asic_ps': 0, 'latency_ps': 0}


class SimTrace(object):
    """
    Result of a simulation.

    :ivar detail:       (bool) whether events were recorded
    :ivar events:       (list of :class:`TraceEvent`) command events, ordered by clock (detail only)
    :ivar instructions: (list of tuple) (id, target, opcode, start_ps, end_ps) (detail only)
    :ivar counts:       (dict) command counts ACT, PRE, RD, WR, REF plus row_hits
    :ivar channel_refs: (list of int) refreshes per channel
    :ivar channel_active_ps: (list of int) active-standby time per channel
    :ivar bus_ps:       (dict) pin-busy time per direction (broadcast, collect, write_kv), summed
                        over the channels taking part
    :ivar bus_bytes:    (dict) bytes moved per direction, counted once per receiving channel
    :ivar asic_busy_ps: (dict) busy time per ASIC engine
    :ivar breakdown:    (dict) latency per category
    :ivar stages:       (dict) per-stage counters used by energy accounting
    :ivar token_latency_ps: (list of int) latency of each token step
    :ivar final_clock:  (int) ps
    """

    def __init__(self, channels, detail=False):
        self.detail = detail
        self.events = []
        self.instructions = []
        self.counts = {c: 0 for c in COMMANDS}
        self.counts['row_hits'] = 0
        self.channel_refs = [0] * channels
        self.channel_active_ps = [0] * channels
        self.bus_ps = {'broadcast': 0, 'collect': 0, 'write_kv': 0}
        self.bus_bytes = {'broadcast': 0, 'collect': 0, 'write_kv': 0}
        self.asic_busy_ps = {}
        self.breakdown = {c: 0 for c in CATEGORIES}
        self.stages = {s: _stage_counters() for s in STAGES}
        self.token_latency_ps = []
        self.final_clock = 0

    @property
    def accesses(self):
        return self.counts['RD'] + self.counts['WR']

    @property
    def row_hit_rate(self):
        """Fraction of column accesses that needed no ACT; 0 for a trace without accesses."""
        if not self.accesses:
            return 0.0
        return float(self.counts['row_hits']) / self.accesses

    @property
    def data_movement_bytes(self):
        return sum(self.bus_bytes.values())

    def record(self, clock, node, command, duration, nbytes=0, row_hit=False):
        self.events.append(TraceEvent(clock, node, command, duration, nbytes, int(bool(row_hit))))

    def sort_events(self):
        self.events.sort(key=lambda ev: ev.clock_ps)

    def __len__(self):
        return len(self.events)

    def __iter__(self):
        for ev in self.events:
            yield ev

    def _serialize(self):
        lines = [','.join(CSV_HEADER)]
        for ev in self.events:
            lines.append('%d,%s,%s,%d,%d,%d' % ev)
        return lines

    def write(self, outfname):
        """Write the events as CSV, one event per line."""
        with open(outfname, 'w') as outf:
            outf.write('\n'.join(self._serialize()))
            outf.write('\n')

    def summary(self):
        return {
            'final_clock_ps': self.final_clock,
            'commands': dict(self.counts),
            'row_hit_rate': self.row_hit_rate,
            'refreshes': sum(self.channel_refs),
            'bus_bytes': dict(self.bus_bytes),
            'breakdown_ps': dict(self.breakdown),
        }


def read_csv(fname):
    """Read a trace CSV back into a list of :class:`TraceEvent`."""
    events = []
    with open(fname, newline='') as f:
        reader = csv.reader(f)
        header = next(reader)
        if tuple(header) != CSV_HEADER:
            raise ValueError('%s: not a trace file (header %s)' % (fname, ','.join(header)))
        for row in reader:
            events.append(TraceEvent(int(row[0]), row[1], row[2], int(row[3]), int(row[4]), int(row[5])))
    return events


class _BankCheck(object):
    __slots__ = ('open_row', 'last_act', 'last_pre', 'last_col', 'last_wr')

    def __init__(self):
        self.open_row = None
        self.last_act = self.last_pre = self.last_col = self.last_wr = None


def _split_node(node):
    """"ch0/b3/r17" -> ("ch0", "ch0/b3", 17); "ch0" -> ("ch0", None, None)"""
    parts = node.split('/')
    if len(parts) == 1:
        return parts[0], None, None
    row = int(parts[2][1:]) if len(parts) > 2 else None
    return parts[0], '/'.join(parts[:2]), row


def check_trace(events, cfg, final_clock=None, refresh_slack=None):
    """
    Re-verify every timing pair and row-state rule over command events, independently of the
    engine: tRCD (ACT to column), tCCD (column to column), tRAS (ACT to PRE), tWR (WR to PRE),
    tRP (PRE to ACT or REF), tRFC (REF to anything), and refresh k of a channel within
    [k x tREFI, k x tREFI + refresh_slack], with floor(final_clock / tREFI) refreshes per channel
    when final_clock is given. Column accesses must target the open row; ACT needs a precharged
    bank and REF a fully precharged channel.

    :param events: iterable of :class:`TraceEvent` (or rows of a trace CSV)
    :param refresh_slack: (int) ps a refresh may trail its boundary; defaults to the longest wait for
                          a row span started before the boundary to finish and precharge
    :returns: list of violation messages, empty for a legal trace
    """
    t = cfg.timing
    tRCD, tRP, tCCD, tWR, tRAS, tRFC, tREFI = (ns_to_ps(v) for v in
                                               (t.tRCD, t.tRP, t.tCCD, t.tWR, t.tRAS, t.tRFC, t.tREFI))
    if refresh_slack is None:
        col = max(tCCD, int(round(1e12 / cfg.pim.pim_clock)))
        spans = -(-cfg.geometry.row_elements // cfg.pim.mac_width)
        refresh_slack = 2 * (tRAS + tWR + tRP) + tRCD + spans * col
    banks = {}
    ref_end = {}
    refs = {}
    problems = []

    def bad(constraint, ev, what=''):
        problems.append('%s violated at %s clock %d ps (%s%s)' % (constraint, ev.node, ev.clock_ps, ev.command,
                                                                  ', ' + what if what else ''))

    for ev in sorted(events, key=lambda e: e.clock_ps):
        if not ev.node.startswith('ch'):
            continue
        clock = ev.clock_ps
        ch, key, row = _split_node(ev.node)
        if ev.command == 'REF':
            k = refs.get(ch, 0) + 1
            refs[ch] = k
            if clock < k * tREFI:
                bad('tREFI', ev, 'refresh %d before %d ps' % (k, k * tREFI))
            elif clock > k * tREFI + refresh_slack:
                bad('tREFI', ev, 'refresh %d after %d ps' % (k, k * tREFI + refresh_slack))
            if clock < ref_end.get(ch, 0):
                bad('tRFC', ev, 'previous refresh still running')
            for other, b in banks.items():
                if other.split('/')[0] != ch:
                    continue
                if b.open_row is not None:
                    bad('row-state', ev, '%s has row %d open' % (other, b.open_row))
                if b.last_pre is not None and clock < b.last_pre + tRP:
                    bad('tRP', ev, other)
            ref_end[ch] = clock + tRFC
            continue
        b = banks.setdefault(key, _BankCheck())
        if clock < ref_end.get(ch, 0):
            bad('tRFC', ev, 'during refresh')
        if ev.command == 'ACT':
            if b.open_row is not None:
                bad('row-state', ev, 'row %d already open' % b.open_row)
            if b.last_pre is not None and clock < b.last_pre + tRP:
                bad('tRP', ev)
            b.open_row = row
            b.last_act = clock
            b.last_col = None
        elif ev.command in ('RD', 'WR'):
            if b.open_row is None:
                bad('row-state', ev, 'no open row')
            elif b.open_row != row:
                bad('row-state', ev, 'row %d is open' % b.open_row)
            elif clock < b.last_act + tRCD:
                bad('tRCD', ev)
            if b.last_col is not None and clock < b.last_col + tCCD:
                bad('tCCD', ev)
            b.last_col = clock
            if ev.command == 'WR':
                b.last_wr = clock
        elif ev.command == 'PRE':
            if b.open_row is None:
                bad('row-state', ev, 'no open row')
            else:
                if clock < b.last_act + tRAS:
                    bad('tRAS', ev)
                if b.last_wr is not None and b.last_wr > b.last_act and clock < b.last_wr + tWR:
                    bad('tWR', ev)
            b.open_row = None
            b.last_pre = clock
        else:
            problems.append('unknown command %s at %s' % (ev.command, ev.node))
    if final_clock is not None:
        expected = final_clock // tREFI
        channels = sorted(set(key.split('/')[0] for key in banks) | set(refs))
        for ch in channels:
            if refs.get(ch, 0) != expected:
                problems.append('tREFI violated at %s: %d refreshes by %d ps, expected %d' %
                                (ch, refs.get(ch, 0), final_clock, expected))
    return problems
