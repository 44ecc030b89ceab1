"""
pimgpt.engine: Event-driven, clock-accurate execution of an instruction stream

The PIM package is a tree of state machines: channels own banks, each bank tracks its open
row and the earliest time each command class becomes legal again. Time is kept in integer
picoseconds common to all clock domains.

Instructions are fetched in order when both the ASIC and the PIM package are idle. The two
exceptions are dispatch groups (consecutive PIM instructions with the same dependencies, one
per channel, issued together) and fused collects, whose ASIC consumers start on the first
received burst. Element-wise consumers of a MAC group's results go further and start on the
first finished row span, overlapping the group itself.

Each bank executes its span program (see :func:`pimgpt.compiler.bank_programs`) one row span
at a time under the open-row policy. Every channel refreshes all banks at each multiple of
tREFI: row spans that started before the boundary complete, the banks precharge, and REF holds
the channel for tRFC. Channels not busy at a boundary refresh on their next use.

With ``detail=True`` every command is recorded in the trace. Otherwise banks (and channels)
whose state and program coincide are simulated once, and periodic runs of row spans are
advanced in closed form; both modes produce identical statistics.
"""

import math
import logging

from pimgpt.config import ns_to_ps, channel_bandwidth
from pimgpt.compiler import bank_programs
from pimgpt.event import event
from pimgpt.trace import SimTrace

log = logging.getLogger(__name__)

__all__ = 'Simulator', 'LatencyModel', 'BankState', 'TimingViolation', \
          'simulate', 'asic_compute', 'asic_census', 'transfer', 'pipeline_span', 'ASIC_ENGINES', 'STREAMING'


class TimingViolation(Exception):
    """Exception raised when a command would break a timing or row-state constraint."""

    def __init__(self, constraint, clock, detail=''):
        msg = '%s violated at %d ps' % (constraint, clock)
        if detail:
            msg += ': ' + detail
        Exception.__init__(self, msg)
        self.constraint = constraint
        self.clock = clock


#
# ASIC and bus latency
#

# multiplies and adds per element of each ASIC block, counted from the BF16 algorithms
_EXP = (8, 8)           # k = rint(x/ln2), two-constant reduction, 5 Horner steps, 2^k
_RECIPROCAL = (7, 9)    # seed, 3 Newton-Raphson iterations, exponent scale in and out
_DIVIDE = (8, 9)
_INV_SQRT = (7, 5)      # seed subtract, half, 2 iterations of 3 multiplies and 2 adds
_TANH = (17, 19)        # e^2x, +1, divide, 1 - q
_GELU = (23, 21)        # x^3, inner polynomial, scale, tanh, x/2 (1 + t)

ASIC_ENGINES = {'softmax': 'softmax', 'layernorm': 'layernorm', 'gelu': 'gelu',
                'residual_add': 'adder', 'partial_sum': 'adder', 'argmax': 'adder'}


def asic_census(kind, n, rows=1, parts=2):
    """
    (multiplies, adds) to run ASIC block `kind` over `rows` vectors of `n` elements each.

    :param parts: (int) number of partial results combined, for partial_sum
    """
    if kind == 'softmax':
        mul = n + _EXP[0] * n + _RECIPROCAL[0] + n
        add = (n - 1) + n + _EXP[1] * n + (n - 1) + _RECIPROCAL[1]
    elif kind == 'layernorm':
        mul = 3 * n + 2 + _INV_SQRT[0]
        add = 6 * n - 1 + _INV_SQRT[1]
    elif kind == 'gelu':
        mul, add = _GELU[0] * n, _GELU[1] * n
    elif kind == 'tanh':
        mul, add = _TANH[0] * n, _TANH[1] * n
    elif kind == 'exp':
        mul, add = _EXP[0] * n, _EXP[1] * n
    elif kind == 'reciprocal':
        mul, add = _RECIPROCAL[0] * n, _RECIPROCAL[1] * n
    elif kind == 'divide':
        mul, add = _DIVIDE[0] * n, _DIVIDE[1] * n
    elif kind == 'inv_sqrt':
        mul, add = _INV_SQRT[0] * n, _INV_SQRT[1] * n
    elif kind == 'residual_add':
        mul, add = 0, n
    elif kind == 'partial_sum':
        mul, add = 0, (parts - 1) * n
    elif kind == 'argmax':
        mul, add = 0, n - 1
    else:
        raise ValueError('unknown ASIC operation %s' % kind)
    return mul * rows, add * rows


def asic_compute(kind, element_count, cfg, rows=1, parts=2):
    """ASIC cycles for an operation: its multiplies and adds spread over the engine's units, at least 1."""
    if element_count < 1:
        raise ValueError('element_count must be at least 1')
    mul, add = asic_census(kind, element_count, rows, parts)
    cycles = max(-(-mul // cfg.asic.num_multipliers), -(-add // cfg.asic.num_adders))
    return max(cycles, 1)


def transfer(nbytes, direction, cfg):
    """Bus time in ps to move `nbytes` in `direction` (broadcast, collect or write_kv) at one channel's bandwidth."""
    if nbytes < 1:
        raise ValueError('transfer of %d bytes' % nbytes)
    if direction not in ('broadcast', 'collect', 'write_kv'):
        raise ValueError('unknown transfer direction %s' % direction)
    return _ceil(nbytes * 1e12 / channel_bandwidth(cfg))


def _ceil(x):
    return int(math.ceil(x - 1e-6))


# ASIC blocks that work element by element, so they can start before their whole input arrived
STREAMING = frozenset(('partial_sum', 'residual_add', 'gelu'))


def pipeline_span(chunks, *totals):
    """
    Time for a job cut into `chunks` equal pieces to pass through stages that take `totals`
    for the whole job, each piece entering a stage as soon as it left the previous one.
    One chunk runs the stages back to back.
    """
    k = max(int(chunks), 1)
    steps = [float(t) / k for t in totals]
    return _ceil(sum(steps) + (k - 1) * max(steps))


class LatencyModel(object):
    """
    Command durations of one configuration, in ps.

    :ivar col: (int) column access period: one access delivers mac_width elements
    """

    def __init__(self, cfg):
        t = cfg.timing
        self.tRCD = ns_to_ps(t.tRCD)
        self.tRP = ns_to_ps(t.tRP)
        self.tCCD = ns_to_ps(t.tCCD)
        self.tWR = ns_to_ps(t.tWR)
        self.tRAS = ns_to_ps(t.tRAS)
        self.tRFC = ns_to_ps(t.tRFC)
        self.tREFI = ns_to_ps(t.tREFI)
        self.pim_cycle = int(round(1e12 / cfg.pim.pim_clock))
        self.col = max(self.tCCD, self.pim_cycle)
        # every row span drains the adder tree; only the drain after a bank's last span is not
        # covered by the next span's accesses or PRE/ACT, so a MAC instruction exposes one
        self.drain = cfg.pim.drain_cycles * self.pim_cycle
        self.asic_cycle = 1e12 / cfg.asic.clock
        self.access_bytes = 2 * cfg.pim.mac_width
        self.cfg = cfg

    def transfer(self, nbytes, direction='broadcast'):
        return transfer(nbytes, direction, self.cfg)

    def asic(self, instr):
        args = instr.args
        if instr.opcode == 'softmax':
            cycles = asic_compute('softmax', args['tokens'], self.cfg, rows=args['heads'])
        elif instr.opcode == 'partial_sum':
            cycles = asic_compute('partial_sum', max(args['elements'], 1), self.cfg, parts=args['parts'])
        else:
            cycles = asic_compute(instr.opcode, instr.length, self.cfg)
        return _ceil(cycles * self.asic_cycle)


#
# Banks
#

class BankState(object):
    """
    Row buffer and earliest legal times of one bank.

    :ivar open_row: (int) None when precharged
    :ivar ready:    (int) end of the bank's last operation
    """
    __slots__ = ('open_row', 'ready', 'rp_ok', 'rfc_ok', 'rcd_ok', 'ccd_ok', 'ras_ok', 'wr_ok')

    def __init__(self):
        self.open_row = None
        self.ready = self.rp_ok = self.rfc_ok = self.rcd_ok = self.ccd_ok = self.ras_ok = self.wr_ok = 0

    def copy(self):
        other = BankState()
        for name in self.__slots__:
            setattr(other, name, getattr(self, name))
        return other

    def key(self, origin, row_origin=0):
        """State relative to `origin`; times at or before it are equivalent."""
        return (None if self.open_row is None else self.open_row - row_origin,
                max(self.ready - origin, 0), max(self.rp_ok - origin, 0), max(self.rfc_ok - origin, 0),
                max(self.rcd_ok - origin, 0), max(self.ccd_ok - origin, 0), max(self.ras_ok - origin, 0),
                max(self.wr_ok - origin, 0))

    def shift(self, dt, drow):
        for name in self.__slots__[1:]:
            setattr(self, name, getattr(self, name) + dt)
        if self.open_row is not None:
            self.open_row += drow


def _check_idle(st, clock):
    if clock < st.ready:
        raise TimingViolation('busy', clock, 'bank in Process until %d ps' % st.ready)


def _span(lat, st, row, k, write, close, t, rec=None, node=''):
    """
    One row span: bring `row` into the row buffer if needed, then `k` column accesses at the
    column period. Returns (ACTs, PREs, ACT time or None).
    """
    acts = pres = 0
    act_at = None
    if st.ready > t:
        t = st.ready
    if st.open_row != row:
        if st.open_row is not None:
            p = max(t, st.ras_ok, st.wr_ok)
            if rec:
                rec(p, '%s/r%d' % (node, st.open_row), 'PRE', lat.tRP)
            st.rp_ok = p + lat.tRP
            st.open_row = None
            pres += 1
        a = max(t, st.rp_ok, st.rfc_ok)
        if rec:
            rec(a, '%s/r%d' % (node, row), 'ACT', lat.tRCD)
        st.open_row = row
        st.rcd_ok = a + lat.tRCD
        st.ras_ok = a + lat.tRAS
        acts = 1
        act_at = a
    c0 = max(t, st.rcd_ok, st.ccd_ok)
    if rec:
        cmd = 'WR' if write else 'RD'
        path = '%s/r%d' % (node, row)
        for i in range(k):
            rec(c0 + i * lat.col, path, cmd, lat.col, lat.access_bytes, not (i == 0 and acts))
    last = c0 + (k - 1) * lat.col
    st.ccd_ok = last + lat.col
    st.ready = last + lat.col
    if write:
        st.wr_ok = last + lat.tWR
    if close:
        p = max(st.ready, st.ras_ok, st.wr_ok)
        if rec:
            rec(p, '%s/r%d' % (node, row), 'PRE', lat.tRP)
        st.rp_ok = p + lat.tRP
        st.open_row = None
        st.ready = p
        pres += 1
    return acts, pres, act_at


class _BankCursor(object):
    """Position of one bank (or one class of identical banks) in its span program."""

    def __init__(self, lat, st, runs, fast, rec=None, node=''):
        self.lat = lat
        self.st = st
        self.runs = runs
        self.fast = fast
        self.rec = rec
        self.node = node
        self.ri = self.rep = self.j = 0
        # ACT, PRE, RD, WR
        self.stats = [0, 0, 0, 0]
        self.worked = False

    @property
    def done(self):
        return self.ri >= len(self.runs)

    def advance(self, S, B):
        """Execute spans that start before `B`; returns (finished, first ACT time or None)."""
        lat, st, stats = self.lat, self.st, self.stats
        first_act = None
        prev = None
        while self.ri < len(self.runs):
            run = self.runs[self.ri]
            write = run.kind == 'wr'
            n = len(run.pattern)
            while self.rep < run.count:
                base = run.row0 + self.rep * run.stride
                while self.j < n:
                    start = st.ready if st.ready > S else S
                    if start >= B:
                        return False, first_act
                    k = run.pattern[self.j]
                    acts, pres, act_at = _span(lat, st, base + self.j, k, write, run.close, start, self.rec, self.node)
                    if act_at is not None and first_act is None:
                        first_act = act_at
                    stats[0] += acts
                    stats[1] += pres
                    stats[2 if not write else 3] += k
                    self.worked = True
                    self.j += 1
                self.j = 0
                self.rep += 1
                if not self.fast or self.rep >= run.count:
                    continue
                key = st.key(st.ready, base)
                snap = (key, st.ready, tuple(stats))
                if prev is not None and prev[0] == key:
                    period = st.ready - prev[1]
                    if period > 0:
                        m = min(run.count - self.rep, (B - st.ready) // period)
                        if m > 0:
                            delta = [a - b for a, b in zip(stats, prev[2])]
                            st.shift(m * period, m * run.stride)
                            for i in range(4):
                                stats[i] += m * delta[i]
                            self.rep += m
                            snap = (key, st.ready, tuple(stats))
                prev = snap
            self.ri += 1
            self.rep = 0
            prev = None
        return True, first_act


_TIMES = BankState.__slots__[1:]
_HISTORY_LIMIT = 200000


class _ChannelOutcome(object):
    """Result of running one channel's share of a dispatch group."""

    def __init__(self):
        self.accounting = []
        self.stats = [0, 0, 0, 0]
        self.hits = 0
        self.end = None
        self.stall = 0
        self.refresh_pres = 0


#
# Simulator
#

class Simulator(object):
    """
    Executes instruction streams, token after token, over one memory map and configuration.

    :param mmap:   (:class:`pimgpt.mapper.MemoryMap`)
    :param cfg:    (:class:`pimgpt.config.SystemConfig`)
    :param detail: (bool) record every command in the trace
    :ivar clock:   (int) current time, ps
    :ivar trace:   (:class:`pimgpt.trace.SimTrace`)
    """

    def __init__(self, mmap, cfg, detail=False):
        self.mmap = mmap
        self.cfg = cfg
        self.detail = detail
        self.lat = LatencyModel(cfg)
        geom = cfg.geometry
        self.channels = geom.channels
        self.banks_per_channel = geom.banks_per_channel
        self.banks = [[BankState() for _ in range(geom.banks_per_channel)] for _ in range(geom.channels)]
        self.next_ref = [1] * geom.channels
        self.active_since = [None] * geom.channels
        self.clock = 0
        self.trace = SimTrace(geom.channels, detail)
        self.tokens = 0
        self.finished = False
        self._produced = None
        self._programs = {}
        self._history = {}

    @event
    def token_done(self, index, clock_ps):
        """Called after each token step with its index and the completion time."""

    def _rec(self):
        return self.trace.record if self.detail else None

    #
    # refresh
    #

    def _refresh(self, ch, B, outcome):
        lat = self.lat
        rec = self._rec()
        t = B
        for b, st in enumerate(self.banks[ch]):
            if st.open_row is not None:
                p = max(st.ready, st.ras_ok, st.wr_ok)
                if rec:
                    rec(p, 'ch%d/b%d/r%d' % (ch, b, st.open_row), 'PRE', lat.tRP)
                st.open_row = None
                st.rp_ok = p + lat.tRP
                if p > st.ready:
                    st.ready = p
                outcome.refresh_pres += 1
            t = max(t, st.ready, st.rp_ok, st.rfc_ok)
        if rec:
            rec(t, 'ch%d' % ch, 'REF', lat.tRFC)
        end = t + lat.tRFC
        for st in self.banks[ch]:
            st.rfc_ok = end
            if st.ready < end:
                st.ready = end
        self.next_ref[ch] += 1
        outcome.accounting.append(('ref', t))
        return B, end

    def _catch_up(self, ch, until, outcome):
        windows = []
        while self.next_ref[ch] * self.lat.tREFI <= until:
            windows.append(self._refresh(ch, self.next_ref[ch] * self.lat.tREFI, outcome))
        return windows

    def _account(self, ch, outcome):
        trace = self.trace
        for kind, t in outcome.accounting:
            if kind == 'act':
                if self.active_since[ch] is None:
                    self.active_since[ch] = t
            else:
                if self.active_since[ch] is not None:
                    trace.channel_active_ps[ch] += max(t - self.active_since[ch], 0)
                    self.active_since[ch] = None
                trace.channel_refs[ch] += 1
                trace.counts['REF'] += 1
        trace.counts['PRE'] += outcome.refresh_pres

    #
    # PIM instructions
    #

    def _run_channel(self, ch, programs, S):
        """Run the span programs {bank: runs} of channel `ch` from time S."""
        lat = self.lat
        outcome = _ChannelOutcome()
        windows = []
        banks = self.banks[ch]
        rec = self._rec()
        classes = []
        if self.detail:
            for b in sorted(programs):
                classes.append((b, [b]))
        else:
            seen = {}
            for b in sorted(programs):
                sig = (banks[b].key(S), tuple(programs[b]))
                if sig in seen:
                    seen[sig][1].append(b)
                else:
                    seen[sig] = (b, [b])
                    classes.append(seen[sig])
        cursors = [(_BankCursor(lat, banks[b], programs[b], not self.detail, rec, 'ch%d/b%d' % (ch, b)), members)
                   for b, members in classes]
        while True:
            B = self.next_ref[ch] * lat.tREFI
            finished = True
            first = None
            for cursor, _ in cursors:
                ok, act = cursor.advance(S, B)
                finished = finished and ok
                if act is not None and (first is None or act < first):
                    first = act
            if first is not None:
                outcome.accounting.append(('act', first))
            if finished:
                break
            self._sync(ch, cursors)
            windows.append(self._refresh(ch, B, outcome))
        self._sync(ch, cursors)
        end = S
        for cursor, members in cursors:
            n = len(members)
            for i in range(4):
                outcome.stats[i] += n * cursor.stats[i]
            if cursor.worked and cursor.st.ready > end:
                end = cursor.st.ready
        outcome.hits = outcome.stats[2] + outcome.stats[3] - outcome.stats[0]
        outcome.end = end
        for start, stop in windows:
            outcome.stall += max(0, min(stop, end) - max(start, S))
        return outcome

    def _sync(self, ch, cursors):
        banks = self.banks[ch]
        for cursor, members in cursors:
            for b in members[1:]:
                banks[b] = cursor.st.copy()

    def _copy_channel(self, src, dst):
        self.banks[dst] = [st.copy() for st in self.banks[src]]
        self.next_ref[dst] = self.next_ref[src]

    def _channel_program(self, instr):
        """({bank: runs}, hashable shape) of one PIM instruction; weight MACs are cached across tokens."""
        key = None
        if 'panel' in instr.args:
            key = (instr.operand, instr.args['panel'], instr.channel)
            if key in self._programs:
                return self._programs[key]
        progs = {bank: runs for (_, bank), runs in bank_programs(instr, self.mmap, self.cfg).items()}
        entry = progs, tuple((b, tuple(runs)) for b, runs in sorted(progs.items()))
        if key is not None:
            self._programs[key] = entry
        return entry

    def _remember(self, ch, key, progs, outcome, S):
        """Keep a refresh-free channel run relative to its start for :meth:`_replay`."""
        if outcome.stall or outcome.refresh_pres or any(kind == 'ref' for kind, _ in outcome.accounting):
            return
        if len(self._history) >= _HISTORY_LIMIT:
            self._history.clear()
        banks = self.banks[ch]
        changed = tuple((b, banks[b].open_row, tuple(getattr(banks[b], name) - S for name in _TIMES))
                        for b in sorted(progs))
        self._history[key] = (outcome.end - S, changed, tuple(t - S for _, t in outcome.accounting),
                              tuple(outcome.stats), outcome.hits)

    def _replay(self, ch, key, S):
        """
        Repeat a remembered run of the same program from equivalent bank states, shifted to
        start at S; None when there is none or a refresh boundary falls before its end.
        """
        entry = self._history.get(key)
        if entry is None:
            return None
        end, changed, acts, stats, hits = entry
        if S + end > self.next_ref[ch] * self.lat.tREFI:
            return None
        banks = self.banks[ch]
        for b, open_row, times in changed:
            st = banks[b]
            st.open_row = open_row
            for name, dt in zip(_TIMES, times):
                # times at or before the start were untouched and are equivalent already
                if dt > 0:
                    setattr(st, name, S + dt)
        outcome = _ChannelOutcome()
        outcome.accounting = [('act', S + dt) for dt in acts]
        outcome.stats = list(stats)
        outcome.hits = hits
        outcome.end = S + end
        return outcome

    def issue_group(self, group):
        """Issue PIM instructions together (one per channel); returns the group's end time."""
        S = self.clock
        trace = self.trace
        programs = {}
        shapes = {}
        for instr in group:
            programs[instr.channel], shapes[instr.channel] = self._channel_program(instr)
        memo = {}
        end = S
        stall = 0
        opcode = group[0].opcode
        for instr in group:
            ch = instr.channel
            progs = programs.get(ch, {})
            due = _ChannelOutcome()
            windows = self._catch_up(ch, S, due)
            self._account(ch, due)
            sig = None
            if not self.detail:
                states = tuple(st.key(S) for st in self.banks[ch])
                sig = (states, self.next_ref[ch], shapes[ch])
            if sig is not None and sig in memo:
                src, outcome = memo[sig]
                self._copy_channel(src, ch)
            else:
                outcome = self._replay(ch, (states, shapes[ch]), S) if sig is not None else None
                if outcome is None:
                    outcome = self._run_channel(ch, progs, S)
                    if sig is not None:
                        self._remember(ch, (states, shapes[ch]), progs, outcome, S)
                if sig is not None:
                    memo[sig] = (ch, outcome)
            self._account(ch, outcome)
            acts, pres, rds, wrs = outcome.stats
            counts = trace.counts
            counts['ACT'] += acts
            counts['PRE'] += pres
            counts['RD'] += rds
            counts['WR'] += wrs
            counts['row_hits'] += outcome.hits
            stage = trace.stages[instr.stage]
            stage['ACT'] += acts
            stage['PRE'] += pres
            stage['RD'] += rds
            stage['WR'] += wrs
            if opcode == 'mac':
                stage['mac_rd'] += rds
            ch_end = outcome.end
            if opcode == 'mac' and ch_end > S:
                ch_end += self.lat.drain
            end = max(end, ch_end)
            late = sum(max(0, min(stop, ch_end) - S) for _, stop in windows)
            stall = max(stall, outcome.stall + late)
        duration = end - S
        stall = min(stall, duration)
        trace.breakdown['refresh'] += stall
        category = 'kv-write' if opcode in ('write_key', 'write_value') else 'vmm'
        trace.breakdown[category] += duration - stall
        self._advance(group, S, end)
        spans = [sum(run.rows for run in runs) for progs in programs.values() for runs in progs.values()]
        self._produced = (frozenset(instr.id for instr in group), S, end, max(spans or [1]))
        return end

    def _advance(self, instrs, start, end):
        if self.detail:
            for instr in instrs:
                self.trace.instructions.append((instr.id, instr.target, instr.opcode, start, end))
        self.trace.stages[instrs[-1].stage]['latency_ps'] += end - start
        self.clock = end

    #
    # bus and ASIC instructions
    #

    def _bus(self, instr):
        S = self.clock
        dur = self.lat.transfer(instr.nbytes, instr.opcode)
        self._bus_stats(instr, dur)
        self.trace.breakdown['transfer'] += dur
        self._advance([instr], S, S + dur)

    def _bus_stats(self, instr, dur):
        trace = self.trace
        moved = instr.nbytes * instr.copies
        # a broadcast drives every receiving channel's pins for the whole transfer
        trace.bus_ps[instr.opcode] += dur * instr.copies
        trace.bus_bytes[instr.opcode] += moved
        stage = trace.stages[instr.stage]
        stage['bus_out_ps' if instr.opcode == 'collect' else 'bus_in_ps'] += dur * instr.copies
        if self.detail:
            trace.record(self.clock, 'bus', instr.opcode, dur, moved)

    def _asic_stats(self, instr, dur, start):
        trace = self.trace
        engine = ASIC_ENGINES[instr.opcode]
        trace.asic_busy_ps[engine] = trace.asic_busy_ps.get(engine, 0) + dur
        trace.stages[instr.stage]['asic_ps'] += dur
        if self.detail:
            trace.record(start, 'asic', instr.opcode, dur)

    def _asic(self, instr):
        S = self.clock
        dur = self.lat.asic(instr)
        self._asic_stats(instr, dur, S)
        self.trace.breakdown['asic-arith'] += dur
        self._advance([instr], S, S + dur)

    def _fused(self, collect, consumers, source=None):
        """
        Collect pipelined with its ASIC consumers: the ASIC starts on the first channel burst.
        When every consumer works element by element and `source` is the (ids, start, end,
        row spans) of the MAC group that produced the data, results leave the banks span by
        span while the MACs still run, so transfer and ASIC work overlap the group too.
        """
        S = self.clock
        c = self.lat.transfer(collect.nbytes, 'collect')
        costs = [self.lat.asic(instr) for instr in consumers]
        a = sum(costs)
        n = max(int(collect.args.get('channels', 1)), 1)
        end = S + pipeline_span(n, c, a)
        start, first, bus_left = S, S + _ceil(float(c) / n), c
        if source is not None and all(instr.opcode in STREAMING for instr in consumers):
            _, G, E, spans = source
            k = max(spans, 1)
            streamed = G + pipeline_span(k, E - G, c, a)
            if streamed < end:
                end = streamed
                start = G + _ceil(float(E - G) / k)
                first = start + _ceil(float(c) / k)
                bus_left = max(_ceil(float(c) / k), c - max(0, S - start))
        exposed = end - S
        transfer_ps = min(exposed, bus_left)
        self._bus_stats(collect, c)
        for instr, cost in zip(consumers, costs):
            self._asic_stats(instr, cost, first)
        self.trace.breakdown['transfer'] += transfer_ps
        self.trace.breakdown['asic-arith'] += exposed - transfer_ps
        if self.detail:
            self.trace.instructions.append((collect.id, collect.target, collect.opcode, start, start + c))
            for instr in consumers:
                self.trace.instructions.append((instr.id, instr.target, instr.opcode, first, end))
        self.trace.stages[consumers[0].stage]['latency_ps'] += exposed
        self.clock = end

    #
    # streams
    #

    def execute(self, stream):
        """Run every instruction of `stream` in order, from the current clock."""
        instrs = stream.instructions
        i = 0
        last = None
        while i < len(instrs):
            instr = instrs[i]
            if instr.target == 'pim':
                j = i + 1
                while j < len(instrs) and instrs[j].target == 'pim' and instrs[j].deps == instr.deps \
                        and instrs[j].opcode == instr.opcode and instrs[j].node == instr.node:
                    j += 1
                self.issue_group(instrs[i:j])
                last = self._produced
                i = j
                continue
            if instr.target == 'bus':
                if instr.fused and i + 1 < len(instrs) and instrs[i + 1].target == 'asic':
                    j = i + 2
                    if instrs[i + 1].opcode in STREAMING:
                        while j < len(instrs) and instrs[j].target == 'asic' and instrs[j].opcode in STREAMING \
                                and instrs[j - 1].id in instrs[j].deps:
                            j += 1
                    source = last if last is not None and set(instr.deps) <= last[0] else None
                    self._fused(instr, instrs[i + 1:j], source)
                    i = j
                else:
                    self._bus(instr)
                    i += 1
            elif instr.target == 'asic':
                self._asic(instr)
                i += 1
            else:
                raise ValueError('instruction %d: unknown target %s' % (instr.id, instr.target))
            last = None
        return self.clock

    def run_token(self, stream):
        """Execute one token step's stream; records its latency and fires :meth:`token_done`."""
        start = self.clock
        self.execute(stream)
        self.trace.token_latency_ps.append(self.clock - start)
        self.token_done(self.tokens, self.clock)
        log.debug("token %d done at %d ps (%d ps)", self.tokens, self.clock, self.clock - start)
        self.tokens += 1
        return self.clock - start

    def finish(self):
        """Refresh idle channels up to the final clock, close the books, return the trace."""
        if self.finished:
            return self.trace
        for ch in range(self.channels):
            outcome = _ChannelOutcome()
            self._catch_up(ch, self.clock, outcome)
            self._account(ch, outcome)
            if self.active_since[ch] is not None and self.clock > self.active_since[ch]:
                self.trace.channel_active_ps[ch] += self.clock - self.active_since[ch]
                self.active_since[ch] = None
        self.trace.final_clock = self.clock
        if self.detail:
            self.trace.sort_events()
        self.finished = True
        return self.trace

    #
    # single-command probes
    #

    def node_state(self, ch, bank, clock):
        """("Idle" or "Process", next_time, open_row) of a bank at `clock`."""
        st = self.banks[ch][bank]
        return ('Process' if st.ready > clock else 'Idle'), st.ready, st.open_row

    def issue_command(self, node, cmd, clock):
        """
        Issue one DRAM command at `clock` on bank `node` = (channel, bank), or REF on a channel
        with node = (channel, None).

        :returns: (int) completion time; the bank is in Process until then
        :raises TimingViolation: naming the violated constraint
        """
        lat = self.lat
        ch, bank = node
        kind = cmd.kind
        if kind == 'REF':
            for st in self.banks[ch]:
                if st.open_row is not None:
                    raise TimingViolation('row-state', clock, 'REF with a row open')
                if clock < st.rp_ok:
                    raise TimingViolation('tRP', clock)
                if clock < st.rfc_ok:
                    raise TimingViolation('tRFC', clock)
                _check_idle(st, clock)
            done = clock + lat.tRFC
            for st in self.banks[ch]:
                st.rfc_ok = st.ready = done
            self.trace.counts['REF'] += 1
            self.trace.channel_refs[ch] += 1
            if self.detail:
                self.trace.record(clock, 'ch%d' % ch, 'REF', lat.tRFC)
            return done
        st = self.banks[ch][bank]
        hit = False
        if kind == 'ACT':
            if st.open_row is not None:
                raise TimingViolation('row-state', clock, 'ACT with row %d open' % st.open_row)
            if clock < st.rp_ok:
                raise TimingViolation('tRP', clock)
            if clock < st.rfc_ok:
                raise TimingViolation('tRFC', clock)
            _check_idle(st, clock)
            st.open_row = cmd.row
            st.rcd_ok = clock + lat.tRCD
            st.ras_ok = clock + lat.tRAS
            done = clock + lat.tRCD
            duration = lat.tRCD
        elif kind in ('RD', 'WR'):
            if st.open_row != cmd.row:
                raise TimingViolation('row-state', clock, 'row %s is not open' % cmd.row)
            if clock < st.rcd_ok:
                raise TimingViolation('tRCD', clock)
            if clock < st.ccd_ok:
                raise TimingViolation('tCCD', clock)
            _check_idle(st, clock)
            hit = st.ccd_ok > st.rcd_ok - lat.tRCD
            st.ccd_ok = clock + lat.col
            if kind == 'WR':
                st.wr_ok = clock + lat.tWR
            done = clock + lat.col
            duration = lat.col
            if hit:
                self.trace.counts['row_hits'] += 1
        elif kind == 'PRE':
            if st.open_row is None:
                raise TimingViolation('row-state', clock, 'PRE with no open row')
            if clock < st.ras_ok:
                raise TimingViolation('tRAS', clock)
            if clock < st.wr_ok:
                raise TimingViolation('tWR', clock)
            _check_idle(st, clock)
            st.open_row = None
            st.rp_ok = clock + lat.tRP
            done = clock + lat.tRP
            duration = lat.tRP
        else:
            raise TimingViolation('command', clock, 'unknown command %s' % kind)
        st.ready = done
        self.trace.counts[kind] += 1
        if self.detail:
            row = cmd.row if kind != 'PRE' else (cmd.row if cmd.row is not None else -1)
            self.trace.record(clock, 'ch%d/b%d/r%d' % (ch, bank, row), kind, duration,
                              lat.access_bytes if kind in ('RD', 'WR') else 0, hit)
        return done


def simulate(stream, mmap, cfg, detail=False):
    """
    Execute one instruction stream from an idle system.

    :returns: (:class:`pimgpt.trace.SimTrace`)
    """
    sim = Simulator(mmap, cfg, detail)
    sim.execute(stream)
    return sim.finish()
