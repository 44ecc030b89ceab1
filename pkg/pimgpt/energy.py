"""
pimgpt.energy: DRAM, PIM MAC and ASIC energy of a simulation trace

DRAM energy follows the usual IDD x VDD x time accounting over the command counts and the
per-channel standby times; the MAC units and the ASIC are charged their synthesized power over
their busy time (idle ASIC engines are power gated).
"""

import logging

from pimgpt.config import ns_to_ps
from pimgpt.trace import STAGES

log = logging.getLogger(__name__)

__all__ = 'EnergyReport', 'AccountingException', 'command_energy', 'accumulate', 'COMPONENTS', 'FORMULAS'


COMPONENTS = ('dram_background', 'dram_act_pre', 'dram_read', 'dram_write', 'dram_refresh',
              'pim_mac', 'asic', 'transfer')

FORMULAS = (
    'background = VDD x (IDD3N x active-standby time + IDD2N x precharge-standby time), per channel',
    'ACT/PRE pair = VDD x (IDD0 - IDD2N) x (tRAS + tRP), at least 0',
    'RD = VDD x (IDD4R - IDD3N) x tCCD; WR = VDD x (IDD4W - IDD3N) x tCCD',
    'REF = VDD x IDD5B x tRFC',
    'transfer = VDD x (IDD4W - IDD3N) x time in per receiving channel, VDD x (IDD4R - IDD3N) x time out',
    'MAC = mac_power x (mac_width / 16) / banks_per_channel per busy bank MAC unit (linear in width: assumption)',
    'ASIC = power x busy time of each engine (power gated when idle)',
)

_PS = 1e-12
_MA = 1e-3


class AccountingException(Exception):
    """Exception raised for a trace entry that has no energy model."""
    pass


def _act_pre(current, timing):
    delta = current.IDD0 - current.IDD2N
    if delta < 0:
        delta = 0.0
    return current.VDD * delta * _MA * (ns_to_ps(timing.tRAS) + ns_to_ps(timing.tRP)) * _PS


def command_energy(ev, current, timing=None):
    """
    Energy in joules of one command event.

    An ACT carries the whole ACT/PRE pair (which needs `timing`), so PRE is free. RD, WR and REF
    are charged over the event's duration.

    :param ev:      (:class:`pimgpt.trace.TraceEvent`)
    :param current: (:class:`pimgpt.config.CurrentProfile`)
    :param timing:  (:class:`pimgpt.config.TimingConstraints`)
    :raises AccountingException: for a command without an energy model
    """
    cmd = ev.command
    duration = ev.duration_ps * _PS
    if cmd == 'ACT':
        if timing is None:
            raise AccountingException('ACT energy needs the timing constraints')
        return _act_pre(current, timing)
    elif cmd == 'PRE':
        return 0.0
    elif cmd == 'RD':
        return current.VDD * (current.IDD4R - current.IDD3N) * _MA * duration
    elif cmd == 'WR':
        return current.VDD * (current.IDD4W - current.IDD3N) * _MA * duration
    elif cmd == 'REF':
        return current.VDD * current.IDD5B * _MA * duration
    raise AccountingException('no energy model for command %s at %s' % (cmd, ev.node))


class EnergyReport(object):
    """
    Energy of a run, in joules.

    :ivar dram_background: (float)
    :ivar dram_act_pre:    (float)
    :ivar dram_read:       (float)
    :ivar dram_write:      (float)
    :ivar dram_refresh:    (float)
    :ivar pim_mac:         (float)
    :ivar asic:            (float)
    :ivar transfer:        (float)
    :ivar stages:          (dict) stage -> {component: J} of the dynamic terms
    :ivar asic_engines:    (dict) ASIC engine -> J
    """

    def __init__(self):
        for name in COMPONENTS:
            setattr(self, name, 0.0)
        self.stages = {s: {} for s in STAGES}
        self.asic_engines = {}

    @property
    def total(self):
        return sum(getattr(self, name) for name in COMPONENTS)

    @property
    def dram(self):
        """DRAM-side energy: background, row cycling, column accesses, refresh and the MAC units."""
        return self.dram_background + self.dram_act_pre + self.dram_read + self.dram_write + \
            self.dram_refresh + self.pim_mac

    def as_dict(self):
        out = {name: getattr(self, name) for name in COMPONENTS}
        out['total'] = self.total
        out['stages'] = {s: dict(v) for s, v in self.stages.items()}
        out['asic_engines'] = dict(self.asic_engines)
        return out

    def lines(self, detail=False):
        """Text report; `detail` adds the formulas and the per-stage and per-engine lines."""
        lines = []
        if detail:
            lines.extend('# ' + f for f in FORMULAS)
        for name in COMPONENTS:
            lines.append('%-16s %14.6e J' % (name, getattr(self, name)))
        lines.append('%-16s %14.6e J' % ('total', self.total))
        if detail:
            for stage in STAGES:
                for name, value in sorted(self.stages[stage].items()):
                    lines.append('%-16s %14.6e J' % ('%s.%s' % (stage, name), value))
            for engine, value in sorted(self.asic_engines.items()):
                lines.append('%-16s %14.6e J' % ('asic.%s' % engine, value))
        return lines

    def __repr__(self):
        return '<%s total %.4g J>' % (self.__class__.__name__, self.total)


def accumulate(trace, cfg):
    """
    Energy of a finished :class:`pimgpt.trace.SimTrace` under `cfg`.

    :returns: (:class:`EnergyReport`)
    """
    cur, timing, geom, pim = cfg.current, cfg.timing, cfg.geometry, cfg.pim
    vdd = cur.VDD * _MA
    if cur.IDD0 < cur.IDD2N:
        log.warning("IDD0 %.1f mA below IDD2N %.1f mA: ACT/PRE energy clamped at 0", cur.IDD0, cur.IDD2N)
    act_pre = _act_pre(cur, timing)
    tCCD = ns_to_ps(timing.tCCD) * _PS
    rd = vdd * (cur.IDD4R - cur.IDD3N) * tCCD
    wr = vdd * (cur.IDD4W - cur.IDD3N) * tCCD
    ref = vdd * cur.IDD5B * ns_to_ps(timing.tRFC) * _PS
    io_in = vdd * (cur.IDD4W - cur.IDD3N) * _PS
    io_out = vdd * (cur.IDD4R - cur.IDD3N) * _PS
    mac = pim.mac_power * _MA * (pim.mac_width / 16.0) / geom.banks_per_channel * tCCD
    asic_power = cfg.asic.power * _MA

    report = EnergyReport()
    for active in trace.channel_active_ps:
        idle = max(trace.final_clock - active, 0)
        report.dram_background += vdd * (cur.IDD3N * active + cur.IDD2N * idle) * _PS
    counts = trace.counts
    report.dram_act_pre = counts['ACT'] * act_pre
    report.dram_read = counts['RD'] * rd
    report.dram_write = counts['WR'] * wr
    report.dram_refresh = counts['REF'] * ref
    for engine, busy in trace.asic_busy_ps.items():
        report.asic_engines[engine] = asic_power * busy * _PS
    report.asic = sum(report.asic_engines.values())
    mac_rd = 0
    for stage in STAGES:
        s = trace.stages[stage]
        mac_rd += s['mac_rd']
        report.stages[stage] = {
            'dram_act_pre': s['ACT'] * act_pre,
            'dram_read': s['RD'] * rd,
            'dram_write': s['WR'] * wr,
            'pim_mac': s['mac_rd'] * mac,
            'transfer': s['bus_in_ps'] * io_in + s['bus_out_ps'] * io_out,
            'asic': s['asic_ps'] * asic_power * _PS,
        }
    report.pim_mac = mac_rd * mac
    report.transfer = (trace.bus_ps['broadcast'] + trace.bus_ps['write_kv']) * io_in + trace.bus_ps['collect'] * io_out
    log.debug("Energy: %.4g J total, %.4g J DRAM side, %.4g J ASIC", report.total, report.dram, report.asic)
    return report
