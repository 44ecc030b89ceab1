"""
pimgpt.config: Hardware configuration of the PIM channels and the companion ASIC

Every field defaults to the baseline hardware (GDDR6 PIM, 8 channels x 16 banks, 1 GHz ASIC).
Configurations are immutable and validated on construction, so any :class:`SystemConfig`
in hand satisfies all of its invariants.

Config files are YAML mappings of sections to flat key/value pairs::

    timing:
      tRFC: 455
      tREFI: 6825
    geometry:
      channels: 16

Files ending in `.json` are read as JSON with the same structure.
"""

import os
import json
import logging
import dataclasses
from dataclasses import dataclass, field

import yaml

log = logging.getLogger(__name__)

__all__ = 'TimingConstraints', 'CurrentProfile', 'DramGeometry', 'PimConfig', 'AsicConfig', \
          'NumericsConfig', 'SystemConfig', 'SystemConfigParser', \
          'ConfigException', 'ConstraintException', \
          'load_config', 'channel_bandwidth', 'ns_to_ps', 'CONFIG_ENV'


CONFIG_ENV = 'PIMGPT_CONFIG'


def ns_to_ps(ns):
    """Convert nanoseconds to integer picoseconds, the engine's time base."""
    return int(round(ns * 1000))


class ConfigException(Exception):
    """Exception raised when a config file can't be parsed.

    :ivar line: (int) 1-based line number of the offending text, if known
    """
    def __init__(self, msg, line=None):
        if line is not None:
            msg = 'line %d: %s' % (line, msg)
        Exception.__init__(self, msg)
        self.line = line


class ConstraintException(Exception):
    """Exception raised when a configuration violates one of its invariants.

    :ivar constraint: (str) the violated invariant, e.g. "tRFC < tREFI"
    """
    def __init__(self, constraint, detail=''):
        msg = 'constraint violated: %s' % constraint
        if detail:
            msg += ' (%s)' % detail
        Exception.__init__(self, msg)
        self.constraint = constraint


def _require(ok, constraint, detail=''):
    if not ok:
        raise ConstraintException(constraint, detail)


def _positive(obj, names):
    for name in names:
        value = getattr(obj, name)
        _require(value > 0, '%s > 0' % name, '%s=%s' % (name, value))


@dataclass(frozen=True)
class TimingConstraints(object):
    """DRAM timing constraints, all in nanoseconds."""
    tRCD: float = 12.0
    tRP: float = 12.0
    tCCD: float = 1.0
    tWR: float = 12.0
    tRFC: float = 455.0
    tREFI: float = 6825.0
    tRAS: float = 32.0
    """Row-active time. Not part of the GDDR6 baseline table; GDDR5-class value."""

    def __post_init__(self):
        _positive(self, ('tRCD', 'tRP', 'tCCD', 'tWR', 'tRFC', 'tREFI', 'tRAS'))
        _require(self.tRFC < self.tREFI, 'tRFC < tREFI', 'tRFC=%s, tREFI=%s' % (self.tRFC, self.tREFI))
        _require(self.tRAS >= self.tRCD, 'tRAS >= tRCD', 'tRAS=%s, tRCD=%s' % (self.tRAS, self.tRCD))


@dataclass(frozen=True)
class CurrentProfile(object):
    """IDD currents in milliamps and the supply voltage in volts."""
    IDD0: float = 122.0
    IDD2N: float = 92.0
    IDD3N: float = 142.0
    IDD4R: float = 530.0
    IDD4W: float = 470.0
    IDD5B: float = 277.0
    VDD: float = 1.25

    def __post_init__(self):
        _positive(self, ('IDD0', 'IDD2N', 'IDD3N', 'IDD4R', 'IDD4W', 'IDD5B', 'VDD'))
        _require(self.IDD4R > self.IDD3N, 'IDD4R > IDD3N')
        _require(self.IDD3N > self.IDD2N, 'IDD3N > IDD2N')
        _require(self.IDD4W > self.IDD3N, 'IDD4W > IDD3N')


@dataclass(frozen=True)
class DramGeometry(object):
    """
    Organisation of the PIM memory.

    `columns` is the number of row addresses per bank, so that
    row_bytes x columns x banks_per_channel = capacity_per_channel / 8.
    """
    channels: int = 8
    banks_per_channel: int = 16
    capacity_per_channel: int = 4 * 2**30
    """bits"""
    row_bytes: int = 2048
    columns: int = 16384
    pins_per_channel: int = 16
    pin_rate: float = 16.0
    """Gb/s per pin"""
    dram_clock: float = 1e9
    """Hz"""

    def __post_init__(self):
        _require(self.channels >= 1, 'channels >= 1')
        _require(self.banks_per_channel >= 1, 'banks_per_channel >= 1')
        _positive(self, ('capacity_per_channel', 'row_bytes', 'columns', 'pins_per_channel', 'pin_rate', 'dram_clock'))
        _require(self.row_bytes % 2 == 0, 'row_bytes is even')
        _require(self.row_bytes * self.columns * self.banks_per_channel * 8 == self.capacity_per_channel,
                 'row_bytes x columns x banks_per_channel = capacity_per_channel/8',
                 '%d x %d x %d != %d/8' % (self.row_bytes, self.columns, self.banks_per_channel, self.capacity_per_channel))

    @property
    def total_banks(self):
        return self.channels * self.banks_per_channel

    @property
    def row_elements(self):
        """BF16 elements per DRAM row."""
        return self.row_bytes // 2

    def banks(self):
        """All (channel, bank) pairs in ascending order."""
        return [(ch, b) for ch in range(self.channels) for b in range(self.banks_per_channel)]


@dataclass(frozen=True)
class PimConfig(object):
    """In-memory MAC units and the per-channel global buffer (GB)."""
    gb_bytes: int = 2048
    mac_width: int = 16
    """elements consumed per bank per cycle"""
    mac_units_per_bank: int = 1
    pim_clock: float = 1e9
    mac_power: float = 149.29
    """mW for the 16 MAC units of one channel at mac_width 16"""
    drain_cycles: int = 5
    """adder-tree depth, log2(16) + 1, drained after each row span of a MAC instruction"""

    def __post_init__(self):
        _positive(self, ('gb_bytes', 'mac_width', 'mac_units_per_bank', 'pim_clock', 'mac_power'))
        _require(self.drain_cycles >= 0, 'drain_cycles >= 0')
        _require(self.gb_bytes >= 2 * self.mac_width, 'gb_bytes >= 2 x mac_width',
                 'gb_bytes=%d, mac_width=%d' % (self.gb_bytes, self.mac_width))
        _require(self.mac_width & (self.mac_width - 1) == 0, 'mac_width is a power of two',
                 'mac_width=%d' % self.mac_width)

    @property
    def gb_elements(self):
        """BF16 elements the GB holds."""
        return self.gb_bytes // 2


@dataclass(frozen=True)
class AsicConfig(object):
    """The ASIC's compute engines and on-chip SRAM."""
    clock: float = 1e9
    sram_bytes: int = 128 * 1024
    num_adders: int = 256
    num_multipliers: int = 128
    power: float = 304.59
    """mW"""

    def __post_init__(self):
        _positive(self, ('clock', 'sram_bytes', 'num_adders', 'num_multipliers', 'power'))


@dataclass(frozen=True)
class NumericsConfig(object):
    epsilon: float = 1e-5

    def __post_init__(self):
        _positive(self, ('epsilon',))


_SECTIONS = (
    ('timing', TimingConstraints),
    ('current', CurrentProfile),
    ('geometry', DramGeometry),
    ('pim', PimConfig),
    ('asic', AsicConfig),
    ('numerics', NumericsConfig),
)


@dataclass(frozen=True)
class SystemConfig(object):
    """
    Complete hardware description. Immutable; share freely between simulations.

    :ivar timing:   (:class:`TimingConstraints`)
    :ivar current:  (:class:`CurrentProfile`)
    :ivar geometry: (:class:`DramGeometry`)
    :ivar pim:      (:class:`PimConfig`)
    :ivar asic:     (:class:`AsicConfig`)
    :ivar numerics: (:class:`NumericsConfig`)
    """
    timing: TimingConstraints = field(default_factory=TimingConstraints)
    current: CurrentProfile = field(default_factory=CurrentProfile)
    geometry: DramGeometry = field(default_factory=DramGeometry)
    pim: PimConfig = field(default_factory=PimConfig)
    asic: AsicConfig = field(default_factory=AsicConfig)
    numerics: NumericsConfig = field(default_factory=NumericsConfig)

    @staticmethod
    def from_dict(data):
        """Build a config from a {section: {key: value}} mapping; missing keys take baseline values."""
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigException('expected a mapping of sections, found %s' % type(data).__name__)
        known = dict(_SECTIONS)
        for section in data:
            if section not in known:
                raise ConfigException('unknown section "%s"' % section)
        parts = {}
        for section, cls in _SECTIONS:
            values = data.get(section) or {}
            if not isinstance(values, dict):
                raise ConfigException('section "%s" must be a mapping' % section)
            parts[section] = cls(**_coerce_section(section, cls, values))
        return SystemConfig(**parts)

    def to_dict(self):
        return {section: dataclasses.asdict(getattr(self, section)) for section, _ in _SECTIONS}

    @property
    def round_elements(self):
        """Elements per GB round: a vector slice must fit the GB and its weights a single DRAM row."""
        return min(self.pim.gb_elements, self.geometry.row_elements)

    def override(self, changes):
        """
        Return a validated copy with dotted-key overrides applied.

        :param changes: (dict) e.g. ``{'geometry.channels': 16, 'asic.clock': 1e8}``
        """
        data = self.to_dict()
        for key, value in changes.items():
            try:
                section, name = key.split('.', 1)
            except ValueError:
                raise ConfigException('override key "%s" is not of the form section.key' % key)
            if section not in data:
                raise ConfigException('unknown section "%s"' % section)
            data[section][name] = value
        return SystemConfig.from_dict(data)

    @staticmethod
    def read(fname):
        """Read a YAML or JSON config file and produce a :class:`SystemConfig`"""
        return SystemConfigParser(fname).parse()

    def _serialize(self):
        text = yaml.safe_dump(self.to_dict(), default_flow_style=False, sort_keys=False)
        return text.splitlines()

    def write(self, outfname):
        """Write this config as YAML (or JSON, for a `.json` filename)"""
        with open(outfname, 'w') as outf:
            if outfname.lower().endswith('.json'):
                json.dump(self.to_dict(), outf, indent=2)
            else:
                outf.write('\n'.join(self._serialize()))
                outf.write('\n')


def _coerce_section(section, cls, values):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    out = {}
    for key, value in values.items():
        if key not in fields:
            raise ConfigException('unknown key "%s" in section "%s"' % (key, section))
        kind = type(fields[key].default)
        if isinstance(value, str):
            # YAML 1.1 reads exponents without a dot or sign, like 1e8, as strings
            try:
                value = float(value.strip())
            except ValueError:
                raise ConfigException('%s.%s must be a number, found %r' % (section, key, value))
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigException('%s.%s must be a number, found %r' % (section, key, value))
        if kind is int:
            if value != int(value):
                raise ConfigException('%s.%s must be an integer, found %r' % (section, key, value))
            value = int(value)
        else:
            value = float(value)
        out[key] = value
    return out


class SystemConfigParser(object):
    """Parser for YAML and JSON hardware config files."""

    def __init__(self, fname):
        """:param fname: (string) filename"""
        self.fname = fname

    def parse(self):
        """Parse our file and return a :class:`SystemConfig` or raise :exc:`ConfigException`."""
        log.debug("Parsing config file %s ...", self.fname)
        try:
            with open(self.fname) as f:
                text = f.read()
        except IOError as e:
            raise ConfigException('unable to read %s: %s' % (self.fname, e))

        if self.fname.lower().endswith('.json'):
            if not text.strip():
                data = None
            else:
                try:
                    data = json.loads(text)
                except ValueError as e:
                    raise ConfigException(str(e.msg if hasattr(e, 'msg') else e), line=getattr(e, 'lineno', None))
        else:
            try:
                data = yaml.safe_load(text)
            except yaml.YAMLError as e:
                mark = getattr(e, 'problem_mark', None)
                problem = getattr(e, 'problem', None) or str(e)
                raise ConfigException(problem, line=mark.line + 1 if mark is not None else None)

        cfg = SystemConfig.from_dict(data)
        log.debug("Config %s: %d channels x %d banks, mac_width=%d", self.fname,
                  cfg.geometry.channels, cfg.geometry.banks_per_channel, cfg.pim.mac_width)
        return cfg


def load_config(path=None):
    """
    Load a config file, or the baseline when `path` is None.

    :param path: (str) YAML or JSON file; missing keys take baseline values
    """
    if not path:
        return SystemConfig()
    if not os.path.exists(path):
        raise ConfigException('config file %s does not exist' % path)
    return SystemConfig.read(path)


def channel_bandwidth(cfg):
    """Bytes per second one channel's pins move: pins x pin_rate / 8."""
    geom = cfg.geometry if isinstance(cfg, SystemConfig) else cfg
    return geom.pins_per_channel * geom.pin_rate * 1e9 / 8
