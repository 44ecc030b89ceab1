"""
pimgpt.mapper: Placement of GPT weight matrices and KV caches onto PIM banks

Weights are stored transposed: each stored row holds one output feature's weights over the
input dimension, so a MAC unit streaming a stored row against the GB vector produces one
output element. The input dimension is cut into panels of at most one GB round (and one DRAM
row); within a panel the stored rows are dealt out evenly to all banks in ascending
(channel, bank) order, starting one remainder further on each panel, and packed contiguously
inside each bank.

Every placement or reservation occupies a region that starts at the same row in every bank,
which keeps per-bank command programs identical up to element counts.
"""

import json
import logging
from dataclasses import dataclass

log = logging.getLogger(__name__)

__all__ = 'BankAddress', 'Segment', 'PanelPlacement', 'MatrixPlacement', 'KvReservation', 'MemoryMap', \
          'CapacityException', 'GeometryException', 'OverflowException', \
          'max_row_hit', 'map_weights', 'reserve_kv', 'kv_write_address', 'build_memory_map', \
          'LAYER_ROLES', 'EMBED_OUT'


LAYER_ROLES = ('W_Q', 'W_K', 'W_V', 'W_proj', 'W_ffn1', 'W_ffn2')
EMBED_OUT = 'W_embed_out'


class CapacityException(Exception):
    """Exception raised when a bank runs out of rows."""
    pass


class GeometryException(Exception):
    """Exception raised for shapes the DRAM geometry can't hold, e.g. a head wider than a row."""
    pass


class OverflowException(Exception):
    """Exception raised when a KV token index is past the reserved capacity."""
    pass


def _ceil_div(a, b):
    return -(-a // b)


@dataclass(frozen=True, order=True)
class BankAddress(object):
    """Location of one element: channel, bank, row, and element offset (col) within the row."""
    channel: int
    bank: int
    row: int
    col: int = 0

    def __str__(self):
        return 'ch%d/b%d/r%d/c%d' % (self.channel, self.bank, self.row, self.col)


@dataclass(frozen=True)
class Segment(object):
    """A run of `count` elements starting at `address`, never crossing a DRAM row, taken from
    stored row `src_row`, columns [col_lo, col_hi) of the matrix."""
    address: BankAddress
    count: int
    src_row: int
    col_lo: int
    col_hi: int


def matrix_id(layer, role):
    """Canonical matrix name, e.g. "L3.W_ffn1"; the output projection has no layer."""
    return role if layer is None else 'L%d.%s' % (layer, role)


def _bank_of(geom, g):
    """Global bank index in (channel, bank) order to a (channel, bank) pair."""
    return divmod(g, geom.banks_per_channel)


def _spread(geom, i):
    """Round-robin slot i across channels first, then banks: (channel, bank, local index)."""
    ch = i % geom.channels
    bank = (i // geom.channels) % geom.banks_per_channel
    return ch, bank, i // geom.total_banks


def _spread_position(geom, ch, bank):
    """Inverse of :func:`_spread` for local index 0."""
    return ch + geom.channels * bank


class PanelPlacement(object):
    """
    One panel (column slice) of a stored matrix, spread across all banks.

    Stored rows are dealt in ascending bank order starting at bank `shift`, so the banks
    holding the `rows % B` extra rows move on by that many banks with every panel and no bank
    collects the remainder of every panel.

    :ivar index:     (int) panel number, which is also the GB round number
    :ivar col0:      (int) first matrix column in the panel
    :ivar width:     (int) columns in the panel
    :ivar shift:     (int) global bank receiving the first stored row
    :ivar base_row:  (int) first DRAM row of the panel's region in every bank
    :ivar region_rows: (int) DRAM rows reserved for the region in every bank
    """

    def __init__(self, index, col0, width, rows, num_banks, base_row, row_capacity):
        self.index = index
        self.col0 = col0
        self.width = width
        self.rows = rows
        self.num_banks = num_banks
        self.base_row = base_row
        self.row_capacity = row_capacity
        self.shift = index * (rows % num_banks) % num_banks
        self.region_rows = _ceil_div(self.max_bank_rows * width, row_capacity)

    @property
    def max_bank_rows(self):
        return _ceil_div(self.rows, self.num_banks)

    def _position(self, g):
        return (g - self.shift) % self.num_banks

    def bank_row_count(self, g):
        """Stored rows held by global bank `g`: rows // B, plus one for the rows % B banks from `shift` on."""
        base, rem = divmod(self.rows, self.num_banks)
        return base + (1 if self._position(g) < rem else 0)

    def bank_first_row(self, g):
        base, rem = divmod(self.rows, self.num_banks)
        p = self._position(g)
        return p * base + min(p, rem)

    def bank_elements(self, g):
        return self.bank_row_count(g) * self.width

    def bank_of_row(self, row):
        """Global bank holding stored row `row`, and its local index there."""
        base, rem = divmod(self.rows, self.num_banks)
        if row < rem * (base + 1):
            p, local = divmod(row, base + 1)
        else:
            p = rem + (row - rem * (base + 1)) // base
            local = row - (p * base + rem)
        return (p + self.shift) % self.num_banks, local


class MatrixPlacement(object):
    """
    Placement of one weight matrix, in stored orientation (one stored row per output).

    :ivar matrix_id: (str) e.g. "L0.W_V" or "W_embed_out"
    :ivar layer:     (int) layer index, None for the output projection
    :ivar role:      (str) one of W_Q, W_K, W_V, W_proj, W_ffn1, W_ffn2, W_embed_out
    :ivar rows:      (int) stored rows (output features)
    :ivar cols:      (int) stored columns (input features)
    :ivar panels:    (list of :class:`PanelPlacement`)
    """

    def __init__(self, matrix_id, rows, cols, layer=None, role=None):
        self.matrix_id = matrix_id
        self.layer = layer
        self.role = role or matrix_id
        self.rows = rows
        self.cols = cols
        self.panels = []

    @property
    def extents(self):
        return self.rows, self.cols

    def __len__(self):
        return len(self.panels)

    def __iter__(self):
        for panel in self.panels:
            yield panel

    def segments(self, geom):
        """Generate every :class:`Segment` of this placement, panel by panel, bank by bank."""
        for panel in self.panels:
            cap = panel.row_capacity
            for g in range(panel.num_banks):
                ch, bank = _bank_of(geom, g)
                first = panel.bank_first_row(g)
                for i in range(panel.bank_row_count(g)):
                    offset, col = i * panel.width, 0
                    while col < panel.width:
                        row, rcol = divmod(offset + col, cap)
                        n = min(cap - rcol, panel.width - col)
                        yield Segment(BankAddress(ch, bank, panel.base_row + row, rcol), n, first + i,
                                      panel.col0 + col, panel.col0 + col + n)
                        col += n

    def locate(self, geom, row, col):
        """Bank address of element (row, col) of the stored matrix."""
        if not (0 <= row < self.rows and 0 <= col < self.cols):
            raise IndexError('(%d, %d) outside %s %dx%d' % (row, col, self.matrix_id, self.rows, self.cols))
        for panel in self.panels:
            if panel.col0 <= col < panel.col0 + panel.width:
                g, i = panel.bank_of_row(row)
                ch, bank = _bank_of(geom, g)
                r, c = divmod(i * panel.width + col - panel.col0, panel.row_capacity)
                return BankAddress(ch, bank, panel.base_row + r, c)

    def __str__(self):
        return self.matrix_id

    def __repr__(self):
        return '<%s %s %dx%d>' % (self.__class__.__name__, self.matrix_id, self.rows, self.cols)


class KvReservation(object):
    """
    Reserved bank rows for one layer's key or value cache.

    Keys are row-major: token t lands in channel t mod C, bank (t div C) mod banks, filling
    `rows_per_token` consecutive rows, `heads_per_row` heads per row. Values are column-major
    and head-blocked: head h's columns all live in channel h mod C, dealt round-robin over that
    channel's banks, each column owning `rows_per_column` consecutive rows, one element per
    token. A context MAC round therefore needs each head's probabilities in one channel only.

    :ivar layer:          (int)
    :ivar kind:           (str) "key" or "value"
    :ivar token_capacity: (int)
    :ivar layout:         (str) "row_major" for keys, "col_major" for values
    :ivar base_row:       (int) first row of the region in every bank
    :ivar region_rows:    (int)
    """

    def __init__(self, layer, kind, token_capacity, d_model, d_head, geom, row_capacity, base_row,
                 heads_per_row=None):
        self.layer = layer
        self.kind = kind
        self.token_capacity = token_capacity
        self.d_model = d_model
        self.d_head = d_head
        self.num_heads = d_model // d_head
        self.geom = geom
        self.row_capacity = row_capacity
        self.base_row = base_row
        self.layout = 'row_major' if kind == 'key' else 'col_major'
        if kind == 'key':
            self.heads_per_row = heads_per_row
            self.rows_per_token = _ceil_div(self.num_heads, heads_per_row)
            self.region_rows = _ceil_div(token_capacity, geom.total_banks) * self.rows_per_token
        else:
            self.rows_per_column = _ceil_div(token_capacity, row_capacity)
            widest = _ceil_div(self.num_heads, geom.channels) * d_head
            self.region_rows = _ceil_div(widest, geom.banks_per_channel) * self.rows_per_column

    @property
    def base(self):
        """First reserved address of every bank the reservation uses."""
        used = self.reserved_rows()
        return [BankAddress(ch, bank, self.base_row, 0) for (ch, bank) in sorted(used) if used[(ch, bank)]]

    def key_parts(self):
        """(first head, head count) of each row of a token's key vector."""
        return [(h, min(self.heads_per_row, self.num_heads - h)) for h in range(0, self.num_heads, self.heads_per_row)]

    def token_location(self, t):
        """(channel, bank, first row) of key token `t`."""
        ch, bank, local = _spread(self.geom, t)
        return ch, bank, self.base_row + local * self.rows_per_token

    def _heads_below(self, ch, h):
        """Heads with index < h that live in channel `ch`."""
        return max(0, _ceil_div(h - ch, self.geom.channels))

    def column_location(self, j):
        """(channel, bank, first row) of value column `j`."""
        head, c = divmod(j, self.d_head)
        ch = head % self.geom.channels
        local, bank = divmod(self._heads_below(ch, head) * self.d_head + c, self.geom.banks_per_channel)
        return ch, bank, self.base_row + local * self.rows_per_column

    def channel_columns(self, ch, c0, c1):
        """Channel-local index range [m0, m1) of the value columns in head-aligned [c0, c1) held by `ch`."""
        dh = self.d_head
        return self._heads_below(ch, c0 // dh) * dh, self._heads_below(ch, _ceil_div(c1, dh)) * dh

    def slot_count(self, ch, bank, n):
        """How many of the first `n` tokens (keys) or columns (values) land in (ch, bank)."""
        if self.kind == 'key':
            pos = _spread_position(self.geom, ch, bank)
            if n <= pos:
                return 0
            return _ceil_div(n - pos, self.geom.total_banks)
        full, rest = divmod(n, self.d_head)
        local = self._heads_below(ch, full) * self.d_head + (rest if full % self.geom.channels == ch else 0)
        if local <= bank:
            return 0
        return _ceil_div(local - bank, self.geom.banks_per_channel)

    def reserved_rows(self):
        """Rows actually reserved per (channel, bank)."""
        out = {}
        for ch, bank in self.geom.banks():
            if self.kind == 'key':
                out[(ch, bank)] = self.slot_count(ch, bank, self.token_capacity) * self.rows_per_token
            else:
                out[(ch, bank)] = self.slot_count(ch, bank, self.d_model) * self.rows_per_column
        return out

    def bytes_per_bank(self):
        out = {}
        for (ch, bank), rows in self.reserved_rows().items():
            if self.kind == 'key':
                out[(ch, bank)] = self.slot_count(ch, bank, self.token_capacity) * self.d_model * 2
            else:
                out[(ch, bank)] = self.slot_count(ch, bank, self.d_model) * self.token_capacity * 2
        return out

    def __repr__(self):
        return '<%s L%d %s %s x%d>' % (self.__class__.__name__, self.layer, self.kind, self.layout, self.token_capacity)


class MemoryMap(object):
    """
    Placement of all matrices and KV reservations. A MemoryMap is a container for
    :class:`MatrixPlacement` objects, keyed by matrix id.

    :ivar geometry:     (:class:`pimgpt.config.DramGeometry`)
    :ivar row_capacity: (int) BF16 elements per DRAM row
    :ivar panel_width:  (int) widest panel, i.e. elements per GB round
    :ivar placements:   (list of :class:`MatrixPlacement`)
    :ivar reservations: (list of :class:`KvReservation`)
    """

    def __init__(self, geometry, row_capacity=None, panel_width=None):
        self.geometry = geometry
        self.row_capacity = row_capacity or geometry.row_elements
        self.panel_width = min(panel_width or self.row_capacity, self.row_capacity)
        self.placements = []
        self.reservations = []
        self.next_row = 0
        self._by_id = {}
        self._kv = {}

    def _allocate(self, rows, what, bank_rows=None):
        """
        Take `rows` rows from every bank. `bank_rows` maps (channel, bank) to the rows that bank
        actually fills, and picks the bank named when the region does not fit.
        """
        base, limit = self.next_row, self.geometry.columns
        if base + rows > limit:
            bank_rows = bank_rows or {}
            over = [key for key in self.geometry.banks() if base + bank_rows.get(key, rows) > limit]
            ch, bank = over[0] if over else (0, 0)
            need = bank_rows.get((ch, bank), rows)
            raise CapacityException('bank ch%d/b%d overflows placing %s: needs rows %d..%d of %d' %
                                    (ch, bank, what, base, base + need - 1, limit))
        self.next_row += rows
        return base

    def place(self, matrix_id, rows, cols, layer=None, role=None):
        """
        Place a stored matrix of `rows` x `cols` elements, panel by panel.

        :raises CapacityException: naming the first bank to overflow
        """
        geom = self.geometry
        placement = MatrixPlacement(matrix_id, rows, cols, layer=layer, role=role)
        for index, col0 in enumerate(range(0, cols, self.panel_width)):
            width = min(self.panel_width, cols - col0)
            panel = PanelPlacement(index, col0, width, rows, geom.total_banks, self.next_row, self.row_capacity)
            need = {_bank_of(geom, g): _ceil_div(panel.bank_elements(g), self.row_capacity)
                    for g in range(geom.total_banks)}
            self._allocate(panel.region_rows, '%s panel %d' % (matrix_id, index), need)
            placement.panels.append(panel)
        log.debug("Placed %s (%dx%d) in %d panels from row %d", matrix_id, rows, cols,
                  len(placement.panels), placement.panels[0].base_row if placement.panels else -1)
        self.placements.append(placement)
        self._by_id[matrix_id] = placement
        return placement

    def reserve(self, layer, kind, token_capacity, d_model, d_head, heads_per_row=None):
        """Reserve a KV region for one layer; see :class:`KvReservation`."""
        res = KvReservation(layer, kind, token_capacity, d_model, d_head, self.geometry, self.row_capacity,
                            self.next_row, heads_per_row=heads_per_row)
        self._allocate(res.region_rows, '%s cache of layer %d' % (kind, layer), res.reserved_rows())
        self.reservations.append(res)
        self._kv[(layer, kind)] = res
        return res

    def reservation(self, layer, kind):
        try:
            return self._kv[(layer, kind)]
        except KeyError:
            raise KeyError('no %s reservation for layer %s' % (kind, layer))

    @property
    def bytes_used_per_bank(self):
        """Bytes holding weights or reserved KV space, per (channel, bank)."""
        geom = self.geometry
        used = {key: 0 for key in geom.banks()}
        for placement in self.placements:
            for panel in placement.panels:
                for g in range(geom.total_banks):
                    used[_bank_of(geom, g)] += panel.bank_elements(g) * 2
        for res in self.reservations:
            for key, n in res.bytes_per_bank().items():
                used[key] += n
        return used

    def regions(self):
        """(base_row, region_rows, owner) of every region, in allocation order."""
        out = []
        for placement in self.placements:
            for panel in placement.panels:
                out.append((panel.base_row, panel.region_rows, '%s#%d' % (placement.matrix_id, panel.index)))
        for res in self.reservations:
            out.append((res.base_row, res.region_rows, 'L%d.%s' % (res.layer, res.kind)))
        return sorted(out)

    def check(self):
        """Verify regions are disjoint and inside the bank; returns a list of problems (empty if none)."""
        problems = []
        end = 0
        for base, rows, owner in self.regions():
            if base < end:
                problems.append('%s overlaps the previous region at row %d' % (owner, base))
            end = max(end, base + rows)
        if end > self.geometry.columns:
            problems.append('regions end at row %d past %d rows' % (end, self.geometry.columns))
        return problems

    def __len__(self):
        return len(self.placements)

    def __iter__(self):
        for placement in self.placements:
            yield placement

    def __contains__(self, item):
        return item in self._by_id

    def __getitem__(self, item):
        return self._by_id[item]

    def to_dict(self):
        geom = self.geometry
        return {
            'geometry': {'channels': geom.channels, 'banks_per_channel': geom.banks_per_channel,
                         'rows_per_bank': geom.columns, 'row_capacity': self.row_capacity,
                         'panel_width': self.panel_width},
            'placements': [{
                'matrix_id': p.matrix_id, 'layer': p.layer, 'role': p.role, 'rows': p.rows, 'cols': p.cols,
                'panels': [{'index': pl.index, 'col0': pl.col0, 'width': pl.width, 'base_row': pl.base_row,
                            'region_rows': pl.region_rows,
                            'rows_per_bank': [pl.max_bank_rows, pl.rows // pl.num_banks],
                            'extra_row_banks': pl.rows % pl.num_banks, 'first_bank': pl.shift} for pl in p.panels],
            } for p in self.placements],
            'reservations': [{
                'layer': r.layer, 'kind': r.kind, 'layout': r.layout, 'token_capacity': r.token_capacity,
                'base_row': r.base_row, 'region_rows': r.region_rows,
                'rows_per_slot': r.rows_per_token if r.kind == 'key' else r.rows_per_column,
            } for r in self.reservations],
            'occupancy': {'ch%d/b%d' % key: n for key, n in sorted(self.bytes_used_per_bank.items())},
            'rows_used': self.next_row,
        }

    def to_json(self):
        """Deterministic JSON serialization."""
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def write(self, outfname):
        with open(outfname, 'w') as outf:
            outf.write(self.to_json())
            outf.write('\n')


def _row_hit(nhead, ncol, heads_per_row, ltoken=1, access_width=1):
    acts = accesses = 0
    for first in range(0, nhead, heads_per_row):
        elements = min(heads_per_row, nhead - first) * ncol
        acts += 1
        accesses += _ceil_div(elements, access_width)
    return 1.0 - float(acts * ltoken) / (accesses * ltoken)


def _best_heads_per_row(nhead, ncol, row_capacity, access_width=1):
    if nhead < 1 or ncol < 1:
        raise GeometryException('need at least one head of at least one column')
    if ncol > row_capacity:
        raise GeometryException('unsupported geometry: head width %d exceeds row capacity %d' % (ncol, row_capacity))
    best = None
    for k in range(1, min(nhead, row_capacity // ncol) + 1):
        score = _row_hit(nhead, ncol, k, access_width=access_width)
        if best is None or score >= best[0]:
            best = (score, k)
    return best[1], best[0]


def max_row_hit(nhead, ncol, row_capacity, ltoken=None, access_width=1):
    """
    Fraction of accesses that hit an open row when heads of `ncol` columns are concatenated
    into rows of `row_capacity` elements, swept sequentially, with the concatenation chosen to
    maximise it (min(nhead, row_capacity // ncol) heads per row).

    :param ltoken:       (int) tokens swept (rows repeat per token; the fraction is unchanged)
    :param access_width: (int) elements per column access; 1 counts element accesses
    :raises GeometryException: when ncol > row_capacity
    """
    k, score = _best_heads_per_row(nhead, ncol, row_capacity, access_width)
    if ltoken:
        score = _row_hit(nhead, ncol, k, ltoken, access_width)
    return score


def map_weights(model, geom, row_capacity=None, panel_width=None, mmap=None):
    """
    Place every weight matrix of `model`: per layer W_Q, W_K, W_V, W_proj, W_ffn1, W_ffn2
    (heads concatenated, so each is one matrix), then the output projection.

    :param panel_width: (int) elements per GB round; defaults to the row capacity
    :raises CapacityException: when the weights don't fit
    """
    if mmap is None:
        mmap = MemoryMap(geom, row_capacity, panel_width)
    d, f = model.d_model, model.d_ffn
    shapes = {'W_Q': (d, d), 'W_K': (d, d), 'W_V': (d, d), 'W_proj': (d, d), 'W_ffn1': (f, d), 'W_ffn2': (d, f)}
    for layer in range(model.num_layers):
        for role in LAYER_ROLES:
            rows, cols = shapes[role]
            mmap.place(matrix_id(layer, role), rows, cols, layer=layer, role=role)
    mmap.place(EMBED_OUT, model.vocab_size, d, role=EMBED_OUT)
    log.debug("Mapped %s weights: %d rows of %d per bank used", model.name, mmap.next_row, geom.columns)
    return mmap


def reserve_kv(model, max_tokens, geom, mmap=None):
    """
    Reserve per-layer key (row-major) and value (column-major) space for `max_tokens` tokens.

    :raises CapacityException: when the reservations don't fit
    """
    if max_tokens < 1:
        raise ValueError('max_tokens must be at least 1')
    if mmap is None:
        mmap = MemoryMap(geom)
    heads_per_row, score = _best_heads_per_row(model.num_heads, model.d_head, mmap.row_capacity)
    log.debug("KV for %s: %d heads per key row (row-hit score %.4f)", model.name, heads_per_row, score)
    for layer in range(model.num_layers):
        mmap.reserve(layer, 'key', max_tokens, model.d_model, model.d_head, heads_per_row=heads_per_row)
        mmap.reserve(layer, 'value', max_tokens, model.d_model, model.d_head)
    return mmap


def build_memory_map(model, cfg, max_tokens):
    """Weights then KV reservations for `max_tokens`, with panels sized to the config's GB rounds."""
    mmap = MemoryMap(cfg.geometry, cfg.geometry.row_elements, cfg.round_elements)
    map_weights(model, cfg.geometry, mmap=mmap)
    reserve_kv(model, max_tokens, cfg.geometry, mmap=mmap)
    return mmap


def kv_write_address(mmap, layer, kind, token_index):
    """
    Where token `token_index`'s key or value vector is written.

    :returns: list of (:class:`BankAddress`, element count): one run per key row, or one
              single-element address per value column
    :raises OverflowException: when token_index is past the reservation's capacity
    """
    res = mmap.reservation(layer, kind)
    if not 0 <= token_index < res.token_capacity:
        raise OverflowException('token %d outside the %d-token %s reservation of layer %d' %
                                (token_index, res.token_capacity, kind, layer))
    if kind == 'key':
        ch, bank, row = res.token_location(token_index)
        return [(BankAddress(ch, bank, row + i, 0), n * res.d_head) for i, (_, n) in enumerate(res.key_parts())]
    out = []
    r, c = divmod(token_index, res.row_capacity)
    for j in range(res.d_model):
        ch, bank, row = res.column_location(j)
        out.append((BankAddress(ch, bank, row + r, c), 1))
    return out
