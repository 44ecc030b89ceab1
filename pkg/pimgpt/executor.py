"""
pimgpt.executor: Functional shadow of a compiled instruction stream

Runs the same instructions the timing engine schedules, but on data: weights are loaded into
bank rows where the mapper placed them, every MAC instruction reads its operands back from
those rows, and the ASIC instructions apply the BF16 blocks to named SRAM buffers. The result
is compared bit for bit with :func:`pimgpt.numerics.golden.golden_forward`.
"""

import logging

import numpy as np

from pimgpt.compiler import compile_token
from pimgpt.mapper import build_memory_map, kv_write_address, _bank_of
from pimgpt.numerics import mac_dot, partial_sum, softmax, layernorm, gelu, inv_sqrt_constant
from pimgpt.numerics.golden import GoldenResult, residual_add

log = logging.getLogger(__name__)

__all__ = 'BankMemory', 'ShadowExecutor', 'shadow_forward'


class BankMemory(object):
    """
    Contents of the PIM banks, one BF16 vector per touched DRAM row.

    :param geometry:     (:class:`pimgpt.config.DramGeometry`)
    :param row_capacity: (int) elements per row
    """

    def __init__(self, geometry, row_capacity):
        self.geometry = geometry
        self.row_capacity = row_capacity
        self.rows = {}

    def row(self, ch, bank, row):
        key = (ch, bank, row)
        if key not in self.rows:
            if not 0 <= row < self.geometry.columns:
                raise IndexError('row %d outside bank ch%d/b%d' % (row, ch, bank))
            self.rows[key] = np.zeros(self.row_capacity, dtype=np.float32)
        return self.rows[key]

    def write(self, address, values):
        """Write `values` into one row starting at `address`."""
        values = np.asarray(values, dtype=np.float32).ravel()
        if address.col + len(values) > self.row_capacity:
            raise IndexError('%d elements at %s cross the row end' % (len(values), address))
        self.row(address.channel, address.bank, address.row)[address.col:address.col + len(values)] = values

    def read_span(self, ch, bank, base_row, offset, n):
        """`n` elements starting `offset` elements into the region at `base_row`, across rows."""
        out = np.empty(n, dtype=np.float32)
        pos = 0
        cap = self.row_capacity
        while pos < n:
            r, c = divmod(offset + pos, cap)
            k = min(cap - c, n - pos)
            out[pos:pos + k] = self.row(ch, bank, base_row + r)[c:c + k]
            pos += k
        return out

    def load(self, weights, mmap):
        """Store every mapped matrix of `weights` at its placement."""
        for placement in mmap:
            w = weights.matrix(placement.matrix_id)
            for seg in placement.segments(self.geometry):
                self.write(seg.address, w[seg.src_row, seg.col_lo:seg.col_hi])
        log.debug("Loaded %d matrices into %d bank rows", len(mmap), len(self.rows))

    def __len__(self):
        return len(self.rows)


class ShadowExecutor(object):
    """
    Executes instruction streams on data.

    :param weights: (:class:`pimgpt.numerics.golden.ModelWeights`)
    :param mmap:    (:class:`pimgpt.mapper.MemoryMap`)
    :param cfg:     (:class:`pimgpt.config.SystemConfig`)
    :ivar sram:     (dict) buffer name -> vector, the ASIC's view of the current step
    """

    def __init__(self, weights, mmap, cfg):
        self.weights = weights
        self.mmap = mmap
        self.cfg = cfg
        self.geom = cfg.geometry
        self.mw = cfg.pim.mac_width
        self.memory = BankMemory(cfg.geometry, mmap.row_capacity)
        self.memory.load(weights, mmap)
        self.sram = {}
        self.gb = None
        self.partials = {}

    def execute(self, stream):
        """Run one token step; SRAM buffers of earlier steps are dropped."""
        self.sram = {}
        self.partials = {}
        graph = stream.graph
        for instr in stream:
            handler = getattr(self, '_%s' % instr.opcode, None)
            if handler is None:
                raise ValueError('instruction %d: no functional model for %s' % (instr.id, instr.opcode))
            handler(instr, graph)
        return self.sram

    #
    # bus
    #

    def _broadcast(self, instr, graph):
        src = np.asarray(self.sram[instr.srcs[0]], dtype=np.float64).ravel()
        lo, hi = instr.args['lo'], instr.args['hi']
        self.gb = (lo, src[lo:hi])

    def _collect(self, instr, graph):
        node = graph[instr.node]
        if node.kind == 'transfer_collect':
            self.sram[instr.dst] = self.sram[graph[node.deps[0]].name]
            return
        buf = self.partials.pop((node.id, instr.args['round']))
        if instr.dst in self.sram:
            # score rounds fill disjoint heads of one buffer
            buf = np.where(np.isnan(buf), self.sram[instr.dst], buf)
        self.sram[instr.dst] = buf

    def _write_kv(self, instr, graph):
        """Bus transfer only; the write_key and write_value instructions that follow store the data."""

    #
    # PIM
    #

    def _partial(self, node, instr, size):
        key = (node.id, instr.args['round'])
        if key not in self.partials:
            self.partials[key] = np.full(size, np.nan)
        return self.partials[key]

    def _mac(self, instr, graph):
        node = graph[instr.node]
        if 'panel' in instr.args:
            self._mac_weights(node, instr)
        elif 'heads' in instr.args:
            self._mac_scores(node, instr)
        else:
            self._mac_context(node, instr)

    def _mac_weights(self, node, instr):
        panel = self.mmap[instr.operand].panels[instr.args['panel']]
        out = self._partial(node, instr, panel.rows)
        _, x = self.gb
        for bank in range(self.geom.banks_per_channel):
            g = instr.channel * self.geom.banks_per_channel + bank
            count = panel.bank_row_count(g)
            if not count:
                continue
            block = np.array([self.memory.read_span(instr.channel, bank, panel.base_row, i * panel.width, panel.width)
                              for i in range(count)])
            first = panel.bank_first_row(g)
            out[first:first + count] = mac_dot(x, block, self.mw)

    def _mac_scores(self, node, instr):
        res = self.mmap.reservation(node.layer, 'key')
        h, T, dh = node.shape
        out = self._partial(node, instr, h * T)
        lo, q = self.gb
        h0, h1 = instr.args['heads']
        for t in range(T):
            ch, bank, row = res.token_location(t)
            if ch != instr.channel:
                continue
            for hd in range(h0, h1):
                part, slot = divmod(hd, res.heads_per_row)
                k = self.memory.read_span(ch, bank, row + part, slot * dh, dh)
                out[hd * T + t] = mac_dot(q[hd * dh - lo:(hd + 1) * dh - lo], k, self.mw)

    def _mac_context(self, node, instr):
        res = self.mmap.reservation(node.layer, 'value')
        h, T, dh = node.shape
        out = self._partial(node, instr, h * dh)
        lo, p = self.gb
        for c0, c1, ta, tb in instr.args['groups']:
            for j in range(c0, c1):
                ch, bank, row = res.column_location(j)
                if ch != instr.channel:
                    continue
                hd = j // dh
                v = self.memory.read_span(ch, bank, row, ta, tb - ta)
                out[j] = mac_dot(p[hd * T + ta - lo:hd * T + tb - lo], v, self.mw)

    def _read_row(self, instr, graph):
        node = graph[instr.node]
        placement = self.mmap[instr.operand]
        token = instr.args['token']
        buf = self.sram.setdefault(node.name, np.zeros(placement.cols, dtype=np.float32))
        for panel in placement.panels:
            g, local = panel.bank_of_row(token)
            ch, bank = _bank_of(self.geom, g)
            if ch == instr.channel:
                buf[panel.col0:panel.col0 + panel.width] = \
                    self.memory.read_span(ch, bank, panel.base_row, local * panel.width, panel.width)

    def _write_key(self, instr, graph):
        vec = np.asarray(self.sram[instr.srcs[0]], dtype=np.float32)
        offset = 0
        for address, n in kv_write_address(self.mmap, instr.layer, 'key', instr.args['token']):
            self.memory.write(address, vec[offset:offset + n])
            offset += n

    def _write_value(self, instr, graph):
        vec = np.asarray(self.sram[instr.srcs[0]], dtype=np.float32)
        for j, (address, n) in enumerate(kv_write_address(self.mmap, instr.layer, 'value', instr.args['token'])):
            if address.channel == instr.channel:
                self.memory.write(address, vec[j:j + 1])

    #
    # ASIC
    #

    def _layernorm(self, instr, graph):
        if instr.operand == 'lnf':
            gamma, beta = self.weights.lnf_gamma, self.weights.lnf_beta
        else:
            layer, which = instr.operand.split('.')
            params = self.weights[int(layer[1:])]
            gamma, beta = params[which + '_gamma'], params[which + '_beta']
        self.sram[instr.dst] = layernorm(self.sram[instr.srcs[0]], gamma, beta, self.cfg.numerics.epsilon)

    def _softmax(self, instr, graph):
        args = instr.args
        scores = np.asarray(self.sram[instr.srcs[0]]).reshape(args['heads'], args['tokens'])
        self.sram[instr.dst] = np.ravel(softmax(scores, inv_sqrt_constant(args['d_head'])))

    def _gelu(self, instr, graph):
        self.sram[instr.dst] = gelu(self.sram[instr.srcs[0]])

    def _residual_add(self, instr, graph):
        self.sram[instr.dst] = residual_add(self.sram[instr.srcs[0]], self.sram[instr.srcs[1]])

    def _partial_sum(self, instr, graph):
        parts = np.array([self.sram[name] for name in instr.srcs], dtype=np.float64)
        if not np.isnan(parts).any():
            self.sram[instr.dst] = partial_sum(list(parts))
            return
        # split attention heads: combine, in round order, only the rounds that produced a column
        out = np.empty(parts.shape[1], dtype=np.float32)
        for j in range(parts.shape[1]):
            column = parts[:, j]
            out[j] = partial_sum(list(column[~np.isnan(column)]))
        self.sram[instr.dst] = out

    def _argmax(self, instr, graph):
        self.sram[instr.dst] = int(np.argmax(self.sram[instr.srcs[0]]))

    #
    # readback
    #

    def read_cache(self, layer, kind, tokens):
        """The first `tokens` rows of a layer's key or value cache, read back from the banks."""
        res = self.mmap.reservation(layer, kind)
        out = np.zeros((tokens, res.d_model), dtype=np.float32)
        for t in range(tokens):
            offset = 0
            for address, n in kv_write_address(self.mmap, layer, kind, t):
                if kind == 'key':
                    out[t, offset:offset + n] = self.memory.read_span(address.channel, address.bank, address.row,
                                                                      address.col, n)
                    offset += n
                else:
                    out[t, offset] = self.memory.row(address.channel, address.bank, address.row)[address.col]
                    offset += 1
        return out

    def run(self, token_count, start_token=0):
        """
        Greedy decoding of `token_count` steps, compiling each step for the token actually fed in.

        :returns: (:class:`pimgpt.numerics.golden.GoldenResult`)
        """
        model = self.weights.model
        result = GoldenResult()
        result.tokens.append(start_token)
        for step in range(token_count):
            stream = compile_token(model, self.mmap, self.cfg, step + 1, result.tokens[-1])
            sram = self.execute(stream)
            result.layer_outputs.append([sram['L%d.res2' % l] for l in range(model.num_layers)])
            result.logits.append(sram['logits'])
            result.tokens.append(sram['token'])
            log.debug("shadow step %d -> token %d", step, sram['token'])
        result.keys = [self.read_cache(l, 'key', token_count) for l in range(model.num_layers)]
        result.values = [self.read_cache(l, 'value', token_count) for l in range(model.num_layers)]
        return result


def shadow_forward(weights, token_count, cfg, start_token=0):
    """Map `weights` for `token_count` tokens and decode them through compiled instruction streams."""
    mmap = build_memory_map(weights.model, cfg, max(token_count, 1))
    return ShadowExecutor(weights, mmap, cfg).run(token_count, start_token)
