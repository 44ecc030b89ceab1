"""
pimgpt.compiler: Per-token computation graph and its lowering to PIM / bus / ASIC instructions

A token step is built as a small DAG (:func:`build_graph`) and compiled against a
:class:`pimgpt.mapper.MemoryMap` into an ordered :class:`InstructionStream`. Every
vector-matrix product, including attention over the KV cache, runs on the PIM side in GB
rounds: broadcast a slice of the input vector, one MAC instruction per channel, collect the
partial outputs. The ASIC does everything else.

PIM instructions are lowered further by :func:`bank_programs` into per-bank span programs
(runs of rows with a fixed access pattern), which :func:`lower_to_commands` expands into
ACT / RD / WR / PRE commands under the open-row policy.
"""

import logging
from dataclasses import dataclass, field

from pimgpt.mapper import EMBED_OUT, matrix_id

log = logging.getLogger(__name__)

__all__ = 'GraphNode', 'ComputationGraph', 'Instruction', 'InstructionStream', 'SpanRun', 'Command', \
          'CompileException', 'build_graph', 'compile_graph', 'compile_token', 'bank_programs', \
          'lower_to_commands', 'expand_runs', 'node_closure', 'stream_closure', 'NODE_KINDS'


NODE_KINDS = ('vmm', 'kv_write_key', 'kv_write_value', 'softmax', 'layernorm', 'gelu', 'residual_add',
              'partial_sum', 'transfer_broadcast', 'transfer_collect', 'embed_lookup', 'argmax')

ASIC_KINDS = ('softmax', 'layernorm', 'gelu', 'residual_add', 'partial_sum', 'argmax')


class CompileException(Exception):
    """Exception raised when a graph node can't be lowered, e.g. its matrix is not mapped."""
    pass


def _ceil_div(a, b):
    return -(-a // b)


#
# Graph
#

@dataclass
class GraphNode(object):
    """
    One operation of a token step.

    :ivar id:     (int)
    :ivar kind:   (str) one of NODE_KINDS
    :ivar shape:  (tuple) operand shape: (rows, cols) of a product, (heads, tokens, d_head) for
                  attention products, (n,) for vector operations
    :ivar deps:   (tuple of int) ids of the nodes whose results this one consumes
    :ivar layer:  (int) decoder layer, None outside the layers
    :ivar operand: (str) matrix id, KV cache name, or parameter set name
    :ivar name:   (str) buffer name of the result
    :ivar stage:  (str) embed, attention, projection, ffn or output
    """
    id: int
    kind: str
    shape: tuple
    deps: tuple
    layer: object = None
    operand: str = ''
    name: str = ''
    stage: str = ''


class ComputationGraph(object):
    """
    The DAG of one decoding step. A container of :class:`GraphNode`, in topological order.

    :ivar model:          (:class:`pimgpt.models.GptModelConfig`)
    :ivar token_position: (int) 1-based position of the token being generated
    :ivar token_id:       (int) input token (selects the embedding row)
    """

    def __init__(self, model, token_position, token_id=0):
        self.model = model
        self.token_position = token_position
        self.token_id = token_id
        self.nodes = []

    def add(self, kind, shape, deps=(), layer=None, operand='', name='', stage=''):
        node = GraphNode(len(self.nodes), kind, tuple(shape), tuple(deps), layer, operand, name, stage)
        for dep in node.deps:
            if not 0 <= dep < node.id:
                raise CompileException('node %d (%s) depends on unknown node %d' % (node.id, kind, dep))
        self.nodes.append(node)
        return node.id

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        for node in self.nodes:
            yield node

    def __getitem__(self, item):
        return self.nodes[item]

    def consumers(self):
        out = {node.id: [] for node in self.nodes}
        for node in self.nodes:
            for dep in node.deps:
                out[dep].append(node.id)
        return out


def build_graph(model, token_position, token_id=0):
    """
    Build the computation graph for generating the token at `token_position` (1-based), whose
    input is `token_id`.
    """
    if not 1 <= token_position <= model.max_tokens:
        raise ValueError('token_position %d outside 1..%d' % (token_position, model.max_tokens))
    g = ComputationGraph(model, token_position, token_id)
    d, f, h, dh, T = model.d_model, model.d_ffn, model.num_heads, model.d_head, token_position

    x = g.add('embed_lookup', (d,), operand=EMBED_OUT, name='embed.row', stage='embed')
    x = g.add('transfer_collect', (d,), (x,), operand=EMBED_OUT, name='x', stage='embed')
    for l in range(model.num_layers):
        tag = 'L%d.' % l
        a = g.add('layernorm', (d,), (x,), l, tag + 'ln1', tag + 'ln1.out', 'attention')
        q = g.add('vmm', (d, d), (a,), l, matrix_id(l, 'W_Q'), tag + 'q', 'attention')
        k = g.add('vmm', (d, d), (a,), l, matrix_id(l, 'W_K'), tag + 'k', 'attention')
        v = g.add('vmm', (d, d), (a,), l, matrix_id(l, 'W_V'), tag + 'v', 'attention')
        kw = g.add('kv_write_key', (d,), (k,), l, tag + 'key', tag + 'key.write', 'attention')
        vw = g.add('kv_write_value', (d,), (v,), l, tag + 'value', tag + 'value.write', 'attention')
        s = g.add('vmm', (h, T, dh), (q, kw), l, tag + 'key', tag + 'scores', 'attention')
        p = g.add('softmax', (h, T), (s,), l, tag + 'softmax', tag + 'probs', 'attention')
        c = g.add('vmm', (h, T, dh), (p, vw), l, tag + 'value', tag + 'context', 'attention')
        o = g.add('vmm', (d, d), (c,), l, matrix_id(l, 'W_proj'), tag + 'proj', 'projection')
        x = g.add('residual_add', (d,), (o, x), l, tag + 'res1', tag + 'res1', 'projection')
        a = g.add('layernorm', (d,), (x,), l, tag + 'ln2', tag + 'ln2.out', 'ffn')
        u = g.add('vmm', (f, d), (a,), l, matrix_id(l, 'W_ffn1'), tag + 'ffn1', 'ffn')
        u = g.add('gelu', (f,), (u,), l, tag + 'gelu', tag + 'gelu', 'ffn')
        u = g.add('vmm', (d, f), (u,), l, matrix_id(l, 'W_ffn2'), tag + 'ffn2', 'ffn')
        x = g.add('residual_add', (d,), (u, x), l, tag + 'res2', tag + 'res2', 'ffn')
    a = g.add('layernorm', (d,), (x,), None, 'lnf', 'lnf.out', 'output')
    z = g.add('vmm', (model.vocab_size, d), (a,), None, EMBED_OUT, 'logits', 'output')
    g.add('argmax', (model.vocab_size,), (z,), None, 'argmax', 'token', 'output')
    return g


def node_closure(graph):
    """{node id: set of node ids reachable from it}"""
    out = {}
    consumers = graph.consumers()
    for node in reversed(graph.nodes):
        reach = set()
        for c in consumers[node.id]:
            reach.add(c)
            reach |= out[c]
        out[node.id] = reach
    return out


#
# Instructions
#

@dataclass
class Instruction(object):
    """
    One entry of the instruction stream.

    :ivar id:      (int) position in the stream
    :ivar target:  (str) "pim", "asic" or "bus"
    :ivar opcode:  (str) pim: mac, read_row, write_key, write_value; bus: broadcast, collect,
                   write_kv; asic: the ASIC node kinds
    :ivar node:    (int) graph node it lowers
    :ivar channel: (int) PIM channel, None for bus and ASIC instructions
    :ivar operand: (str) matrix id, KV cache name, or parameter set
    :ivar length:  (int) vector elements processed
    :ivar nbytes:  (int) bytes on one channel's pins, which sets the transfer time
    :ivar copies:  (int) channels receiving those bytes; nbytes x copies is the data moved
    :ivar srcs:    (tuple of str) SRAM buffers read
    :ivar dst:     (str) SRAM buffer written
    :ivar fused:   (bool) collect whose ASIC consumer starts on partially received data
    :ivar deps:    (tuple of int) instruction ids this one waits for
    :ivar stage:   (str)
    :ivar layer:   (int)
    :ivar args:    (dict) lowering details (panel, round, head or token ranges, ...)
    """
    id: int
    target: str
    opcode: str
    node: int
    channel: object = None
    operand: str = ''
    length: int = 0
    nbytes: int = 0
    copies: int = 1
    srcs: tuple = ()
    dst: str = ''
    fused: bool = False
    deps: tuple = ()
    stage: str = ''
    layer: object = None
    args: dict = field(default_factory=dict)

    def __str__(self):
        where = '' if self.channel is None else ' ch%d' % self.channel
        size = ' %dB' % self.nbytes if self.target == 'bus' else ' n=%d' % self.length
        fused = ' fused' if self.fused else ''
        deps = ','.join(str(i) for i in self.deps) or '-'
        return '%5d %-4s %-12s%s %s%s%s <- %s' % (self.id, self.target, self.opcode, where, self.operand,
                                                 size, fused, deps)


class InstructionStream(object):
    """
    Ordered instructions of one (or several concatenated) token steps.

    :ivar instructions: (list of :class:`Instruction`)
    :ivar exits:        (dict) graph node id -> ids of the instructions completing it
    """

    def __init__(self, graph=None):
        self.graph = graph
        self.instructions = []
        self.exits = {}
        self.entries = {}

    def emit(self, target, opcode, node, deps=(), **kwargs):
        instr = Instruction(len(self.instructions), target, opcode, node.id, deps=tuple(sorted(set(deps))),
                            stage=node.stage, layer=node.layer, **kwargs)
        self.instructions.append(instr)
        self.entries.setdefault(node.id, []).append(instr.id)
        return instr.id

    def __len__(self):
        return len(self.instructions)

    def __iter__(self):
        for instr in self.instructions:
            yield instr

    def __getitem__(self, item):
        return self.instructions[item]

    def dump(self):
        """Human-readable listing, one instruction per line."""
        return [str(instr) for instr in self.instructions]

    def counts(self):
        """{(target, opcode): count}"""
        out = {}
        for instr in self.instructions:
            key = (instr.target, instr.opcode)
            out[key] = out.get(key, 0) + 1
        return out


def stream_closure(stream):
    """{node id: set of node ids whose instructions transitively depend on it}"""
    reach = {}
    for instr in stream.instructions:
        nodes = set()
        for dep in instr.deps:
            nodes.add(stream[dep].node)
            nodes |= reach[dep]
        reach[instr.id] = nodes
    out = {}
    for instr in stream.instructions:
        for upstream in reach[instr.id]:
            if upstream != instr.node:
                out.setdefault(upstream, set()).add(instr.node)
    return out


class _Lowering(object):

    def __init__(self, graph, mmap, cfg):
        self.graph = graph
        self.mmap = mmap
        self.cfg = cfg
        self.model = graph.model
        self.R = cfg.round_elements
        self.C = cfg.geometry.channels
        self.stream = InstructionStream(graph)

    def inputs(self, node):
        deps = []
        for dep in node.deps:
            deps.extend(self.stream.exits[dep])
        return deps

    def srcs(self, node):
        return tuple(self.graph[dep].name for dep in node.deps)

    def lower(self):
        for node in self.graph:
            handler = getattr(self, '_lower_%s' % node.kind, None)
            if handler is None:
                raise CompileException('node %d: no lowering for kind %s' % (node.id, node.kind))
            exits = handler(node)
            self.stream.exits[node.id] = exits
        self._mark_fusion()
        log.debug("Compiled token %d: %d nodes -> %d instructions", self.graph.token_position,
                  len(self.graph), len(self.stream))
        return self.stream

    def _mark_fusion(self):
        instrs = self.stream.instructions
        for a, b in zip(instrs[:-1], instrs[1:]):
            if a.opcode == 'collect' and b.target == 'asic' and a.id in b.deps:
                a.fused = True

    def _rounds(self, node, entry_deps, slices, mac_args, collect_bytes, operand, split_dst=True, copies=None):
        """
        Broadcast / per-channel MAC / collect for every round; returns the collect ids. A
        broadcast lands in every channel's GB unless `copies` says fewer channels need it.
        """
        copies = self.C if copies is None else copies
        collects = []
        deps = list(entry_deps)
        for r, (lo, hi) in enumerate(slices):
            bc = self.stream.emit('bus', 'broadcast', node, deps, operand=operand, length=hi - lo,
                                  nbytes=2 * (hi - lo), copies=copies, srcs=self.srcs(node)[:1],
                                  args={'round': r, 'lo': lo, 'hi': hi})
            macs = []
            for ch in range(self.C):
                args = dict(mac_args(r), round=r)
                macs.append(self.stream.emit('pim', 'mac', node, (bc,), channel=ch, operand=operand,
                                             length=hi - lo, args=args))
            nbytes = collect_bytes(r)
            col = self.stream.emit('bus', 'collect', node, macs, operand=operand, nbytes=nbytes,
                                   length=nbytes // 2, dst='%s#%d' % (node.name, r) if split_dst and len(slices) > 1 else node.name,
                                   args={'round': r, 'channels': self.C})
            collects.append(col)
            deps = [col] + list(entry_deps)
        return collects

    def _finish(self, node, collects, parts, length):
        if len(collects) == 1:
            return collects
        ps = self.stream.emit('asic', 'partial_sum', node, collects, operand=node.operand, length=length,
                              srcs=tuple('%s#%d' % (node.name, r) for r in range(len(collects))),
                              dst=node.name, args={'parts': parts, 'elements': length})
        return [ps]

    def _lower_vmm(self, node):
        if len(node.shape) == 3:
            if node.operand.endswith('key'):
                return self._lower_score(node)
            return self._lower_context(node)
        if node.operand not in self.mmap:
            raise CompileException('node %d (%s): matrix %s is not mapped' % (node.id, node.name, node.operand))
        placement = self.mmap[node.operand]
        rows, cols = node.shape
        if placement.extents != (rows, cols):
            raise CompileException('node %d (%s): matrix %s is %dx%d, node expects %dx%d' %
                                   ((node.id, node.name, node.operand) + placement.extents + (rows, cols)))
        slices = [(p.col0, p.col0 + p.width) for p in placement.panels]
        collects = self._rounds(node, self.inputs(node), slices, lambda r: {'panel': r},
                                lambda r: 2 * rows, node.operand)
        return self._finish(node, collects, len(collects), rows)

    def _reservation(self, node, kind):
        try:
            return self.mmap.reservation(node.layer, kind)
        except KeyError:
            raise CompileException('node %d (%s): no %s cache reserved for layer %s' %
                                   (node.id, node.name, kind, node.layer))

    def _lower_score(self, node):
        res = self._reservation(node, 'key')
        h, T, dh = node.shape
        if T > res.token_capacity:
            raise CompileException('node %d (%s): %d tokens exceed the %d-token reservation' %
                                   (node.id, node.name, T, res.token_capacity))
        per_round = max(1, min(self.R // dh, res.heads_per_row))
        groups = [(h0, min(h, h0 + per_round)) for h0 in range(0, h, per_round)]
        slices = [(h0 * dh, h1 * dh) for h0, h1 in groups]
        collects = self._rounds(node, self.inputs(node), slices,
                                lambda r: {'heads': groups[r], 'tokens': T},
                                lambda r: 2 * (groups[r][1] - groups[r][0]) * T, node.operand, split_dst=False)
        if len(collects) > 1:
            # scores of different heads are disjoint, the last collect completes them
            return collects[-1:]
        return collects

    def _lower_context(self, node):
        res = self._reservation(node, 'value')
        h, T, dh = node.shape
        total = h * T
        slices = [(lo, min(total, lo + self.R)) for lo in range(0, total, self.R)]
        plans = []
        for lo, hi in slices:
            plan = []
            for hd in range(lo // T, _ceil_div(hi, T)):
                ta, tb = max(lo - hd * T, 0), min(hi - hd * T, T)
                if plan and plan[-1][2:] == (ta, tb) and plan[-1][1] == hd * dh:
                    plan[-1] = (plan[-1][0], (hd + 1) * dh, ta, tb)
                else:
                    plan.append((hd * dh, (hd + 1) * dh, ta, tb))
            plans.append(plan)
        # value heads are channel-blocked, so each probability is sent to one channel only
        collects = self._rounds(node, self.inputs(node), slices,
                                lambda r: {'groups': plans[r], 'tokens': T},
                                lambda r: 2 * sum(c1 - c0 for c0, c1, _, _ in plans[r]), node.operand, copies=1)
        if len(collects) == 1:
            return collects
        split_heads = sum(1 for hd in range(h) if (hd * T) // self.R != ((hd + 1) * T - 1) // self.R)
        ps = self.stream.emit('asic', 'partial_sum', node, collects, operand=node.operand,
                              length=split_heads * dh,
                              srcs=tuple('%s#%d' % (node.name, r) for r in range(len(collects))),
                              dst=node.name, args={'parts': len(collects), 'elements': split_heads * dh,
                                                   'plans': plans})
        return [ps]

    def _lower_kv_write_key(self, node):
        res = self._reservation(node, 'key')
        t = self.graph.token_position - 1
        if t >= res.token_capacity:
            raise CompileException('node %d (%s): token %d past the %d-token reservation' %
                                   (node.id, node.name, t, res.token_capacity))
        d = node.shape[0]
        bus = self.stream.emit('bus', 'write_kv', node, self.inputs(node), operand=node.operand, length=d,
                               nbytes=2 * d, srcs=self.srcs(node), args={'token': t})
        ch, _, _ = res.token_location(t)
        wr = self.stream.emit('pim', 'write_key', node, (bus,), channel=ch, operand=node.operand, length=d,
                              srcs=self.srcs(node), args={'token': t})
        return [wr]

    def _lower_kv_write_value(self, node):
        res = self._reservation(node, 'value')
        t = self.graph.token_position - 1
        if t >= res.token_capacity:
            raise CompileException('node %d (%s): token %d past the %d-token reservation' %
                                   (node.id, node.name, t, res.token_capacity))
        d = node.shape[0]
        bus = self.stream.emit('bus', 'write_kv', node, self.inputs(node), operand=node.operand, length=d,
                               nbytes=2 * d, srcs=self.srcs(node), args={'token': t})
        writes = []
        for ch in range(self.C):
            n = sum(res.slot_count(ch, b, d) for b in range(self.cfg.geometry.banks_per_channel))
            if n:
                writes.append(self.stream.emit('pim', 'write_value', node, (bus,), channel=ch,
                                               operand=node.operand, length=n, srcs=self.srcs(node),
                                               args={'token': t}))
        return writes

    def _lower_embed_lookup(self, node):
        if node.operand not in self.mmap:
            raise CompileException('node %d (%s): matrix %s is not mapped' % (node.id, node.name, node.operand))
        placement = self.mmap[node.operand]
        token = self.graph.token_id
        if not 0 <= token < placement.rows:
            raise CompileException('node %d: token id %d outside the vocabulary' % (node.id, token))
        channels = set()
        for panel in placement.panels:
            g, _ = panel.bank_of_row(token)
            channels.add(g // self.cfg.geometry.banks_per_channel)
        reads = [self.stream.emit('pim', 'read_row', node, self.inputs(node), channel=ch, operand=node.operand,
                                  length=node.shape[0], args={'token': token})
                 for ch in sorted(channels)]
        return reads

    def _lower_transfer_collect(self, node):
        n = node.shape[0]
        col = self.stream.emit('bus', 'collect', node, self.inputs(node), operand=node.operand, length=n,
                               nbytes=2 * n, dst=node.name, args={'round': 0, 'channels': 1})
        return [col]

    def _lower_transfer_broadcast(self, node):
        n = node.shape[0]
        return [self.stream.emit('bus', 'broadcast', node, self.inputs(node), operand=node.operand, length=n,
                                 nbytes=2 * n, copies=self.C, srcs=self.srcs(node),
                                 args={'round': 0, 'lo': 0, 'hi': n})]

    def _asic(self, node, **args):
        n = 1
        for s in node.shape:
            n *= s
        return [self.stream.emit('asic', node.kind, node, self.inputs(node), operand=node.operand, length=n,
                                 srcs=self.srcs(node), dst=node.name, args=args)]

    def _lower_layernorm(self, node):
        return self._asic(node)

    def _lower_softmax(self, node):
        return self._asic(node, heads=node.shape[0], tokens=node.shape[1], d_head=self.model.d_head)

    def _lower_gelu(self, node):
        return self._asic(node)

    def _lower_residual_add(self, node):
        return self._asic(node)

    def _lower_argmax(self, node):
        return self._asic(node)

    def _lower_partial_sum(self, node):
        return self._asic(node, parts=len(node.deps), elements=node.shape[0])


def compile_graph(graph, mmap, cfg):
    """
    Lower `graph` to an :class:`InstructionStream` against `mmap`.

    :raises CompileException: naming the node whose operand is not mapped or reserved
    """
    return _Lowering(graph, mmap, cfg).lower()


def compile_token(model, mmap, cfg, token_position, token_id=0):
    """build_graph then compile_graph."""
    return compile_graph(build_graph(model, token_position, token_id), mmap, cfg)


#
# Bank programs and DRAM commands
#

@dataclass(frozen=True)
class SpanRun(object):
    """
    `count` repetitions, `stride` rows apart, of a row-span pattern: pattern[j] column accesses
    to row row0 + i*stride + j. `kind` is "rd" or "wr"; `close` precharges after each row.
    """
    row0: int
    count: int
    stride: int
    pattern: tuple
    kind: str = 'rd'
    close: bool = False

    @property
    def accesses(self):
        return self.count * sum(self.pattern)

    @property
    def rows(self):
        return self.count * len(self.pattern)


@dataclass(frozen=True)
class Command(object):
    channel: int
    bank: int
    kind: str
    row: int


def _row_pattern(offset, length, cap, mw):
    """First row and per-row access counts of `length` elements starting `offset` into a region."""
    first = offset // cap
    pattern = []
    pos, end = offset, offset + length
    while pos < end:
        stop = min(end, (pos // cap + 1) * cap)
        pattern.append(_ceil_div(stop - pos, mw))
        pos = stop
    return first, tuple(pattern)


def _weight_runs(panel, g, cap, mw):
    elements = panel.bank_elements(g)
    full, rem = divmod(elements, cap)
    runs = []
    if full:
        runs.append(SpanRun(panel.base_row, full, 1, (_ceil_div(cap, mw),)))
    if rem:
        runs.append(SpanRun(panel.base_row + full, 1, 1, (_ceil_div(rem, mw),)))
    return runs


def bank_programs(instr, mmap, cfg):
    """
    Per-bank span programs of a PIM instruction.

    :returns: {(channel, bank): list of :class:`SpanRun`}, banks with nothing to do omitted
    """
    if instr.target != 'pim':
        return {}
    geom = cfg.geometry
    mw = cfg.pim.mac_width
    cap = mmap.row_capacity
    ch = instr.channel
    out = {}
    op = instr.opcode
    for bank in range(geom.banks_per_channel):
        g = ch * geom.banks_per_channel + bank
        runs = []
        if op == 'mac' and 'panel' in instr.args:
            runs = _weight_runs(mmap[instr.operand].panels[instr.args['panel']], g, cap, mw)
        elif op == 'mac' and 'heads' in instr.args:
            res = mmap.reservation(instr.layer, 'key')
            h0, h1 = instr.args['heads']
            n = res.slot_count(ch, bank, instr.args['tokens'])
            pattern, first = [], None
            for i, (hf, hn) in enumerate(res.key_parts()):
                overlap = min(hf + hn, h1) - max(hf, h0)
                if overlap > 0:
                    first = i if first is None else first
                    pattern.append(_ceil_div(overlap * res.d_head, mw))
            if n and pattern:
                runs.append(SpanRun(res.base_row + first, n, res.rows_per_token, tuple(pattern)))
        elif op == 'mac':
            res = mmap.reservation(instr.layer, 'value')
            B = geom.banks_per_channel
            for c0, c1, ta, tb in instr.args['groups']:
                m0, m1 = res.channel_columns(ch, c0, c1)
                lo = max(0, _ceil_div(m0 - bank, B))
                hi = _ceil_div(m1 - bank, B)
                if hi > lo:
                    first, pattern = _row_pattern(ta, tb - ta, cap, mw)
                    runs.append(SpanRun(res.base_row + lo * res.rows_per_column + first, hi - lo,
                                        res.rows_per_column, pattern))
        elif op == 'read_row':
            placement = mmap[instr.operand]
            token = instr.args['token']
            for panel in placement.panels:
                owner, local = panel.bank_of_row(token)
                if owner == g:
                    first, pattern = _row_pattern(local * panel.width, panel.width, cap, mw)
                    runs.append(SpanRun(panel.base_row + first, 1, 1, pattern))
        elif op == 'write_key':
            res = mmap.reservation(instr.layer, 'key')
            t = instr.args['token']
            tch, tbank, row = res.token_location(t)
            if (tch, tbank) == (ch, bank):
                pattern = tuple(_ceil_div(n * res.d_head, mw) for _, n in res.key_parts())
                runs.append(SpanRun(row, 1, res.rows_per_token, pattern, 'wr'))
        elif op == 'write_value':
            res = mmap.reservation(instr.layer, 'value')
            t = instr.args['token']
            n = res.slot_count(ch, bank, res.d_model)
            if n:
                runs.append(SpanRun(res.base_row + t // cap, n, res.rows_per_column, (1,), 'wr', True))
        else:
            raise CompileException('instruction %d: unknown PIM opcode %s' % (instr.id, op))
        if runs:
            out[(ch, bank)] = runs
    return out


def expand_runs(runs, channel, bank, open_row=None):
    """Expand span runs of one bank into commands; returns (commands, open row afterwards)."""
    cmds = []
    for run in runs:
        col = 'RD' if run.kind == 'rd' else 'WR'
        for i in range(run.count):
            for j, n in enumerate(run.pattern):
                row = run.row0 + i * run.stride + j
                if open_row != row:
                    if open_row is not None:
                        cmds.append(Command(channel, bank, 'PRE', open_row))
                    cmds.append(Command(channel, bank, 'ACT', row))
                    open_row = row
                cmds.extend([Command(channel, bank, col, row)] * n)
                if run.close:
                    cmds.append(Command(channel, bank, 'PRE', row))
                    open_row = None
    return cmds, open_row


def lower_to_commands(instr, mmap, cfg, open_rows=None):
    """
    DRAM commands of a PIM instruction under the open-row policy, bank by bank in
    (channel, bank) order. Bus instructions move no rows and give an empty list.

    :param open_rows: (dict) (channel, bank) -> row left open by earlier commands
    """
    if instr.target == 'asic':
        raise ValueError('instruction %d runs on the ASIC, it has no DRAM commands' % instr.id)
    open_rows = open_rows if open_rows is not None else {}
    cmds = []
    for (ch, bank), runs in sorted(bank_programs(instr, mmap, cfg).items()):
        bank_cmds, open_rows[(ch, bank)] = expand_runs(runs, ch, bank, open_rows.get((ch, bank)))
        cmds.extend(bank_cmds)
    return cmds
