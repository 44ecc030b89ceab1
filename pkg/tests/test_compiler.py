import unittest

from pimgpt.config import SystemConfig
from pimgpt.models import GptModelConfig
from pimgpt.mapper import MemoryMap, build_memory_map, map_weights, reserve_kv
from pimgpt.compiler import *


TOY = GptModelConfig.build('toy', 2, 64, 4, 256, 16)


def toy_config():
    return SystemConfig().override({'geometry.channels': 2, 'geometry.banks_per_channel': 4,
                                    'geometry.row_bytes': 128, 'geometry.capacity_per_channel': 67108864,
                                    'pim.gb_bytes': 64})


class GraphTest(unittest.TestCase):

    def setUp(self):
        self.graph = build_graph(TOY, 5, token_id=3)

    def test_size(self):
        self.assertEqual(len(self.graph), 2 + 16 * TOY.num_layers + 3)

    def test_order(self):
        for node in self.graph:
            for dep in node.deps:
                self.assertLess(dep, node.id, msg='nodes are in topological order')

    def test_kinds(self):
        kinds = set(node.kind for node in self.graph)
        self.assertTrue(kinds <= set(NODE_KINDS))
        self.assertEqual(self.graph[0].kind, 'embed_lookup')
        self.assertEqual(self.graph[len(self.graph) - 1].kind, 'argmax')

    def test_attention_shapes(self):
        scores = [n for n in self.graph if n.name == 'L1.scores'][0]
        self.assertEqual(scores.shape, (4, 5, 16))
        self.assertEqual(scores.operand, 'L1.key')

    def test_position(self):
        self.assertRaises(ValueError, build_graph, TOY, 0)
        self.assertRaises(ValueError, build_graph, TOY, 17)

    def test_unknown_dep(self):
        self.assertRaises(CompileException, self.graph.add, 'gelu', (4,), (len(self.graph),))

    def test_closure(self):
        closure = node_closure(self.graph)
        self.assertIn(len(self.graph) - 1, closure[0], msg='everything feeds the argmax')
        self.assertEqual(closure[len(self.graph) - 1], set())


class StreamTest(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.cfg = toy_config()
        cls.mmap = build_memory_map(TOY, cls.cfg, 16)
        cls.stream = compile_token(TOY, cls.mmap, cls.cfg, 1)

    def test_counts(self):
        counts = self.stream.counts()
        # per layer 21 GB rounds: 2 each for Q, K, V, scores, proj, ffn1; 8 for ffn2; 1 for context
        expected = {('bus', 'broadcast'): 44, ('pim', 'mac'): 88, ('bus', 'collect'): 45,
                    ('asic', 'partial_sum'): 13, ('bus', 'write_kv'): 4, ('pim', 'write_key'): 2,
                    ('pim', 'write_value'): 4, ('pim', 'read_row'): 1, ('asic', 'layernorm'): 5,
                    ('asic', 'softmax'): 2, ('asic', 'gelu'): 2, ('asic', 'residual_add'): 4,
                    ('asic', 'argmax'): 1}
        self.assertEqual(counts, expected)

    def test_context_rounds(self):
        later = compile_token(TOY, self.mmap, self.cfg, 16).counts()
        self.assertEqual(later[('asic', 'partial_sum')], 15,
                         msg='64 context scores span two rounds in each layer')

    def test_ids(self):
        for i, instr in enumerate(self.stream):
            self.assertEqual(instr.id, i)
            for dep in instr.deps:
                self.assertLess(dep, instr.id)

    def test_targets(self):
        for instr in self.stream:
            self.assertIn(instr.target, ('pim', 'asic', 'bus'))
            self.assertEqual(instr.channel is not None, instr.target == 'pim', msg=str(instr))

    def test_dependencies_preserved(self):
        graph_reach = node_closure(self.stream.graph)
        stream_reach = stream_closure(self.stream)
        for node in self.stream.graph:
            self.assertEqual(stream_reach.get(node.id, set()), graph_reach[node.id], msg=node.name)

    def test_fusion(self):
        fused = [i for i in self.stream if i.fused]
        self.assertTrue(fused)
        for instr in fused:
            self.assertEqual(instr.opcode, 'collect')
            self.assertEqual(self.stream[instr.id + 1].target, 'asic')

    def test_dump(self):
        lines = self.stream.dump()
        self.assertEqual(len(lines), len(self.stream))
        self.assertIn('read_row', lines[0])

    def test_transfer_bytes(self):
        for instr in self.stream:
            if instr.opcode == 'broadcast':
                self.assertLessEqual(instr.nbytes, self.cfg.pim.gb_bytes, msg='a broadcast fills at most the GB')

    def test_broadcast_copies(self):
        context = set(i.operand for i in self.stream if i.opcode == 'mac' and 'groups' in i.args)
        self.assertTrue(context)
        for instr in self.stream:
            if instr.opcode == 'broadcast':
                expected = 1 if instr.operand in context else self.cfg.geometry.channels
                self.assertEqual(instr.copies, expected, msg=str(instr))
            elif instr.target == 'bus':
                self.assertEqual(instr.copies, 1, msg=str(instr))


class CompileErrorTest(unittest.TestCase):

    def setUp(self):
        self.cfg = toy_config()

    def test_unmapped(self):
        mmap = MemoryMap(self.cfg.geometry, self.cfg.geometry.row_elements, self.cfg.round_elements)
        self.assertRaises(CompileException, compile_token, TOY, mmap, self.cfg, 1)

    def test_no_kv(self):
        mmap = map_weights(TOY, self.cfg.geometry, panel_width=self.cfg.round_elements)
        with self.assertRaises(CompileException) as ctx:
            compile_token(TOY, mmap, self.cfg, 1)
        self.assertIn('key cache', str(ctx.exception))

    def test_past_reservation(self):
        mmap = map_weights(TOY, self.cfg.geometry, panel_width=self.cfg.round_elements)
        reserve_kv(TOY, 4, self.cfg.geometry, mmap=mmap)
        compile_token(TOY, mmap, self.cfg, 4)
        self.assertRaises(CompileException, compile_token, TOY, mmap, self.cfg, 5)

    def test_token_id(self):
        mmap = build_memory_map(TOY, self.cfg, 16)
        self.assertRaises(CompileException, compile_token, TOY, mmap, self.cfg, 1, 256)


class CommandTest(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.cfg = toy_config()
        cls.mmap = build_memory_map(TOY, cls.cfg, 16)
        cls.stream = compile_token(TOY, cls.mmap, cls.cfg, 1)

    def first(self, opcode, operand=None, channel=0):
        for instr in self.stream:
            if instr.opcode == opcode and instr.channel == channel and operand in (None, instr.operand):
                return instr

    def test_weight_program(self):
        instr = self.first('mac', 'L0.W_Q')
        self.assertEqual(instr.args['panel'], 0)
        programs = bank_programs(instr, self.mmap, self.cfg)
        self.assertEqual(sorted(programs), [(0, b) for b in range(4)])
        # 64 rows over 8 banks, 32 columns each: 4 full DRAM rows of 4 MAC accesses
        self.assertEqual(programs[(0, 0)], [SpanRun(0, 4, 1, (4,))])
        self.assertEqual(programs[(0, 0)][0].accesses, 16)

    def test_open_row_policy(self):
        runs = [SpanRun(0, 4, 1, (4,))]
        cmds, open_row = expand_runs(runs, 0, 0)
        kinds = [c.kind for c in cmds]
        self.assertEqual((kinds.count('ACT'), kinds.count('RD'), kinds.count('PRE')), (4, 16, 3))
        self.assertEqual(open_row, 3)
        cmds, _ = expand_runs(runs, 0, 0, open_row=0)
        self.assertEqual(cmds[0].kind, 'RD', msg='row 0 is already open')

    def test_closed_writes(self):
        cmds, open_row = expand_runs([SpanRun(5, 2, 2, (1,), 'wr', True)], 1, 2)
        self.assertEqual([c.kind for c in cmds], ['ACT', 'WR', 'PRE', 'ACT', 'WR', 'PRE'])
        self.assertEqual([c.row for c in cmds[::3]], [5, 7])
        self.assertIsNone(open_row)

    def test_lower_to_commands(self):
        instr = self.first('mac', 'L0.W_Q')
        open_rows = {}
        cmds = lower_to_commands(instr, self.mmap, self.cfg, open_rows)
        self.assertEqual(len(cmds), 4 * (4 + 16 + 3))
        self.assertEqual(open_rows[(0, 3)], 3)
        self.assertTrue(all(c.channel == 0 for c in cmds))

    def test_context_program(self):
        for ch in range(self.cfg.geometry.channels):
            instr = [i for i in self.stream if i.opcode == 'mac' and 'groups' in i.args and i.channel == ch][0]
            res = self.mmap.reservation(instr.layer, 'value')
            programs = bank_programs(instr, self.mmap, self.cfg)
            # two 16-column heads per channel, dealt over its four banks
            self.assertEqual(sorted(programs), [(ch, b) for b in range(4)])
            for runs in programs.values():
                self.assertEqual(runs, [SpanRun(res.base_row, 8, 1, (1,))])

    def test_write_key(self):
        instr = self.first('write_key')
        programs = bank_programs(instr, self.mmap, self.cfg)
        self.assertEqual(len(programs), 1, msg='a key vector lands in one bank')
        (runs,) = programs.values()
        self.assertEqual(runs[0].kind, 'wr')
        self.assertEqual(runs[0].accesses, 4)

    def test_asic_has_no_commands(self):
        instr = [i for i in self.stream if i.target == 'asic'][0]
        self.assertRaises(ValueError, lower_to_commands, instr, self.mmap, self.cfg)

    def test_bus_has_no_commands(self):
        instr = self.first('broadcast', channel=None)
        self.assertEqual(lower_to_commands(instr, self.mmap, self.cfg), [])


if __name__ == '__main__':
    unittest.main()
