import unittest

from pimgpt.config import SystemConfig
from pimgpt.models import GptModelConfig
from pimgpt.mapper import MemoryMap, build_memory_map
from pimgpt.compiler import Command, Instruction, InstructionStream, compile_token
from pimgpt.trace import check_trace
from pimgpt.engine import *


TOY = GptModelConfig.build('toy', 2, 64, 4, 256, 16)


def toy_config():
    return SystemConfig().override({'geometry.channels': 2, 'geometry.banks_per_channel': 4,
                                    'geometry.row_bytes': 128, 'geometry.capacity_per_channel': 67108864,
                                    'pim.gb_bytes': 64})


class LatencyTest(unittest.TestCase):

    def setUp(self):
        self.cfg = SystemConfig()

    def test_transfer(self):
        self.assertEqual(transfer(2000, 'broadcast', self.cfg), 62500, msg='2000 B at 32 GB/s')
        self.assertEqual(transfer(2048, 'collect', self.cfg), 64000)
        self.assertEqual(transfer(1, 'write_kv', self.cfg), 32)

    def test_transfer_errors(self):
        self.assertRaises(ValueError, transfer, 0, 'broadcast', self.cfg)
        self.assertRaises(ValueError, transfer, 64, 'sideways', self.cfg)

    def test_asic(self):
        self.assertEqual(asic_compute('residual_add', 768, self.cfg), 3)
        self.assertEqual(asic_compute('partial_sum', 1000, self.cfg), 4)
        self.assertEqual(asic_compute('argmax', 1, self.cfg), 1, msg='every operation takes at least a cycle')

    def test_asic_rows(self):
        self.assertEqual(asic_census('softmax', 10, rows=3), tuple(3 * n for n in asic_census('softmax', 10)))

    def test_asic_errors(self):
        self.assertRaises(ValueError, asic_compute, 'residual_add', 0, self.cfg)
        self.assertRaises(ValueError, asic_compute, 'sqrt', 8, self.cfg)

    def test_slower_clock(self):
        lat = LatencyModel(self.cfg.override({'asic.clock': 1e8}))
        instr = Instruction(0, 'asic', 'residual_add', 0, length=768)
        self.assertEqual(lat.asic(instr), 30000)
        self.assertEqual(LatencyModel(self.cfg).asic(instr), 3000)


class IssueCommandTest(unittest.TestCase):

    def setUp(self):
        self.cfg = SystemConfig()
        self.sim = Simulator(None, self.cfg, detail=True)

    def issue(self, kind, clock, row=5, bank=0):
        return self.sim.issue_command((0, bank), Command(0, bank, kind, row), clock)

    def assertViolation(self, constraint, kind, clock, row=5, bank=0):
        with self.assertRaises(TimingViolation) as ctx:
            self.issue(kind, clock, row, bank)
        self.assertEqual(ctx.exception.constraint, constraint)

    def test_open_read_close(self):
        self.assertEqual(self.issue('ACT', 0), 12000)
        self.assertEqual(self.sim.node_state(0, 0, 6000), ('Process', 12000, 5))
        self.assertEqual(self.issue('RD', 12000), 13000)
        self.assertEqual(self.issue('RD', 13000), 14000)
        self.assertEqual(self.issue('PRE', 32000), 44000)
        self.assertEqual(self.sim.node_state(0, 0, 44000), ('Idle', 44000, None))
        self.assertEqual(self.issue('ACT', 44000, row=6), 56000)
        self.assertEqual(check_trace(self.sim.trace.events, self.cfg), [])

    def test_row_hits(self):
        self.issue('ACT', 0)
        self.issue('RD', 12000)
        self.issue('RD', 13000)
        self.assertEqual(self.sim.trace.counts['row_hits'], 1)
        self.assertEqual([ev.row_hit for ev in self.sim.trace], [0, 0, 1])

    def test_trcd(self):
        self.issue('ACT', 0)
        self.assertViolation('tRCD', 'RD', 5000)

    def test_tccd(self):
        self.issue('ACT', 0)
        self.issue('RD', 12000)
        self.assertViolation('tCCD', 'RD', 12500)

    def test_tras(self):
        self.issue('ACT', 0)
        self.assertViolation('tRAS', 'PRE', 20000)

    def test_trp(self):
        self.issue('ACT', 0)
        self.issue('PRE', 32000)
        self.assertViolation('tRP', 'ACT', 40000)

    def test_twr(self):
        self.issue('ACT', 0)
        self.issue('WR', 30000)
        self.assertViolation('tWR', 'PRE', 32000)

    def test_busy(self):
        self.issue('ACT', 0)
        self.assertEqual(self.issue('RD', 40000), 41000)
        self.assertEqual(self.sim.node_state(0, 0, 40500)[0], 'Process')
        self.assertViolation('busy', 'PRE', 40500)
        self.assertEqual(self.issue('PRE', 41000), 53000)

    def test_row_state(self):
        self.assertViolation('row-state', 'RD', 0)
        self.assertViolation('row-state', 'PRE', 0)
        self.issue('ACT', 0)
        self.assertViolation('row-state', 'RD', 12000, row=6)
        self.assertViolation('row-state', 'ACT', 50000, row=6)

    def test_refresh(self):
        self.assertEqual(self.sim.issue_command((0, None), Command(0, None, 'REF', None), 0), 455000)
        self.assertViolation('tRFC', 'ACT', 100000)
        self.assertEqual(self.issue('ACT', 455000), 467000)

    def test_refresh_open_row(self):
        self.issue('ACT', 0, bank=3)
        with self.assertRaises(TimingViolation) as ctx:
            self.sim.issue_command((0, None), Command(0, None, 'REF', None), 50000)
        self.assertEqual(ctx.exception.constraint, 'row-state')


class MacTimingTest(unittest.TestCase):

    def setUp(self):
        self.cfg = SystemConfig()
        self.mmap = MemoryMap(self.cfg.geometry, 1024, 1024)
        # one 16-element stored row per bank: a single MAC access each
        self.mmap.place('M', self.cfg.geometry.total_banks, 16)
        self.sim = Simulator(self.mmap, self.cfg)

    def mac(self, channel=0):
        return Instruction(0, 'pim', 'mac', 0, channel=channel, operand='M', length=16, stage='attention',
                           args={'panel': 0, 'round': 0})

    def test_fresh_row(self):
        self.assertEqual(self.sim.issue_group([self.mac()]), 12000 + 1000 + 5000,
                         msg='tRCD, one access, MAC drain')
        counts = self.sim.trace.counts
        self.assertEqual((counts['ACT'], counts['RD'], counts['row_hits']), (16, 16, 0))
        self.assertEqual(self.sim.trace.stages['attention']['mac_rd'], 16)

    def test_open_row(self):
        end = self.sim.issue_group([self.mac()])
        self.assertEqual(self.sim.issue_group([self.mac()]) - end, 1000 + 5000, msg='row already open')
        self.assertEqual(self.sim.trace.counts['row_hits'], 16)

    def test_drain_once(self):
        mmap = MemoryMap(self.cfg.geometry, 1024, 1024)
        # two full DRAM rows per bank
        mmap.place('W', 2 * self.cfg.geometry.total_banks, 1024)
        sim = Simulator(mmap, self.cfg)
        instr = Instruction(0, 'pim', 'mac', 0, channel=0, operand='W', length=1024, stage='ffn',
                            args={'panel': 0, 'round': 0})
        self.assertEqual(sim.issue_group([instr]), 12000 + 64000 + 12000 + 12000 + 64000 + 5000,
                         msg='the first span drains under the PRE and ACT of the second')
        self.assertEqual(sim.trace.counts['ACT'], 32)

    def test_group(self):
        end = self.sim.issue_group([self.mac(ch) for ch in range(8)])
        self.assertEqual(end, 18000, msg='channels work in parallel')
        self.assertEqual(self.sim.trace.counts['ACT'], 128)
        self.assertEqual(self.sim.trace.breakdown['vmm'], 18000)

    def test_detail_events(self):
        sim = Simulator(self.mmap, self.cfg, detail=True)
        sim.issue_group([self.mac()])
        trace = sim.finish()
        self.assertEqual(len(trace), 32)
        self.assertEqual(trace.events[0].node, 'ch0/b0/r0')
        self.assertEqual(check_trace(trace.events, self.cfg, trace.final_clock), [])


class PipelineTest(unittest.TestCase):

    def test_one_chunk(self):
        self.assertEqual(pipeline_span(1, 64000, 184000), 248000, msg='stages back to back')

    def test_overlap(self):
        self.assertEqual(pipeline_span(8, 64000, 184000), 8000 + 23000 + 7 * 23000)
        for k in (2, 4, 8, 64):
            self.assertLessEqual(pipeline_span(k, 64000, 184000), pipeline_span(1, 64000, 184000))
            self.assertGreaterEqual(pipeline_span(k, 64000, 184000), 184000, msg='never below the slowest stage')

    def test_hidden_behind_producer(self):
        self.assertEqual(pipeline_span(4, 345000, 64000, 184000), 86250 + 16000 + 46000 + 3 * 86250)


class FusionTest(unittest.TestCase):

    def setUp(self):
        self.cfg = SystemConfig()
        self.mmap = MemoryMap(self.cfg.geometry, 1024, 1024)
        # four DRAM rows per bank
        self.mmap.place('W', 4 * self.cfg.geometry.total_banks, 1024)

    def stream(self, fused, consumer='gelu', macs=True):
        stream = InstructionStream()
        add = stream.instructions.append
        deps = ()
        if macs:
            for ch in range(8):
                add(Instruction(ch, 'pim', 'mac', 0, channel=ch, operand='W', length=1024, stage='ffn',
                                args={'panel': 0, 'round': 0}))
            deps = tuple(range(8))
        n = len(stream.instructions)
        add(Instruction(n, 'bus', 'collect', 1, nbytes=2048, fused=fused, deps=deps, stage='ffn',
                        args={'round': 0, 'channels': 8}))
        if consumer == 'gelu':
            add(Instruction(n + 1, 'asic', 'gelu', 2, length=1024, deps=(n,), stage='ffn'))
        else:
            add(Instruction(n + 1, 'asic', 'softmax', 2, length=1024, deps=(n,), stage='ffn',
                            args={'tokens': 1024, 'heads': 1}))
        return stream

    def execute(self, stream):
        sim = Simulator(self.mmap, self.cfg)
        return sim.execute(stream), sim.trace

    def test_unfused(self):
        end, trace = self.execute(self.stream(False))
        self.assertEqual(end, 345000 + 64000 + 184000)
        self.assertEqual(trace.breakdown['transfer'], 64000)
        self.assertEqual(trace.breakdown['asic-arith'], 184000)

    def test_fused_after_collect(self):
        end, trace = self.execute(self.stream(True, macs=False))
        self.assertEqual(end, pipeline_span(8, 64000, 184000))
        self.assertLess(end, 64000 + 184000)
        self.assertEqual(trace.breakdown['transfer'], 64000)
        self.assertEqual(sum(trace.breakdown.values()), end)

    def test_streams_behind_macs(self):
        end, trace = self.execute(self.stream(True))
        self.assertEqual(end, 407000, msg='results leave the banks after each of the four row spans')
        self.assertEqual(trace.breakdown['vmm'], 345000)
        self.assertEqual(trace.breakdown['transfer'], 16000)
        self.assertEqual(trace.breakdown['asic-arith'], 46000)
        self.assertEqual(trace.asic_busy_ps['gelu'], 184000)
        self.assertEqual(trace.bus_bytes['collect'], 2048)

    def test_whole_vector_consumer(self):
        fused, _ = self.execute(self.stream(True, consumer='softmax'))
        unfused, _ = self.execute(self.stream(False, consumer='softmax'))
        softmax = Simulator(self.mmap, self.cfg).lat.asic(self.stream(True, consumer='softmax')[9])
        self.assertEqual(fused, 345000 + pipeline_span(8, 64000, softmax), msg='softmax needs all its scores')
        self.assertLessEqual(fused, unfused)


class StreamTimingTest(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.cfg = toy_config()
        cls.mmap = build_memory_map(TOY, cls.cfg, 16)
        cls.streams = [compile_token(TOY, cls.mmap, cls.cfg, t) for t in range(1, 9)]
        cls.traces = {}
        cls.done = []
        for detail in (False, True):
            sim = Simulator(cls.mmap, cls.cfg, detail)
            if detail:
                sim.token_done += lambda index, clock: cls.done.append((index, clock))
            for stream in cls.streams:
                sim.run_token(stream)
            cls.traces[detail] = sim.finish()

    def test_fast_equals_detail(self):
        fast, detail = self.traces[False], self.traces[True]
        self.assertEqual(fast.summary(), detail.summary())
        self.assertEqual(fast.token_latency_ps, detail.token_latency_ps)
        self.assertEqual(fast.stages, detail.stages)
        self.assertEqual(fast.channel_active_ps, detail.channel_active_ps)
        self.assertEqual(fast.asic_busy_ps, detail.asic_busy_ps)

    def test_detail_trace_legal(self):
        trace = self.traces[True]
        self.assertEqual(check_trace(trace.events, self.cfg, trace.final_clock), [])

    def test_refreshes(self):
        trace = self.traces[False]
        expected = trace.final_clock // (self.cfg.timing.tREFI * 1000)
        self.assertGreater(expected, 0, msg='the run should span at least one refresh interval')
        self.assertEqual(trace.channel_refs, [expected] * self.cfg.geometry.channels)

    def test_refresh_per_channel(self):
        trace = self.traces[True]
        tREFI = self.cfg.timing.tREFI * 1000
        refs = {}
        for ev in trace.events:
            if ev.command == 'REF':
                refs.setdefault(ev.node.split('/')[0], []).append(ev.clock_ps)
        self.assertEqual(sorted(refs), ['ch%d' % ch for ch in range(self.cfg.geometry.channels)])
        for node, clocks in refs.items():
            self.assertEqual(len(clocks), trace.final_clock // tREFI, msg=node)
            for k, clock in enumerate(sorted(clocks), 1):
                self.assertGreaterEqual(clock, k * tREFI, msg='%s refresh %d' % (node, k))
                self.assertLess(clock, (k + 1) * tREFI, msg='%s refresh %d' % (node, k))

    def test_breakdown(self):
        trace = self.traces[False]
        self.assertEqual(sum(trace.breakdown.values()), trace.final_clock)
        self.assertEqual(sum(trace.token_latency_ps), trace.final_clock)

    def test_token_done(self):
        self.assertEqual([i for i, _ in self.done], list(range(8)))
        self.assertEqual(self.done[-1][1], self.traces[True].final_clock)

    def test_simulate(self):
        trace = simulate(self.streams[0], self.mmap, self.cfg)
        self.assertEqual(trace.final_clock, self.traces[False].token_latency_ps[0])


if __name__ == '__main__':
    unittest.main()
