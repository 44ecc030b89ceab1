import json
import os.path
import tempfile
import unittest

from pimgpt.config import SystemConfig
from pimgpt.models import GptModelConfig
from pimgpt.mapper import build_memory_map
from pimgpt.compiler import compile_token
from pimgpt.report import *


TOY = GptModelConfig.build('toy', 2, 64, 4, 256, 16)


def toy_config():
    return SystemConfig().override({'geometry.channels': 2, 'geometry.banks_per_channel': 4,
                                    'geometry.row_bytes': 128, 'geometry.capacity_per_channel': 67108864,
                                    'pim.gb_bytes': 64})


class BaselineBytesTest(unittest.TestCase):

    def test_one_token(self):
        # weights 2 x (2 x (4 x 64^2 + 2 x 64 x 256) + 256 x 64), one key and one value per layer
        self.assertEqual(baseline_bytes(TOY, 1), 229376 + 512)

    def test_growth(self):
        self.assertEqual(baseline_bytes(TOY, 2), 2 * 229376 + 3 * 512)
        self.assertEqual(baseline_bytes(TOY, 0), 0)


class RunTest(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.cfg = toy_config()
        cls.seen = []
        cls.report = run(TOY, 3, cfg=cls.cfg, on_token=lambda i, clock: cls.seen.append(i))
        cls.detailed = run(TOY, 3, cfg=cls.cfg, detail=True)

    def test_latency(self):
        self.assertGreater(self.report.total_latency, 0)
        self.assertEqual(len(self.report.token_latency), 3)
        self.assertAlmostEqual(sum(self.report.breakdown.values()), self.report.total_latency, delta=1e-15)

    def test_on_token(self):
        self.assertEqual(self.seen, [0, 1, 2])

    def test_detail_matches_fast(self):
        self.assertEqual(self.detailed.violations, [])
        self.assertEqual(self.detailed.as_dict(), self.report.as_dict())
        self.assertGreater(len(self.detailed.trace), 0)
        self.assertEqual(len(self.report.trace), 0, msg='fast runs record no events')

    def test_bytes_moved(self):
        mmap = build_memory_map(TOY, self.cfg, TOY.max_tokens)
        bus = [instr for step in range(1, 4) for instr in compile_token(TOY, mmap, self.cfg, step)
               if instr.target == 'bus']
        self.assertEqual(self.report.data_movement_bytes, sum(instr.nbytes * instr.copies for instr in bus),
                         msg='a broadcast counts once per receiving channel')
        self.assertGreater(self.report.data_movement_bytes, sum(instr.nbytes for instr in bus))

    def test_row_hit_rate(self):
        self.assertTrue(0.0 < self.report.row_hit_rate < 1.0)

    def test_data_movement(self):
        self.assertEqual(self.report.baseline_bytes, baseline_bytes(TOY, 3))
        self.assertGreater(self.report.data_movement_reduction, 1.0)

    def test_energy(self):
        energy = self.report.energy
        self.assertGreater(energy.dram_read, 0)
        self.assertGreater(energy.pim_mac, 0)
        self.assertGreater(energy.asic, 0)
        self.assertAlmostEqual(energy.total, energy.dram + energy.asic + energy.transfer, delta=1e-15)

    def test_write_json(self):
        with tempfile.TemporaryDirectory() as d:
            fname = os.path.join(d, 'run.json')
            self.report.write(fname)
            with open(fname) as f:
                data = json.load(f)
        self.assertEqual(data['model'], 'toy')
        self.assertEqual(data['token_count'], 3)
        self.assertEqual(data['config']['geometry']['channels'], 2)

    def test_write_csv(self):
        lines = self.report._serialize()
        self.assertEqual(lines[0], 'metric,value')
        self.assertIn('model,toy', lines)
        self.assertIn('token_count,3', lines)

    def test_summary(self):
        lines = self.report.summary_lines()
        self.assertTrue(lines[0].startswith('toy, 3 tokens'))
        self.assertEqual(len(lines), 1 + 5 + 3)


class RunEdgeTest(unittest.TestCase):

    def setUp(self):
        self.cfg = toy_config()

    def test_no_tokens(self):
        report = run(TOY, 0, cfg=self.cfg)
        self.assertEqual(report.total_latency, 0)
        self.assertIsNone(report.data_movement_reduction)
        self.assertEqual(report.energy.total, 0.0)
        self.assertIn('n/a', report.summary_lines()[-2])

    def test_negative(self):
        self.assertRaises(ValueError, run, TOY, -1, cfg=self.cfg)

    def test_past_context(self):
        report = run(TOY, 17, cfg=self.cfg)
        self.assertEqual(report.model.max_tokens, 17)
        self.assertEqual(len(report.token_latency), 17)

    def test_overrides(self):
        slow = run(TOY, 1, overrides={'asic.clock': 1e8}, cfg=self.cfg)
        fast = run(TOY, 1, cfg=self.cfg)
        self.assertGreater(slow.breakdown['asic-arith'], fast.breakdown['asic-arith'])
        self.assertGreater(slow.total_latency, fast.total_latency)
        self.assertEqual(slow.cfg.asic.clock, 1e8)


class SweepTest(unittest.TestCase):

    def setUp(self):
        self.cfg = toy_config()

    def test_asic_freq(self):
        progress = []
        sw = Sweep('asic_freq', [1e9, 1e8], TOY, tokens=1, cfg=self.cfg)
        sw.progress += lambda i, n, v: progress.append((i, n, v))
        sw.run()
        self.assertEqual(len(sw), 2)
        self.assertEqual(sw[0]['normalized_latency'], 1.0)
        self.assertGreater(sw[1]['normalized_latency'], 1.0)
        self.assertEqual(progress, [(0, 2, 1e9), (1, 2, 1e8)])

    def test_tokens(self):
        sw = sweep('tokens', [1, 2], TOY, cfg=self.cfg)
        self.assertGreater(sw[1]['latency_s'], sw[0]['latency_s'])
        self.assertEqual([row['error'] for row in sw], ['', ''])

    def test_more_channels(self):
        sw = sweep('channels', [2, 4], TOY, tokens=1, cfg=self.cfg)
        self.assertLessEqual(sw[1]['latency_s'], sw[0]['latency_s'], msg='MAC work spreads over more banks')
        self.assertLessEqual(sw[1]['normalized_latency'], 1.0)

    def test_wider_mac(self):
        sw = sweep('mac_width', [16, 32], TOY, tokens=1, cfg=self.cfg)
        self.assertEqual([row['error'] for row in sw], ['', ''])
        self.assertLessEqual(sw[1]['latency_s'], sw[0]['latency_s'], msg='each access feeds more multipliers')
        self.assertLessEqual(sw[1]['normalized_latency'], 1.0)

    def test_slower_pins(self):
        rate = self.cfg.geometry.pin_rate
        sw = sweep('pin_rate', [rate, rate / 2], TOY, tokens=1, cfg=self.cfg)
        self.assertGreater(sw[1]['normalized_latency'], 1.0, msg='every transfer takes twice as long')
        self.assertEqual(sw[0]['normalized_latency'], 1.0)

    def test_error_row(self):
        sw = sweep('mac_width', [16, 24], TOY, tokens=1, cfg=self.cfg)
        self.assertEqual(sw[0]['error'], '')
        self.assertTrue(sw[1]['error'].startswith('ConstraintException'))
        self.assertIsNone(sw[1]['latency_s'])
        self.assertIsNone(sw[1]['normalized_latency'])
        lines = sw._serialize()
        self.assertEqual(lines[0].split(','), list(SWEEP_COLUMNS))
        self.assertEqual(len(lines), 3)

    def test_write_json(self):
        sw = sweep('channels', [2, 4], TOY, tokens=1, cfg=self.cfg)
        with tempfile.TemporaryDirectory() as d:
            fname = os.path.join(d, 'sweep.json')
            sw.write(fname, 'json')
            with open(fname) as f:
                data = json.load(f)
        self.assertEqual(data['dimension'], 'channels')
        self.assertEqual([row['value'] for row in data['rows']], [2, 4])

    def test_bad_dimension(self):
        self.assertRaises(ValueError, Sweep, 'voltage', [1.0], TOY)

    def test_no_values(self):
        self.assertRaises(ValueError, Sweep, 'channels', [], TOY)


if __name__ == '__main__':
    unittest.main()
