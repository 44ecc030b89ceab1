import os.path
import tempfile
import unittest

from pimgpt.config import SystemConfig
from pimgpt.trace import *


def ev(clock, node, command, duration=0, nbytes=0, row_hit=0):
    return TraceEvent(clock, node, command, duration, nbytes, row_hit)


LEGAL = [ev(0, 'ch0/b0/r1', 'ACT', 12000), ev(12000, 'ch0/b0/r1', 'RD', 1000, 32),
         ev(13000, 'ch0/b0/r1', 'RD', 1000, 32, 1), ev(32000, 'ch0/b0/r1', 'PRE', 12000),
         ev(44000, 'ch0/b0/r2', 'ACT', 12000), ev(56000, 'ch0/b0/r2', 'WR', 1000, 32),
         ev(80000, 'ch0/b0/r2', 'PRE', 12000), ev(6825000, 'ch0', 'REF', 455000),
         ev(7280000, 'ch0/b1/r0', 'ACT', 12000), ev(100, 'bus', 'broadcast', 2000, 64)]


class CheckTraceTest(unittest.TestCase):

    def setUp(self):
        self.cfg = SystemConfig()

    def check(self, events, final_clock=None):
        return check_trace(events, self.cfg, final_clock)

    def assertFlags(self, constraint, events):
        problems = self.check(events)
        self.assertEqual(len(problems), 1, msg=problems)
        self.assertTrue(problems[0].startswith(constraint), msg=problems[0])

    def test_legal(self):
        self.assertEqual(self.check(LEGAL, 7300000), [])

    def test_trcd(self):
        self.assertFlags('tRCD', [ev(0, 'ch0/b0/r1', 'ACT'), ev(5000, 'ch0/b0/r1', 'RD')])

    def test_tccd(self):
        self.assertFlags('tCCD', [ev(0, 'ch0/b0/r1', 'ACT'), ev(12000, 'ch0/b0/r1', 'RD'),
                                  ev(12500, 'ch0/b0/r1', 'RD')])

    def test_tras(self):
        self.assertFlags('tRAS', [ev(0, 'ch0/b0/r1', 'ACT'), ev(20000, 'ch0/b0/r1', 'PRE')])

    def test_twr(self):
        self.assertFlags('tWR', [ev(0, 'ch0/b0/r1', 'ACT'), ev(30000, 'ch0/b0/r1', 'WR'),
                                 ev(33000, 'ch0/b0/r1', 'PRE')])

    def test_trp(self):
        self.assertFlags('tRP', [ev(0, 'ch0/b0/r1', 'ACT'), ev(32000, 'ch0/b0/r1', 'PRE'),
                                 ev(40000, 'ch0/b0/r2', 'ACT')])

    def test_wrong_row(self):
        self.assertFlags('row-state', [ev(0, 'ch0/b0/r1', 'ACT'), ev(12000, 'ch0/b0/r2', 'RD')])

    def test_double_act(self):
        self.assertFlags('row-state', [ev(0, 'ch0/b0/r1', 'ACT'), ev(50000, 'ch0/b0/r2', 'ACT')])

    def test_early_refresh(self):
        self.assertFlags('tREFI', [ev(1000, 'ch1', 'REF')])

    def test_late_refresh(self):
        self.assertFlags('tREFI', [ev(6825000 + 400000, 'ch1', 'REF')])
        self.assertIn('after 7013000 ps', self.check([ev(7300000, 'ch1', 'REF')])[0])

    def test_refresh_slack(self):
        self.assertEqual(self.check([ev(6825000 + 188000, 'ch1', 'REF')]), [])
        self.assertEqual(check_trace([ev(6900000, 'ch1', 'REF')], self.cfg, refresh_slack=0)[0][:5], 'tREFI')

    def test_refresh_open_row(self):
        self.assertFlags('row-state', [ev(0, 'ch0/b3/r9', 'ACT'), ev(6825000, 'ch0', 'REF')])

    def test_during_refresh(self):
        self.assertFlags('tRFC', [ev(6825000, 'ch0', 'REF'), ev(7000000, 'ch0/b0/r1', 'ACT')])

    def test_other_channel(self):
        self.assertEqual(self.check([ev(6825000, 'ch0', 'REF'), ev(7000000, 'ch1/b0/r1', 'ACT')]), [])

    def test_missing_refresh(self):
        problems = self.check([ev(0, 'ch0/b0/r1', 'ACT')], final_clock=7000000)
        self.assertEqual(len(problems), 1)
        self.assertIn('expected 1', problems[0])

    def test_unordered(self):
        self.assertEqual(self.check(list(reversed(LEGAL)), 7300000), [])


class SimTraceTest(unittest.TestCase):

    def setUp(self):
        self.trace = SimTrace(2, detail=True)
        for e in LEGAL:
            self.trace.record(*e)

    def test_container(self):
        self.assertEqual(len(self.trace), len(LEGAL))
        self.assertEqual(list(self.trace)[1].command, 'RD')

    def test_sort(self):
        self.trace.sort_events()
        clocks = [e.clock_ps for e in self.trace]
        self.assertEqual(clocks, sorted(clocks))

    def test_row_hit_rate(self):
        self.assertEqual(self.trace.row_hit_rate, 0.0, msg='counters are filled by the engine, not by record()')
        self.trace.counts.update(RD=3, WR=1, row_hits=1)
        self.assertEqual(self.trace.row_hit_rate, 0.25)

    def test_csv(self):
        with tempfile.TemporaryDirectory() as d:
            fname = os.path.join(d, 'trace.csv')
            self.trace.write(fname)
            with open(fname) as f:
                self.assertEqual(f.readline().strip(), ','.join(CSV_HEADER))
            self.assertEqual(read_csv(fname), LEGAL)

    def test_not_a_trace(self):
        with tempfile.TemporaryDirectory() as d:
            fname = os.path.join(d, 'other.csv')
            with open(fname, 'w') as f:
                f.write('a,b,c\n1,2,3\n')
            self.assertRaises(ValueError, read_csv, fname)

    def test_summary(self):
        summary = self.trace.summary()
        self.assertEqual(set(summary['breakdown_ps']), set(CATEGORIES))
        self.assertEqual(summary['refreshes'], 0)


if __name__ == '__main__':
    unittest.main()
