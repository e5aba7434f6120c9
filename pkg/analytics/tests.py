"""
Tests des traces, agrégats, rapports et similarité des deltas
"""

import math
import tempfile
from io import StringIO
from pathlib import Path

from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase

from ai_engine.dmpq import LayerPredictor, write_predictors
from ai_engine.pipeline import execute_run, run_reference
from ai_engine.toy_model import LAYER_IDS, Schedule, ToyDiT, ToyModelSpec
from core.config import EngineConfig
from core.exceptions import EmptyTraceError, TraceFormatError

from .reports import find_record, render_summary, summarize, summary_values
from .similarity import SIMILARITY_HEADER, delta_similarity, smoothness_statistic
from .trace import TRACE_HEADER, TraceRecord, format_trace, parse_trace, read_trace, write_trace


def layer_row(t, block_id, layer_id, fmt, bits, elems=100, macs=None):
    return TraceRecord(timestep=t, block_id=block_id, layer_id=layer_id, format=fmt,
                       reason='threshold', elems=elems, bits=bits, macs=macs)


def block_row(t, block_id, decision='compute', **extra):
    return TraceRecord(timestep=t, block_id=block_id, decision=decision, reason='budget', **extra)


class TempDirMixin:
    def setUp(self):
        super().setUp()
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()
        super().tearDown()


# =============================================================================
# TRACE
# =============================================================================

class TraceFormatTest(TempDirMixin, SimpleTestCase):

    def test_round_trip(self):
        records = [
            block_row(2, 1, 'skip', e_acc=0.001, e_tp=0.0005, gap=1, elems=600, bits=0, macs=4200),
            layer_row(3, 1, 'fc2', 'nvfp4', 4, elems=512, macs=2048),
            TraceRecord(timestep=0, block_id=0, layer_id='q', format='int8', reason='no_history'),
        ]
        write_trace(self.tmp / 'trace.tsv', records)
        self.assertEqual(read_trace(self.tmp / 'trace.tsv'), records)

    def test_missing_fields_are_dashes(self):
        text = format_trace([block_row(0, 0)])
        row = text.splitlines()[1].split('\t')
        self.assertEqual(row[:4], ['0', '0', '-', 'compute'])
        self.assertEqual(text.splitlines()[0], TRACE_HEADER)

    def test_parse_errors_name_the_line(self):
        good = format_trace([block_row(0, 0)]).splitlines()[1]
        with self.assertRaisesMessage(TraceFormatError, 'line 3'):
            parse_trace('\n'.join([TRACE_HEADER, good, 'too\tfew']))
        bad_decision = good.replace('compute', 'maybe')
        with self.assertRaisesMessage(TraceFormatError, 'line 2'):
            parse_trace('\n'.join([TRACE_HEADER, bad_decision]))
        with self.assertRaisesMessage(TraceFormatError, 'line 1'):
            parse_trace('wrong header\n' + good)
        with self.assertRaises(TraceFormatError):
            parse_trace('\n'.join([TRACE_HEADER, '-' + good[1:]]))

    def test_empty(self):
        for text in ('', '\n\n', TRACE_HEADER + '\n'):
            with self.assertRaisesMessage(EmptyTraceError, 'no records'):
                parse_trace(text)

    def test_unreadable_file(self):
        with self.assertRaises(TraceFormatError):
            read_trace(self.tmp / 'absent.tsv')


# =============================================================================
# AGRÉGATS
# =============================================================================

class SummaryTest(SimpleTestCase):

    def test_half_nvfp4_half_int8(self):
        records = [layer_row(0, 0, 'q', 'nvfp4', 4), layer_row(0, 0, 'k', 'int8', 8)]
        summary = summarize(records)
        self.assertEqual(summary.avg_bits, 6.0)
        self.assertEqual(summary.format_counts, {'int8': 1, 'nvfp4': 1})

    def test_skips_count_as_zero_bits(self):
        records = []
        for t in (0, 1):
            records.append(block_row(t, 0))
            records += [layer_row(t, 0, layer_id, 'int8', 8, elems=50) for layer_id in ('q', 'k')]
        records += [block_row(t, 0, 'skip', elems=100, bits=0) for t in (2, 3)]
        summary = summarize(records)
        self.assertEqual(summary.avg_bits, 4.0)
        self.assertEqual(summary.skip_fraction, 0.5)
        self.assertEqual(summary.max_skip_run, {0: 2})

    def test_cost_ratio(self):
        records = [
            block_row(0, 0),
            layer_row(0, 0, 'q', 'int8', 8, macs=100),
            block_row(1, 0, 'skip', elems=100, bits=0, macs=100),
        ]
        self.assertEqual(summarize(records).cost_ratio, 4.0)
        fp16 = [layer_row(0, 0, 'q', 'fp16_passthrough', 16, macs=64)]
        self.assertEqual(summarize(fp16).cost_ratio, 1.0)

    def test_skip_runs_per_block(self):
        decisions = ['compute', 'compute', 'skip', 'skip', 'compute', 'skip']
        records = [block_row(t, b, d) for t, d in enumerate(decisions) for b in (0, 1)]
        records[-1] = block_row(5, 1, 'compute')
        summary = summarize(records)
        self.assertEqual(summary.max_skip_run, {0: 2, 1: 2})
        self.assertEqual(summary.skipped_steps, 5)

    def test_empty(self):
        with self.assertRaises(EmptyTraceError):
            summarize([])

    def test_find_record(self):
        records = [block_row(0, 0), layer_row(0, 0, 'v', 'int8', 8)]
        self.assertEqual(find_record(records, 0, 0, 'v').format, 'int8')
        self.assertIs(find_record(records, 0, 0), records[0])
        self.assertIsNone(find_record(records, 1, 0))


# =============================================================================
# COMMANDE REPORT
# =============================================================================

class ReportCommandTest(TempDirMixin, SimpleTestCase):

    def call(self, *args, **options):
        out = StringIO()
        call_command('report', *args, stdout=out, stderr=StringIO(), **options)
        return out.getvalue()

    def test_empty_trace(self):
        path = self.tmp / 'trace.tsv'
        path.write_text(TRACE_HEADER + '\n', encoding='utf-8')
        with self.assertRaises(CommandError) as ctx:
            self.call(str(path))
        self.assertEqual(ctx.exception.returncode, 5)
        self.assertIn('no records', str(ctx.exception))

    def test_malformed_trace(self):
        path = self.tmp / 'trace.tsv'
        path.write_text(TRACE_HEADER + '\n1\t2\n', encoding='utf-8')
        with self.assertRaises(CommandError) as ctx:
            self.call(str(path))
        self.assertEqual(ctx.exception.returncode, 6)

    def test_summary_recomputed_from_trace(self):
        config = EngineConfig().with_overrides(n_blocks=2, seq_len=32, text_len=4, n_timesteps=10)
        predictors = [LayerPredictor(b, layer_id, 0.1, 0.001, 0.015)
                      for b in range(2) for layer_id in LAYER_IDS]
        write_predictors(self.tmp / 'predictors.txt', predictors)
        report = execute_run(config, predictors, out_dir=self.tmp / 'run')

        output = self.call(str(self.tmp / 'run' / 'trace.tsv'), out=str(self.tmp / 'summary.txt'))
        self.assertEqual(output.splitlines(), render_summary(report.summary))
        self.assertEqual((self.tmp / 'summary.txt').read_text(encoding='utf-8'), output)

        from_report = summary_values((self.tmp / 'run' / 'report.txt').read_text(encoding='utf-8'))
        for key, value in summary_values(output).items():
            self.assertEqual(from_report[key], value)


# =============================================================================
# SIMILARITÉ
# =============================================================================

class SimilarityTest(TempDirMixin, SimpleTestCase):

    def reference(self, **overrides):
        config = EngineConfig().with_overrides(**overrides)
        model = ToyDiT(ToyModelSpec.from_config(config))
        return run_reference(model, Schedule.from_config(config), config.seed)

    def test_rows_per_step_and_block(self):
        reference = self.reference(n_blocks=2, seq_len=32, text_len=4, n_timesteps=6)
        rows = delta_similarity(reference)
        self.assertEqual(len(rows), 5 * 2)
        self.assertEqual((rows[0].timestep, rows[0].block_id), (1, 0))
        self.assertTrue(all(-1.0 <= r.cosine_sim <= 1.0 + 1e-12 for r in rows))

    def test_constant_trajectory(self):
        reference = self.reference(n_blocks=2, seq_len=32, text_len=4, n_timesteps=6,
                                   eta=0.0, t_embed_scale=0.0)
        rows = delta_similarity(reference)
        self.assertTrue(all(r.rel_l2_diff == 0.0 for r in rows))
        self.assertAlmostEqual(smoothness_statistic(reference), 0.0, places=12)

    def test_default_trajectory_is_smooth(self):
        statistic = smoothness_statistic(self.reference())
        self.assertFalse(math.isnan(statistic))
        self.assertLess(statistic, 0.1)

    def test_command(self):
        path = self.tmp / 'engine.cfg'
        path.write_text('n_blocks = 2\nseq_len = 32\ntext_len = 4\nn_timesteps = 5\n', encoding='utf-8')
        out = StringIO()
        call_command('similarity', config=str(path), stdout=out, stderr=StringIO())
        lines = out.getvalue().splitlines()
        self.assertEqual(lines[0], SIMILARITY_HEADER)
        self.assertEqual(len(lines), 1 + 4 * 2 + 1)
        self.assertTrue(lines[-1].startswith('smoothness = '))

        out = StringIO()
        call_command('similarity', config=str(path), out=str(self.tmp / 'sim.tsv'),
                     stdout=out, stderr=StringIO())
        self.assertEqual(len(out.getvalue().splitlines()), 1)
        tsv = (self.tmp / 'sim.tsv').read_text(encoding='utf-8').splitlines()
        self.assertEqual(tsv, lines[:-1])
