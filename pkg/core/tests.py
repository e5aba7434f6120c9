"""
Tests du noyau : format QDT1, métriques, codecs, Hadamard, configuration
"""

import math
import struct
import subprocess
import sys
import tempfile
from io import StringIO
from pathlib import Path

import numpy as np
from django.core.management import call_command
from django.core.management.base import CommandError
from django.conf import settings
from django.test import SimpleTestCase
from numpy.testing import assert_allclose, assert_array_equal

from .commands import EXIT_CONFIG, EXIT_MALFORMED_INPUT, EngineCommand, exit_code_for
from .config import EngineConfig, load_config, parse_config_text
from .exceptions import (
    ConfigError,
    HadamardError,
    NonFiniteError,
    QuantizationError,
    TensorFormatError,
    ZeroNormError,
)
from .hadamard import (
    HadamardConfig,
    fht_blocks,
    fht_inverse,
    hadamard_matrix,
    pad_last,
    rotate_weight,
    unpad_last,
)
from .metrics import MetricKind, cosine_dissim, distance, rel_l1, rel_l2
from .quant_formats import (
    FP4_VALUES,
    QuantFormat,
    decode_quantized,
    dequantize,
    e4m3_from_bits,
    e4m3_to_bits,
    encode_quantized,
    fp4_codes,
    oracle_nearest_fp4,
    quantize,
    quantize_int8_asym,
    quantize_int8_sym,
    quantize_nvfp4,
    read_quantized,
    round_to_e4m3,
)
from .tensors import (
    DTYPE_BF16,
    DTYPE_F32,
    HEADER,
    MAGIC,
    MAX_ELEMENTS,
    decode_tensor,
    encode_tensor,
    pack_header,
    read_tensor,
    write_tensor,
)
from .utils import parse_int_list


class TempDirMixin:
    def setUp(self):
        super().setUp()
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()
        super().tearDown()


# =============================================================================
# FORMAT QDT1
# =============================================================================

class TensorFileTest(TempDirMixin, SimpleTestCase):

    def test_round_trip_keeps_dims_and_values(self):
        tensor = np.array([[1.5, -2.0], [0.25, 3.0]], dtype=np.float32)
        write_tensor(self.tmp / 'x.qdt', tensor)
        restored = read_tensor(self.tmp / 'x.qdt')
        self.assertEqual(restored.shape, (2, 2))
        self.assertEqual(restored.dtype, np.float32)
        assert_array_equal(restored, tensor)

    def test_f64_is_kept(self):
        tensor = np.linspace(0, 1, 7)
        restored = decode_tensor(encode_tensor(tensor))
        self.assertEqual(restored.dtype, np.float64)
        assert_array_equal(restored, tensor)

    def test_bad_magic(self):
        data = bytearray(encode_tensor(np.ones(4, dtype=np.float32)))
        data[:4] = b'QDT2'
        with self.assertRaisesMessage(TensorFormatError, 'bad magic'):
            decode_tensor(bytes(data))

    def test_nan_payload_rejected(self):
        with self.assertRaises(NonFiniteError):
            encode_tensor(np.array([1.0, np.nan], dtype=np.float32))
        header = HEADER.pack(MAGIC, 0, 1) + struct.pack('<Q', 2)
        payload = np.array([1.0, np.nan], dtype='<f4').tobytes()
        with self.assertRaises(NonFiniteError):
            decode_tensor(header + payload)

    def test_truncated_and_trailing_payload(self):
        data = encode_tensor(np.ones((3, 2), dtype=np.float32))
        with self.assertRaisesMessage(TensorFormatError, 'truncated'):
            decode_tensor(data[:-1])
        with self.assertRaisesMessage(TensorFormatError, 'trailing'):
            decode_tensor(data + b'\x00')

    def test_zero_extent_rejected(self):
        header = HEADER.pack(MAGIC, 0, 2) + struct.pack('<2Q', 3, 0)
        with self.assertRaises(TensorFormatError):
            decode_tensor(header)

    def test_writer_rejects_extent_overflow(self):
        with self.assertRaisesMessage(TensorFormatError, 'extent overflow'):
            pack_header(DTYPE_F32, (1 << 20, 1 << 20, 2))
        self.assertEqual(len(pack_header(DTYPE_F32, (MAX_ELEMENTS,))), HEADER.size + 8)

    def test_reserved_bytes_must_be_zero(self):
        data = bytearray(encode_tensor(np.ones(2, dtype=np.float32)))
        data[7] = 1
        with self.assertRaises(TensorFormatError):
            decode_tensor(bytes(data))

    def test_bf16_widened_to_f32(self):
        tensor = np.array([1.0, -2.5, 1.00390625], dtype=np.float32)
        restored = decode_tensor(encode_tensor(tensor, DTYPE_BF16))
        self.assertEqual(restored.dtype, np.float32)
        # 1 + 2^-8 est un milieu exact entre deux bf16 : arrondi vers le pair (1.0)
        assert_array_equal(restored, [1.0, -2.5, 1.0])


# =============================================================================
# MÉTRIQUES
# =============================================================================

class MetricsTest(SimpleTestCase):

    def test_rel_l1(self):
        self.assertEqual(rel_l1(np.ones(8), np.full(8, 2.0)), 1.0)
        self.assertEqual(rel_l1([1.0, -1.0], [1.5, -0.5]), 0.5)
        x = np.random.default_rng(0).standard_normal(10)
        self.assertEqual(rel_l1(x, x), 0.0)

    def test_rel_l2(self):
        self.assertEqual(rel_l2([3.0, 4.0], [0.0, 0.0]), 1.0)
        self.assertAlmostEqual(rel_l2([1.0, 0.0], [0.0, 1.0]), math.sqrt(2), places=15)
        x = np.random.default_rng(1).standard_normal(10)
        self.assertEqual(rel_l2(x, x), 0.0)

    def test_cosine_dissim(self):
        self.assertEqual(cosine_dissim([3.0, 4.0], [3.0, 4.0]), 0.0)
        self.assertEqual(cosine_dissim([1.0, 0.0], [0.0, 3.0]), 1.0)
        self.assertEqual(cosine_dissim([1.0, 0.0], [-1.0, 0.0]), 2.0)

    def test_zero_norm_raises(self):
        with self.assertRaises(ZeroNormError):
            rel_l2(np.zeros(3), np.ones(3))
        with self.assertRaises(ZeroNormError):
            cosine_dissim(np.ones(3), np.zeros(3))

    def test_scale_covariance(self):
        rng = np.random.default_rng(2)
        a, b = rng.standard_normal(64), rng.standard_normal(64)
        for c in (0.25, 8.0, 3.7, -1e-3, 1e5):
            self.assertAlmostEqual(rel_l1(c * a, c * b), rel_l1(a, b), delta=1e-12)
            self.assertAlmostEqual(rel_l2(c * a, c * b), rel_l2(a, b), delta=1e-12)
            self.assertAlmostEqual(cosine_dissim(c * a, c * b), cosine_dissim(a, b), delta=1e-12)

    def test_cosine_of_positive_multiple_is_zero(self):
        a = np.random.default_rng(3).standard_normal(128)
        for c in (1e-6, 0.5, 1.0, 3.0, 1e6):
            self.assertAlmostEqual(cosine_dissim(a, c * a), 0.0, delta=1e-12)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(4)
        a, b = rng.standard_normal(200), rng.standard_normal(200)
        order = rng.permutation(200)
        for metric in (rel_l1, rel_l2, cosine_dissim):
            self.assertAlmostEqual(metric(a[order], b[order]), metric(a, b), delta=1e-12)
        matrix_a, matrix_b = a.reshape(10, 20), b.reshape(10, 20)
        self.assertAlmostEqual(rel_l2(matrix_a.T, matrix_b.T), rel_l2(a, b), delta=1e-12)

    def test_distance_uses_first_argument_as_reference(self):
        d2 = np.array([1.0, -2.0, 0.5])
        self.assertEqual(distance(MetricKind.REL_L2, 2 * d2, d2), 0.5)
        self.assertEqual(distance('rel_l1', 2 * d2, d2), 0.5)


# =============================================================================
# CODECS
# =============================================================================

class Int8CodecTest(SimpleTestCase):

    def test_sym_example(self):
        q = quantize_int8_sym(np.array([-1.27, 0.635, 1.27]))
        self.assertAlmostEqual(float(q.scale[0]), 0.01, places=17)
        assert_array_equal(q.codes, [-127, 64, 127])

    def test_sym_zero_tensor(self):
        q = quantize_int8_sym(np.zeros(5))
        self.assertEqual(float(q.scale[0]), 1.0)
        assert_array_equal(q.codes, 0)
        assert_array_equal(dequantize(q), 0.0)

    def test_sym_singleton_extremum(self):
        x = np.array([0.731], dtype=np.float32)
        q = quantize_int8_sym(x)
        self.assertEqual(int(q.codes[0]), 127)
        assert_array_equal(dequantize(q), x)

    def test_asym_integer_span_is_lossless(self):
        x = np.arange(256, dtype=np.float64)
        q = quantize_int8_asym(x)
        self.assertEqual(float(q.scale[0]), 1.0)
        self.assertEqual(int(q.zero_point[0]), 0)
        assert_array_equal(q.codes, x)
        assert_array_equal(dequantize(q), x)

    def test_asym_constant(self):
        q = quantize_int8_asym(np.full(4, 7.0))
        self.assertEqual(float(q.scale[0]), 1.0)
        self.assertEqual(int(q.zero_point[0]), -7)
        assert_array_equal(dequantize(q), 7.0)

    def test_asym_midpoint_example(self):
        q = quantize_int8_asym(np.array([-1.0, 0.0, 1.0]))
        self.assertAlmostEqual(float(q.scale[0]), 2 / 255, places=17)
        self.assertEqual(int(q.zero_point[0]), 128)
        self.assertEqual(int(q.codes[0]), 0)
        self.assertEqual(int(q.codes[2]), 255)
        # le code égal au point zéro se déquantifie en 0
        self.assertEqual(float(dequantize(q)[1]), 0.0)

    def test_dequantize_sym_formula(self):
        q = quantize_int8_sym(np.array([1.27]))
        self.assertEqual(int(q.codes[0]), 127)
        self.assertAlmostEqual(float(dequantize(q)[0]), 1.27, places=15)

    def _check_bound(self, codec, x):
        q = codec(x, block_size=x.shape[-1])
        error = np.abs(dequantize(q) - x)
        amax = np.abs(x).max(axis=1)
        bound = q.scale / 2 + 4 * np.spacing(amax)
        self.assertTrue(np.all(error.max(axis=1) <= bound))

    def test_round_trip_bounds_on_many_tensors(self):
        # 10^5 groupes indépendants de 16 éléments, chacun avec sa propre échelle
        rng = np.random.default_rng(7)
        x = rng.standard_normal((100_000, 16)) * rng.lognormal(0, 2, size=(100_000, 1))
        self._check_bound(quantize_int8_sym, x)
        self._check_bound(quantize_int8_asym, x)

    def test_codes_stay_in_range(self):
        x = np.random.default_rng(3).standard_cauchy(4096)
        self.assertTrue(np.all((quantize_int8_sym(x).codes >= -128) & (quantize_int8_sym(x).codes <= 127)))
        asym = quantize_int8_asym(x).codes.astype(int)
        self.assertTrue(np.all((asym >= 0) & (asym <= 255)))

    def test_block_size_must_divide_last_dim(self):
        with self.assertRaises(QuantizationError):
            quantize_int8_sym(np.ones(10), block_size=4)


class Nvfp4CodecTest(SimpleTestCase):

    def test_oracle_examples(self):
        self.assertEqual(FP4_VALUES[oracle_nearest_fp4(5.1)], 6.0)
        self.assertEqual(FP4_VALUES[oracle_nearest_fp4(-0.24)], 0.0)
        self.assertEqual(int(oracle_nearest_fp4(-0.24)), 0)
        self.assertEqual(FP4_VALUES[oracle_nearest_fp4(7000.0)], 6.0)
        self.assertEqual(FP4_VALUES[oracle_nearest_fp4(2.5)], 2.0)

    def test_fast_path_matches_oracle(self):
        rng = np.random.default_rng(2024)
        chunk = 100_000
        samplers = [
            lambda n: rng.uniform(-7.0, 7.0, n),
            lambda n: rng.standard_normal(n) * 2.0,
            lambda n: rng.standard_t(2, n),
        ]
        total = 0
        for i in range(10):
            values = samplers[i % 3](chunk)
            assert_array_equal(fp4_codes(values), oracle_nearest_fp4(values))
            total += values.size
        self.assertEqual(total, 1_000_000)

    def test_fast_path_on_midpoints_and_zero(self):
        midpoints = (FP4_VALUES[:8][1:] + FP4_VALUES[:8][:-1]) / 2
        values = np.concatenate([midpoints, -midpoints, [0.0, -0.0, 5.0, -5.0, 1e9]])
        assert_array_equal(fp4_codes(values), oracle_nearest_fp4(values))

    def test_block_of_threes(self):
        q = quantize_nvfp4(np.full(16, 3.0, dtype=np.float32))
        assert_array_equal(FP4_VALUES[q.codes], 6.0)
        assert_array_equal(dequantize(q), 3.0)

    def test_all_zero_block(self):
        q = quantize_nvfp4(np.zeros(32, dtype=np.float32))
        self.assertTrue(np.all(np.isfinite(q.effective_scales)))
        assert_array_equal(q.codes, 0)
        assert_array_equal(dequantize(q), 0.0)

    def test_exact_representables_round_trip(self):
        rng = np.random.default_rng(5)
        codes = rng.integers(0, 16, size=(8, 16))
        scales = 2.0 ** rng.integers(-6, 3, size=(8, 1))
        x = (FP4_VALUES[codes] * scales).astype(np.float32)
        x[:, 0] = 6.0 * scales[:, 0]
        assert_array_equal(dequantize(quantize_nvfp4(x)), x)

    def test_partial_block_is_padded(self):
        x = np.random.default_rng(9).standard_normal(21).astype(np.float32)
        q = quantize_nvfp4(x)
        self.assertEqual(q.padding, 11)
        self.assertEqual(q.block_scales.size, 2)
        self.assertEqual(dequantize(q).shape, (21,))

    def test_saturation_bound(self):
        x = np.random.default_rng(11).standard_t(1, size=(64, 16))
        q = quantize_nvfp4(x)
        deq = dequantize(q).reshape(-1, 16)
        self.assertTrue(np.all(np.abs(deq) <= 6.0 * q.effective_scales[:, None]))

    def test_e4m3_rounding_and_bits(self):
        assert_array_equal(round_to_e4m3([448.0, 1000.0, 1.0625, 1.1875, 2.0 ** -9]),
                           [448.0, 448.0, 1.0, 1.25, 2.0 ** -9])
        values = round_to_e4m3(np.abs(np.random.default_rng(4).lognormal(0, 3, 500)))
        assert_array_equal(e4m3_from_bits(e4m3_to_bits(values)), values)

    def test_serialized_layout(self):
        x = np.random.default_rng(12).standard_normal((3, 10)).astype(np.float32)
        q = quantize_nvfp4(x)
        data = encode_quantized(q)
        self.assertEqual(data[4], 18)
        # en-tête 12 + étendues 16 + méta 16 + 2 échelles + 16 octets de codes
        self.assertEqual(len(data), 12 + 16 + 16 + 2 + 16)
        restored = decode_quantized(data)
        assert_array_equal(dequantize(restored), dequantize(q))
        with self.assertRaises(TensorFormatError):
            decode_quantized(data[:-1])

    def test_fp16_passthrough(self):
        x = np.linspace(1.0, 2.0, 33)
        restored = dequantize(quantize(x, QuantFormat.FP16_PASSTHROUGH))
        assert_array_equal(restored, x.astype(np.float16).astype(np.float64))


# =============================================================================
# HADAMARD
# =============================================================================

class HadamardTest(SimpleTestCase):

    def test_small_examples(self):
        assert_allclose(fht_blocks(np.array([1.0, 1.0]), HadamardConfig(2)), [math.sqrt(2), 0.0], atol=1e-15)
        assert_array_equal(fht_blocks(np.array([1.0, 0.0, 0.0, 0.0]), HadamardConfig(4)), [0.5] * 4)

    def test_involution_f32(self):
        x = np.random.default_rng(0).standard_normal((16, 256)).astype(np.float32)
        twice = fht_blocks(fht_blocks(x))
        self.assertEqual(twice.dtype, np.float32)
        self.assertLessEqual(float(np.abs(twice - x).max()), 1e-6 * max(1.0, float(np.abs(x).max())))

    def test_inverse(self):
        rng = np.random.default_rng(1)
        x64 = rng.standard_normal((4, 128))
        self.assertLessEqual(float(np.abs(fht_inverse(fht_blocks(x64)) - x64).max()), 1e-12)
        raw = HadamardConfig(128, normalize=False)
        assert_allclose(fht_inverse(fht_blocks(x64, raw), raw), x64, atol=1e-12)
        assert_array_equal(fht_blocks(np.zeros((2, 128))), 0.0)

    def test_norm_preservation(self):
        x = np.random.default_rng(2).standard_normal((100, 128))
        before = np.linalg.norm(x, axis=1)
        after = np.linalg.norm(fht_blocks(x), axis=1)
        self.assertTrue(np.all(np.abs(after - before) <= 8 * np.spacing(before)))

    def test_matches_dense_matrix(self):
        rng = np.random.default_rng(3)
        for block in (2, 4, 8, 16):
            # entiers : toutes les sommes sont exactes sans normalisation
            ints = rng.integers(-50, 50, size=(5, 2 * block)).astype(np.float64)
            raw = HadamardConfig(block, normalize=False)
            assert_array_equal(fht_blocks(ints, raw),
                               (ints.reshape(-1, block) @ hadamard_matrix(block, normalize=False)).reshape(ints.shape))

            x = rng.standard_normal((5, 3 * block)).reshape(-1, block)
            dense = x @ hadamard_matrix(block)
            fast = fht_blocks(x, HadamardConfig(block))
            tolerance = max(4, block) * np.spacing(np.abs(x).sum(axis=1, keepdims=True))
            self.assertTrue(np.all(np.abs(fast - dense) <= tolerance))

    def test_rotate_weight_preserves_product(self):
        rng = np.random.default_rng(4)
        weight = rng.standard_normal((128, 24))
        x = rng.standard_normal((7, 128))
        assert_allclose(fht_blocks(x) @ rotate_weight(weight), x @ weight, atol=1e-10)

    def test_pad_and_unpad(self):
        x = np.ones((2, 5))
        padded, length = pad_last(x, 8)
        self.assertEqual(padded.shape, (2, 8))
        assert_array_equal(padded[:, 5:], 0.0)
        assert_array_equal(unpad_last(padded, length), x)

    def test_invalid_sizes(self):
        with self.assertRaises(HadamardError):
            HadamardConfig(12)
        with self.assertRaises(HadamardError):
            fht_blocks(np.ones(100))

    def test_smoothing_reduces_int8_error_on_spikes(self):
        rng = np.random.default_rng(5)
        plain_errors, smoothed_errors = [], []
        for _ in range(100):
            x = rng.standard_normal(128)
            x[rng.integers(128)] = rng.choice([-1.0, 1.0]) * rng.uniform(30.0, 80.0)
            plain = dequantize(quantize_int8_sym(x, block_size=128))
            rotated = fht_blocks(x)
            smoothed = fht_inverse(dequantize(quantize_int8_sym(rotated, block_size=128)))
            plain_errors.append(rel_l2(x, plain))
            smoothed_errors.append(rel_l2(x, smoothed))
        self.assertLess(np.mean(smoothed_errors), np.mean(plain_errors))


# =============================================================================
# CONFIGURATION
# =============================================================================

class ConfigTest(TempDirMixin, SimpleTestCase):

    def test_defaults(self):
        config = EngineConfig()
        self.assertEqual(config.tau_rel, 0.0025)
        self.assertEqual(config.tau_gamma_override, 0.015)
        self.assertEqual(config.tau_cache, 0.003)
        self.assertEqual(config.n_max, 2)
        self.assertEqual(config.tau_outlier, 25.0)
        self.assertEqual(config.hadamard_block, 128)
        self.assertEqual(config.n_timesteps, 50)

    def test_text_round_trip(self):
        config = EngineConfig().with_overrides(tau_gamma_override=None, pdr_enabled=False, calib_seeds=(3, 5))
        self.assertEqual(parse_config_text(config.to_text()), config)
        self.assertIn('tau_gamma_override = none', config.to_text())

    def test_comments_and_seed_ranges(self):
        config = parse_config_text("# expérience\nrho = 0.002  # pénalité\nablation_seeds = 0-2, 7\n")
        self.assertEqual(config.rho, 0.002)
        self.assertEqual(config.ablation_seeds, (0, 1, 2, 7))

    def test_unknown_key_reports_line(self):
        with self.assertRaisesMessage(ConfigError, 'line 2'):
            parse_config_text("rho = 0.001\nbogus = 1\n")

    def test_duplicate_and_invalid_values(self):
        with self.assertRaises(ConfigError):
            parse_config_text("rho = 0.001\nrho = 0.002\n")
        with self.assertRaises(ConfigError):
            parse_config_text("n_max = two\n")
        with self.assertRaises(ConfigError):
            parse_config_text("tdc_metric = euclid\n")
        with self.assertRaises(ConfigError):
            parse_config_text("hadamard_block = 96\n")

    def test_load_missing_file(self):
        with self.assertRaises(ConfigError):
            load_config(self.tmp / 'absent.cfg')
        self.assertEqual(load_config(), EngineConfig())

    def test_parse_int_list(self):
        self.assertEqual(parse_int_list('0-3'), [0, 1, 2, 3])
        self.assertEqual(parse_int_list('4, 1'), [4, 1])

    def test_exit_codes(self):
        self.assertEqual(exit_code_for(ConfigError('x')), EXIT_CONFIG)
        self.assertEqual(exit_code_for(TensorFormatError('x')), EXIT_MALFORMED_INPUT)


# =============================================================================
# BASE DES COMMANDES
# =============================================================================

class _ConfigEchoCommand(EngineCommand):
    def execute_engine(self, config, **options):
        self.stdout.write(f"seed = {config.seed}")
        self.stdout.write(f"n_max = {config.n_max}")
        self.stdout.write(f"path_in_options = {'config' in options}")


class EngineCommandBaseTest(TempDirMixin, SimpleTestCase):

    def echo(self, *args, **options):
        out = StringIO()
        call_command(_ConfigEchoCommand(), *args, stdout=out, stderr=StringIO(), **options)
        return dict(line.split(' = ') for line in out.getvalue().splitlines())

    def test_loaded_config_reaches_the_command(self):
        path = self.tmp / 'engine.cfg'
        path.write_text('n_max = 3\nseed = 4\n', encoding='utf-8')
        self.assertEqual(self.echo(config=str(path)),
                         {'seed': '4', 'n_max': '3', 'path_in_options': 'False'})
        self.assertEqual(self.echo('--config', str(path), '--seed', '9')['seed'], '9')
        self.assertEqual(self.echo()['n_max'], '2')

    def test_engine_errors_keep_exit_code(self):
        with self.assertRaises(CommandError) as ctx:
            self.echo(config=str(self.tmp / 'absent.cfg'))
        self.assertEqual(ctx.exception.returncode, EXIT_CONFIG)

    def test_cli_exit_codes(self):
        path = self.tmp / 'engine.cfg'
        path.write_text('n_timesteps = 1\n', encoding='utf-8')
        manage = str(Path(settings.BASE_DIR) / 'manage.py')
        result = subprocess.run(
            [sys.executable, manage, 'calibrate', '--config', str(path), '--out', str(self.tmp / 'p.txt')],
            cwd=settings.BASE_DIR, capture_output=True, text=True, timeout=300,
        )
        self.assertEqual(result.returncode, EXIT_CONFIG)
        self.assertIn('calibration requires >= 2 timesteps', result.stderr)
        self.assertNotIn('--verbose', result.stderr)


# =============================================================================
# COMMANDE quantize_tensor
# =============================================================================

class QuantizeTensorCommandTest(TempDirMixin, SimpleTestCase):

    def _run(self, tensor, fmt, **options):
        source = self.tmp / 'in.qdt'
        write_tensor(source, tensor)
        out = StringIO()
        call_command('quantize_tensor', str(source), format=fmt, out=str(self.tmp / 'out.q'),
                     stdout=out, **options)
        values = dict(line.split(' = ') for line in out.getvalue().splitlines())
        return values

    def test_exact_input_nvfp4(self):
        tensor = (FP4_VALUES[np.arange(32) % 16] * 0.5).astype(np.float32)
        tensor[0] = 3.0
        tensor[16] = -3.0
        values = self._run(tensor, 'nvfp4')
        self.assertEqual(values['rel_l2'], '0.0')
        self.assertEqual(values['n_blocks'], '2')
        restored = dequantize(read_quantized(self.tmp / 'out.q'))
        assert_array_equal(restored, tensor)

    def test_gaussian_int8_sym_within_bound(self):
        tensor = np.random.default_rng(0).standard_normal(1000)
        values = self._run(tensor, 'int8_sym')
        error = float(values['rel_l2'])
        scale = np.abs(tensor).max() / 127
        bound = math.sqrt(tensor.size) * (scale / 2) / np.linalg.norm(tensor)
        self.assertGreater(error, 0.0)
        self.assertLessEqual(error, bound)

    def test_fp16_passthrough_error(self):
        tensor = np.random.default_rng(1).uniform(1.0, 2.0, 500)
        values = self._run(tensor, 'fp16_passthrough')
        expected = rel_l2(tensor, tensor.astype(np.float16).astype(np.float64))
        self.assertEqual(float(values['rel_l2']), expected)
        self.assertLess(expected, 1e-3)
        self.assertEqual(read_tensor(self.tmp / 'out.q').dtype, np.float32)

    def test_unknown_format(self):
        with self.assertRaises(CommandError) as ctx:
            self._run(np.ones(4), 'int4')
        self.assertEqual(ctx.exception.returncode, EXIT_CONFIG)

    def test_malformed_input(self):
        (self.tmp / 'bad.qdt').write_bytes(b'NOPE' + bytes(12))
        with self.assertRaises(CommandError) as ctx:
            call_command('quantize_tensor', str(self.tmp / 'bad.qdt'), format='nvfp4',
                         out=str(self.tmp / 'o.q'), stdout=StringIO())
        self.assertEqual(ctx.exception.returncode, EXIT_MALFORMED_INPUT)
