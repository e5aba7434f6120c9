"""
Tests du moteur : modèle jouet, noyaux, DMPQ, TDC, PDR, calibration,
pipeline de bout en bout et commandes calibrate / run / ablate
"""

import hashlib
import math
import tempfile
from dataclasses import replace
from io import StringIO
from pathlib import Path
from unittest import mock

import numpy as np
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, override_settings
from numpy.testing import assert_allclose, assert_array_equal

from analytics.reports import config_text_from_report
from core.config import EngineConfig, parse_config_text
from core.exceptions import (
    ConfigError,
    DegenerateFitError,
    MissingPredictorError,
    NumericBlowupError,
    ShapeMismatchError,
    UndefinedThresholdError,
)
from core.metrics import MetricKind, rel_l1, rel_l2
from core.quant_formats import QuantFormat, fake_quantize
from core.tensors import read_tensor

from .ablation import PRESETS, paired_wins, preset_config, run_ablation, sign_test_p
from .calibration import collect_pairs, run_calibration
from .dmpq import (
    CalibPair,
    LayerPredictor,
    RouteReason,
    derive_threshold,
    fit_layer,
    fit_predictors,
    parse_predictors,
    read_predictors,
    require_predictors,
    resolve_thresholds,
    route,
    format_predictors,
    write_predictors,
)
from .kernels import Precision, PreparedWeights
from .pdr import PurityConfig, outlier_ratio, purify_route
from .pipeline import execute_run, run_quantized, run_reference
from .tdc import (
    CacheDecision,
    CacheState,
    TdcConfig,
    apply,
    decide,
    prediction_error,
    record_compute,
    record_skip,
    update_accumulator,
)
from .toy_model import LAYER_IDS, Schedule, ToyDiT, ToyModelSpec, attention


def small_config(**overrides) -> EngineConfig:
    """Modèle réduit pour les tests rapides"""
    base = dict(n_blocks=2, seq_len=32, text_len=4, n_timesteps=12, calib_seeds=(0,))
    base.update(overrides)
    return EngineConfig().with_overrides(**base)


def uniform_predictors(n_blocks: int, alpha=0.1, beta=0.001, tau_gamma=0.015):
    return [
        LayerPredictor(block_id=b, layer_id=layer_id, alpha=alpha, beta=beta,
                       tau_gamma=tau_gamma, pair_count=10, residual_rms=0.0)
        for b in range(n_blocks) for layer_id in LAYER_IDS
    ]


def build(config: EngineConfig):
    model = ToyDiT(ToyModelSpec.from_config(config))
    return model, Schedule.from_config(config)


class TempDirMixin:
    def setUp(self):
        super().setUp()
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()
        super().tearDown()

    def write_config(self, name='engine.cfg', **overrides) -> str:
        path = self.tmp / name
        path.write_text(EngineConfig().with_overrides(**overrides).to_text(), encoding='utf-8')
        return str(path)


# =============================================================================
# MODÈLE JOUET
# =============================================================================

def _naive_block(model, block_id, x, t_embed):
    """Réimplémentation par boucles explicites (oracle f64)"""
    spec = model.spec
    seq, dim = x.shape

    def ln(row):
        mean = sum(row) / dim
        var = sum((v - mean) ** 2 for v in row) / dim
        return [(v - mean) / math.sqrt(var + 1e-5) for v in row]

    def lin(rows, layer_id):
        w = model.weights[(block_id, layer_id)]
        return [[sum(r[i] * w[i, j] for i in range(w.shape[0])) for j in range(w.shape[1])] for r in rows]

    def gelu(v):
        return 0.5 * v * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (v + 0.044715 * v ** 3)))

    u = [[a + b for a, b in zip(ln(list(row)), t_embed)] for row in x]
    q, k, v = lin(u, 'q'), lin(u, 'k'), lin(u, 'v')
    head_dim = dim // spec.n_heads
    attn = [[0.0] * dim for _ in range(seq)]
    for h in range(spec.n_heads):
        cols = range(h * head_dim, (h + 1) * head_dim)
        for i in range(seq):
            scores = [sum(q[i][c] * k[j][c] for c in cols) / math.sqrt(head_dim) for j in range(seq)]
            top = max(scores)
            weights = [math.exp(s - top) for s in scores]
            total = sum(weights)
            for c in cols:
                attn[i][c] = sum(weights[j] / total * v[j][c] for j in range(seq))
    o = lin(attn, 'o')
    h_rows = [[x[i][c] + o[i][c] for c in range(dim)] for i in range(seq)]
    m = [[a + b for a, b in zip(ln(row), t_embed)] for row in h_rows]
    hidden = [[gelu(val) for val in row] for row in lin(m, 'fc1')]
    out = lin(hidden, 'fc2')
    return np.array([[h_rows[i][c] + out[i][c] for c in range(dim)] for i in range(seq)])


class ToyModelTest(SimpleTestCase):

    def test_zero_weights_is_identity(self):
        spec = ToyModelSpec(n_blocks=1, hidden_dim=8, seq_len=6, text_len=2, n_heads=2)
        zeros = {(0, layer_id): np.zeros(spec.layer_shape(layer_id)) for layer_id in LAYER_IDS}
        model = ToyDiT(spec, weights=zeros)
        x = np.random.default_rng(0).standard_normal((6, 8)).astype(np.float32)
        y = model.block_forward(0, x, model.timestep_embedding(3, 10))
        assert_array_equal(y, x)

    def test_batch_permutation(self):
        model = ToyDiT(ToyModelSpec(n_blocks=1, hidden_dim=16, seq_len=8, text_len=2, n_heads=4))
        x = np.random.default_rng(1).standard_normal((3, 8, 16)).astype(np.float32)
        t_embed = model.timestep_embedding(2, 10)
        out = model.block_forward(0, x, t_embed)
        permuted = model.block_forward(0, x[[2, 0, 1]], t_embed)
        assert_allclose(permuted, out[[2, 0, 1]], rtol=0, atol=1e-6)
        single = model.block_forward(0, x[1], t_embed)
        assert_allclose(single, out[1], rtol=0, atol=1e-6)

    def test_matches_naive_loops_f64(self):
        spec = ToyModelSpec(n_blocks=2, hidden_dim=8, seq_len=5, text_len=1, n_heads=2)
        model = ToyDiT(spec, dtype=np.float64)
        x = np.random.default_rng(2).standard_normal((5, 8))
        t_embed = model.timestep_embedding(4, 10)
        for block_id in (0, 1):
            expected = _naive_block(model, block_id, x, t_embed)
            assert_allclose(model.block_forward(block_id, x, t_embed), expected, rtol=0, atol=1e-12)

    def test_attention_rows_are_convex_combinations(self):
        rng = np.random.default_rng(3)
        v = rng.standard_normal((6, 4))
        out = attention(rng.standard_normal((6, 4)), rng.standard_normal((6, 4)), v, 1)
        self.assertTrue(np.all(out <= v.max(axis=0) + 1e-12))
        self.assertTrue(np.all(out >= v.min(axis=0) - 1e-12))

    def test_outlier_columns_on_odd_blocks(self):
        model = ToyDiT(ToyModelSpec())
        even = np.abs(model.weights[(0, 'fc1')][:, :2]).mean()
        odd = np.abs(model.weights[(1, 'fc1')][:, :2]).mean()
        self.assertGreater(odd, 4 * even)

    def test_shape_mismatch(self):
        model = ToyDiT(ToyModelSpec(n_blocks=1, hidden_dim=8, seq_len=4, text_len=1, n_heads=2))
        with self.assertRaises(ShapeMismatchError):
            model.block_forward(0, np.zeros((4, 6), dtype=np.float32), np.zeros(8, dtype=np.float32))


# =============================================================================
# NOYAUX
# =============================================================================

class KernelsTest(SimpleTestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.config = small_config()
        cls.model, _ = build(cls.config)
        cls.weights = PreparedWeights(cls.model, cls.config)
        cls.act = np.random.default_rng(0).standard_normal((32, 64)).astype(np.float32)

    def test_identity_is_reference_product(self):
        for layer_id in ('q', 'o'):
            assert_array_equal(self.weights.linear(0, layer_id, self.act, Precision.IDENTITY),
                               self.model.linear(0, layer_id, self.act))

    def test_fp16_rounds_operands(self):
        w = self.model.weights[(1, 'v')]
        expected = self.act.astype(np.float16).astype(np.float32) @ w.astype(np.float16).astype(np.float32)
        assert_array_equal(self.weights.linear(1, 'v', self.act, Precision.FP16), expected)

    def test_quantized_paths_error_ordering(self):
        exact = self.model.linear(0, 'k', self.act)
        nvfp4 = rel_l2(exact, self.weights.linear(0, 'k', self.act, Precision.NVFP4))
        int8 = rel_l2(exact, self.weights.linear(0, 'k', self.act, Precision.INT8))
        fp16 = rel_l2(exact, self.weights.linear(0, 'k', self.act, Precision.FP16))
        self.assertLess(fp16, int8)
        self.assertLess(int8, nvfp4)
        self.assertLess(nvfp4, 0.3)

    def test_shadow_without_quantization_is_exact(self):
        assert_array_equal(self.weights.shadow_linear(0, 'fc1', self.act, False, False),
                           self.model.linear(0, 'fc1', self.act))

    def test_precision_bits(self):
        self.assertEqual([p.bits for p in Precision], [4, 8, 16, 32])

    def test_memory_ratio(self):
        ratio = self.weights.memory_ratio()
        self.assertGreater(ratio, 3.0)
        self.assertLess(ratio, 4.0)


# =============================================================================
# DMPQ
# =============================================================================

def _pairs(points, block_id=0, layer_id='q'):
    return [CalibPair(block_id, layer_id, t, g, e) for t, (g, e) in enumerate(points, start=1)]


class DmpqTest(TempDirMixin, SimpleTestCase):

    def test_exact_linear_fit(self):
        gammas = np.linspace(0.001, 0.05, 40)
        predictor = fit_layer(_pairs([(g, 0.1 * g + 0.001) for g in gammas]))
        self.assertAlmostEqual(predictor.alpha, 0.1, delta=1e-9)
        self.assertAlmostEqual(predictor.beta, 0.001, delta=1e-9)
        self.assertLess(predictor.residual_rms, 1e-12)
        self.assertEqual(predictor.pair_count, 40)

    def test_two_point_fit(self):
        predictor = fit_layer(_pairs([(0.0, 0.0), (1.0, 2.0)]))
        self.assertEqual(predictor.alpha, 2.0)
        self.assertEqual(predictor.beta, 0.0)

    def test_degenerate_variance(self):
        with self.assertRaises(DegenerateFitError) as ctx:
            fit_layer(_pairs([(1.0, 1.0), (1.0, 2.0)], block_id=3, layer_id='fc2'))
        self.assertIn('block 3 layer fc2', str(ctx.exception))
        with self.assertRaises(DegenerateFitError):
            fit_layer(_pairs([(1.0, 1.0)]))

    def test_derive_threshold(self):
        predictor = LayerPredictor(0, 'q', alpha=0.1, beta=0.001, tau_gamma=None)
        self.assertAlmostEqual(derive_threshold(predictor, 0.0025), 0.015, places=15)
        with self.assertRaises(UndefinedThresholdError):
            derive_threshold(replace(predictor, alpha=0.0), 0.0025)

    def test_high_intercept_routes_always_int8(self):
        predictor = LayerPredictor(0, 'q', alpha=0.1, beta=0.003, tau_gamma=None)
        tau = derive_threshold(predictor, 0.0025)
        self.assertLessEqual(tau, 0.0)
        self.assertIs(route(0.0, replace(predictor, tau_gamma=tau)).precision, Precision.INT8)

    def test_flat_layer_is_pinned(self):
        predictor = fit_layer(_pairs([(g, 0.002) for g in (0.01, 0.02, 0.03)]))
        self.assertIsNone(predictor.tau_gamma)
        decision = route(0.5, predictor)
        self.assertIs(decision.precision, Precision.INT8)
        self.assertIs(decision.reason, RouteReason.PINNED)

    def test_route_examples(self):
        predictor = LayerPredictor(0, 'q', alpha=0.1, beta=0.001, tau_gamma=0.015)
        self.assertIs(route(0.02, predictor).precision, Precision.INT8)
        self.assertIs(route(0.015, predictor).precision, Precision.NVFP4)
        self.assertIs(route(0.0, predictor).precision, Precision.NVFP4)

    def test_threshold_consistency_on_random_tuples(self):
        rng = np.random.default_rng(42)
        disagreements = 0
        for _ in range(10_000):
            alpha = rng.uniform(1e-3, 10.0)
            beta = rng.uniform(-0.01, 0.01)
            gamma = rng.uniform(0.0, 0.1)
            tau_rel = rng.uniform(0.0, 0.01)
            predictor = LayerPredictor(0, 'q', alpha=alpha, beta=beta, tau_gamma=None)
            predictor = replace(predictor, tau_gamma=derive_threshold(predictor, tau_rel))
            routed_int8 = route(gamma, predictor).precision is Precision.INT8
            disagreements += routed_int8 != (alpha * gamma + beta > tau_rel)
        self.assertEqual(disagreements, 0)

    def test_noisy_fit_recovers_slope_and_intercept(self):
        rng = np.random.default_rng(11)
        n, sigma = 2000, 1e-4
        gammas = rng.uniform(0.0, 0.05, size=n)
        errors = 0.1 * gammas + 0.001 + rng.normal(0.0, sigma, size=n)
        predictor = fit_layer(_pairs(zip(gammas.tolist(), errors.tolist())))
        sxx = float(np.sum((gammas - gammas.mean()) ** 2))
        self.assertLessEqual(abs(predictor.alpha - 0.1), 5 * sigma / math.sqrt(sxx))
        beta_stderr = sigma * math.sqrt(1 / n + gammas.mean() ** 2 / sxx)
        self.assertLessEqual(abs(predictor.beta - 0.001), 5 * beta_stderr)
        self.assertAlmostEqual(predictor.residual_rms, sigma, delta=0.1 * sigma)

    def test_routing_is_monotone_in_gamma(self):
        rng = np.random.default_rng(5)
        for _ in range(500):
            tau_gamma = None if rng.random() < 0.2 else float(rng.uniform(-0.01, 0.05))
            predictor = LayerPredictor(0, 'q', alpha=0.1, beta=0.001, tau_gamma=tau_gamma)
            seen_int8 = False
            for gamma in np.sort(rng.uniform(0.0, 0.06, size=50)):
                int8 = route(float(gamma), predictor).precision is Precision.INT8
                self.assertFalse(seen_int8 and not int8)
                seen_int8 = seen_int8 or int8

    def test_fit_predictors_groups_by_layer(self):
        pairs = _pairs([(0.01, 0.002), (0.02, 0.003)], 0, 'q') + _pairs([(0.01, 0.001), (0.03, 0.004)], 1, 'v')
        predictors = fit_predictors(pairs, 0.0025, 1e-8)
        self.assertEqual([p.key for p in predictors], [(0, 'q'), (1, 'v')])

    def test_override_and_missing(self):
        predictors = uniform_predictors(2, tau_gamma=None)
        resolved = resolve_thresholds(predictors, EngineConfig())
        self.assertTrue(all(p.tau_gamma == 0.015 for p in resolved.values()))
        derived = resolve_thresholds(predictors, EngineConfig().with_overrides(tau_gamma_override=None))
        self.assertTrue(all(p.tau_gamma is None for p in derived.values()))
        with self.assertRaises(MissingPredictorError):
            require_predictors(resolved, [(0, 'q'), (5, 'q')])

    def test_predictor_file_round_trip(self):
        predictors = uniform_predictors(1) + [LayerPredictor(1, 'q', 0.0, 0.002, None, 3, 1e-4)]
        write_predictors(self.tmp / 'p.txt', predictors)
        self.assertEqual(read_predictors(self.tmp / 'p.txt'), predictors)
        self.assertIn(' - ', format_predictors(predictors))

    def test_predictor_file_errors(self):
        with self.assertRaises(MissingPredictorError):
            read_predictors(self.tmp / 'absent.txt')
        with self.assertRaisesMessage(ConfigError, 'line 2'):
            parse_predictors("# header\n0 q 0.1 0.001\n")
        with self.assertRaises(ConfigError):
            parse_predictors("0 q nan 0.001 0.015 3 0.0\n")


# =============================================================================
# CALIBRATION
# =============================================================================

class CalibrationTest(TempDirMixin, SimpleTestCase):

    def test_identity_shadow_gives_zero_error(self):
        config = small_config(n_timesteps=4)
        model, schedule = build(config)
        reference = run_reference(model, schedule, 0)
        pairs = collect_pairs(model, reference, PreparedWeights(model, config), quant_target='none')
        self.assertTrue(pairs)
        self.assertTrue(all(p.e_rel == 0.0 for p in pairs))

    def test_pair_counts(self):
        config = small_config(n_blocks=1, n_timesteps=3)
        model, schedule = build(config)
        reference = run_reference(model, schedule, 0)
        pairs = collect_pairs(model, reference, PreparedWeights(model, config))
        self.assertEqual(len(pairs), 12)
        for layer_id in LAYER_IDS:
            self.assertEqual(sorted(p.timestep for p in pairs if p.layer_id == layer_id), [1, 2])

        config = small_config(n_blocks=2, n_timesteps=5)
        result = run_calibration(config, seeds=[0], error_fn=lambda b, layer, t, g: g)
        self.assertEqual(len(result.pairs), 2 * 6 * 4)

    def test_gamma_matches_dumped_tensors(self):
        config = small_config(n_timesteps=4)
        model, schedule = build(config)
        reference = run_reference(model, schedule, 0, dump_dir=self.tmp / 'dump')
        pairs = collect_pairs(model, reference, PreparedWeights(model, config))
        for pair in pairs:
            folder = self.tmp / 'dump' / f"step_{pair.timestep - 1}" / f"block_{pair.block_id}"
            expected = rel_l1(read_tensor(folder / 'in.qdt'), read_tensor(folder / 'out.qdt'))
            self.assertEqual(pair.gamma_prev, expected)
            self.assertGreater(pair.e_rel, 0.0)

    def test_rigged_linear_error(self):
        config = small_config(n_timesteps=8)
        result = run_calibration(config, seeds=[0, 1], error_fn=lambda b, layer, t, g: 0.1 * g + 0.001)
        for predictor in result.predictors:
            self.assertAlmostEqual(predictor.alpha, 0.1, delta=1e-6)
            self.assertAlmostEqual(predictor.beta, 0.001, delta=1e-6)

    def test_duplicate_seed_keeps_fit(self):
        config = small_config(n_timesteps=5)
        single = run_calibration(config, seeds=[0])
        doubled = run_calibration(config, seeds=[0, 0], max_workers=2)
        for a, b in zip(single.predictors, doubled.predictors):
            self.assertEqual(a.key, b.key)
            assert_allclose([b.alpha, b.beta], [a.alpha, a.beta], rtol=1e-9, atol=1e-15)

    def test_worker_count_does_not_change_result(self):
        config = small_config(n_timesteps=4, calib_seeds=(0, 1, 2))
        serial = run_calibration(config, max_workers=1)
        parallel = run_calibration(config, max_workers=3)
        self.assertEqual(serial.predictors, parallel.predictors)

    def test_requires_two_timesteps(self):
        with self.assertRaisesMessage(ConfigError, 'calibration requires >= 2 timesteps'):
            run_calibration(small_config(n_timesteps=1))


# =============================================================================
# TDC
# =============================================================================

def _computed(state, t, e_tp):
    """Pas calculé synthétique avec une erreur de prédiction imposée"""
    state = replace(state, t_p=t, e_tp=e_tp, cached_delta=np.zeros(2), delta_prev=np.zeros(2),
                    last_state=CacheDecision.COMPUTE, skip_run=0)
    return update_accumulator(state, TdcConfig())


class TdcTest(SimpleTestCase):

    def test_prediction_error_examples(self):
        d2 = np.array([3.0, -4.0, 12.0])
        self.assertAlmostEqual(prediction_error(d2, d2), 0.0, places=12)
        self.assertEqual(prediction_error(np.array([1.0, 0.0]), np.array([0.0, 1.0])), 1.0)
        self.assertAlmostEqual(prediction_error(2 * d2, d2), 0.0, places=12)
        self.assertEqual(prediction_error(2 * d2, d2, MetricKind.REL_L2), 0.5)

    def test_zero_delta_forces_compute(self):
        self.assertEqual(prediction_error(np.zeros(3), np.ones(3)), math.inf)
        state = CacheState(block_id=0)
        x = np.random.default_rng(0).standard_normal((4, 8))
        decisions = []
        for t in range(5):
            x, state, record = apply(state, t, x, lambda v: v.copy(), TdcConfig())
            decisions.append(record.decision)
            assert_array_equal(state.cached_delta, 0.0)
        self.assertEqual(decisions, ['compute'] * 5)

    def test_accumulator_updates(self):
        state = _computed(CacheState(block_id=0), 5, 0.001)
        self.assertEqual(state.e_acc, 0.001)
        state = update_accumulator(record_skip(state), TdcConfig())
        self.assertEqual(state.e_acc, 0.003)
        flat = TdcConfig(rho=0.0)
        state = update_accumulator(_computed(CacheState(block_id=0), 2, 0.0), flat)
        for _ in range(3):
            state = update_accumulator(record_skip(state), flat)
            self.assertEqual(state.e_acc, 0.0)

    def test_golden_trace(self):
        cfg = TdcConfig(rho=0.001, tau=0.003, n_max=2)
        state = _computed(CacheState(block_id=0), 5, 0.001)
        decisions, e_acc = [], []
        for t in (6, 7, 8):
            decision = decide(state, t, cfg)
            decisions.append(decision)
            e_acc.append(state.e_acc)
            if decision is CacheDecision.SKIP:
                state = update_accumulator(record_skip(state), cfg)
        self.assertEqual(decisions, [CacheDecision.SKIP, CacheDecision.SKIP, CacheDecision.COMPUTE])
        self.assertEqual(e_acc[:2], [0.001, 0.003])
        self.assertAlmostEqual(e_acc[2], 0.005, places=15)

    def test_apply_sequence_on_constant_delta(self):
        delta = np.random.default_rng(1).standard_normal((4, 8))
        state = CacheState(block_id=2)
        x = np.zeros((4, 8))
        rows = []
        for t in range(8):
            x_in = x
            x, state, record = apply(state, t, x_in, lambda v: v + delta, TdcConfig())
            rows.append(record)
            if record.decision == 'skip':
                assert_array_equal(x, x_in + state.cached_delta)
        self.assertEqual([r.decision for r in rows],
                         ['compute', 'compute', 'skip', 'skip', 'compute', 'skip', 'skip', 'compute'])
        self.assertEqual([r.reason for r in rows[:5]], ['warmup', 'warmup', 'budget', 'budget', 'max_gap'])
        self.assertEqual(rows[3].gap, 2)
        self.assertEqual(rows[4].gap, 3)
        self.assertTrue(all(r.block_id == 2 for r in rows))

    def test_threshold_extremes(self):
        delta = np.random.default_rng(2).standard_normal(16)

        def decisions(cfg):
            state, x, out = CacheState(block_id=0), np.zeros(16), []
            for t in range(12):
                x, state, record = apply(state, t, x, lambda v: v + delta, cfg)
                out.append(record.decision)
            return out

        self.assertNotIn('skip', decisions(TdcConfig(tau=0.0)))
        self.assertEqual(decisions(TdcConfig(tau=math.inf, n_max=3))[2:],
                         ['skip', 'skip', 'skip', 'compute', 'skip', 'skip', 'skip', 'compute', 'skip', 'skip'])

    def test_skip_with_zero_cache_returns_input(self):
        state = CacheState(block_id=0, delta_prev=np.ones(3), cached_delta=np.zeros(3), t_p=3,
                           e_tp=0.0, e_acc=0.0, last_state=CacheDecision.COMPUTE)
        x = np.array([1.0, 2.0, 3.0])
        out, _, record = apply(state, 4, x, lambda v: v * 10, TdcConfig())
        self.assertEqual(record.decision, 'skip')
        assert_array_equal(out, x)

    def test_compressed_cache(self):
        rng = np.random.default_rng(3)
        delta = rng.standard_normal((4, 16)).astype(np.float32)
        cfg = TdcConfig(tau=1.0, cache_compress='nvfp4')
        state, x = CacheState(block_id=0), rng.standard_normal((4, 16)).astype(np.float32)
        computed = None
        for t in range(3):
            x_in = x
            x, state, record = apply(state, t, x_in, lambda v: v + delta, cfg)
            if record.decision == 'compute':
                computed = (x_in, x)
            else:
                expected = x_in + fake_quantize(computed[1] - computed[0], QuantFormat.NVFP4)
                assert_array_equal(x, expected)
        self.assertEqual(record.decision, 'skip')

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeMismatchError):
            apply(CacheState(block_id=0), 0, np.zeros(4), lambda v: np.zeros(5), TdcConfig())

    def test_random_sequences_respect_max_gap(self):
        rng = np.random.default_rng(7)
        cfg = TdcConfig(rho=0.001, tau=0.003, n_max=2)
        errors = rng.uniform(0.0, 0.002, size=100_000)
        state = CacheState(block_id=0)
        run = longest = 0
        for t in range(100_000):
            decision = decide(state, t, cfg)
            if state.t_p is not None:
                self.assertLessEqual(t - state.t_p, cfg.n_max + 1)
            if decision is CacheDecision.SKIP:
                before = state.e_acc
                state = update_accumulator(record_skip(state), cfg)
                self.assertGreaterEqual(state.e_acc, before)
                run += 1
                longest = max(longest, run)
            else:
                state = _computed(state, t, float(errors[t]))
                run = 0
            self.assertGreaterEqual(state.e_acc, 0.0)
        self.assertLessEqual(longest, cfg.n_max)
        self.assertEqual(longest, cfg.n_max)

    def test_drift_is_linear_in_skips(self):
        rng = np.random.default_rng(11)
        delta = rng.standard_normal((8, 16))
        noise = rng.standard_normal((8, 16)) * 1e-3
        cfg = TdcConfig(rho=0.0, tau=math.inf, n_max=3)
        state, x = CacheState(block_id=0), rng.standard_normal((8, 16))
        for t in range(2):
            x, state, _ = apply(state, t, x, lambda v: v + delta, cfg, noise_fn=lambda v: noise)
        ideal = x
        for n_skips in (1, 2, 3):
            x, state, record = apply(state, 1 + n_skips, x, lambda v: v + delta, cfg)
            ideal = ideal + delta
            self.assertEqual(record.decision, 'skip')
            drift = np.linalg.norm(x - ideal)
            expected = n_skips * np.linalg.norm(noise)
            self.assertLessEqual(abs(drift - expected), 1e-6 * expected)

    def test_record_compute_keeps_history_clean(self):
        state = record_compute(CacheState(block_id=0), 0, np.zeros(3), np.ones(3), TdcConfig(),
                               noise=np.full(3, 0.5))
        assert_array_equal(state.delta_prev, 1.0)
        assert_array_equal(state.cached_delta, 1.5)


# =============================================================================
# PDR
# =============================================================================

class PurityTest(SimpleTestCase):

    def setUp(self):
        self.base = route(0.001, LayerPredictor(0, 'q', 0.1, 0.001, 0.015))

    def test_outlier_ratio_examples(self):
        self.assertEqual(outlier_ratio(np.array([2.0, -2.0, 2.0, -2.0])), 1.0)
        self.assertAlmostEqual(outlier_ratio(np.array([50.0, 2.0, 2.0, 2.0])), 50 / 14, places=12)
        spike = np.ones(1000)
        spike[123] = 1000.0
        self.assertAlmostEqual(outlier_ratio(spike), 1000 / 1.999, places=9)
        self.assertEqual(outlier_ratio(np.zeros(4)), 1.0)
        self.assertEqual(outlier_ratio(np.array([9.0, 1.0, 9.0, 1.0]), stride=2), 1.0)

    def test_boundary_keeps_base(self):
        x = np.zeros(25)
        x[0] = 25.0
        decision = purify_route(self.base, x, False, PurityConfig(tau_outlier=25.0))
        self.assertIs(decision.precision, Precision.NVFP4)
        self.assertEqual(decision.r_outlier, 25.0)

    def test_post_skip_fallback(self):
        x = np.linspace(1.0, 2.0, 32)
        decision = purify_route(self.base, x, True, PurityConfig())
        self.assertIs(decision.precision, Precision.INT8)
        self.assertIs(decision.reason, RouteReason.POST_SKIP)
        fp16 = purify_route(self.base, x, True, PurityConfig(post_skip_format=Precision.FP16))
        self.assertIs(fp16.precision, Precision.FP16)

    def test_outlier_dominates(self):
        spike = np.ones(1000)
        spike[0] = 500.0
        for skipped in (False, True):
            decision = purify_route(self.base, spike, skipped, PurityConfig())
            self.assertIs(decision.precision, Precision.FP16)
            self.assertIs(decision.reason, RouteReason.OUTLIER)

    def test_disabled(self):
        spike = np.ones(100)
        spike[0] = 1e4
        self.assertEqual(purify_route(self.base, spike, True, PurityConfig(enabled=False)), self.base)


# =============================================================================
# PIPELINE
# =============================================================================

class PipelineTest(TempDirMixin, SimpleTestCase):

    def test_reference_is_deterministic(self):
        model, schedule = build(small_config())
        a = run_reference(model, schedule, 3)
        b = run_reference(model, schedule, 3)
        assert_array_equal(a.states, b.states)
        assert_array_equal(a.block_outputs, b.block_outputs)

    def test_zero_step_size_is_fixed_point(self):
        model, schedule = build(small_config(eta=0.0, t_embed_scale=0.0, n_timesteps=5))
        run = run_reference(model, schedule, 0)
        for t in range(1, 6):
            assert_array_equal(run.states[t], run.states[0])
        deltas = run.block_deltas
        for t in range(1, 5):
            assert_array_equal(deltas[t], deltas[0])

    def test_dump_counts(self):
        model, schedule = build(small_config(n_timesteps=3))
        run_reference(model, schedule, 0, dump_dir=self.tmp)
        self.assertEqual(len(list(self.tmp.glob('step_*/block_*/delta.qdt'))), 2 * 3)

    def test_blowup_is_reported(self):
        model, schedule = build(small_config(eta=1e9, n_timesteps=3))
        with self.assertRaises(NumericBlowupError):
            run_reference(model, schedule, 0)

    def test_disabled_features_are_transparent(self):
        config = EngineConfig().with_overrides(quant_mode='identity', tau_cache=0.0, pdr_enabled=False)
        model, schedule = build(config)
        reference = run_reference(model, schedule, config.seed)
        result = run_quantized(model, config)
        assert_array_equal(result.final, reference.final)
        self.assertTrue(all(r.decision == 'compute' for r in result.records))

    def test_outlier_gate_at_one_matches_fp16_pipeline(self):
        config = small_config(n_timesteps=16)
        model, _ = build(config)
        predictors = uniform_predictors(config.n_blocks)
        purified = run_quantized(model, config.with_overrides(tau_outlier=1.0 + 1e-9), predictors)
        fp16 = run_quantized(model, config.with_overrides(quant_mode='fp16'))
        assert_array_equal(purified.final, fp16.final)
        layer_formats = {r.format for r in purified.records if not r.is_block_row}
        self.assertEqual(layer_formats, {'fp16_passthrough'})
        self.assertEqual([r.decision for r in purified.records if r.is_block_row],
                         [r.decision for r in fp16.records if r.is_block_row])

    def test_default_run_skip_fraction(self):
        config = EngineConfig()
        report = execute_run(config, uniform_predictors(config.n_blocks))
        self.assertGreater(report.summary.skip_fraction, 0.0)
        self.assertLessEqual(report.summary.skip_fraction, 2 / 3)
        self.assertLessEqual(max(report.summary.max_skip_run.values()), config.n_max)
        self.assertGreater(report.rel_l2, 0.0)

        for block_id in range(config.n_blocks):
            rows = sorted((r for r in report.records if r.is_block_row and r.block_id == block_id),
                          key=lambda r: r.timestep)
            for previous, row in zip(rows, rows[1:]):
                if previous.skipped and row.skipped:
                    self.assertGreaterEqual(row.e_acc, previous.e_acc)

    def test_trace_rows(self):
        config = small_config(n_timesteps=6)
        model, _ = build(config)
        result = run_quantized(model, config, uniform_predictors(config.n_blocks))
        block_rows = [r for r in result.records if r.is_block_row]
        self.assertEqual(len(block_rows), 6 * config.n_blocks)
        computed = sum(1 for r in block_rows if not r.skipped)
        self.assertEqual(sum(1 for r in result.records if not r.is_block_row), 6 * computed)
        first = [r for r in result.records if r.timestep == 0 and not r.is_block_row]
        self.assertTrue(all(r.reason in ('no_history', 'outlier_fallback') for r in first))
        for row in block_rows:
            if row.skipped:
                self.assertEqual(row.bits, 0)
                self.assertGreater(row.elems, 0)

    def test_missing_predictors(self):
        config = small_config()
        model, _ = build(config)
        with self.assertRaises(MissingPredictorError):
            run_quantized(model, config, uniform_predictors(1))

    def test_requires_three_timesteps(self):
        config = small_config(n_timesteps=2)
        model, _ = build(config)
        with self.assertRaises(ConfigError):
            run_quantized(model, config, uniform_predictors(config.n_blocks))

    def test_cache_noise_increases_error(self):
        config = EngineConfig().with_overrides(quant_mode='fp16', n_timesteps=20)
        model, schedule = build(config)
        seeds = range(10)
        references = {seed: run_reference(model, schedule, seed).final for seed in seeds}
        means = []
        for std in (0.0, 1e-2, 1e-1):
            noisy = config.with_overrides(cache_noise_std=std)
            errors = [rel_l2(references[seed], run_quantized(model, noisy, seed=seed).final) for seed in seeds]
            means.append(np.mean(errors))
        self.assertLess(means[0], means[1])
        self.assertLess(means[1], means[2])


# =============================================================================
# ABLATION
# =============================================================================

class AblationTest(SimpleTestCase):

    def test_sign_test(self):
        self.assertAlmostEqual(sign_test_p(9, 10), 11 / 1024)
        self.assertAlmostEqual(sign_test_p(10, 10), 1 / 1024)
        self.assertEqual(sign_test_p(0, 10), 1.0)

    def test_presets(self):
        self.assertEqual(preset_config(EngineConfig(), 'w4a8').tau_gamma_override, -1.0)
        self.assertEqual(preset_config(EngineConfig(), 'tdc').quant_mode, 'fp16')
        with self.assertRaises(ConfigError):
            preset_config(EngineConfig(), 'w2a2')

    def test_component_ordering(self):
        config = EngineConfig().with_overrides(n_timesteps=20)
        rows = {row.preset: row for row in run_ablation(config, uniform_predictors(config.n_blocks),
                                                        seeds=range(10), max_workers=2)}
        self.assertEqual(set(rows), set(PRESETS))
        self.assertLessEqual(rows['w4a8'].mean_rel_l2, rows['dmpq'].mean_rel_l2)
        self.assertLessEqual(rows['dmpq'].mean_rel_l2, rows['w4a4'].mean_rel_l2)
        self.assertLess(rows['full'].mean_rel_l2, rows['dmpq_tdc'].mean_rel_l2)
        wins = paired_wins(rows['full'], rows['dmpq_tdc'])
        self.assertLess(sign_test_p(wins, 10), 0.05)
        self.assertEqual(rows['w4a4'].skip_fraction, 0.0)
        self.assertGreater(rows['tdc'].skip_fraction, 0.0)


# =============================================================================
# COMMANDES
# =============================================================================

SMALL = dict(n_blocks=2, seq_len=32, text_len=4, n_timesteps=8, calib_seeds=(0,))


class EngineCommandsTest(TempDirMixin, SimpleTestCase):

    def call(self, name, *args, **options):
        out = StringIO()
        call_command(name, *args, stdout=out, stderr=StringIO(), **options)
        return out.getvalue()

    def predictors_file(self, n_blocks=2):
        path = self.tmp / 'predictors.txt'
        write_predictors(path, uniform_predictors(n_blocks))
        return str(path)

    def test_calibrate_writes_one_row_per_layer(self):
        config = self.write_config(**SMALL)
        output = self.call('calibrate', config=config, out=str(self.tmp / 'p.txt'))
        predictors = read_predictors(self.tmp / 'p.txt')
        self.assertEqual(len(predictors), 2 * 6)
        self.assertIn('predictors = 12', output)

    def test_calibrate_needs_two_timesteps(self):
        config = self.write_config(n_timesteps=1)
        with self.assertRaises(CommandError) as ctx:
            self.call('calibrate', config=config, out=str(self.tmp / 'p.txt'))
        self.assertEqual(ctx.exception.returncode, 2)
        self.assertIn('calibration requires >= 2 timesteps', str(ctx.exception))

    def test_calibrate_degenerate_fit(self):
        config = self.write_config(**dict(SMALL, eta=0.0, t_embed_scale=0.0, n_timesteps=3))
        with self.assertRaises(CommandError) as ctx:
            self.call('calibrate', config=config, out=str(self.tmp / 'p.txt'))
        self.assertEqual(ctx.exception.returncode, 3)
        self.assertIn('block 0 layer q', str(ctx.exception))

    def test_calibrate_rigged_summary(self):
        def rigged(config, max_workers=1):
            return run_calibration(config, error_fn=lambda b, layer, t, g: 0.2 * g + 0.0005,
                                   max_workers=max_workers)

        config = self.write_config(**SMALL)
        with mock.patch('ai_engine.management.commands.calibrate.run_calibration', rigged):
            output = self.call('calibrate', config=config, out=str(self.tmp / 'p.txt'))
        self.assertIn('pairs = 84', output)
        predictors = read_predictors(self.tmp / 'p.txt')
        self.assertEqual(len(predictors), 12)
        for predictor in predictors:
            self.assertAlmostEqual(predictor.alpha, 0.2, delta=1e-6)
            self.assertAlmostEqual(predictor.beta, 0.0005, delta=1e-6)

    def test_calibrate_is_thread_count_independent(self):
        config = self.write_config(**dict(SMALL, calib_seeds=(0, 1, 2)))
        with self.settings(QDE_THREADS=1):
            self.call('calibrate', config=config, out=str(self.tmp / 'a.txt'))
        with override_settings(QDE_THREADS=4):
            self.call('calibrate', config=config, out=str(self.tmp / 'b.txt'))
        self.assertEqual((self.tmp / 'a.txt').read_bytes(), (self.tmp / 'b.txt').read_bytes())

    def test_run_transparent_config(self):
        config = self.write_config(quant_mode='identity', tau_cache=0.0, pdr_enabled=False)
        output = self.call('run', config=config, out=str(self.tmp / 'run'))
        self.assertTrue(output.startswith('rel_l2=0.0 skip_fraction=0.0 '))
        self.assertTrue((self.tmp / 'run' / 'trace.tsv').exists())

    def test_run_is_deterministic_and_echo_reproduces(self):
        config = self.write_config(**SMALL)
        predictors = self.predictors_file()
        first = self.call('run', config=config, predictors=predictors, out=str(self.tmp / 'a'))
        second = self.call('run', config=config, predictors=predictors, out=str(self.tmp / 'b'))
        self.assertEqual(first, second)
        for name in ('report.txt', 'trace.tsv'):
            self.assertEqual((self.tmp / 'a' / name).read_bytes(), (self.tmp / 'b' / name).read_bytes())

        echoed = config_text_from_report((self.tmp / 'a' / 'report.txt').read_text(encoding='utf-8'))
        self.assertEqual(parse_config_text(echoed), parse_config_text(Path(config).read_text(encoding='utf-8')))
        (self.tmp / 'echo.cfg').write_text(echoed, encoding='utf-8')
        self.call('run', config=str(self.tmp / 'echo.cfg'), predictors=predictors, out=str(self.tmp / 'c'))
        self.assertEqual((self.tmp / 'a' / 'report.txt').read_bytes(), (self.tmp / 'c' / 'report.txt').read_bytes())

    def test_run_leaves_predictor_file_untouched(self):
        config = self.write_config(**SMALL)
        predictors = self.predictors_file()
        before = hashlib.sha256(Path(predictors).read_bytes()).hexdigest()
        self.call('run', config=config, predictors=predictors, out=str(self.tmp / 'run'))
        self.assertEqual(hashlib.sha256(Path(predictors).read_bytes()).hexdigest(), before)

    def test_run_and_ablate_are_thread_count_independent(self):
        config = self.write_config(**SMALL)
        predictors = self.predictors_file()
        outputs = []
        for threads, name in ((1, 'a'), (4, 'b')):
            with override_settings(QDE_THREADS=threads):
                run = self.call('run', config=config, predictors=predictors, out=str(self.tmp / name))
                ablate = self.call('ablate', config=config, predictors=predictors, seeds='0-2',
                                   out=str(self.tmp / f'{name}.tsv'))
            outputs.append((run, ablate))
        self.assertEqual(outputs[0], outputs[1])
        for name in ('report.txt', 'trace.tsv'):
            self.assertEqual((self.tmp / 'a' / name).read_bytes(), (self.tmp / 'b' / name).read_bytes())
        self.assertEqual((self.tmp / 'a.tsv').read_bytes(), (self.tmp / 'b.tsv').read_bytes())

    def test_run_seed_flag_overrides_config(self):
        config = self.write_config(**SMALL)
        predictors = self.predictors_file()
        self.call('run', config=config, predictors=predictors, seed=5, out=str(self.tmp / 'a'))
        report = (self.tmp / 'a' / 'report.txt').read_text(encoding='utf-8')
        self.assertIn('\nseed = 5\n', report)

    def test_run_missing_predictors(self):
        config = self.write_config(**SMALL)
        with self.assertRaises(CommandError) as ctx:
            self.call('run', config=config)
        self.assertEqual(ctx.exception.returncode, 4)
        with self.assertRaises(CommandError) as ctx:
            self.call('run', config=config, predictors=str(self.tmp / 'absent.txt'))
        self.assertEqual(ctx.exception.returncode, 4)

    def test_run_bad_config(self):
        path = self.tmp / 'bad.cfg'
        path.write_text('tau_cache = -1\n', encoding='utf-8')
        with self.assertRaises(CommandError) as ctx:
            self.call('run', config=str(path))
        self.assertEqual(ctx.exception.returncode, 2)

    def test_ablate_table(self):
        config = self.write_config(**SMALL)
        output = self.call('ablate', config=config, predictors=self.predictors_file(), seeds='0-1',
                           out=str(self.tmp / 'ablation.tsv'))
        lines = output.splitlines()
        self.assertTrue(lines[0].startswith('preset\tmean_rel_l2'))
        self.assertEqual([line.split('\t')[0] for line in lines[1:]], list(PRESETS))
        self.assertTrue(all(line.endswith('\t2') for line in lines[1:]))
        self.assertEqual((self.tmp / 'ablation.tsv').read_text(encoding='utf-8'), output)
