"""
Pilote de débruitage du modèle jouet

Trajectoire : x_{t+1} = x_t − η·(h_t − x_t), où h_t est la sortie du dernier
bloc ; les lignes du préfixe texte sont remises au plongement du prompt à
chaque pas.

- run_reference : trajectoire pleine précision, entrées/sorties par bloc
  conservées (et optionnellement écrites en QDT1)
- run_quantized : même trajectoire avec DMPQ + TDC + PDR, une ligne de trace
  par décision
- execute_run : référence + exécution quantifiée + RunReport
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional

import numpy as np

from analytics.reports import RunReport, summarize, write_report
from analytics.trace import TraceRecord, write_trace
from core.config import EngineConfig
from core.exceptions import ConfigError, NumericBlowupError
from core.metrics import rel_l1, rel_l2
from core.tensors import write_tensor
from core.utils import PathLike

from .dmpq import (
    LayerPredictor,
    PredictorKey,
    RouteReason,
    RoutingDecision,
    require_predictors,
    resolve_thresholds,
    route,
)
from .kernels import Precision, PreparedWeights
from .pdr import PurityConfig, purify_route
from .tdc import CacheDecision, CacheState, TdcConfig, apply
from .toy_model import LAYER_IDS, Schedule, ToyDiT, ToyModelSpec

logger = logging.getLogger(__name__)

BLOWUP_FACTOR = 1e6

BlockRunner = Callable[[int, int, np.ndarray, np.ndarray], np.ndarray]


@dataclass
class ReferenceRun:
    """Trajectoire pleine précision et tenseurs par (pas, bloc)"""
    seed: int
    states: np.ndarray          # (T + 1, S, D)
    block_inputs: np.ndarray    # (T, L, S, D)
    block_outputs: np.ndarray   # (T, L, S, D)

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    @property
    def block_deltas(self) -> np.ndarray:
        return self.block_outputs - self.block_inputs

    @property
    def n_timesteps(self) -> int:
        return self.block_inputs.shape[0]


@dataclass
class QuantizedRun:
    seed: int
    final: np.ndarray
    records: List[TraceRecord] = field(default_factory=list)


# =============================================================================
# TRAJECTOIRE
# =============================================================================

def initial_state(model: ToyDiT, seed: int) -> np.ndarray:
    text, noise = model.prompt(seed)
    return np.concatenate([text, noise], axis=0)


def advance(x: np.ndarray, h: np.ndarray, eta: float, text: np.ndarray) -> np.ndarray:
    x_next = x - eta * (h - x)
    x_next[:text.shape[0]] = text
    return x_next


def _check_blowup(x: np.ndarray, initial_norm: float, t: int) -> None:
    norm = float(np.linalg.norm(x))
    if not math.isfinite(norm) or norm > BLOWUP_FACTOR * initial_norm:
        raise NumericBlowupError(
            f"trajectory norm grew from {initial_norm:.3g} to {norm:.3g} at timestep {t}; "
            f"reduce eta or the output gains"
        )


def denoise(model: ToyDiT, schedule: Schedule, seed: int, block_runner: BlockRunner,
            on_block: Optional[Callable[[int, int, np.ndarray, np.ndarray], None]] = None,
            ) -> List[np.ndarray]:
    """Boucle séquentielle sur les pas puis sur les blocs ; retourne les états x_0..x_T"""
    x = initial_state(model, seed)
    text = x[:model.spec.text_len].copy()
    initial_norm = float(np.linalg.norm(x)) or 1.0
    states = [x]
    for t in range(schedule.n_timesteps):
        t_embed = model.timestep_embedding(t, schedule.n_timesteps)
        h = x
        for block_id in range(model.spec.n_blocks):
            x_in = h
            h = block_runner(t, block_id, x_in, t_embed)
            if on_block is not None:
                on_block(t, block_id, x_in, h)
        x = advance(x, h, schedule.eta, text)
        _check_blowup(x, initial_norm, t)
        states.append(x)
    return states


def run_reference(model: ToyDiT, schedule: Schedule, seed: int,
                  dump_dir: Optional[PathLike] = None) -> ReferenceRun:
    spec = model.spec
    shape = (schedule.n_timesteps, spec.n_blocks, spec.seq_len, spec.hidden_dim)
    inputs = np.empty(shape, dtype=model.dtype)
    outputs = np.empty(shape, dtype=model.dtype)

    def runner(t, block_id, x_in, t_embed):
        return model.block_forward(block_id, x_in, t_embed)

    def keep(t, block_id, x_in, x_out):
        inputs[t, block_id] = x_in
        outputs[t, block_id] = x_out

    states = denoise(model, schedule, seed, runner, keep)
    run = ReferenceRun(seed=seed, states=np.stack(states), block_inputs=inputs, block_outputs=outputs)
    if dump_dir is not None:
        dump_reference(run, dump_dir)
    logger.debug(f"Référence calculée: graine {seed}, {schedule.n_timesteps} pas")
    return run


def dump_reference(run: ReferenceRun, dump_dir: PathLike) -> None:
    """step_{t}/block_{l}/{in,out,delta}.qdt"""
    root = Path(dump_dir)
    n_steps, n_blocks = run.block_inputs.shape[:2]
    for t in range(n_steps):
        for block_id in range(n_blocks):
            folder = root / f"step_{t}" / f"block_{block_id}"
            write_tensor(folder / 'in.qdt', run.block_inputs[t, block_id])
            write_tensor(folder / 'out.qdt', run.block_outputs[t, block_id])
            write_tensor(folder / 'delta.qdt', run.block_outputs[t, block_id] - run.block_inputs[t, block_id])
    logger.info(f"Tenseurs de référence écrits sous {root}")


# =============================================================================
# EXÉCUTION QUANTIFIÉE
# =============================================================================

class QuantizedPipeline:
    """Trajectoire routée : DMPQ par couche, TDC par bloc, PDR au rafraîchissement"""

    def __init__(self, model: ToyDiT, config: EngineConfig,
                 predictors: Optional[Iterable[LayerPredictor]] = None,
                 weights: Optional[PreparedWeights] = None):
        self.model = model
        self.config = config
        self.schedule = Schedule.from_config(config)
        self.tdc = TdcConfig.from_config(config)
        self.purity = PurityConfig.from_config(config)
        self.weights = weights or PreparedWeights(model, config)
        self.predictors: Dict[PredictorKey, LayerPredictor] = {}
        if config.quant_mode == 'dmpq':
            self.predictors = resolve_thresholds(predictors or (), config)
            require_predictors(self.predictors, model.layer_keys)

    def _base_decision(self, block_id: int, layer_id: str, gamma: Optional[float]) -> RoutingDecision:
        mode = self.config.quant_mode
        if mode == 'identity':
            return RoutingDecision(layer_id, Precision.IDENTITY, RouteReason.FIXED)
        if mode == 'fp16':
            return RoutingDecision(layer_id, Precision.FP16, RouteReason.FIXED)
        if gamma is None:
            return RoutingDecision(layer_id, Precision.INT8, RouteReason.NO_HISTORY)
        return route(gamma, self.predictors[(block_id, layer_id)])

    def _noise_fn(self, seed: int, t: int, block_id: int):
        std = self.config.cache_noise_std
        if std <= 0:
            return None

        def draw(x_in: np.ndarray) -> np.ndarray:
            rng = np.random.default_rng([seed, block_id, t])
            return rng.standard_normal(x_in.shape) * std
        return draw

    def run(self, seed: Optional[int] = None) -> QuantizedRun:
        seed = self.config.seed if seed is None else seed
        n_blocks = self.model.spec.n_blocks
        states = [CacheState(block_id=b) for b in range(n_blocks)]
        previous: Dict[int, tuple] = {}
        records: List[TraceRecord] = []
        routed = self.config.quant_mode == 'dmpq'

        def runner(t, block_id, x_in, t_embed):
            gamma = None
            if block_id in previous:
                prev_in, prev_out = previous[block_id]
                gamma = rel_l1(prev_in, prev_out)
            state = states[block_id]
            skipped_prev = state.last_state is CacheDecision.SKIP
            layer_rows: List[TraceRecord] = []

            def linear(b, layer_id, act):
                decision = self._base_decision(b, layer_id, gamma)
                if routed:
                    decision = purify_route(decision, act, skipped_prev, self.purity)
                y = self.weights.linear(b, layer_id, act, decision.precision)
                predictor = self.predictors.get((b, layer_id))
                e_rel_pred = None
                if predictor is not None and gamma is not None:
                    e_rel_pred = max(predictor.predict(gamma), 0.0)
                d_out = y.shape[-1]
                layer_rows.append(TraceRecord(
                    timestep=t, block_id=b, layer_id=layer_id, decision='compute',
                    format=decision.precision.value, gamma_prev=gamma, e_rel_pred=e_rel_pred,
                    r_outlier=decision.r_outlier, reason=decision.reason.value,
                    elems=int(act.size), bits=decision.precision.bits,
                    macs=int(act.size * d_out),
                ))
                return y

            def block_fn(x):
                return self.model.block_forward(block_id, x, t_embed, linear)

            x_out, states[block_id], record = apply(
                state, t, x_in, block_fn, self.tdc, self._noise_fn(seed, t, block_id),
            )
            extra = {}
            if record.decision == CacheDecision.SKIP.value:
                elems, macs = self._block_cost(x_in)
                extra = dict(elems=elems, bits=0, macs=macs)
            records.append(replace(record, gamma_prev=gamma, **extra))
            records.extend(layer_rows)
            previous[block_id] = (x_in, x_out)
            return x_out

        states_x = denoise(self.model, self.schedule, seed, runner)
        return QuantizedRun(seed=seed, final=states_x[-1], records=records)

    def _block_cost(self, x_in: np.ndarray):
        """(éléments d'activation, MAC) des six couches d'un bloc"""
        rows = int(np.prod(x_in.shape[:-1]))
        elems = 0
        macs = 0
        for layer_id in LAYER_IDS:
            d_in, d_out = self.model.spec.layer_shape(layer_id)
            elems += rows * d_in
            macs += rows * d_in * d_out
        return elems, macs


def run_quantized(model: ToyDiT, config: EngineConfig,
                  predictors: Optional[Iterable[LayerPredictor]] = None,
                  seed: Optional[int] = None, weights: Optional[PreparedWeights] = None) -> QuantizedRun:
    if config.n_timesteps < 3:
        raise ConfigError("run requires >= 3 timesteps")
    pipeline = QuantizedPipeline(model, config, predictors, weights)
    return pipeline.run(seed)


# =============================================================================
# RAPPORT
# =============================================================================

def build_report(config: EngineConfig, reference: ReferenceRun, result: QuantizedRun,
                 weights: PreparedWeights) -> RunReport:
    return RunReport(
        config_text=config.to_text(),
        summary=summarize(result.records),
        rel_l2=rel_l2(reference.final, result.final),
        weight_memory_ratio=weights.memory_ratio(),
        records=result.records,
    )


def execute_run(config: EngineConfig,
                predictors: Optional[Iterable[LayerPredictor]] = None,
                out_dir: Optional[PathLike] = None, model: Optional[ToyDiT] = None) -> RunReport:
    """Référence + exécution quantifiée ; écrit report.txt et trace.tsv si out_dir"""
    model = model or ToyDiT(ToyModelSpec.from_config(config))
    schedule = Schedule.from_config(config)
    weights = PreparedWeights(model, config)
    reference = run_reference(model, schedule, config.seed)
    result = run_quantized(model, config, predictors, weights=weights)
    report = build_report(config, reference, result, weights)
    if out_dir is not None:
        out = Path(out_dir)
        write_report(out / 'report.txt', report)
        write_trace(out / 'trace.tsv', report.records)
    logger.info(f"Exécution terminée (graine {config.seed}): rel_l2={report.rel_l2:.6g}, "
                f"sauts={report.summary.skip_fraction:.3f}")
    return report
