"""
Calibration hors-ligne des prédicteurs DMPQ

Pour chaque graine : trajectoire de référence, puis pour chaque
(pas t ≥ 1, bloc, couche) ré-exécution du bloc avec cette seule couche
quantifiée en NVFP4 :

    E_rel     = rel_l2(O, O_q)
    Γ_{t−1}   = rel_l1(X_{t−1}, Y_{t−1}) du bloc englobant

Les graines sont indépendantes et traitées en parallèle ; les paires sont
rassemblées dans l'ordre des graines.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

from core.config import EngineConfig
from core.exceptions import ConfigError
from core.metrics import rel_l1, rel_l2

from .dmpq import CalibPair, LayerPredictor, fit_predictors
from .kernels import PreparedWeights
from .pipeline import ReferenceRun, run_reference
from .toy_model import LAYER_IDS, Schedule, ToyDiT, ToyModelSpec

logger = logging.getLogger(__name__)

# (block_id, layer_id, timestep, gamma_prev) -> e_rel
ErrorFn = Callable[[int, str, int, float], float]

_QUANT_TARGETS = {
    'both': (True, True),
    'activation': (True, False),
    'weight': (False, True),
    'none': (False, False),
}


@dataclass(frozen=True)
class CalibrationResult:
    predictors: List[LayerPredictor]
    pairs: List[CalibPair]


def collect_pairs(model: ToyDiT, reference: ReferenceRun, weights: Optional[PreparedWeights] = None,
                  quant_target: str = 'both', error_fn: Optional[ErrorFn] = None) -> List[CalibPair]:
    """Paires (Γ_{t−1}, E_rel) décalées dans le temps d'une trajectoire de référence"""
    n_steps = reference.n_timesteps
    if n_steps < 2:
        raise ConfigError("calibration requires >= 2 timesteps")
    if quant_target not in _QUANT_TARGETS:
        raise ConfigError(f"unknown calib_quant_target '{quant_target}'")
    quantize_act, quantize_weight = _QUANT_TARGETS[quant_target]
    if error_fn is None and weights is None:
        raise ConfigError("shadow quantization needs prepared weights")

    pairs: List[CalibPair] = []
    for t in range(1, n_steps):
        t_embed = model.timestep_embedding(t, n_steps)
        for block_id in range(model.spec.n_blocks):
            gamma_prev = rel_l1(reference.block_inputs[t - 1, block_id],
                                reference.block_outputs[t - 1, block_id])
            x_in = reference.block_inputs[t, block_id]
            output = reference.block_outputs[t, block_id]
            for layer_id in LAYER_IDS:
                if error_fn is not None:
                    e_rel = float(error_fn(block_id, layer_id, t, gamma_prev))
                else:
                    e_rel = rel_l2(output, _shadow_forward(model, weights, block_id, layer_id,
                                                           x_in, t_embed, quantize_act, quantize_weight))
                pairs.append(CalibPair(block_id, layer_id, t, gamma_prev, e_rel))
    return pairs


def _shadow_forward(model, weights, block_id, target, x_in, t_embed, quantize_act, quantize_weight):
    def linear(b, layer_id, act):
        if layer_id == target:
            return weights.shadow_linear(b, layer_id, act, quantize_act, quantize_weight)
        return model.linear(b, layer_id, act)
    return model.block_forward(block_id, x_in, t_embed, linear)


def run_calibration(config: EngineConfig, seeds: Optional[Sequence[int]] = None,
                    error_fn: Optional[ErrorFn] = None, max_workers: int = 1,
                    model: Optional[ToyDiT] = None) -> CalibrationResult:
    """Collecte les paires pour chaque graine puis ajuste un prédicteur par couche"""
    if config.n_timesteps < 2:
        raise ConfigError("calibration requires >= 2 timesteps")
    seeds = list(config.calib_seeds if seeds is None else seeds)
    if not seeds:
        raise ConfigError("calibration requires at least one seed")

    model = model or ToyDiT(ToyModelSpec.from_config(config))
    schedule = Schedule.from_config(config)
    weights = PreparedWeights(model, config) if error_fn is None else None

    def collect(seed: int) -> List[CalibPair]:
        reference = run_reference(model, schedule, seed)
        pairs = collect_pairs(model, reference, weights, config.calib_quant_target, error_fn)
        logger.info(f"Calibration graine {seed}: {len(pairs)} paires")
        return pairs

    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as pool:
        per_seed = list(pool.map(collect, seeds))

    pairs = [pair for seed_pairs in per_seed for pair in seed_pairs]
    predictors = fit_predictors(pairs, config.tau_rel, config.eps_slope)
    return CalibrationResult(predictors=predictors, pairs=pairs)
