"""
Cache temporel des deltas (TDC)

Un bloc résiduel X_out = X_in + Δ peut être sauté : sa sortie est alors
approchée par X_in + Δ_{t_p}, le delta du dernier pas calculé t_p. La
décision repose sur un budget d'erreur accumulée :

    E_{t_p}  = D(Δ_{t−1}, Δ_{t−2})            mesurée au pas calculé
    E_acc    ← E_{t_p}                         après un pas calculé
    E_acc    ← E_acc + E_{t_p} + ρ             après un pas sauté
    Skip  ⇔  E_acc ≤ τ  et  t − t_p ≤ N_max

Δ_{t−1} et Δ_{t−2} sont les deux derniers deltas effectivement calculés.
L'état est immuable : chaque opération retourne un nouvel état.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Optional, Tuple

import numpy as np

from analytics.trace import TraceRecord
from core.config import EngineConfig
from core.exceptions import ShapeMismatchError, ZeroNormError
from core.metrics import MetricKind, cosine_dissim, distance
from core.quant_formats import QuantFormat, fake_quantize

logger = logging.getLogger(__name__)


class CacheDecision(str, Enum):
    COMPUTE = 'compute'
    SKIP = 'skip'


@dataclass(frozen=True)
class TdcConfig:
    rho: float = 0.001
    tau: float = 0.003
    n_max: int = 2
    metric: MetricKind = MetricKind.COSINE_DISSIM
    cache_compress: str = 'off'

    @classmethod
    def from_config(cls, config: EngineConfig) -> 'TdcConfig':
        return cls(
            rho=config.rho,
            tau=config.tau_cache,
            n_max=config.n_max,
            metric=MetricKind(config.tdc_metric),
            cache_compress=config.cache_compress,
        )

    @property
    def enabled(self) -> bool:
        # τ = 0 désactive le cache : aucun saut, pas même pour E_acc == 0
        return self.tau > 0


@dataclass(frozen=True)
class CacheState:
    block_id: int
    delta_prev: Optional[np.ndarray] = None
    delta_prev2: Optional[np.ndarray] = None
    cached_delta: Optional[np.ndarray] = None
    t_p: Optional[int] = None
    e_tp: float = math.inf
    e_acc: float = math.inf
    last_state: Optional[CacheDecision] = None
    skip_run: int = 0

    def gap(self, t: int) -> Optional[int]:
        return None if self.t_p is None else t - self.t_p


def prediction_error(d1: np.ndarray, d2: np.ndarray,
                     metric: MetricKind = MetricKind.COSINE_DISSIM) -> float:
    """D(Δ_{t−1}, Δ_{t−2}) ; pour les distances relatives, Δ_{t−1} est la référence.

    Un delta de norme nulle donne une erreur infinie, ce qui force le calcul.
    """
    try:
        if MetricKind(metric) is MetricKind.COSINE_DISSIM:
            return cosine_dissim(d1, d2)
        return distance(metric, d1, d2)
    except ZeroNormError:
        logger.warning("Delta de norme nulle : erreur de prédiction maximale, calcul forcé")
        return math.inf


def update_accumulator(state: CacheState, cfg: TdcConfig) -> CacheState:
    if state.last_state is CacheDecision.COMPUTE:
        return replace(state, e_acc=state.e_tp)
    if state.last_state is CacheDecision.SKIP:
        return replace(state, e_acc=(state.e_acc + state.e_tp) + cfg.rho)
    return state


def decide(state: CacheState, t: int, cfg: TdcConfig) -> CacheDecision:
    return decide_with_reason(state, t, cfg)[0]


def decide_with_reason(state: CacheState, t: int, cfg: TdcConfig) -> Tuple[CacheDecision, str]:
    if not cfg.enabled:
        return CacheDecision.COMPUTE, 'cache_off'
    if t < 2 or state.t_p is None or state.cached_delta is None:
        return CacheDecision.COMPUTE, 'warmup'
    if t - state.t_p > cfg.n_max:
        return CacheDecision.COMPUTE, 'max_gap'
    if state.e_acc <= cfg.tau:
        return CacheDecision.SKIP, 'budget'
    return CacheDecision.COMPUTE, 'budget'


def record_compute(state: CacheState, t: int, x_in: np.ndarray, x_out: np.ndarray,
                   cfg: TdcConfig, noise: Optional[np.ndarray] = None) -> CacheState:
    """Mémorise le delta calculé à t (t devient t_p) et mesure E_{t_p}.

    `noise` ne perturbe que le delta réutilisé lors des sauts, pas l'historique.
    """
    delta = x_out - x_in
    if cfg.cache_compress == 'nvfp4':
        delta = fake_quantize(delta, QuantFormat.NVFP4)
    e_tp = math.inf
    if state.delta_prev is not None:
        e_tp = prediction_error(delta, state.delta_prev, cfg.metric)
    cached = delta if noise is None else delta + noise.astype(delta.dtype)
    return replace(
        state,
        delta_prev=delta,
        delta_prev2=state.delta_prev,
        cached_delta=cached,
        t_p=t,
        e_tp=e_tp,
        last_state=CacheDecision.COMPUTE,
        skip_run=0,
    )


def record_skip(state: CacheState) -> CacheState:
    return replace(state, last_state=CacheDecision.SKIP, skip_run=state.skip_run + 1)


def apply(state: CacheState, t: int, x_in: np.ndarray,
          block_fn: Callable[[np.ndarray], np.ndarray], cfg: TdcConfig,
          noise_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None,
          ) -> Tuple[np.ndarray, CacheState, TraceRecord]:
    """Un pas de cache pour un bloc : décision, sortie, nouvel état, ligne de trace"""
    decision, reason = decide_with_reason(state, t, cfg)
    gap = state.gap(t)
    e_acc = state.e_acc if state.t_p is not None else None

    if decision is CacheDecision.SKIP:
        x_out = x_in + state.cached_delta
        state = record_skip(state)
    else:
        x_out = block_fn(x_in)
        if x_out.shape != x_in.shape:
            raise ShapeMismatchError(f"block output shape {x_out.shape} != input shape {x_in.shape}")
        noise = noise_fn(x_in) if noise_fn is not None else None
        state = record_compute(state, t, x_in, x_out, cfg, noise)
    state = update_accumulator(state, cfg)

    record = TraceRecord(
        timestep=t,
        block_id=state.block_id,
        decision=decision.value,
        e_acc=e_acc,
        e_tp=state.e_tp,
        gap=gap,
        reason=reason,
    )
    logger.debug(f"t={t} bloc {state.block_id}: {decision.value} ({reason})")
    return x_out, state, record
