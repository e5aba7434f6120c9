"""
Rafraîchissement purifié du cache (PDR)

Le delta écrit dans le cache est réutilisé N fois pendant une série de sauts :
son bruit de quantification est amplifié N fois. Deux règles, par priorité :

1. R_outlier(X) = max|X| / mean|X| > τ_outlier  → couche en FP16 (outlier_fallback)
2. bloc sauté au pas précédent (Γ_{t−1} absent)  → toutes les couches en INT8
   (post_skip_fallback), pour ce seul pas
3. sinon la décision DMPQ de base
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from core.config import EngineConfig

from .dmpq import RouteReason, RoutingDecision
from .kernels import Precision

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PurityConfig:
    tau_outlier: float = 25.0
    sample_stride: int = 1
    post_skip_format: Precision = Precision.INT8
    enabled: bool = True

    @classmethod
    def from_config(cls, config: EngineConfig) -> 'PurityConfig':
        post_skip = Precision.INT8 if config.post_skip_format == 'int8' else Precision.FP16
        return cls(
            tau_outlier=config.tau_outlier,
            sample_stride=config.sample_stride,
            post_skip_format=post_skip,
            enabled=config.pdr_enabled,
        )


def outlier_ratio(x, stride: int = 1) -> float:
    """max|x| / mean|x| sur un élément sur `stride` (ordre row-major) ; 1 si tout est nul"""
    sample = np.abs(np.asarray(x, dtype=np.float64).ravel()[::stride])
    if sample.size == 0:
        return 1.0
    mean = sample.mean()
    if mean == 0.0:
        return 1.0
    return float(sample.max() / mean)


def purify_route(base: RoutingDecision, x, block_was_skipped_prev: bool,
                 cfg: PurityConfig) -> RoutingDecision:
    if not cfg.enabled:
        return base
    ratio = outlier_ratio(x, cfg.sample_stride)
    if ratio > cfg.tau_outlier:
        logger.debug(f"Couche {base.layer_id}: R_outlier={ratio:.2f}, repli FP16")
        return RoutingDecision(base.layer_id, Precision.FP16, RouteReason.OUTLIER, ratio)
    if block_was_skipped_prev:
        return RoutingDecision(base.layer_id, cfg.post_skip_format, RouteReason.POST_SKIP, ratio)
    return replace(base, r_outlier=ratio)
