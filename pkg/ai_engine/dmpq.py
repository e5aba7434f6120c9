"""
Quantification dynamique en précision mixte (DMPQ)

Pour chaque couche linéaire, l'erreur relative de sortie du bloc est prédite
par un modèle linéaire de Γ_{t−1} (distance L1 relative entrée/sortie du bloc
au pas précédent) :

    E_rel = α·Γ_{t−1} + β        τ_Γ = (τ_rel − β) / α

Routage en ligne : INT8 si Γ_{t−1} > τ_Γ, NVFP4 sinon (frontière incluse).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from core.config import EngineConfig
from core.exceptions import (
    ConfigError,
    DegenerateFitError,
    MissingPredictorError,
    UndefinedThresholdError,
)
from core.utils import PathLike, atomic_write_text, format_float

from .kernels import Precision

logger = logging.getLogger(__name__)

PREDICTOR_HEADER = '# block_id layer_id alpha beta tau_gamma pair_count residual_rms'

PredictorKey = Tuple[int, str]


class RouteReason(str, Enum):
    THRESHOLD = 'threshold'
    PINNED = 'pinned'
    NO_HISTORY = 'no_history'
    POST_SKIP = 'post_skip_fallback'
    OUTLIER = 'outlier_fallback'
    FIXED = 'fixed'


@dataclass(frozen=True)
class CalibPair:
    block_id: int
    layer_id: str
    timestep: int
    gamma_prev: float
    e_rel: float


@dataclass(frozen=True)
class LayerPredictor:
    """Modèle linéaire figé d'une couche ; tau_gamma None = couche épinglée INT8"""
    block_id: int
    layer_id: str
    alpha: float
    beta: float
    tau_gamma: Optional[float]
    pair_count: int = 0
    residual_rms: float = 0.0

    @property
    def key(self) -> PredictorKey:
        return self.block_id, self.layer_id

    def predict(self, gamma_prev: float) -> float:
        return self.alpha * gamma_prev + self.beta


@dataclass(frozen=True)
class RoutingDecision:
    layer_id: str
    precision: Precision
    reason: RouteReason
    r_outlier: Optional[float] = None


# =============================================================================
# AJUSTEMENT
# =============================================================================

def fit_layer(pairs: Sequence[CalibPair], tau_rel: float = 0.0025,
              eps_slope: float = 1e-8) -> LayerPredictor:
    """Moindres carrés ordinaires sur (Γ_{t−1}, E_rel) d'une seule couche"""
    if not pairs:
        raise DegenerateFitError("no calibration pairs")
    block_id, layer_id = pairs[0].block_id, pairs[0].layer_id
    where = f"block {block_id} layer {layer_id}"

    x = np.array([p.gamma_prev for p in pairs], dtype=np.float64)
    y = np.array([p.e_rel for p in pairs], dtype=np.float64)
    if x.size < 2:
        raise DegenerateFitError(f"{where}: at least 2 pairs required, got {x.size}",
                                 block_id=block_id, layer_id=layer_id)
    if np.all(x == x[0]):
        raise DegenerateFitError(f"{where}: zero gamma variance, linear fit undefined",
                                 block_id=block_id, layer_id=layer_id)

    x_mean = x.mean()
    y_mean = y.mean()
    dx = x - x_mean
    alpha = float(np.dot(dx, y - y_mean) / np.dot(dx, dx))
    beta = float(y_mean - alpha * x_mean)
    residual = y - (alpha * x + beta)
    residual_rms = float(np.sqrt(np.mean(residual * residual)))

    predictor = LayerPredictor(
        block_id=block_id, layer_id=layer_id, alpha=alpha, beta=beta, tau_gamma=None,
        pair_count=int(x.size), residual_rms=residual_rms,
    )
    try:
        tau_gamma = derive_threshold(predictor, tau_rel, eps_slope)
    except UndefinedThresholdError as e:
        logger.warning(f"Couche épinglée INT8 ({where}): {e}")
        tau_gamma = None
    return replace(predictor, tau_gamma=tau_gamma)


def derive_threshold(predictor: LayerPredictor, tau_rel: float, eps_slope: float = 1e-8) -> float:
    """τ_Γ = (τ_rel − β) / α ; pente nulle, négative ou trop faible : indéfini"""
    if not predictor.alpha > eps_slope:
        raise UndefinedThresholdError(
            f"slope {predictor.alpha!r} <= {eps_slope!r} for block {predictor.block_id} "
            f"layer {predictor.layer_id}"
        )
    return (tau_rel - predictor.beta) / predictor.alpha


def fit_predictors(pairs: Iterable[CalibPair], tau_rel: float, eps_slope: float) -> List[LayerPredictor]:
    """Regroupe les paires par couche et ajuste chaque couche indépendamment"""
    grouped: Dict[PredictorKey, List[CalibPair]] = {}
    for pair in pairs:
        grouped.setdefault((pair.block_id, pair.layer_id), []).append(pair)
    return [fit_layer(grouped[key], tau_rel, eps_slope) for key in grouped]


def resolve_thresholds(predictors: Iterable[LayerPredictor],
                       config: EngineConfig) -> Dict[PredictorKey, LayerPredictor]:
    """Applique tau_gamma_override (None = seuils dérivés par couche)"""
    override = config.tau_gamma_override
    resolved = {}
    for predictor in predictors:
        if override is not None:
            predictor = replace(predictor, tau_gamma=override)
        resolved[predictor.key] = predictor
    return resolved


# =============================================================================
# ROUTAGE
# =============================================================================

def route(gamma_prev: float, predictor: LayerPredictor) -> RoutingDecision:
    if predictor.tau_gamma is None:
        return RoutingDecision(predictor.layer_id, Precision.INT8, RouteReason.PINNED)
    if gamma_prev > predictor.tau_gamma:
        return RoutingDecision(predictor.layer_id, Precision.INT8, RouteReason.THRESHOLD)
    return RoutingDecision(predictor.layer_id, Precision.NVFP4, RouteReason.THRESHOLD)


def require_predictors(predictors: Dict[PredictorKey, LayerPredictor],
                       keys: Iterable[PredictorKey]) -> None:
    missing = [key for key in keys if key not in predictors]
    if missing:
        listed = ', '.join(f"block {b} layer {layer}" for b, layer in missing[:6])
        raise MissingPredictorError(f"missing predictors for {len(missing)} layers: {listed}")


# =============================================================================
# FICHIER DE PRÉDICTEURS
# =============================================================================

def format_predictors(predictors: Iterable[LayerPredictor]) -> str:
    lines = [PREDICTOR_HEADER]
    for p in predictors:
        tau = '-' if p.tau_gamma is None else format_float(p.tau_gamma)
        lines.append(' '.join([
            str(p.block_id), p.layer_id, format_float(p.alpha), format_float(p.beta),
            tau, str(p.pair_count), format_float(p.residual_rms),
        ]))
    return '\n'.join(lines) + '\n'


def write_predictors(path: PathLike, predictors: Iterable[LayerPredictor]) -> None:
    predictors = list(predictors)
    atomic_write_text(path, format_predictors(predictors))
    logger.info(f"{len(predictors)} prédicteurs écrits dans {path}")


def parse_predictors(text: str) -> List[LayerPredictor]:
    predictors = []
    for line_number, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith('#'):
            continue
        parts = line.split()
        if len(parts) != 7:
            raise ConfigError(f"predictor line {line_number}: expected 7 fields, got {len(parts)}")
        try:
            tau = None if parts[4] == '-' else float(parts[4])
            predictor = LayerPredictor(
                block_id=int(parts[0]), layer_id=parts[1], alpha=float(parts[2]),
                beta=float(parts[3]), tau_gamma=tau, pair_count=int(parts[5]),
                residual_rms=float(parts[6]),
            )
        except ValueError as e:
            raise ConfigError(f"predictor line {line_number}: {e}") from e
        if not all(math.isfinite(v) for v in (predictor.alpha, predictor.beta)):
            raise ConfigError(f"predictor line {line_number}: non-finite coefficients")
        predictors.append(predictor)
    return predictors


def read_predictors(path: PathLike) -> List[LayerPredictor]:
    try:
        with open(path, 'r', encoding='utf-8') as handle:
            text = handle.read()
    except OSError as e:
        raise MissingPredictorError(f"cannot read predictor file {path}: {e}") from e
    return parse_predictors(text)
