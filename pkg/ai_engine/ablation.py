"""
Étude d'ablation : chaque composant activé tour à tour

    w4a4      tout en NVFP4 (hors t = 0), sans TDC ni PDR
    w4a8      tout en INT8, sans TDC ni PDR
    dmpq      routage DMPQ seul
    tdc       W16A16 + cache des deltas
    dmpq_tdc  DMPQ + TDC, sans rafraîchissement purifié
    full      DMPQ + TDC + PDR

La référence pleine précision de chaque graine est calculée une seule fois et
partagée par tous les préréglages.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from analytics.reports import summarize
from core.config import EngineConfig
from core.exceptions import ConfigError
from core.metrics import rel_l2
from core.utils import atomic_write_text, format_float, PathLike

from .dmpq import LayerPredictor
from .kernels import PreparedWeights
from .pipeline import run_quantized, run_reference
from .toy_model import Schedule, ToyDiT, ToyModelSpec

logger = logging.getLogger(__name__)

PRESETS: Dict[str, Dict[str, object]] = {
    'w4a4': dict(quant_mode='dmpq', tau_gamma_override=math.inf, tau_cache=0.0, pdr_enabled=False),
    'w4a8': dict(quant_mode='dmpq', tau_gamma_override=-1.0, tau_cache=0.0, pdr_enabled=False),
    'dmpq': dict(quant_mode='dmpq', tau_cache=0.0, pdr_enabled=False),
    'tdc': dict(quant_mode='fp16'),
    'dmpq_tdc': dict(quant_mode='dmpq', pdr_enabled=False),
    'full': dict(quant_mode='dmpq'),
}

ABLATION_HEADER = 'preset\tmean_rel_l2\tskip_fraction\tavg_bits\tcost_ratio\tseeds'


@dataclass(frozen=True)
class AblationRow:
    preset: str
    seeds: Sequence[int]
    rel_l2: Sequence[float]
    skip_fraction: float
    avg_bits: float
    cost_ratio: float

    @property
    def mean_rel_l2(self) -> float:
        return float(np.mean(self.rel_l2))


def preset_config(config: EngineConfig, preset: str) -> EngineConfig:
    if preset not in PRESETS:
        raise ConfigError(f"unknown ablation preset '{preset}' (expected {', '.join(PRESETS)})")
    return config.with_overrides(**PRESETS[preset])


def run_ablation(config: EngineConfig, predictors: Optional[Iterable[LayerPredictor]] = None,
                 seeds: Optional[Sequence[int]] = None, presets: Optional[Sequence[str]] = None,
                 max_workers: int = 1, model: Optional[ToyDiT] = None) -> List[AblationRow]:
    if config.n_timesteps < 3:
        raise ConfigError("ablation requires >= 3 timesteps")
    seeds = list(config.ablation_seeds if seeds is None else seeds)
    if not seeds:
        raise ConfigError("ablation requires at least one seed")
    presets = list(PRESETS if presets is None else presets)
    configs = {name: preset_config(config, name) for name in presets}
    predictors = list(predictors or ())

    model = model or ToyDiT(ToyModelSpec.from_config(config))
    schedule = Schedule.from_config(config)
    weights = PreparedWeights(model, config)

    def per_seed(seed: int) -> Dict[str, tuple]:
        reference = run_reference(model, schedule, seed)
        results = {}
        for name, preset in configs.items():
            run = run_quantized(model, preset, predictors, seed=seed, weights=weights)
            results[name] = (rel_l2(reference.final, run.final), summarize(run.records))
        logger.info(f"Ablation graine {seed} terminée")
        return results

    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as pool:
        outcomes = list(pool.map(per_seed, seeds))

    rows = []
    for name in presets:
        errors = [outcome[name][0] for outcome in outcomes]
        summaries = [outcome[name][1] for outcome in outcomes]
        rows.append(AblationRow(
            preset=name,
            seeds=tuple(seeds),
            rel_l2=tuple(errors),
            skip_fraction=float(np.mean([s.skip_fraction for s in summaries])),
            avg_bits=float(np.mean([s.avg_bits for s in summaries])),
            cost_ratio=float(np.mean([s.cost_ratio for s in summaries])),
        ))
    return rows


def sign_test_p(wins: int, n: int) -> float:
    """p-valeur unilatérale du test du signe : P(X ≥ wins), X ~ B(n, 1/2)"""
    if n <= 0:
        return 1.0
    return sum(math.comb(n, k) for k in range(wins, n + 1)) / 2 ** n


def paired_wins(better: AblationRow, worse: AblationRow) -> int:
    """Nombre de graines où `better` a une erreur strictement plus faible"""
    return sum(1 for a, b in zip(better.rel_l2, worse.rel_l2) if a < b)


# =============================================================================
# RENDU
# =============================================================================

def format_ablation(rows: Iterable[AblationRow]) -> str:
    lines = [ABLATION_HEADER]
    for row in rows:
        lines.append('\t'.join([
            row.preset,
            format_float(row.mean_rel_l2),
            format_float(row.skip_fraction),
            format_float(row.avg_bits),
            format_float(row.cost_ratio),
            str(len(row.seeds)),
        ]))
    return '\n'.join(lines) + '\n'


def write_ablation(path: PathLike, rows: Iterable[AblationRow]) -> None:
    atomic_write_text(path, format_ablation(rows))
    logger.info(f"Table d'ablation écrite dans {path}")
