"""
Redondance temporelle des deltas de blocs

Compare Δ_t = Y_t − X_t à Δ_{t−1} pour chaque bloc d'une trajectoire de
référence. Une trajectoire lisse (dissimilarité cosinus médiane < 0.1 sur la
seconde moitié) est la condition pour que le cache des deltas serve.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable, List

import numpy as np

from core.exceptions import ZeroNormError
from core.metrics import cosine_dissim, rel_l2
from core.utils import format_float

logger = logging.getLogger(__name__)

SIMILARITY_HEADER = 'timestep\tblock_id\tcosine_sim\trel_l2_diff'


@dataclass(frozen=True)
class DeltaSimilarity:
    timestep: int
    block_id: int
    cosine_sim: float
    rel_l2_diff: float


def delta_similarity(reference) -> List[DeltaSimilarity]:
    """Une ligne par (t ≥ 1, bloc) ; NaN lorsqu'un delta est de norme nulle"""
    deltas = reference.block_deltas.astype(np.float64)
    rows = []
    for t in range(1, deltas.shape[0]):
        for block_id in range(deltas.shape[1]):
            current, previous = deltas[t, block_id], deltas[t - 1, block_id]
            try:
                cosine = 1.0 - cosine_dissim(current, previous)
                diff = rel_l2(previous, current)
            except ZeroNormError:
                cosine, diff = math.nan, math.nan
            rows.append(DeltaSimilarity(t, block_id, cosine, diff))
    return rows


def smoothness_statistic(reference) -> float:
    """Médiane de cosine_dissim(Δ_t, Δ_{t−1}) sur les blocs, pour 2t ≥ T"""
    n_steps = reference.n_timesteps
    values = [
        1.0 - row.cosine_sim for row in delta_similarity(reference)
        if 2 * row.timestep >= n_steps and not math.isnan(row.cosine_sim)
    ]
    if not values:
        logger.warning("Aucune paire de deltas exploitable pour la statistique de lissage")
        return math.nan
    return float(np.median(values))


def format_similarity(rows: Iterable[DeltaSimilarity]) -> str:
    lines = [SIMILARITY_HEADER]
    for row in rows:
        lines.append(f"{row.timestep}\t{row.block_id}\t{format_float(row.cosine_sim)}\t"
                     f"{format_float(row.rel_l2_diff)}")
    return '\n'.join(lines) + '\n'
