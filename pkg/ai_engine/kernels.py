"""
Couches linéaires simulées en précision mixte

Les poids sont préparés une fois : rotation de Hadamard compensatoire (lignes
complétées par des zéros jusqu'à un multiple de B), quantification NVFP4
hors-ligne par blocs de 16 le long des canaux d'entrée, puis copie INT8
symétrique obtenue à partir des poids NVFP4 déquantifiés (cast à la volée).

Chemin activation :
    NVFP4 / INT8 : pad → FHT (optionnelle) → fake-quant → produit avec le poids résident
    FP16         : arrondi binary16 de l'activation et du poids d'origine
    IDENTITY     : act @ W, strictement le calcul de référence
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict

import numpy as np

from core.config import EngineConfig
from core.hadamard import HadamardConfig, fht_blocks, pad_last, rotate_weight
from core.quant_formats import QuantFormat, fake_quantize, weight_memory_bits

from .toy_model import LayerKey, ToyDiT

logger = logging.getLogger(__name__)


class Precision(str, Enum):
    """Précision d'activation choisie pour une couche à un pas donné"""
    NVFP4 = 'nvfp4'
    INT8 = 'int8'
    FP16 = 'fp16_passthrough'
    IDENTITY = 'identity'

    @property
    def bits(self) -> int:
        return PRECISION_BITS[self]


PRECISION_BITS = {
    Precision.NVFP4: 4,
    Precision.INT8: 8,
    Precision.FP16: 16,
    Precision.IDENTITY: 32,
}

# Coût relatif d'une MAC, FP16 = 1
PRECISION_COST = {
    'nvfp4': 0.25,
    'int8': 0.5,
    'fp16_passthrough': 1.0,
    'identity': 1.0,
}


@dataclass(frozen=True)
class LayerWeights:
    original: np.ndarray
    rotated: np.ndarray
    nvfp4: np.ndarray
    int8: np.ndarray
    fp16: np.ndarray


def _nvfp4_along_inputs(weight: np.ndarray) -> np.ndarray:
    """NVFP4 d'un poids [d_in, d_out] avec des blocs le long de d_in"""
    return np.ascontiguousarray(fake_quantize(np.ascontiguousarray(weight.T), QuantFormat.NVFP4).T)


class PreparedWeights:
    """Poids résidents d'un modèle pour une configuration de quantification"""

    def __init__(self, model: ToyDiT, config: EngineConfig):
        self.model = model
        self.hadamard_enabled = config.hadamard_enabled
        self.fp16_hadamard = config.fp16_hadamard
        self.hadamard = HadamardConfig(block_size=config.hadamard_block)
        self.int8_format = (QuantFormat.INT8_SYM if config.activation_int8_mode == 'sym'
                            else QuantFormat.INT8_ASYM)
        self.layers: Dict[LayerKey, LayerWeights] = {
            key: self._prepare(weight) for key, weight in model.weights.items()
        }
        logger.debug(f"Poids préparés pour {len(self.layers)} couches")

    def _prepare(self, weight: np.ndarray) -> LayerWeights:
        block = self.hadamard.block_size
        padded, _ = pad_last(weight.T, block)
        padded = np.ascontiguousarray(padded.T)
        rotated = rotate_weight(padded, self.hadamard) if self.hadamard_enabled else padded
        nvfp4 = _nvfp4_along_inputs(rotated)
        int8 = fake_quantize(nvfp4, QuantFormat.INT8_SYM)
        fp16_source = rotated if self.fp16_hadamard else weight
        fp16 = fp16_source.astype(np.float16).astype(weight.dtype)
        return LayerWeights(original=weight, rotated=rotated, nvfp4=nvfp4, int8=int8, fp16=fp16)

    def smooth(self, act: np.ndarray) -> np.ndarray:
        """Complète la dernière dimension à un multiple de B puis applique la FHT"""
        padded, _ = pad_last(act, self.hadamard.block_size)
        if self.hadamard_enabled:
            return fht_blocks(padded, self.hadamard)
        return padded

    def linear(self, block_id: int, layer_id: str, act: np.ndarray, precision: Precision) -> np.ndarray:
        weights = self.layers[(block_id, layer_id)]
        if precision is Precision.IDENTITY:
            return act @ weights.original
        if precision is Precision.FP16:
            source = act
            if self.fp16_hadamard:
                source = self.smooth(act)
            return source.astype(np.float16).astype(act.dtype) @ weights.fp16

        smoothed = self.smooth(act)
        if precision is Precision.NVFP4:
            return fake_quantize(smoothed, QuantFormat.NVFP4) @ weights.nvfp4
        quantized = fake_quantize(smoothed, self.int8_format, block_size=self.hadamard.block_size)
        return quantized @ weights.int8

    def shadow_linear(self, block_id: int, layer_id: str, act: np.ndarray,
                      quantize_activation: bool, quantize_weight: bool) -> np.ndarray:
        """Couche quantifiée seule pour la calibration (NVFP4 activation et/ou poids)"""
        weights = self.layers[(block_id, layer_id)]
        if not quantize_activation and not quantize_weight:
            return act @ weights.original
        smoothed = self.smooth(act)
        if quantize_activation:
            smoothed = fake_quantize(smoothed, QuantFormat.NVFP4)
        weight = weights.nvfp4 if quantize_weight else weights.rotated
        return smoothed @ weight

    def memory_ratio(self) -> float:
        """Mémoire FP16 des poids / mémoire résidente NVFP4"""
        fp16_bits = sum(16 * w.original.size for w in self.layers.values())
        resident_bits = sum(weight_memory_bits(w.original.size) for w in self.layers.values())
        return fp16_bits / resident_bits
