"""
Transformée de Hadamard rapide par blocs

Chaque suite contiguë de B éléments sur la dernière dimension est remplacée
par sa transformée de Walsh-Hadamard (ordre de Sylvester), en log2(B) étages
papillon. Normalisée par 1/√B, la transformée est orthogonale et involutive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .exceptions import HadamardError


def is_power_of_two(value: int) -> bool:
    return value >= 1 and (value & (value - 1)) == 0


@dataclass(frozen=True)
class HadamardConfig:
    block_size: int = 128
    normalize: bool = True

    def __post_init__(self):
        if not is_power_of_two(self.block_size):
            raise HadamardError(f"hadamard block size must be a power of two, got {self.block_size}")


def _check_aligned(x: np.ndarray, block_size: int) -> None:
    if x.ndim == 0 or x.shape[-1] % block_size != 0:
        extent = x.shape[-1] if x.ndim else 0
        raise HadamardError(
            f"last dimension {extent} is not padded to a multiple of {block_size}"
        )


def _butterfly(x: np.ndarray, block_size: int) -> np.ndarray:
    y = x.reshape(-1, block_size)
    h = 1
    while h < block_size:
        y = y.reshape(-1, block_size // (2 * h), 2, h)
        a = y[:, :, 0, :]
        b = y[:, :, 1, :]
        y = np.stack((a + b, a - b), axis=2)
        h *= 2
    return y.reshape(x.shape)


def fht_blocks(x, cfg: HadamardConfig = HadamardConfig()) -> np.ndarray:
    """Transformée directe ; conserve le dtype flottant de l'entrée"""
    x = np.asarray(x)
    _check_aligned(x, cfg.block_size)
    y = _butterfly(x, cfg.block_size)
    if cfg.normalize:
        y = y * (1.0 / math.sqrt(cfg.block_size))
    return y


def fht_inverse(x, cfg: HadamardConfig = HadamardConfig()) -> np.ndarray:
    """Inverse : identique à la directe si normalisée, sinon division par B"""
    x = np.asarray(x)
    _check_aligned(x, cfg.block_size)
    y = _butterfly(x, cfg.block_size)
    if cfg.normalize:
        return y * (1.0 / math.sqrt(cfg.block_size))
    return y * (1.0 / cfg.block_size)


def pad_last(x, multiple: int) -> Tuple[np.ndarray, int]:
    """Complète la dernière dimension par des zéros ; retourne (tableau, longueur d'origine)"""
    x = np.asarray(x)
    length = x.shape[-1]
    missing = (-length) % multiple
    if missing == 0:
        return x, length
    widths = [(0, 0)] * (x.ndim - 1) + [(0, missing)]
    return np.pad(x, widths), length


def unpad_last(x, length: int) -> np.ndarray:
    return np.asarray(x)[..., :length]


def rotate_weight(weight, cfg: HadamardConfig = HadamardConfig()) -> np.ndarray:
    """Rotation compensatoire d'un poids [d_in, d_out] le long des canaux d'entrée.

    Avec H orthogonale symétrique : (x·H)·(H·W) == x·W.
    """
    weight = np.asarray(weight)
    return fht_blocks(weight.T, cfg).T


def hadamard_matrix(block_size: int, normalize: bool = True) -> np.ndarray:
    """Matrice dense de Sylvester (oracle des tests)"""
    if not is_power_of_two(block_size):
        raise HadamardError(f"hadamard block size must be a power of two, got {block_size}")
    matrix = np.ones((1, 1))
    while matrix.shape[0] < block_size:
        matrix = np.block([[matrix, matrix], [matrix, -matrix]])
    if normalize:
        matrix = matrix / math.sqrt(block_size)
    return matrix
