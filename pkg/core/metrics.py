"""
Distances relatives et dissimilarité cosinus

Toutes les métriques calculent en float64, quel que soit le dtype d'entrée.
Une norme de référence nulle lève ZeroNormError au lieu de renvoyer 0 ou Inf.
"""

from __future__ import annotations

from enum import Enum

import numpy as np

from .exceptions import ShapeMismatchError, ZeroNormError


class MetricKind(str, Enum):
    REL_L1 = 'rel_l1'
    REL_L2 = 'rel_l2'
    COSINE_DISSIM = 'cosine_dissim'


def _pair(ref, other):
    ref = np.asarray(ref, dtype=np.float64)
    other = np.asarray(other, dtype=np.float64)
    if ref.shape != other.shape:
        raise ShapeMismatchError(f"dimension mismatch: {ref.shape} vs {other.shape}")
    return ref.ravel(), other.ravel()


def rel_l1(ref, other) -> float:
    """‖other − ref‖₁ / ‖ref‖₁"""
    ref, other = _pair(ref, other)
    norm = np.abs(ref).sum()
    if norm == 0.0:
        raise ZeroNormError("zero-norm reference for rel_l1")
    return float(np.abs(other - ref).sum() / norm)


def rel_l2(ref, other) -> float:
    """‖ref − other‖₂ / ‖ref‖₂"""
    ref, other = _pair(ref, other)
    norm = np.linalg.norm(ref)
    if norm == 0.0:
        raise ZeroNormError("zero-norm reference for rel_l2")
    return float(np.linalg.norm(ref - other) / norm)


def cosine_dissim(a, b) -> float:
    """1 − cos(a, b), borné à [0, 2]"""
    a, b = _pair(a, b)
    norm_a = np.linalg.norm(a)
    norm_b = np.linalg.norm(b)
    if norm_a == 0.0 or norm_b == 0.0:
        raise ZeroNormError("zero-norm input for cosine_dissim")
    cosine = float(np.dot(a, b) / (norm_a * norm_b))
    return min(max(1.0 - cosine, 0.0), 2.0)


_METRICS = {
    MetricKind.REL_L1: rel_l1,
    MetricKind.REL_L2: rel_l2,
    MetricKind.COSINE_DISSIM: cosine_dissim,
}


def distance(kind: MetricKind, ref, other) -> float:
    """Applique la métrique `kind` ; pour les métriques relatives `ref` est la référence"""
    return _METRICS[MetricKind(kind)](ref, other)
