"""
Transformeur de diffusion jouet, déterministe

Chaque bloc est résiduel (X_out = X_in + Δ) et contient six couches linéaires
quantifiables individuellement :

    u = LN(x) + t_emb
    h = x + o(attention(q(u), k(u), v(u)))
    y = h + fc2(gelu(fc1(LN(h) + t_emb)))

Les poids [d_in, d_out] (sans biais) sont tirés N(0, 1)·gain/√d_in avec la
graine model_seed. Les gains des projections de sortie (o, fc2) sont petits et
croissent avec la profondeur, de sorte que Γ des blocs se répartit de part et
d'autre de τ_Γ. Les blocs d'indice impair reçoivent des colonnes aberrantes
dans fc1 : les activations d'entrée de fc2 y ont une queue lourde.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from core.config import EngineConfig
from core.exceptions import ConfigError, ShapeMismatchError

logger = logging.getLogger(__name__)

LAYER_IDS = ('q', 'k', 'v', 'o', 'fc1', 'fc2')
MLP_RATIO = 4
LN_EPS = 1e-5

# Gains d'initialisation
QK_GAIN = 0.5
VALUE_GAIN = 1.0
OUT_GAIN = 0.02
DEPTH_GAIN_RANGE = (0.6, 1.5)

LayerKey = Tuple[int, str]
LinearFn = Callable[[int, str, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class ToyModelSpec:
    n_blocks: int = 4
    hidden_dim: int = 64
    seq_len: int = 128
    text_len: int = 16
    n_heads: int = 4
    model_seed: int = 1234
    outlier_channels: int = 2
    outlier_gain: float = 8.0
    t_embed_scale: float = 0.1

    @classmethod
    def from_config(cls, config: EngineConfig) -> 'ToyModelSpec':
        return cls(
            n_blocks=config.n_blocks,
            hidden_dim=config.hidden_dim,
            seq_len=config.seq_len,
            text_len=config.text_len,
            n_heads=config.n_heads,
            model_seed=config.model_seed,
            outlier_channels=config.outlier_channels,
            outlier_gain=config.outlier_gain,
            t_embed_scale=config.t_embed_scale,
        )

    @property
    def mlp_dim(self) -> int:
        return MLP_RATIO * self.hidden_dim

    def layer_shape(self, layer_id: str) -> Tuple[int, int]:
        d, m = self.hidden_dim, self.mlp_dim
        if layer_id == 'fc1':
            return d, m
        if layer_id == 'fc2':
            return m, d
        return d, d


@dataclass(frozen=True)
class Schedule:
    n_timesteps: int = 50
    eta: float = 0.05

    @classmethod
    def from_config(cls, config: EngineConfig) -> 'Schedule':
        return cls(n_timesteps=config.n_timesteps, eta=config.eta)


# =============================================================================
# OPÉRATIONS ÉLÉMENTAIRES
# =============================================================================

def layer_norm(x: np.ndarray) -> np.ndarray:
    """LayerNorm sans paramètres affines sur la dernière dimension"""
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / np.sqrt(var + LN_EPS)


def gelu_tanh(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x * x * x)))


def softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    weights = np.exp(shifted)
    return weights / weights.sum(axis=-1, keepdims=True)


def attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, n_heads: int) -> np.ndarray:
    """Attention multi-têtes bidirectionnelle, calculée en pleine précision"""
    *lead, seq, dim = q.shape
    head_dim = dim // n_heads

    def split(t):
        return np.swapaxes(t.reshape(*lead, seq, n_heads, head_dim), -3, -2)

    qh, kh, vh = split(q), split(k), split(v)
    scores = (qh @ np.swapaxes(kh, -1, -2)) * (1.0 / math.sqrt(head_dim))
    out = softmax(scores) @ vh
    return np.swapaxes(out, -3, -2).reshape(*lead, seq, dim)


# =============================================================================
# MODÈLE
# =============================================================================

class ToyDiT:
    """Poids du modèle jouet et passe avant d'un bloc"""

    def __init__(self, spec: ToyModelSpec, weights: Optional[Dict[LayerKey, np.ndarray]] = None,
                 dtype=np.float32):
        if spec.hidden_dim % spec.n_heads != 0:
            raise ConfigError("hidden_dim must be divisible by n_heads")
        self.spec = spec
        self.dtype = np.dtype(dtype)
        if weights is None:
            weights = self._init_weights()
        self.weights = {key: np.ascontiguousarray(w, dtype=self.dtype) for key, w in weights.items()}
        self._embedding_freqs = np.linspace(0.5, 1.0, spec.hidden_dim // 2)

    def _init_weights(self) -> Dict[LayerKey, np.ndarray]:
        spec = self.spec
        rng = np.random.default_rng(spec.model_seed)
        low, high = DEPTH_GAIN_RANGE
        depth_gains = np.linspace(low, high, spec.n_blocks) if spec.n_blocks > 1 else np.array([low])
        gains = {'q': QK_GAIN, 'k': QK_GAIN, 'v': VALUE_GAIN, 'fc1': 1.0}

        weights: Dict[LayerKey, np.ndarray] = {}
        for block_id in range(spec.n_blocks):
            for layer_id in LAYER_IDS:
                d_in, d_out = spec.layer_shape(layer_id)
                gain = gains.get(layer_id, OUT_GAIN * depth_gains[block_id])
                w = rng.standard_normal((d_in, d_out)) * (gain / math.sqrt(d_in))
                if layer_id == 'fc1' and block_id % 2 == 1 and spec.outlier_channels:
                    w[:, :spec.outlier_channels] *= spec.outlier_gain
                weights[(block_id, layer_id)] = w
        logger.debug(f"Poids initialisés: {spec.n_blocks} blocs, graine {spec.model_seed}")
        return weights

    @property
    def layer_keys(self):
        return [(b, layer_id) for b in range(self.spec.n_blocks) for layer_id in LAYER_IDS]

    def timestep_embedding(self, t: int, n_timesteps: int) -> np.ndarray:
        """Plongement sinusoïdal lent : un quart de tour au plus sur la trajectoire"""
        phase = 0.5 * math.pi * (t / max(n_timesteps, 1)) * self._embedding_freqs
        embedding = np.concatenate([np.sin(phase), np.cos(phase)]) * self.spec.t_embed_scale
        return embedding.astype(self.dtype)

    def prompt(self, seed: int) -> Tuple[np.ndarray, np.ndarray]:
        """(préfixe texte, bruit initial des jetons visuels) tirés de la graine"""
        spec = self.spec
        rng = np.random.default_rng(seed)
        text = rng.standard_normal((spec.text_len, spec.hidden_dim)).astype(self.dtype)
        noise = rng.standard_normal((spec.seq_len - spec.text_len, spec.hidden_dim)).astype(self.dtype)
        return text, noise

    def linear(self, block_id: int, layer_id: str, act: np.ndarray) -> np.ndarray:
        return act @ self.weights[(block_id, layer_id)]

    def block_forward(self, block_id: int, x: np.ndarray, t_embed: np.ndarray,
                      linear: Optional[LinearFn] = None) -> np.ndarray:
        """Passe avant résiduelle ; `linear` remplace les six projections"""
        if x.shape[-1] != self.spec.hidden_dim:
            raise ShapeMismatchError(
                f"block input last dimension {x.shape[-1]} != hidden_dim {self.spec.hidden_dim}"
            )
        linear = linear or self.linear

        u = layer_norm(x) + t_embed
        q = linear(block_id, 'q', u)
        k = linear(block_id, 'k', u)
        v = linear(block_id, 'v', u)
        h = x + linear(block_id, 'o', attention(q, k, v, self.spec.n_heads))

        m = layer_norm(h) + t_embed
        hidden = gelu_tanh(linear(block_id, 'fc1', m))
        return h + linear(block_id, 'fc2', hidden)
