"""
Configuration d'expérience du moteur

Format texte plat, une clé par ligne :

    # commentaire
    tau_cache = 0.003
    calib_seeds = 0-3

Toute clé inconnue est rejetée. La configuration résolue (valeurs par défaut
comprises) est recopiée telle quelle dans chaque rapport : la relire redonne
exactement la même EngineConfig.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields, replace
from typing import Any, Callable, Dict, Optional, Tuple

from .exceptions import ConfigError
from .hadamard import is_power_of_two
from .utils import PathLike, format_float, parse_int_list

logger = logging.getLogger(__name__)

TDC_METRICS = ('cosine_dissim', 'rel_l2', 'rel_l1')
CACHE_COMPRESS = ('off', 'nvfp4')
POST_SKIP_FORMATS = ('int8', 'fp16')
INT8_MODES = ('sym', 'asym')
QUANT_MODES = ('dmpq', 'identity', 'fp16')
CALIB_TARGETS = ('both', 'activation', 'weight', 'none')


@dataclass(frozen=True)
class EngineConfig:
    # DMPQ
    tau_rel: float = 0.0025
    tau_gamma_override: Optional[float] = 0.015
    eps_slope: float = 1e-8
    # TDC
    rho: float = 0.001
    tau_cache: float = 0.003
    n_max: int = 2
    tdc_metric: str = 'cosine_dissim'
    cache_compress: str = 'off'
    cache_noise_std: float = 0.0
    # PDR
    tau_outlier: float = 25.0
    sample_stride: int = 1
    post_skip_format: str = 'int8'
    pdr_enabled: bool = True
    fp16_hadamard: bool = False
    # Hadamard / activations
    hadamard_block: int = 128
    hadamard_enabled: bool = True
    activation_int8_mode: str = 'sym'
    # Modèle jouet
    n_blocks: int = 4
    hidden_dim: int = 64
    seq_len: int = 128
    text_len: int = 16
    n_heads: int = 4
    model_seed: int = 1234
    outlier_channels: int = 2
    outlier_gain: float = 8.0
    t_embed_scale: float = 0.1
    # Ordonnanceur
    n_timesteps: int = 50
    eta: float = 0.05
    seed: int = 0
    # Workflow
    quant_mode: str = 'dmpq'
    calib_seeds: Tuple[int, ...] = (0, 1, 2, 3)
    calib_quant_target: str = 'both'
    ablation_seeds: Tuple[int, ...] = field(default=tuple(range(10)))

    def to_text(self) -> str:
        """Texte "clé = valeur" de toutes les clés, dans l'ordre de déclaration"""
        lines = [f"{f.name} = {_format_value(getattr(self, f.name))}" for f in fields(self)]
        return '\n'.join(lines) + '\n'

    def with_overrides(self, **overrides: Any) -> 'EngineConfig':
        updated = replace(self, **overrides)
        updated.validate()
        return updated

    def validate(self) -> None:
        """Lève ConfigError à la première incohérence"""
        checks = [
            (self.tau_rel >= 0, "tau_rel must be >= 0"),
            (self.tau_gamma_override is None or not math.isnan(self.tau_gamma_override),
             "tau_gamma_override must be a number or none"),
            (self.eps_slope >= 0, "eps_slope must be >= 0"),
            (self.rho >= 0, "rho must be >= 0"),
            (self.tau_cache >= 0, "tau_cache must be >= 0"),
            (self.n_max >= 1, "n_max must be >= 1"),
            (self.cache_noise_std >= 0, "cache_noise_std must be >= 0"),
            (self.tau_outlier > 1, "tau_outlier must be > 1"),
            (self.sample_stride >= 1, "sample_stride must be >= 1"),
            (is_power_of_two(self.hadamard_block) and self.hadamard_block >= 2,
             "hadamard_block must be a power of two >= 2"),
            (self.n_blocks >= 1, "n_blocks must be >= 1"),
            (self.hidden_dim >= 2 and self.hidden_dim % 2 == 0, "hidden_dim must be even"),
            (self.n_heads >= 1 and self.hidden_dim % self.n_heads == 0,
             "hidden_dim must be divisible by n_heads"),
            (0 <= self.text_len < self.seq_len, "text_len must be in [0, seq_len)"),
            (0 <= self.outlier_channels <= 4 * self.hidden_dim,
             "outlier_channels must be in [0, 4 * hidden_dim]"),
            (self.outlier_gain > 0, "outlier_gain must be > 0"),
            (self.t_embed_scale >= 0, "t_embed_scale must be >= 0"),
            (self.n_timesteps >= 1, "n_timesteps must be >= 1"),
            (self.eta >= 0, "eta must be >= 0"),
            (len(self.calib_seeds) >= 1, "calib_seeds must list at least one seed"),
            (len(self.ablation_seeds) >= 1, "ablation_seeds must list at least one seed"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)


# =============================================================================
# CONVERSIONS
# =============================================================================

def _parse_bool(raw: str) -> bool:
    value = raw.strip().lower()
    if value in ('true', '1', 'yes', 'on'):
        return True
    if value in ('false', '0', 'no', 'off'):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_float(raw: str) -> float:
    value = float(raw)
    if math.isnan(value):
        raise ValueError("nan is not allowed")
    return value


def _parse_optional_float(raw: str) -> Optional[float]:
    if raw.strip().lower() == 'none':
        return None
    return _parse_float(raw)


def _parse_seeds(raw: str) -> Tuple[int, ...]:
    seeds = tuple(parse_int_list(raw))
    if any(seed < 0 for seed in seeds):
        raise ValueError("seeds must be non-negative")
    return seeds


def _choice(options: Tuple[str, ...]) -> Callable[[str], str]:
    def parse(raw: str) -> str:
        value = raw.strip()
        if value not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return value
    return parse


_PARSERS: Dict[str, Callable[[str], Any]] = {
    'tau_gamma_override': _parse_optional_float,
    'tdc_metric': _choice(TDC_METRICS),
    'cache_compress': _choice(CACHE_COMPRESS),
    'post_skip_format': _choice(POST_SKIP_FORMATS),
    'activation_int8_mode': _choice(INT8_MODES),
    'quant_mode': _choice(QUANT_MODES),
    'calib_quant_target': _choice(CALIB_TARGETS),
    'calib_seeds': _parse_seeds,
    'ablation_seeds': _parse_seeds,
}

_BY_TYPE: Dict[Any, Callable[[str], Any]] = {
    'float': _parse_float,
    'int': int,
    'bool': _parse_bool,
}


def _parser_for(name: str, annotation: Any) -> Callable[[str], Any]:
    if name in _PARSERS:
        return _PARSERS[name]
    return _BY_TYPE[annotation]


def _format_value(value: Any) -> str:
    if value is None:
        return 'none'
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return format_float(value)
    if isinstance(value, tuple):
        return ','.join(str(v) for v in value)
    return str(value)


# =============================================================================
# LECTURE
# =============================================================================

def parse_config_text(text: str) -> EngineConfig:
    known = {f.name: f for f in fields(EngineConfig)}
    values: Dict[str, Any] = {}
    for line_number, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split('#', 1)[0].strip()
        if not line:
            continue
        key, sep, raw_value = line.partition('=')
        key = key.strip()
        if not sep:
            raise ConfigError(f"line {line_number}: expected 'key = value'")
        if key not in known:
            raise ConfigError(f"line {line_number}: unknown key '{key}'")
        if key in values:
            raise ConfigError(f"line {line_number}: duplicate key '{key}'")
        parser = _parser_for(key, known[key].type)
        try:
            values[key] = parser(raw_value.strip())
        except ValueError as e:
            raise ConfigError(f"line {line_number}: invalid value for '{key}': {e}") from e

    config = EngineConfig(**values)
    config.validate()
    return config


def load_config(path: Optional[PathLike] = None) -> EngineConfig:
    """Lit un fichier de configuration ; sans chemin, toutes les valeurs par défaut"""
    if path is None:
        config = EngineConfig()
        config.validate()
        return config
    try:
        with open(path, 'r', encoding='utf-8') as handle:
            text = handle.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    config = parse_config_text(text)
    logger.debug(f"Configuration chargée depuis {path}")
    return config
