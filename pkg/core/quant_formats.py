"""
Codecs de quantification bit-exacts : INT8 (symétrique / asymétrique),
NVFP4 (E2M1 avec échelle FP8-E4M3 par bloc de 16) et passage FP16.

Conventions :
- tout arrondi se fait au plus proche, égalités vers le pair (np.rint) ;
- NVFP4 utilise deux niveaux d'échelle : un normaliseur par tenseur g,
  plus petite puissance de deux ≥ max|x| / (6 · 448), et une échelle E4M3 par
  bloc qui reste dans la plage E4M3 ; l'échelle effective E4M3 × g est exacte ;
- les calculs internes sont en float64, le résultat déquantifié reprend le
  dtype source.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import numpy as np

from .exceptions import QuantizationError, TensorFormatError
from .tensors import (
    DTYPE_INT8_ASYM,
    DTYPE_INT8_SYM,
    DTYPE_NVFP4,
    as_tensor,
    element_count,
    pack_header,
    unpack_header,
)
from .utils import PathLike, atomic_write_bytes

logger = logging.getLogger(__name__)


class QuantFormat(str, Enum):
    INT8_SYM = 'int8_sym'
    INT8_ASYM = 'int8_asym'
    NVFP4 = 'nvfp4'
    FP16_PASSTHROUGH = 'fp16_passthrough'
    IDENTITY = 'identity'


# Bits par élément d'activation pour la comptabilité des rapports
FORMAT_BITS = {
    QuantFormat.NVFP4: 4,
    QuantFormat.INT8_SYM: 8,
    QuantFormat.INT8_ASYM: 8,
    QuantFormat.FP16_PASSTHROUGH: 16,
    QuantFormat.IDENTITY: 32,
}

NVFP4_BLOCK = 16
E4M3_MAX = 448.0
FP4_MAX = 6.0
F32_TINY = float(np.finfo(np.float32).tiny)

# Magnitudes E2M1 indexées par les 3 bits bas du code (le bit 0 est la mantisse)
FP4_MAGNITUDES = np.array([0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0])
# Valeur des 16 codes : bit 3 = signe
FP4_VALUES = np.concatenate([FP4_MAGNITUDES, -FP4_MAGNITUDES])
_FP4_MIDPOINTS = (FP4_MAGNITUDES[1:] + FP4_MAGNITUDES[:-1]) / 2.0


@dataclass(frozen=True)
class QuantizedTensor:
    """Codes + métadonnées d'échelle sous un format nommé.

    - INT8 : `scale` (et `zero_point` en asymétrique) ont une entrée par groupe ;
      `group_size` None = une échelle pour tout le tenseur.
    - NVFP4 : `codes` contient un index 0..15 par élément, y compris le
      remplissage final (`padding` éléments ignorés à la déquantification) ;
      `block_scales` sont des valeurs E4M3 et `global_scale` le normaliseur f32.
    - FP16 : `codes` est le tableau float16.
    """
    format: QuantFormat
    dims: Tuple[int, ...]
    codes: np.ndarray
    scale: Optional[np.ndarray] = None
    zero_point: Optional[np.ndarray] = None
    group_size: Optional[int] = None
    block_scales: Optional[np.ndarray] = None
    global_scale: Optional[float] = None
    padding: int = 0
    source_dtype: str = '<f4'

    @property
    def effective_scales(self) -> np.ndarray:
        """Échelle effective par bloc NVFP4 : E4M3 × g"""
        return self.block_scales * self.global_scale


# =============================================================================
# E4M3
# =============================================================================

def round_to_e4m3(values) -> np.ndarray:
    """Arrondit au plus proche E4M3 (égalités vers le pair), saturation à 448"""
    values = np.asarray(values, dtype=np.float64)
    magnitude = np.abs(values)
    _, exponent = np.frexp(magnitude)
    # frexp : m · 2^e avec m ∈ [0.5, 1) ; les sous-normaux partagent l'exposant −6
    unbiased = np.maximum(exponent - 1, -6)
    quantum = np.ldexp(1.0, unbiased - 3)
    rounded = np.minimum(np.rint(magnitude / quantum) * quantum, E4M3_MAX)
    return np.copysign(rounded, values)


def e4m3_to_bits(values) -> np.ndarray:
    """Encode des valeurs E4M3 positives (déjà arrondies) sur un octet"""
    values = np.asarray(values, dtype=np.float64)
    if np.any(values < 0):
        raise QuantizationError("block scales must be non-negative")
    _, exponent = np.frexp(values)
    unbiased = exponent - 1
    subnormal = values < 2.0 ** -6
    exp_field = np.where(subnormal, 0, unbiased + 7)
    mantissa = np.where(
        subnormal,
        values / 2.0 ** -9,
        np.ldexp(values, -np.where(subnormal, 0, unbiased)) * 8.0 - 8.0,
    )
    bits = (exp_field.astype(np.int64) << 3) | np.rint(mantissa).astype(np.int64)
    return bits.astype(np.uint8)


def e4m3_from_bits(bits) -> np.ndarray:
    bits = np.asarray(bits, dtype=np.int64)
    exp_field = bits >> 3
    mantissa = bits & 0x7
    if np.any(bits & 0x80) or np.any((exp_field == 15) & (mantissa == 7)):
        raise QuantizationError("invalid E4M3 block scale byte")
    normal = np.ldexp(1.0 + mantissa / 8.0, exp_field - 7)
    subnormal = np.ldexp(mantissa.astype(np.float64), -9)
    return np.where(exp_field == 0, subnormal, normal)


# =============================================================================
# CODES FP4
# =============================================================================

def fp4_codes(normalized) -> np.ndarray:
    """Code E2M1 le plus proche de chaque valeur normalisée (chemin rapide).

    Les égalités vont à la mantisse paire ; au-delà de 5.0 tout sature à 6.0 ;
    une magnitude nulle donne toujours le code +0.
    """
    normalized = np.asarray(normalized, dtype=np.float64)
    magnitude = np.abs(normalized)
    index = np.searchsorted(_FP4_MIDPOINTS, magnitude, side='left')
    on_midpoint = (index < len(_FP4_MIDPOINTS)) & (
        magnitude == _FP4_MIDPOINTS[np.minimum(index, len(_FP4_MIDPOINTS) - 1)]
    )
    index = np.where(on_midpoint & (index % 2 == 1), index + 1, index)
    negative = (normalized < 0) & (index > 0)
    return (index + 8 * negative).astype(np.uint8)


def oracle_nearest_fp4(values) -> np.ndarray:
    """Oracle de référence : balayage exhaustif des 16 codes.

    argmin |valeur(code) − v|, égalités vers la mantisse paire puis vers +0.
    Retourne un tableau de codes (scalaire numpy si l'entrée est scalaire).
    """
    values = np.asarray(values, dtype=np.float64)
    flat = values.reshape(-1, 1)
    distances = np.abs(FP4_VALUES[None, :] - flat)
    best = distances.min(axis=1, keepdims=True)
    codes = np.arange(16)
    mantissa = codes & 1
    # clé de départage : mantisse impaire pénalisée, puis numéro de code
    key = np.where(distances == best, mantissa * 16 + codes, 1 << 10)
    result = key.argmin(axis=1).astype(np.uint8)
    return result.reshape(values.shape)


# =============================================================================
# INT8
# =============================================================================

def _grouped(x: np.ndarray, block_size: Optional[int]) -> np.ndarray:
    flat = x.astype(np.float64)
    if block_size is None:
        return flat.reshape(1, -1)
    if x.ndim == 0 or x.shape[-1] % block_size != 0:
        raise QuantizationError(
            f"last dimension {x.shape[-1] if x.ndim else 0} is not a multiple of block size {block_size}"
        )
    return flat.reshape(-1, block_size)


def quantize_int8_sym(x, block_size: Optional[int] = None) -> QuantizedTensor:
    """s = max|x| / 127 (1 si le groupe est nul), codes = clip(⌊x/s⌉, −128, 127)"""
    x = as_tensor(x)
    groups = _grouped(x, block_size)
    amax = np.abs(groups).max(axis=1)
    scale = np.where(amax > 0, amax / 127.0, 1.0)
    codes = np.clip(np.rint(groups / scale[:, None]), -128, 127).astype(np.int8)
    return QuantizedTensor(
        format=QuantFormat.INT8_SYM,
        dims=tuple(x.shape),
        codes=codes.reshape(x.shape),
        scale=scale,
        group_size=block_size,
        source_dtype=x.dtype.str,
    )


def quantize_int8_asym(x, block_size: Optional[int] = None) -> QuantizedTensor:
    """s = (max − min) / 255, z = −⌊min/s⌉, codes = clip(⌊x/s⌉ + z, 0, 255).

    Le rapport x/s est évalué comme x·255/étendue pour que les milieux exacts
    (par exemple −1 / (2/255) = −127.5) soient arrondis sans biais. Un groupe
    constant c prend s = 1 et z = −⌊c⌉.
    """
    x = as_tensor(x)
    groups = _grouped(x, block_size)
    low = groups.min(axis=1)
    high = groups.max(axis=1)
    span = high - low
    constant = span == 0
    safe_span = np.where(constant, 255.0, span)
    scale = np.where(constant, 1.0, span / 255.0)
    ratio = groups * 255.0 / safe_span[:, None]
    zero_point = -np.rint(low * 255.0 / safe_span)
    codes = np.clip(np.rint(ratio) + zero_point[:, None], 0, 255).astype(np.uint8)
    return QuantizedTensor(
        format=QuantFormat.INT8_ASYM,
        dims=tuple(x.shape),
        codes=codes.reshape(x.shape),
        scale=scale,
        zero_point=zero_point.astype(np.int64),
        group_size=block_size,
        source_dtype=x.dtype.str,
    )


# =============================================================================
# NVFP4
# =============================================================================

def tensor_normalizer(amax: float) -> float:
    """Plus petite puissance de deux ≥ amax / (6 · 448), bornée par le plus petit normal f32"""
    target = amax / (FP4_MAX * E4M3_MAX)
    if target <= F32_TINY:
        return F32_TINY
    mantissa, exponent = math.frexp(target)
    return math.ldexp(1.0, exponent - 1 if mantissa == 0.5 else exponent)


def quantize_nvfp4(x) -> QuantizedTensor:
    """Quantification NVFP4 par blocs contigus de 16 éléments (ordre row-major)"""
    x = as_tensor(x)
    flat = x.astype(np.float64).ravel()
    padding = (-flat.size) % NVFP4_BLOCK
    blocks = np.pad(flat, (0, padding)).reshape(-1, NVFP4_BLOCK)

    amax = float(np.abs(flat).max()) if flat.size else 0.0
    global_scale = tensor_normalizer(amax)

    raw = np.abs(blocks).max(axis=1) / FP4_MAX / global_scale
    block_scales = round_to_e4m3(np.minimum(raw, E4M3_MAX))
    effective = block_scales * global_scale
    divisor = np.where(effective > 0, effective, 1.0)

    codes = fp4_codes(blocks / divisor[:, None])
    codes[effective == 0] = 0
    return QuantizedTensor(
        format=QuantFormat.NVFP4,
        dims=tuple(x.shape),
        codes=codes.ravel(),
        block_scales=block_scales,
        global_scale=global_scale,
        padding=padding,
        source_dtype=x.dtype.str,
    )


def quantize_fp16(x) -> QuantizedTensor:
    """Passage FP16 : arrondi sur la grille binary16 (au plus proche pair)"""
    x = as_tensor(x)
    codes = x.astype(np.float16)
    if not np.all(np.isfinite(codes)):
        raise QuantizationError("value out of binary16 range")
    return QuantizedTensor(
        format=QuantFormat.FP16_PASSTHROUGH,
        dims=tuple(x.shape),
        codes=codes,
        source_dtype=x.dtype.str,
    )


def quantize(x, fmt: QuantFormat, block_size: Optional[int] = None) -> QuantizedTensor:
    fmt = QuantFormat(fmt)
    if fmt is QuantFormat.INT8_SYM:
        return quantize_int8_sym(x, block_size)
    if fmt is QuantFormat.INT8_ASYM:
        return quantize_int8_asym(x, block_size)
    if fmt is QuantFormat.NVFP4:
        return quantize_nvfp4(x)
    if fmt is QuantFormat.FP16_PASSTHROUGH:
        return quantize_fp16(x)
    raise QuantizationError(f"format {fmt.value} has no codec")


def dequantize(q: QuantizedTensor) -> np.ndarray:
    dtype = np.dtype(q.source_dtype)
    if q.format is QuantFormat.FP16_PASSTHROUGH:
        return q.codes.astype(dtype).reshape(q.dims)

    if q.format in (QuantFormat.INT8_SYM, QuantFormat.INT8_ASYM):
        codes = q.codes.astype(np.int64)
        low, high = (-128, 127) if q.format is QuantFormat.INT8_SYM else (0, 255)
        if codes.size and (codes.min() < low or codes.max() > high):
            raise QuantizationError(f"{q.format.value} code out of range")
        group = codes.size if q.group_size is None else q.group_size
        grouped = codes.reshape(-1, group).astype(np.float64)
        if q.zero_point is not None:
            grouped = grouped - q.zero_point[:, None]
        values = grouped * q.scale[:, None]
        return values.reshape(q.dims).astype(dtype)

    if q.format is QuantFormat.NVFP4:
        codes = q.codes.astype(np.int64)
        if codes.size and (codes.min() < 0 or codes.max() > 15):
            raise QuantizationError("nvfp4 code out of range")
        values = FP4_VALUES[codes].reshape(-1, NVFP4_BLOCK) * q.effective_scales[:, None]
        count = element_count(q.dims)
        return values.ravel()[:count].reshape(q.dims).astype(dtype)

    raise QuantizationError(f"format {q.format.value} has no codec")


def fake_quantize(x: np.ndarray, fmt: QuantFormat, block_size: Optional[int] = None) -> np.ndarray:
    """dequantize(quantize(x)) ; le format identité renvoie x tel quel"""
    fmt = QuantFormat(fmt)
    if fmt is QuantFormat.IDENTITY:
        return x
    return dequantize(quantize(x, fmt, block_size))


def weight_memory_bits(n_elements: int) -> int:
    """Bits résidents d'un poids NVFP4 : 4 bits/élément + 1 octet E4M3 par bloc + g f32"""
    n_blocks = -(-n_elements // NVFP4_BLOCK)
    return 4 * n_blocks * NVFP4_BLOCK + 8 * n_blocks + 32


# =============================================================================
# SÉRIALISATION QDT1
# =============================================================================

_FORMAT_CODES = {
    QuantFormat.INT8_SYM: DTYPE_INT8_SYM,
    QuantFormat.INT8_ASYM: DTYPE_INT8_ASYM,
    QuantFormat.NVFP4: DTYPE_NVFP4,
}
_CODE_FORMATS = {code: fmt for fmt, code in _FORMAT_CODES.items()}


def pack_nibbles(codes: np.ndarray) -> bytes:
    """Deux codes par octet, quartet bas en premier"""
    codes = np.asarray(codes, dtype=np.uint8).ravel()
    if codes.size % 2:
        codes = np.append(codes, np.uint8(0))
    return (codes[0::2] | (codes[1::2] << 4)).astype(np.uint8).tobytes()


def unpack_nibbles(buffer: bytes, count: int) -> np.ndarray:
    packed = np.frombuffer(buffer, dtype=np.uint8)
    codes = np.empty(packed.size * 2, dtype=np.uint8)
    codes[0::2] = packed & 0x0F
    codes[1::2] = packed >> 4
    return codes[:count]


def encode_quantized(q: QuantizedTensor) -> bytes:
    if q.format not in _FORMAT_CODES:
        raise TensorFormatError(f"format {q.format.value} has no quantized file layout")
    header = pack_header(_FORMAT_CODES[q.format], q.dims)
    if q.format is QuantFormat.NVFP4:
        meta = struct.pack('<fIQ', q.global_scale, q.padding, q.block_scales.size)
        return header + meta + e4m3_to_bits(q.block_scales).tobytes() + pack_nibbles(q.codes)

    meta = struct.pack('<II', q.group_size or 0, q.scale.size) + q.scale.astype('<f8').tobytes()
    if q.format is QuantFormat.INT8_ASYM:
        meta += q.zero_point.astype('<i4').tobytes()
        payload = q.codes.astype(np.uint8).tobytes()
    else:
        payload = q.codes.astype(np.int8).tobytes()
    return header + meta + payload


def decode_quantized(buffer: bytes) -> QuantizedTensor:
    dtype_code, dims, offset = unpack_header(buffer)
    if dtype_code not in _CODE_FORMATS:
        raise TensorFormatError(f"not a quantized tensor (dtype code {dtype_code})")
    fmt = _CODE_FORMATS[dtype_code]
    count = element_count(dims)

    def take(size: int) -> bytes:
        nonlocal offset
        if offset + size > len(buffer):
            raise TensorFormatError("truncated payload")
        chunk = buffer[offset:offset + size]
        offset += size
        return chunk

    if fmt is QuantFormat.NVFP4:
        global_scale, padding, n_blocks = struct.unpack('<fIQ', take(16))
        if n_blocks * NVFP4_BLOCK != count + padding:
            raise TensorFormatError("nvfp4 block count does not match extents")
        block_scales = e4m3_from_bits(np.frombuffer(take(n_blocks), dtype=np.uint8))
        codes = unpack_nibbles(take((n_blocks * NVFP4_BLOCK + 1) // 2), n_blocks * NVFP4_BLOCK)
        quantized = QuantizedTensor(
            format=fmt, dims=dims, codes=codes, block_scales=block_scales,
            global_scale=float(global_scale), padding=padding,
        )
    else:
        group_size, n_groups = struct.unpack('<II', take(8))
        scale = np.frombuffer(take(8 * n_groups), dtype='<f8').astype(np.float64)
        zero_point = None
        if fmt is QuantFormat.INT8_ASYM:
            zero_point = np.frombuffer(take(4 * n_groups), dtype='<i4').astype(np.int64)
            codes = np.frombuffer(take(count), dtype=np.uint8)
        else:
            codes = np.frombuffer(take(count), dtype=np.int8)
        if (group_size or count) * n_groups != count:
            raise TensorFormatError("int8 group layout does not match extents")
        quantized = QuantizedTensor(
            format=fmt, dims=dims, codes=codes.reshape(dims).copy(), scale=scale,
            zero_point=zero_point, group_size=group_size or None,
        )
    if offset != len(buffer):
        raise TensorFormatError("trailing bytes after payload")
    return quantized


def write_quantized(path: PathLike, q: QuantizedTensor) -> None:
    atomic_write_bytes(path, encode_quantized(q))
    logger.debug(f"Tenseur quantifié écrit: {path} ({q.format.value})")


def read_quantized(path: PathLike) -> QuantizedTensor:
    with open(path, 'rb') as handle:
        return decode_quantized(handle.read())
