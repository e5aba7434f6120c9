"""
Tenseurs denses et format binaire QDT1

Un tenseur est un numpy.ndarray contigu en ordre ligne (row-major), float32
pour les activations du pipeline et float64 pour les métriques et la
calibration. f16 et bf16 n'existent qu'aux frontières fichier : ils sont
élargis en float32 à la lecture.

Format QDT1 (little-endian) :
    magic "QDT1" (4 octets) | u8 dtype | u8 rang r | 6 octets réservés à zéro
    | r × u64 étendues | charge utile row-major
"""

from __future__ import annotations

import logging
import struct
from typing import Iterable, Optional, Tuple

import numpy as np

from .exceptions import NonFiniteError, TensorFormatError
from .utils import PathLike, atomic_write_bytes

logger = logging.getLogger(__name__)

MAGIC = b'QDT1'
HEADER = struct.Struct('<4sBB6x')

DTYPE_F32 = 0
DTYPE_F64 = 1
DTYPE_F16 = 2
DTYPE_BF16 = 3

# Codes réservés aux QuantizedTensor (voir core.quant_formats)
DTYPE_INT8_SYM = 16
DTYPE_INT8_ASYM = 17
DTYPE_NVFP4 = 18

_ITEMSIZE = {DTYPE_F32: 4, DTYPE_F64: 8, DTYPE_F16: 2, DTYPE_BF16: 2}
_NUMPY_DTYPES = {DTYPE_F32: '<f4', DTYPE_F64: '<f8', DTYPE_F16: '<f2'}

MAX_ELEMENTS = 1 << 40


def as_tensor(values, dtype=None, what: str = 'tensor') -> np.ndarray:
    """Convertit en ndarray flottant contigu et vérifie que tout est fini"""
    array = np.ascontiguousarray(values, dtype=dtype)
    if array.dtype.kind != 'f':
        array = array.astype(np.float64)
    check_finite(array, what)
    return array


def check_finite(array: np.ndarray, what: str = 'tensor') -> None:
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"{what} contains non-finite elements")


# =============================================================================
# EN-TÊTE
# =============================================================================

def pack_header(dtype_code: int, dims: Iterable[int]) -> bytes:
    dims = tuple(int(d) for d in dims)
    if len(dims) > 255:
        raise TensorFormatError(f"rank {len(dims)} exceeds 255")
    if any(d <= 0 for d in dims):
        raise TensorFormatError(f"extents must be positive, got {dims}")
    if element_count(dims) > MAX_ELEMENTS:
        raise TensorFormatError("extent overflow")
    return HEADER.pack(MAGIC, dtype_code, len(dims)) + struct.pack(f'<{len(dims)}Q', *dims)


def unpack_header(buffer: bytes) -> Tuple[int, Tuple[int, ...], int]:
    """Retourne (dtype, étendues, offset du début de la charge utile)"""
    if len(buffer) < HEADER.size:
        raise TensorFormatError("truncated header")
    magic, dtype_code, rank = HEADER.unpack_from(buffer, 0)
    if magic != MAGIC:
        raise TensorFormatError("bad magic")
    if buffer[6:HEADER.size] != bytes(6):
        raise TensorFormatError("reserved header bytes must be zero")
    offset = HEADER.size
    end = offset + 8 * rank
    if len(buffer) < end:
        raise TensorFormatError("truncated extents")
    dims = struct.unpack_from(f'<{rank}Q', buffer, offset)
    count = 1
    for extent in dims:
        if extent == 0:
            raise TensorFormatError("zero extent")
        count *= extent
        if count > MAX_ELEMENTS:
            raise TensorFormatError("extent overflow")
    return dtype_code, tuple(dims), end


def element_count(dims: Iterable[int]) -> int:
    count = 1
    for extent in dims:
        count *= int(extent)
    return count


# =============================================================================
# BFLOAT16
# =============================================================================

def bf16_bits_from_f32(values: np.ndarray) -> np.ndarray:
    """Arrondi au plus proche pair de f32 vers bf16 (16 bits de poids fort)"""
    bits = np.ascontiguousarray(values, dtype='<f4').view('<u4').astype(np.uint64)
    rounding = ((bits >> 16) & 1) + 0x7FFF
    return ((bits + rounding) >> 16).astype('<u2')


def f32_from_bf16_bits(bits: np.ndarray) -> np.ndarray:
    return (bits.astype('<u4') << 16).view('<f4')


# =============================================================================
# LECTURE / ÉCRITURE
# =============================================================================

def encode_tensor(tensor: np.ndarray, dtype_code: Optional[int] = None) -> bytes:
    tensor = np.asarray(tensor)
    if dtype_code is None:
        dtype_code = DTYPE_F64 if tensor.dtype == np.float64 else DTYPE_F32
    if dtype_code not in _ITEMSIZE:
        raise TensorFormatError(f"unsupported tensor dtype code {dtype_code}")
    check_finite(tensor)
    if dtype_code == DTYPE_BF16:
        payload = bf16_bits_from_f32(tensor.astype(np.float32)).tobytes()
    else:
        converted = tensor.astype(_NUMPY_DTYPES[dtype_code])
        check_finite(converted, 'converted tensor')
        payload = np.ascontiguousarray(converted).tobytes()
    return pack_header(dtype_code, tensor.shape) + payload


def decode_tensor(buffer: bytes) -> np.ndarray:
    dtype_code, dims, offset = unpack_header(buffer)
    if dtype_code not in _ITEMSIZE:
        raise TensorFormatError(f"unsupported tensor dtype code {dtype_code}")
    expected = element_count(dims) * _ITEMSIZE[dtype_code]
    available = len(buffer) - offset
    if available < expected:
        raise TensorFormatError("truncated payload")
    if available > expected:
        raise TensorFormatError("trailing bytes after payload")
    raw = buffer[offset:]
    if dtype_code == DTYPE_BF16:
        values = f32_from_bf16_bits(np.frombuffer(raw, dtype='<u2'))
    else:
        values = np.frombuffer(raw, dtype=_NUMPY_DTYPES[dtype_code])
        if dtype_code == DTYPE_F16:
            values = values.astype(np.float32)
    tensor = values.reshape(dims).astype(values.dtype.newbyteorder('='), copy=True)
    check_finite(tensor, 'tensor payload')
    return tensor


def write_tensor(path: PathLike, tensor: np.ndarray, dtype_code: Optional[int] = None) -> None:
    atomic_write_bytes(path, encode_tensor(tensor, dtype_code))
    logger.debug(f"Tenseur écrit: {path} {tuple(np.shape(tensor))}")


def read_tensor(path: PathLike) -> np.ndarray:
    with open(path, 'rb') as handle:
        buffer = handle.read()
    return decode_tensor(buffer)
