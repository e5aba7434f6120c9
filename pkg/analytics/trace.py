"""
Trace d'exécution : une ligne par décision

Format TSV avec en-tête ; "-" marque un champ sans objet. Les lignes de bloc
(layer_id "-") portent la décision de cache ; les lignes de couche, présentes
uniquement aux pas calculés, portent le routage de précision. Les colonnes
elems / bits / macs suffisent à recalculer la largeur moyenne et le coût.
"""

from __future__ import annotations

import logging
from dataclasses import astuple, dataclass, fields
from typing import Iterable, List, Optional

from core.exceptions import EmptyTraceError, TraceFormatError
from core.utils import PathLike, atomic_write_text, format_float

logger = logging.getLogger(__name__)

DECISIONS = ('compute', 'skip')
NA = '-'


@dataclass(frozen=True)
class TraceRecord:
    timestep: int
    block_id: int
    layer_id: Optional[str] = None
    decision: str = 'compute'
    format: Optional[str] = None
    gamma_prev: Optional[float] = None
    e_rel_pred: Optional[float] = None
    e_acc: Optional[float] = None
    e_tp: Optional[float] = None
    gap: Optional[int] = None
    r_outlier: Optional[float] = None
    reason: Optional[str] = None
    elems: Optional[int] = None
    bits: Optional[int] = None
    macs: Optional[int] = None

    @property
    def is_block_row(self) -> bool:
        return self.layer_id is None

    @property
    def skipped(self) -> bool:
        return self.decision == 'skip'


TRACE_FIELDS = tuple(f.name for f in fields(TraceRecord))
TRACE_HEADER = '\t'.join(TRACE_FIELDS)

_INT_FIELDS = {'timestep', 'block_id', 'gap', 'elems', 'bits', 'macs'}
_FLOAT_FIELDS = {'gamma_prev', 'e_rel_pred', 'e_acc', 'e_tp', 'r_outlier'}
_REQUIRED = {'timestep', 'block_id', 'decision'}


def _format_field(value) -> str:
    if value is None:
        return NA
    if isinstance(value, float):
        return format_float(value)
    return str(value)


def format_record(record: TraceRecord) -> str:
    return '\t'.join(_format_field(v) for v in astuple(record))


def parse_record(line: str, line_number: Optional[int] = None) -> TraceRecord:
    parts = line.rstrip('\n').split('\t')
    if len(parts) != len(TRACE_FIELDS):
        raise TraceFormatError(f"expected {len(TRACE_FIELDS)} fields, got {len(parts)}", line_number)

    values = {}
    for name, raw in zip(TRACE_FIELDS, parts):
        if raw == NA:
            if name in _REQUIRED:
                raise TraceFormatError(f"field '{name}' is required", line_number)
            values[name] = None
            continue
        try:
            if name in _INT_FIELDS:
                values[name] = int(raw)
            elif name in _FLOAT_FIELDS:
                values[name] = float(raw)
            else:
                values[name] = raw
        except ValueError:
            raise TraceFormatError(f"invalid value {raw!r} for field '{name}'", line_number) from None

    if values['decision'] not in DECISIONS:
        raise TraceFormatError(f"unknown decision {values['decision']!r}", line_number)
    if values['timestep'] < 0 or values['block_id'] < 0:
        raise TraceFormatError("timestep and block_id must be non-negative", line_number)
    return TraceRecord(**values)


def format_trace(records: Iterable[TraceRecord]) -> str:
    lines = [TRACE_HEADER] + [format_record(r) for r in records]
    return '\n'.join(lines) + '\n'


def write_trace(path: PathLike, records: Iterable[TraceRecord]) -> None:
    records = list(records)
    atomic_write_text(path, format_trace(records))
    logger.info(f"Trace écrite: {path} ({len(records)} lignes)")


def parse_trace(text: str) -> List[TraceRecord]:
    lines = text.splitlines()
    if not lines or not any(line.strip() for line in lines):
        raise EmptyTraceError("no records")
    if lines[0].strip() != TRACE_HEADER:
        raise TraceFormatError("unexpected trace header", 1)
    records = [
        parse_record(line, line_number)
        for line_number, line in enumerate(lines[1:], start=2)
        if line.strip()
    ]
    if not records:
        raise EmptyTraceError("no records")
    return records


def read_trace(path: PathLike) -> List[TraceRecord]:
    try:
        with open(path, 'r', encoding='utf-8') as handle:
            text = handle.read()
    except OSError as e:
        raise TraceFormatError(f"cannot read trace {path}: {e}") from e
    return parse_trace(text)
