"""
Agrégats d'une exécution : largeur de bits moyenne, fraction de sauts, coût

Toutes les valeurs de TraceSummary se recalculent depuis la trace seule ;
la commande `report` et le rapport d'exécution partagent le même rendu.

Largeur moyenne = Σ bits·elems / Σ elems, les activations des blocs sautés
étant comptées à 0 bit. Coût modélisé = coût MAC FP16 / coût MAC routé avec
les poids fp16 1.0, int8 0.5, nvfp4 0.25, saut 0.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

from ai_engine.kernels import PRECISION_COST
from core.exceptions import EmptyTraceError
from core.utils import atomic_write_text, format_float, PathLike

from .trace import TraceRecord

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TraceSummary:
    block_steps: int
    skipped_steps: int
    skip_fraction: float
    avg_bits: float
    cost_ratio: float
    format_counts: Dict[str, int] = field(default_factory=dict)
    max_skip_run: Dict[int, int] = field(default_factory=dict)


@dataclass(frozen=True)
class RunReport:
    config_text: str
    summary: TraceSummary
    rel_l2: float
    weight_memory_ratio: float
    records: Sequence[TraceRecord] = ()


def summarize(records: Iterable[TraceRecord]) -> TraceSummary:
    records = list(records)
    if not records:
        raise EmptyTraceError("no records")

    block_rows = [r for r in records if r.is_block_row]
    skipped = sum(1 for r in block_rows if r.skipped)

    weighted_bits = 0
    total_elems = 0
    fp16_cost = 0.0
    routed_cost = 0.0
    format_counts: Dict[str, int] = {}
    for r in records:
        if r.elems is not None:
            total_elems += r.elems
            weighted_bits += (r.bits or 0) * r.elems
        if r.macs is not None:
            fp16_cost += r.macs
            if not r.skipped:
                routed_cost += r.macs * PRECISION_COST.get(r.format, 1.0)
        if not r.is_block_row and r.format is not None:
            format_counts[r.format] = format_counts.get(r.format, 0) + 1

    # plus longue série de sauts consécutifs par bloc, dans l'ordre des pas
    max_skip_run: Dict[int, int] = {}
    current: Dict[int, int] = {}
    for r in sorted(block_rows, key=lambda row: (row.block_id, row.timestep)):
        run = current.get(r.block_id, 0) + 1 if r.skipped else 0
        current[r.block_id] = run
        max_skip_run[r.block_id] = max(max_skip_run.get(r.block_id, 0), run)

    return TraceSummary(
        block_steps=len(block_rows),
        skipped_steps=skipped,
        skip_fraction=skipped / len(block_rows) if block_rows else 0.0,
        avg_bits=weighted_bits / total_elems if total_elems else 0.0,
        cost_ratio=fp16_cost / routed_cost if routed_cost else math.inf,
        format_counts=dict(sorted(format_counts.items())),
        max_skip_run=dict(sorted(max_skip_run.items())),
    )


# =============================================================================
# RENDU
# =============================================================================

def render_summary(summary: TraceSummary) -> List[str]:
    lines = [
        f"block_steps = {summary.block_steps}",
        f"skipped_steps = {summary.skipped_steps}",
        f"skip_fraction = {format_float(summary.skip_fraction)}",
        f"avg_bits = {format_float(summary.avg_bits)}",
        f"cost_ratio = {format_float(summary.cost_ratio)}",
    ]
    lines += [f"format.{name} = {count}" for name, count in summary.format_counts.items()]
    lines += [f"max_skip_run.block_{b} = {run}" for b, run in summary.max_skip_run.items()]
    return lines


def render_report(report: RunReport) -> str:
    lines = ['# config']
    lines += report.config_text.rstrip('\n').splitlines()
    lines.append('# summary')
    lines.append(f"rel_l2 = {format_float(report.rel_l2)}")
    lines.append(f"weight_memory_ratio = {format_float(report.weight_memory_ratio)}")
    lines += render_summary(report.summary)
    return '\n'.join(lines) + '\n'


def summary_line(report: RunReport) -> str:
    s = report.summary
    return (f"rel_l2={format_float(report.rel_l2)} skip_fraction={format_float(s.skip_fraction)} "
            f"avg_bits={format_float(s.avg_bits)} cost_ratio={format_float(s.cost_ratio)}")


def write_report(path: PathLike, report: RunReport) -> None:
    atomic_write_text(path, render_report(report))
    logger.info(f"Rapport écrit: {path}")


def config_text_from_report(text: str) -> str:
    """Extrait la section '# config' d'un rapport"""
    lines = text.splitlines()
    try:
        start = lines.index('# config') + 1
        end = lines.index('# summary')
    except ValueError:
        return ''
    return '\n'.join(lines[start:end]) + '\n'


def summary_values(text: str) -> Dict[str, str]:
    """Paires clé/valeur de la section '# summary' (ou d'une sortie de `report`)"""
    values: Dict[str, str] = {}
    in_summary = '# summary' not in text
    for line in text.splitlines():
        if line == '# summary':
            in_summary = True
            continue
        if in_summary and ' = ' in line:
            key, _, value = line.partition(' = ')
            values[key.strip()] = value.strip()
    return values


def find_record(records: Iterable[TraceRecord], timestep: int, block_id: int,
                layer_id: Optional[str] = None) -> Optional[TraceRecord]:
    for r in records:
        if r.timestep == timestep and r.block_id == block_id and r.layer_id == layer_id:
            return r
    return None
